import math
import time
import zlib

import numpy as np
import pandas as pd
import pytest
import torch

from gactgan.data import CATEGORICAL, CONTINUOUS, ColumnSchema, ContinuousTransform, Span, fit_transformer
from gactgan.gan import (
    CondSampler,
    Discriminator,
    Generator,
    TrainConfig,
    apply_activation,
    cond_loss,
    flatten_params,
    gradient_penalty,
    load_params,
    make_optimizer,
    n_params,
    train,
    vanilla_d_loss,
    vanilla_g_loss,
    vanilla_losses,
    wasserstein_losses,
)

# tiny layout: one tanh scalar then a 2-way categorical
SPANS = [Span("x", 0, 1, "tanh"), Span("c", 1, 2, "softmax")]
CAT_SPANS = [SPANS[1]]


def _tiny_nets(dropout=0.5):
    with torch.random.fork_rng():
        torch.manual_seed(0)
        g = Generator(noise_dim=1, cond_dim=2, data_dim=3, hidden=(2,)).double()
        d = Discriminator(input_dim=5, pac=2, hidden=(2,), dropout=dropout).double()
    return g, d


def test_tiny_nets_are_small():
    g, d = _tiny_nets()
    assert n_params(g) <= 50 and n_params(d) <= 50


# -- conditional sampling ----------------------------------------------------


def _sampler_90_10(log_frequency):
    span = Span("c", 0, 2, "softmax")
    rows = [[np.arange(90), np.arange(90, 100)]]
    return CondSampler([np.array([90, 10])], [span], rows, log_frequency=log_frequency)


def test_condition_frequencies_softmax_log_counts():
    s = _sampler_90_10(log_frequency=False)
    cond, _, _ = s.sample_condition(10_000, np.random.default_rng(0))
    closed = np.exp([math.log(90), math.log(10)])
    closed /= closed.sum()
    np.testing.assert_allclose(cond.mean(axis=0), closed, atol=0.02)


def test_condition_frequencies_log_plus_one_default():
    s = _sampler_90_10(log_frequency=True)
    cond, _, _ = s.sample_condition(10_000, np.random.default_rng(0))
    closed = np.log([91.0, 11.0])
    closed /= closed.sum()
    np.testing.assert_allclose(cond.mean(axis=0), closed, atol=0.02)


def test_original_frequencies_at_synthesis():
    s = _sampler_90_10(log_frequency=True)
    cond = s.sample_original(10_000, np.random.default_rng(1))
    np.testing.assert_allclose(cond.mean(axis=0), [0.9, 0.1], atol=0.02)


def _cat_table(n=600, seed=0):
    rng = np.random.default_rng(seed)
    return pd.DataFrame(
        {
            "x": rng.normal(size=n),
            "a": rng.choice(["p", "q", "r"], n, p=[0.6, 0.3, 0.1]),
            "b": rng.choice(["u", "v"], n),
        }
    )


def _cat_schema():
    return [ColumnSchema("x", CONTINUOUS), ColumnSchema("a", CATEGORICAL), ColumnSchema("b", CATEGORICAL)]


def test_cond_vectors_and_matched_rows():
    df = _cat_table()
    tr = fit_transformer(df, _cat_schema())
    enc = tr.encode(df, np.random.default_rng(0))
    s = CondSampler.from_encoded(enc, tr)
    assert s.cond_dim == 5
    cond, mask, rows = s.sample_condition(3000, np.random.default_rng(2))
    assert np.all(cond.sum(axis=1) == 1) and set(np.unique(cond)) == {0.0, 1.0}
    assert np.all(mask.sum(axis=1) == 1)
    spans = tr.layout.categorical_spans
    for c, m, r in zip(cond, mask, rows):
        col = int(m.argmax())
        cat = int(c[s.offsets[col] : s.offsets[col] + spans[col].width].argmax())
        assert enc[r, spans[col].start + cat] == 1.0
    # both columns chosen about equally often
    assert abs(mask[:, 0].mean() - 0.5) < 0.04


def test_every_observed_category_has_rows():
    df = _cat_table(50, 3)
    tr = fit_transformer(df, _cat_schema())
    s = CondSampler.from_encoded(tr.encode(df, np.random.default_rng(0)), tr)
    for counts, rows in zip(s.counts, s.rows):
        for c, r in zip(counts, rows):
            assert (c > 0) == (len(r) > 0)


def test_no_categorical_columns_gives_empty_conditions():
    s = CondSampler([], [], [])
    cond, mask, rows = s.sample_condition(7, np.random.default_rng(0))
    assert cond.shape == (7, 0) and mask.shape == (7, 0) and rows is None
    assert s.cond_dim == 0


# -- losses ------------------------------------------------------------------


def test_vanilla_constant_half():
    zero = torch.zeros(8, 1, dtype=torch.float64)
    assert vanilla_d_loss(zero, zero).item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert vanilla_d_loss(zero, zero).item() == pytest.approx(1.3863, abs=1e-4)


def test_vanilla_perfect_separation():
    hi = torch.full((8, 1), 60.0, dtype=torch.float64)
    loss = vanilla_d_loss(hi, -hi).item()
    assert 0 < loss < 1e-6


def test_vanilla_g_loss_non_saturating():
    d_fake = torch.zeros(4, 1, dtype=torch.float64)
    assert vanilla_g_loss(d_fake).item() == pytest.approx(math.log(2))


def test_wasserstein_equal_scores_zero():
    _, d = _tiny_nets(dropout=0.0)
    x = torch.randn(6, 5, dtype=torch.float64)
    d_loss, _ = wasserstein_losses(d, x, x.clone(), gp_lambda=0.0)
    assert d_loss.item() == 0.0


def test_wasserstein_linear_critic():
    d = Discriminator(input_dim=1, pac=1, hidden=(), dropout=0.0).double()
    with torch.no_grad():
        d.out.weight.fill_(1.0)
        d.out.bias.zero_()
    real = torch.tensor([[1.0], [2.0], [4.0]], dtype=torch.float64)
    fake = torch.tensor([[0.5], [-1.0], [3.0]], dtype=torch.float64)
    d_loss, g_loss = wasserstein_losses(d, real, fake, gp_lambda=0.0)
    assert d_loss.item() == pytest.approx(fake.mean().item() - real.mean().item(), abs=1e-15)
    assert g_loss.item() == pytest.approx(-fake.mean().item(), abs=1e-15)


def test_gradient_penalty_matches_finite_differences():
    _, d = _tiny_nets(dropout=0.0)
    rng = torch.Generator().manual_seed(5)
    real = torch.randn(6, 5, generator=rng, dtype=torch.float64)
    fake = torch.randn(6, 5, generator=rng, dtype=torch.float64)
    gp = gradient_penalty(d, real, fake, generator=torch.Generator().manual_seed(9))
    # rebuild the same interpolates and differentiate D numerically
    alpha = torch.rand(3, 1, 1, generator=torch.Generator().manual_seed(9), dtype=torch.float64)
    interp = (alpha * real.reshape(3, 2, 5) + (1 - alpha) * fake.reshape(3, 2, 5)).reshape(6, 5)
    h = 1e-6
    norms = []
    with torch.no_grad():
        for grp in range(3):
            grad = np.zeros(10)
            for k in range(10):
                up, dn = interp.clone(), interp.clone()
                r, c = 2 * grp + k // 5, k % 5
                up[r, c] += h
                dn[r, c] -= h
                grad[k] = (d(up)[grp, 0] - d(dn)[grp, 0]).item() / (2 * h)
            norms.append(np.linalg.norm(grad))
    oracle = 10 * np.mean((np.array(norms) - 1) ** 2)
    assert abs(10 * gp.item() - oracle) <= 1e-3


def test_cond_loss_zero_when_categories_match():
    raw = torch.zeros(4, 3, dtype=torch.float64)
    target = torch.tensor([0, 1, 1, 0])
    raw[torch.arange(4), 1 + target] = 200.0
    raw[torch.arange(4), 2 - target] = -200.0
    cond = torch.nn.functional.one_hot(target, 2).double()
    mask = torch.ones(4, 1, dtype=torch.float64)
    assert cond_loss(raw, cond, mask, CAT_SPANS).item() < 1e-12


def test_cond_loss_uniform_logits():
    raw = torch.zeros(4, 3, dtype=torch.float64)
    cond = torch.tensor([[1, 0], [0, 1], [1, 0], [0, 1]], dtype=torch.float64)
    mask = torch.ones(4, 1, dtype=torch.float64)
    assert cond_loss(raw, cond, mask, CAT_SPANS).item() == pytest.approx(math.log(2))


# -- gradient checks -----------------------------------------------------------


def _fd_relative_error(module, loss_fn, h=1e-6):
    params = list(module.parameters())
    loss = loss_fn()
    analytic = torch.cat([g.reshape(-1) for g in torch.autograd.grad(loss, params)]).numpy()
    theta = flatten_params(module)
    numeric = np.zeros_like(theta)
    # grad mode stays on: the penalty term differentiates D internally
    for i in range(len(theta)):
        t = theta.copy()
        t[i] += h
        load_params(module, t)
        up = loss_fn().item()
        t[i] -= 2 * h
        load_params(module, t)
        dn = loss_fn().item()
        numeric[i] = (up - dn) / (2 * h)
    load_params(module, theta)
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)


def _losses_closure(loss, which, g, d, seed):
    gen_seed, data = seed, torch.Generator().manual_seed(seed)
    z = torch.randn(4, 1, generator=data, dtype=torch.float64)
    cond = torch.nn.functional.one_hot(torch.randint(0, 2, (4,), generator=data), 2).double()
    real = torch.cat([torch.rand(4, 1, generator=data, dtype=torch.float64) * 2 - 1,
                      torch.nn.functional.one_hot(torch.randint(0, 2, (4,), generator=data), 2).double()], 1)
    mask = torch.ones(4, 1, dtype=torch.float64)

    def generate():
        tg = torch.Generator().manual_seed(gen_seed)
        raw = g(torch.cat([z, cond], 1))
        return tg, raw, apply_activation(raw, SPANS, 0.2, tg)

    if which == "d":
        # G is fixed while D is perturbed: generate once, replay the RNG state
        tg0, _, fixed = generate()
        fixed, state = fixed.detach(), tg0.get_state()

    def fn():
        if which == "d":
            tg = torch.Generator()
            tg.set_state(state)
            raw, fake = None, fixed
        else:
            tg, raw, fake = generate()
        ce = cond_loss(raw, cond, mask, CAT_SPANS) if which == "g" else 0.0
        if loss == "vanilla":
            d_loss, g_loss = vanilla_losses(d, real, fake, cond, ce, generator=tg)
        else:
            d_loss, g_loss = wasserstein_losses(d, real, fake, cond, ce, gp_lambda=10.0, generator=tg)
        return d_loss if which == "d" else g_loss

    return fn


@pytest.mark.parametrize("loss", ["vanilla", "wasserstein"])
@pytest.mark.parametrize("which", ["g", "d"])
def test_gradients_match_finite_differences(loss, which):
    g, d = _tiny_nets()
    g.train()
    d.train()
    module = g if which == "g" else d
    rng = np.random.default_rng(zlib.crc32(f"{loss}/{which}".encode()))
    base = flatten_params(module)
    worst = 0.0
    for point in range(100):
        load_params(module, base + rng.normal(scale=0.5, size=base.shape))
        fn = _losses_closure(loss, which, g, d, seed=point)
        worst = max(worst, _fd_relative_error(module, fn))
    assert worst <= 1e-4


# -- optimiser -------------------------------------------------------------------


def test_zero_gradient_step_is_pure_decay():
    cfg = TrainConfig()
    p = torch.nn.Parameter(torch.tensor([1.5, -2.0, 3.25], dtype=torch.float64))
    expected = p.detach().clone() * (1 - cfg.learning_rate * cfg.weight_decay)
    opt = make_optimizer([p], cfg)
    for _ in range(3):
        p.grad = torch.zeros_like(p)
        opt.step()
        torch.testing.assert_close(p.detach(), expected, rtol=0, atol=0)
        expected = expected * (1 - cfg.learning_rate * cfg.weight_decay)


def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.pac, cfg.noise_dim, cfg.hidden) == (200, 500, 10, 128, (256, 256))
    assert (cfg.learning_rate, cfg.weight_decay, cfg.adam_betas) == (2e-4, 1e-6, (0.5, 0.9))
    assert (cfg.dropout, cfg.gumbel_temperature, cfg.gradient_penalty) == (0.5, 0.2, 10.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=505)
    with pytest.raises(ValueError):
        TrainConfig(loss="hinge")


# -- networks ----------------------------------------------------------------------


def test_generator_output_invariants():
    df = _cat_table()
    tr = fit_transformer(df, _cat_schema())
    g = Generator(8, 5, tr.output_width, (16, 16))
    raw = g(torch.randn(40, 13))
    out = apply_activation(raw, tr.layout.spans, 0.2, torch.Generator().manual_seed(0))
    assert out.shape == (40, tr.output_width)
    for s in tr.layout.spans:
        block = out[:, s.start : s.stop]
        if s.activation == "tanh":
            assert block.abs().max() <= 1
        else:
            torch.testing.assert_close(block.sum(1), torch.ones(40), atol=1e-6, rtol=0)


def test_discriminator_requires_pac_multiple():
    d = Discriminator(3, pac=4, hidden=(5,))
    assert d(torch.zeros(8, 3)).shape == (2, 1)
    with pytest.raises(ValueError):
        d(torch.zeros(6, 3))


def test_dropout_only_in_training_mode():
    d = Discriminator(3, pac=2, hidden=(50,), dropout=0.5)
    x = torch.randn(4, 3)
    d.eval()
    assert torch.equal(d(x), d(x))
    d.train()
    a = d(x, generator=torch.Generator().manual_seed(1))
    b = d(x, generator=torch.Generator().manual_seed(2))
    assert not torch.equal(a, b)


# -- training loop -----------------------------------------------------------------


def _tiny_cfg(**kw):
    base = dict(epochs=4, batch_size=20, pac=10, noise_dim=4, hidden=(8, 8), seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_hook_schedule():
    df = _cat_table(40)
    tr = fit_transformer(df, _cat_schema())
    calls = []
    train(df, tr, _tiny_cfg(epochs=200, batch_size=40), swag_rank=5, t_collect=50, hook=lambda t, th: calls.append(t))
    assert len(calls) == 150
    assert calls[0] == 51 and calls[-1] == 200


@pytest.mark.parametrize("loss", ["vanilla", "wasserstein"])
def test_training_is_deterministic(loss):
    df = _cat_table(100)
    tr = fit_transformer(df, _cat_schema())
    a = train(df, tr, _tiny_cfg(loss=loss), swag_rank=3, t_collect=1)
    b = train(df, tr, _tiny_cfg(loss=loss), swag_rank=3, t_collect=1)
    np.testing.assert_array_equal(flatten_params(a.generator), flatten_params(b.generator))
    np.testing.assert_array_equal(a.swag.mean, b.swag.mean)
    assert a.history == b.history
    assert len(a.history) == 4


def test_collection_does_not_perturb_training():
    df = _cat_table(100)
    tr = fit_transformer(df, _cat_schema())
    with_swag = train(df, tr, _tiny_cfg(), swag_rank=3, t_collect=1)
    without = train(df, tr, _tiny_cfg(), swag_rank=None, t_collect=1)
    assert without.swag is None
    np.testing.assert_array_equal(flatten_params(with_swag.generator), flatten_params(without.generator))


def test_weight_clipping_flag():
    df = _cat_table(100)
    tr = fit_transformer(df, _cat_schema())
    res = train(df, tr, _tiny_cfg(clip_value=0.01), swag_rank=None)
    assert np.abs(flatten_params(res.discriminator)).max() <= 0.01


def test_nan_loss_aborts_with_location(monkeypatch):
    import gactgan.gan as gan

    df = _cat_table(100)
    tr = fit_transformer(df, _cat_schema())
    monkeypatch.setattr(gan, "cond_loss", lambda raw, *a: raw.sum() * float("nan"))
    with pytest.raises(FloatingPointError, match="epoch 1, batch 0"):
        train(df, tr, _tiny_cfg(), swag_rank=None)


def test_training_time_linear_in_epochs():
    df = _cat_table(400)
    tr = fit_transformer(df, _cat_schema())

    def run(epochs):
        best = math.inf
        for _ in range(2):
            t = time.perf_counter()
            train(df, tr, _tiny_cfg(epochs=epochs, batch_size=100, hidden=(64, 64)), swag_rank=None)
            best = min(best, time.perf_counter() - t)
        return best

    t3, t12 = run(3), run(12)
    assert 4 / 1.5 <= t12 / t3 <= 4 * 1.5


def _bimodal_2col(n=5000, seed=0):
    rng = np.random.default_rng(seed)
    pick = rng.random((n, 2)) < 0.5
    vals = np.where(pick, rng.normal(-5, 1, (n, 2)), rng.normal(5, 1, (n, 2)))
    return pd.DataFrame({"u": vals[:, 0], "v": vals[:, 1]})


@pytest.mark.slow
def test_bimodal_two_continuous_columns_keep_both_modes():
    from gactgan.model import GACTGAN

    df = _bimodal_2col()
    model = GACTGAN(TrainConfig(epochs=100, seed=0), max_rank=None).fit(df)
    syn = model.sample_ctgan(5000, seed=1)
    for col in ("u", "v"):
        ct = ContinuousTransform.fit(syn[col].to_numpy(float), max_modes=2, threshold=0.0)
        lo = np.asarray(ct.mode_means).argmin()
        assert ct.n_valid == 2
        assert min(ct.mode_weights) >= 0.2, (col, ct.mode_means, ct.mode_weights)
        assert abs(ct.mode_means[lo] + 5) < 1.5 and abs(ct.mode_means[1 - lo] - 5) < 1.5
