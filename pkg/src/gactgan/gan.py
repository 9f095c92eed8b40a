"""Conditional tabular GAN: networks, losses, condition sampling and training."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import pandas as pd
import torch
from torch import nn
from torch.nn import functional as F

from .data import DataTransformer, Span

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
LOSSES = ("vanilla", "wasserstein")


@dataclass
class TrainConfig:
    loss: str = "wasserstein"
    epochs: int = 200
    batch_size: int = 500
    pac: int = 10
    noise_dim: int = 128
    hidden: tuple = (256, 256)
    learning_rate: float = 2e-4
    weight_decay: float = 1e-6
    adam_betas: tuple = (0.5, 0.9)
    dropout: float = 0.5
    gumbel_temperature: float = 0.2
    gradient_penalty: float = 10.0
    clip_value: float | None = None
    log_frequency: bool = True
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.adam_betas = tuple(self.adam_betas)
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.batch_size % self.pac:
            raise ValueError(f"batch_size {self.batch_size} is not divisible by pac {self.pac}")
        if self.epochs < 0 or self.batch_size < 1 or self.pac < 1:
            raise ValueError("epochs, batch_size and pac must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["adam_betas"] = list(self.adam_betas)
        return d


# ---------------------------------------------------------------------------
# Networks


class Residual(nn.Module):
    """Affine map, batch norm, ReLU; output concatenated with the input."""

    def __init__(self, i, o):
        super().__init__()
        self.fc = nn.Linear(i, o)
        self.bn = nn.BatchNorm1d(o)

    def forward(self, x):
        return torch.cat([F.relu(self.bn(self.fc(x))), x], dim=1)


class Generator(nn.Module):
    def __init__(self, noise_dim, cond_dim, data_dim, hidden=(256, 256)):
        super().__init__()
        self.noise_dim = noise_dim
        self.cond_dim = cond_dim
        self.data_dim = data_dim
        self.hidden = tuple(hidden)
        dim = noise_dim + cond_dim
        blocks = []
        for h in self.hidden:
            blocks.append(Residual(dim, h))
            dim += h
        self.blocks = nn.Sequential(*blocks)
        self.out = nn.Linear(dim, data_dim)

    def forward(self, x):
        return self.out(self.blocks(x))

    def descriptor(self) -> dict:
        return {
            "kind": "generator",
            "noise_dim": self.noise_dim,
            "cond_dim": self.cond_dim,
            "data_dim": self.data_dim,
            "hidden": list(self.hidden),
        }


class Discriminator(nn.Module):
    """Pac-grouped critic; ``pac`` consecutive rows are judged together.

    Dropout masks are drawn from an explicit ``torch.Generator`` so forward
    passes are reproducible without touching the global RNG.
    """

    def __init__(self, input_dim, pac=10, hidden=(256, 256), dropout=0.5):
        super().__init__()
        self.input_dim = input_dim
        self.pac = pac
        self.hidden = tuple(hidden)
        self.dropout = dropout
        dims = [input_dim * pac, *self.hidden]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(dims[-1], 1)

    def forward(self, x, generator: torch.Generator | None = None):
        if x.shape[0] % self.pac:
            raise ValueError(f"batch of {x.shape[0]} rows is not divisible by pac={self.pac}")
        h = x.reshape(-1, self.input_dim * self.pac)
        for layer in self.layers:
            h = F.leaky_relu(layer(h), 0.2)
            if self.training and self.dropout > 0:
                keep = torch.rand(h.shape, generator=generator, dtype=h.dtype) >= self.dropout
                h = h * keep / (1.0 - self.dropout)
        return self.out(h)

    def descriptor(self) -> dict:
        return {
            "kind": "discriminator",
            "input_dim": self.input_dim,
            "pac": self.pac,
            "hidden": list(self.hidden),
            "dropout": self.dropout,
        }


def gumbel_softmax(logits, tau, generator=None):
    """Soft Gumbel-softmax sample (no straight-through)."""
    u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype)
    e = (-torch.log(u.clamp_min(1e-20))).clamp_min(1e-20)
    g = -torch.log(e)
    return F.softmax((logits + g) / tau, dim=1)


def apply_activation(raw, spans: list[Span], tau=0.2, generator=None):
    """tanh on scalar slots, Gumbel-softmax on every one-hot span."""
    parts = []
    for span in spans:
        block = raw[:, span.start : span.stop]
        if span.activation == "tanh":
            parts.append(torch.tanh(block))
        else:
            parts.append(gumbel_softmax(block, tau, generator))
    return torch.cat(parts, dim=1)


# ---------------------------------------------------------------------------
# Conditional vectors


class CondSampler:
    """Training-by-sampling over the categorical columns.

    Holds, for each categorical column, the category counts (giving both the
    training distribution and the raw-frequency distribution used at
    synthesis) and the row indices carrying each category.  With
    ``log_frequency`` the training distribution is ``log(c + 1)``
    normalised, which up-weights rare categories; otherwise it is
    ``softmax(log c)``, i.e. the raw frequencies.
    """

    def __init__(self, counts: list[np.ndarray], spans: list[Span], rows: list[list[np.ndarray]] | None = None, log_frequency: bool = True):
        self.counts = [np.asarray(c, dtype=np.int64) for c in counts]
        self.log_frequency = log_frequency
        self.spans = list(spans)
        self.rows = rows
        self.offsets = np.cumsum([0] + [len(c) for c in self.counts])[:-1]
        self.cond_dim = int(sum(len(c) for c in self.counts))
        self.log_probs = []
        self.probs = []
        for c in self.counts:
            self.probs.append(c / c.sum())
            if log_frequency:
                lf = np.log(c + 1.0)
                self.log_probs.append(lf / lf.sum())
            else:
                self.log_probs.append(self.probs[-1])

    @property
    def n_columns(self) -> int:
        return len(self.counts)

    @classmethod
    def from_encoded(cls, encoded: np.ndarray, transformer: DataTransformer, log_frequency: bool = True) -> CondSampler:
        spans = transformer.layout.categorical_spans
        counts, rows = [], []
        for span in spans:
            idx = encoded[:, span.start : span.stop].argmax(axis=1)
            counts.append(np.bincount(idx, minlength=span.width))
            rows.append([np.flatnonzero(idx == j) for j in range(span.width)])
        return cls(counts, spans, rows, log_frequency)

    def _draw(self, probs, batch, rng):
        col = rng.integers(self.n_columns, size=batch)
        cat = np.empty(batch, dtype=np.int64)
        u = rng.random(batch)
        for i in range(self.n_columns):
            sel = col == i
            cdf = np.cumsum(probs[i])
            cat[sel] = np.minimum(np.searchsorted(cdf, u[sel], side="right"), len(cdf) - 1)
        cond = np.zeros((batch, self.cond_dim), dtype=np.float32)
        cond[np.arange(batch), self.offsets[col] + cat] = 1.0
        return cond, col, cat

    def sample_condition(self, batch: int, rng: np.random.Generator):
        """Conditions for a training batch.

        Returns ``(cond, mask, rows)``: one-hot condition vectors, a one-hot
        mask over categorical columns, and for each item the index of a real
        row carrying the conditioned category.  With no categorical columns
        all three are empty.
        """
        if self.n_columns == 0:
            return (np.zeros((batch, 0), dtype=np.float32), np.zeros((batch, 0), dtype=np.float32), None)
        cond, col, cat = self._draw(self.log_probs, batch, rng)
        mask = np.zeros((batch, self.n_columns), dtype=np.float32)
        mask[np.arange(batch), col] = 1.0
        rows = np.empty(batch, dtype=np.int64)
        for b in range(batch):
            candidates = self.rows[col[b]][cat[b]]
            rows[b] = candidates[rng.integers(len(candidates))]
        return cond, mask, rows

    def sample_original(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        """Conditions drawn from the empirical category frequencies (synthesis)."""
        if self.n_columns == 0:
            return np.zeros((batch, 0), dtype=np.float32)
        return self._draw(self.probs, batch, rng)[0]

    def to_dict(self) -> dict:
        return {
            "counts": [c.tolist() for c in self.counts],
            "spans": [[s.column, s.start, s.width, s.activation] for s in self.spans],
            "log_frequency": self.log_frequency,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CondSampler:
        return cls([np.asarray(c) for c in d["counts"]], [Span(*s) for s in d["spans"]], None, d.get("log_frequency", True))


def cond_loss(raw, cond, mask, spans: list[Span]):
    """Cross-entropy between generated logits and the conditioned category.

    Only the column selected by ``mask`` contributes for each row; the result
    is averaged over the batch.
    """
    if cond.shape[1] == 0:
        return raw.new_zeros(())
    losses = []
    offset = 0
    for span in spans:
        logits = raw[:, span.start : span.stop]
        target = cond[:, offset : offset + span.width].argmax(dim=1)
        losses.append(F.cross_entropy(logits, target, reduction="none"))
        offset += span.width
    losses = torch.stack(losses, dim=1)
    return (losses * mask).sum() / raw.shape[0]


# ---------------------------------------------------------------------------
# Losses


def vanilla_d_loss(d_real, d_fake):
    """Minimax discriminator loss on raw critic scores (sigmoid applied here)."""
    p_real = torch.sigmoid(d_real).clamp(PROB_EPS, 1 - PROB_EPS)
    p_fake = torch.sigmoid(d_fake).clamp(PROB_EPS, 1 - PROB_EPS)
    return -(torch.log(p_real).mean() + torch.log(1 - p_fake).mean())


def vanilla_g_loss(d_fake):
    """Non-saturating generator loss."""
    p_fake = torch.sigmoid(d_fake).clamp(PROB_EPS, 1 - PROB_EPS)
    return -torch.log(p_fake).mean()


def gradient_penalty(discriminator, real, fake, generator=None):
    """``mean((||grad D(x_hat)||_2 - 1)^2)`` over pac-group interpolates.

    One interpolation weight is drawn per pac group, and gradient norms are
    taken over the whole flattened group.
    """
    pac = discriminator.pac
    n, width = real.shape
    alpha = torch.rand(n // pac, 1, 1, generator=generator, dtype=real.dtype)
    alpha = alpha.expand(n // pac, pac, width).reshape(n, width)
    interp = (alpha * real + (1 - alpha) * fake).detach().requires_grad_(True)
    out = discriminator(interp, generator=generator)
    (grads,) = torch.autograd.grad(out.sum(), interp, create_graph=True)
    norms = grads.reshape(-1, pac * width).norm(2, dim=1)
    return ((norms - 1) ** 2).mean()


def vanilla_losses(discriminator, real, fake, cond=None, cross_entropy=0.0, generator=None):
    """(d_loss, g_loss) for the vanilla objective on pac-grouped batches."""
    if cond is not None and cond.shape[1]:
        real = torch.cat([real, cond], dim=1)
        fake = torch.cat([fake, cond], dim=1)
    d_real = discriminator(real, generator=generator)
    d_fake = discriminator(fake, generator=generator)
    return vanilla_d_loss(d_real, d_fake), vanilla_g_loss(d_fake) + cross_entropy


def wasserstein_losses(discriminator, real, fake, cond=None, cross_entropy=0.0, gp_lambda=10.0, generator=None):
    """(d_loss, g_loss) for the Wasserstein objective with gradient penalty."""
    if cond is not None and cond.shape[1]:
        real = torch.cat([real, cond], dim=1)
        fake = torch.cat([fake, cond], dim=1)
    d_real = discriminator(real, generator=generator)
    d_fake = discriminator(fake, generator=generator)
    d_loss = d_fake.mean() - d_real.mean()
    if gp_lambda:
        gp = gradient_penalty(discriminator, real, fake, generator=generator)
        if torch.isfinite(gp):
            d_loss = d_loss + gp_lambda * gp
        else:
            logger.warning("non-finite gradient penalty; skipped for this batch")
    return d_loss, -d_fake.mean() + cross_entropy


# ---------------------------------------------------------------------------
# Parameter vectors


def flatten_params(module: nn.Module) -> np.ndarray:
    """Concatenate ``module.parameters()`` in registration order as float64.

    Batch-norm running statistics are buffers, not parameters, and are left
    out of the vector.
    """
    return np.concatenate([p.detach().cpu().double().reshape(-1).numpy() for p in module.parameters()])


def load_params(module: nn.Module, theta) -> None:
    theta = np.asarray(theta)
    n = sum(p.numel() for p in module.parameters())
    if theta.shape != (n,):
        raise ValueError(f"weight vector has shape {theta.shape}, expected ({n},)")
    pos = 0
    with torch.no_grad():
        for p in module.parameters():
            k = p.numel()
            p.copy_(torch.from_numpy(theta[pos : pos + k]).reshape(p.shape).to(p.dtype))
            pos += k


def n_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    generator: Generator
    discriminator: Discriminator
    swag: object | None
    sampler: CondSampler | None = None
    history: list[dict] = field(default_factory=list)
    opt_g: torch.optim.Optimizer | None = None
    opt_d: torch.optim.Optimizer | None = None
    torch_gen: torch.Generator | None = None
    rng: np.random.Generator | None = None


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    """Adam with decoupled weight decay: a zero-gradient step scales by ``1 - lr * wd``."""
    return torch.optim.AdamW(params, lr=config.learning_rate, betas=config.adam_betas, weight_decay=config.weight_decay)


def build_networks(transformer: DataTransformer, cond_dim: int, config: TrainConfig, seed=None):
    seed = config.seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        g = Generator(config.noise_dim, cond_dim, transformer.output_width, config.hidden)
        d = Discriminator(transformer.output_width + cond_dim, config.pac, config.hidden, config.dropout)
    return g, d


def train(
    data: pd.DataFrame,
    transformer: DataTransformer,
    config: TrainConfig,
    swag_rank: int | None = 150,
    t_collect: int = 50,
    hook: Callable | None = None,
) -> TrainResult:
    """Alternate one discriminator and one generator Adam step per batch.

    After every epoch ``t > t_collect`` (epochs counted from 1) the flattened
    generator parameters are folded into a :class:`~gactgan.swag.SwagState`
    holding up to ``swag_rank`` deviation columns, and ``hook(t, theta)`` is
    called if given.  ``swag_rank=None`` disables collection entirely.
    """
    from .swag import SwagState

    rng = np.random.default_rng(config.seed)
    tgen = torch.Generator().manual_seed(config.seed)
    encoded = transformer.encode(data, rng)
    n = len(encoded)
    real_all = torch.from_numpy(encoded.astype(np.float32))
    sampler = CondSampler.from_encoded(encoded, transformer, config.log_frequency)
    spans = transformer.layout.spans
    cat_spans = transformer.layout.categorical_spans
    g, d = build_networks(transformer, sampler.cond_dim, config)
    opt_g = make_optimizer(g.parameters(), config)
    opt_d = make_optimizer(d.parameters(), config)
    swag = SwagState(n_params(g), swag_rank) if swag_rank is not None else None
    steps = max(1, math.ceil(n / config.batch_size))
    batch = config.batch_size
    history = []
    g.train()
    d.train()

    def draw(batch):
        z = torch.randn(batch, config.noise_dim, generator=tgen)
        cond, mask, rows = sampler.sample_condition(batch, rng)
        if rows is None:
            rows = rng.integers(n, size=batch)
        return z, torch.from_numpy(cond), torch.from_numpy(mask), rows

    for epoch in range(1, config.epochs + 1):
        d_sum = g_sum = 0.0
        for step in range(steps):
            z, cond, mask, rows = draw(batch)
            real = real_all[rows]
            fake = apply_activation(g(torch.cat([z, cond], 1)), spans, config.gumbel_temperature, tgen)
            real_c = torch.cat([real, cond], 1)
            fake_c = torch.cat([fake, cond], 1).detach()
            d_real = d(real_c, generator=tgen)
            d_fake = d(fake_c, generator=tgen)
            if config.loss == "vanilla":
                loss_d = vanilla_d_loss(d_real, d_fake)
            else:
                loss_d = d_fake.mean() - d_real.mean()
                if config.gradient_penalty and config.clip_value is None:
                    gp = gradient_penalty(d, real_c, fake_c, generator=tgen)
                    if torch.isfinite(gp):
                        loss_d = loss_d + config.gradient_penalty * gp
                    else:
                        logger.warning("epoch %d batch %d: non-finite gradient penalty skipped", epoch, step)
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()
            if config.clip_value is not None:
                with torch.no_grad():
                    for p in d.parameters():
                        p.clamp_(-config.clip_value, config.clip_value)

            z, cond, mask, _ = draw(batch)
            raw = g(torch.cat([z, cond], 1))
            fake = apply_activation(raw, spans, config.gumbel_temperature, tgen)
            d_fake = d(torch.cat([fake, cond], 1), generator=tgen)
            ce = cond_loss(raw, cond, mask, cat_spans)
            if config.loss == "vanilla":
                loss_g = vanilla_g_loss(d_fake) + ce
            else:
                loss_g = -d_fake.mean() + ce
            opt_g.zero_grad(set_to_none=True)
            loss_g.backward()
            opt_g.step()

            ld, lg = loss_d.item(), loss_g.item()
            if not (math.isfinite(ld) and math.isfinite(lg)):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch {step} (d_loss={ld}, g_loss={lg})"
                )
            d_sum += ld
            g_sum += lg
        history.append({"epoch": epoch, "d_loss": d_sum / steps, "g_loss": g_sum / steps})
        logger.debug("epoch %d d_loss %.4f g_loss %.4f", epoch, d_sum / steps, g_sum / steps)
        if epoch > t_collect:
            theta = flatten_params(g)
            if swag is not None:
                swag.collect(theta)
            if hook is not None:
                hook(epoch, theta)
    return TrainResult(g, d, swag, sampler, history, opt_g, opt_d, tgen, rng)
