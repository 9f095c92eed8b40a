"""SWAG posterior over generator weights and posterior-sampling synthesis.

The posterior is ``N(mean, alpha * (diag(diag_var) + D D^T / (k - 1)))``
where ``D`` holds the newest ``k`` deviation columns ``theta_t - mean_t``
recorded during training.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
import torch
from torch import nn

from .data import DataTransformer
from .gan import CondSampler, Generator, apply_activation, load_params

BN_EPS = 1e-5
REFRESH_BATCHES = 10


class SwagState:
    """Running first/second moments plus a FIFO buffer of deviation columns."""

    def __init__(self, n_params: int, max_rank: int = 150):
        if max_rank < 0:
            raise ValueError("max_rank must be >= 0")
        self.n_params = n_params
        self.max_rank = max_rank
        self.n_mod = 0
        self.mean = np.zeros(n_params)
        self.second_moment = np.zeros(n_params)
        self.deviations: deque = deque(maxlen=max_rank if max_rank else None)

    def _check(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"weight vector has shape {theta.shape}, expected ({self.n_params},)")
        return theta

    def swa_update(self, theta) -> SwagState:
        theta = self._check(theta)
        n = self.n_mod
        self.mean = (self.mean * n + theta) / (n + 1)
        self.second_moment = (self.second_moment * n + theta * theta) / (n + 1)
        self.n_mod = n + 1
        return self

    def push_deviation(self, theta) -> SwagState:
        """Append ``theta - mean``; call after :meth:`swa_update` for the same snapshot."""
        theta = self._check(theta)
        if self.max_rank == 0:
            return self
        self.deviations.append(theta - self.mean)
        return self

    def collect(self, theta) -> SwagState:
        return self.swa_update(theta).push_deviation(theta)

    def finalize(self, alpha: float = 0.5) -> GeneratorPosterior:
        if self.n_mod == 0:
            raise ValueError("no snapshots collected; cannot build a posterior")
        diag = np.maximum(self.second_moment - self.mean**2, 0.0)
        if self.deviations:
            dev = np.stack(list(self.deviations))
        else:
            dev = np.zeros((0, self.n_params))
        return GeneratorPosterior(self.mean.copy(), diag, dev, alpha)


@dataclass(frozen=True, eq=False)
class GeneratorPosterior:
    """Immutable SWAG posterior.

    ``deviations`` has shape ``(k, P)``, oldest row first.
    """

    mean: np.ndarray
    diag_var: np.ndarray
    deviations: np.ndarray
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if np.any(self.diag_var < 0):
            raise ValueError("diag_var must be nonnegative")
        if self.deviations.ndim != 2 or self.deviations.shape[1] != self.mean.shape[0]:
            raise ValueError("deviation matrix does not match the mean vector")

    @property
    def n_params(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.deviations.shape[0]

    @property
    def rank_mode(self) -> str:
        if self.alpha == 0:
            return "swa_only"
        return "diagonal" if self.rank == 0 else "low_rank"

    def with_rank(self, k: int) -> GeneratorPosterior:
        """Keep only the newest ``k`` deviation columns."""
        if k < 0:
            raise ValueError("rank must be >= 0")
        dev = self.deviations[self.rank - min(k, self.rank) :]
        return replace(self, deviations=dev)

    def with_alpha(self, alpha: float) -> GeneratorPosterior:
        return replace(self, alpha=alpha)

    def covariance(self) -> np.ndarray:
        """Dense covariance; only sensible for tiny parameter counts (tests)."""
        cov = np.diag(self.diag_var)
        if self.rank >= 2:
            cov = cov + self.deviations.T @ self.deviations / (self.rank - 1)
        return self.alpha * cov


def sample_weights(posterior: GeneratorPosterior, rng: np.random.Generator) -> np.ndarray:
    """One draw ``mean + sqrt(alpha) * (sqrt(diag) * z1 + D^T z2 / sqrt(k - 1))``."""
    if posterior.alpha == 0:
        return posterior.mean.copy()
    z1 = rng.standard_normal(posterior.n_params)
    noise = np.sqrt(posterior.diag_var) * z1
    k = posterior.rank
    if k >= 2:
        z2 = rng.standard_normal(k)
        noise += posterior.deviations.T @ z2 / math.sqrt(k - 1)
    return posterior.mean + math.sqrt(posterior.alpha) * noise


def _bn_layers(module: nn.Module):
    return [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


def refresh_bn(
    theta,
    generator: Generator,
    cond_sampler: CondSampler,
    n_batches: int,
    batch: int,
    rng: np.random.Generator,
    torch_gen: torch.Generator,
) -> Generator:
    """Load ``theta`` and recompute batch-norm running statistics.

    Statistics are the cumulative average over ``n_batches`` training-mode
    forward passes on fresh noise and conditions; running variances are
    floored at ``BN_EPS``.  The generator is left in eval mode.
    """
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    if theta is not None:
        load_params(generator, theta)
    layers = _bn_layers(generator)
    momenta = [m.momentum for m in layers]
    for m in layers:
        m.reset_running_stats()
        m.momentum = None
    generator.train()
    with torch.no_grad():
        for _ in range(n_batches):
            z = torch.randn(batch, generator.noise_dim, generator=torch_gen)
            cond = torch.from_numpy(cond_sampler.sample_original(batch, rng))
            generator(torch.cat([z, cond], 1))
    for m, mom in zip(layers, momenta):
        m.momentum = mom
        m.running_var.clamp_(min=BN_EPS)
    generator.eval()
    return generator


def synthesize(
    posterior: GeneratorPosterior,
    generator: Generator,
    transformer: DataTransformer,
    cond_sampler: CondSampler,
    n_sample: int,
    batch: int = 500,
    n_models: int = 1,
    seed: int = 0,
    tau: float = 0.2,
    refresh_batches: int = REFRESH_BATCHES,
    return_encoded: bool = False,
):
    """Draw ``n_sample`` rows, averaging ``n_models`` posterior draws per batch.

    For each of ``ceil(n_sample / batch)`` batches one noise/condition batch
    is drawn; for each posterior draw the generator weights are sampled, the
    batch-norm statistics refreshed, and the activated output accumulated
    with weight ``1 / n_models``.  Averaging happens in encoded space and
    the result is decoded once.

    The generator's own weights are overwritten.
    """
    if n_models < 1 or batch < 1 or n_sample < 0:
        raise ValueError("n_models and batch must be >= 1, n_sample >= 0")
    seeds = np.random.SeedSequence(seed).spawn(3)
    noise_gen = torch.Generator().manual_seed(int(seeds[0].generate_state(1)[0]))
    cond_rng = np.random.default_rng(seeds[1])
    weight_rng = np.random.default_rng(seeds[2])
    spans = transformer.layout.spans
    n_batches = math.ceil(n_sample / batch)
    out = []
    for t in range(n_batches):
        z = torch.randn(batch, generator.noise_dim, generator=noise_gen)
        cond = torch.from_numpy(cond_sampler.sample_original(batch, cond_rng))
        acc = np.zeros((batch, transformer.output_width))
        for _ in range(n_models):
            theta = sample_weights(posterior, weight_rng)
            refresh_bn(theta, generator, cond_sampler, refresh_batches, batch, cond_rng, noise_gen)
            with torch.no_grad():
                raw = generator(torch.cat([z, cond], 1))
                act = apply_activation(raw, spans, tau, noise_gen)
            acc += act.double().numpy() / n_models
        out.append(acc)
    encoded = np.concatenate(out)[:n_sample] if out else np.zeros((0, transformer.output_width))
    if return_encoded:
        return encoded
    try:
        return transformer.decode(encoded)
    except ValueError as exc:
        raise ValueError(f"decode failed: {exc}") from exc


def synthesize_point(
    generator: Generator,
    transformer: DataTransformer,
    cond_sampler: CondSampler,
    n_sample: int,
    batch: int = 500,
    seed: int = 0,
    tau: float = 0.2,
) -> pd.DataFrame:
    """Plain CTGAN sampling from a point-estimate generator with its own BN statistics."""
    seeds = np.random.SeedSequence(seed).spawn(3)
    noise_gen = torch.Generator().manual_seed(int(seeds[0].generate_state(1)[0]))
    cond_rng = np.random.default_rng(seeds[1])
    generator.eval()
    out = []
    with torch.no_grad():
        for _ in range(math.ceil(n_sample / batch)):
            z = torch.randn(batch, generator.noise_dim, generator=noise_gen)
            cond = torch.from_numpy(cond_sampler.sample_original(batch, cond_rng))
            act = apply_activation(generator(torch.cat([z, cond], 1)), transformer.layout.spans, tau, noise_gen)
            out.append(act.double().numpy())
    encoded = np.concatenate(out)[:n_sample]
    return transformer.decode(encoded)
