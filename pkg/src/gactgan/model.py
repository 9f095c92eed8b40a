"""High-level GACTGAN model: fit, build posteriors, sample, persist."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from . import artifacts
from .data import DataTransformer, ColumnSchema, schema_from_frame
from .gan import CondSampler, Generator, TrainConfig, build_networks, flatten_params, load_params, train
from .swag import GeneratorPosterior, SwagState, synthesize, synthesize_point


class GACTGAN:
    """CTGAN whose generator carries a SWAG posterior.

    Parameters
    ----------
    config : TrainConfig
        Network and optimiser settings.
    max_rank : int
        Deviation columns kept during training (0 for diagonal only,
        ``None`` to disable collection and get plain CTGAN).
    t_collect : int
        Snapshots are collected after every epoch ``t > t_collect``.
    max_modes : int
        Upper bound on mixture modes per continuous column.
    """

    def __init__(self, config: TrainConfig | None = None, max_rank: int | None = 150, t_collect: int = 50, max_modes: int = 10):
        self.config = config or TrainConfig()
        self.max_rank = max_rank
        self.t_collect = t_collect
        self.max_modes = max_modes
        self.transformer: DataTransformer | None = None
        self.sampler: CondSampler | None = None
        self.generator: Generator | None = None
        self.swag: SwagState | None = None
        self.result = None

    def fit(self, data: pd.DataFrame, schema: list[ColumnSchema] | None = None, hook=None) -> GACTGAN:
        if schema is None:
            schema = schema_from_frame(data.astype(str))
        self.transformer = DataTransformer.fit(data, schema, self.max_modes)
        typed = self.transformer.coerce(data)
        self.result = train(typed, self.transformer, self.config, self.max_rank, self.t_collect, hook=hook)
        self.sampler = self.result.sampler
        self.generator = self.result.generator
        self.swag = self.result.swag
        return self

    @property
    def history(self) -> list[dict]:
        return self.result.history if self.result else []

    def posterior(self, alpha: float = 0.5, rank: int | None = None) -> GeneratorPosterior:
        if self.swag is None:
            raise RuntimeError("no SWAG statistics; fit with max_rank set")
        post = self.swag.finalize(alpha)
        return post if rank is None else post.with_rank(rank)

    def _template(self) -> Generator:
        g, _ = build_networks(self.transformer, self.sampler.cond_dim, self.config)
        return g

    def sample(self, n: int, batch: int = 500, n_models: int = 1, alpha: float = 0.5, rank: int | None = None, seed: int = 0, posterior=None) -> pd.DataFrame:
        posterior = posterior or self.posterior(alpha, rank)
        return synthesize(
            posterior, self._template(), self.transformer, self.sampler, n, batch, n_models, seed,
            tau=self.config.gumbel_temperature,
        )

    def sample_ctgan(self, n: int, batch: int = 500, seed: int = 0) -> pd.DataFrame:
        """Sample from the final point-estimate generator (the CTGAN baseline)."""
        return synthesize_point(self.generator, self.transformer, self.sampler, n, batch, seed, self.config.gumbel_temperature)

    # -- persistence --------------------------------------------------------

    def _meta(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "transformer": self.transformer.to_dict(),
            "sampler": self.sampler.to_dict(),
            "generator": self.generator.descriptor(),
            "generator_hash": artifacts.descriptor_hash(self.generator.descriptor()),
        }

    def save_posterior(self, path, alpha: float = 0.5) -> None:
        save_posterior(path, self.posterior(alpha), self._meta())

    def save_checkpoint(self, path) -> None:
        r = self.result
        arrays = {
            "theta_g": flatten_params(r.generator),
            "theta_d": flatten_params(r.discriminator),
        }
        for name, buf in r.generator.named_buffers():
            arrays[f"g_buffer/{name}"] = buf.detach().double().numpy().reshape(-1)
        for tag, opt in (("opt_g", r.opt_g), ("opt_d", r.opt_d)):
            for i, state in sorted(opt.state_dict()["state"].items()):
                for key, val in sorted(state.items()):
                    arrays[f"{tag}/{i}/{key}"] = torch.as_tensor(val).double().numpy().reshape(-1)
        arrays["rng/torch"] = r.torch_gen.get_state().numpy()
        meta = self._meta()
        meta.update(
            format=artifacts.CHECKPOINT_FORMAT,
            discriminator=r.discriminator.descriptor(),
            numpy_rng=r.rng.bit_generator.state,
            max_rank=self.max_rank,
            t_collect=self.t_collect,
        )
        artifacts.write_artifact(path, meta, arrays)


def save_posterior(path, posterior: GeneratorPosterior, meta: dict, dtype=np.float64) -> None:
    """Write mean, diagonal and deviations; ``dtype=float32`` halves the file."""
    header = dict(meta)
    header.update(
        format=artifacts.POSTERIOR_FORMAT,
        n_params=int(posterior.n_params),
        rank=int(posterior.rank),
        alpha=float(posterior.alpha),
    )
    artifacts.write_artifact(
        path,
        header,
        {k: np.ascontiguousarray(v, dtype=dtype) for k, v in
         (("mean", posterior.mean), ("diag_var", posterior.diag_var), ("deviations", posterior.deviations))},
    )


class PosteriorBundle:
    """Everything needed to synthesise from a saved posterior file."""

    def __init__(self, path):
        header, arrays = artifacts.read_artifact(path, artifacts.POSTERIOR_FORMAT)
        self.header = header
        self.config = TrainConfig(**header["config"])
        self.transformer = DataTransformer.from_dict(header["transformer"])
        self.sampler = CondSampler.from_dict(header["sampler"])
        self.posterior = GeneratorPosterior(
            *(arrays[k].astype(np.float64) for k in ("mean", "diag_var", "deviations")), header["alpha"]
        )
        desc = header["generator"]
        if artifacts.descriptor_hash(desc) != header["generator_hash"]:
            raise ValueError(f"{path}: architecture descriptor hash mismatch")
        self.generator = Generator(desc["noise_dim"], desc["cond_dim"], desc["data_dim"], desc["hidden"])
        if self.generator.data_dim != self.transformer.output_width:
            raise ValueError(f"{path}: generator width does not match the transformer layout")
        expected = sum(p.numel() for p in self.generator.parameters())
        if expected != self.posterior.n_params:
            raise ValueError(f"{path}: posterior has {self.posterior.n_params} params, architecture needs {expected}")

    def sample(self, n, batch=500, n_models=1, alpha=None, rank=None, seed=0) -> pd.DataFrame:
        post = self.posterior
        if alpha is not None:
            post = post.with_alpha(alpha)
        if rank is not None:
            post = post.with_rank(rank)
        return synthesize(
            post, self.generator, self.transformer, self.sampler, n, batch, n_models, seed,
            tau=self.config.gumbel_temperature,
        )


def load_checkpoint_generator(path):
    """Rebuild the point-estimate generator (with its training BN statistics)."""
    header, arrays = artifacts.read_artifact(path, artifacts.CHECKPOINT_FORMAT)
    desc = header["generator"]
    g = Generator(desc["noise_dim"], desc["cond_dim"], desc["data_dim"], desc["hidden"])
    load_params(g, arrays["theta_g"])
    with torch.no_grad():
        for name, buf in g.named_buffers():
            buf.copy_(torch.from_numpy(arrays[f"g_buffer/{name}"]).reshape(buf.shape).to(buf.dtype))
    transformer = DataTransformer.from_dict(header["transformer"])
    sampler = CondSampler.from_dict(header["sampler"])
    return header, g, transformer, sampler
