"""Experiment orchestration: train -> synthesize -> evaluate sweeps.

Seed splitting
--------------
Every random stream comes from ``child_seed(root_seed, *coords)``, which
hashes the coordinate labels into a ``numpy.random.SeedSequence`` spawn key.
A model trained for ``(loss, seed)`` uses ``child_seed(root, "train", loss,
seed)``; a synthetic replicate uses ``child_seed(root, "synth", loss, seed,
cell_id)``.  Output paths are ``<out>/<config_hash>/...`` with names built
from the same coordinates, so reruns land on the same files and completed
cells are skipped.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import artifacts
from .data import CONTINUOUS, DataTransformer, SchemaError, load_schema, read_csv, schema_from_frame
from .evaluate import UTILITY_CUTOFF, UtilitySpec, evaluate_one, pareto_front, selection_score
from .gan import TrainConfig
from .model import GACTGAN, PosteriorBundle, load_checkpoint_generator, save_posterior
from .swag import synthesize_point

logger = logging.getLogger(__name__)

DEFAULT_RANKS = [0, 30, 100, 150]
DEFAULT_ALPHAS = [0.0, 0.25, 0.5, 1.0]
ABLATION_SAMPLES = [1, 2, 4, 8, 16, 20]


class ConfigError(ValueError):
    pass


def _strict(d: dict, allowed, where: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass
class SwagConfig:
    ranks: list[int] = field(default_factory=lambda: list(DEFAULT_RANKS))
    alphas: list[float] = field(default_factory=lambda: list(DEFAULT_ALPHAS))
    t_collect: int = 50


@dataclass
class SynthesisConfig:
    n_sample: int | None = None  # None: same size as the original table
    batch: int = 500
    samples: list[int] = field(default_factory=lambda: [1])


@dataclass
class ExperimentConfig:
    dataset: str
    schema: str | None = None
    schema_overrides: dict = field(default_factory=dict)
    losses: list[str] = field(default_factory=lambda: ["wasserstein", "vanilla"])
    train: dict = field(default_factory=dict)
    swag: SwagConfig = field(default_factory=SwagConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    eval: dict = field(default_factory=dict)
    phi: float = 0.75
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    root_seed: int = 0
    output: str = "runs"
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> ExperimentConfig:
        top = {f.name for f in fields(cls)} - {"base_dir"}
        _strict(d, top, "experiment config")
        if "dataset" not in d:
            raise ConfigError("experiment config needs 'dataset'")
        d = dict(d)
        swag = d.pop("swag", {})
        _strict(swag, {f.name for f in fields(SwagConfig)}, "swag")
        synth = d.pop("synthesis", {})
        _strict(synth, {f.name for f in fields(SynthesisConfig)}, "synthesis")
        train = d.get("train", {})
        _strict(train, {f.name for f in fields(TrainConfig)} - {"loss", "seed"}, "train")
        cfg = cls(**d, swag=SwagConfig(**swag), synthesis=SynthesisConfig(**synth), base_dir=Path(base_dir))
        try:
            UtilitySpec.from_dict(cfg.eval)
            for loss in cfg.losses:
                TrainConfig(loss=loss, **cfg.train)
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if not 0 <= cfg.phi <= 1:
            raise ConfigError("phi must lie in [0, 1]")
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(d, base_dir=path.parent)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "schema": self.schema,
            "schema_overrides": self.schema_overrides,
            "losses": self.losses,
            "train": self.train,
            "swag": vars(self.swag),
            "synthesis": vars(self.synthesis),
            "eval": self.eval,
            "phi": self.phi,
            "seeds": self.seeds,
            "root_seed": self.root_seed,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def utility_spec(self) -> UtilitySpec:
        return UtilitySpec.from_dict(self.eval)

    def train_config(self, loss: str, seed: int) -> TrainConfig:
        return TrainConfig(loss=loss, seed=child_seed(self.root_seed, "train", loss, seed), **self.train)


def child_seed(root: int, *coords) -> int:
    """Deterministic 32-bit child seed for a cell identified by ``coords``."""
    key = [int.from_bytes(hashlib.sha256(str(c).encode()).digest()[:4], "little") for c in coords]
    return int(np.random.SeedSequence(entropy=root, spawn_key=key).generate_state(1)[0])


def worker_count() -> int:
    cap = os.environ.get("GACTGAN_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def _pool_map(fn, items, workers):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items)), initializer=_worker_init) as ex:
        return list(ex.map(fn, items))


def _worker_init():
    import torch

    torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# Data loading


def load_table(path, schema=None, overrides=None):
    """Read a CSV and type it; returns ``(typed_frame, schema)``."""
    raw = read_csv(path)
    if schema is None:
        schema = schema_from_frame(raw, overrides)
    names = [c.name for c in schema]
    if list(raw.columns) != names:
        raise SchemaError(f"{path}: columns {list(raw.columns)} do not match schema {names}")
    typed = {}
    for c in schema:
        typed[c.name] = raw[c.name].astype(float) if c.kind == CONTINUOUS else raw[c.name].astype(str)
    return pd.DataFrame(typed, columns=names), schema


def _dataset(config: ExperimentConfig):
    schema = load_schema(config.resolve(config.schema)) if config.schema else None
    return load_table(config.resolve(config.dataset), schema, config.schema_overrides)


def write_table(df: pd.DataFrame, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")


# ---------------------------------------------------------------------------
# Training


def model_dir(config: ExperimentConfig, out: Path, loss: str, seed: int) -> Path:
    return out / config.config_hash() / "models" / f"{loss}-seed{seed}"


def _train_job(args):
    config, out, loss, seed = args
    mdir = model_dir(config, out, loss, seed)
    done = mdir / "done.json"
    if done.exists():
        return str(mdir)
    data, schema = _dataset(config)
    tc = config.train_config(loss, seed)
    max_rank = max(config.swag.ranks) if config.swag.ranks else 0
    model = GACTGAN(tc, max_rank=max_rank, t_collect=config.swag.t_collect)
    try:
        model.fit(data, schema)
    except FloatingPointError as exc:
        raise FloatingPointError(f"[loss={loss} seed={seed}] {exc}") from exc
    mdir.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(mdir / "checkpoint.bin")
    save_posterior(mdir / "posterior.bin", model.posterior(0.5), model._meta(), dtype=np.float32)
    with open(mdir / "train_log.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "d_loss", "g_loss"], lineterminator="\n")
        w.writeheader()
        w.writerows(model.history)
    done.write_text(json.dumps({"loss": loss, "seed": seed, "train_seed": tc.seed}, sort_keys=True) + "\n")
    return str(mdir)


def cmd_train(config: ExperimentConfig, out=None) -> list[Path]:
    """Train one model per (loss, seed); existing models are reused."""
    out = Path(out) if out else config.resolve(config.output)
    jobs = [(config, out, loss, seed) for loss in config.losses for seed in config.seeds]
    return [Path(p) for p in _pool_map(_train_job, jobs, worker_count())]


# ---------------------------------------------------------------------------
# Synthesis


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def cmd_synthesize(posterior, n, batch=500, samples=1, alpha=None, seed=0, out="synthetic.csv", rank=None) -> pd.DataFrame:
    """Sample ``n`` rows from a posterior file; writes the CSV and a JSON sidecar."""
    bundle = PosteriorBundle(posterior)
    df = bundle.sample(n, batch, samples, alpha, rank, seed)
    write_table(df, out)
    post = bundle.posterior
    meta = {
        "model": "gactgan",
        "loss": bundle.config.loss,
        "K": int(post.rank if rank is None else min(rank, post.rank)),
        "alpha": float(post.alpha if alpha is None else alpha),
        "S": int(samples),
        "seed": int(seed),
        "n": int(n),
        "batch": int(batch),
        "posterior_sha256": artifacts.file_sha256(posterior),
    }
    _sidecar(out).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return df


def cmd_synthesize_baseline(checkpoint, n, batch=500, seed=0, out="synthetic.csv") -> pd.DataFrame:
    """Sample from the final point-estimate generator (CTGAN baseline)."""
    header, g, transformer, sampler = load_checkpoint_generator(checkpoint)
    df = synthesize_point(g, transformer, sampler, n, batch, seed, header["config"]["gumbel_temperature"])
    write_table(df, out)
    meta = {
        "model": "ctgan",
        "loss": header["config"]["loss"],
        "K": None,
        "alpha": None,
        "S": 1,
        "seed": int(seed),
        "n": int(n),
        "batch": int(batch),
        "checkpoint_sha256": artifacts.file_sha256(checkpoint),
    }
    _sidecar(out).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return df


# ---------------------------------------------------------------------------
# Evaluation and reporting


def config_id(meta: dict) -> str:
    if meta["model"] == "ctgan":
        return f"ctgan-{meta['loss']}"
    return f"gactgan-{meta['loss']}-K{meta['K']}-a{meta['alpha']:g}-S{meta['S']}"


def summarize(records: list[dict], phi: float) -> list[dict]:
    """Group per-seed records by configuration, average, and flag the front.

    The Pareto front is computed separately for each loss.
    """
    groups: dict[str, dict] = {}
    for rec in records:
        cid = config_id(rec)
        g = groups.setdefault(
            cid,
            {"config": cid, "model": rec["model"], "loss": rec["loss"], "K": rec["K"], "alpha": rec["alpha"], "S": rec["S"], "per_seed": {}},
        )
        g["per_seed"][str(rec["seed"])] = {k: rec[k] for k in ("roc", "cio", "U", "R", "SS")}
    out = []
    for g in groups.values():
        seeds = list(g["per_seed"].values())
        means = {}
        for k in ("roc", "cio", "U", "R"):
            vals = [s[k] for s in seeds if s[k] is not None]
            means[k] = float(np.mean(vals)) if vals else None
        means["SS"] = selection_score(means["U"], means["R"], phi)
        g["means"] = means
        g["utility_cutoff_pass"] = bool(means["U"] > UTILITY_CUTOFF)
        out.append(g)
    out.sort(key=lambda g: g["config"])
    for loss in sorted({g["loss"] for g in out}):
        members = [g for g in out if g["loss"] == loss]
        flags = pareto_front([(g["means"]["U"], g["means"]["R"]) for g in members])
        for g, f in zip(members, flags):
            g["pareto"] = bool(f)
    return out


RUMAP_FIELDS = ["config", "loss", "K", "alpha", "S", "U", "R", "SS", "pareto", "cutoff_pass"]


def write_rumap(summary: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUMAP_FIELDS)
        for g in summary:
            m = g["means"]
            w.writerow(
                [g["config"], g["loss"], "" if g["K"] is None else g["K"], "" if g["alpha"] is None else g["alpha"], g["S"],
                 repr(m["U"]), repr(m["R"]), repr(m["SS"]), int(g["pareto"]), int(g["utility_cutoff_pass"])]
            )


def write_svg(summary: list[dict], path, width=480, height=360) -> None:
    """Minimal R-U scatter (risk on x, utility on y) with the front as a polyline."""
    pad = 40
    pts = [(g["means"]["R"], g["means"]["U"], g) for g in summary]
    rs = [p[0] for p in pts] or [0.0]
    us = [p[1] for p in pts] or [0.0]
    r0, r1 = min(rs), max(rs)
    u0, u1 = min(us), max(us)
    r1 = r1 if r1 > r0 else r0 + 1e-9
    u1 = u1 if u1 > u0 else u0 + 1e-9

    def xy(r, u):
        return pad + (r - r0) / (r1 - r0) * (width - 2 * pad), height - pad - (u - u0) / (u1 - u0) * (height - 2 * pad)

    colours = {"wasserstein": "#1f77b4", "vanilla": "#d62728"}
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">risk</text>',
        f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})">utility</text>',
    ]
    for loss in sorted({g["loss"] for g in summary}):
        front = sorted((p for p in pts if p[2]["loss"] == loss and p[2]["pareto"]), key=lambda p: p[0])
        if len(front) > 1:
            coords = " ".join("%.1f,%.1f" % xy(r, u) for r, u, _ in front)
            lines.append(f'<polyline points="{coords}" fill="none" stroke="purple" stroke-width="1.5"/>')
    for r, u, g in pts:
        x, y = xy(r, u)
        lines.append(
            f'<circle cx="{x:.1f}" cy="{y:.1f}" r="4" fill="{colours.get(g["loss"], "gray")}"><title>{g["config"]}</title></circle>'
        )
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_evaluate(original, synthetic_dir, spec: UtilitySpec, phi=0.75, out="report.json", schema=None, svg=True) -> list[dict]:
    """Evaluate every ``*.csv`` (with sidecar) under ``synthetic_dir``.

    Writes the metrics JSON to ``out``, the R-U map CSV next to it
    (``<out stem>.rumap.csv``) and optionally an SVG scatter.
    """
    orig, schema = load_table(original, load_schema(schema) if schema else None)
    spec.validate(orig)
    records, errors = [], []
    for path in sorted(Path(synthetic_dir).glob("*.csv")):
        side = _sidecar(path)
        if not side.exists():
            logger.warning("%s: no sidecar metadata, skipped", path)
            continue
        meta = json.loads(side.read_text())
        try:
            syn, _ = load_table(path, schema)
            records.append({**meta, **evaluate_one(orig, syn, spec, phi)})
        except (ValueError, KeyError) as exc:
            errors.append({"file": str(path), "error": str(exc)})
            logger.error("%s: %s", path, exc)
    summary = summarize(records, phi)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"phi": phi, "configs": summary, "errors": errors}, indent=1, sort_keys=True) + "\n")
    write_rumap(summary, out.with_suffix(".rumap.csv"))
    if svg:
        write_svg(summary, out.with_suffix(".svg"))
    return summary


# ---------------------------------------------------------------------------
# Sweeps


def _cells(config: ExperimentConfig):
    cells = [{"model": "ctgan", "K": None, "alpha": None, "S": 1}]
    for k in config.swag.ranks:
        for a in config.swag.alphas:
            for s in config.synthesis.samples:
                cells.append({"model": "gactgan", "K": int(k), "alpha": float(a), "S": int(s)})
    return cells


def _cell_job(args):
    config, out, loss, seed = args
    mdir = model_dir(config, out, loss, seed)
    cdir = out / config.config_hash() / "cells"
    original, schema = _dataset(config)
    spec = config.utility_spec()
    n = config.synthesis.n_sample or len(original)
    batch = config.synthesis.batch
    bundle = None
    results = []
    for cell in _cells(config):
        meta = {**cell, "loss": loss, "seed": seed}
        cid = config_id(meta)
        rec_path = cdir / f"{cid}-seed{seed}.json"
        if rec_path.exists():
            rec = json.loads(rec_path.read_text())
            if "error" not in rec:
                results.append(rec)
                continue
        syn_seed = child_seed(config.root_seed, "synth", loss, seed, cid)
        try:
            if cell["model"] == "ctgan":
                header, g, transformer, sampler = load_checkpoint_generator(mdir / "checkpoint.bin")
                syn = synthesize_point(g, transformer, sampler, n, batch, syn_seed, header["config"]["gumbel_temperature"])
            else:
                if bundle is None:
                    bundle = PosteriorBundle(mdir / "posterior.bin")
                syn = bundle.sample(n, batch, cell["S"], cell["alpha"], cell["K"], syn_seed)
            syn_typed = syn.astype({c.name: float for c in schema if c.kind == CONTINUOUS})
            rec = {**meta, "synth_seed": syn_seed, **evaluate_one(original, syn_typed, spec, config.phi)}
        except (ValueError, FloatingPointError) as exc:
            logger.error("cell %s seed %s failed: %s", cid, seed, exc)
            rec = {**meta, "error": str(exc)}
        rec_path.parent.mkdir(parents=True, exist_ok=True)
        rec_path.write_text(json.dumps(rec, sort_keys=True) + "\n")
        results.append(rec)
    return results


def gain_table(summary: list[dict]) -> list[dict]:
    """Per GACTGAN configuration: mean utility/risk minus the CTGAN baseline (percentage points)."""
    base = {g["loss"]: g["means"] for g in summary if g["model"] == "ctgan"}
    rows = []
    for g in summary:
        if g["model"] != "gactgan" or g["loss"] not in base:
            continue
        b = base[g["loss"]]
        rows.append(
            {"config": g["config"], "loss": g["loss"], "K": g["K"], "alpha": g["alpha"], "S": g["S"],
             "utility_gain": 100 * (g["means"]["U"] - b["U"]), "risk_gain": 100 * (g["means"]["R"] - b["R"])}
        )
    return rows


def rank_selection_table(summary: list[dict], phis=(0.75, 1.0)) -> list[dict]:
    """For each (phi, loss, K): the max-SS configuration and its gain over CTGAN."""
    base = {g["loss"]: g["means"] for g in summary if g["model"] == "ctgan"}
    rows = []
    for phi in phis:
        for loss in sorted(base):
            ranks = sorted({g["K"] for g in summary if g["model"] == "gactgan" and g["loss"] == loss})
            for k in ranks:
                cands = [g for g in summary if g["model"] == "gactgan" and g["loss"] == loss and g["K"] == k]
                best = max(cands, key=lambda g: selection_score(g["means"]["U"], g["means"]["R"], phi))
                rows.append(
                    {"phi": phi, "loss": loss, "K": k, "config": best["config"],
                     "utility_gain": 100 * (best["means"]["U"] - base[loss]["U"]),
                     "risk_gain": 100 * (best["means"]["R"] - base[loss]["R"])}
                )
    return rows


def _write_rows(rows, path):
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_sweep(config: ExperimentConfig, out=None) -> dict:
    """Full (loss x K x alpha x S x seed) sweep with a CTGAN baseline per (loss, seed).

    Models are trained once per (loss, seed); rank and scale are applied at
    synthesis time.  Finished cells are read back instead of recomputed.
    """
    out = Path(out) if out else config.resolve(config.output)
    original, _ = _dataset(config)
    config.utility_spec().validate(original)
    cmd_train(config, out)
    root = out / config.config_hash()
    (root / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    jobs = [(config, out, loss, seed) for loss in config.losses for seed in config.seeds]
    records = [r for batch in _pool_map(_cell_job, jobs, worker_count()) for r in batch]
    failed = [r for r in records if "error" in r]
    summary = summarize([r for r in records if "error" not in r], config.phi)
    best = {}
    for loss in config.losses:
        members = [g for g in summary if g["loss"] == loss]
        eligible = [g for g in members if g["utility_cutoff_pass"]] or members
        if eligible:
            best[loss] = max(eligible, key=lambda g: g["means"]["SS"])["config"]
    report = {"config_hash": config.config_hash(), "phi": config.phi, "configs": summary, "best": best, "failed": failed}
    (root / "results.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    write_rumap(summary, root / "rumap.csv")
    write_svg(summary, root / "rumap.svg")
    _write_rows(gain_table(summary), root / "gains.csv")
    _write_rows(rank_selection_table(summary), root / "rank_selection.csv")
    return report
