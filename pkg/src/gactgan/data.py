"""Tabular ingestion and the reversible mixed-type encoding.

Continuous columns are normalised against a per-column Gaussian mixture
(mode-specific normalisation): a value is represented by the one-hot index
of a sampled mode plus a scalar ``(x - mu_k) / (4 * sigma_k)``.  Categorical
columns become plain one-hot blocks.  Blocks are laid out per column, in
schema order, so each generator output span maps onto exactly one column.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"

MAX_MODES = 10
WEIGHT_THRESHOLD = 0.005
EM_MAX_ITER = 100
EM_REL_TOL = 1e-4


class SchemaError(ValueError):
    """Raised for malformed CSV input or schema violations."""


@dataclass
class ColumnSchema:
    name: str
    kind: str
    categories: list[str] | None = None
    modes: int | None = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL and self.categories is not None:
            if len(self.categories) == 0:
                raise SchemaError(f"column {self.name!r}: empty category list")
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"column {self.name!r}: duplicate categories")
        if self.kind == CONTINUOUS and self.modes is not None and self.modes < 1:
            raise SchemaError(f"column {self.name!r}: modes must be >= 1")

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.categories is not None:
            out["categories"] = list(self.categories)
        if self.modes is not None:
            out["modes"] = int(self.modes)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> ColumnSchema:
        return cls(d["name"], d["kind"], d.get("categories"), d.get("modes"))


def _check_unique(names):
    seen = set()
    for n in names:
        if n in seen:
            raise SchemaError(f"duplicate column name {n!r}")
        seen.add(n)


def _is_number(s: str) -> bool:
    try:
        v = float(s)
    except ValueError:
        return False
    return math.isfinite(v)


def read_csv(path) -> pd.DataFrame:
    """Read a UTF-8, RFC-4180 CSV into a DataFrame of strings.

    Every cell stays a string; typing is applied later from the schema.
    Ragged rows, empty files, duplicate headers and empty cells are errors.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        _check_unique(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(
                    f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}"
                )
            rows.append(row)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    df = pd.DataFrame(rows, columns=header, dtype=object)
    for name in header:
        empty = df[name].map(lambda s: s.strip() == "")
        if empty.any():
            raise SchemaError(
                f"{path}: missing value in column {name!r} (row {int(np.argmax(empty.values)) + 2})"
            )
    return df


def infer_schema(csv_path, overrides: dict | None = None) -> list[ColumnSchema]:
    """Assign every column a kind; numeric-parsable columns default to continuous."""
    df = read_csv(csv_path)
    return schema_from_frame(df, overrides)


def schema_from_frame(df: pd.DataFrame, overrides: dict | None = None) -> list[ColumnSchema]:
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(df.columns)
    if unknown:
        raise SchemaError(f"overrides for unknown columns: {sorted(unknown)}")
    _check_unique(df.columns)
    schema = []
    for name in df.columns:
        kind = overrides.get(name)
        if kind is None:
            values = df[name].astype(str)
            kind = CONTINUOUS if values.map(_is_number).all() else CATEGORICAL
        if kind == CATEGORICAL:
            cats = sorted(set(df[name].astype(str)))
            schema.append(ColumnSchema(name, CATEGORICAL, categories=cats))
        else:
            schema.append(ColumnSchema(name, kind))
    return schema


def save_schema(schema: list[ColumnSchema], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([c.to_dict() for c in schema], indent=2) + "\n")


def load_schema(path) -> list[ColumnSchema]:
    schema = [ColumnSchema.from_dict(d) for d in json.loads(Path(path).read_text())]
    _check_unique([c.name for c in schema])
    return schema


# ---------------------------------------------------------------------------
# 1-D Gaussian mixture


def _std_floor(mu):
    return 1e-4 * (1.0 + np.abs(mu))


def _log_norm(x, means, stds):
    z = (x[:, None] - means[None, :]) / stds[None, :]
    return -0.5 * z * z - np.log(stds)[None, :] - 0.5 * math.log(2 * math.pi)


def _em_1d(x, k, max_iter=EM_MAX_ITER, rel_tol=EM_REL_TOL):
    """Plain EM for a k-component univariate mixture; deterministic quantile init."""
    n = len(x)
    # distinct-value quantiles keep initial means apart on spiky columns
    means = np.quantile(np.unique(x), (np.arange(k) + 0.5) / k)
    stds = np.full(k, max(x.std() / k, float(_std_floor(np.median(x)))))
    weights = np.full(k, 1.0 / k)
    prev = -np.inf
    ll = prev
    for _ in range(max_iter):
        logp = _log_norm(x, means, stds) + np.log(np.maximum(weights, 1e-300))[None, :]
        mx = logp.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(logp - mx).sum(axis=1))
        ll = lse.sum()
        resp = np.exp(logp - lse[:, None])
        nk = resp.sum(axis=0) + 1e-12
        weights = nk / n
        means = (resp * x[:, None]).sum(axis=0) / nk
        var = (resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / nk
        stds = np.maximum(np.sqrt(var), _std_floor(means))
        if np.isfinite(prev) and abs(ll - prev) <= rel_tol * abs(prev):
            break
        prev = ll
    # final log-likelihood under the updated parameters
    logp = _log_norm(x, means, stds) + np.log(np.maximum(weights, 1e-300))[None, :]
    mx = logp.max(axis=1, keepdims=True)
    ll = float((mx[:, 0] + np.log(np.exp(logp - mx).sum(axis=1))).sum())
    return weights, means, stds, ll


@dataclass
class ContinuousTransform:
    mode_means: list[float]
    mode_stds: list[float]
    mode_weights: list[float]
    valid_mode_mask: list[bool]

    def __post_init__(self):
        n = len(self.mode_means)
        if not (len(self.mode_stds) == len(self.mode_weights) == len(self.valid_mode_mask) == n):
            raise ValueError("mixture parameter lists differ in length")
        if any(s <= 0 for s in self.mode_stds):
            raise ValueError("mode stds must be positive")
        if abs(sum(self.mode_weights) - 1.0) > 1e-9:
            raise ValueError("mode weights must sum to 1")

    @property
    def n_valid(self) -> int:
        return int(sum(self.valid_mode_mask))

    def _valid(self):
        mask = np.asarray(self.valid_mode_mask, dtype=bool)
        return (
            np.asarray(self.mode_means)[mask],
            np.asarray(self.mode_stds)[mask],
            np.asarray(self.mode_weights)[mask],
        )

    def responsibilities(self, x) -> np.ndarray:
        """Posterior mode probabilities over the valid modes, shape (n, n_valid)."""
        x = np.asarray(x, dtype=float)
        means, stds, weights = self._valid()
        logp = _log_norm(x, means, stds) + np.log(weights)[None, :]
        logp -= logp.max(axis=1, keepdims=True)
        p = np.exp(logp) + 1e-6
        return p / p.sum(axis=1, keepdims=True)

    @classmethod
    def fit(cls, values, max_modes=MAX_MODES, threshold=WEIGHT_THRESHOLD) -> ContinuousTransform:
        """Fit mixtures with 1..max_modes components by EM; keep the BIC-best.

        Components with weight at or below ``threshold`` are masked out.
        """
        x = np.asarray(values, dtype=float)
        n = len(x)
        mu = float(x.mean())
        if x.std() <= _std_floor(mu):
            return cls([mu], [float(_std_floor(mu))], [1.0], [True])
        best = None
        for k in range(1, min(max_modes, n) + 1):
            w, m, s, ll = _em_1d(x, k)
            bic = -2.0 * ll + (3 * k - 1) * math.log(n)
            if best is None or bic < best[0]:
                best = (bic, w, m, s)
        _, w, m, s = best
        order = np.argsort(m)
        w, m, s = w[order], m[order], s[order]
        w = w / w.sum()
        valid = w > threshold
        if not valid.any():
            valid[np.argmax(w)] = True
        return cls(m.tolist(), s.tolist(), w.tolist(), valid.tolist())

    def to_dict(self) -> dict:
        return {
            "mode_means": self.mode_means,
            "mode_stds": self.mode_stds,
            "mode_weights": self.mode_weights,
            "valid_mode_mask": self.valid_mode_mask,
        }


# ---------------------------------------------------------------------------
# Layout and transformer


@dataclass(frozen=True)
class Span:
    """One block of the encoded vector: ``[start, start + width)``."""

    column: str
    start: int
    width: int
    activation: str  # "tanh" or "softmax"

    @property
    def stop(self) -> int:
        return self.start + self.width


@dataclass
class EncodedLayout:
    spans: list[Span]
    width: int
    # column name -> (scalar span, mode span) or (one-hot span,)
    columns: dict[str, tuple[Span, ...]] = field(default_factory=dict)

    @property
    def categorical_spans(self) -> list[Span]:
        return [s for s in self.spans if s.activation == "softmax" and len(self.columns[s.column]) == 1]


class DataTransformer:
    """Fitted, immutable mixed-type encoder.

    Use :meth:`fit` to build one.  ``encode``/``decode`` work on whole
    DataFrames (row tables); :meth:`encode_row` and :meth:`decode_vector`
    are single-row conveniences.
    """

    def __init__(self, schema: list[ColumnSchema], transforms: dict[str, ContinuousTransform]):
        _check_unique([c.name for c in schema])
        self.schema = schema
        self.transforms = transforms
        self.category_index = {
            c.name: {label: i for i, label in enumerate(c.categories)}
            for c in schema
            if c.kind == CATEGORICAL
        }
        spans = []
        columns = {}
        pos = 0
        for col in schema:
            if col.kind == CONTINUOUS:
                n_modes = transforms[col.name].n_valid
                scalar = Span(col.name, pos, 1, "tanh")
                mode = Span(col.name, pos + 1, n_modes, "softmax")
                spans += [scalar, mode]
                columns[col.name] = (scalar, mode)
                pos += 1 + n_modes
            else:
                onehot = Span(col.name, pos, len(col.categories), "softmax")
                spans.append(onehot)
                columns[col.name] = (onehot,)
                pos += onehot.width
        self.layout = EncodedLayout(spans, pos, columns)

    @property
    def columns(self) -> list[str]:
        return [c.name for c in self.schema]

    @property
    def output_width(self) -> int:
        return self.layout.width

    @classmethod
    def fit(cls, data: pd.DataFrame, schema: list[ColumnSchema], max_modes: int = MAX_MODES):
        if len(data) == 0:
            raise SchemaError("cannot fit a transformer on an empty table")
        names = [c.name for c in schema]
        if list(data.columns) != names:
            raise SchemaError(f"table columns {list(data.columns)} do not match schema {names}")
        fitted = []
        transforms = {}
        for col in schema:
            values = data[col.name]
            if values.isna().any() or (values.astype(str).str.strip() == "").any():
                raise SchemaError(f"column {col.name!r} has missing values")
            if col.kind == CONTINUOUS:
                try:
                    x = values.astype(float).to_numpy()
                except ValueError as exc:
                    raise SchemaError(f"column {col.name!r}: {exc}") from None
                if not np.isfinite(x).all():
                    raise SchemaError(f"column {col.name!r} has non-finite values")
                ct = ContinuousTransform.fit(x, max_modes=max_modes)
                transforms[col.name] = ct
                fitted.append(ColumnSchema(col.name, CONTINUOUS, modes=ct.n_valid))
            else:
                observed = set(values.astype(str))
                cats = col.categories
                if cats is None:
                    cats = sorted(observed)
                else:
                    missing = observed - set(cats)
                    if missing:
                        raise SchemaError(f"column {col.name!r}: labels {sorted(missing)} not in schema")
                fitted.append(ColumnSchema(col.name, CATEGORICAL, categories=list(cats)))
        return cls(fitted, transforms)

    # -- encoding -----------------------------------------------------------

    def encode(self, data: pd.DataFrame, rng: np.random.Generator) -> np.ndarray:
        """Encode a row table; mode indicators are sampled from the responsibilities."""
        n = len(data)
        out = np.zeros((n, self.layout.width))
        for col in self.schema:
            spans = self.layout.columns[col.name]
            if col.kind == CONTINUOUS:
                x = np.asarray(data[col.name], dtype=float)
                if not np.isfinite(x).all():
                    raise ValueError(f"column {col.name!r}: non-finite value")
                ct = self.transforms[col.name]
                means, stds, _ = ct._valid()
                probs = ct.responsibilities(x)
                u = rng.random((n, 1))
                k = (probs.cumsum(axis=1) < u).sum(axis=1)
                k = np.minimum(k, probs.shape[1] - 1)
                alpha = np.clip((x - means[k]) / (4 * stds[k]), -1.0, 1.0)
                out[:, spans[0].start] = alpha
                out[np.arange(n), spans[1].start + k] = 1.0
            else:
                index = self.category_index[col.name]
                try:
                    idx = np.array([index[str(v)] for v in data[col.name]], dtype=int)
                except KeyError as exc:
                    raise ValueError(f"column {col.name!r}: unknown label {exc.args[0]!r}") from None
                out[np.arange(n), spans[0].start + idx] = 1.0
        return out

    def decode(self, encoded) -> pd.DataFrame:
        encoded = np.asarray(encoded, dtype=float)
        if encoded.ndim != 2 or encoded.shape[1] != self.layout.width:
            raise ValueError(f"expected width {self.layout.width}, got shape {encoded.shape}")
        if not np.isfinite(encoded).all():
            raise ValueError("cannot decode non-finite values")
        cols = {}
        for col in self.schema:
            spans = self.layout.columns[col.name]
            if col.kind == CONTINUOUS:
                means, stds, _ = self.transforms[col.name]._valid()
                alpha = np.clip(encoded[:, spans[0].start], -1.0, 1.0)
                k = encoded[:, spans[1].start : spans[1].stop].argmax(axis=1)
                cols[col.name] = alpha * 4 * stds[k] + means[k]
            else:
                k = encoded[:, spans[0].start : spans[0].stop].argmax(axis=1)
                cols[col.name] = np.asarray(col.categories, dtype=object)[k]
        return pd.DataFrame(cols, columns=self.columns)

    def encode_row(self, row, rng) -> np.ndarray:
        return self.encode(pd.DataFrame([list(row)], columns=self.columns), rng)[0]

    def decode_vector(self, vector) -> list:
        return self.decode(np.asarray(vector)[None, :]).iloc[0].tolist()

    # -- typed conversion ---------------------------------------------------

    def coerce(self, data: pd.DataFrame) -> pd.DataFrame:
        """Cast string cells to floats/labels according to the schema."""
        out = {}
        for col in self.schema:
            if col.kind == CONTINUOUS:
                out[col.name] = data[col.name].astype(float)
            else:
                out[col.name] = data[col.name].astype(str)
        return pd.DataFrame(out, columns=self.columns)

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": [c.to_dict() for c in self.schema],
            "transforms": {k: v.to_dict() for k, v in self.transforms.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> DataTransformer:
        schema = [ColumnSchema.from_dict(c) for c in d["schema"]]
        transforms = {k: ContinuousTransform(**v) for k, v in d["transforms"].items()}
        return cls(schema, transforms)


def fit_transformer(dataset: pd.DataFrame, schema: list[ColumnSchema], max_modes: int = MAX_MODES):
    return DataTransformer.fit(dataset, schema, max_modes=max_modes)
