"""Narrow utility (ROC, CIO), disclosure risk (TCAP), selection score, Pareto front."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

logger = logging.getLogger(__name__)

ROC_BINS = 10
UTILITY_CUTOFF = 0.4


class MetricError(ValueError):
    pass


@dataclass
class UtilitySpec:
    """Which tabulations, regression and attack to evaluate.

    ``roc_targets`` is a list of column subsets; ``cio`` is
    ``(outcome, predictors)``; ``tcap`` is ``(keys, target)``.
    """

    roc_targets: list[list[str]]
    cio: tuple[str, list[str]] | None = None
    tcap: tuple[list[str], str] | None = None
    tcap_threshold: float = 1.0

    def validate(self, table: pd.DataFrame) -> None:
        cols = set(table.columns)
        needed = [c for t in self.roc_targets for c in t]
        if self.cio:
            needed += [self.cio[0], *self.cio[1]]
            if table[self.cio[0]].nunique() != 2:
                raise MetricError(f"CIO outcome {self.cio[0]!r} must have exactly 2 categories")
        if self.tcap:
            needed += [*self.tcap[0], self.tcap[1]]
        missing = sorted(set(needed) - cols)
        if missing:
            raise MetricError(f"unknown columns in utility spec: {missing}")
        if self.tcap:
            numeric = [c for c in [*self.tcap[0], self.tcap[1]] if _is_numeric(table[c])]
            if numeric:
                raise MetricError(f"TCAP keys and target must be categorical, got numeric {numeric}")

    @classmethod
    def from_dict(cls, d: dict) -> UtilitySpec:
        allowed = {"roc_targets", "cio", "tcap", "tcap_threshold"}
        unknown = set(d) - allowed
        if unknown:
            raise MetricError(f"unknown keys in utility spec: {sorted(unknown)}")
        cio = d.get("cio")
        tcap = d.get("tcap")
        return cls(
            roc_targets=[list(t) for t in d.get("roc_targets", [])],
            cio=(cio["outcome"], list(cio["predictors"])) if cio else None,
            tcap=(list(tcap["keys"]), tcap["target"]) if tcap else None,
            tcap_threshold=d.get("tcap_threshold", 1.0),
        )

    def to_dict(self) -> dict:
        out = {"roc_targets": self.roc_targets, "tcap_threshold": self.tcap_threshold}
        if self.cio:
            out["cio"] = {"outcome": self.cio[0], "predictors": self.cio[1]}
        if self.tcap:
            out["tcap"] = {"keys": self.tcap[0], "target": self.tcap[1]}
        return out


# ---------------------------------------------------------------------------
# Ratio of counts


def _is_numeric(s: pd.Series) -> bool:
    return pd.api.types.is_numeric_dtype(s)


def _bin_edges(values) -> np.ndarray:
    edges = np.unique(np.quantile(np.asarray(values, dtype=float), np.linspace(0, 1, ROC_BINS + 1)))
    return edges[1:-1]


def _cells(table: pd.DataFrame, columns, edges) -> pd.Series:
    parts = []
    for c in columns:
        if c in edges:
            parts.append(pd.Series(np.digitize(table[c].astype(float), edges[c]), index=table.index).astype(str))
        else:
            parts.append(table[c].astype(str))
    key = parts[0]
    for p in parts[1:]:
        key = key + "\x1f" + p
    return key.value_counts()


def roc(original: pd.DataFrame, synthetic: pd.DataFrame, columns) -> float:
    """Mean of min/max cell-count ratios over the union of observed cells.

    Numeric columns are cut into 10 equal-frequency bins whose edges come
    from the original table.
    """
    columns = list(columns)
    if not columns:
        raise MetricError("roc needs at least one column")
    edges = {c: _bin_edges(original[c]) for c in columns if _is_numeric(original[c])}
    a = _cells(original, columns, edges)
    b = _cells(synthetic, columns, edges)
    a, b = a.align(b, fill_value=0)
    a = a.to_numpy(dtype=float)
    b = b.to_numpy(dtype=float)
    keep = (a > 0) | (b > 0)
    if not keep.any():
        raise MetricError("no observed cells")
    return float(np.mean(np.minimum(a[keep], b[keep]) / np.maximum(a[keep], b[keep])))


# ---------------------------------------------------------------------------
# Confidence interval overlap


@dataclass
class LogitFit:
    coef: np.ndarray
    se: np.ndarray
    converged: bool
    usable: np.ndarray  # per-coefficient flag


def fit_logit(X: np.ndarray, y: np.ndarray, max_iter: int = 100, tol: float = 1e-8) -> LogitFit:
    """Logistic regression by iteratively reweighted least squares.

    Coefficients are flagged unusable when their column is all zero, when
    the fit fails to converge and the coefficient was still moving, or when
    the estimate or its standard error is not finite.
    """
    n, p = X.shape
    present = np.abs(X).sum(axis=0) > 0
    beta = np.zeros(p)
    Xp = X[:, present]
    b = np.zeros(Xp.shape[1])
    converged = False
    step = np.zeros_like(b)
    for _ in range(max_iter):
        eta = np.clip(Xp @ b, -35, 35)
        mu = 1.0 / (1.0 + np.exp(-eta))
        w = np.maximum(mu * (1 - mu), 1e-12)
        H = (Xp * w[:, None]).T @ Xp
        g = Xp.T @ (y - mu)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        b = b + step
        if np.max(np.abs(step)) < tol * (1 + np.max(np.abs(b))):
            converged = True
            break
    eta = np.clip(Xp @ b, -35, 35)
    mu = 1.0 / (1.0 + np.exp(-eta))
    H = (Xp * np.maximum(mu * (1 - mu), 1e-12)[:, None]).T @ Xp
    with np.errstate(all="ignore"):
        try:
            cov = np.linalg.inv(H)
            se_p = np.sqrt(np.diag(cov))
        except np.linalg.LinAlgError:
            se_p = np.full(len(b), np.nan)
    beta[present] = b
    se = np.full(p, np.nan)
    se[present] = se_p
    usable = present & np.isfinite(beta) & np.isfinite(se)
    if not converged:
        moving = np.zeros(p, dtype=bool)
        moving[present] = np.abs(step) >= 1e-6 * (1 + np.abs(b))
        usable &= ~moving
    return LogitFit(beta, se, converged, usable)


def design_matrix(table: pd.DataFrame, predictors, levels: dict) -> np.ndarray:
    """Intercept, numeric predictors as-is, categorical predictors drop-first coded."""
    cols = [np.ones(len(table))]
    for c in predictors:
        if c in levels:
            vals = table[c].astype(str).to_numpy()
            for lvl in levels[c][1:]:
                cols.append((vals == lvl).astype(float))
        else:
            cols.append(table[c].astype(float).to_numpy())
    return np.column_stack(cols)


def interval_overlap(lo1, hi1, lo2, hi2) -> float:
    """``0.5 * (overlap / len1 + overlap / len2)``, floored at 0."""
    ov = min(hi1, hi2) - max(lo1, lo2)
    j = 0.5 * (ov / (hi1 - lo1) + ov / (hi2 - lo2))
    return max(0.0, j)


def cio(original: pd.DataFrame, synthetic: pd.DataFrame, outcome: str, predictors) -> float:
    """Mean 95% confidence-interval overlap of logistic-regression coefficients."""
    return cio_details(original, synthetic, outcome, predictors)[0]


def cio_details(original: pd.DataFrame, synthetic: pd.DataFrame, outcome: str, predictors, z: float | None = None):
    """Like :func:`cio` but returns ``(value, excluded)``.

    ``excluded`` names coefficients left out because either fit could not
    estimate them (absent level, separation, non-convergence).
    """
    z = stats.norm.ppf(0.975) if z is None else z
    levels_y = sorted(original[outcome].astype(str).unique())
    if len(levels_y) != 2:
        raise MetricError(f"outcome {outcome!r} must be binary")
    levels = {
        c: sorted(original[c].astype(str).unique()) for c in predictors if not _is_numeric(original[c])
    }
    names = ["(intercept)"]
    for c in predictors:
        names += [f"{c}={lvl}" for lvl in levels[c][1:]] if c in levels else [c]
    fits = []
    for table in (original, synthetic):
        X = design_matrix(table, predictors, levels)
        y = (table[outcome].astype(str).to_numpy() == levels_y[1]).astype(float)
        fits.append(fit_logit(X, y))
    fo, fs = fits
    usable = fo.usable & fs.usable
    excluded = [n for n, u in zip(names, usable) if not u]
    if excluded:
        logger.info("CIO: excluded coefficients %s", excluded)
    if not usable.any():
        raise MetricError("CIO: no coefficient could be estimated on both tables")
    js = []
    for j in np.flatnonzero(usable):
        lo1, hi1 = fo.coef[j] - z * fo.se[j], fo.coef[j] + z * fo.se[j]
        lo2, hi2 = fs.coef[j] - z * fs.se[j], fs.coef[j] + z * fs.se[j]
        if hi1 <= lo1 or hi2 <= lo2:
            js.append(1.0 if (lo1 == lo2 and hi1 == hi2) else 0.0)
        else:
            js.append(interval_overlap(lo1, hi1, lo2, hi2))
    return float(np.mean(js)), excluded


# ---------------------------------------------------------------------------
# Disclosure risk


def rescaled_risk(tcap: float, weap: float) -> float:
    """``max(0, (tcap - weap) / (1 - weap))`` clamped to [0, 1]."""
    if weap >= 1.0:
        return 0.0
    return float(min(1.0, max(0.0, (tcap - weap) / (1.0 - weap))))


def _key(table, columns):
    k = table[columns[0]].astype(str)
    for c in columns[1:]:
        k = k + "\x1f" + table[c].astype(str)
    return k


def tcap_scores(original: pd.DataFrame, synthetic: pd.DataFrame, keys, target, threshold: float = 1.0):
    """Return ``(tcap, baseline, attack_set_size)``.

    Each synthetic record gets a within-synthetic attribution probability
    (share of records with its key values that also carry its target).  The
    records at or above ``threshold`` form the attack set; ``tcap`` is the
    mean, over that set, of the share of original records with the same keys
    carrying the attributed target (0 for keys unseen in the original).
    ``baseline`` is the relative frequency of the modal synthetic target.
    """
    keys = list(keys)
    sk = _key(synthetic, keys).to_numpy()
    st = synthetic[target].astype(str).to_numpy()
    ok = _key(original, keys).to_numpy()
    ot = original[target].astype(str).to_numpy()
    syn = pd.DataFrame({"k": sk, "t": st})
    weap = (
        syn.groupby(["k", "t"])["k"].transform("size").to_numpy()
        / syn.groupby("k")["k"].transform("size").to_numpy()
    )
    attack = weap >= threshold
    baseline = float(pd.Series(st).value_counts(normalize=True).iloc[0]) if len(st) else 0.0
    if not attack.any():
        return 0.0, baseline, 0
    orig = pd.DataFrame({"k": ok, "t": ot})
    okt = orig.groupby(["k", "t"]).size().to_dict()
    okc = orig.groupby("k").size().to_dict()
    vals = [okt.get((k, t), 0) / okc[k] if k in okc else 0.0 for k, t in zip(sk[attack], st[attack])]
    return float(np.mean(vals)), baseline, int(attack.sum())


def tcap_risk(original, synthetic, keys, target, threshold: float = 1.0) -> float:
    tcap, baseline, _ = tcap_scores(original, synthetic, keys, target, threshold)
    return rescaled_risk(tcap, baseline)


# ---------------------------------------------------------------------------
# Aggregation and selection


def _check_unit(name, v):
    if not (0.0 <= v <= 1.0) or math.isnan(v):
        raise MetricError(f"{name} must lie in [0, 1], got {v}")


def selection_score(utility: float, risk: float, phi: float) -> float:
    for name, v in (("utility", utility), ("risk", risk), ("phi", phi)):
        _check_unit(name, v)
    return phi * utility + (1 - phi) * (1 - risk)


def aggregate_utility(roc_mean: float | None, cio_mean: float | None = None) -> float:
    parts = [v for v in (roc_mean, cio_mean) if v is not None]
    if not parts:
        raise MetricError("no utility components")
    for v in parts:
        _check_unit("utility component", v)
    return float(np.mean(parts))


def pareto_front(points) -> list[bool]:
    """Membership flags for the (maximise utility, minimise risk) front.

    ``points`` is a sequence of ``(U, R)``; a point is excluded only if some
    other point is at least as good on both and strictly better on one.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return []
    if not np.isfinite(pts).all():
        raise MetricError("pareto_front needs finite values")
    order = np.lexsort((pts[:, 1], -pts[:, 0]))  # U desc, then R asc
    flags = np.zeros(len(pts), dtype=bool)
    best_r = math.inf
    i = 0
    while i < len(order):
        # group exact duplicates so ties stay together
        j = i
        u, r = pts[order[i]]
        while j < len(order) and pts[order[j], 0] == u and pts[order[j], 1] == r:
            j += 1
        if r < best_r:
            flags[order[i:j]] = True
        best_r = min(best_r, r)
        i = j
    return flags.tolist()


@dataclass
class EvalReport:
    roc_mean: float | None
    cio_mean: float | None
    utility: float
    risk: float
    selection_score: float
    per_seed: list[dict] = field(default_factory=list)


def evaluate_one(original: pd.DataFrame, synthetic: pd.DataFrame, spec: UtilitySpec, phi: float = 0.75) -> dict:
    """Utility, risk and selection score of a single synthetic replicate."""
    rocs = [roc(original, synthetic, cols) for cols in spec.roc_targets]
    roc_mean = float(np.mean(rocs)) if rocs else None
    cio_mean = None
    excluded = []
    if spec.cio:
        cio_mean, excluded = cio_details(original, synthetic, spec.cio[0], spec.cio[1])
    u = aggregate_utility(roc_mean, cio_mean)
    r = tcap_risk(original, synthetic, spec.tcap[0], spec.tcap[1], spec.tcap_threshold) if spec.tcap else 0.0
    return {
        "roc": roc_mean,
        "cio": cio_mean,
        "U": u,
        "R": r,
        "SS": selection_score(u, r, phi),
        "cio_excluded": excluded,
    }


def evaluate_replicates(original, synthetics, spec: UtilitySpec, phi: float = 0.75) -> EvalReport:
    """Average :func:`evaluate_one` over synthetic replicates (different seeds)."""
    per = [evaluate_one(original, s, spec, phi) for s in synthetics]

    def mean(key):
        vals = [p[key] for p in per if p[key] is not None]
        return float(np.mean(vals)) if vals else None

    u, r = mean("U"), mean("R")
    return EvalReport(mean("roc"), mean("cio"), u, r, selection_score(u, r, phi), per)
