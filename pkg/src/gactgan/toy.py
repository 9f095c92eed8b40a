"""Small synthetic tables used by tests and demos."""

import numpy as np
import pandas as pd


def bimodal_table(n: int = 5000, seed: int = 0) -> pd.DataFrame:
    """One bimodal continuous column and two dependent 3-category columns.

    ``x`` is an equal mixture of N(-5, 1) and N(5, 1); ``a`` leans towards
    "a" when x > 0 and towards "c" otherwise; ``b`` copies ``a`` (mapped to
    x/y/z) 80% of the time and is uniform otherwise.
    """
    rng = np.random.default_rng(seed)
    x = np.where(rng.random(n) < 0.5, rng.normal(-5, 1, n), rng.normal(5, 1, n))
    cats = np.array(["a", "b", "c"])
    pos = rng.choice(cats, n, p=[0.7, 0.2, 0.1])
    neg = rng.choice(cats, n, p=[0.1, 0.2, 0.7])
    a = np.where(x > 0, pos, neg)
    mapped = np.array(["x", "y", "z"])[np.searchsorted(cats, a)]
    b = np.where(rng.random(n) < 0.8, mapped, rng.choice(["x", "y", "z"], n))
    return pd.DataFrame({"x": x, "a": a, "b": b})
