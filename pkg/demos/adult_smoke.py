"""Adult census smoke run: one GACTGAN model against its own point-estimate baseline.

    python demos/adult_smoke.py [--epochs 50]

Takes tens of minutes on one CPU core.
"""

import argparse
import json
import time
from pathlib import Path

from gactgan import GACTGAN, TrainConfig
from gactgan.evaluate import UtilitySpec, evaluate_one
from gactgan.experiment import load_table

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--rank", type=int, default=100)
    ap.add_argument("--alpha", type=float, default=0.5)
    args = ap.parse_args()

    df, schema = load_table(ROOT / "data" / "adult.csv", overrides={"education-num": "categorical"})
    spec = UtilitySpec.from_dict(json.loads((ROOT / "configs" / "adult_spec.json").read_text()))
    model = GACTGAN(TrainConfig(loss="wasserstein", epochs=args.epochs, batch_size=500, seed=0), max_rank=args.rank, t_collect=10)
    t0 = time.perf_counter()
    model.fit(df, schema)
    print(f"trained in {(time.perf_counter() - t0) / 60:.1f} min")

    numeric = {c.name: float for c in schema if c.kind == "continuous"}
    runs = {
        "gactgan": model.sample(len(df), alpha=args.alpha, rank=args.rank, seed=1),
        "ctgan": model.sample_ctgan(len(df), seed=1),
    }
    for name, syn in runs.items():
        res = evaluate_one(df, syn.astype(numeric), spec, 0.75)
        print(f"{name:<8} U={res['U']:.4f} ROC={res['roc']:.4f} CIO={res['cio']:.4f} R={res['R']:.4f} SS={res['SS']:.4f}")


if __name__ == "__main__":
    main()
