"""Run a small risk-utility sweep on the toy table and print the R-U map.

    python demos/toy_sweep.py [--out runs/demo]

Uses the same code path as ``gactgan sweep``; the epoch count is kept low so
the whole run finishes in a few minutes.
"""

import argparse
import csv
import json
import tempfile
from pathlib import Path

from gactgan import experiment as ex
from gactgan.toy import bimodal_table


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=None)
    ap.add_argument("--epochs", type=int, default=20)
    args = ap.parse_args()

    work = Path(args.out or tempfile.mkdtemp(prefix="gactgan-demo-"))
    work.mkdir(parents=True, exist_ok=True)
    bimodal_table(2000, seed=0).to_csv(work / "toy.csv", index=False)
    cfg = ex.ExperimentConfig.from_dict(
        {
            "dataset": "toy.csv",
            "train": {"epochs": args.epochs, "batch_size": 500},
            "swag": {"ranks": [0, 30], "alphas": [0.0, 0.5, 1.0], "t_collect": args.epochs // 2},
            "eval": {"roc_targets": [["x"], ["a"], ["b"], ["a", "b"]], "tcap": {"keys": ["a"], "target": "b"}},
            "seeds": [0, 1],
        },
        base_dir=work,
    )
    report = ex.cmd_sweep(cfg, work / "runs")
    base = work / "runs" / cfg.config_hash()

    print(f"{'config':<32}{'U':>8}{'R':>8}{'SS':>8}  front")
    for row in csv.DictReader(open(base / "rumap.csv")):
        mark = "*" if row["pareto"] == "1" else ""
        print(f"{row['config']:<32}{float(row['U']):>8.3f}{float(row['R']):>8.3f}{float(row['SS']):>8.3f}  {mark}")
    print("best by selection score:", json.dumps(report["best"]))
    print("outputs in", base)


if __name__ == "__main__":
    main()
