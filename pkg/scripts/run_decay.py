#!/usr/bin/env python3
"""Run a corrector decay study and print per-layer contraction ratios.

Usage: python3 scripts/run_decay.py [config.toml] [--out DIR]
Defaults to configs/decay.toml.  The study produces three sequences over
m = 1..m_max: exterior corrector energy, localization (truncation) error,
and non-conformity norm; each should contract geometrically in m.
"""

import argparse
import pathlib
import sys

import numpy as np

from maxlod.cli import parse_config
from maxlod import analysis


def main() -> int:
    root = pathlib.Path(__file__).resolve().parents[1]
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("config", nargs="?",
                    default=str(root / "configs" / "decay.toml"))
    ap.add_argument("--out", default="out")
    args = ap.parse_args()

    cfg = parse_config(args.config, overrides={"out_dir": args.out})
    result = analysis.run_study(cfg)
    out = pathlib.Path(args.out) / result.manifest["run_id"]
    out.mkdir(parents=True, exist_ok=True)
    result.write(out / "results.csv", out / "manifest.json")
    print(f"results -> {out / 'results.csv'}")

    labels = result.manifest.get("row_kinds",
                                 ["exterior", "truncation", "nonconformity"])
    for label, row in zip(labels, result.rows):
        vals = np.array([v for v in row.decay if v is not None], dtype=float)
        seq = vals[1:] if label == "exterior" else vals
        ratio, r2 = analysis.log_linear_fit(np.maximum(seq, 1e-300))
        print(f"  {label:15s} values={np.array2string(vals, precision=3)}  "
              f"ratio/layer={ratio:.3f}  R^2={r2:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
