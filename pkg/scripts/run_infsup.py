#!/usr/bin/env python3
"""Run an inf-sup survey over frequencies and print the measured constants.

Usage: python3 scripts/run_infsup.py [config.toml] [--out DIR]
Defaults to configs/infsup.toml.
"""

import argparse
import pathlib
import sys

from maxlod.cli import parse_config
from maxlod import analysis


def main() -> int:
    root = pathlib.Path(__file__).resolve().parents[1]
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("config", nargs="?",
                    default=str(root / "configs" / "infsup.toml"))
    ap.add_argument("--out", default="out")
    args = ap.parse_args()

    cfg = parse_config(args.config, overrides={"out_dir": args.out})
    result = analysis.run_study(cfg)
    out = pathlib.Path(args.out) / result.manifest["run_id"]
    out.mkdir(parents=True, exist_ok=True)
    result.write(out / "results.csv", out / "manifest.json")
    print(f"results -> {out / 'results.csv'}")
    for row in result.rows:
        flag = "  [omega*H large]" if row.omegaH_flag else ""
        print(f"  omega={row.omega:<6g} beta_W={row.infsup_W:.4f}{flag}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
