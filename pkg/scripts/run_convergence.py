#!/usr/bin/env python3
"""Run a convergence study and print the observed order.

Usage: python3 scripts/run_convergence.py [config.toml] [--out DIR]
Defaults to configs/convergence.toml.
"""

import argparse
import csv
import math
import pathlib
import sys

from maxlod.cli import parse_config
from maxlod import analysis


def main() -> int:
    root = pathlib.Path(__file__).resolve().parents[1]
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("config", nargs="?",
                    default=str(root / "configs" / "convergence.toml"))
    ap.add_argument("--out", default="out")
    args = ap.parse_args()

    cfg = parse_config(args.config, overrides={"out_dir": args.out})
    result = analysis.run_study(cfg)
    out = pathlib.Path(args.out) / result.manifest["run_id"]
    out.mkdir(parents=True, exist_ok=True)
    result.write(out / "results.csv", out / "manifest.json")

    rows = list(csv.DictReader(result.to_csv_text().splitlines()))
    ok = [r for r in rows if r["status"] == "ok"]
    print(f"{len(ok)}/{len(rows)} rows ok -> {out / 'results.csv'}")
    for r in ok:
        print(f"  H={float(r['H']):.4g}  m={r['m']}  "
              f"err={float(r['err_curl_omega']):.4e}")
    if len(ok) >= 2:
        orders = []
        for a, b in zip(ok, ok[1:]):
            num = math.log(float(a["err_curl_omega"]) / float(b["err_curl_omega"]))
            den = math.log(float(a["H"]) / float(b["H"]))
            orders.append(num / den)
        print("observed order per rung:", " ".join(f"{o:.3f}" for o in orders))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
