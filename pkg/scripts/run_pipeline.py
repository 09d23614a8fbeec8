#!/usr/bin/env python3
"""Run the full audit pipeline end to end on a config and print a digest.

Usage: python scripts/run_pipeline.py [--config configs/example.ini] [--out runs/example]
"""

import argparse
import json
import sys
from pathlib import Path

from kernelbias import harness


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", default="configs/example.ini")
    parser.add_argument("--out", default="runs/example")
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()

    for verb in ("train-sweep", "attack", "inject-sweep", "regress"):
        code = harness.main([verb, "--config", args.config, "--out", args.out,
                             "--threads", str(args.threads)])
        if code != 0:
            print(f"{verb} failed with exit code {code}", file=sys.stderr)
            return code
        print(f"{verb}: done")
    harness.main(["report", "--out", args.out])

    report = json.loads((Path(args.out) / "report.json").read_text())
    acc = report["sections"].get("accuracy_unperturbed", [])
    print("\nunperturbed accuracy (seed-averaged):")
    for row in acc:
        print(f"  flks={row['flks']:>2}  {row['group']:>8}  {row['accuracy']:.3f}  (n={row['n']})")
    summary = report["sections"].get("attack_summary", [])
    print("\nattack summary (pooled over seeds):")
    for row in summary:
        print(
            f"  {row['attack_kind']:>4} flks={row['flks']:>2} {row['group']:>8}  "
            f"success={row['success_rate']:.2f}  median d_p={row['median_dp_success']}  "
            f"median f0.5={row['f_half_median']}"
        )
    print(f"\nfull report: {args.out}/report.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
