"""Run the long MNIST experiments the acceptance suite checks.

Each run goes to results/acceptance/<name>/ with a wall.json next to the
usual artifacts. Finished runs (summary.json present) are skipped, so the
script can be restarted.

    python scripts/run_acceptance.py            # everything, about 6 CPU-hours
    python scripts/run_acceptance.py --only reduced_s0 rpsnet_s0
"""
from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
OUT = ROOT / "results" / "acceptance"


def plan() -> list[tuple[str, list[str]]]:
    full, reduced = "configs/mnist.yaml", "configs/mnist_reduced.yaml"
    runs = [("reduced_s0", ["--config", reduced, "--seed", "0"])]
    for seed in (0, 1, 2):
        runs += [
            (f"rpsnet_s{seed}", ["--config", full, "--seed", str(seed)]),
            (f"finetune_s{seed}", ["--config", full, "--seed", str(seed), "--mode", "finetune"]),
            (f"joint_s{seed}", ["--config", full, "--seed", str(seed), "--mode", "joint"]),
        ]
        if seed == 0:
            runs.append(("single_s0", ["--config", full, "--seed", "0", "--threshold", "inf"]))
    return runs


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--only", nargs="*")
    args = ap.parse_args()
    status = 0
    for name, argv in plan():
        if args.only and name not in args.only:
            continue
        out = OUT / name
        if (out / "summary.json").exists():
            print(f"{name}: done, skipping", flush=True)
            continue
        cmd = [sys.executable, "-m", "rpsnet.cli", "run", *argv, "--out", str(out)]
        print(f"{name}: {' '.join(cmd)}", flush=True)
        start = time.perf_counter()
        rc = subprocess.run(cmd, cwd=ROOT).returncode
        wall = time.perf_counter() - start
        if rc != 0:
            print(f"{name}: exit {rc}", flush=True)
            status = rc
            continue
        (out / "wall.json").write_text(json.dumps({"seconds": round(wall, 1), "argv": argv}, indent=1) + "\n")
        summary = json.loads((out / "summary.json").read_text())
        print(f"{name}: A_K={summary['final_average']:.4f} in {wall / 60:.1f} min", flush=True)
    return status


if __name__ == "__main__":
    sys.exit(main())
