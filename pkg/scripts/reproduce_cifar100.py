"""Opt-in CIFAR100-B0 10-step reproduction (GPU-scale; hours on CPU).

Usage::

    python scripts/reproduce_cifar100.py --data-root /path/to/cifar --out runs/cifar100_b0

Trains with ``configs/cifar100_b0_10steps.yaml`` (resuming if the run
directory already holds completed steps) and compares Avg/Last top-1 with the
reference targets. Exits nonzero when either target is missed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from tcil.cli import main as tcil_main
from tcil.manifest import RUN_MANIFEST

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "cifar100_b0_10steps.yaml"
TARGETS = {"avg": (77.30, 1.5), "last": (66.41, 2.0)}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data-root", required=True, help="directory holding the torchvision CIFAR100 files")
    parser.add_argument("--out", required=True, help="run directory")
    parser.add_argument("--config", default=str(CONFIG))
    args = parser.parse_args()

    os.environ["TCIL_DATA_ROOT"] = args.data_root
    argv = ["-v", "train", "--config", args.config, "--out", args.out]
    if (Path(args.out) / RUN_MANIFEST).exists():
        argv.append("--resume")
    code = tcil_main(argv)
    if code:
        return code

    results = json.loads((Path(args.out) / "results.json").read_text())
    ok = True
    for key, (target, tol) in TARGETS.items():
        got = results[key]
        hit = abs(got - target) <= tol
        ok &= hit
        print(f"{key}: {got:.2f} (target {target:.2f} +/- {tol}) {'PASS' if hit else 'FAIL'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
