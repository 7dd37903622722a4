#!/usr/bin/env python3
"""Run the shipped experiment configs and print one summary line each.

    python scripts/run_all.py                  # every config under configs/
    python scripts/run_all.py leakage mislabel # a subset
    python scripts/run_all.py --root-seed 3 --out runs/seed3
"""

import argparse
import json
import sys
import time
from pathlib import Path

from mirinf.errors import MirinfError
from mirinf.experiments import ExperimentConfig, run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("names", nargs="*", help="config names without .json")
    parser.add_argument("--configs", default=str(ROOT / "configs"))
    parser.add_argument("--out", default="runs", help="parent directory for outputs")
    parser.add_argument("--root-seed", type=int, default=None)
    args = parser.parse_args(argv)

    paths = sorted(Path(args.configs).glob("*.json"))
    if args.names:
        wanted = set(args.names)
        paths = [p for p in paths if p.stem in wanted]
        missing = wanted - {p.stem for p in paths}
        if missing:
            parser.error(f"no config named {sorted(missing)}")

    failures = 0
    for path in paths:
        raw = json.loads(path.read_text())
        raw["output_path"] = str(Path(args.out) / path.stem)
        if args.root_seed is not None:
            raw["root_seed"] = args.root_seed
        start = time.perf_counter()
        try:
            manifest = run_experiment(ExperimentConfig.from_dict(raw))
            summary = manifest.summary
            if not summary:
                # timing-only experiments keep their numbers out of the manifest
                timing = json.loads((Path(raw["output_path"]) / "timing.json").read_text())
                summary = timing.get(raw["experiment"], {})
            summary = json.dumps(summary, sort_keys=True)
        except (MirinfError, ValueError, ArithmeticError) as exc:
            failures += 1
            summary = f"FAILED in stage {getattr(exc, 'stage', None)!r}: {exc}"
        print(f"{path.stem:<22} {time.perf_counter() - start:7.1f}s  {summary}", flush=True)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
