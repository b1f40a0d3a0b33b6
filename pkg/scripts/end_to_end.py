#!/usr/bin/env python3
"""Generate a synthetic corpus, train, and score the held-out split.

Reproduces the headline pipeline run with one command:

    python scripts/end_to_end.py --workdir runs/demo --seed 11

All artifacts (dataset, checkpoint, trace, evaluation reports) land
under the work directory; re-running with the same seed reproduces
them byte for byte.
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from coverest import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", required=True, help="directory for all artifacts")
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--tiles", type=int, default=125, help="200x200 tiles to generate")
    parser.add_argument("--epochs", type=int, default=25)
    args = parser.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    data = work / "data"
    seed = str(args.seed)

    scene_cfg = work / "scene.json"
    scene_cfg.write_text(json.dumps({"n_tiles": args.tiles}), encoding="utf-8")
    train_cfg = work / "train.json"
    train_cfg.write_text(json.dumps({"epochs": args.epochs}), encoding="utf-8")

    if not (data / "manifest.json").exists():
        rc = cli.main(["gen-data", "--config", str(scene_cfg), "--out", str(data), "--seed", seed])
        if rc:
            return rc

    rc = cli.main([
        "train", "--data", str(data), "--config", str(train_cfg),
        "--out", str(work / "train"), "--seed", seed,
    ])
    if rc:
        return rc

    rc = cli.main([
        "eval", "--ckpt", str(work / "train" / "model.ckpt"),
        "--data", str(data), "--out", str(work / "eval"),
    ])
    if rc:
        return rc

    summary = json.loads((work / "eval" / "summary.json").read_text())
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
