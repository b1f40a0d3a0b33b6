#!/usr/bin/env python3
"""Train the full model and its ablations under one shared budget.

    python scripts/ablation_sweep.py --workdir runs/sweep --seed 11

Variants: the full three-node quantile head, the single-node head, and
one drop-channel run per informative channel (radar and NIR). Reuses
the dataset under --workdir if one is already there, so it composes
with end_to_end.py. Pass --setting exclusive:<region> to hold a whole
pseudo-region out of training instead of a random tile split.
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from coverest import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", required=True)
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--tiles", type=int, default=125)
    parser.add_argument("--epochs", type=int, default=25)
    parser.add_argument("--setting", default=None, help="holistic | intra:<tag> | exclusive:<tag>")
    parser.add_argument(
        "--ablations", default="none,single-node,drop-channel:0,drop-channel:4"
    )
    args = parser.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    data = work / "data"
    seed = str(args.seed)

    if not (data / "manifest.json").exists():
        scene_cfg = work / "scene.json"
        scene_cfg.write_text(json.dumps({"n_tiles": args.tiles}), encoding="utf-8")
        rc = cli.main(["gen-data", "--config", str(scene_cfg), "--out", str(data), "--seed", seed])
        if rc:
            return rc

    train_cfg = work / "train.json"
    train_cfg.write_text(json.dumps({"epochs": args.epochs}), encoding="utf-8")
    argv = [
        "ablate", "--data", str(data), "--config", str(train_cfg),
        "--out", str(work / "sweep"), "--seed", seed, "--ablations", args.ablations,
    ]
    if args.setting:
        argv += ["--setting", args.setting]
    rc = cli.main(argv)
    if rc:
        return rc

    print((work / "sweep" / "ablation_report.csv").read_text().rstrip())
    return 0


if __name__ == "__main__":
    sys.exit(main())
