"""Command-line pipeline driver.

One binary, six subcommands: gen-data, train, eval, predict, temporal,
ablate. Exit codes: 0 success, 2 configuration error, 3 I/O error,
4 numerical failure. Every run writes exactly one run_manifest.json
into its output directory recording content digests of the inputs, the
produced files, and wall time. All randomness flows from --seed, which
gen-data and train require.

Heavy imports happen inside the command handlers so that --threads can
cap the math-library worker pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .errors import ConfigError, DataFormatError, GeometryError, TrainingDiverged

log = logging.getLogger("coverest")

_THREAD_ENV_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

_DEFAULT_ABLATIONS = "none,single-node,drop-channel:0,drop-channel:4"


def _setup_logging() -> None:
    name = os.environ.get("COVEREST_LOG", "info").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def _apply_threads(n: int) -> None:
    if n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    if "numpy" in sys.modules:
        log.warning("--threads set after numpy import; BLAS caps may not apply")
    for var in _THREAD_ENV_VARS:
        os.environ[var] = str(n)


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    cfg = json.loads(text)
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return cfg


def _reject_seed_key(cfg: dict) -> None:
    if "seed" in cfg:
        raise ConfigError(
            "config files must not set 'seed'; randomness flows from --seed"
        )


def _ensure_out(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_manifest(
    out_dir: Path,
    command: str,
    config_digest: str,
    input_digests: dict,
    output_paths: list[str],
    t0: float,
) -> None:
    from .ioutil import write_json

    write_json(
        out_dir / "run_manifest.json",
        {
            "command": command,
            "tool_version": __version__,
            "config_digest": config_digest,
            "input_digests": dict(sorted(input_digests.items())),
            "output_paths": sorted(output_paths),
            "wall_seconds": round(time.perf_counter() - t0, 3),
        },
    )


def _digest_dict(d: dict) -> str:
    from .ioutil import canonical_json, sha256_bytes

    return sha256_bytes(canonical_json(d).encode("utf-8"))


# ----------------------------------------------------------------------
# command handlers
# ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    t0 = time.perf_counter()
    cfg_dict = _read_config(args.config)
    _reject_seed_key(cfg_dict)
    cfg_dict.setdefault("n_tiles", 125)

    from .synthdata import SceneConfig, generate_dataset, manifest_digest
    from .ioutil import read_json

    config = SceneConfig.from_dict({**cfg_dict, "seed": args.seed})
    out = _ensure_out(args.out)
    manifest_path = generate_dataset(config, out)
    manifest = read_json(manifest_path)
    log.info(
        "generated %d tiles (%d regions) under %s",
        len(manifest["tiles"]),
        len({e["region_tag"] for e in manifest["tiles"]}),
        out,
    )
    _write_run_manifest(
        out,
        "gen-data",
        _digest_dict(config.to_dict()),
        {"dataset_manifest": manifest_digest(manifest)},
        ["manifest.json", "tiles", "masks"],
        t0,
    )
    print(f"wrote {len(manifest['tiles'])} tiles to {out}")
    return 0


def _build_train_config(args):
    from .train import TrainConfig

    cfg_dict = _read_config(args.config)
    _reject_seed_key(cfg_dict)
    if args.setting is not None:
        cfg_dict["setting"] = args.setting
    if args.ablation is not None:
        cfg_dict["ablation"] = args.ablation
    return TrainConfig.from_dict({**cfg_dict, "seed": args.seed})


def _train_into(dataset, train_cfg, out: Path) -> tuple[dict, list[str]]:
    """Run one training job and write its artifacts; returns (meta, paths)."""
    from .ioutil import write_json
    from .synthdata import manifest_digest
    from .train import audit_split, save_checkpoint, train_model, write_trace_csv

    result = train_model(dataset, train_cfg)
    report = audit_split(dataset.manifest, result.splits, train_cfg.setting)
    log.info(
        "split %s: train regions %s, test regions %s",
        report["setting"],
        report["train_regions"],
        report["test_regions"],
    )
    meta = {
        "train_config": train_cfg.to_dict(),
        "dataset_digest": manifest_digest(dataset.manifest),
        "train_ids": result.splits.train_ids,
        "val_ids": result.val_ids,
        "test_ids": result.splits.test_ids,
        "dropped_channel": result.dropped_channel,
    }
    save_checkpoint(result.net, out / "model.ckpt", meta=meta)
    write_trace_csv(result.trace, out / "trace.csv")
    write_json(out / "split_report.json", report)
    last = result.trace[-1] if result.trace else {}
    log.info("final trace row: %s", last)
    return meta, ["model.ckpt", "trace.csv", "split_report.json"]


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    train_cfg = _build_train_config(args)

    from .synthdata import SyntheticDataset, manifest_digest

    dataset = SyntheticDataset(args.data)
    out = _ensure_out(args.out)
    meta, paths = _train_into(dataset, train_cfg, out)
    _write_run_manifest(
        out,
        "train",
        _digest_dict(train_cfg.to_dict()),
        {"dataset_manifest": manifest_digest(dataset.manifest)},
        paths,
        t0,
    )
    print(f"trained {train_cfg.setting}/{train_cfg.ablation}, wrote {out}/model.ckpt")
    return 0


def _load_net(ckpt_path: str):
    from .train import load_checkpoint

    net, header = load_checkpoint(ckpt_path)
    meta = header.get("meta") or {}
    return net, meta


def cmd_eval(args) -> int:
    t0 = time.perf_counter()

    from .evaluate import (
        evaluate_model,
        write_patch_csv,
        write_scatter_csv,
        write_summary_json,
        write_tile_csv,
    )
    from .ioutil import sha256_file
    from .synthdata import SyntheticDataset, manifest_digest

    net, meta = _load_net(args.ckpt)
    dataset = SyntheticDataset(args.data)
    if meta.get("dataset_digest") and meta["dataset_digest"] != manifest_digest(
        dataset.manifest
    ):
        log.warning("dataset differs from the one this checkpoint was trained on")

    if args.split == "all":
        tile_ids = dataset.tile_ids
    else:
        key = {"train": "train_ids", "val": "val_ids", "test": "test_ids"}[args.split]
        tile_ids = meta.get(key)
        if not tile_ids:
            raise ConfigError(
                f"checkpoint meta lacks {key}; use --split all or retrain via the cli"
            )
    missing = [t for t in tile_ids if t not in dataset.tile_entries]
    if missing:
        raise ConfigError(f"split tiles missing from dataset: {missing[:5]}")

    result = evaluate_model(
        net, dataset, tile_ids, drop_channel=meta.get("dropped_channel")
    )
    out = _ensure_out(args.out)
    write_patch_csv(result, out / "patch_report.csv")
    write_tile_csv(result, out / "tile_report.csv")
    write_scatter_csv(result, out / "scatter.csv")
    write_summary_json(result, out / "summary.json")
    _write_run_manifest(
        out,
        "eval",
        _digest_dict({"split": args.split}),
        {
            "checkpoint": sha256_file(args.ckpt),
            "dataset_manifest": manifest_digest(dataset.manifest),
        },
        ["patch_report.csv", "tile_report.csv", "scatter.csv", "summary.json"],
        t0,
    )
    s = result.summary_dict()
    print(
        f"eval {args.split}: pearson_r2 "
        f"{s['patch']['pearson_r2']:.4f} mae {s['patch']['mae']:.2f} "
        f"tile_abs_err {s['mean_tile_abs_error']:.3f}pp"
    )
    return 0


def cmd_predict(args) -> int:
    t0 = time.perf_counter()

    from .evaluate import predict_counts
    from .ioutil import sha256_file
    from .synthdata import SyntheticDataset, manifest_digest

    net, meta = _load_net(args.ckpt)
    dataset = SyntheticDataset(args.data)
    tile_ids = args.tiles.split(",") if args.tiles else dataset.tile_ids

    lines = ["tile_id,offset_row,offset_col,prediction"]
    for tid in tile_ids:
        x, _, patch_meta = dataset.load_patches([tid])
        preds = predict_counts(net, x, drop_channel=meta.get("dropped_channel"))
        for m, p in zip(patch_meta, preds):
            r, c = m["offset"]
            lines.append(f"{tid},{r},{c},{float(p)!r}")

    out = _ensure_out(args.out)
    (out / "predictions.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_run_manifest(
        out,
        "predict",
        _digest_dict({"tiles": tile_ids}),
        {
            "checkpoint": sha256_file(args.ckpt),
            "dataset_manifest": manifest_digest(dataset.manifest),
        },
        ["predictions.csv"],
        t0,
    )
    print(f"wrote predictions for {len(tile_ids)} tiles to {out}/predictions.csv")
    return 0


def _region_coverage(net, dataset, drop_channel) -> dict[str, float]:
    """Predicted coverage percent per region: total counts over total area."""
    from .evaluate import predict_counts
    from .raster import PATCH_PIXELS

    totals: dict[str, list[float]] = {}
    for tid in dataset.tile_ids:
        x, _, _ = dataset.load_patches([tid])
        preds = predict_counts(net, x, drop_channel=drop_channel)
        region = dataset.region_of(tid)
        acc = totals.setdefault(region, [0.0, 0.0])
        acc[0] += float(preds.sum())
        acc[1] += len(preds) * PATCH_PIXELS
    return {
        tag: (100.0 * built / area if area else 0.0)
        for tag, (built, area) in sorted(totals.items())
    }


def cmd_temporal(args) -> int:
    t0 = time.perf_counter()

    from .evaluate import growth_rate
    from .ioutil import sha256_file
    from .synthdata import SyntheticDataset, manifest_digest

    net, meta = _load_net(args.ckpt)
    drop = meta.get("dropped_channel")
    ds1 = SyntheticDataset(args.data_t1)
    ds2 = SyntheticDataset(args.data_t2)
    cov1 = _region_coverage(net, ds1, drop)
    cov2 = _region_coverage(net, ds2, drop)

    lines = ["region,coverage_t1_pct,coverage_t2_pct,growth_pct,defined"]
    for tag in sorted(set(cov1) | set(cov2)):
        c1 = cov1.get(tag, 0.0)
        c2 = cov2.get(tag, 0.0)
        growth = growth_rate(c1, c2)
        if growth is None:
            log.warning("region %s has zero coverage at t1; growth undefined", tag)
            lines.append(f"{tag},{c1!r},{c2!r},,false")
        else:
            lines.append(f"{tag},{c1!r},{c2!r},{growth!r},true")

    out = _ensure_out(args.out)
    (out / "growth.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_run_manifest(
        out,
        "temporal",
        _digest_dict({}),
        {
            "checkpoint": sha256_file(args.ckpt),
            "dataset_t1": manifest_digest(ds1.manifest),
            "dataset_t2": manifest_digest(ds2.manifest),
        },
        ["growth.csv"],
        t0,
    )
    print(f"wrote growth table for {len(lines) - 1} regions to {out}/growth.csv")
    return 0


def cmd_ablate(args) -> int:
    t0 = time.perf_counter()

    from .evaluate import evaluate_model
    from .synthdata import SyntheticDataset, manifest_digest
    from .train import TrainConfig

    cfg_dict = _read_config(args.config)
    _reject_seed_key(cfg_dict)
    if args.setting is not None:
        cfg_dict["setting"] = args.setting
    ablations = [a.strip() for a in args.ablations.split(",") if a.strip()]
    if not ablations:
        raise ConfigError("--ablations must list at least one variant")

    dataset = SyntheticDataset(args.data)
    out = _ensure_out(args.out)
    rows = ["ablation,pearson_r2,r2_determination,mae,mean_tile_abs_error"]
    paths = []
    for ablation in ablations:
        train_cfg = TrainConfig.from_dict(
            {**cfg_dict, "seed": args.seed, "ablation": ablation}
        )
        sub = out / ablation.replace(":", "-")
        sub.mkdir(parents=True, exist_ok=True)
        meta, _ = _train_into(dataset, train_cfg, sub)

        net, _ = _load_net(sub / "model.ckpt")
        result = evaluate_model(
            net, dataset, meta["test_ids"], drop_channel=meta["dropped_channel"]
        )
        p = result.patch_report
        rows.append(
            f"{ablation},{p.pearson_r2!r},{p.r2_determination!r},"
            f"{p.mae!r},{result.mean_tile_abs_error!r}"
        )
        log.info("ablation %s: pearson_r2 %.4f", ablation, p.pearson_r2)
        paths.append(f"{sub.name}/model.ckpt")

    (out / "ablation_report.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    _write_run_manifest(
        out,
        "ablate",
        _digest_dict({"ablations": ablations, **cfg_dict}),
        {"dataset_manifest": manifest_digest(dataset.manifest)},
        ["ablation_report.csv"] + paths,
        t0,
    )
    print(f"wrote {out}/ablation_report.csv ({len(ablations)} variants)")
    return 0


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coverest",
        description="Building-coverage estimation pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_required: bool):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
        if seed_required:
            p.add_argument("--seed", type=int, required=True, help="master RNG seed")

    p = sub.add_parser("gen-data", help="generate a synthetic labeled dataset")
    p.add_argument("--config", help="scene config JSON (n_tiles, tile_size, ...)")
    common(p, seed_required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="train config JSON (learning_rate, epochs, ...)")
    p.add_argument("--setting", help="holistic | intra:<tag> | exclusive:<tag>")
    p.add_argument("--ablation", help="none | single-node | drop-channel:<i>")
    common(p, seed_required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument(
        "--split",
        choices=("train", "val", "test", "all"),
        default="test",
        help="tile set recorded in the checkpoint meta (default: test)",
    )
    common(p, seed_required=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="emit per-patch count predictions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tiles", help="comma-separated tile ids (default: all)")
    common(p, seed_required=False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser(
        "temporal", help="compare predicted coverage between two epochs of data"
    )
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data-t1", required=True, help="earlier dataset directory")
    p.add_argument("--data-t2", required=True, help="later dataset directory")
    common(p, seed_required=False)
    p.set_defaults(func=cmd_temporal)

    p = sub.add_parser("ablate", help="train and score a sweep of ablations")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="shared train config JSON")
    p.add_argument("--setting", help="holistic | intra:<tag> | exclusive:<tag>")
    p.add_argument(
        "--ablations",
        default=_DEFAULT_ABLATIONS,
        help=f"comma-separated list (default: {_DEFAULT_ABLATIONS})",
    )
    common(p, seed_required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "threads", None) is not None:
            _apply_threads(args.threads)
        return args.func(args)
    except json.JSONDecodeError as e:
        log.error(
            "config parse error at line %d column %d: %s", e.lineno, e.colno, e.msg
        )
        return 2
    except (ConfigError, DataFormatError, GeometryError) as e:
        log.error("%s", e)
        return 2
    except FileNotFoundError as e:
        log.error("%s", e)
        return 3
    except OSError as e:
        log.error("%s", e)
        return 3
    except (TrainingDiverged, FloatingPointError) as e:
        log.error("numerical failure: %s", e)
        return 4


if __name__ == "__main__":
    sys.exit(main())
