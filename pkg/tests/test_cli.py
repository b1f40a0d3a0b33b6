"""End-to-end tests for the command-line driver.

Everything goes through cli.main(argv) so exit codes, logging, and the
files each subcommand leaves behind are exercised exactly as a shell
user would see them. Training here uses a deliberately tiny model and
two epochs; these tests check plumbing, not accuracy.
"""

import json
import logging

import numpy as np
import pytest

from coverest import __version__, cli
from coverest.nnet.model import ModelConfig, QuantileNet
from coverest.train import save_checkpoint

SMALL_CFG = {
    "epochs": 2,
    "learning_rate": 0.005,
    "model": {"n_blocks": 1, "base_width": 4, "head_hidden": 6},
}


def write_cfg(path, payload) -> str:
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


def make_constant_ckpt(path, count: float, meta: dict | None = None) -> None:
    """Checkpoint whose network predicts `count` for every patch."""
    net = QuantileNet(ModelConfig(n_blocks=1, base_width=4, head_hidden=6), seed=1)
    net.fc2.weight.value[...] = 0.0
    net.fc2.bias.value[...] = (net.config.count_offset + count) / net.config.output_scale
    save_checkpoint(net, path, meta=meta or {})


# ----------------------------------------------------------------------
# parser-level behavior
# ----------------------------------------------------------------------


def test_version_flag_prints_version(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_no_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2


def test_train_requires_seed(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")])
    assert exc.value.code == 2


def test_gen_data_requires_seed(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen-data", "--out", str(tmp_path / "o")])
    assert exc.value.code == 2


# ----------------------------------------------------------------------
# gen-data
# ----------------------------------------------------------------------


def test_gen_data_writes_dataset_and_run_manifest(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "scene.json", {"n_tiles": 3, "tile_size": 100})
    out = tmp_path / "ds"
    rc = cli.main(["gen-data", "--config", cfg, "--out", str(out), "--seed", "11"])
    assert rc == 0

    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["tiles"]) == 3
    assert len(list((out / "tiles").glob("*.cras"))) == 3
    assert len(list((out / "masks").glob("*.cras"))) == 3

    run = json.loads((out / "run_manifest.json").read_text())
    assert run["command"] == "gen-data"
    assert run["tool_version"] == __version__
    assert set(run) >= {"config_digest", "input_digests", "output_paths", "wall_seconds"}
    assert "wrote 3 tiles" in capsys.readouterr().out


def test_gen_data_rejects_seed_inside_config(tmp_path, caplog):
    cfg = write_cfg(tmp_path / "scene.json", {"n_tiles": 2, "seed": 9})
    with caplog.at_level(logging.ERROR, logger="coverest"):
        rc = cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "1"])
    assert rc == 2
    assert "must not set 'seed'" in caplog.text


def test_gen_data_malformed_json_reports_line_and_column(tmp_path, caplog):
    bad = tmp_path / "scene.json"
    bad.write_text('{\n  "n_tiles": 2,,\n}\n', encoding="utf-8")
    with caplog.at_level(logging.ERROR, logger="coverest"):
        rc = cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o"), "--seed", "1"])
    assert rc == 2
    assert "line 2" in caplog.text and "column" in caplog.text


def test_gen_data_missing_config_file_is_io_error(tmp_path):
    rc = cli.main([
        "gen-data", "--config", str(tmp_path / "nope.json"),
        "--out", str(tmp_path / "o"), "--seed", "1",
    ])
    assert rc == 3


def test_out_path_colliding_with_file_is_io_error(tmp_path):
    cfg = write_cfg(tmp_path / "scene.json", {"n_tiles": 1, "tile_size": 50})
    blocked = tmp_path / "blocked"
    blocked.write_text("already a file", encoding="utf-8")
    rc = cli.main(["gen-data", "--config", cfg, "--out", str(blocked), "--seed", "1"])
    assert rc == 3


def test_threads_must_be_positive(tmp_path):
    cfg = write_cfg(tmp_path / "scene.json", {"n_tiles": 1, "tile_size": 50})
    rc = cli.main([
        "gen-data", "--config", cfg, "--out", str(tmp_path / "o"),
        "--seed", "1", "--threads", "0",
    ])
    assert rc == 2


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained_run(tiny_dataset_dir, tmp_path_factory):
    """One small CLI training run shared by the read-only tests below."""
    root = tmp_path_factory.mktemp("cli-train")
    cfg = write_cfg(root / "train.json", SMALL_CFG)
    out = root / "run"
    rc = cli.main([
        "train", "--data", str(tiny_dataset_dir), "--config", cfg,
        "--out", str(out), "--seed", "7",
    ])
    assert rc == 0
    return out, cfg


def test_train_writes_checkpoint_trace_and_reports(trained_run):
    out, _ = trained_run
    assert (out / "model.ckpt").exists()
    trace = (out / "trace.csv").read_text().strip().splitlines()
    assert trace[0] == "epoch,train_loss,val_loss"
    assert len(trace) == 1 + SMALL_CFG["epochs"]

    report = json.loads((out / "split_report.json").read_text())
    assert report["setting"] == "holistic"
    assert report["held_out_in_train"] == []

    run = json.loads((out / "run_manifest.json").read_text())
    assert run["command"] == "train"
    assert sorted(run["output_paths"]) == ["model.ckpt", "split_report.json", "trace.csv"]


def test_train_same_seed_is_byte_identical(trained_run, tiny_dataset_dir, tmp_path):
    out_a, cfg = trained_run
    out_b = tmp_path / "again"
    rc = cli.main([
        "train", "--data", str(tiny_dataset_dir), "--config", cfg,
        "--out", str(out_b), "--seed", "7",
    ])
    assert rc == 0
    for name in ("model.ckpt", "trace.csv"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


def test_train_unknown_config_key_is_config_error(tiny_dataset_dir, tmp_path, caplog):
    cfg = write_cfg(tmp_path / "train.json", {**SMALL_CFG, "learning_rte": 0.1})
    with caplog.at_level(logging.ERROR, logger="coverest"):
        rc = cli.main([
            "train", "--data", str(tiny_dataset_dir), "--config", cfg,
            "--out", str(tmp_path / "o"), "--seed", "1",
        ])
    assert rc == 2
    assert "unknown config keys" in caplog.text


def test_train_missing_dataset_is_io_error(tmp_path):
    rc = cli.main([
        "train", "--data", str(tmp_path / "nowhere"),
        "--out", str(tmp_path / "o"), "--seed", "1",
    ])
    assert rc == 3


def test_train_exclusive_setting_writes_leak_free_split_report(
    tiny_dataset_dir, tiny_dataset, tmp_path
):
    region = tiny_dataset.region_of(tiny_dataset.tile_ids[0])
    cfg = write_cfg(tmp_path / "train.json", {**SMALL_CFG, "epochs": 1})
    out = tmp_path / "excl"
    rc = cli.main([
        "train", "--data", str(tiny_dataset_dir), "--config", cfg,
        "--setting", f"exclusive:{region}", "--out", str(out), "--seed", "3",
    ])
    assert rc == 0
    report = json.loads((out / "split_report.json").read_text())
    assert report["setting"] == f"exclusive:{region}"
    assert list(report["test_regions"]) == [region]
    assert region not in report["train_regions"]
    assert report["held_out_in_train"] == []


# ----------------------------------------------------------------------
# eval / predict / temporal
# ----------------------------------------------------------------------


def test_eval_scores_the_recorded_test_split(trained_run, tiny_dataset_dir, tmp_path, capsys):
    out, _ = trained_run
    eval_out = tmp_path / "eval"
    rc = cli.main([
        "eval", "--ckpt", str(out / "model.ckpt"),
        "--data", str(tiny_dataset_dir), "--out", str(eval_out),
    ])
    assert rc == 0
    patch_rows = (eval_out / "patch_report.csv").read_text().strip().splitlines()
    # ten tiles round to one held-out test tile; four patches per 100x100 tile
    assert patch_rows[0] == "tile_id,offset_row,offset_col,label,prediction"
    assert len(patch_rows) == 1 + 4
    summary = json.loads((eval_out / "summary.json").read_text())
    assert set(summary) == {"patch", "n_tiles", "mean_tile_abs_error", "quantile_crossing_frac"}
    assert "eval test:" in capsys.readouterr().out


def test_eval_is_reproducible_byte_for_byte(trained_run, tiny_dataset_dir, tmp_path):
    out, _ = trained_run
    runs = []
    for name in ("e1", "e2"):
        eval_out = tmp_path / name
        rc = cli.main([
            "eval", "--ckpt", str(out / "model.ckpt"),
            "--data", str(tiny_dataset_dir), "--out", str(eval_out),
        ])
        assert rc == 0
        runs.append(eval_out)
    for fname in ("patch_report.csv", "tile_report.csv", "scatter.csv", "summary.json"):
        assert (runs[0] / fname).read_bytes() == (runs[1] / fname).read_bytes()


def test_eval_split_all_covers_every_patch(trained_run, tiny_dataset_dir, tiny_dataset, tmp_path):
    out, _ = trained_run
    eval_out = tmp_path / "eval-all"
    rc = cli.main([
        "eval", "--ckpt", str(out / "model.ckpt"),
        "--data", str(tiny_dataset_dir), "--out", str(eval_out), "--split", "all",
    ])
    assert rc == 0
    rows = (eval_out / "patch_report.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 4 * len(tiny_dataset.tile_ids)


def test_eval_without_recorded_split_needs_split_all(tiny_dataset_dir, tmp_path, caplog):
    ckpt = tmp_path / "bare.ckpt"
    make_constant_ckpt(ckpt, count=100.0)
    with caplog.at_level(logging.ERROR, logger="coverest"):
        rc = cli.main([
            "eval", "--ckpt", str(ckpt), "--data", str(tiny_dataset_dir),
            "--out", str(tmp_path / "o"),
        ])
    assert rc == 2
    assert "lacks test_ids" in caplog.text

    rc = cli.main([
        "eval", "--ckpt", str(ckpt), "--data", str(tiny_dataset_dir),
        "--out", str(tmp_path / "o2"), "--split", "all",
    ])
    assert rc == 0


def test_eval_rejects_split_tiles_missing_from_dataset(tiny_dataset_dir, tmp_path, caplog):
    ckpt = tmp_path / "stale.ckpt"
    make_constant_ckpt(ckpt, count=50.0, meta={"test_ids": ["t99999"]})
    with caplog.at_level(logging.ERROR, logger="coverest"):
        rc = cli.main([
            "eval", "--ckpt", str(ckpt), "--data", str(tiny_dataset_dir),
            "--out", str(tmp_path / "o"),
        ])
    assert rc == 2
    assert "missing from dataset" in caplog.text


def test_predict_emits_one_row_per_patch(trained_run, tiny_dataset_dir, tiny_dataset, tmp_path):
    out, _ = trained_run
    pred_out = tmp_path / "pred"
    rc = cli.main([
        "predict", "--ckpt", str(out / "model.ckpt"),
        "--data", str(tiny_dataset_dir), "--out", str(pred_out),
    ])
    assert rc == 0
    rows = (pred_out / "predictions.csv").read_text().strip().splitlines()
    assert rows[0] == "tile_id,offset_row,offset_col,prediction"
    assert len(rows) == 1 + 4 * len(tiny_dataset.tile_ids)
    # every prediction parses back as a finite float
    assert all(np.isfinite(float(r.rsplit(",", 1)[1])) for r in rows[1:])


def test_predict_honors_tile_filter(trained_run, tiny_dataset_dir, tmp_path):
    out, _ = trained_run
    pred_out = tmp_path / "pred-one"
    rc = cli.main([
        "predict", "--ckpt", str(out / "model.ckpt"),
        "--data", str(tiny_dataset_dir), "--out", str(pred_out),
        "--tiles", "t00000",
    ])
    assert rc == 0
    rows = (pred_out / "predictions.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 4
    assert all(r.startswith("t00000,") for r in rows[1:])


def test_temporal_identical_epochs_report_zero_growth(tiny_dataset_dir, tiny_dataset, tmp_path):
    ckpt = tmp_path / "const.ckpt"
    make_constant_ckpt(ckpt, count=100.0)
    out = tmp_path / "tmp-growth"
    rc = cli.main([
        "temporal", "--ckpt", str(ckpt),
        "--data-t1", str(tiny_dataset_dir), "--data-t2", str(tiny_dataset_dir),
        "--out", str(out),
    ])
    assert rc == 0
    rows = (out / "growth.csv").read_text().strip().splitlines()
    assert rows[0] == "region,coverage_t1_pct,coverage_t2_pct,growth_pct,defined"
    regions = {tiny_dataset.region_of(t) for t in tiny_dataset.tile_ids}
    assert len(rows) == 1 + len(regions)
    for row in rows[1:]:
        _, c1, c2, growth, defined = row.split(",")
        assert c1 == c2
        assert float(growth) == 0.0
        assert defined == "true"


def test_temporal_zero_baseline_growth_is_undefined(tiny_dataset_dir, tmp_path, caplog):
    # an untrained head predicts zero everywhere, so t1 coverage is zero
    ckpt = tmp_path / "zero.ckpt"
    make_constant_ckpt(ckpt, count=0.0)
    out = tmp_path / "tmp-undef"
    with caplog.at_level(logging.WARNING, logger="coverest"):
        rc = cli.main([
            "temporal", "--ckpt", str(ckpt),
            "--data-t1", str(tiny_dataset_dir), "--data-t2", str(tiny_dataset_dir),
            "--out", str(out),
        ])
    assert rc == 0
    assert "growth undefined" in caplog.text
    rows = (out / "growth.csv").read_text().strip().splitlines()
    for row in rows[1:]:
        assert row.endswith(",,false")


# ----------------------------------------------------------------------
# ablate
# ----------------------------------------------------------------------


def test_ablate_trains_and_scores_each_variant(tiny_dataset_dir, tmp_path):
    cfg = write_cfg(tmp_path / "train.json", {**SMALL_CFG, "epochs": 1})
    out = tmp_path / "sweep"
    rc = cli.main([
        "ablate", "--data", str(tiny_dataset_dir), "--config", cfg,
        "--out", str(out), "--seed", "5",
        "--ablations", "none,single-node,drop-channel:0",
    ])
    assert rc == 0
    rows = (out / "ablation_report.csv").read_text().strip().splitlines()
    assert rows[0] == "ablation,pearson_r2,r2_determination,mae,mean_tile_abs_error"
    assert [r.split(",")[0] for r in rows[1:]] == ["none", "single-node", "drop-channel:0"]
    for sub in ("none", "single-node", "drop-channel-0"):
        assert (out / sub / "model.ckpt").exists()
        assert (out / sub / "split_report.json").exists()


def test_ablate_rejects_empty_ablation_list(tiny_dataset_dir, tmp_path, caplog):
    with caplog.at_level(logging.ERROR, logger="coverest"):
        rc = cli.main([
            "ablate", "--data", str(tiny_dataset_dir),
            "--out", str(tmp_path / "o"), "--seed", "5", "--ablations", " , ",
        ])
    assert rc == 2
    assert "at least one" in caplog.text
