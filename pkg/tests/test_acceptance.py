"""Release gates for the whole pipeline, one test per numbered criterion.

Each test prints a single visible PASS/FAIL line (bypassing capture)
with the measured numbers, then asserts. The expensive artifacts - the
synthetic corpus and the budgeted training runs - are session fixtures
shared across criteria, so the suite trains the full model once and
each ablation once under the identical budget.

Tolerances are part of the gate definitions and must not be loosened;
a red gate is a finding, not a nuisance.
"""

import json
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest

from coverest import cli
from coverest.evaluate import (
    evaluate_model,
    patch_metrics,
    tile_abs_error,
    tile_coverage,
)
from coverest.nnet.gradcheck import check_network_gradients, jitter_parameters
from coverest.nnet.model import ModelConfig, QuantileNet
from coverest.qloss import QuantileSpec, batch_loss, pinball, quantile_loss
from coverest.raster import (
    PATCH_PIXELS,
    Raster,
    crop_into_patches,
    downsample_and_binarize,
    patch_windows,
)
from coverest.synthdata import SceneConfig, SyntheticDataset, generate_dataset
from coverest.train import TrainConfig, audit_split, train_model

ACCEPT_SEED = 11
N_TILES = 125  # x16 patches per 200x200 tile = 2000 patches
EPOCH_BUDGET = 25  # shared by the full model and every ablation
HELD_OUT_REGION = "borsk"


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


@pytest.fixture
def announce(capsys):
    def _emit(line: str) -> None:
        with capsys.disabled():
            print(line, flush=True)

    return _emit


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept-corpus")
    t0 = time.perf_counter()
    generate_dataset(SceneConfig(seed=ACCEPT_SEED, n_tiles=N_TILES), out)
    gen_seconds = time.perf_counter() - t0
    ds = SyntheticDataset(out)
    return SimpleNamespace(dataset=ds, dir=out, gen_seconds=gen_seconds)


def _train_and_score(dataset, **cfg_kw):
    cfg = TrainConfig(seed=ACCEPT_SEED, epochs=EPOCH_BUDGET, **cfg_kw)
    t0 = time.perf_counter()
    result = train_model(dataset, cfg)
    wall = time.perf_counter() - t0
    ev = evaluate_model(
        result.net, dataset, result.splits.test_ids, drop_channel=result.dropped_channel
    )
    return SimpleNamespace(cfg=cfg, result=result, eval=ev, wall=wall)


@pytest.fixture(scope="session")
def full_run(corpus):
    return _train_and_score(corpus.dataset)


@pytest.fixture(scope="session")
def ablation_runs(corpus):
    return {
        abl: _train_and_score(corpus.dataset, ablation=abl)
        for abl in ("single-node", "drop-channel:0", "drop-channel:4")
    }


# ----------------------------------------------------------------------
# criterion 1: analytic gradients of the composed network
# ----------------------------------------------------------------------


def test_criterion_01_composed_network_gradients(announce):
    t0 = time.perf_counter()
    net = QuantileNet(
        ModelConfig(n_blocks=2, base_width=6, head_hidden=8, dropout_rate=0.2),
        seed=101,
        dtype=np.float64,
    )
    rng = np.random.default_rng(102)
    jitter_parameters(net, rng)  # the factory head is zeroed; flow signal end to end
    x = rng.normal(0.0, 1.0, size=(2, 5, 50, 50))
    labels = rng.uniform(0.0, 2500.0, size=2)
    res = check_network_gradients(net, x, labels, n_coords=20, rng=rng, h=1e-5)
    dt = time.perf_counter() - t0
    ok = res.max_rel_err < 1e-4 and res.n_checked == 20 and dt < 60.0
    announce(
        f"[criterion 01] {'PASS' if ok else 'FAIL'} central-difference check: "
        f"max_rel_err={res.max_rel_err:.3e} (<1e-4), n_checked={res.n_checked}, "
        f"worst={res.worst_param}, {dt:.1f}s (<60s)"
    )
    assert res.n_checked == 20
    assert res.max_rel_err < 1e-4
    assert dt < 60.0


# ----------------------------------------------------------------------
# criterion 2: pinball loss identities
# ----------------------------------------------------------------------


def test_criterion_02_pinball_identities(announce):
    # worked examples, exact
    assert pinball(0.5, 10.0, 14.0) == pytest.approx(2.0, abs=1e-15)
    assert pinball(0.9, 10.0, 14.0) == pytest.approx(3.6, abs=1e-15)
    assert pinball(0.9, 10.0, 6.0) == pytest.approx(0.4, abs=1e-15)
    spec3 = QuantileSpec((0.1, 0.5, 0.9))
    lv = quantile_loss(0.0, np.array([10.0, 10.0, 10.0]), spec3)
    assert lv.value == pytest.approx(5.0, abs=1e-12)
    assert sorted(lv.per_node) == pytest.approx([1.0, 5.0, 9.0], abs=1e-12)

    rng = np.random.default_rng(202)
    ys = rng.uniform(-50.0, 50.0, size=500)
    yhats = rng.uniform(-50.0, 50.0, size=500)
    qs = rng.uniform(0.01, 0.99, size=500)
    # nonnegative everywhere, zero iff prediction equals label
    for q, y, yh in zip(qs, ys, yhats):
        v = pinball(float(q), float(y), float(yh))
        assert v >= 0.0
        assert (v == 0.0) == (y == yh)
        assert pinball(float(q), float(y), float(y)) == 0.0
    # over-prediction grows with q, under-prediction shrinks with q
    for q_lo, q_hi in ((0.1, 0.3), (0.4, 0.8), (0.55, 0.95)):
        assert pinball(q_hi, 10.0, 15.0) > pinball(q_lo, 10.0, 15.0)
        assert pinball(q_hi, 10.0, 5.0) < pinball(q_lo, 10.0, 5.0)

    # single median node reduces to half the L1 loss
    n = 10_000
    labels = rng.uniform(-100.0, 100.0, size=n)
    preds = rng.uniform(-100.0, 100.0, size=n)
    loss, _ = batch_loss(labels, preds[:, None], QuantileSpec((0.5,)))
    half_l1 = 0.5 * float(np.mean(np.abs(preds - labels)))
    err = rel_err(loss, half_l1)
    ok = err < 1e-12
    announce(
        f"[criterion 02] {'PASS' if ok else 'FAIL'} pinball identities: "
        f"worked values exact, K=1/q=0.5 vs 0.5*L1 rel_err={err:.2e} (<1e-12, n={n})"
    )
    assert err < 1e-12


# ----------------------------------------------------------------------
# criterion 3: trained constant recovers the empirical quantile
# ----------------------------------------------------------------------


def test_criterion_03_quantile_recovery_on_lognormal(announce):
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    samples = rng.lognormal(0.0, 1.0, size=10_000)
    lines = []
    worst = 0.0
    for q in (0.1, 0.5, 0.9):
        spec = QuantileSpec((q,))
        theta = float(samples.mean())
        # subgradient descent, geometric step decay, tail averaging
        steps, lr0, lr1 = 4000, 0.5, 0.004
        tail = []
        for t in range(steps):
            lr = lr0 * (lr1 / lr0) ** (t / (steps - 1))
            _, grad = batch_loss(samples, np.full((samples.size, 1), theta), spec)
            theta -= lr * float(grad.sum())  # grad of the mean loss w.r.t. theta
            if t >= steps - 400:
                tail.append(theta)
        fitted = float(np.mean(tail))
        target = float(np.quantile(samples, q))
        off = abs(fitted - target) / target
        worst = max(worst, off)
        lines.append(f"q{int(q * 100)}: fit={fitted:.4f} emp={target:.4f} off={off:.2%}")
    dt = time.perf_counter() - t0
    ok = worst <= 0.02 and dt < 120.0
    announce(
        f"[criterion 03] {'PASS' if ok else 'FAIL'} lognormal quantile recovery: "
        + "; ".join(lines)
        + f"; worst={worst:.2%} (<=2%), {dt:.1f}s (<120s)"
    )
    assert worst <= 0.02
    assert dt < 120.0


# ----------------------------------------------------------------------
# criterion 4: patch geometry and mask downsampling
# ----------------------------------------------------------------------


def test_criterion_04_geometry_and_downsampling(corpus, announce):
    # a 200x200 tile yields exactly 16 patches, row-major
    windows = patch_windows(200, 200)
    assert len(windows) == 16
    assert windows == [(r, c) for r in range(0, 200, 50) for c in range(0, 200, 50)]

    # patch labels partition the whole-mask count on real synthetic tiles
    ds = corpus.dataset
    n_checked = 0
    for tid in ds.tile_ids[:100]:
        tile = ds.load_tile(tid)
        patches = crop_into_patches(tile)
        assert sum(p.label for p in patches) == tile.mask.count()
        n_checked += 1
    assert n_checked == 100

    # block downsampling agrees with a per-block scan oracle
    rng = np.random.default_rng(404)
    for _ in range(100):
        r = int(rng.integers(1, 7))
        h = r * int(rng.integers(1, 13))
        w = r * int(rng.integers(1, 13))
        vals = rng.uniform(0.0, 1.0, size=(h, w, 1)).astype(np.float32)
        vals[rng.random((h, w)) < 0.6] = 0.0
        fine = Raster(height=h, width=w, channels=1, gsd=0.5, data=vals)
        coarse = downsample_and_binarize(fine, target_gsd=0.5 * r)
        oracle = np.zeros((h // r, w // r), dtype=np.uint8)
        for i in range(h // r):
            for j in range(w // r):
                block = vals[i * r : (i + 1) * r, j * r : (j + 1) * r, 0]
                oracle[i, j] = 1 if (block > 0).any() else 0
        np.testing.assert_array_equal(coarse.values, oracle)

    announce(
        "[criterion 04] PASS geometry: 16 patches per tile, label partition on "
        "100 synthetic tiles, downsampling vs block-scan oracle on 100 rasters"
    )


# ----------------------------------------------------------------------
# criterion 5: metrics against brute-force references
# ----------------------------------------------------------------------


def test_criterion_05_metrics_match_brute_force(announce):
    rng = np.random.default_rng(505)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        pred = rng.uniform(0.0, 2500.0, size=n)
        lab = rng.uniform(0.0, 2500.0, size=n)
        m = patch_metrics(pred, lab)

        mae_bf = math.fsum(abs(p - l) for p, l in zip(pred, lab)) / n
        pm, lm = math.fsum(pred) / n, math.fsum(lab) / n
        sxy = math.fsum((p - pm) * (l - lm) for p, l in zip(pred, lab))
        sxx = math.fsum((p - pm) ** 2 for p in pred)
        syy = math.fsum((l - lm) ** 2 for l in lab)
        r2_bf = (sxy / math.sqrt(sxx * syy)) ** 2
        ss_res = math.fsum((p - l) ** 2 for p, l in zip(pred, lab))
        det_bf = 1.0 - ss_res / syy

        counts = rng.uniform(0.0, 2500.0, size=16)
        cov_bf = math.fsum(counts) / (200 * 200) * 100.0
        cov = tile_coverage(counts, 200, 200)
        other = rng.uniform(0.0, 100.0)
        err_bf = abs(cov_bf - other)

        worst = max(
            worst,
            rel_err(m.mae, mae_bf),
            rel_err(m.pearson_r2, r2_bf),
            rel_err(m.r2_determination, det_bf),
            rel_err(cov, cov_bf),
            rel_err(tile_abs_error(cov, other), err_bf),
        )
    ok = worst < 1e-12
    announce(
        f"[criterion 05] {'PASS' if ok else 'FAIL'} metric implementations vs "
        f"brute force on 1000 random inputs: worst rel_err={worst:.2e} (<1e-12)"
    )
    assert worst < 1e-12


# ----------------------------------------------------------------------
# criterion 6: holistic end-to-end accuracy under budget
# ----------------------------------------------------------------------


def test_criterion_06_holistic_end_to_end(corpus, full_run, announce):
    n_patches = 16 * len(corpus.dataset.tile_ids)
    r2 = full_run.eval.patch_report.pearson_r2
    tile_err = full_run.eval.mean_tile_abs_error
    wall = corpus.gen_seconds + full_run.wall
    ok = r2 >= 0.90 and tile_err <= 2.0 and wall < 900.0 and EPOCH_BUDGET <= 60
    announce(
        f"[criterion 06] {'PASS' if ok else 'FAIL'} holistic run: "
        f"{n_patches} patches, {EPOCH_BUDGET} epochs (<=60), held-out "
        f"pearson_r2={r2:.4f} (>=0.90), mean_tile_abs_error={tile_err:.3f}pp "
        f"(<=2.0), gen+train={wall:.0f}s (<900s)"
    )
    assert EPOCH_BUDGET <= 60
    assert r2 >= 0.90
    assert tile_err <= 2.0
    assert wall < 900.0


# ----------------------------------------------------------------------
# criterion 7: every ablation clearly below the full model
# ----------------------------------------------------------------------


def test_criterion_07_ablations_trail_full_model(full_run, ablation_runs, announce):
    full_r2 = full_run.eval.patch_report.pearson_r2
    gaps = {
        abl: full_r2 - run.eval.patch_report.pearson_r2
        for abl, run in ablation_runs.items()
    }
    ok = all(gap >= 0.02 for gap in gaps.values())
    detail = ", ".join(
        f"{abl}: r2={run.eval.patch_report.pearson_r2:.4f} gap={gaps[abl]:.4f}"
        for abl, run in ablation_runs.items()
    )
    announce(
        f"[criterion 07] {'PASS' if ok else 'FAIL'} same-budget ablations vs "
        f"full r2={full_r2:.4f}: {detail} (each gap >= 0.02)"
    )
    for abl, gap in gaps.items():
        assert gap >= 0.02, f"{abl} within 0.02 of the full model"


# ----------------------------------------------------------------------
# criterion 8: region exclusion generalizes and provably leaks nothing
# ----------------------------------------------------------------------


def test_criterion_08_exclusive_region_holdout(corpus, announce):
    run = _train_and_score(corpus.dataset, setting=f"exclusive:{HELD_OUT_REGION}")
    ds = corpus.dataset
    report = audit_split(ds.manifest, run.result.splits, run.cfg.setting)
    # independent leak check straight from the manifest
    held = {e["tile_id"] for e in ds.manifest["tiles"] if e["region_tag"] == HELD_OUT_REGION}
    train_ids = set(run.result.splits.train_ids)
    test_ids = set(run.result.splits.test_ids)
    leak = sorted(held & train_ids)
    r2 = run.eval.patch_report.pearson_r2
    ok = r2 >= 0.80 and not leak and report["held_out_in_train"] == [] and test_ids == held
    announce(
        f"[criterion 08] {'PASS' if ok else 'FAIL'} exclusive:{HELD_OUT_REGION}: "
        f"held-out pearson_r2={r2:.4f} (>=0.80), {len(held)} held-out tiles, "
        f"leaked-into-train={leak}, auditor={report['held_out_in_train']}"
    )
    assert report["held_out_in_train"] == []
    assert leak == []
    assert test_ids == held
    assert r2 >= 0.80


# ----------------------------------------------------------------------
# criterion 9: bitwise reproducible training runs
# ----------------------------------------------------------------------


def test_criterion_09_training_is_bit_reproducible(corpus, tmp_path, announce):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"epochs": 2}), encoding="utf-8")
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = cli.main([
            "train", "--data", str(corpus.dir), "--config", str(cfg),
            "--out", str(out), "--seed", str(ACCEPT_SEED),
        ])
        assert rc == 0
        outs.append(out)
    same_ckpt = (outs[0] / "model.ckpt").read_bytes() == (outs[1] / "model.ckpt").read_bytes()
    same_trace = (outs[0] / "trace.csv").read_bytes() == (outs[1] / "trace.csv").read_bytes()
    ok = same_ckpt and same_trace
    announce(
        f"[criterion 09] {'PASS' if ok else 'FAIL'} two cmd_train runs, same seed: "
        f"checkpoint bytes equal={same_ckpt}, trace bytes equal={same_trace}"
    )
    assert same_ckpt
    assert same_trace


# ----------------------------------------------------------------------
# criterion 10: the default corpus is dominated by sparse patches
# ----------------------------------------------------------------------


def test_criterion_10_low_coverage_dominates(corpus, announce):
    labels = []
    for tid in corpus.dataset.tile_ids:
        _, y, _ = corpus.dataset.load_patches([tid])
        labels.append(y)
    y = np.concatenate(labels)
    frac = float(np.mean(y < 0.20 * PATCH_PIXELS))
    ok = frac > 0.75
    announce(
        f"[criterion 10] {'PASS' if ok else 'FAIL'} default corpus: "
        f"{frac:.1%} of {y.size} patches below 20% building pixels (>75%)"
    )
    assert y.size == N_TILES * 16
    assert frac > 0.75
