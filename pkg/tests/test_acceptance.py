"""Acceptance criteria. Each test prints one PASS/FAIL line.

The learning-signal criterion trains 36 networks (3 configurations x 4
folds x 3 seeds). Runs are cached in scripts/results/cache keyed by their
parameters and the library source, so a run produced by
``scripts/run_experiments.py learning-signal`` is reused only if the code
that produced it is unchanged; otherwise it is recomputed here.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from fewshot_seg import cli, experiments
from fewshot_seg.data import SynthSpec, generate_dataset, load_volume, save_volume
from fewshot_seg.gradcheck import REGISTRY, TOLERANCE, gradcheck_report
from fewshot_seg.layers import ConvParams, conv2d_forward, maxpool2x2
from fewshot_seg.network import NetworkParams, SseParams, decoder_input_channels, preset, sse_apply
from fewshot_seg.training import dice_loss
from fewshot_seg.volumetric import SliceRange, avg_surface_distance, build_pairing, dice_score
from oracles import brute_maxpool, enumerate_pairs, naive_conv

ROOT = Path(__file__).resolve().parents[1]
CACHE = ROOT / "scripts" / "results" / "cache"
TINY = Path(__file__).with_name("tiny.ini")


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return ok
    return emit


def test_gradient_correctness(report):
    t0 = time.perf_counter()
    results = [(op, *gradcheck_report(op)) for op in REGISTRY]
    elapsed = time.perf_counter() - t0
    worst_op, worst, _, _ = max(results, key=lambda r: r[1])
    failing = [op for op, err, _, _ in results if err > TOLERANCE]
    ok = not failing and elapsed <= 120
    assert report("gradient correctness", ok,
                  f"{len(results)} primitives, worst {worst:.2e} ({worst_op}), tol {TOLERANCE:g}, "
                  f"{elapsed:.0f}s (limit 120s){'; failing ' + ', '.join(failing) if failing else ''}")


def test_oracle_equivalence(report):
    rng = np.random.default_rng(2024)
    conv_err = 0.0
    for _ in range(50):
        n, c, oc = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(1, 10, size=2)
        k = int(rng.choice([1, 3, 5]))
        x = rng.standard_normal((n, c, h, w))
        wt, b = rng.standard_normal((oc, c, k, k)), rng.standard_normal(oc)
        conv_err = max(conv_err, float(np.abs(conv2d_forward(x, ConvParams(wt, b)) - naive_conv(x, wt, b)).max()))
    pool_ok = True
    for _ in range(50):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), 2 * int(rng.integers(1, 6)), 2 * int(rng.integers(1, 6)))
        x = rng.integers(0, 4, shape).astype(float) if rng.random() < 0.5 else rng.standard_normal(shape)
        y, idx = maxpool2x2(x)
        by, bidx = brute_maxpool(x)
        pool_ok &= np.array_equal(y, by) and np.array_equal(idx, bidx)
    mismatches = combos = 0
    for sl in range(1, 33):
        for ql in range(1, 33):
            for k in range(1, min(8, sl, ql) + 1):
                combos += 1
                plan = build_pairing(SliceRange(0, sl - 1), SliceRange(0, ql - 1), k)
                mismatches += plan.pairs != enumerate_pairs(0, sl - 1, 0, ql - 1, k)
    ok = conv_err <= 1e-6 and pool_ok and mismatches == 0
    assert report("oracle equivalence", ok,
                  f"conv max |diff| {conv_err:.1e} over 50 shapes (tol 1e-6); maxpool brute force "
                  f"{'match' if pool_ok else 'MISMATCH'}; pairing {combos - mismatches}/{combos} plans match")


def test_sse_unit_behaviour(report):
    rng = np.random.default_rng(7)
    u_con, u_seg = rng.standard_normal((2, 16, 8, 8)), rng.standard_normal((2, 64, 8, 8))
    half = sse_apply(u_con, u_seg, SseParams(np.zeros(16), np.zeros(1)))
    full = sse_apply(u_con, u_seg, SseParams(np.zeros(16), np.array([50.0])))
    exact_half = bool(np.array_equal(half, 0.5 * u_seg))
    sat_err = float(np.abs(full - u_seg).max())
    ok = exact_half and sat_err <= 1e-6
    assert report("sSE gating", ok, f"zero params -> 0.5*u exactly: {exact_half}; bias +50 max |diff| {sat_err:.1e}")


def test_dice_loss_values(report):
    m = np.array([1.0, 1, 0, 0])
    got = (dice_loss(m, m), dice_loss(m, 1 - m), dice_loss(m, np.array([1.0, 0, 1, 0])))
    ok = abs(got[0]) <= 1e-4 and abs(got[1] - 1) <= 1e-4 and abs(got[2] - 0.5) <= 1e-4
    assert report("dice loss values", ok, "perfect/disjoint/half = " + ", ".join(f"{v:.6f}" for v in got))


def test_volumetric_strategy(report):
    plan = build_pairing(SliceRange(0, 11), SliceRange(0, 8), 3).by_support()
    plan_ok = plan == {1: [0, 1, 2], 5: [3, 4, 5], 9: [6, 7, 8]}
    g = np.zeros((10, 20), bool)
    g[:, :10] = True
    half = np.zeros_like(g)
    half[:5, :10] = half[5:, 10:] = True
    dice = (dice_score(g, g), dice_score(g, ~g), dice_score(half, g))
    a = np.zeros((5, 5, 5), bool)
    a[2, 2, 2] = True
    b = np.roll(a, 1, axis=2)
    asd = (avg_surface_distance(a, a, (2, 2, 2)), avg_surface_distance(a, b, (2, 2, 2)))
    ok = plan_ok and dice == (1.0, 0.0, 0.5) and asd[0] == 0.0 and abs(asd[1] - 2.0) < 1e-12
    assert report("volumetric strategy", ok,
                  f"plan {plan}; dice {dice}; asd {asd[0]:.1f} mm / {asd[1]:.1f} mm")


def test_learning_signal(report):
    s = experiments.learning_signal(CACHE)["presets"]
    bl7, none, bl8 = s["bl7"], s["none"], s["bl8"]
    ratio = bl7["final_epoch_loss"] / bl7["first_epoch_loss"]
    d = {k: v["dice"]["infer"] for k, v in s.items()}
    ok_a = ratio < 0.5
    ok_b = d["bl7"] > d["none"] and d["bl7"] > d["bl8"]
    runs_halved = sum(r < 0.5 for r in bl7["loss_ratio_per_run"])
    report("learning signal (a) loss halves", ok_a,
           f"bl7 epoch loss {bl7['first_epoch_loss']:.3f} -> {bl7['final_epoch_loss']:.3f} (ratio {ratio:.3f}, "
           f"{runs_halved}/{len(bl7['loss_ratio_per_run'])} runs below 0.5)")
    report("learning signal (b) ordering", ok_b,
           f"one-shot volume dice bl7 {d['bl7']:.3f} vs none {d['none']:.3f} vs bl8 {d['bl8']:.3f} "
           f"(running-stat BN; batch-stat BN: " +
           ", ".join(f"{k} {v['dice']['batch']:.3f}" for k, v in s.items()) + ")")
    assert ok_a and ok_b


def test_determinism(report, tmp_path):
    assert cli.main(["synth", "--config", str(TINY), "--out", str(tmp_path / "data")]) == 0
    ckpts = []
    for run in ("a", "b"):
        assert cli.main(["train", "--config", str(TINY), "--manifest", str(tmp_path / "data" / "manifest.txt"),
                         "--out", str(tmp_path / run), "--seed", "11", "--epochs", "2"]) == 0
        ckpts.append((tmp_path / run / "model.ckpt").read_bytes())
    v = generate_dataset(SynthSpec(num_volumes=1, seed=3))[0]
    save_volume(v, tmp_path / "v.fsv")
    w = load_volume(tmp_path / "v.fsv")
    rt = w.intensities.tobytes() == v.intensities.tobytes() and w.labels.tobytes() == v.labels.tobytes()
    ok = ckpts[0] == ckpts[1] and rt
    assert report("determinism", ok,
                  f"checkpoints byte-identical: {ckpts[0] == ckpts[1]} ({len(ckpts[0])} bytes); "
                  f"volume round-trip bit-exact: {rt}")


def test_skip_ablation_presets(report):
    expect = {"skip-none": (16, 64), "skip-cond": (32, 64), "skip-seg": (16, 128), "skip-both": (32, 128)}
    got = {}
    for name in expect:
        net = NetworkParams.init(preset(name), seed=0)
        cond, seg = decoder_input_channels(net, "cond"), decoder_input_channels(net, "seg")
        got[name] = (cond[0], seg[0]) if len(set(cond)) == len(set(seg)) == 1 else (cond, seg)
    ok = got == expect
    assert report("skip-connection presets", ok,
                  "decoder input channels (cond, seg): " + ", ".join(f"{k} {v}" for k, v in got.items()))
