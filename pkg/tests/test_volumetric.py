import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fewshot_seg import network as N
from fewshot_seg.layers import ShapeError
from fewshot_seg.volumetric import (
    SliceRange, UndefinedDistance, avg_surface_distance, build_pairing, compute_groups,
    dice_score, evaluate_volume, segment_volume, surface_voxels,
)
from oracles import enumerate_pairs


def test_groups_examples():
    g = compute_groups(SliceRange(0, 11), 3)
    assert [gr.members for gr in g] == [(0, 1, 2, 3), (4, 5, 6, 7), (8, 9, 10, 11)]
    assert [gr.center for gr in g] == [1, 5, 9]
    g = compute_groups(SliceRange(0, 8), 1)
    assert g[0].members == tuple(range(9)) and g[0].center == 4
    assert [len(gr.members) for gr in compute_groups(SliceRange(0, 9), 3)] == [4, 3, 3]


def test_groups_errors():
    with pytest.raises(ValueError, match="exceeds"):
        compute_groups(SliceRange(0, 3), 5)
    with pytest.raises(ValueError):
        compute_groups(SliceRange(0, 3), 0)
    with pytest.raises(ValueError):
        SliceRange(5, 2)
    with pytest.raises(ValueError):
        SliceRange.parse("3-4")
    assert SliceRange.parse("3:7") == SliceRange(3, 7)


def test_pairing_example():
    plan = build_pairing(SliceRange(0, 11), SliceRange(0, 8), 3)
    assert plan.by_support() == {1: [0, 1, 2], 5: [3, 4, 5], 9: [6, 7, 8]}


def test_pairing_one_shot_and_full_budget():
    plan = build_pairing(SliceRange(3, 14), SliceRange(0, 20), 1)
    assert plan.support_slices() == [8] and len(plan.pairs) == 21
    plan = build_pairing(SliceRange(2, 9), SliceRange(2, 9), 8)
    assert plan.pairs == [(i, i) for i in range(2, 10)]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 5), st.integers(1, 32), st.integers(0, 5), st.integers(1, 32), st.integers(1, 8))
def test_pairing_matches_enumeration_property(s0, sl, q0, ql, k):
    if k > min(sl, ql):
        with pytest.raises(ValueError):
            build_pairing(SliceRange(s0, s0 + sl - 1), SliceRange(q0, q0 + ql - 1), k)
        return
    plan = build_pairing(SliceRange(s0, s0 + sl - 1), SliceRange(q0, q0 + ql - 1), k)
    assert plan.pairs == enumerate_pairs(s0, s0 + sl - 1, q0, q0 + ql - 1, k)


def test_segment_volume_contract():
    cfg = N.FewShotConfig(cond_channels=2, seg_channels=4, depth=2)
    net = N.NetworkParams.init(cfg, seed=0)
    rng = np.random.default_rng(0)
    sv = rng.random((10, 16, 16)).astype(np.float32)
    sl = np.zeros((10, 16, 16), np.uint8)
    sl[2:8, 4:10, 4:10] = 3
    qv = rng.random((12, 16, 16)).astype(np.float32)
    qr = SliceRange(3, 9)
    out = segment_volume(sv, sl, qv, SliceRange(2, 7), qr, 2, net, class_id=3)
    assert out.shape == qv.shape
    assert not out[:3].any() and not out[10:].any()
    # stitching adds nothing: each slice equals a standalone call with its paired support slice
    for s, q in build_pairing(SliceRange(2, 7), qr, 2).pairs:
        task = N.conditioner_forward(sv[s], (sl[s] == 3).astype(np.uint8), net)
        np.testing.assert_array_equal(out[q], N.segmenter_forward(qv[q], task, net)[1][0, 0])


def test_segment_volume_errors():
    net = N.NetworkParams.init(N.FewShotConfig(cond_channels=2, seg_channels=2, depth=1), seed=0)
    v = np.zeros((4, 8, 8), np.float32)
    with pytest.raises(ValueError, match="depth"):
        segment_volume(v, np.zeros((4, 8, 8), np.uint8), v, SliceRange(0, 5), SliceRange(0, 3), 1, net)
    with pytest.raises(ValueError, match="annotation"):
        segment_volume(v, np.zeros((4, 8, 8), np.uint8), v, SliceRange(0, 3), SliceRange(0, 3), 1, net,
                       annotated_slices=[0])
    with pytest.raises(ShapeError):
        segment_volume(v, np.zeros((3, 8, 8), np.uint8), v, SliceRange(0, 2), SliceRange(0, 3), 1, net)


# -- metrics --------------------------------------------------------------


def test_dice_score_cases():
    g = np.zeros((10, 20), bool)
    g[:, :10] = True
    assert dice_score(g, g) == 1.0
    assert dice_score(g, ~g) == 0.0
    p = np.zeros_like(g)
    p[:5, :10] = True
    p[5:, 10:] = True
    assert dice_score(p, g) == 0.5
    assert dice_score(np.zeros(3), np.zeros(3)) == 1.0
    with pytest.raises(ShapeError):
        dice_score(np.zeros(3), np.zeros(4))


def test_asd_cases():
    a = np.zeros((5, 5, 5), bool)
    a[2, 2, 2] = True
    b = np.zeros_like(a)
    b[2, 2, 3] = True
    assert avg_surface_distance(a, a, (2, 2, 2)) == 0.0
    assert avg_surface_distance(a, b, (2, 2, 2)) == pytest.approx(2.0)
    with pytest.raises(UndefinedDistance):
        avg_surface_distance(a, np.zeros_like(a), (2, 2, 2))
    m = evaluate_volume(a, np.zeros_like(a), (2, 2, 2))
    assert m.dice == 0.0 and np.isnan(m.asd_mm)


def test_asd_anisotropic_spacing():
    a = np.zeros((6, 6, 6), bool)
    a[1, 3, 3] = True
    b = np.zeros_like(a)
    b[4, 3, 3] = True
    assert avg_surface_distance(a, b, (2.5, 1, 1)) == pytest.approx(7.5)


def test_surface_of_solid_cube():
    m = np.zeros((7, 7, 7), bool)
    m[1:6, 1:6, 1:6] = True
    assert surface_voxels(m).sum() == 5**3 - 3**3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_asd_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((6, 7, 8)) > 0.7
    b = rng.random((6, 7, 8)) > 0.6
    a[0, 0, 0] = b[5, 6, 7] = True
    assert avg_surface_distance(a, b, (2, 1, 1.5)) == pytest.approx(avg_surface_distance(b, a, (2, 1, 1.5)))
