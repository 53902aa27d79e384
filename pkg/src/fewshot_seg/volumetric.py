"""Volumetric inference with a k-slice annotation budget, plus Dice and ASD."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .layers import ShapeError
from .network import NetworkParams, conditioner_forward, segmenter_forward


@dataclass(frozen=True)
class SliceRange:
    start: int
    end: int  # inclusive

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValueError(f"invalid slice range [{self.start}, {self.end}]")

    def __len__(self):
        return self.end - self.start + 1

    def check_within(self, depth: int) -> None:
        if self.end >= depth:
            raise ValueError(f"slice range [{self.start}, {self.end}] exceeds volume depth {depth}")

    @classmethod
    def parse(cls, text: str) -> "SliceRange":
        start, sep, end = text.partition(":")
        if not sep:
            raise ValueError(f"range must look like START:END, got {text!r}")
        return cls(int(start), int(end))


@dataclass(frozen=True)
class SliceGroup:
    members: tuple[int, ...]
    center: int


@dataclass
class PairingPlan:
    pairs: list[tuple[int, int]]  # (support slice, query slice)
    k: int

    def support_slices(self) -> list[int]:
        return sorted({s for s, _ in self.pairs})

    def by_support(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for s, q in self.pairs:
            out.setdefault(s, []).append(q)
        return out


@dataclass
class VolumeMetrics:
    dice: float
    asd_mm: float  # nan when undefined (an empty mask)


def compute_groups(rng: SliceRange, k: int) -> list[SliceGroup]:
    """Split the range into k contiguous groups; the first ``len % k`` groups get one extra slice."""
    n = len(rng)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the range length {n}")
    q, r = divmod(n, k)
    groups, start = [], rng.start
    for j in range(k):
        size = q + 1 if j < r else q
        members = tuple(range(start, start + size))
        groups.append(SliceGroup(members, (members[0] + members[-1]) // 2))
        start += size
    return groups


def build_pairing(support_range: SliceRange, query_range: SliceRange, k: int) -> PairingPlan:
    """Pair the center of support group j with every slice of query group j."""
    s_groups = compute_groups(support_range, k)
    q_groups = compute_groups(query_range, k)
    pairs = [(sg.center, q) for sg, qg in zip(s_groups, q_groups) for q in qg.members]
    return PairingPlan(pairs, k)


def segment_volume(
    support_vol: np.ndarray,
    support_labels: np.ndarray,
    query_vol: np.ndarray,
    support_range: SliceRange,
    query_range: SliceRange,
    k: int,
    net: NetworkParams,
    class_id: int = 1,
    annotated_slices=None,
    bn_mode: str = "infer",
) -> np.ndarray:
    """Binary (d, h, w) prediction for ``class_id`` on the query volume.

    ``annotated_slices`` restricts which support slices carry an annotation;
    by default every slice of ``support_labels`` counts as annotated.
    Slices outside the query range stay background.
    """
    if support_labels is None:
        raise ValueError("support volume has no annotation")
    if support_vol.shape != support_labels.shape:
        raise ShapeError(f"support volume {support_vol.shape} and labels {support_labels.shape} differ")
    support_range.check_within(support_vol.shape[0])
    query_range.check_within(query_vol.shape[0])
    plan = build_pairing(support_range, query_range, k)
    if annotated_slices is not None:
        missing = [s for s in plan.support_slices() if s not in set(annotated_slices)]
        if missing:
            raise ValueError(f"support slices {missing} need an annotation but have none")
    out = np.zeros(query_vol.shape, dtype=np.uint8)
    for s, queries in plan.by_support().items():
        mask = (support_labels[s] == class_id).astype(np.uint8)
        task = conditioner_forward(support_vol[s], mask, net, bn_mode)
        for q in queries:
            _, pred = segmenter_forward(query_vol[q], task, net, bn_mode)
            out[q] = pred[0, 0]
    return out


# --------------------------------------------------------------------------
# metrics


def _check_same(pred, gt):
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1."""
    _check_same(pred, gt)
    p, g = pred.astype(bool), gt.astype(bool)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / denom)


class UndefinedDistance(ValueError):
    pass


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one face-adjacent background voxel (outside counts as background)."""
    m = mask.astype(bool)
    structure = ndimage.generate_binary_structure(m.ndim, 1)
    return m & ~ndimage.binary_erosion(m, structure=structure, border_value=0)


def avg_surface_distance(pred: np.ndarray, gt: np.ndarray, spacing_mm) -> float:
    """Symmetric mean distance (mm) between the two mask surfaces."""
    _check_same(pred, gt)
    if not pred.any() or not gt.any():
        raise UndefinedDistance("average surface distance is undefined for an empty mask")
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    a = np.argwhere(surface_voxels(pred)) * spacing
    b = np.argwhere(surface_voxels(gt)) * spacing
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float((d_ab.sum() + d_ba.sum()) / (len(a) + len(b)))


def evaluate_volume(pred: np.ndarray, gt: np.ndarray, spacing_mm) -> VolumeMetrics:
    try:
        asd = avg_surface_distance(pred, gt, spacing_mm)
    except UndefinedDistance:
        asd = float("nan")
    return VolumeMetrics(dice_score(pred, gt), asd)
