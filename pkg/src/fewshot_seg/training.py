"""Episodic training: batch sampler, soft Dice loss and SGD with momentum."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .layers import ShapeError
from .network import FewShotConfig, NetworkParams, backward, forward

log = logging.getLogger(__name__)

DICE_EPS = 1e-5


class DatasetError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, class_id: int, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration} (class {class_id})")
        self.iteration = iteration
        self.class_id = class_id
        self.loss = loss


@dataclass
class TrainHyperparams:
    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    momentum: float = 0.99
    epochs: int = 10
    iters_per_epoch: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.iters_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and iters_per_epoch >= 1")


@dataclass(frozen=True)
class LabelUniverse:
    train_classes: frozenset
    test_classes: frozenset

    def __init__(self, train_classes, test_classes):
        object.__setattr__(self, "train_classes", frozenset(int(c) for c in train_classes))
        object.__setattr__(self, "test_classes", frozenset(int(c) for c in test_classes))
        self.validate()

    def validate(self):
        overlap = self.train_classes & self.test_classes
        if overlap:
            raise ValueError(f"train and test classes must be disjoint; shared: {sorted(overlap)}")
        if not self.train_classes:
            raise ValueError("at least one training class is required")

    @classmethod
    def leave_one_out(cls, classes: Sequence[int], test_class: int) -> "LabelUniverse":
        if test_class not in classes:
            raise ValueError(f"fold class {test_class} is not in the catalog {sorted(classes)}")
        return cls([c for c in classes if c != test_class], [test_class])


@dataclass
class Episode:
    support_image: np.ndarray
    support_mask: np.ndarray
    query_image: np.ndarray
    query_mask: np.ndarray
    class_id: int


class SliceDataset:
    """2-D slices of a set of labelled volumes, indexed by the classes they contain."""

    def __init__(self, volumes):
        self.volumes = list(volumes)
        self.class_slices: dict[int, list[tuple[int, int]]] = {}
        for vi, v in enumerate(self.volumes):
            if v.labels is None:
                raise DatasetError(f"volume {v.volume_id or vi} has no labels")
            present = v.labels.reshape(v.labels.shape[0], -1)
            for c in np.unique(v.labels):
                if c == 0:
                    continue
                rows = np.flatnonzero((present == c).any(axis=1))
                self.class_slices.setdefault(int(c), []).extend((vi, int(s)) for s in rows)

    def validate(self, universe: LabelUniverse) -> None:
        for c in sorted(universe.train_classes):
            n = len(self.class_slices.get(c, []))
            if n < 2:
                raise DatasetError(f"class {c} appears on {n} slice(s); the sampler needs at least 2")

    def slice(self, vi: int, s: int, class_id: int):
        v = self.volumes[vi]
        return v.intensities[s], (v.labels[s] == class_id).astype(np.uint8)


def sample_episode(dataset: SliceDataset, universe: LabelUniverse, rng: np.random.Generator) -> Episode:
    """Draw a training class uniformly, then two distinct slices containing it."""
    classes = sorted(universe.train_classes)
    alpha = classes[rng.integers(len(classes))]
    pool = dataset.class_slices.get(alpha, [])
    if len(pool) < 2:
        raise DatasetError(f"class {alpha} appears on {len(pool)} slice(s); the sampler needs at least 2")
    a, b = rng.choice(len(pool), size=2, replace=False)
    s_img, s_mask = dataset.slice(*pool[a], alpha)
    q_img, q_mask = dataset.slice(*pool[b], alpha)
    return Episode(s_img, s_mask, q_img, q_mask, alpha)


# --------------------------------------------------------------------------
# loss


def _dice_terms(pred, target, eps):
    if pred.shape != target.shape:
        raise ShapeError(f"dice: prediction shape {pred.shape} != target shape {target.shape}")
    p = pred.astype(np.float64)
    t = target.astype(np.float64)
    num = 2.0 * (p * t).sum() + eps
    den = p.sum() + t.sum() + eps
    return t, num, den


def dice_loss(pred: np.ndarray, target: np.ndarray, eps: float = DICE_EPS) -> float:
    """1 - (2 sum(M L) + eps) / (sum M + sum L + eps)."""
    _, num, den = _dice_terms(pred, target, eps)
    return float(1.0 - num / den)


def dice_loss_grad(pred: np.ndarray, target: np.ndarray, eps: float = DICE_EPS) -> np.ndarray:
    t, num, den = _dice_terms(pred, target, eps)
    return (-(2.0 * t * den - num) / den**2).astype(pred.dtype)


# --------------------------------------------------------------------------
# optimizer


def sgd_step(params: dict, grads: dict, state: dict, hp: TrainHyperparams) -> dict:
    """Classical momentum with L2 weight decay folded into the gradient. Updates in place."""
    lr, mu, wd = hp.learning_rate, hp.momentum, hp.weight_decay
    for name, w in params.items():
        g = grads[name]
        if wd:
            g = g + wd * w
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(w)
        v *= mu
        v += g
        w -= (lr * v).astype(w.dtype, copy=False)
    return params


# --------------------------------------------------------------------------
# loop


@dataclass
class LossCurve:
    iterations: list[int] = field(default_factory=list)
    epochs: list[int] = field(default_factory=list)
    class_ids: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def append(self, it, epoch, class_id, loss):
        self.iterations.append(it)
        self.epochs.append(epoch)
        self.class_ids.append(class_id)
        self.losses.append(loss)

    def __len__(self):
        return len(self.losses)

    def epoch_means(self) -> list[float]:
        e = np.asarray(self.epochs)
        l = np.asarray(self.losses)
        return [float(l[e == k].mean()) for k in np.unique(e)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "epoch", "class_id", "loss"])
            for row in zip(self.iterations, self.epochs, self.class_ids, self.losses):
                w.writerow([row[0], row[1], row[2], repr(row[3])])


def _streams(seed: int):
    """Independent (initialization, sampler) seed streams."""
    return np.random.SeedSequence(seed).spawn(2)


def initial_params(cfg: FewShotConfig, seed: int) -> NetworkParams:
    """The weights :func:`train` starts from for this seed."""
    return NetworkParams.init(cfg, seed=_streams(seed)[0])


def train(
    dataset: SliceDataset,
    universe: LabelUniverse,
    cfg: FewShotConfig,
    hp: TrainHyperparams,
    net: NetworkParams | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> tuple[NetworkParams, LossCurve]:
    """One episode per iteration: forward both arms, Dice loss on the query, backward, SGD step."""
    universe.validate()
    dataset.validate(universe)
    if net is None:
        net = initial_params(cfg, hp.seed)
    rng = np.random.default_rng(_streams(hp.seed)[1])
    state: dict = {}
    curve = LossCurve()
    for epoch in range(hp.epochs):
        for i in range(hp.iters_per_epoch):
            it = epoch * hp.iters_per_epoch + i
            ep = sample_episode(dataset, universe, rng)
            fg, tape = forward(net, ep.support_image, ep.support_mask, ep.query_image, mode="train")
            target = ep.query_mask[None, None]
            loss = dice_loss(fg, target)
            if not math.isfinite(loss):
                raise TrainingDiverged(it, ep.class_id, loss)
            grads = backward(net, tape, dice_loss_grad(fg, target))
            sgd_step(net.weights, grads, state, hp)
            curve.append(it, epoch, ep.class_id, loss)
            if callback is not None:
                callback(it, loss)
        log.info("epoch %d mean dice loss %.4f", epoch, curve.epoch_means()[-1])
    return net, curve
