"""Desk-scale experiments on the synthetic dataset, with a result cache.

Each training run is keyed by its parameters plus a hash of the library
sources that influence it, so cached results are reused only when they
would be reproduced bit-for-bit.
"""
from __future__ import annotations

import hashlib
import inspect
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SynthSpec, default_roles, generate_dataset, normalize_volume
from .network import preset
from .training import LabelUniverse, SliceDataset, TrainHyperparams, train
from .volumetric import SliceRange, build_pairing, dice_score, segment_volume

log = logging.getLogger(__name__)

_SOURCES = ("layers.py", "network.py", "training.py", "data.py", "volumetric.py")
BN_MODES = ("infer", "batch")


def source_hash() -> str:
    h = hashlib.sha256()
    here = Path(__file__).parent
    for name in _SOURCES:
        h.update((here / name).read_bytes())
    for fn in (synthetic_split, volume_dice, execute):
        h.update(inspect.getsource(fn).encode())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class RunSpec:
    preset: str
    fold: int
    seed: int
    epochs: int = 10
    iters_per_epoch: int = 100
    k: int = 1
    synth_seed: int = 0

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True) + source_hash()
        return f"{self.preset}_f{self.fold}_s{self.seed}_" + hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class RunResult:
    spec: RunSpec
    epoch_means: list[float]
    dice: dict[str, list[float]]  # bn mode -> per-query-volume dice
    query_ids: list[str]
    seconds: float
    extra: dict = field(default_factory=dict)

    def mean_dice(self, mode="infer") -> float:
        return float(np.mean(self.dice[mode]))

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunResult":
        d = json.loads(text)
        return cls(RunSpec(**d.pop("spec")), **d)


_DATA_CACHE: dict[int, tuple] = {}


def synthetic_split(synth_seed: int = 0):
    """(train volumes, support volume, query volumes), normalized, for the default catalog."""
    if synth_seed not in _DATA_CACHE:
        vols = [normalize_volume(v) for v in generate_dataset(SynthSpec(seed=synth_seed))]
        roles = default_roles(len(vols))
        train_v = [v for v, r in zip(vols, roles) if r == "train"]
        support = next(v for v, r in zip(vols, roles) if r == "support")
        queries = [v for v, r in zip(vols, roles) if r.startswith("query")]
        _DATA_CACHE[synth_seed] = (train_v, support, queries)
    return _DATA_CACHE[synth_seed]


def volume_dice(net, fold, support, queries, k, bn_mode) -> list[float]:
    s_range = SliceRange(*support.class_range(fold))
    out = []
    for q in queries:
        q_range = SliceRange(*q.class_range(fold))
        pred = segment_volume(support.intensities, support.labels, q.intensities, s_range, q_range,
                              k, net, fold, bn_mode=bn_mode)
        out.append(dice_score(pred, q.labels == fold))
    return out


def execute(spec: RunSpec) -> RunResult:
    train_v, support, queries = synthetic_split(spec.synth_seed)
    classes = sorted({c for v in train_v for c in v.classes()})
    universe = LabelUniverse.leave_one_out(classes, spec.fold)
    hp = TrainHyperparams(epochs=spec.epochs, iters_per_epoch=spec.iters_per_epoch, seed=spec.seed)
    t0 = time.time()
    net, curve = train(SliceDataset(train_v), universe, preset(spec.preset), hp)
    dice = {m: volume_dice(net, spec.fold, support, queries, spec.k, m) for m in BN_MODES}
    return RunResult(spec, curve.epoch_means(), dice, [q.volume_id for q in queries], time.time() - t0)


def cached_run(spec: RunSpec, cache_dir) -> RunResult:
    cache_dir = Path(cache_dir)
    path = cache_dir / f"{spec.key()}.json"
    if path.exists():
        return RunResult.from_json(path.read_text())
    log.info("running %s", spec)
    res = execute(spec)
    cache_dir.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(res.to_json())
    tmp.replace(path)
    log.info("%s: first/last epoch loss %.3f/%.3f, dice infer %.3f batch %.3f (%.0fs)", spec.key(),
             res.epoch_means[0], res.epoch_means[-1], res.mean_dice("infer"), res.mean_dice("batch"), res.seconds)
    return res


# --------------------------------------------------------------------------
# the learning-signal experiment


LEARNING_PRESETS = ("bl7", "none", "bl8")


def learning_signal(cache_dir, folds=(1, 2, 3, 4), seeds=(0, 1, 2), presets=LEARNING_PRESETS,
                    iters_per_epoch=100) -> dict:
    """Train every (preset, fold, seed) and summarize loss reduction and one-shot volume Dice."""
    runs: list[RunResult] = []
    for seed in seeds:
        for fold in folds:
            for name in presets:
                runs.append(cached_run(RunSpec(name, fold, seed, iters_per_epoch=iters_per_epoch), cache_dir))
    summary: dict = {"presets": {}, "runs": len(runs)}
    for name in presets:
        mine = [r for r in runs if r.spec.preset == name]
        summary["presets"][name] = {
            "first_epoch_loss": float(np.mean([r.epoch_means[0] for r in mine])),
            "final_epoch_loss": float(np.mean([r.epoch_means[-1] for r in mine])),
            "loss_ratio_per_run": [r.epoch_means[-1] / r.epoch_means[0] for r in mine],
            "dice": {m: float(np.mean([r.mean_dice(m) for r in mine])) for m in BN_MODES},
            "dice_per_fold": {
                m: {f: float(np.mean([r.mean_dice(m) for r in mine if r.spec.fold == f])) for f in folds}
                for m in BN_MODES
            },
            "seconds": float(sum(r.seconds for r in mine)),
        }
    return summary


# --------------------------------------------------------------------------
# skip-connection recipe and k sweep (reported, not asserted)


def copy_over(net, fold, support, queries, bn_mode="infer") -> dict:
    """Dice of the prediction against the query truth and against the support mask it was paired with."""
    to_truth, to_support = [], []
    s_range = SliceRange(*support.class_range(fold))
    for q in queries:
        q_range = SliceRange(*q.class_range(fold))
        k = min(len(s_range), len(q_range))
        pred = segment_volume(support.intensities, support.labels, q.intensities, s_range, q_range,
                              k, net, fold, bn_mode=bn_mode)
        to_truth.append(dice_score(pred, q.labels == fold))
        # the support mask each query slice was paired with, laid onto the query grid
        pasted = np.zeros_like(pred)
        for s, qs in build_pairing(s_range, q_range, k).pairs:
            pasted[qs] = support.labels[s] == fold
        to_support.append(dice_score(pred, pasted))
    return {"dice_to_truth": float(np.mean(to_truth)), "dice_to_support": float(np.mean(to_support))}


def train_net(name, fold, seed, iters_per_epoch=100, epochs=10, synth_seed=0):
    train_v, _, _ = synthetic_split(synth_seed)
    classes = sorted({c for v in train_v for c in v.classes()})
    hp = TrainHyperparams(epochs=epochs, iters_per_epoch=iters_per_epoch, seed=seed)
    return train(SliceDataset(train_v), LabelUniverse.leave_one_out(classes, fold), preset(name), hp)


def skip_ablation(fold=1, seed=0, iters_per_epoch=100, epochs=10, bn_mode="infer") -> dict:
    _, support, queries = synthetic_split()
    out = {}
    for name in ("skip-none", "skip-cond", "skip-seg", "skip-both"):
        net, curve = train_net(name, fold, seed, iters_per_epoch, epochs)
        out[name] = {"final_epoch_loss": curve.epoch_means()[-1], **copy_over(net, fold, support, queries, bn_mode)}
    return out


def k_sweep(fold=1, seed=0, ks=(1, 3, 5, 7, 10), iters_per_epoch=100, epochs=10, bn_mode="infer") -> dict:
    _, support, queries = synthetic_split()
    net, _ = train_net("bl7", fold, seed, iters_per_epoch, epochs)
    return {k: float(np.mean(volume_dice(net, fold, support, queries, k, bn_mode))) for k in ks}
