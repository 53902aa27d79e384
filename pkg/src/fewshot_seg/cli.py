"""Command-line entry point: synth, train, segment, evaluate, gradcheck.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_io
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    Volume,
    VolumeFormatError,
    crop_to_original,
    default_roles,
    generate_dataset,
    load_volume,
    normalize_volume,
    ranges_path,
    read_manifest,
    read_ranges,
    save_volume,
    write_manifest,
    write_ranges,
)
from .gradcheck import REGISTRY, TOLERANCE, gradcheck_report
from .layers import ShapeError
from .network import NetworkParams
from .training import DatasetError, LabelUniverse, SliceDataset, train
from .volumetric import SliceRange, evaluate_volume, segment_volume

log = logging.getLogger("fewshot_seg")


class ValidationError(Exception):
    pass


VALIDATION_ERRORS = (ValidationError, ValueError, ShapeError, VolumeFormatError, DatasetError, FileNotFoundError)


# --------------------------------------------------------------------------
# config assembly


def build_config(args) -> config_io.RunConfig:
    cfg = config_io.load(args.config) if getattr(args, "config", None) else config_io.RunConfig()
    if getattr(args, "preset", None):
        cfg = cfg.with_preset(args.preset)
    if getattr(args, "fold", None) is not None:
        cfg = replace(cfg, fold=args.fold)
    if getattr(args, "k", None) is not None:
        cfg = replace(cfg, k=args.k)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed), synth=replace(cfg.synth, seed=args.seed))
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    if getattr(args, "iters", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, iters_per_epoch=args.iters))
    paths = cfg.paths
    for flag, attr in (("out", "out_dir"), ("checkpoint", "checkpoint"), ("support", "support"),
                       ("query", "query"), ("manifest", "manifest")):
        value = getattr(args, flag, None)
        if value and not isinstance(value, list):
            paths = replace(paths, **{attr: value})
    return replace(cfg, paths=paths)


def load_normalized(path, depth) -> Volume:
    return normalize_volume(load_volume(path), depth)


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: config_io.RunConfig) -> Path:
    spec = cfg.synth
    spec.validate()
    vols = generate_dataset(spec)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for v, role in zip(vols, default_roles(len(vols))):
        name = f"{v.volume_id}.fsv"
        save_volume(v, out / name)
        write_ranges(ranges_path(out / name), v)
        entries.append((role, name))
    manifest = out / "manifest.txt"
    write_manifest(manifest, [c.class_id for c in spec.classes], entries)
    # paths are left out so the generated tree does not depend on where it was written
    config_io.save(replace(cfg, paths=config_io.PathsConfig()), out / "synth.ini")
    log.info("wrote %d volumes and %s", len(vols), manifest)
    return manifest


def _fold_universe(classes, fold) -> LabelUniverse:
    if fold not in classes:
        raise ValidationError(f"fold class {fold} is not in the dataset catalog {classes}")
    universe = LabelUniverse.leave_one_out(classes, fold)
    if len(universe.train_classes) < 3:
        raise ValidationError(
            f"leave-one-class-out training needs >= 3 training classes, catalog leaves {len(universe.train_classes)}"
        )
    return universe


def cmd_train(cfg: config_io.RunConfig) -> Path:
    manifest = read_manifest(cfg.paths.manifest)
    universe = _fold_universe(manifest.classes, cfg.fold)
    depth = cfg.model.depth
    vols = [load_normalized(p, depth) for p in manifest.paths("train")]
    if not vols:
        raise ValidationError(f"{cfg.paths.manifest}: no training volumes listed")
    dataset = SliceDataset(vols)
    dataset.validate(universe)
    net, curve = train(dataset, universe, cfg.model, cfg.train)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(cfg.paths.checkpoint_path())
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, ckpt, meta={"fold": cfg.fold, "seed": cfg.train.seed, "preset": cfg.preset})
    curve.write_csv(out / "loss.csv")
    config_io.save(cfg, out / "run.ini")
    log.info("checkpoint %s; final epoch mean loss %s", ckpt,
             curve.epoch_means()[-1] if len(curve) else "n/a")
    return ckpt


def _query_range(args, query_path, class_id) -> SliceRange:
    if getattr(args, "range", None):
        return SliceRange.parse(args.range)
    sidecar = ranges_path(query_path)
    if sidecar.exists():
        ranges = read_ranges(sidecar)
        if class_id in ranges:
            return SliceRange(*ranges[class_id])
    raise ValidationError(
        f"no slice range for class {class_id} in {query_path}: pass --range START:END (or provide {sidecar.name})"
    )


def _support_range(vol: Volume, class_id) -> SliceRange:
    r = vol.class_range(class_id)
    if r is None:
        raise ValidationError(f"support volume {vol.volume_id} has no annotated slice of class {class_id}")
    return SliceRange(*r)


def _check_k(k, support_range):
    if k < 1 or k > len(support_range):
        raise ValidationError(f"--k {k} must lie in [1, {len(support_range)}] (support range length)")


def cmd_segment(cfg: config_io.RunConfig, args) -> list[Path]:
    if not cfg.paths.support or not cfg.paths.query:
        raise ValidationError("segment needs --support PATH and --query PATH")
    net, meta = load_checkpoint(cfg.paths.checkpoint_path())
    class_id = args.fold if args.fold is not None else int(meta.get("fold", cfg.fold))
    depth = net.cfg.depth
    support = load_normalized(cfg.paths.support, depth)
    if support.labels is None:
        raise ValidationError(f"support volume {cfg.paths.support} carries no annotation")
    s_range = _support_range(support, class_id)
    _check_k(cfg.k, s_range)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for qpath in [cfg.paths.query] + list(args.extra_query or []):
        q_range = _query_range(args, qpath, class_id)
        query = load_normalized(qpath, depth)
        pred = segment_volume(support.intensities, support.labels, query.intensities, s_range, q_range,
                              cfg.k, net, class_id, bn_mode=cfg.bn_mode)
        pred = crop_to_original(pred, query.orig_hw)
        image = crop_to_original(query.intensities, query.orig_hw)
        stem = query.volume_id or Path(qpath).stem
        path = out / f"{stem}_class{class_id}_k{cfg.k}_pred.fsv"
        save_volume(Volume(np.ascontiguousarray(image), query.spacing_mm, pred, stem), path)
        written.append(path)
        if args.overlays:
            odir = out / f"{stem}_class{class_id}_k{cfg.k}_overlays"
            odir.mkdir(exist_ok=True)
            for s in range(q_range.start, q_range.end + 1):
                write_overlay_ppm(odir / f"slice{s:03d}.ppm", image[s], pred[s])
    return written


def write_overlay_ppm(path, image, mask) -> None:
    """Binary PPM: grayscale slice with the mask tinted green."""
    g = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    rgb = np.stack([g, g, g], axis=-1)
    m = np.asarray(mask).astype(bool)
    rgb[m] = 0.5 * rgb[m] + 0.5 * np.array([0.0, 1.0, 0.0])
    data = (rgb * 255).round().astype(np.uint8)
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


METRIC_FIELDS = ["volume_id", "class_id", "k", "dice", "asd_mm"]


def evaluate_pairs(pred_paths, gt_paths, class_id, k) -> list[dict]:
    rows = []
    for pp, gp in zip(pred_paths, gt_paths):
        pred = load_volume(pp)
        gt = load_volume(gp)
        if pred.labels is None or gt.labels is None:
            raise ValidationError(f"{pp} / {gp}: both files need a label block")
        gt_mask = crop_to_original(gt.labels, gt.orig_hw) == class_id
        # binary prediction files mark foreground with 1; multi-class label maps are matched on the class id
        binary = pred.labels.max(initial=0) <= 1
        pred_mask = pred.labels.astype(bool) if binary else pred.labels == class_id
        m = evaluate_volume(crop_to_original(pred_mask, pred.orig_hw), gt_mask, gt.spacing_mm)
        rows.append(dict(volume_id=gt.volume_id or Path(gp).stem, class_id=class_id, k=k, dice=m.dice, asd_mm=m.asd_mm))
    return rows


def evaluate_model(net, class_id, support: Volume, queries: list[Volume], k, bn_mode="infer") -> list[dict]:
    """Segments each query with the given support volume and scores it against its own labels."""
    s_range = _support_range(support, class_id)
    _check_k(k, s_range)
    rows = []
    for q in queries:
        gt = q.labels == class_id
        r = q.class_range(class_id)
        if r is None:
            pred = np.zeros_like(gt, dtype=np.uint8)
        else:
            pred = segment_volume(support.intensities, support.labels, q.intensities, s_range, SliceRange(*r),
                                  k, net, class_id, bn_mode=bn_mode)
        pred = crop_to_original(pred, q.orig_hw)
        gt = crop_to_original(gt, q.orig_hw)
        m = evaluate_volume(pred, gt, q.spacing_mm)
        rows.append(dict(volume_id=q.volume_id, class_id=class_id, k=k, dice=m.dice, asd_mm=m.asd_mm))
    return rows


def _mean_row(rows, **keys):
    dice = float(np.mean([r["dice"] for r in rows]))
    asd = [r["asd_mm"] for r in rows if np.isfinite(r["asd_mm"])]
    return dict(volume_id="mean", dice=dice, asd_mm=float(np.mean(asd)) if asd else float("nan"), **keys)


def _write_csv(path, rows, fieldnames):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def cmd_evaluate(cfg: config_io.RunConfig, args) -> list[Path]:
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.predictions:
        if len(args.predictions) != len(args.ground_truth or []):
            raise ValidationError("--predictions and --ground-truth need the same number of files")
        rows = evaluate_pairs(args.predictions, args.ground_truth, cfg.fold, cfg.k)
        rows.append(_mean_row(rows, class_id=cfg.fold, k=cfg.k))
        _write_csv(out / "metrics.csv", rows, METRIC_FIELDS)
        return [out / "metrics.csv"]

    checkpoints = args.checkpoint or [cfg.paths.checkpoint_path()]
    manifest = read_manifest(cfg.paths.manifest)
    ks = [int(t) for t in args.k_sweep.split(",")] if args.k_sweep else [cfg.k]
    roles = args.roles.split(",")
    models = []
    for c in checkpoints:
        net, meta = load_checkpoint(c)
        models.append((net, int(meta.get("fold", cfg.fold))))
    depth = models[0][0].cfg.depth
    queries = [load_normalized(p, depth) for role in roles for p in manifest.paths(role)]
    support_paths = manifest.paths("support")
    if cfg.paths.support:
        support_paths = [Path(cfg.paths.support)]
    if not support_paths:
        raise ValidationError("no support volume: list one in the manifest or pass --support")

    rows = []
    for net, fold in models:
        support = load_normalized(support_paths[0], depth)
        for k in ks:
            part = evaluate_model(net, fold, support, queries, k, cfg.bn_mode)
            rows.extend(part)
            rows.append(_mean_row(part, class_id=fold, k=k))
    _write_csv(out / "metrics.csv", rows, METRIC_FIELDS)
    written.append(out / "metrics.csv")

    if args.support_sweep:
        # candidate supports: the designated support plus validation volumes; each is scored on the rest
        pool = manifest.paths("support") + manifest.paths("query-validation")
        candidates = pool[: args.support_sweep]
        pool_all = pool + manifest.paths("query-test")
        sweep_rows, table = [], []
        for cpath in candidates:
            support = load_normalized(cpath, depth)
            rest = [load_normalized(p, depth) for p in pool_all if p != cpath]
            entry = {"support_id": support.volume_id}
            fold_means = []
            for net, fold in models:
                part = evaluate_model(net, fold, support, rest, cfg.k, cfg.bn_mode)
                for r in part:
                    sweep_rows.append({"support_id": support.volume_id, **r})
                mean = float(np.mean([r["dice"] for r in part]))
                entry[f"class_{fold}"] = mean
                fold_means.append(mean)
            entry["mean"] = float(np.mean(fold_means))
            table.append(entry)
        _write_csv(out / "support_sweep.csv", sweep_rows, ["support_id"] + METRIC_FIELDS)
        cols = ["support_id"] + [f"class_{fold}" for _, fold in models] + ["mean"]
        _write_csv(out / "support_sweep_table.csv", table, cols)
        written += [out / "support_sweep.csv", out / "support_sweep_table.csv"]
    return written


def cmd_gradcheck(seed: int = 0, ops=None, stream=None) -> bool:
    stream = stream or sys.stdout
    ok_all = True
    for op in ops or REGISTRY:
        err, checked, skipped = gradcheck_report(op, seed)
        ok = err <= TOLERANCE
        ok_all &= ok
        print(f"{'PASS' if ok else 'FAIL'} {op:<22s} max_rel_err={err:.3e} checked={checked} kink_skipped={skipped}",
              file=stream)
    print(f"{len(ops or REGISTRY)} primitives checked; tolerance {TOLERANCE:g}; "
          f"{'all passed' if ok_all else 'FAILURES'}", file=stream)
    return ok_all


# --------------------------------------------------------------------------
# argument parsing


def _common(p, *flags):
    p.add_argument("--config", help="run configuration file")
    if "preset" in flags:
        p.add_argument("--preset", help="bl1..bl8, none, skip-none, skip-cond, skip-seg, skip-both")
    if "fold" in flags:
        p.add_argument("--fold", type=int, help="held-out (test) class id")
    if "k" in flags:
        p.add_argument("--k", type=int, help="support slice budget")
    if "seed" in flags:
        p.add_argument("--seed", type=int)
    if "epochs" in flags:
        p.add_argument("--epochs", type=int)
        p.add_argument("--iters", type=int, help="iterations per epoch")
    p.add_argument("--out", help="output directory")
    if "checkpoint" in flags:
        p.add_argument("--checkpoint", help="checkpoint path")
    if "manifest" in flags:
        p.add_argument("--manifest", help="dataset manifest")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot-seg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    _common(p, "seed")

    p = sub.add_parser("train", help="episodic training for one fold")
    _common(p, "preset", "fold", "seed", "epochs", "checkpoint", "manifest")

    p = sub.add_parser("segment", help="segment query volumes with a k-slice support budget")
    _common(p, "fold", "k", "checkpoint")
    p.add_argument("--support", help="support volume (with labels)")
    p.add_argument("--query", help="query volume")
    p.add_argument("--extra-query", nargs="*", help="further query volumes")
    p.add_argument("--range", help="query slice range START:END (inclusive)")
    p.add_argument("--overlays", action="store_true", help="write per-slice PPM overlays")

    p = sub.add_parser("evaluate", help="Dice / ASD tables, k sweeps and support-volume sweeps")
    _common(p, "fold", "k", "manifest")
    p.add_argument("--checkpoint", action="append", help="checkpoint (repeat for several folds)")
    p.add_argument("--support", help="support volume overriding the manifest")
    p.add_argument("--k-sweep", help="comma-separated budgets, e.g. 1,3,5,7,10")
    p.add_argument("--support-sweep", type=int, default=0, help="number of candidate support volumes")
    p.add_argument("--roles", default="query-validation,query-test")
    p.add_argument("--predictions", nargs="*", help="prediction volume files to score")
    p.add_argument("--ground-truth", nargs="*", help="ground-truth volume files, same order")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "gradcheck":
            return 0 if cmd_gradcheck(args.seed) else 2
        cfg = build_config(args)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "segment":
            for path in cmd_segment(cfg, args):
                print(path)
        elif args.command == "evaluate":
            for path in cmd_evaluate(cfg, args):
                print(path)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
