"""Run configuration and its plain-text (INI-style) file format."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from .data import ClassSpec, SynthSpec
from .network import FewShotConfig, preset as expand_preset
from .training import TrainHyperparams


@dataclass
class PathsConfig:
    manifest: str = "data/manifest.txt"
    checkpoint: str = ""  # empty: <out_dir>/model.ckpt
    out_dir: str = "runs"
    support: str = ""
    query: str = ""

    def checkpoint_path(self) -> str:
        return self.checkpoint or f"{self.out_dir}/model.ckpt"


@dataclass
class RunConfig:
    model: FewShotConfig = field(default_factory=FewShotConfig)
    train: TrainHyperparams = field(default_factory=TrainHyperparams)
    synth: SynthSpec = field(default_factory=SynthSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)
    preset: str = "bl7"
    fold: int = 1
    k: int = 10
    bn_mode: str = "infer"

    def with_preset(self, name: str) -> "RunConfig":
        return replace(self, preset=name, model=expand_preset(name, self.model))


# --------------------------------------------------------------------------
# value encoding


def _encode(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return " ".join(_encode(v) for v in value)
    return str(value)


def _decode(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        item = like[0] if like else 0.0
        return tuple(_decode(t, item) for t in text.split())
    if isinstance(like, list):
        item = like[0] if like else 0
        return [_decode(t, item) for t in text.split()]
    return text


def _write_section(cp, name, obj, skip=()):
    cp[name] = {f.name: _encode(getattr(obj, f.name)) for f in fields(obj) if f.name not in skip}


def _read_section(cp, name, cls, defaults=None, skip=()):
    base = defaults if defaults is not None else cls()
    if name not in cp:
        return base
    sec = cp[name]
    known = {f.name for f in fields(cls)} - set(skip)
    unknown = set(sec) - known
    if unknown:
        raise ValueError(f"[{name}]: unknown keys {sorted(unknown)}")
    kwargs = {k: _decode(sec[k], getattr(base, k)) for k in sec}
    return replace(base, **kwargs)


_CLASS_TEMPLATE = ClassSpec(1, "ellipsoid", (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (1.0, 1.0, 1.0), (0.0, 1.0), 0.0)


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    return cp


def dumps(cfg: RunConfig) -> str:
    cp = _parser()
    cp["run"] = {
        "preset": cfg.preset,
        "fold": str(cfg.fold),
        "k": str(cfg.k),
        "bn_mode": cfg.bn_mode,
    }
    _write_section(cp, "model", cfg.model)
    _write_section(cp, "train", cfg.train)
    _write_section(cp, "synth", cfg.synth, skip=("classes",))
    for c in cfg.synth.classes:
        _write_section(cp, f"synth.class.{c.class_id}", c, skip=("class_id",))
    _write_section(cp, "paths", cfg.paths)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def loads(text: str) -> RunConfig:
    cp = _parser()
    cp.read_string(text)
    default = RunConfig()
    run = cp["run"] if "run" in cp else {}
    classes = []
    for name in cp.sections():
        if name.startswith("synth.class."):
            cid = int(name.rsplit(".", 1)[1])
            spec = _read_section(cp, name, ClassSpec, replace(_CLASS_TEMPLATE, class_id=cid), skip=("class_id",))
            classes.append(spec)
    synth = _read_section(cp, "synth", SynthSpec, skip=("classes",))
    if classes:
        synth = replace(synth, classes=classes)
    model = _read_section(cp, "model", FewShotConfig)
    return RunConfig(
        model=model,
        train=_read_section(cp, "train", TrainHyperparams),
        synth=synth,
        paths=_read_section(cp, "paths", PathsConfig),
        preset=run.get("preset", default.preset),
        fold=int(run.get("fold", default.fold)),
        k=int(run.get("k", default.k)),
        bn_mode=run.get("bn_mode", default.bn_mode),
    )


def load(path) -> RunConfig:
    with open(path) as fh:
        return loads(fh.read())


def save(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(cfg))


def model_dumps(cfg: FewShotConfig) -> str:
    cp = _parser()
    _write_section(cp, "model", cfg)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def model_loads(text: str) -> FewShotConfig:
    cp = _parser()
    cp.read_string(text)
    return _read_section(cp, "model", FewShotConfig)
