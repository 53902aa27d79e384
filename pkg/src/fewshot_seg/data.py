"""Synthetic labelled volumes and the on-disk volume / manifest formats.

Volumes are stored slice-major as (depth, height, width); slices along the
first axis are what the 2-D network sees.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FORMAT_MAGIC = "FEWSHOT-VOLUME"
FORMAT_VERSION = 1
MANIFEST_MAGIC = "# fewshot-seg manifest"
ROLES = ("train", "support", "query-validation", "query-test")
SHAPES = ("ellipsoid", "box", "capsule")


class VolumeFormatError(ValueError):
    pass


class MalformedHeaderError(VolumeFormatError):
    pass


class PayloadLengthError(VolumeFormatError):
    pass


class UnsupportedVersionError(VolumeFormatError):
    pass


class ShapeFitError(ValueError):
    pass


@dataclass
class Volume:
    intensities: np.ndarray  # (d, h, w) float32
    spacing_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)
    labels: np.ndarray | None = None  # (d, h, w) uint8
    volume_id: str = ""
    orig_hw: tuple[int, int] | None = None  # set when padded for the network

    def __post_init__(self):
        if self.intensities.ndim != 3:
            raise ValueError(f"volume intensities must be 3-D, got shape {self.intensities.shape}")
        if self.labels is not None and self.labels.shape != self.intensities.shape:
            raise ValueError(f"labels {self.labels.shape} != intensities {self.intensities.shape}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.intensities.shape)

    def classes(self) -> list[int]:
        if self.labels is None:
            return []
        return [int(c) for c in np.unique(self.labels) if c != 0]

    def class_range(self, class_id: int) -> tuple[int, int] | None:
        """Inclusive (first, last) slice containing ``class_id``, or None."""
        if self.labels is None:
            return None
        rows = np.flatnonzero((self.labels == class_id).reshape(self.labels.shape[0], -1).any(axis=1))
        if rows.size == 0:
            return None
        return int(rows[0]), int(rows[-1])


# --------------------------------------------------------------------------
# synthetic generator


@dataclass
class ClassSpec:
    class_id: int
    shape: str
    center: tuple[float, float, float]  # voxel coordinates (d, h, w)
    size_min: tuple[float, float, float]  # semi-extents in voxels
    size_max: tuple[float, float, float]
    intensity: tuple[float, float]
    position_jitter: float = 2.0

    def __post_init__(self):
        for name in ("center", "size_min", "size_max", "intensity"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.position_jitter = float(self.position_jitter)
        if self.class_id < 1 or self.class_id > 255:
            raise ValueError(f"class id must be in 1..255, got {self.class_id}")
        if self.shape not in SHAPES:
            raise ValueError(f"class {self.class_id}: shape must be one of {SHAPES}, got {self.shape!r}")
        if any(a > b for a, b in zip(self.size_min, self.size_max)):
            raise ValueError(f"class {self.class_id}: size_min exceeds size_max")


def default_catalog() -> list[ClassSpec]:
    """Four stand-in organs laid out like a coarse axial abdomen in a 48x64x64 grid."""
    return [
        ClassSpec(1, "ellipsoid", (24, 28, 21), (9, 9, 8), (11, 11, 10), (0.62, 0.72), 2.5),
        ClassSpec(2, "box", (20, 22, 44), (6, 5, 5), (8, 7, 7), (0.80, 0.90), 2.5),
        ClassSpec(3, "capsule", (26, 45, 43), (9, 4, 4), (11, 5, 5), (0.45, 0.52), 2.0),
        ClassSpec(4, "ellipsoid", (27, 48, 22), (9, 4, 3), (12, 5, 4), (0.35, 0.42), 2.0),
    ]


@dataclass
class SynthSpec:
    num_volumes: int = 20
    dims: tuple[int, int, int] = (48, 64, 64)
    spacing_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)
    classes: list[ClassSpec] = field(default_factory=default_catalog)
    noise_std: float = 0.03
    body_intensity: tuple[float, float] = (0.22, 0.28)
    seed: int = 0

    def validate(self) -> None:
        if self.num_volumes < 1:
            raise ValueError("num_volumes must be >= 1")
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"class ids must be distinct, got {ids}")
        for c in self.classes:
            c.__post_init__()
            for axis, (ctr, ext, n) in enumerate(zip(c.center, c.size_max, self.dims)):
                lo, hi = ctr - ext - c.position_jitter, ctr + ext + c.position_jitter
                if lo < 0 or hi > n - 1:
                    raise ShapeFitError(
                        f"class {c.class_id} ({c.shape}) does not fit along axis {axis}: "
                        f"extent [{lo}, {hi}] outside [0, {n - 1}]"
                    )


def _grid(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def render_shape(shape: str, center, size, dims) -> np.ndarray:
    """Boolean mask of voxels whose centers fall inside the analytic shape."""
    z, y, x = _grid(dims)
    cz, cy, cx = center
    a, b, c = size
    if shape == "ellipsoid":
        return ((z - cz) / a) ** 2 + ((y - cy) / b) ** 2 + ((x - cx) / c) ** 2 <= 1.0
    if shape == "box":
        return (np.abs(z - cz) <= a) & (np.abs(y - cy) <= b) & (np.abs(x - cx) <= c)
    if shape == "capsule":
        # axis along depth; radius b; total half-extent a
        r = b
        half = max(a - r, 0.0)
        dz = np.clip(np.abs(z - cz) - half, 0.0, None)
        return dz**2 + (y - cy) ** 2 + (x - cx) ** 2 <= r * r
    raise ValueError(f"unknown shape {shape!r}")


def analytic_volume(shape: str, size) -> float:
    a, b, c = size
    if shape == "ellipsoid":
        return 4.0 / 3.0 * math.pi * a * b * c
    if shape == "box":
        return 8.0 * a * b * c
    r = b
    half = max(a - r, 0.0)
    return math.pi * r * r * 2 * half + 4.0 / 3.0 * math.pi * r**3


def _synth_one(spec: SynthSpec, rng: np.random.Generator, volume_id: str) -> Volume:
    d, h, w = spec.dims
    _, y, x = _grid((1, h, w))
    body = (((y[0] - h / 2 + 0.5) / (0.46 * h)) ** 2 + ((x[0] - w / 2 + 0.5) / (0.47 * w)) ** 2) <= 1.0
    img = np.zeros(spec.dims, dtype=np.float64)
    img[:, body] = rng.uniform(*spec.body_intensity)
    labels = np.zeros(spec.dims, dtype=np.uint8)
    for c in spec.classes:
        center = tuple(ctr + rng.uniform(-c.position_jitter, c.position_jitter) for ctr in c.center)
        size = tuple(rng.uniform(lo, hi) for lo, hi in zip(c.size_min, c.size_max))
        mask = render_shape(c.shape, center, size, spec.dims)
        if (mask.reshape(d, -1).any(axis=1)).sum() < 2:
            raise ShapeFitError(f"class {c.class_id} covers fewer than 2 slices; enlarge its size range")
        labels[mask] = c.class_id
        img[mask] = rng.uniform(*c.intensity)
    img += rng.normal(0.0, spec.noise_std, size=spec.dims)
    return Volume(img.astype(np.float32), tuple(float(s) for s in spec.spacing_mm), labels, volume_id)


def generate_dataset(spec: SynthSpec) -> list[Volume]:
    """Deterministic in ``spec.seed``; each volume draws from its own substream."""
    spec.validate()
    streams = np.random.SeedSequence(spec.seed).spawn(spec.num_volumes)
    return [_synth_one(spec, np.random.default_rng(s), f"vol{i:03d}") for i, s in enumerate(streams)]


def default_roles(n: int) -> list[str]:
    """Split mirroring the original protocol: most volumes train, one support, the rest validation/test."""
    if n < 4:
        return ["train"] * (n - 1) + ["support"]
    n_test = max(1, round(n * 0.15))
    n_val = max(1, round(n * 0.2))
    n_train = n - 1 - n_val - n_test
    return ["train"] * n_train + ["support"] + ["query-validation"] * n_val + ["query-test"] * n_test


# --------------------------------------------------------------------------
# preprocessing


def normalize_volume(v: Volume, depth: int = 4) -> Volume:
    """Min-max rescale to [0, 1] and edge-pad (h, w) to a multiple of 2**depth."""
    x = v.intensities.astype(np.float64)
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    d, h, w = x.shape
    m = 2**depth
    ph, pw = (-h) % m, (-w) % m
    pad = ((0, 0), (0, ph), (0, pw))
    labels = v.labels
    if ph or pw:
        x = np.pad(x, pad, mode="edge")
        labels = None if labels is None else np.pad(labels, pad, mode="edge")
    orig = v.orig_hw or (h, w)
    return replace(v, intensities=x.astype(np.float32), labels=labels, orig_hw=orig)


def crop_to_original(arr: np.ndarray, orig_hw) -> np.ndarray:
    if orig_hw is None:
        return arr
    return arr[..., : orig_hw[0], : orig_hw[1]]


# --------------------------------------------------------------------------
# volume file format


def _format_floats(vals) -> str:
    return " ".join(repr(float(v)) for v in vals)


def save_volume(v: Volume, path) -> None:
    d, h, w = v.dims
    lines = [
        FORMAT_MAGIC,
        f"version: {FORMAT_VERSION}",
        f"volume_id: {v.volume_id}",
        f"dims: {d} {h} {w}",
        f"spacing_mm: {_format_floats(v.spacing_mm)}",
        "dtype: float32",
        f"labels: {int(v.labels is not None)}",
    ]
    if v.orig_hw is not None:
        lines.append(f"orig_hw: {v.orig_hw[0]} {v.orig_hw[1]}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(v.intensities, dtype="<f4").tobytes())
        if v.labels is not None:
            fh.write(np.ascontiguousarray(v.labels, dtype=np.uint8).tobytes())


def _parse_header(raw: bytes, path) -> tuple[dict, int]:
    end = raw.find(b"\nend\n")
    if not raw.startswith(FORMAT_MAGIC.encode() + b"\n") or end < 0:
        raise MalformedHeaderError(f"{path}: missing {FORMAT_MAGIC} header or 'end' line")
    try:
        text = raw[:end].decode("ascii")
    except UnicodeDecodeError as e:
        raise MalformedHeaderError(f"{path}: header is not ASCII") from e
    header = {}
    for line in text.splitlines()[1:]:
        key, sep, value = line.partition(":")
        if not sep:
            raise MalformedHeaderError(f"{path}: bad header line {line!r}")
        header[key.strip()] = value.strip()
    return header, end + len(b"\nend\n")


def load_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    header, offset = _parse_header(raw, path)
    try:
        version = int(header["version"])
    except (KeyError, ValueError) as e:
        raise MalformedHeaderError(f"{path}: missing or invalid version") from e
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")
    try:
        dims = tuple(int(t) for t in header["dims"].split())
        spacing = tuple(float(t) for t in header["spacing_mm"].split())
        has_labels = header["labels"] == "1"
        dtype = header["dtype"]
        orig_hw = tuple(int(t) for t in header["orig_hw"].split()) if "orig_hw" in header else None
    except (KeyError, ValueError) as e:
        raise MalformedHeaderError(f"{path}: incomplete header ({e})") from e
    if len(dims) != 3 or len(spacing) != 3 or dtype != "float32":
        raise MalformedHeaderError(f"{path}: need 3 dims, 3 spacings and dtype float32")
    n = dims[0] * dims[1] * dims[2]
    expected = 4 * n + (n if has_labels else 0)
    payload = raw[offset:]
    if len(payload) != expected:
        raise PayloadLengthError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    img = np.frombuffer(payload[: 4 * n], dtype="<f4").reshape(dims).astype(np.float32)
    labels = np.frombuffer(payload[4 * n :], dtype=np.uint8).reshape(dims).copy() if has_labels else None
    return Volume(img, spacing, labels, header.get("volume_id", ""), orig_hw)


# --------------------------------------------------------------------------
# dataset manifest


@dataclass
class Manifest:
    classes: list[int]
    entries: list[tuple[str, str]]  # (role, path relative to the manifest)
    root: Path = Path(".")

    def paths(self, role: str) -> list[Path]:
        return [self.root / p for r, p in self.entries if r == role]


def write_manifest(path, classes, entries) -> None:
    lines = [MANIFEST_MAGIC, "version 1", "classes " + " ".join(str(c) for c in classes)]
    for role, p in entries:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        lines.append(f"{role} {p}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    lines = [l.strip() for l in path.read_text().splitlines()]
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise MalformedHeaderError(f"{path}: not a dataset manifest")
    classes, entries = [], []
    for line in lines[1:]:
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key == "version":
            if rest.strip() != "1":
                raise UnsupportedVersionError(f"{path}: manifest version {rest} unsupported")
        elif key == "classes":
            classes = [int(t) for t in rest.split()]
        elif key in ROLES:
            entries.append((key, rest.strip()))
        else:
            raise MalformedHeaderError(f"{path}: unknown manifest line {line!r}")
    return Manifest(classes, entries, path.parent)


def write_ranges(path, v: Volume) -> None:
    """Sidecar listing, per class, the inclusive slice range that contains it."""
    lines = []
    for c in v.classes():
        s, e = v.class_range(c)
        lines.append(f"{c} {s} {e}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ranges(path) -> dict[int, tuple[int, int]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            c, s, e = (int(t) for t in line.split())
            out[c] = (s, e)
    return out


def ranges_path(volume_path) -> Path:
    return Path(volume_path).with_suffix(".ranges")
