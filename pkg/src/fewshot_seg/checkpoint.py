"""Checkpoint files: a text manifest followed by little-endian float32 arrays.

Layout::

    FEWSHOT-CHECKPOINT
    version: 1
    meta fold 1
    meta seed 0
    [model]
    cond_channels = 16
    ...
    array weight seg.enc0.conv.weight 64 1 5 5
    array buffer seg.enc0.bn.running_mean 64
    ...
    end
    <raw float32 payload, arrays in manifest order>
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import model_dumps, model_loads
from .data import MalformedHeaderError, PayloadLengthError, UnsupportedVersionError
from .network import NetworkParams

MAGIC = "FEWSHOT-CHECKPOINT"
VERSION = 1


def save_checkpoint(net: NetworkParams, path, meta: dict | None = None) -> None:
    lines = [MAGIC, f"version: {VERSION}"]
    for k, v in (meta or {}).items():
        lines.append(f"meta {k} {v}")
    lines.extend(model_dumps(net.cfg).strip().splitlines())
    arrays = [("weight", k, v) for k, v in net.weights.items()] + [("buffer", k, v) for k, v in net.buffers.items()]
    for kind, name, arr in arrays:
        lines.append(f"array {kind} {name} " + " ".join(str(s) for s in arr.shape))
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for _, _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[NetworkParams, dict]:
    """Returns (params, meta); params are float32."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\nend\n")
    if not raw.startswith(MAGIC.encode() + b"\n") or end < 0:
        raise MalformedHeaderError(f"{path}: not a checkpoint file")
    lines = raw[:end].decode("ascii").splitlines()
    if lines[1] != f"version: {VERSION}":
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint {lines[1]!r}")
    meta, model_lines, specs = {}, [], []
    for line in lines[2:]:
        if line.startswith("meta "):
            _, k, v = line.split(" ", 2)
            meta[k] = v
        elif line.startswith("array "):
            parts = line.split()
            specs.append((parts[1], parts[2], tuple(int(s) for s in parts[3:])))
        else:
            model_lines.append(line)
    cfg = model_loads("\n".join(model_lines))
    payload = raw[end + len(b"\nend\n"):]
    expected = sum(4 * int(np.prod(shape)) for _, _, shape in specs)
    if len(payload) != expected:
        raise PayloadLengthError(f"{path}: payload is {len(payload)} bytes, manifest implies {expected}")
    net = NetworkParams(cfg)
    offset = 0
    for kind, name, shape in specs:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * n
        (net.weights if kind == "weight" else net.buffers)[name] = arr
    return net, meta
