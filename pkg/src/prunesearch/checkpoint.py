"""Binary checkpoint container for models and adapters.

Layout: magic ``ADPR`` | u32 version (little-endian) | u64 header length |
UTF-8 JSON header | raw tensors, float64 little-endian, in declaration
order. The header fully determines every tensor shape; load validates
them. Writing is byte-deterministic (sorted JSON keys, no timestamps).
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import PipelineError
from .model import ModelConfig, TransformerLM, param_layout

MAGIC = b"ADPR"
VERSION = 1


def _pack_header(header: dict) -> bytes:
    body = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(body)) + body


def _read_header(f, path) -> dict:
    magic = f.read(4)
    if magic != MAGIC:
        raise PipelineError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", f.read(4))
    if version != VERSION:
        raise PipelineError(f"{path}: unsupported container version {version}")
    (hlen,) = struct.unpack("<Q", f.read(8))
    return json.loads(f.read(hlen).decode("utf-8"))


def _read_tensor(f, shape, path, name):
    count = int(np.prod(shape)) if shape else 1
    raw = f.read(count * 8)
    if len(raw) != count * 8:
        raise PipelineError(f"{path}: truncated tensor {name}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def save_model(model: TransformerLM, path) -> None:
    header = {
        "kind": "model",
        "config": model.config.to_dict(),
        "heads_per_layer": list(model.heads_per_layer),
        "dff_per_layer": list(model.dff_per_layer),
    }
    layout = param_layout(model.config, model.heads_per_layer, model.dff_per_layer)
    with open(path, "wb") as f:
        f.write(_pack_header(header))
        for name, shape in layout:
            arr = model.params[name]
            if arr.shape != shape:
                raise PipelineError(f"model tensor {name} has shape {arr.shape}, expected {shape}")
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> TransformerLM:
    with open(path, "rb") as f:
        header = _read_header(f, path)
        if header.get("kind") != "model":
            raise PipelineError(f"{path}: not a model checkpoint")
        config = ModelConfig(**header["config"])
        heads = header["heads_per_layer"]
        dffs = header["dff_per_layer"]
        params = {}
        for name, shape in param_layout(config, heads, dffs):
            params[name] = _read_tensor(f, shape, path, name)
        trailing = f.read(1)
    if trailing:
        raise PipelineError(f"{path}: trailing bytes after tensors")
    return TransformerLM(config, params, heads, dffs)


def save_adapter(adapted, path) -> None:
    names = sorted(adapted.targets)
    header = {
        "kind": "adapter",
        "rank": adapted.rank,
        "scale": adapted.scale,
        "targets": names,
        "shapes": {n: [list(adapted.targets[n][0].shape), list(adapted.targets[n][1].shape)] for n in names},
    }
    with open(path, "wb") as f:
        f.write(_pack_header(header))
        for n in names:
            a, b = adapted.targets[n]
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_adapter(path) -> dict:
    """Read an adapter container: rank, scale and per-target (A, B) pairs."""
    with open(path, "rb") as f:
        header = _read_header(f, path)
        if header.get("kind") != "adapter":
            raise PipelineError(f"{path}: not an adapter checkpoint")
        targets = {}
        for n in header["targets"]:
            sa, sb = header["shapes"][n]
            a = _read_tensor(f, tuple(sa), path, f"{n}.A")
            b = _read_tensor(f, tuple(sb), path, f"{n}.B")
            targets[n] = (a, b)
    return {"rank": header["rank"], "scale": header["scale"], "targets": targets}


def file_fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def text_fingerprint(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
