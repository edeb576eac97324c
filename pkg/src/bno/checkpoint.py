"""Binary checkpoints for BNO and CNN-baseline models.

Layout (all integers little-endian)::

    b"BNO1"                       magic
    u16                           format version
    u32 + bytes                   UTF-8 JSON metadata
    repeated until EOF:
        u16 + bytes               tensor name
        3 bytes                   dtype tag, b"f32" or b"f64"
        u8                        rank
        u32 * rank                dims
        payload                   little-endian IEEE-754 values, C order

The metadata carries the architecture (kernel shapes, activations, DMD
rank/horizon per layer), window spec, normalization stats and free-form
run info. Floats go through JSON via ``repr`` and so survive exactly.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import NormStats, WindowSpec
from .errors import BadMagic, IoError, ShapeMismatch, VersionMismatch
from .model import BanachLayer, BnoModel, CnnBaseline, DmdBaseline
from .neural import ConvLayer

MAGIC = b"BNO1"
VERSION = 1

_DTYPES = {b"f32": np.dtype("<f4"), b"f64": np.dtype("<f8")}
_TAGS = {np.dtype("float32"): b"f32", np.dtype("float64"): b"f64"}


def _conv_meta(c: ConvLayer) -> dict:
    return {"shape": list(c.weights.shape), "activation": c.activation}


def _architecture(model) -> dict:
    if model.kind == "bno":
        return {
            "kind": "bno",
            "dt": model.dt,
            "layers": [
                {
                    "dmd_rank": l.dmd_rank,
                    "dmd_horizon": l.dmd_horizon,
                    "cnn": [_conv_meta(c) for c in l.cnn_branch],
                    "head": _conv_meta(l.head),
                }
                for l in model.layers
            ],
        }
    if model.kind == "cnn":
        return {
            "kind": "cnn",
            "cnn": [_conv_meta(c) for c in model.cnn_branch],
            "head": _conv_meta(model.head),
        }
    if model.kind == "dmd":
        return {"kind": "dmd", "rank": model.rank, "horizon": model.horizon, "dt": model.dt}
    raise TypeError(f"cannot checkpoint a {type(model).__name__}")


def save_checkpoint(model, path) -> None:
    meta = {
        "architecture": _architecture(model),
        "window": model.window.as_dict(),
        "norm_stats": {"mean": model.norm_stats.mean, "std": model.norm_stats.std},
        "meta": model.meta,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob]
    for name, arr in zip(model.param_names(), model.params()):
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise TypeError(f"tensor {name} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded + tag + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise IoError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    @property
    def done(self) -> bool:
        return self.pos >= len(self.raw)


def _read_tensors(r: _Reader) -> dict[str, np.ndarray]:
    tensors = {}
    while not r.done:
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag = r.take(3)
        if tag not in _DTYPES:
            raise IoError(f"{r.path}: unknown dtype tag {tag!r} for {name}")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        dt = _DTYPES[tag]
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return tensors


def _conv(tensors: dict, prefix: str, spec: dict) -> ConvLayer:
    try:
        w, b = tensors.pop(prefix + "weight"), tensors.pop(prefix + "bias")
    except KeyError as exc:
        raise IoError(f"checkpoint is missing tensor {exc}") from exc
    if list(w.shape) != spec["shape"]:
        raise ShapeMismatch(f"{prefix}weight has shape {w.shape}, metadata says {spec['shape']}")
    return ConvLayer(w, b, spec["activation"])


def load_checkpoint(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise BadMagic(f"{path} is not a BNO1 checkpoint")
    r = _Reader(raw, path)
    r.take(4)
    version, meta_len = r.unpack("<HI")
    if version != VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {VERSION}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except ValueError as exc:
        raise IoError(f"{path}: corrupt metadata: {exc}") from exc
    tensors = _read_tensors(r)

    arch = meta["architecture"]
    window = WindowSpec(**meta["window"])
    stats = NormStats(**meta["norm_stats"])
    info = meta.get("meta", {})
    if arch["kind"] == "bno":
        layers = []
        for i, spec in enumerate(arch["layers"]):
            cnn = [_conv(tensors, f"layers.{i}.cnn.{j}.", c) for j, c in enumerate(spec["cnn"])]
            head = _conv(tensors, f"layers.{i}.head.", spec["head"])
            layers.append(BanachLayer(cnn, head, spec["dmd_rank"], spec["dmd_horizon"]))
        model = BnoModel(layers, stats, window, info, arch.get("dt", 1.0))
    elif arch["kind"] == "cnn":
        cnn = [_conv(tensors, f"cnn.{j}.", c) for j, c in enumerate(arch["cnn"])]
        model = CnnBaseline(cnn, _conv(tensors, "head.", arch["head"]), stats, window, info)
    elif arch["kind"] == "dmd":
        model = DmdBaseline(arch["rank"], arch["horizon"], arch["dt"], stats, window, info)
    else:
        raise IoError(f"{path}: unknown model kind {arch['kind']!r}")
    if tensors:
        raise IoError(f"{path}: unexpected tensors {sorted(tensors)}")
    return model
