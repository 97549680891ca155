"""Binary model container.

Layout (all integers little-endian)::

    b"CPNM"  u32 version
    u16 name_len, name (utf-8)
    u32 R_w, R_h, input_channels, K, n_layers
    n_layers x (u8 kind [0 conv, 1 pool], u32 a, u32 b, u32 c)
        conv: a=out_channels b=kernel c=stride; pool: a=window b=stride c=0
    u8 has_templates
        u8 mode_len, mode (ascii), u32 n, n x f64 aspect ratio
    u32 meta_len, meta (utf-8 JSON, sorted keys)
    per conv layer in spec order: kernel then bias as raw <f4 values
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from charprop.network import ArchitectureSpec, Conv, Model, Pool, _param_shapes
from charprop.templates import TemplateSet

MAGIC = b"CPNM"
VERSION = 1


class ModelFormatError(ValueError):
    pass


def dumps(model: Model) -> bytes:
    spec = model.spec
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    name = spec.name.encode("utf-8")
    buf.write(struct.pack("<H", len(name)) + name)
    buf.write(struct.pack("<5I", *spec.input_size, spec.input_channels, spec.num_classes, len(spec.layers)))
    for layer in spec.layers:
        if isinstance(layer, Conv):
            buf.write(struct.pack("<B3I", 0, layer.out_channels, layer.kernel, layer.stride))
        else:
            buf.write(struct.pack("<B3I", 1, layer.window, layer.stride, 0))
    t = model.templates
    if t is None:
        buf.write(b"\x00")
    else:
        mode = t.mode.encode("ascii")
        buf.write(struct.pack("<BB", 1, len(mode)) + mode)
        buf.write(struct.pack("<I", len(t.aspect_ratios)))
        buf.write(np.asarray(t.aspect_ratios, dtype="<f8").tobytes())
    meta = json.dumps(model.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)) + meta)
    for kern, bias in model.params:
        buf.write(np.ascontiguousarray(kern, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(bias, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError("truncated model file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> Model:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ModelFormatError("not a CPNM model file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    (name_len,) = r.unpack("<H")
    name = r.take(name_len).decode("utf-8")
    rw, rh, in_ch, k, n_layers = r.unpack("<5I")
    layers = []
    for _ in range(n_layers):
        kind, a, b, c = r.unpack("<B3I")
        if kind == 0:
            layers.append(Conv(a, b, c))
        elif kind == 1:
            layers.append(Pool(a, b))
        else:
            raise ModelFormatError(f"unknown layer kind {kind}")
    spec = ArchitectureSpec(name, tuple(layers), (rw, rh), k, in_ch)
    templates = None
    (has_t,) = r.unpack("<B")
    if has_t:
        (mode_len,) = r.unpack("<B")
        mode = r.take(mode_len).decode("ascii")
        (n,) = r.unpack("<I")
        ratios = np.frombuffer(r.take(8 * n), dtype="<f8")
        templates = TemplateSet(tuple(float(a) for a in ratios), (rw, rh), mode)
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    params = []
    for kshape, bshape in _param_shapes(spec):
        kern = np.frombuffer(r.take(4 * int(np.prod(kshape))), dtype="<f4").reshape(kshape)
        bias = np.frombuffer(r.take(4 * int(np.prod(bshape))), dtype="<f4").reshape(bshape)
        params.append((kern.astype(np.float32), bias.astype(np.float32)))
    if r.pos != len(data):
        raise ModelFormatError(f"{len(data) - r.pos} trailing bytes in model file")
    return Model(spec, params, templates, meta)


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(dumps(model))


def load_model(path) -> Model:
    return loads(Path(path).read_bytes())
