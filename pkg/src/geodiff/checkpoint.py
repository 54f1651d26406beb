"""``GDK1`` checkpoint container.

Layout (little-endian)::

    magic "GDK1" | u32 version | u32 H, W, out_channels | u32 in, hidden1, hidden2, out
    | u32 embed_dim | f32 parameter arrays in PARAM_NAMES order
    | u8 has_optimizer [ | u64 step | f64 lr, beta1, beta2, eps, weight_decay
                         | f32 first moments | f32 second moments ]

Parameters are stored as float32, so saving rounds them; a loaded
checkpoint re-saves to identical bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import PARAM_NAMES, DenoiserParams, OptimizerState

MAGIC = b"GDK1"
VERSION = 1
_HEAD = struct.Struct("<4sI3I4II")
_OPT = struct.Struct("<Q5d")


def encode_checkpoint(params: DenoiserParams, state: OptimizerState | None = None) -> bytes:
    i, h1, h2, o = params.layer_sizes
    parts = [_HEAD.pack(MAGIC, VERSION, params.H, params.W, params.out_channels,
                        i, h1, h2, o, params.embed_dim)]
    for k in PARAM_NAMES:
        parts.append(np.ascontiguousarray(params.tensors[k], dtype="<f4").tobytes())
    if state is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(_OPT.pack(state.step, state.lr, state.beta1, state.beta2, state.eps, state.weight_decay))
        for moments in (state.m, state.v):
            for k in PARAM_NAMES:
                parts.append(np.ascontiguousarray(moments[k], dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, params: DenoiserParams, state: OptimizerState | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, state))


def _read_arrays(data, off, shapes, label, path):
    out = {}
    for k in PARAM_NAMES:
        n = int(np.prod(shapes[k]))
        if len(data) < off + 4 * n:
            raise FormatError(f"truncated {label} array '{k}' ({4 * n} bytes expected)", off, path)
        out[k] = np.frombuffer(data, "<f4", n, off).reshape(shapes[k]).astype(np.float64)
        off += 4 * n
    return out, off


def decode_checkpoint(data: bytes, path=None) -> tuple[DenoiserParams, OptimizerState | None]:
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0, path)
    if len(data) < _HEAD.size:
        raise FormatError("truncated header", len(data), path)
    _, version, H, W, C, i, h1, h2, o, emb = _HEAD.unpack_from(data, 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4, path)
    if h1 != h2:
        raise FormatError(f"hidden widths differ ({h1} != {h2})", 20, path)
    params = DenoiserParams(H, W, C, h1, emb)
    if params.layer_sizes != (i, h1, h2, o):
        raise FormatError(f"inconsistent layer sizes {(i, h1, h2, o)}", 16, path)
    off = _HEAD.size
    params.tensors, off = _read_arrays(data, off, params.shapes(), "parameter", path)
    if off >= len(data):
        raise FormatError("missing optimizer flag", off, path)
    flag = data[off]
    off += 1
    state = None
    if flag == 1:
        if len(data) < off + _OPT.size:
            raise FormatError("truncated optimizer header", off, path)
        step, lr, b1, b2, eps, wd = _OPT.unpack_from(data, off)
        off += _OPT.size
        m, off = _read_arrays(data, off, params.shapes(), "first-moment", path)
        v, off = _read_arrays(data, off, params.shapes(), "second-moment", path)
        state = OptimizerState(m, v, step, lr, b1, b2, eps, wd)
    elif flag != 0:
        raise FormatError(f"invalid optimizer flag {flag}", off - 1, path)
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes", off, path)
    return params, state


def load_checkpoint(path) -> tuple[DenoiserParams, OptimizerState | None]:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), path)
