"""``AVP1`` parameter checkpoints.

Layout (little-endian)::

    b"AVP1"
    u32 header length, header bytes (UTF-8 JSON, free-form config)
    u32 parameter count
    per parameter: u16 name length, name (UTF-8), u8 ndim, ndim x u32 dims,
                   f32 data (row-major)
    u8 has_optimizer
    if has_optimizer: u32 step, f64 beta1, f64 beta2, f64 eps,
                      u32 moment count, per moment entry: u16 name length,
                      name, f32 m data, f32 v data (shapes from the table)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import AdamState

MAGIC = b"AVP1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], header: dict | None = None,
                    opt_state: AdamState | None = None) -> None:
    out = bytearray(MAGIC)
    hdr = json.dumps(header or {}, sort_keys=True).encode()
    out += struct.pack("<I", len(hdr)) + hdr
    out += struct.pack("<I", len(params))
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f4")
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    if opt_state is None:
        out += b"\x00"
    else:
        out += b"\x01" + struct.pack("<Iddd", opt_state.step, opt_state.beta1,
                                     opt_state.beta2, opt_state.eps)
        out += struct.pack("<I", len(opt_state.m))
        for name, m in opt_state.m.items():
            nb = name.encode()
            out += struct.pack("<H", len(nb)) + nb
            out += np.asarray(m, "<f4").tobytes() + np.asarray(opt_state.v[name], "<f4").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_shapes: dict[str, tuple] | None = None):
    """Return ``(params, header, opt_state_or_None)``.

    When ``expected_shapes`` is given the stored table must match it exactly
    (same names, same shapes).
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic, not an AVP1 checkpoint")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen).decode())
    (n,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(n):
        (nl,) = r.unpack("<H")
        name = r.take(nl).decode()
        (nd,) = r.unpack("<B")
        shape = r.unpack(f"<{nd}I") if nd else ()
        count = int(np.prod(shape)) if nd else 1
        params[name] = np.frombuffer(r.take(4 * count), "<f4").reshape(shape).astype(np.float32)
    opt = None
    (flag,) = r.unpack("<B")
    if flag:
        step, b1, b2, eps = r.unpack("<Iddd")
        opt = AdamState(step=step, beta1=b1, beta2=b2, eps=eps)
        (nm,) = r.unpack("<I")
        for _ in range(nm):
            (nl,) = r.unpack("<H")
            name = r.take(nl).decode()
            if name not in params:
                raise CheckpointError(f"optimizer state for unknown parameter {name!r}")
            shape = params[name].shape
            count = params[name].size
            opt.m[name] = np.frombuffer(r.take(4 * count), "<f4").reshape(shape).copy()
            opt.v[name] = np.frombuffer(r.take(4 * count), "<f4").reshape(shape).copy()
    if expected_shapes is not None:
        if set(expected_shapes) != set(params):
            missing = sorted(set(expected_shapes) - set(params))
            extra = sorted(set(params) - set(expected_shapes))
            raise CheckpointError(f"parameter names differ: missing={missing} unexpected={extra}")
        for name, shape in expected_shapes.items():
            if tuple(shape) != params[name].shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: stored {params[name].shape}, expected {tuple(shape)}"
                )
    return params, header, opt
