"""Binary checkpoint format for model parameters.

Layout (little-endian)::

    magic        8 bytes  b"HIGINECK"
    version      u32
    config hash  64 bytes ascii sha256 hex of the canonical config JSON
    config       u32 length + utf-8 JSON
    n_params     u32
    per param    u16 name length, name, u8 ndim, u32 dims..., float32 data
    adam flag    u8; if 1: u32 step, 5 x f64 (lr, beta1, beta2, eps, wd),
                 then float32 first and second moments per param in order
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .autodiff import AdamState
from .errors import DataError

MAGIC = b"HIGINECK"
VERSION = 1


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_array(f, a):
    a = np.asarray(a, dtype="<f4")
    f.write(struct.pack("<B", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(a.tobytes(order="C"))


def _read_array(f):
    (ndim,) = struct.unpack("<B", f.read(1))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    return np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape).astype(np.float64)


def save_checkpoint(path, params, config, adam=None):
    """``params`` maps names to arrays (or Tensors); ``config`` is a JSON-able dict."""
    arrays = {k: getattr(v, "value", v) for k, v in params.items()}
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(config_hash(config).encode("ascii"))
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(arrays)))
        for name, a in arrays.items():
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            _write_array(f, a)
        if adam is None or not adam.m:
            f.write(struct.pack("<B", 0))
            return
        f.write(struct.pack("<B", 1))
        f.write(struct.pack("<I", adam.step))
        f.write(struct.pack("<5d", adam.lr, adam.beta1, adam.beta2, adam.epsilon, adam.weight_decay))
        for m in adam.m:
            _write_array(f, m)
        for v in adam.v:
            _write_array(f, v)


def load_checkpoint(path, expected_config=None):
    """Return ``(params, config, adam_state_or_None)``.

    With ``expected_config`` the stored hash must match.
    """
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        stored_hash = f.read(64).decode("ascii")
        (n,) = struct.unpack("<I", f.read(4))
        config = json.loads(f.read(n).decode())
        if config_hash(config) != stored_hash:
            raise DataError(f"{path}: config block does not match its hash")
        if expected_config is not None and config_hash(expected_config) != stored_hash:
            raise DataError(f"{path}: checkpoint was written for a different model config")
        (count,) = struct.unpack("<I", f.read(4))
        params = {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", f.read(2))
            name = f.read(ln).decode()
            params[name] = _read_array(f)
        (flag,) = struct.unpack("<B", f.read(1))
        adam = None
        if flag:
            (step,) = struct.unpack("<I", f.read(4))
            lr, b1, b2, eps, wd = struct.unpack("<5d", f.read(40))
            m = [_read_array(f) for _ in range(count)]
            v = [_read_array(f) for _ in range(count)]
            adam = AdamState(lr, b1, b2, eps, wd, step, m, v)
    return params, config, adam
