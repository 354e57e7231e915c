"""LMW weight container.

Layout: the 4-byte magic ``LMW1``, a little-endian u64 header length, a
UTF-8 JSON header and then the raw little-endian tensor blobs in table
order. The header holds ``version``, ``config``, ``fused``, ``dtype`` and a
``tensors`` table mapping each name to its shape, byte offset (relative to
the start of the blob section) and byte length.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict

import numpy as np

from .errors import ContainerError, NonFiniteError

MAGIC = b"LMW1"
VERSION = 1
_LEN = struct.Struct("<Q")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _dtype_name(dt) -> str:
    dt = np.dtype(dt)
    for name, d in _DTYPES.items():
        if d == dt.newbyteorder("<"):
            return name
    raise ContainerError(f"unsupported dtype {dt}")


def encode(state: "OrderedDict[str, np.ndarray]", config: dict, fused: bool, dtype) -> bytes:
    """Serialize a state dict plus metadata to container bytes."""
    name = _dtype_name(dtype)
    le = _DTYPES[name]
    table = OrderedDict()
    blobs = []
    offset = 0
    for key, arr in state.items():
        a = np.ascontiguousarray(arr, dtype=le)
        if not np.isfinite(a).all():
            raise NonFiniteError(f"tensor {key!r} has non-finite values")
        raw = a.tobytes()
        table[key] = {"shape": list(a.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = {"version": VERSION, "config": config, "fused": bool(fused), "dtype": name, "tensors": table}
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, _LEN.pack(len(hbytes)), hbytes, *blobs])


def decode(buf: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    """Parse container bytes into ``(header, state)``; raises ContainerError."""
    if len(buf) < 12:
        raise ContainerError("truncated container: missing header")
    if buf[:4] != MAGIC:
        raise ContainerError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (hlen,) = _LEN.unpack_from(buf, 4)
    if 12 + hlen > len(buf):
        raise ContainerError(f"truncated container: header length {hlen} exceeds file size")
    try:
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupted header: {exc}") from None
    if not isinstance(header, dict):
        raise ContainerError("corrupted header: not a JSON object")
    missing = {"version", "config", "fused", "dtype", "tensors"} - set(header)
    if missing:
        raise ContainerError(f"corrupted header: missing fields {sorted(missing)}")
    if header["version"] != VERSION:
        raise ContainerError(f"unsupported container version {header['version']}")
    if header["dtype"] not in _DTYPES:
        raise ContainerError(f"unsupported dtype {header['dtype']!r}")
    dt = _DTYPES[header["dtype"]]
    body = memoryview(buf)[12 + hlen :]
    state = OrderedDict()
    expected = 0
    for key, ent in header["tensors"].items():
        try:
            shape = tuple(int(s) for s in ent["shape"])
            off, nb = int(ent["offset"]), int(ent["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise ContainerError(f"corrupted table entry for {key!r}") from None
        if off != expected or nb != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise ContainerError(f"inconsistent table entry for {key!r}")
        if off + nb > len(body):
            raise ContainerError(f"truncated container: tensor {key!r} runs past end of file")
        state[key] = np.frombuffer(body[off : off + nb], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        expected = off + nb
    if expected != len(body):
        raise ContainerError(f"{len(body) - expected} trailing bytes after last tensor")
    return header, state


def save_weights(model, path) -> None:
    """Write ``model`` (config, fused flag, dtype and all tensors) to ``path``."""
    data = encode(model.state_dict(), model.config.to_dict(), model.fused, model.dtype)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def load_weights(path, config=None):
    """Rebuild the model stored at ``path``.

    If ``config`` is given it overrides the stored one, and any tensor whose
    shape disagrees raises a ShapeError naming that tensor.
    """
    from .model import LmNet, LmNetConfig

    header, state = read_container(path)
    if config is None:
        try:
            config = LmNetConfig.from_dict(header["config"])
        except (TypeError, ValueError) as exc:
            raise ContainerError(f"invalid model config in header: {exc}") from None
    model = LmNet(config, fused=header["fused"], rng=0).to(_DTYPES[header["dtype"]])
    model.load_state_dict(state)
    return model.eval()
