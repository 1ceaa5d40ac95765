"""Named-tensor archive.

Layout (little endian)::

    b"NTAR" u32 version u32 meta_len meta_json u32 count
    count x [u16 name_len, name, u8 dtype, u8 ndim, ndim x u32 dim, u64 nbytes, data]
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np
import torch

from .errors import InvalidArgument

MAGIC = b"NTAR"
VERSION = 1
_DTYPES = {1: "<f4", 2: "<f8", 3: "<i8", 4: "<i4", 5: "|u1", 6: "|b1"}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


def save_archive(path, tensors: Mapping[str, object], meta: dict | None = None) -> Path:
    path = Path(path)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.asarray(value)
        le = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = np.require(arr.astype(le, copy=False), requirements="C")  # keeps 0-d shape
        code = _CODES.get(arr.dtype.str)
        if code is None:
            raise InvalidArgument(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        chunks += [struct.pack("<H", len(raw)), raw, struct.pack("<BB", code, arr.ndim),
                   struct.pack(f"<{arr.ndim}I", *arr.shape), struct.pack("<Q", arr.nbytes),
                   arr.tobytes()]
    path.write_bytes(b"".join(chunks))
    return path


def load_archive(path) -> Tuple[Dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise InvalidArgument(f"{path}: not a named-tensor archive")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise InvalidArgument(f"{path}: unsupported archive version {version}")
    off = 12
    meta = json.loads(data[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode()
        off += n
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", data, off)
        off += 8
        arr = np.frombuffer(data[off:off + nbytes], dtype=_DTYPES[code]).reshape(shape)
        tensors[name] = arr.copy()
        off += nbytes
    return tensors, meta


def state_dict_to_arrays(module: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_into(module: torch.nn.Module, tensors: Mapping[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.array(v)) for k, v in tensors.items()}
    module.load_state_dict(state, strict=True)
