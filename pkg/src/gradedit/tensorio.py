"""Reader/writer for the GETF tensor file format.

Layout (all integers little-endian)::

    b"GETF"  version:u8=1  dtype:u8  ndim:u8  dims:u32*ndim  payload (row-major)

Only dtype 0 (float32) is defined.  Labels and other integer arrays are stored
as float32 too; every integer below 2**24 round-trips exactly.
"""

import struct
from pathlib import Path

import numpy as np
import torch

from .errors import BadMagicError, TruncatedFileError, UnsupportedVersionError

MAGIC = b"GETF"
VERSION = 1
DTYPE_FLOAT32 = 0

_HEADER = struct.Struct("<4sBBB")


def encode_tensor(tensor):
    arr = np.asarray(_as_numpy(tensor), dtype="<f4")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + arr.tobytes(order="C")


def decode_tensor(buf):
    buf = bytes(buf)
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"header needs {_HEADER.size} bytes, got {len(buf)}")
    magic, version, dtype, ndim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported GETF version {version}")
    if dtype != DTYPE_FLOAT32:
        raise UnsupportedVersionError(f"unsupported dtype code {dtype}")
    offset = _HEADER.size
    if len(buf) < offset + 4 * ndim:
        raise TruncatedFileError("file ends inside the dimension table")
    shape = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    count = int(np.prod(shape, dtype=np.int64))
    need = offset + 4 * count
    if len(buf) < need:
        raise TruncatedFileError(f"payload truncated: need {need} bytes, got {len(buf)}")
    if len(buf) > need:
        raise TruncatedFileError(f"{len(buf) - need} trailing bytes after payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape)
    return torch.from_numpy(arr.astype(np.float32, copy=True))


def save_tensor(tensor, path):
    Path(path).write_bytes(encode_tensor(tensor))


def load_tensor(path):
    return decode_tensor(Path(path).read_bytes())


def _as_numpy(tensor):
    if isinstance(tensor, torch.Tensor):
        return tensor.detach().cpu().to(torch.float32).numpy()
    return np.asarray(tensor, dtype=np.float32)
