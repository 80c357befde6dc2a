"""Binary weight files.

Layout (all integers little-endian):

    magic   4 bytes  b"KOAW"
    version u32      currently 1
    count   u32      number of entries
    entry := name_len u16, name utf-8 bytes,
             dtype u8 (0 = float32, 1 = float64),
             rank u8, dims rank * u32,
             payload prod(dims) * itemsize bytes, little-endian

Entries are the model's parameters in creation order followed by the
batchnorm running statistics. Loading stages the whole file first and
applies nothing until every entry has been matched against the target
model, so a failed load leaves the model untouched.
"""

from __future__ import annotations

import struct

import numpy as np

from . import models
from .errors import WeightFormatError, WeightShapeError, WeightTruncationError

MAGIC = b"KOAW"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_weights(model, path) -> None:
    entries = models.state_entries(model)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise WeightFormatError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).astype(_CODE_DTYPES[code], copy=False).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def read_entries(path) -> dict[str, np.ndarray]:
    """Parse a weight file into {name: array} without needing a model."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 12:
        if buf[:4] != MAGIC:
            raise WeightFormatError(f"{path}: bad magic {buf[:4]!r}")
        raise WeightTruncationError(f"{path}: file ends inside the header")
    if buf[:4] != MAGIC:
        raise WeightFormatError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}")
    pos = 12
    entries: dict[str, np.ndarray] = {}

    def need(nbytes: int, what: str) -> None:
        if pos + nbytes > len(buf):
            raise WeightTruncationError(
                f"{path}: file ends inside {what} (need {nbytes} bytes at "
                f"offset {pos}, have {len(buf) - pos})"
            )

    for i in range(count):
        need(2, f"entry {i} name length")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(name_len, f"entry {i} name")
        try:
            name = buf[pos:pos + name_len].decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFormatError(f"{path}: entry {i} name is not valid utf-8") from None
        pos += name_len
        if name in entries:
            raise WeightFormatError(f"{path}: duplicate entry {name!r}")
        need(2, f"{name} dtype/rank")
        code, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in _CODE_DTYPES:
            raise WeightFormatError(f"{path}: {name} has unknown dtype code {code}")
        need(4 * rank, f"{name} dims")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes, f"{name} payload")
        arr = np.frombuffer(buf, dtype=dt, count=int(np.prod(dims, dtype=np.int64)),
                            offset=pos).reshape(dims)
        pos += nbytes
        entries[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    if pos != len(buf):
        raise WeightFormatError(f"{path}: {len(buf) - pos} trailing bytes after last entry")
    return entries


def load_weights(path, model) -> None:
    """Load a weight file into a model; all-or-nothing.

    The file must carry exactly the model's entries with matching shapes
    and dtypes; the first mismatch is reported by name and nothing is
    written to the model until everything checks out.
    """
    staged = read_entries(path)
    targets = models.state_entries(model)
    for name, target in targets.items():
        if name not in staged:
            raise WeightShapeError(f"{path}: missing entry {name!r}")
        got = staged[name]
        if got.shape != target.shape:
            raise WeightShapeError(
                f"{path}: {name} has shape {got.shape}, model expects {target.shape}"
            )
        if got.dtype != target.dtype:
            raise WeightShapeError(
                f"{path}: {name} has dtype {got.dtype}, model expects {target.dtype}"
            )
    for name in staged:
        if name not in targets:
            raise WeightShapeError(f"{path}: unexpected entry {name!r}")
    for name, target in targets.items():
        target[:] = staged[name]
