"""Binary PGM (P5) image files.

Radiographs and crops are stored as plain PGM so every stage of the
pipeline can be inspected with standard image tools. Reading returns
float32 in [0, 1] (pixel / maxval); writing quantizes [0, 1] data to the
requested bit depth. 16-bit payloads are big-endian, as the format
prescribes.
"""

from __future__ import annotations

import numpy as np

from .errors import ParseError


def _read_tokens(buf: bytes, count: int, start: int) -> tuple[list[bytes], int]:
    """Pull whitespace-separated header tokens, skipping # comments."""
    tokens: list[bytes] = []
    i = start
    n = len(buf)
    while len(tokens) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < n and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise ParseError(f"PGM header ended early, got {len(tokens)} of {count} fields")
        tokens.append(buf[i:j])
        i = j
    return tokens, i


def read_pgm(path) -> np.ndarray:
    """Load a P5 file as float32 in [0, 1]."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:2] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (magic {buf[:2]!r})")
    try:
        tokens, pos = _read_tokens(buf, 3, 2)
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise ParseError(f"{path}: bad PGM header field: {e}") from None
    if width <= 0 or height <= 0:
        raise ParseError(f"{path}: bad PGM dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise ParseError(f"{path}: bad PGM maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = width * height * dtype.itemsize
    raw = buf[pos:pos + need]
    if len(raw) < need:
        raise ParseError(f"{path}: PGM payload truncated, {len(raw)} of {need} bytes")
    img = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    return (img.astype(np.float32) / maxval).clip(0.0, 1.0)


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Store a 2-D float array in [0, 1] as P5 with the given maxval."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ParseError(f"PGM images are 2-D, got shape {img.shape}")
    if not 0 < maxval < 65536:
        raise ParseError(f"bad PGM maxval {maxval}")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    data = q.astype(">u2" if maxval > 255 else np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(data.tobytes())
