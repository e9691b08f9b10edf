"""Binary PGM (P5) / PPM (P6) images and the TNSR tensor file format.

TNSR v1 layout (all little-endian)::

    b"TNSR"  u8 version=1  u8 dtype (0=f32, 1=f64, 2=u8)  u8 rank
    rank x u32 dims
    row-major payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import DTYPE_CODES, DTYPES, Tensor, dtype_name

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1
_CODE_TO_DTYPE = {v: k for k, v in DTYPE_CODES.items()}
_LE = {"f32": "<f4", "f64": "<f8", "u8": "u1"}


# ---------------------------------------------------------------------------
# TNSR


def tnsr_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    name = dtype_name(arr.dtype)
    head = TNSR_MAGIC + bytes([TNSR_VERSION, DTYPE_CODES[name], arr.ndim])
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_LE[name]).tobytes()


def tnsr_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one TNSR record starting at ``offset``; returns (array, end offset)."""
    if buf[offset : offset + 4] != TNSR_MAGIC:
        raise FormatError("bad TNSR magic", offset)
    if len(buf) < offset + 7:
        raise FormatError("truncated TNSR header", len(buf))
    version, code, rank = buf[offset + 4], buf[offset + 5], buf[offset + 6]
    if version != TNSR_VERSION:
        raise FormatError(f"unsupported TNSR version {version}", offset + 4)
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown TNSR dtype code {code}", offset + 5)
    pos = offset + 7
    if len(buf) < pos + 4 * rank:
        raise FormatError("truncated TNSR dims", len(buf))
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    if any(d < 1 for d in dims):
        raise FormatError(f"TNSR dims must be >= 1, got {dims}", pos - 4 * rank)
    name = _CODE_TO_DTYPE[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * DTYPES[name].itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated TNSR payload: need {nbytes} bytes", len(buf))
    arr = np.frombuffer(buf, dtype=_LE[name], count=nbytes // DTYPES[name].itemsize, offset=pos)
    arr = arr.astype(DTYPES[name]).reshape(dims)
    return arr, pos + nbytes


def write_tnsr(path, t) -> None:
    Path(path).write_bytes(tnsr_bytes(t))


def read_tnsr(path) -> Tensor:
    buf = Path(path).read_bytes()
    arr, end = tnsr_from_bytes(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after TNSR payload", end)
    return Tensor(arr)


# ---------------------------------------------------------------------------
# Netpbm


def pnm_bytes(img) -> bytes:
    """Encode ``[H, W]`` / ``[H, W, 1]`` as P5, ``[H, W, 3]`` as P6."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        raise FormatError(f"PNM images must be uint8, got {a.dtype}")
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"cannot store shape {list(a.shape)} as PGM/PPM")
    h, w = a.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(a).tobytes()


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PNM header", pos)
    return buf[start:pos], pos


def pnm_from_bytes(buf: bytes) -> np.ndarray:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"not a binary PGM/PPM (magic {magic!r})", 0)
    pos = 2
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"bad PNM header field {tok!r}", start)
        fields.append(int(tok))
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise FormatError(f"bad PNM size {w}x{h}", 2)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", pos)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after PNM header", pos)
    pos += 1
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    if len(buf) - pos < need:
        raise FormatError(f"truncated PNM payload: need {need} bytes, have {len(buf) - pos}", len(buf))
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).copy()
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


def write_pnm(path, img) -> None:
    Path(path).write_bytes(pnm_bytes(img))


def read_pnm(path) -> np.ndarray:
    return pnm_from_bytes(Path(path).read_bytes())


write_pgm = write_ppm = write_pnm
read_pgm = read_ppm = read_pnm
