"""LTR1 tensor container plus 8-bit PGM/PPM image helpers.

LTR1 layout (all little-endian)::

    bytes 0-3   magic  b"LTR1"
    byte  4     dtype code (1 = float32)
    byte  5     rank r
    4*r bytes   shape, uint32 each
    payload     row-major float32
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np
from PIL import Image

from .core import LatentTensor
from .errors import CorruptionError, FormatError

MAGIC = b"LTR1"
DTYPE_FLOAT32 = 1
MAX_RANK = 8


def tensor_to_bytes(t) -> bytes:
    arr = t.data if isinstance(t, LatentTensor) else t
    arr = np.array(arr, dtype="<f4", order="C")
    if arr.ndim > MAX_RANK:
        raise FormatError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
    header = MAGIC + struct.pack("<BB", DTYPE_FLOAT32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    dtype_code, rank = struct.unpack_from("<BB", buf, 4)
    if dtype_code != DTYPE_FLOAT32:
        raise FormatError(f"unsupported dtype code {dtype_code}")
    if rank > MAX_RANK:
        raise FormatError(f"rank {rank} exceeds maximum {MAX_RANK}")
    offset = 6 + 4 * rank
    if len(buf) < offset:
        raise CorruptionError("truncated shape header")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    count = int(np.prod(shape, dtype=np.int64))
    payload = len(buf) - offset
    if payload != 4 * count:
        raise CorruptionError(
            f"header declares {count} floats but payload holds {payload / 4:g}"
        )
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    return arr.reshape(shape).astype(np.float32)


def save_tensor(t, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


# -- images -----------------------------------------------------------------
# Float images live in [0, 1]; 255 <-> 1.0 linearly.

def to_uint8(img) -> np.ndarray:
    a = np.asarray(img)
    if a.dtype == np.uint8:
        return a
    return np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def mask_to_bytes(mask) -> bytes:
    data = getattr(mask, "data", mask)
    buf = io.BytesIO()
    Image.fromarray(to_uint8(data)).save(buf, format="PPM")
    return buf.getvalue()


def image_to_bytes(img) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="PPM")
    return buf.getvalue()


def save_pgm(mask, path) -> None:
    with open(path, "wb") as fh:
        fh.write(mask_to_bytes(mask))


def save_ppm(img, path) -> None:
    with open(path, "wb") as fh:
        fh.write(image_to_bytes(img))


def _open_netpbm(source) -> Image.Image:
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    try:
        im = Image.open(source)
        im.load()
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"not a readable PGM/PPM image: {exc}") from exc
    return im


def load_pgm(source) -> np.ndarray:
    """Grayscale image as float32 in [0, 1]."""
    im = _open_netpbm(source)
    if im.mode != "L":
        im = im.convert("L")
    return np.asarray(im, dtype=np.float32) / 255.0


def load_ppm(source) -> np.ndarray:
    """RGB image as float32 (H, W, 3) in [0, 1]."""
    im = _open_netpbm(source)
    if im.mode != "RGB":
        im = im.convert("RGB")
    return np.asarray(im, dtype=np.float32) / 255.0
