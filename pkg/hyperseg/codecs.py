"""Binary file formats: UHRT/UHRD tensor dumps and 8-bit netpbm images.

Netpbm pixels go through Pillow's PPM plugin; only binary P5/P6 with
maxval 255 is accepted.

UHRT layout: magic ``UHRT``, little-endian u32 rank, rank x u32 dims, then
the values as little-endian f32. UHRD is identical with magic ``UHRD`` and f64
values; checkpoints use it so that a resumed run continues bit-exactly.
"""

import io
import struct
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from .errors import ParseError

PathLike = Union[str, Path]

_DUMP_DTYPES = {b"UHRT": np.dtype("<f4"), b"UHRD": np.dtype("<f8")}


def encode_tensor(array: np.ndarray, magic: bytes = b"UHRT") -> bytes:
    if magic not in _DUMP_DTYPES:
        raise ValueError(f"unknown tensor dump magic {magic!r}")
    array = np.asarray(array, dtype=np.float64)
    header = magic + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.astype(_DUMP_DTYPES[magic]).tobytes(order="C")


def decode_tensor(blob: bytes, path: str = "<bytes>") -> np.ndarray:
    if len(blob) < 8:
        raise ParseError("truncated tensor header", path, len(blob))
    magic = blob[:4]
    if magic not in _DUMP_DTYPES:
        raise ParseError(f"bad magic {magic!r}, expected UHRT or UHRD", path, 0)
    (rank,) = struct.unpack_from("<I", blob, 4)
    dims_end = 8 + 4 * rank
    if len(blob) < dims_end:
        raise ParseError(f"truncated dimension list for rank {rank}", path, len(blob))
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    dtype = _DUMP_DTYPES[magic]
    expected = dims_end + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) != expected:
        raise ParseError(f"payload size mismatch: expected {expected} bytes, found {len(blob)}",
                         path, min(len(blob), expected))
    values = np.frombuffer(blob, dtype=dtype, offset=dims_end)
    return values.astype(np.float64).reshape(dims)


def write_tensor(path: PathLike, array: np.ndarray, magic: bytes = b"UHRT") -> None:
    Path(path).write_bytes(encode_tensor(array, magic))


def read_tensor(path: PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), str(path))


NETPBM_MAGIC = {"L": b"P5", "RGB": b"P6"}


def _as_image(pixels: np.ndarray) -> Image.Image:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ValueError(f"netpbm encoder needs uint8 pixels, got {pixels.dtype}")
    if not (pixels.ndim == 2 or (pixels.ndim == 3 and pixels.shape[2] == 3)):
        raise ValueError(f"netpbm encoder needs H x W or H x W x 3, got {pixels.shape}")
    return Image.fromarray(np.ascontiguousarray(pixels))


def encode_netpbm(pixels: np.ndarray) -> bytes:
    """Encode H x W (P5) or H x W x 3 (P6) uint8 pixels."""
    buffer = io.BytesIO()
    _as_image(pixels).save(buffer, format="PPM")
    return buffer.getvalue()


def decode_netpbm(blob: bytes, path: str = "<bytes>") -> np.ndarray:
    """Decode binary P5/P6 with maxval 255 into uint8 H x W or H x W x 3."""
    if blob[:2] not in NETPBM_MAGIC.values():
        raise ParseError(f"bad magic {blob[:2]!r}, expected P5 or P6", path, 0)
    try:
        image = Image.open(io.BytesIO(blob), formats=["PPM"])
    except (OSError, ValueError, SyntaxError) as e:
        raise ParseError(f"unreadable header: {e}", path, 2)
    with image:
        raster = image.tile[0][2] if image.tile else len(blob)
        if image.mode not in NETPBM_MAGIC:
            raise ParseError(f"only maxval 255 is supported, found mode {image.mode}", path, raster)
        try:
            image.load()
        except (OSError, ValueError) as e:
            raise ParseError(f"short raster: {e}", path, len(blob))
        return np.array(image, dtype=np.uint8)


def write_netpbm(path: PathLike, pixels: np.ndarray) -> None:
    _as_image(pixels).save(Path(path), format="PPM")


def read_netpbm(path: PathLike) -> np.ndarray:
    return decode_netpbm(Path(path).read_bytes(), str(path))


def to_bytes_image(values: np.ndarray) -> np.ndarray:
    """Map [0,1] values to uint8 with round-half-up; C x H x W becomes H x W (x 3)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        values = values[0] if values.shape[0] == 1 else np.transpose(values, (1, 2, 0))
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def from_bytes_image(pixels: np.ndarray) -> np.ndarray:
    """Inverse of ``to_bytes_image``: uint8 pixels to C x H x W floats in [0,1]."""
    values = pixels.astype(np.float64) / 255.0
    if values.ndim == 2:
        return values[None]
    return np.transpose(values, (2, 0, 1))
