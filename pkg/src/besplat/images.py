"""Image persistence: PFM (32-bit float, lossless) and PNG (8-bit, inspection).

In-memory images are float64 row-major with row 0 at the top; files
exchange 32-bit floats.  PFM stores rows bottom to top with a negative
scale marking little-endian data.  PNG output is sRGB-encoded and
clamped to [0, 1].
"""

from __future__ import annotations

import struct
import zlib

import numpy as np


def write_pfm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 3:
        header = b"PF"
    elif image.ndim == 2:
        header = b"Pf"
    else:
        raise ValueError(f"PFM supports (H, W) or (H, W, 3) images, got {image.shape}")
    data = np.flipud(image).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{image.shape[1]} {image.shape[0]}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(data.tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"not a PFM file: header {header!r}")
        width, height = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        endian = "<" if scale < 0 else ">"
        count = width * height * channels
        data = np.frombuffer(fh.read(count * 4), dtype=endian + "f4", count=count)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).copy()


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    c = np.clip(linear, 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(c, 1.0 / 2.4) - 0.055)


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload)))


def write_png(path, image: np.ndarray) -> None:
    """8-bit PNG of a linear [0, 1] image (gray or RGB), sRGB-encoded."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError(f"PNG supports (H, W), (H, W, 1) or (H, W, 3) images, got {image.shape}")
    data = np.round(srgb_encode(image) * 255.0).astype(np.uint8)
    h, w, c = data.shape
    color_type = 0 if c == 1 else 2
    raw = b"".join(b"\x00" + data[y].tobytes() for y in range(h))
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(_png_chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)))
        fh.write(_png_chunk(b"IDAT", zlib.compress(raw, 9)))
        fh.write(_png_chunk(b"IEND", b""))
