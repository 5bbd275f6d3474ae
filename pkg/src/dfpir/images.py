"""Binary PPM/PGM reading and writing; PNG through Pillow when available.

Images are float arrays in channel-first layout (3 x H x W) on a [0, 1] scale.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _read_netpbm(buf: bytes, path) -> np.ndarray:
    magic = buf[:2]
    if magic not in (b"P6", b"P5"):
        raise ImageFormatError(f"{path}: unsupported netpbm type {magic!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: malformed header")
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace byte before the raster
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    raster = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos) if len(buf) - pos >= n else None
    if raster is None:
        raise ImageFormatError(f"{path}: truncated raster")
    img = raster.reshape(height, width, channels).transpose(2, 0, 1)
    if channels == 1:
        img = np.repeat(img, 3, axis=0)
    return img.astype(np.float32) / 255.0


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read image {path}: {exc}") from exc
    if buf[:2] in (b"P6", b"P5"):
        return _read_netpbm(buf, path)
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover - Pillow is optional
            raise ImageFormatError("PNG input needs Pillow installed") from exc
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return arr.transpose(2, 0, 1).copy()
    raise ImageFormatError(f"{path}: not a PPM/PGM or PNG file")


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """img: 3 x H x W in [0, 1] (clamped)."""
    c, h, w = img.shape
    if c != 3:
        raise ImageFormatError(f"PPM needs 3 channels, got {c}")
    raster = to_uint8(img).transpose(1, 2, 0)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + raster.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """gray: H x W in [0, 1] (clamped)."""
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + to_uint8(gray).tobytes())


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(to_uint8(img).transpose(1, 2, 0)).save(path)
    else:
        write_ppm(path, img)


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0:
        return np.zeros_like(x, dtype=np.float64)
    return (x - lo) / (hi - lo)
