"""Binary PPM (P6) reading/writing and tiled image grids."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np


class PPMError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out, pos, n = [], 0, len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PPMError("PPM header ended early")
        out.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not data[pos : pos + 1].isspace():
        raise PPMError("PPM header not terminated by whitespace")
    return out, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    """Decode a P6 image with maxval 255 into a (3, H, W) float32 array in [0, 1]."""
    if data[:2] != b"P6":
        raise PPMError(f"not a binary PPM (magic {data[:2]!r})")
    toks, pos = _tokens(data[2:], 3)
    try:
        w, h, maxval = (int(t) for t in toks)
    except ValueError as exc:
        raise PPMError(f"malformed PPM header {toks}") from exc
    if w <= 0 or h <= 0:
        raise PPMError(f"bad PPM dimensions {w}x{h}")
    if maxval != 255:
        raise PPMError(f"unsupported PPM maxval {maxval} (only 255)")
    raster = data[2 + pos : 2 + pos + 3 * w * h]
    if len(raster) != 3 * w * h:
        raise PPMError(f"PPM raster short: {len(raster)} of {3 * w * h} bytes")
    px = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float32) / 255.0


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    """Encode a (C, H, W) image in [0, 1]; single-channel images are replicated to RGB."""
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise PPMError(f"expected (1|3, H, W) image, got {img.shape}")
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    px = to_u8(img).transpose(1, 2, 0)
    h, w = px.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def write_ppm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def minmax(img: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; constant images map to 0.5 gray."""
    lo, hi = float(img.min()), float(img.max())
    if hi - lo <= 0:
        return np.full_like(img, 0.5)
    return (img - lo) / (hi - lo)


def upscale(img: np.ndarray, scale: int) -> np.ndarray:
    if scale <= 1:
        return img
    return img.repeat(scale, axis=-2).repeat(scale, axis=-1)


MARKER = (1.0, 0.0, 0.0)


def tile(images, ncols: int | None = None, sep: int = 1, sep_value: float = 1.0,
         marked=None) -> np.ndarray:
    """Tile (C, h, w) images row-major into a grid with ``sep``-pixel separators.

    Tiles smaller than the largest one are placed top-left; the unused area
    is filled with :data:`MARKER` red when ``marked[k]`` is set, else gray.
    """
    images = list(images)
    if not images:
        raise ValueError("no images to tile")
    k = len(images)
    ncols = ncols or math.ceil(math.sqrt(k))
    nrows = math.ceil(k / ncols)
    c = images[0].shape[0]
    th = max(im.shape[1] for im in images)
    tw = max(im.shape[2] for im in images)
    grid = np.full((c, nrows * th + (nrows + 1) * sep, ncols * tw + (ncols + 1) * sep), sep_value, np.float32)
    for idx, im in enumerate(images):
        r, q = divmod(idx, ncols)
        y = sep + r * (th + sep)
        x = sep + q * (tw + sep)
        fill = np.array(MARKER[:c] if (marked is not None and marked[idx]) else [0.5] * c, np.float32)
        grid[:, y : y + th, x : x + tw] = fill[:, None, None]
        grid[:, y : y + im.shape[1], x : x + im.shape[2]] = im
    return grid
