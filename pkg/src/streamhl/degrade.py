"""Quality-dropout transforms on 8-bit RGB rasters and the dropout scheduler.

All transforms are bit-exact given the input raster and the PRNG state:

* ``color_banding``         P -> floor(P / Q) * Q
* ``blackout``              all zeros
* ``block_noise``           B_s x B_s blocks replaced by one shared noise tile
* ``quality_degradation``   bilinear down to 64x64, nearest back up, 5x5 Gaussian blur

Interpolation conventions: bilinear uses half-pixel centres without corner
alignment (source coordinate clamped to the image); nearest-neighbour takes
``floor(dst * src_size / dst_size)``. The blur uses sigma = 1.1 (the value a
kernel-size-derived sigma gives for k = 5), a normalised separable kernel and
reflect-101 borders. Intermediate values stay in float64 and are rounded half
up once at the end.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .core import FormatError, Prng

MODES = ("none", "quality", "block_noise", "color_banding", "blackout")
DEGRADING_MODES = MODES[1:]
MILDER_MODES = ("quality", "color_banding")
MAX_BLACKOUT_RUN = 5


@dataclass(frozen=True)
class Raster:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        px = self.pixels
        if px.dtype != np.uint8 or px.shape != (self.height, self.width, 3):
            raise ValueError(f"pixels must be uint8 of shape ({self.height}, {self.width}, 3)")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Raster":
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        return cls(arr.shape[1], arr.shape[0], arr)

    def __eq__(self, other):
        return (isinstance(other, Raster) and self.width == other.width
                and self.height == other.height and np.array_equal(self.pixels, other.pixels))


# ---------------------------------------------------------------------------
# PPM (P6) codec


def write_ppm(path: str | os.PathLike, raster: Raster):
    with open(path, "wb") as fh:
        fh.write(f"P6\n{raster.width} {raster.height}\n255\n".encode("ascii"))
        fh.write(raster.pixels.tobytes())


def _ppm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # one whitespace byte separates header and raster


def read_ppm(path: str | os.PathLike) -> Raster:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _ppm_tokens(data, 4)
    if tokens[0] != b"P6":
        raise FormatError("not a binary PPM (P6) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("malformed PPM header") from exc
    if maxval != 255:
        raise FormatError("only 8-bit PPM is supported")
    body = data[offset:offset + w * h * 3]
    if len(body) != w * h * 3:
        raise FormatError("truncated PPM raster")
    return Raster(w, h, np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy())


# ---------------------------------------------------------------------------
# transforms


def color_banding(frame: Raster, q: int = 64) -> Raster:
    if q <= 0:
        raise ValueError("quantisation factor must be positive")
    px = (frame.pixels.astype(np.int32) // q) * q
    return Raster(frame.width, frame.height, px.astype(np.uint8))


def blackout(frame: Raster) -> Raster:
    return Raster(frame.width, frame.height, np.zeros_like(frame.pixels))


def block_noise(frame: Raster, rng: Prng, block: int = 32, p: float = 0.1, r_max: int = 49) -> Raster:
    """Replace each block with a shared noise tile with probability ``p``.

    Draw order: the B_s*B_s*3 tile (row, column, channel; integers in
    [0, r_max]), then one uniform per block in row-major block order.
    Edge blocks use the top-left crop of the tile.
    """
    if block <= 0:
        raise ValueError("block size must be positive")
    tile = np.array([rng.randint(r_max + 1) for _ in range(block * block * 3)],
                    dtype=np.uint8).reshape(block, block, 3)
    px = frame.pixels.copy()
    for by in range(0, frame.height, block):
        for bx in range(0, frame.width, block):
            if rng.uniform() < p:
                h = min(block, frame.height - by)
                w = min(block, frame.width - bx)
                px[by:by + h, bx:bx + w] = tile[:h, :w]
    return Raster(frame.width, frame.height, px)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling of an (H, W, C) float array."""
    in_h, in_w = img.shape[:2]

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(out_h, in_h)
    x0, x1, fx = axis(out_w, in_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = img.shape[:2]
    ys = (np.arange(out_h) * in_h) // out_h
    xs = (np.arange(out_w) * in_w) // out_w
    return img[ys][:, xs]


def gaussian_kernel(size: int = 5, sigma: float = 1.1) -> np.ndarray:
    """Normalised 1-D Gaussian taps."""
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, size: int = 5, sigma: float = 1.1) -> np.ndarray:
    k = gaussian_kernel(size, sigma)
    r = size // 2
    pad = np.pad(img, ((r, r), (r, r), (0, 0)), mode="reflect")
    h, w = img.shape[:2]
    rows = sum(k[j] * pad[:, j:j + w] for j in range(size))
    return sum(k[j] * rows[j:j + h] for j in range(size))


def quality_degradation(frame: Raster, low: int = 64, size: int = 5, sigma: float = 1.1) -> Raster:
    if frame.width < low or frame.height < low:
        raise ValueError(f"frame must be at least {low}x{low}, got {frame.width}x{frame.height}")
    img = frame.pixels.astype(np.float64)
    small = bilinear_resize(img, low, low)
    big = nearest_resize(small, frame.height, frame.width)
    out = gaussian_blur(big, size, sigma)
    return Raster(frame.width, frame.height, np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def apply_mode(frame: Raster, mode: str, rng: Prng) -> Raster:
    if mode == "none":
        return frame
    if mode == "quality":
        return quality_degradation(frame)
    if mode == "block_noise":
        return block_noise(frame, rng)
    if mode == "color_banding":
        return color_banding(frame)
    if mode == "blackout":
        return blackout(frame)
    raise ValueError(f"unknown degradation mode {mode!r}")


# ---------------------------------------------------------------------------
# scheduling


@dataclass(frozen=True)
class DropoutPlan:
    modes: tuple[str, ...]

    @property
    def mask(self) -> np.ndarray:
        return np.array([m != "none" for m in self.modes], dtype=bool)

    def mask_line(self) -> str:
        return "".join("1" if m else "0" for m in self.mask)

    def blackout_runs(self) -> list[int]:
        runs, cur = [], 0
        for m in self.modes:
            if m == "blackout":
                cur += 1
            elif cur:
                runs.append(cur)
                cur = 0
        if cur:
            runs.append(cur)
        return runs


def degraded_count_bounds(T: int) -> tuple[int, int]:
    lo = max(1, math.ceil(0.05 * T))
    return lo, max(lo, math.floor(0.20 * T))


def _composition(total: int, parts: int, rng: Prng, positive: bool) -> list[int]:
    """Random split of ``total`` into ``parts`` integers (>=1 if positive, else >=0)."""
    if positive:
        return [x + 1 for x in _composition(total - parts, parts, rng, positive=False)]
    slots = total + parts - 1
    bars = sorted(_sample_distinct(slots, parts - 1, rng))
    out, prev = [], -1
    for b in bars:
        out.append(b - prev - 1)
        prev = b
    out.append(slots - prev - 1)
    return out


def _sample_distinct(n: int, k: int, rng: Prng) -> list[int]:
    """k distinct integers from range(n) by a partial Fisher-Yates shuffle."""
    pool = list(range(n))
    for i in range(k):
        j = i + rng.randint(n - i)
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k]


def plan_dropout(T: int, rng: Prng, max_segments: int = 4) -> DropoutPlan:
    """Pick 5-20% of the frames in contiguous segments and assign modes.

    Each segment gets one mode drawn uniformly. Blackout runs longer than
    five frames have the sixth frame downgraded to a milder mode, after which
    blackout resumes.
    """
    if T < 1:
        raise ValueError("video length must be >= 1")
    lo, hi = degraded_count_bounds(T)
    hi = min(hi, T)
    k = lo + rng.randint(hi - lo + 1)
    m = 1 + rng.randint(min(k, max_segments))
    lengths = _composition(k, m, rng, positive=True)
    gaps = _composition(T - k, m + 1, rng, positive=False)
    modes = ["none"] * T
    pos = 0
    for seg_len, gap in zip(lengths, gaps):
        pos += gap
        mode = DEGRADING_MODES[rng.randint(len(DEGRADING_MODES))]
        for t in range(pos, pos + seg_len):
            modes[t] = mode
        pos += seg_len
    run = 0
    for t, mode in enumerate(modes):
        if mode != "blackout":
            run = 0
            continue
        if run == MAX_BLACKOUT_RUN:
            modes[t] = MILDER_MODES[rng.randint(len(MILDER_MODES))]
            run = 0
        else:
            run += 1
    return DropoutPlan(tuple(modes))
