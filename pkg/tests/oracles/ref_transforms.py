"""Per-pixel reference for the searchable transforms, written with plain Python loops.

It shares no code with ``selfaugment.imageops``; only the documented conventions
are common: parameters interpolate linearly between the table's min and max,
affine warps sample bilinearly about the image centre with out-of-bounds taps
reading 0.5, the 8-bit ops work on round(v * 255), and cutout zero-fills a square
centred on (rng.integers(h), rng.integers(w)).
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

TABLE = {
    "shearX": ("-0.3", "0.3"),
    "shearY": ("-0.3", "0.3"),
    "translateX": ("-0.45", "0.45"),
    "translateY": ("-0.45", "0.45"),
    "rotate": ("-30.0", "30.0"),
    "autoContrast": ("0.0", "1.0"),
    "invert": ("0.0", "1.0"),
    "solarize": ("0.0", "256.0"),
    "posterize": ("4.0", "8.0"),
    "contrast": ("0.1", "1.9"),
    "color": ("0.1", "1.9"),
    "brightness": ("0.1", "1.9"),
    "sharpness": ("0.1", "1.9"),
    "cutout": ("0.0", "0.2"),
    "equalize": ("0.0", "1.0"),
}
INTEGER_OPS = {"solarize", "posterize"}
GEOMETRIC_OPS = {"shearX", "shearY", "translateX", "translateY", "rotate"}
FILL = 0.5


def ref_param(op: str, lam: float) -> float:
    """Table endpoints are kept as exact decimals; the interpolant is rounded once at the end."""
    lo, hi = (Fraction(v) for v in TABLE[op])
    v = lo + Fraction(lam) * (hi - lo)
    if op in INTEGER_OPS:
        return float(math.floor(v + Fraction(1, 2)))
    return float(v)


def _clip(v: float) -> float:
    return 0.0 if v < 0.0 else 1.0 if v > 1.0 else v


def _byte(v: float) -> int:
    b = int(math.floor(v * 255.0 + 0.5))
    return max(0, min(255, b))


def _pixel(img, c, y, x):
    h, w = len(img[0]), len(img[0][0])
    if 0 <= y < h and 0 <= x < w:
        return img[c][y][x]
    return FILL


def _bilinear(img, c, sy, sx):
    x0, y0 = math.floor(sx), math.floor(sy)
    ax, ay = sx - x0, sy - y0
    top = _pixel(img, c, y0, x0) * (1.0 - ax) + _pixel(img, c, y0, x0 + 1) * ax
    bot = _pixel(img, c, y0 + 1, x0) * (1.0 - ax) + _pixel(img, c, y0 + 1, x0 + 1) * ax
    return top * (1.0 - ay) + bot * ay


def _source(op, param, x, y, w, h):
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    if op == "shearX":
        return y, x + param * (y - cy)
    if op == "shearY":
        return y + param * (x - cx), x
    if op == "translateX":
        return y, x - param * w
    if op == "translateY":
        return y - param * h, x
    # rotate content counter-clockwise on screen: source = R(-theta) applied in y-up coordinates
    t = math.radians(param)
    du, dv = x - cx, y - cy
    return cy + math.sin(t) * du + math.cos(t) * dv, cx + math.cos(t) * du - math.sin(t) * dv


def _lum(img, y, x):
    if len(img) == 1:
        return img[0][y][x]
    return img[0][y][x] * 0.299 + img[1][y][x] * 0.587 + img[2][y][x] * 0.114


def _equalize(plane, original):
    h, w = len(plane), len(plane[0])
    hist = [0] * 256
    for row in plane:
        for b in row:
            hist[b] += 1
    last = max(i for i in range(256) if hist[i])
    step = (h * w - hist[last]) // 255
    if step == 0:
        return [row[:] for row in original]
    lut, n = [], step // 2
    for i in range(256):
        lut.append(min(n // step, 255))
        n += hist[i]
    return [[lut[b] / 255.0 for b in row] for row in plane]


def reference(img: np.ndarray, op: str, lam: float, rng: np.random.Generator | None = None) -> np.ndarray:
    src = img.astype(np.float64).tolist()
    C, H, W = len(src), len(src[0]), len(src[0][0])
    param = ref_param(op, lam)
    out = [[[0.0] * W for _ in range(H)] for _ in range(C)]

    if op in GEOMETRIC_OPS:
        for c in range(C):
            for y in range(H):
                for x in range(W):
                    sy, sx = _source(op, param, x, y, W, H)
                    out[c][y][x] = _bilinear(src, c, sy, sx)
    elif op == "autoContrast":
        for c in range(C):
            lo = min(min(r) for r in src[c])
            hi = max(max(r) for r in src[c])
            for y in range(H):
                for x in range(W):
                    v = src[c][y][x]
                    out[c][y][x] = (v - lo) / (hi - lo) if hi > lo else v
    elif op == "invert":
        out = [[[1.0 - v for v in r] for r in p] for p in src]
    elif op == "solarize":
        out = [[[1.0 - v if _byte(v) > param else v for v in r] for r in p] for p in src]
    elif op == "posterize":
        bits = int(param)
        keep = 0xFF & ~((1 << (8 - bits)) - 1)
        out = [[[(_byte(v) & keep) / 255.0 if bits < 8 else v for v in r] for r in p] for p in src]
    elif op in ("contrast", "color", "brightness", "sharpness"):
        if op == "contrast":
            mean = math.fsum(_lum(src, y, x) for y in range(H) for x in range(W)) / (H * W)
        for c in range(C):
            for y in range(H):
                for x in range(W):
                    v = src[c][y][x]
                    if op == "contrast":
                        d = mean
                    elif op == "color":
                        d = _lum(src, y, x)
                    elif op == "brightness":
                        d = 0.0
                    elif 0 < y < H - 1 and 0 < x < W - 1:
                        acc = 0.0
                        for dy in (-1, 0, 1):
                            for dx in (-1, 0, 1):
                                acc = acc + (5.0 if dy == dx == 0 else 1.0) * src[c][y + dy][x + dx]
                        d = acc / 13.0
                    else:
                        d = v
                    # blend(degenerate, original, factor): factor 1 is the original image
                    out[c][y][x] = v + (1.0 - param) * (d - v)
    elif op == "cutout":
        side = int(math.floor(param * min(H, W) + 0.5))
        out = [[r[:] for r in p] for p in src]
        if side > 0:
            cy, cx = int(rng.integers(H)), int(rng.integers(W))
            for y in range(cy - side // 2, cy - side // 2 + side):
                for x in range(cx - side // 2, cx - side // 2 + side):
                    if 0 <= y < H and 0 <= x < W:
                        for c in range(C):
                            out[c][y][x] = 0.0
    elif op == "equalize":
        for c in range(C):
            out[c] = _equalize([[_byte(v) for v in r] for r in src[c]], src[c])
    else:
        raise ValueError(op)

    return np.array([[[_clip(v) for v in r] for r in p] for p in out], dtype=np.float32)


def fixture_images() -> list[np.ndarray]:
    """Five fixed 8x8 RGB images covering smooth, random, quantized, flat and extreme content."""
    rng = np.random.default_rng(20240601)
    ys, xs = np.mgrid[0:8, 0:8] / 7.0
    gradient = np.stack([xs, ys, (xs + ys) / 2.0])
    uniform = rng.uniform(size=(3, 8, 8))
    levels = rng.integers(0, 256, size=(3, 8, 8)) / 255.0
    flat = np.stack([np.full((8, 8), 0.3), ys * 0.5 + 0.25, np.full((8, 8), 0.9)])
    checker = ((np.indices((8, 8)).sum(axis=0) % 2) * 1.0)[None].repeat(3, axis=0)
    checker[1] = 1.0 - checker[1]
    return [a.astype(np.float32) for a in (gradient, uniform, levels, flat, checker)]
