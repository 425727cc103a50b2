"""Raster implementations of the policy transforms.

Images are float32 arrays shaped ``[C, H, W]`` with values in ``[0, 1]``.
Every op works in float64 internally and casts back to float32 once, so the
results are reproducible bit-for-bit across platforms.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

AFFINE_FILL = 0.5
CUTOUT_FILL = 0.0
RANDAUGMENT_LEVELS = 30


class Op(str, enum.Enum):
    SHEAR_X = "shearX"
    SHEAR_Y = "shearY"
    TRANSLATE_X = "translateX"
    TRANSLATE_Y = "translateY"
    ROTATE = "rotate"
    AUTO_CONTRAST = "autoContrast"
    INVERT = "invert"
    SOLARIZE = "solarize"
    POSTERIZE = "posterize"
    CONTRAST = "contrast"
    COLOR = "color"
    BRIGHTNESS = "brightness"
    SHARPNESS = "sharpness"
    CUTOUT = "cutout"
    EQUALIZE = "equalize"
    HORIZONTAL_FLIP = "horizontalFlip"
    RANDOM_RESIZE_CROP = "randomResizeCrop"

    def __str__(self) -> str:
        return self.value


SEARCHABLE_OPS: tuple[Op, ...] = tuple(Op)[:15]


@dataclass(frozen=True)
class MagnitudeRange:
    op: Op
    min: float
    max: float
    integer: bool = False


# min is the parameter at lambda=0, max at lambda=1.
MAGNITUDE_RANGES: dict[Op, MagnitudeRange] = {
    r.op: r
    for r in (
        MagnitudeRange(Op.SHEAR_X, -0.3, 0.3),
        MagnitudeRange(Op.SHEAR_Y, -0.3, 0.3),
        MagnitudeRange(Op.TRANSLATE_X, -0.45, 0.45),
        MagnitudeRange(Op.TRANSLATE_Y, -0.45, 0.45),
        MagnitudeRange(Op.ROTATE, -30.0, 30.0),
        MagnitudeRange(Op.AUTO_CONTRAST, 0.0, 1.0),
        MagnitudeRange(Op.INVERT, 0.0, 1.0),
        MagnitudeRange(Op.SOLARIZE, 0.0, 256.0, integer=True),
        MagnitudeRange(Op.POSTERIZE, 4.0, 8.0, integer=True),
        MagnitudeRange(Op.CONTRAST, 0.1, 1.9),
        MagnitudeRange(Op.COLOR, 0.1, 1.9),
        MagnitudeRange(Op.BRIGHTNESS, 0.1, 1.9),
        MagnitudeRange(Op.SHARPNESS, 0.1, 1.9),
        MagnitudeRange(Op.CUTOUT, 0.0, 0.2),
        MagnitudeRange(Op.EQUALIZE, 0.0, 1.0),
        MagnitudeRange(Op.HORIZONTAL_FLIP, 0.0, 1.0),
        # Lower bound of the sampled crop area fraction.
        MagnitudeRange(Op.RANDOM_RESIZE_CROP, 0.2, 1.0),
    )
}


def as_op(op: Op | str) -> Op:
    if isinstance(op, Op):
        return op
    try:
        return Op(op)
    except ValueError:
        raise ValueError(f"unknown op {op!r}") from None


def magnitude_to_param(op: Op | str, lam: float) -> float:
    """Map a unit magnitude onto the op's parameter range (linear, rounded for integer ops)."""
    op = as_op(op)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"magnitude must lie in [0, 1], got {lam!r}")
    r = MAGNITUDE_RANGES[op]
    # Same line as min + lam * (max - min), but exact at both ends and at symmetric midpoints.
    value = (1.0 - lam) * r.min + lam * r.max
    if r.integer:
        value = float(math.floor(value + 0.5))
    return value


def randaugment_level_to_unit(level: int) -> float:
    """Bridge the discrete 1..30 RandAugment level onto the unit magnitude scale."""
    if not 1 <= level <= RANDAUGMENT_LEVELS:
        raise ValueError(f"RandAugment level must lie in [1, {RANDAUGMENT_LEVELS}], got {level}")
    return (level - 1) / (RANDAUGMENT_LEVELS - 1)


def check_image(img: np.ndarray) -> None:
    if img.ndim != 3:
        raise ValueError(f"expected a [C, H, W] image, got shape {img.shape}")
    if img.shape[1] < 1 or img.shape[2] < 1:
        raise ValueError(f"image has an empty spatial dimension: {img.shape}")
    if np.isnan(img).any():
        raise ValueError("image contains NaN pixels")


def _out(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.floor(x * 255.0 + 0.5).astype(np.int64).clip(0, 255)


# -- geometric ---------------------------------------------------------------


def _sample_bilinear(img: np.ndarray, src_x: np.ndarray, src_y: np.ndarray, fill: float) -> np.ndarray:
    """Bilinear lookup at fractional source coordinates; outside pixels read as ``fill``."""
    _, h, w = img.shape
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = src_x - x0
    fy = src_y - y0

    def tap(yy, xx):
        valid = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        vals = img[:, yy.clip(0, h - 1), xx.clip(0, w - 1)]
        return np.where(valid, vals, fill)

    top = tap(y0, x0) * (1.0 - fx) + tap(y0, x0 + 1) * fx
    bottom = tap(y0 + 1, x0) * (1.0 - fx) + tap(y0 + 1, x0 + 1) * fx
    return top * (1.0 - fy) + bottom * fy


def _warp(img: np.ndarray, op: Op, param: float, fill: float = AFFINE_FILL) -> np.ndarray:
    _, h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    u, v = xs - cx, ys - cy
    if op is Op.SHEAR_X:
        src_x, src_y = xs + param * v, ys
    elif op is Op.SHEAR_Y:
        src_x, src_y = xs, ys + param * u
    elif op is Op.TRANSLATE_X:
        src_x, src_y = xs - param * w, ys
    elif op is Op.TRANSLATE_Y:
        src_x, src_y = xs, ys - param * h
    else:
        # Counter-clockwise on screen (y axis points down).
        theta = math.radians(param)
        c, s = math.cos(theta), math.sin(theta)
        src_x = cx + c * u - s * v
        src_y = cy + s * u + c * v
    return _sample_bilinear(img.astype(np.float64), src_x, src_y, fill)


# -- pixel-value ops -----------------------------------------------------------


def _luminance(x: np.ndarray) -> np.ndarray:
    if x.shape[0] == 1:
        return x[0]
    return x[0] * 0.299 + x[1] * 0.587 + x[2] * 0.114


def _blend(degenerate: np.ndarray, x: np.ndarray, factor: float) -> np.ndarray:
    # Written so that factor == 1 reproduces x exactly.
    return x + (1.0 - factor) * (degenerate - x)


def _smooth(x: np.ndarray) -> np.ndarray:
    """3x3 smoothing (centre weight 5, neighbours 1, sum 13); border pixels kept."""
    c, h, w = x.shape
    out = x.copy()
    if h < 3 or w < 3:
        return out
    acc = np.zeros((c, h - 2, w - 2))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            weight = 5.0 if dy == 0 and dx == 0 else 1.0
            acc = acc + weight * x[:, 1 + dy : h - 1 + dy, 1 + dx : w - 1 + dx]
    out[:, 1:-1, 1:-1] = acc / 13.0
    return out


def _equalize_channel(q: np.ndarray, original: np.ndarray) -> np.ndarray:
    hist = np.bincount(q.ravel(), minlength=256)
    nonzero = hist[hist > 0]
    step = (int(nonzero.sum()) - int(nonzero[-1])) // 255
    if step == 0:
        return original
    # lut[i] = (step // 2 + count of pixels below level i) // step
    below = np.concatenate(([0], np.cumsum(hist)[:-1]))
    lut = np.minimum((step // 2 + below) // step, 255)
    return lut[q] / 255.0


def _cutout(x: np.ndarray, fraction: float, rng: np.random.Generator, fill: float) -> np.ndarray:
    _, h, w = x.shape
    side = int(math.floor(fraction * min(h, w) + 0.5))
    if side <= 0:
        return x
    cy = int(rng.integers(h))
    cx = int(rng.integers(w))
    y0, x0 = max(cy - side // 2, 0), max(cx - side // 2, 0)
    y1, x1 = min(cy - side // 2 + side, h), min(cx - side // 2 + side, w)
    out = x.copy()
    out[:, y0:y1, x0:x1] = fill
    return out


def apply_transform(
    img: np.ndarray,
    op: Op | str,
    param: float,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Apply one op with an already-mapped parameter (see :func:`magnitude_to_param`).

    ``rng`` is only consumed by ``cutout`` and ``randomResizeCrop``.
    """
    op = as_op(op)
    check_image(img)
    x = img.astype(np.float64)

    if op in (Op.SHEAR_X, Op.SHEAR_Y, Op.TRANSLATE_X, Op.TRANSLATE_Y, Op.ROTATE):
        return _out(_warp(x, op, param))
    if op is Op.AUTO_CONTRAST:
        lo = x.min(axis=(1, 2), keepdims=True)
        hi = x.max(axis=(1, 2), keepdims=True)
        span = hi - lo
        return _out(np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), x))
    if op is Op.INVERT:
        return _out(1.0 - x)
    if op is Op.SOLARIZE:
        return _out(np.where(_quantize(x) > param, 1.0 - x, x))
    if op is Op.POSTERIZE:
        bits = int(param)
        if bits >= 8:
            return _out(x)
        mask = (0xFF << (8 - bits)) & 0xFF
        return _out((_quantize(x) & mask) / 255.0)
    if op is Op.CONTRAST:
        lum = _luminance(x)
        mean = math.fsum(lum.ravel().tolist()) / lum.size
        return _out(_blend(np.full_like(x, mean), x, param))
    if op is Op.COLOR:
        grey = np.broadcast_to(_luminance(x), x.shape)
        return _out(_blend(grey, x, param))
    if op is Op.BRIGHTNESS:
        return _out(_blend(np.zeros_like(x), x, param))
    if op is Op.SHARPNESS:
        return _out(_blend(_smooth(x), x, param))
    if op is Op.CUTOUT:
        if rng is None:
            raise ValueError("cutout needs an rng")
        return _out(_cutout(x, param, rng, CUTOUT_FILL))
    if op is Op.EQUALIZE:
        q = _quantize(x)
        return _out(np.stack([_equalize_channel(q[c], x[c]) for c in range(x.shape[0])]))
    if op is Op.HORIZONTAL_FLIP:
        return horizontal_flip(img)
    if op is Op.RANDOM_RESIZE_CROP:
        if rng is None:
            raise ValueError("randomResizeCrop needs an rng")
        return random_resize_crop(img, rng, (param, 1.0))
    raise ValueError(f"unknown op {op!r}")  # pragma: no cover


def apply_op(img: np.ndarray, op: Op | str, lam: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Convenience wrapper: unit magnitude in, transformed image out."""
    return apply_transform(img, op, magnitude_to_param(op, lam), rng)


def horizontal_flip(img: np.ndarray) -> np.ndarray:
    check_image(img)
    return np.ascontiguousarray(img[:, :, ::-1])


def _crop_window(h: int, w: int, rng: np.random.Generator, scale, ratio) -> tuple[int, int, int, int]:
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        cw, ch = max(cw, 1), max(ch, 1)
        if cw <= w and ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def random_resize_crop(
    img: np.ndarray,
    rng: np.random.Generator,
    scale: tuple[float, float] = (0.2, 1.0),
    out_size: tuple[int, int] | None = None,
    ratio: tuple[float, float] = (3 / 4, 4 / 3),
) -> np.ndarray:
    """Crop a random window covering ``scale`` of the area and resize it bilinearly.

    After ten failed attempts to fit a window the whole image is used.
    """
    check_image(img)
    if not 0.0 < scale[0] <= scale[1] <= 1.0:
        raise ValueError(f"invalid crop scale range {scale}")
    _, h, w = img.shape
    out_h, out_w = out_size if out_size is not None else (h, w)
    top, left, ch, cw = _crop_window(h, w, rng, scale, ratio)
    ys = top + (np.arange(out_h, dtype=np.float64) + 0.5) * (ch / out_h) - 0.5
    xs = left + (np.arange(out_w, dtype=np.float64) + 0.5) * (cw / out_w) - 0.5
    # Clamp into the crop so edge samples never read outside it.
    ys = ys.clip(top, top + ch - 1)
    xs = xs.clip(left, left + cw - 1)
    src_y, src_x = np.meshgrid(ys, xs, indexing="ij")
    return _out(_sample_bilinear(img.astype(np.float64), src_x, src_y, AFFINE_FILL))
