"""8-bit RGB rasters and the individual image transformation policies.

Every transform here is a pure function of its inputs: the image bytes, the
strength in the policy's native units, and (where randomness is needed) a
``numpy.random.Generator`` supplied by the caller.  Pixel values are kept in
integer space and saturated to [0, 255] after each op; intermediate
bilinear samples are computed in float64 and rounded half-to-even.
"""

from __future__ import annotations

import functools
import math
import os
from dataclasses import dataclass
from typing import Callable, Dict, Union

import numpy as np

from .errors import DataError, ParameterError, RangeError, UnknownPolicyError

FILL_VALUE = 128
MIN_GEOMETRIC_SIZE = 8

PathLike = Union[str, "os.PathLike[str]"]


@dataclass(frozen=True, eq=False)
class Raster:
    """An immutable 8-bit RGB image stored as a ``(height, width, 3)`` array."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DataError(f"raster must have shape (H, W, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError("raster must be at least 1x1")
        if arr.dtype != np.uint8:
            if np.any(arr < 0) or np.any(arr > 255):
                raise DataError("channel values must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = np.ascontiguousarray(arr).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(
            self.pixels, other.pixels
        )

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))

    @classmethod
    def from_rows(cls, rows) -> "Raster":
        """Build a raster from nested ``[row][col] -> (r, g, b)`` lists."""
        return cls(np.asarray(rows, dtype=np.int64))

    @classmethod
    def filled(cls, width: int, height: int, value=(128, 128, 128)) -> "Raster":
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[...] = np.asarray(value, dtype=np.uint8)
        return cls(arr)


# ---------------------------------------------------------------------------
# PPM (P6) input/output


def _read_token(data: bytes, pos: int):
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DataError("truncated PPM header")
    return data[start:pos], pos


def decode_ppm(data: bytes) -> Raster:
    magic, pos = _read_token(data, 0)
    if magic != b"P6":
        raise DataError(f"not a binary PPM (magic {magic!r})")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise DataError(f"bad PPM header field {tok!r}") from None
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"only maxval 255 is supported, got {maxval}")
    if width < 1 or height < 1:
        raise DataError("PPM dimensions must be positive")
    # Exactly one whitespace byte separates the header from the payload.
    pos += 1
    need = width * height * 3
    payload = data[pos : pos + need]
    if len(payload) != need:
        raise DataError(f"PPM payload has {len(payload)} bytes, expected {need}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Raster(arr)


def encode_ppm(img: Raster) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.tobytes()


def load_ppm(path: PathLike) -> Raster:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def save_ppm(img: Raster, path: PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


# ---------------------------------------------------------------------------
# Policy table


@dataclass(frozen=True)
class PolicySpec:
    name: str
    a_min: float
    a_max: float
    signed: bool = False

    def __post_init__(self):
        if self.a_min > self.a_max:
            raise ParameterError(f"{self.name}: a_min > a_max")


_TABLE = (
    ("AutoContrast", 0.0, 1.0, False),
    ("Equalize", 0.0, 1.0, False),
    ("Invert", 0.0, 1.0, False),
    ("Rotate", 0.0, 30.0, True),
    ("Posterize", 4.0, 8.0, False),
    ("Cutout", 0.0, 0.2, False),
    ("Solarize", 0.0, 256.0, False),
    ("SolarizeAdd", 0.0, 110.0, False),
    ("Color", 0.1, 1.9, True),
    ("Contrast", 0.1, 1.9, True),
    ("Brightness", 0.1, 1.9, True),
    ("Sharpness", 0.1, 1.9, True),
    ("ShearX", 0.0, 0.3, True),
    ("ShearY", 0.0, 0.3, True),
    ("TranslateX", 0.0, 0.33, True),
    ("TranslateY", 0.0, 0.33, True),
)

POLICIES: Dict[str, PolicySpec] = {
    name: PolicySpec(name, lo, hi, signed) for name, lo, hi, signed in _TABLE
}
POLICY_NAMES = tuple(POLICIES)

_ENHANCEMENTS = frozenset({"Color", "Contrast", "Brightness", "Sharpness"})
_GEOMETRIC = frozenset({"Rotate", "ShearX", "ShearY", "TranslateX", "TranslateY"})

FIXED = "fixed"
DYNAMIC = "dynamic"
_MODE_ALIASES = {
    "fixed": FIXED,
    "fixed-30-scale": FIXED,
    "dynamic": DYNAMIC,
    "dynamic-uniform": DYNAMIC,
}


def normalize_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode]
    except KeyError:
        raise ParameterError(f"unknown amplitude mode {mode!r}") from None


def get_policy(policy) -> PolicySpec:
    """Resolve a policy name (or pass a registered ``PolicySpec`` through)."""
    name = policy.name if isinstance(policy, PolicySpec) else policy
    try:
        return POLICIES[name]
    except KeyError:
        raise UnknownPolicyError(f"unregistered policy {name!r}") from None


def convert_amplitude(policy, a_raw: float, mode: str = DYNAMIC) -> float:
    """Map a raw amplitude onto the policy's native strength range.

    ``fixed`` mode interprets ``a_raw`` on RandAugment's 0..30 magnitude
    scale; ``dynamic`` mode interprets it as a draw from ``U(0, a_max)``.
    """
    spec = policy if isinstance(policy, PolicySpec) else get_policy(policy)
    mode = normalize_mode(mode)
    span = spec.a_max - spec.a_min
    if mode == FIXED:
        if not 0.0 <= a_raw <= 30.0:
            raise RangeError(f"fixed-mode amplitude {a_raw} outside [0, 30]")
        return (a_raw / 30.0) * span + spec.a_min
    if spec.a_max == 0:
        raise RangeError(f"{spec.name}: a_max = 0 gives a degenerate dynamic range")
    if not 0.0 <= a_raw <= spec.a_max:
        raise RangeError(f"dynamic amplitude {a_raw} outside [0, {spec.a_max}]")
    return (a_raw / spec.a_max) * span + spec.a_min


# ---------------------------------------------------------------------------
# Pixel helpers


def _to_raster(arr: np.ndarray) -> Raster:
    return Raster(np.clip(np.rint(arr), 0, 255).astype(np.uint8))


def _sample_bilinear(src: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill=None) -> np.ndarray:
    """Bilinear lookup of ``src`` (H, W, C) at float coordinates.

    Out-of-frame neighbours take ``fill``; with ``fill=None`` coordinates are
    clamped to the border instead.
    """
    h, w = src.shape[:2]
    # A one-pixel frame holds the fill value (or the replicated edge), so
    # every out-of-range index can be clamped onto it.
    if fill is None:
        padded = np.pad(src.astype(np.float64), ((1, 1), (1, 1), (0, 0)), mode="edge")
    else:
        padded = np.pad(src.astype(np.float64), ((1, 1), (1, 1), (0, 0)), constant_values=float(fill))
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    wx = (sx - x0)[..., None]
    wy = (sy - y0)[..., None]
    xa = np.clip(x0.astype(np.int64) + 1, 0, w + 1)
    xb = np.clip(x0.astype(np.int64) + 2, 0, w + 1)
    ya = np.clip(y0.astype(np.int64) + 1, 0, h + 1)
    yb = np.clip(y0.astype(np.int64) + 2, 0, h + 1)
    top = padded[ya, xa] * (1.0 - wx) + padded[ya, xb] * wx
    bottom = padded[yb, xa] * (1.0 - wx) + padded[yb, xb] * wx
    return top * (1.0 - wy) + bottom * wy


@functools.lru_cache(maxsize=16)
def _grid(height: int, width: int):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    ys.setflags(write=False)
    xs.setflags(write=False)
    return ys, xs


def _affine(img: Raster, a, b, c, d, e, f) -> Raster:
    """Inverse-map each output pixel (x, y) to (a x + b y + c, d x + e y + f)."""
    ys, xs = _grid(img.height, img.width)
    sx = a * xs + b * ys + c
    sy = d * xs + e * ys + f
    return _to_raster(_sample_bilinear(img.pixels, sx, sy, fill=FILL_VALUE))


def _grayscale(arr: np.ndarray) -> np.ndarray:
    a = arr.astype(np.int64)
    return (a[..., 0] * 299 + a[..., 1] * 587 + a[..., 2] * 114 + 500) // 1000


def _blend(degenerate: np.ndarray, arr: np.ndarray, factor: float) -> Raster:
    deg = degenerate.astype(np.float64)
    return _to_raster(deg + factor * (arr.astype(np.float64) - deg))


def _smooth(arr: np.ndarray) -> np.ndarray:
    """3x3 smoothing (centre weight 5, neighbours 1, /13); border pixels kept."""
    h, w = arr.shape[:2]
    out = arr.astype(np.int64).copy()
    if h < 3 or w < 3:
        return out
    a = arr.astype(np.int64)
    acc = np.zeros((h - 2, w - 2, 3), dtype=np.int64)
    for dy in range(3):
        for dx in range(3):
            weight = 5 if (dy == 1 and dx == 1) else 1
            acc += weight * a[dy : dy + h - 2, dx : dx + w - 2]
    out[1:-1, 1:-1] = (acc + 6) // 13
    return out


# ---------------------------------------------------------------------------
# Individual ops; ``v`` is already in native units and already signed.


def _auto_contrast(img, v, aux):
    arr = img.pixels.astype(np.float64)
    out = arr.copy()
    for ch in range(3):
        lo, hi = arr[..., ch].min(), arr[..., ch].max()
        if hi > lo:
            out[..., ch] = (arr[..., ch] - lo) * (255.0 / (hi - lo))
    return _to_raster(out)


def _equalize(img, v, aux):
    arr = img.pixels
    out = arr.copy()
    for ch in range(3):
        chan = arr[..., ch]
        hist = np.bincount(chan.ravel(), minlength=256)
        nonzero = hist[hist > 0]
        step = (int(hist.sum()) - int(nonzero[-1])) // 255
        if step == 0:
            continue
        lut = (np.concatenate(([0], np.cumsum(hist)[:-1])) + step // 2) // step
        out[..., ch] = np.clip(lut, 0, 255)[chan]
    return Raster(out)


def _invert(img, v, aux):
    return Raster(255 - img.pixels)


def _rotate(img, degrees, aux):
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cx, cy = (img.width - 1) / 2.0, (img.height - 1) / 2.0
    # Output (x, y) samples the input at R(theta) applied about the centre.
    return _affine(
        img,
        cos, sin, cx - cos * cx - sin * cy,
        -sin, cos, cy + sin * cx - cos * cy,
    )


def _posterize(img, bits, aux):
    keep = int(bits)
    mask = (0xFF << (8 - keep)) & 0xFF
    return Raster(img.pixels & np.uint8(mask))


def _cutout(img, fraction, aux):
    side = int(np.rint(fraction * min(img.width, img.height)))
    cx = int(aux.integers(0, img.width))
    cy = int(aux.integers(0, img.height))
    if side <= 0:
        return img
    out = img.pixels.copy()
    x0, y0 = max(cx - side // 2, 0), max(cy - side // 2, 0)
    x1, y1 = min(cx - side // 2 + side, img.width), min(cy - side // 2 + side, img.height)
    out[y0:y1, x0:x1] = FILL_VALUE
    return Raster(out)


def _solarize(img, threshold, aux):
    arr = img.pixels
    return Raster(np.where(arr >= threshold, 255 - arr, arr))


def _solarize_add(img, addition, aux):
    arr = img.pixels.astype(np.int64)
    added = np.clip(arr + int(np.rint(addition)), 0, 255)
    return Raster(np.where(arr < 128, added, arr).astype(np.uint8))


def _color(img, factor, aux):
    gray = _grayscale(img.pixels)
    return _blend(np.repeat(gray[..., None], 3, axis=2), img.pixels, factor)


def _contrast(img, factor, aux):
    mean = int(_grayscale(img.pixels).mean() + 0.5)
    return _blend(np.full(img.pixels.shape, mean), img.pixels, factor)


def _brightness(img, factor, aux):
    return _blend(np.zeros(img.pixels.shape), img.pixels, factor)


def _sharpness(img, factor, aux):
    return _blend(_smooth(img.pixels), img.pixels, factor)


def _shear_x(img, level, aux):
    return _affine(img, 1.0, level, 0.0, 0.0, 1.0, 0.0)


def _shear_y(img, level, aux):
    return _affine(img, 1.0, 0.0, 0.0, level, 1.0, 0.0)


def _translate_x(img, fraction, aux):
    return _affine(img, 1.0, 0.0, fraction * img.width, 0.0, 1.0, 0.0)


def _translate_y(img, fraction, aux):
    return _affine(img, 1.0, 0.0, 0.0, 0.0, 1.0, fraction * img.height)


_OPS: Dict[str, Callable] = {
    "AutoContrast": _auto_contrast,
    "Equalize": _equalize,
    "Invert": _invert,
    "Rotate": _rotate,
    "Posterize": _posterize,
    "Cutout": _cutout,
    "Solarize": _solarize,
    "SolarizeAdd": _solarize_add,
    "Color": _color,
    "Contrast": _contrast,
    "Brightness": _brightness,
    "Sharpness": _sharpness,
    "ShearX": _shear_x,
    "ShearY": _shear_y,
    "TranslateX": _translate_x,
    "TranslateY": _translate_y,
}


def as_generator(aux) -> np.random.Generator:
    if isinstance(aux, np.random.Generator):
        return aux
    if aux is None:
        raise ParameterError("a randomness stream is required")
    return np.random.default_rng(aux)


def apply_policy(img: Raster, policy, strength: float, aux) -> Raster:
    """Apply one registered policy at ``strength`` (native units).

    ``aux`` is a generator (or an integer seed for one) supplying the sign
    flip of signed policies and the Cutout centre.  The sign flip is always
    drawn first, so a given seed produces the same geometry regardless of
    which op consumes the remaining bits.
    """
    spec = get_policy(policy)
    if not spec.a_min <= strength <= spec.a_max:
        raise RangeError(
            f"{spec.name} strength {strength} outside [{spec.a_min}, {spec.a_max}]"
        )
    if spec.name in _GEOMETRIC and min(img.width, img.height) < MIN_GEOMETRIC_SIZE:
        raise DataError(f"{spec.name} needs images of at least {MIN_GEOMETRIC_SIZE}x{MIN_GEOMETRIC_SIZE}")
    rng = as_generator(aux)
    value = float(strength)
    if spec.signed and rng.random() < 0.5:
        value = 2.0 - value if spec.name in _ENHANCEMENTS else -value
    return _OPS[spec.name](img, value, rng)


# ---------------------------------------------------------------------------
# Backbone-default crop and flip


def crop_resize(img: Raster, left: int, top: int, crop_w: int, crop_h: int) -> Raster:
    """Cut out a rectangle and resample it back to the full image size."""
    if crop_w < 1 or crop_h < 1:
        raise ParameterError("crop must be at least 1x1")
    if left < 0 or top < 0 or left + crop_w > img.width or top + crop_h > img.height:
        raise ParameterError("crop rectangle exceeds the image")
    ys, xs = _grid(img.height, img.width)
    # Pixel-centre alignment; border samples are clamped, not filled.
    sx = (xs + 0.5) * (crop_w / img.width) - 0.5
    sy = (ys + 0.5) * (crop_h / img.height) - 0.5
    sx = np.clip(sx, 0.0, crop_w - 1) + left
    sy = np.clip(sy, 0.0, crop_h - 1) + top
    return _to_raster(_sample_bilinear(img.pixels, sx, sy, fill=None))


def random_resized_crop(
    img: Raster,
    aux,
    scale_lo: float = 0.08,
    scale_hi: float = 1.0,
    ratio=(3.0 / 4.0, 4.0 / 3.0),
) -> Raster:
    if not 0.0 < scale_lo <= scale_hi <= 1.0:
        raise ParameterError(f"need 0 < scale_lo <= scale_hi <= 1, got ({scale_lo}, {scale_hi})")
    if ratio[0] <= 0 or ratio[0] > ratio[1]:
        raise ParameterError(f"bad aspect ratio range {ratio}")
    rng = as_generator(aux)
    w_img, h_img = img.width, img.height
    area = w_img * h_img
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    for _ in range(10):
        target = area * rng.uniform(scale_lo, scale_hi)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w_img and 0 < ch <= h_img:
            top = int(rng.integers(0, h_img - ch + 1))
            left = int(rng.integers(0, w_img - cw + 1))
            return crop_resize(img, left, top, cw, ch)
    # Fallback: centred crop at the clamped aspect ratio.
    in_ratio = w_img / h_img
    if in_ratio < ratio[0]:
        cw, ch = w_img, int(round(w_img / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h_img, int(round(h_img * ratio[1]))
    else:
        cw, ch = w_img, h_img
    return crop_resize(img, (w_img - cw) // 2, (h_img - ch) // 2, cw, ch)


def horizontal_flip(img: Raster) -> Raster:
    return Raster(img.pixels[:, ::-1])
