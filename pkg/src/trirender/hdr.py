"""HDR images, PFM and PNG I/O, tone mapping, and image metrics."""

from __future__ import annotations

import math

import numpy as np

from .errors import SceneParseError, ValidationError


class HdrImage:
    """Linear-radiance image, shape (height, width, 3), float32, nonnegative."""

    def __init__(self, pixels: np.ndarray):
        self.pixels = np.asarray(pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValidationError(f"HdrImage needs (H, W, 3) pixels, got {self.pixels.shape}")
        if not np.isfinite(self.pixels).all():
            raise ValidationError("HdrImage pixels must be finite")
        if self.pixels.min() < 0:
            raise ValidationError("HdrImage pixels must be nonnegative")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def log_encoded(self) -> np.ndarray:
        """log(1 + radiance), the space losses and PSNR are computed in."""
        return np.log1p(self.pixels)

    @classmethod
    def from_log_encoded(cls, y: np.ndarray) -> "HdrImage":
        return cls(np.maximum(np.expm1(np.asarray(y, dtype=np.float64)), 0.0).astype(np.float32))


def tone_map(img: HdrImage) -> np.ndarray:
    """clamp(log(I) / log(2), 0, 1) per channel; zero radiance maps to 0."""
    px = img.pixels.astype(np.float64)
    with np.errstate(divide="ignore"):
        t = np.log(np.maximum(px, 0.0)) / math.log(2.0)
    t[px <= 0.0] = 0.0
    return np.clip(t, 0.0, 1.0)


def composite_lights(images, weights) -> HdrImage:
    """Weighted per-channel sum of per-light renders (light transport is linear)."""
    images = list(images)
    weights = [np.asarray(w, dtype=np.float64).reshape(3) for w in weights]
    if len(images) != len(weights):
        raise ValidationError(f"{len(images)} images vs {len(weights)} weights")
    if not images:
        raise ValidationError("composite_lights needs at least one image")
    shape = images[0].pixels.shape
    for im in images:
        if im.pixels.shape != shape:
            raise ValidationError(f"image shapes differ: {im.pixels.shape} vs {shape}")
    acc = np.zeros(shape, dtype=np.float64)
    for im, w in zip(images, weights):
        acc += im.pixels.astype(np.float64) * w
    return HdrImage(acc.astype(np.float32))


def psnr(a: HdrImage, b: HdrImage) -> float:
    """PSNR in dB between log-encoded images; peak is the max over both.

    Identical images return math.inf.
    """
    if a.pixels.shape != b.pixels.shape:
        raise ValidationError(f"psnr shapes differ: {a.pixels.shape} vs {b.pixels.shape}")
    la = np.log1p(a.pixels.astype(np.float64))
    lb = np.log1p(b.pixels.astype(np.float64))
    mse = float(np.mean((la - lb) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(max(la.max(), lb.max()))
    if peak <= 0.0:
        return math.inf if mse == 0.0 else 0.0
    return 10.0 * math.log10(peak * peak / mse)


# -- PFM --------------------------------------------------------------------------


def write_pfm(img: HdrImage, path: str) -> None:
    """Write a color PFM: little-endian float32, scanlines bottom to top."""
    with open(path, "wb") as fh:
        fh.write(b"PF\n")
        fh.write(f"{img.width} {img.height}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        data = np.flipud(img.pixels).astype("<f4")
        fh.write(data.tobytes())


def _read_header_token(fh) -> bytes:
    """Read one whitespace-delimited token from a binary stream."""
    tok = b""
    while True:
        c = fh.read(1)
        if not c:
            raise SceneParseError("truncated PFM header")
        if c in b" \t\r\n":
            if tok:
                return tok
            continue
        tok += c


def read_pfm(path: str) -> HdrImage:
    with open(path, "rb") as fh:
        magic = _read_header_token(fh)
        if magic != b"PF":
            raise SceneParseError(f"{path}: not a color PFM (magic {magic!r})")
        try:
            width = int(_read_header_token(fh))
            height = int(_read_header_token(fh))
            scale = float(_read_header_token(fh))
        except ValueError as e:
            raise SceneParseError(f"{path}: bad PFM header: {e}") from e
        if width <= 0 or height <= 0:
            raise SceneParseError(f"{path}: bad PFM dimensions {width}x{height}")
        count = width * height * 3
        raw = fh.read(count * 4)
        if len(raw) != count * 4:
            raise SceneParseError(f"{path}: truncated PFM payload")
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(raw, dtype=dtype).reshape(height, width, 3)
        if scale not in (-1.0, 1.0) and scale != 0.0:
            data = data * abs(scale)
        return HdrImage(np.flipud(data).astype(np.float32))


# -- PNG --------------------------------------------------------------------------


def write_png(img: HdrImage, path: str) -> None:
    """Tone-map and write an 8-bit PNG preview."""
    from PIL import Image

    ldr = np.round(tone_map(img) * 255.0).astype(np.uint8)
    Image.fromarray(ldr, mode="RGB").save(path, format="PNG")
