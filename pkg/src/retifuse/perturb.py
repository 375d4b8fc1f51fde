"""Image decoding, preprocessing and low-quality image synthesis.

Images are float arrays of shape (H, W, 3) with RGB values in [0, 1];
8-bit data only exists at the PPM boundary.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, InsufficientDataError
from .formats import atomic_write_bytes

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])
CROP = 224
LUMA = np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------------------
# PPM (P6) codec
# ---------------------------------------------------------------------------

def _ppm_tokens(blob: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PPM header", offset=pos)
        tokens.append(int(blob[start:pos]))
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise FormatError("PPM header must end with a single whitespace byte", offset=pos)
    return tokens, pos + 1


def decode_ppm(blob: bytes) -> np.ndarray:
    if blob[:2] != b"P6":
        raise FormatError("not a binary PPM (P6)", offset=0)
    (w, h, maxval), pos = _ppm_tokens(blob, 3)
    if w <= 0 or h <= 0:
        raise FormatError("PPM dimensions must be positive", offset=2)
    if maxval != 255:
        raise FormatError(f"only 8-bit PPM supported (maxval {maxval})", offset=2)
    need = w * h * 3
    if len(blob) - pos < need:
        raise FormatError("truncated PPM payload", offset=len(blob))
    raw = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return raw.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    check_image(img)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + to_uint8(img).tobytes()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path, img: np.ndarray) -> None:
    atomic_write_bytes(path, encode_ppm(img))


def check_image(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise DimensionError(f"expected an (H, W, 3) image, got shape {img.shape}")


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: float | None) -> np.ndarray:
    """Sample ``img`` at float coordinates; ``fill=None`` clamps to the border,
    otherwise pixels outside the image count as ``fill``."""
    h, w, _ = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]

    def px(yy, xx):
        if fill is None:
            return img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        inside = ((yy >= 0) & (yy < h) & (xx >= 0) & (xx < w))[..., None]
        vals = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(inside, vals, fill)

    top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1) * fx
    bot = px(y0 + 1, x0) * (1.0 - fx) + px(y0 + 1, x0 + 1) * fx
    return top * (1.0 - fy) + bot * fy


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping (no antialiasing)."""
    check_image(img)
    h, w, _ = img.shape
    if (out_h, out_w) == (h, w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear_sample(img, yy, xx, fill=None)


def center_crop(img: np.ndarray, size: int = CROP) -> np.ndarray:
    h, w, _ = img.shape
    if h < size or w < size:
        raise DimensionError(f"cannot crop {size}x{size} from {h}x{w}")
    top = int(round((h - size) / 2.0))
    left = int(round((w - size) / 2.0))
    return img[top:top + size, left:left + size].copy()


def preprocess(img: np.ndarray, size: int = CROP) -> np.ndarray:
    """Resize the shorter side to ``size``, centre-crop, ImageNet-normalize."""
    check_image(img)
    h, w, _ = img.shape
    if h < 2 or w < 2:
        raise DimensionError(f"image too small to preprocess: {h}x{w}")
    if h <= w:
        new_h, new_w = size, max(size, int(size * w / h))
    else:
        new_h, new_w = max(size, int(size * h / w)), size
    out = center_crop(resize_bilinear(img, new_h, new_w), size)
    return (out - IMAGENET_MEAN) / IMAGENET_STD


def rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate counter-clockwise about the image centre; uncovered area is black."""
    check_image(img)
    if abs(angle_deg) > 180:
        raise ConfigError(f"rotation angle must be within [-180, 180], got {angle_deg}")
    if angle_deg == 0:
        return img.copy()
    h, w, _ = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(angle_deg)
    cos_t, sin_t = math.cos(t), math.sin(t)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source location (y axis points down)
    src_x = cx + cos_t * dx - sin_t * dy
    src_y = cy + sin_t * dx + cos_t * dy
    return _bilinear_sample(img, src_y, src_x, fill=0.0)


# ---------------------------------------------------------------------------
# Blur and colour
# ---------------------------------------------------------------------------

def gaussian_kernel1d(kernel: int, sigma: float) -> np.ndarray:
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"blur kernel size must be odd and positive, got {kernel}")
    if sigma <= 0:
        raise ConfigError(f"blur sigma must be positive, got {sigma}")
    r = kernel // 2
    k = np.exp(-(np.arange(-r, r + 1, dtype=np.float64) ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, kernel: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Separable Gaussian blur per channel with clamp-to-edge borders."""
    check_image(img)
    k = gaussian_kernel1d(kernel, sigma)
    r = kernel // 2
    h, w, _ = img.shape
    padded = np.pad(img, ((0, 0), (r, r), (0, 0)), mode="edge")
    tmp = sum(k[i] * padded[:, i:i + w] for i in range(kernel))
    padded = np.pad(tmp, ((r, r), (0, 0), (0, 0)), mode="edge")
    return sum(k[i] * padded[i:i + h] for i in range(kernel))


def luma(img: np.ndarray) -> np.ndarray:
    return img @ LUMA


def _blend(a: np.ndarray, b, ratio: float) -> np.ndarray:
    return np.clip(ratio * a + (1.0 - ratio) * b, 0.0, 1.0)


def adjust_brightness(img, factor: float) -> np.ndarray:
    return np.clip(img * factor, 0.0, 1.0)


def adjust_contrast(img, factor: float) -> np.ndarray:
    return _blend(img, float(luma(img).mean()), factor)


def adjust_saturation(img, factor: float) -> np.ndarray:
    return _blend(img, luma(img)[..., None], factor)


def color_jitter(img: np.ndarray, b: float = 1.0, c: float = 1.0, s: float = 1.0) -> np.ndarray:
    """Brightness, then contrast, then saturation; clamped after each stage."""
    check_image(img)
    return adjust_saturation(adjust_contrast(adjust_brightness(img, b), c), s)


# ---------------------------------------------------------------------------
# Adversarial set
# ---------------------------------------------------------------------------

@dataclass
class PerturbConfig:
    rotation_range: float = 30.0
    blur_kernel: int = 5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    blur: bool = True

    def __post_init__(self):
        if self.blur_kernel % 2 == 0 or self.blur_kernel < 1:
            raise ConfigError(f"blur kernel must be odd, got {self.blur_kernel}")
        lo, hi = self.blur_sigma_range
        if min(self.rotation_range, lo, hi, self.brightness, self.contrast, self.saturation) < 0:
            raise ConfigError("perturbation ranges must be non-negative")
        if lo > hi or (self.blur and lo <= 0):
            raise ConfigError("blur sigma range must satisfy 0 < lo <= hi")
        if max(self.brightness, self.contrast, self.saturation) > 1:
            raise ConfigError("jitter magnitudes must be at most 1")

    @classmethod
    def identity(cls) -> "PerturbConfig":
        return cls(rotation_range=0.0, blur=False, blur_sigma_range=(0.0, 0.0),
                   brightness=0.0, contrast=0.0, saturation=0.0)


@dataclass
class PerturbedImage:
    sample_id: str
    source_id: str
    label: int
    image: np.ndarray
    params: dict = field(default_factory=dict)
    quality: str = "adversarial"


def stream_rng(seed: int, key: str) -> np.random.Generator:
    """Per-item generator derived from (seed, key) only, independent of processing order."""
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *np.frombuffer(digest[:16], dtype="<u4").tolist()])


def perturb_one(img: np.ndarray, rng: np.random.Generator, config: PerturbConfig) -> tuple[np.ndarray, dict]:
    angle = float(rng.uniform(-config.rotation_range, config.rotation_range))
    sigma = float(rng.uniform(*config.blur_sigma_range))
    b = float(rng.uniform(1 - config.brightness, 1 + config.brightness))
    c = float(rng.uniform(1 - config.contrast, 1 + config.contrast))
    s = float(rng.uniform(1 - config.saturation, 1 + config.saturation))
    out = rotate(img, angle)
    if config.blur:
        out = gaussian_blur(out, config.blur_kernel, sigma)
    out = color_jitter(out, b, c, s)
    params = {"angle": angle, "sigma": sigma if config.blur else 0.0,
              "brightness": b, "contrast": c, "saturation": s}
    return out, params


def make_adversarial(images, labels, sample_ids, config: PerturbConfig | None = None,
                     seed: int = 0, suffix: str = "~adv") -> list[PerturbedImage]:
    """Rotate, blur and colour-jitter every image of a class-balanced set."""
    config = config or PerturbConfig()
    labels = np.asarray(labels, dtype=np.int64)
    if not (len(images) == labels.size == len(sample_ids)):
        raise DimensionError("images, labels and ids must have equal length")
    counts = np.bincount(labels)
    present = counts[counts > 0]
    if present.size == 0 or np.any(present != present[0]):
        raise InsufficientDataError(f"input must be class-balanced, got counts {counts.tolist()}")
    out = []
    for img, lab, sid in zip(images, labels, sample_ids):
        check_image(img)
        pimg, params = perturb_one(img, stream_rng(seed, sid), config)
        out.append(PerturbedImage(f"{sid}{suffix}", sid, int(lab), pimg, params))
    return out


# ---------------------------------------------------------------------------
# Synthetic fundus-like images
# ---------------------------------------------------------------------------

def synth_fundus(stage: int, rng: np.random.Generator, size: int = 112) -> np.ndarray:
    """Orange retinal disc on black with an off-centre optic disc, a few
    vessels, and a stage-dependent number of dark lesions."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    c = (size - 1) / 2.0
    r = np.hypot(yy - c, xx - c) / (0.46 * size)
    disc = (r <= 1.0).astype(float)
    base = np.array([0.78, 0.36, 0.16]) * (1.0 - 0.35 * r[..., None] ** 2)
    img = base * disc[..., None]
    oy, ox = c + rng.normal(0, 2), c + 0.22 * size + rng.normal(0, 2)
    od = np.exp(-(((yy - oy) ** 2 + (xx - ox) ** 2) / (2 * (0.06 * size) ** 2)))
    img = img + od[..., None] * np.array([0.2, 0.45, 0.35]) * disc[..., None]
    for k in range(4):
        ang = rng.uniform(0, 2 * math.pi)
        dist = np.abs((yy - oy) * math.cos(ang) - (xx - ox) * math.sin(ang))
        along = (yy - oy) * math.sin(ang) + (xx - ox) * math.cos(ang)
        vessel = np.exp(-(dist ** 2) / 1.5) * (along > 0)
        img = img - vessel[..., None] * np.array([0.25, 0.2, 0.08]) * disc[..., None]
    for _ in range(4 * int(stage)):
        ly, lx = rng.uniform(0.2 * size, 0.8 * size, 2)
        rad = rng.uniform(0.012, 0.03) * size
        spot = np.exp(-(((yy - ly) ** 2 + (xx - lx) ** 2) / (2 * rad * rad)))
        tint = np.array([0.5, 0.1, 0.05]) if rng.random() < 0.6 else np.array([-0.1, -0.3, -0.2])
        img = img - spot[..., None] * tint * disc[..., None]
    img = img + rng.normal(0, 0.01, img.shape) * disc[..., None]
    return np.clip(img, 0.0, 1.0)
