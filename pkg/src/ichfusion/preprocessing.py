"""HU conversion, three-window channel rendering and training augmentations."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class WindowSpec:
    level: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ConfigError(f"window width must be positive, got {self.width}")


BRAIN = WindowSpec(40.0, 80.0)
SUBDURAL = WindowSpec(75.0, 215.0)
BONE = WindowSpec(600.0, 2800.0)
WINDOWS = (BRAIN, SUBDURAL, BONE)


def to_hu(raw, slope: float, intercept: float):
    if slope == 0:
        raise ConfigError("rescale slope must be non-zero")
    return np.asarray(raw, dtype=np.float64) * slope + intercept


def apply_window(hu, window: WindowSpec):
    lo = window.level - window.width / 2.0
    return np.clip((np.asarray(hu, dtype=np.float64) - lo) / window.width, 0.0, 1.0)


def compose_channels(hu) -> np.ndarray:
    """Stack brain, subdural and bone windows as channels: [..., H, W] -> [..., 3, H, W]."""
    hu = np.asarray(hu, dtype=np.float64)
    return np.stack([apply_window(hu, w) for w in WINDOWS], axis=-3)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation switches and ranges. Probabilities are per image (or per block)."""

    crop_p: float = 0.0
    crop_scale: tuple[float, float] = (0.8, 1.0)
    flip_p: float = 0.0
    rotate_p: float = 0.0
    max_rotation: float = 15.0  # degrees
    distort_p: float = 0.0
    distort_scale: float = 0.1  # anisotropic scale jitter, +/- fraction
    noise_p: float = 0.0
    noise_sigma: float = 0.02
    cutmix_p: float = 0.0
    cutmix_alpha: float = 1.0

    def __post_init__(self):
        for name in ("crop_p", "flip_p", "rotate_p", "distort_p", "noise_p", "cutmix_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not self.cutmix_alpha > 0:
            raise ConfigError(f"cutmix_alpha must be > 0, got {self.cutmix_alpha}")
        if not 0.0 <= self.distort_scale < 1.0:
            raise ConfigError(f"distort_scale must lie in [0, 1), got {self.distort_scale}")

    @classmethod
    def training_default(cls) -> "AugmentConfig":
        return cls(crop_p=0.5, flip_p=0.5, rotate_p=0.5, distort_p=0.3, noise_p=0.3, cutmix_p=0.3)


@dataclass(frozen=True)
class AugmentParams:
    """One concrete draw of geometric/noise augmentation."""

    flip: bool = False
    angle: float = 0.0  # degrees
    crop: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)  # y0, x0, h, w as fractions
    scale: tuple[float, float] = (1.0, 1.0)
    noise_sigma: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self == AugmentParams()


def draw_augment_params(rng: np.random.Generator, cfg: AugmentConfig) -> AugmentParams:
    # Every draw happens regardless of the enable flags so the stream length is fixed.
    u = rng.random(5)
    flip = bool(u[0] < cfg.flip_p)
    angle = float(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    angle = angle if u[1] < cfg.rotate_p else 0.0
    side = rng.uniform(*cfg.crop_scale)
    off = rng.random(2)
    crop = (0.0, 0.0, 1.0, 1.0)
    if u[2] < cfg.crop_p:
        crop = (float(off[0] * (1 - side)), float(off[1] * (1 - side)), float(side), float(side))
    jitter = rng.uniform(-cfg.distort_scale, cfg.distort_scale, size=2)
    scale = (1.0, 1.0)
    if u[3] < cfg.distort_p:
        scale = (1.0 + float(jitter[0]), 1.0 + float(jitter[1]))
    sigma = cfg.noise_sigma if u[4] < cfg.noise_p else 0.0
    return AugmentParams(flip, angle, crop, scale, sigma)


def _affine(params: AugmentParams, h: int, w: int):
    """Matrix/offset mapping output pixel coords to input coords (for ndimage)."""
    y0, x0, ch, cw = params.crop
    # output -> crop window (resize back to full size)
    crop = np.diag([ch, cw])
    crop_off = np.array([y0 * h, x0 * w])
    theta = math.radians(params.angle)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    scale = np.diag([1.0 / params.scale[0], 1.0 / params.scale[1]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    # rotate/scale about the centre of the cropped view
    m = crop @ rot @ scale
    offset = crop_off + crop @ centre - m @ centre
    return m, offset


def apply_augment(image, params: AugmentParams, rng: np.random.Generator | None = None):
    """Apply a drawn augmentation to ``image`` [..., H, W]; every leading plane gets the same warp."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[-2:]
    out = img
    if params.crop != (0.0, 0.0, 1.0, 1.0) or params.angle != 0.0 or params.scale != (1.0, 1.0):
        m, offset = _affine(params, h, w)
        planes = img.reshape(-1, h, w)
        out = np.stack(
            [ndimage.affine_transform(p, m, offset=offset, order=1, mode="constant", cval=0.0) for p in planes]
        ).reshape(img.shape)
    if params.flip:
        out = out[..., ::-1]
    if params.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise augmentation needs an rng")
        out = np.clip(out + rng.normal(0.0, params.noise_sigma, size=out.shape), 0.0, 1.0)
    return np.ascontiguousarray(out)


def augment(image, label, rng: np.random.Generator, cfg: AugmentConfig):
    """Randomly augment one image; the label is returned unchanged."""
    params = draw_augment_params(rng, cfg)
    return apply_augment(image, params, rng), np.asarray(label, dtype=np.float64)


def hflip(image):
    return np.ascontiguousarray(np.asarray(image)[..., ::-1])


# ---------------------------------------------------------------- CutMix


def cutmix_box(h: int, w: int, lam: float, rng: np.random.Generator):
    """Box (y0, y1, x0, x1) of area fraction about ``1 - lam``, clipped to the image."""
    cut = math.sqrt(1.0 - lam)
    ch, cw = int(round(h * cut)), int(round(w * cut))
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    if ch >= h and cw >= w:
        return 0, h, 0, w
    y0, y1 = np.clip([cy - ch // 2, cy - ch // 2 + ch], 0, h)
    x0, x1 = np.clip([cx - cw // 2, cx - cw // 2 + cw], 0, w)
    return int(y0), int(y1), int(x0), int(x1)


def cutmix(a, b, rng: np.random.Generator, alpha: float = 1.0, lam: float | None = None):
    """Paste a random box from ``b`` into ``a`` and blend labels by surviving area.

    ``a`` and ``b`` are ``(image, label)`` pairs; images may carry any leading
    axes (channels, slices) and share one box. ``lam`` overrides the Beta draw.
    """
    img_a, lab_a = np.asarray(a[0], dtype=np.float64), np.asarray(a[1], dtype=np.float64)
    img_b, lab_b = np.asarray(b[0], dtype=np.float64), np.asarray(b[1], dtype=np.float64)
    if img_a.shape != img_b.shape:
        raise ShapeError(f"cutmix images differ in shape: {img_a.shape} vs {img_b.shape}")
    if lab_a.shape != lab_b.shape:
        raise ShapeError(f"cutmix labels differ in shape: {lab_a.shape} vs {lab_b.shape}")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    h, w = img_a.shape[-2:]
    y0, y1, x0, x1 = cutmix_box(h, w, lam, rng)
    out = img_a.copy()
    out[..., y0:y1, x0:x1] = img_b[..., y0:y1, x0:x1]
    lam_adj = 1.0 - (y1 - y0) * (x1 - x0) / (h * w)
    return out, lam_adj * lab_a + (1.0 - lam_adj) * lab_b
