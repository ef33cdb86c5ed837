"""Light and heavy chest-X-ray style augmentation for images with boxes.

Light: translation -> gaussian scale ``1/2**eps`` -> rotation -> shear ->
perspective (with probability) -> gamma ``x**(2**eps)``.  Heavy adds blur,
additive gaussian noise and salt-and-pepper noise, each behind its own
probability.  Angles are in degrees.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .metrics import BoundingBox

log = logging.getLogger(__name__)


@dataclass
class AugmentConfig:
    translate_px: float = 32.0
    scale_sigma: float = 0.1
    rotate_range: float = 5.0
    shear: float = 2.5
    perspective: float = 0.1
    perspective_prob: float = 0.5
    gamma_sigma: float = 0.20
    heavy: bool = False
    blur_prob: float = 0.3
    blur_sigma: float = 1.0
    noise_prob: float = 0.3
    noise_sigma: float = 0.03
    salt_pepper_prob: float = 0.3
    salt_pepper_density: float = 0.02
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("translate_px", "scale_sigma", "rotate_range", "shear", "perspective",
                     "gamma_sigma", "blur_sigma", "noise_sigma", "salt_pepper_density"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("perspective_prob", "blur_prob", "noise_prob", "salt_pepper_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def heavy_preset(cls, **overrides) -> "AugmentConfig":
        """Larger scale/gamma spread, no rotation, noise ops enabled."""
        base = dict(scale_sigma=0.15, gamma_sigma=0.25, rotate_range=0.0, heavy=True)
        base.update(overrides)
        return cls(**base)


# geometry -------------------------------------------------------------------

def _about_center(m: np.ndarray, cy: float, cx: float) -> np.ndarray:
    to = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=np.float64)
    back = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    return to @ m @ back


def affine_matrix(shape, tx=0.0, ty=0.0, scale=1.0, rotate_deg=0.0, shear_deg=0.0) -> np.ndarray:
    """Forward 3x3 map on (x, y, 1): translate, then scale, rotate and shear about the centre."""
    cy, cx = (shape[0] - 1) / 2, (shape[1] - 1) / 2
    t = np.array([[1, 0, tx], [0, 1, ty], [0, 0, 1]], dtype=np.float64)
    s = np.diag([scale, scale, 1.0])
    r = np.deg2rad(rotate_deg)
    rot = np.array([[np.cos(r), -np.sin(r), 0], [np.sin(r), np.cos(r), 0], [0, 0, 1]])
    sh = np.array([[1, np.tan(np.deg2rad(shear_deg)), 0], [0, 1, 0], [0, 0, 1]])
    return _about_center(sh, cy, cx) @ _about_center(rot, cy, cx) @ _about_center(s, cy, cx) @ t


def perspective_matrix(shape, offsets: np.ndarray) -> np.ndarray:
    """Homography moving the four image corners by ``offsets`` (4x2, pixels)."""
    h, w = shape[0] - 1, shape[1] - 1
    src = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
    dst = src + offsets
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    p = np.linalg.solve(np.array(a), np.array(b))
    return np.append(p, 1.0).reshape(3, 3)


def _apply(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    hom = np.c_[pts, np.ones(len(pts))] @ m.T
    return hom[:, :2] / hom[:, 2:3]


def warp(image: np.ndarray, boxes, matrix: np.ndarray):
    """Warp with the forward ``matrix`` (bilinear, zero fill) and map boxes through it.

    Boxes are transformed by their four corner pixel centres, re-bounded,
    clipped to the image and dropped if they collapse to zero area.
    """
    H, W = image.shape
    inv = np.linalg.inv(matrix)
    yy, xx = np.mgrid[:H, :W].astype(np.float64)
    src = _apply(inv, np.c_[xx.ravel(), yy.ravel()])
    out = ndimage.map_coordinates(image, [src[:, 1], src[:, 0]], order=1, mode="constant", cval=0.0)
    out = out.reshape(H, W)
    new_boxes = []
    for b in boxes:
        corners = np.array([[b.x, b.y], [b.x + b.w - 1, b.y], [b.x, b.y + b.h - 1],
                            [b.x + b.w - 1, b.y + b.h - 1]], dtype=np.float64)
        p = np.round(_apply(matrix, corners), 6)
        x0 = max(int(np.floor(p[:, 0].min())), 0)
        y0 = max(int(np.floor(p[:, 1].min())), 0)
        x1 = min(int(np.ceil(p[:, 0].max())), W - 1)
        y1 = min(int(np.ceil(p[:, 1].max())), H - 1)
        if x1 < x0 or y1 < y0:
            log.warning("box %s left the image after augmentation; dropped", b)
            continue
        new_boxes.append(BoundingBox(x0, y0, x1 - x0 + 1, y1 - y0 + 1, b.class_id))
    return out, new_boxes


def random_geometry(shape, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    tx, ty = rng.uniform(-cfg.translate_px, cfg.translate_px, size=2) if cfg.translate_px else (0.0, 0.0)
    scale = 1.0 / 2 ** (rng.normal(0, cfg.scale_sigma)) if cfg.scale_sigma else 1.0
    rot = rng.uniform(-cfg.rotate_range, cfg.rotate_range) if cfg.rotate_range else 0.0
    shear = rng.uniform(-cfg.shear, cfg.shear) if cfg.shear else 0.0
    m = affine_matrix(shape, tx, ty, scale, rot, shear)
    if cfg.perspective and rng.random() < cfg.perspective_prob:
        size = np.array([shape[1] - 1, shape[0] - 1], dtype=np.float64)
        offsets = rng.uniform(-cfg.perspective, cfg.perspective, size=(4, 2)) * size
        m = perspective_matrix(shape, offsets) @ m
    return m


def augment_light(image: np.ndarray, boxes, cfg: AugmentConfig, rng: np.random.Generator):
    image = np.asarray(image, dtype=np.float64)
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    m = random_geometry(image.shape, cfg, rng)
    if np.allclose(m, np.eye(3)):
        out, boxes = image.copy(), list(boxes)
    else:
        out, boxes = warp(image, boxes, m)
    if cfg.gamma_sigma:
        out = np.clip(out, 0, 1) ** (2 ** rng.normal(0, cfg.gamma_sigma))
    return np.clip(out, 0, 1), boxes


def augment_heavy(image: np.ndarray, boxes, cfg: AugmentConfig, rng: np.random.Generator):
    out, boxes = augment_light(image, boxes, cfg, rng)
    if rng.random() < cfg.blur_prob and cfg.blur_sigma:
        out = ndimage.gaussian_filter(out, cfg.blur_sigma, mode="reflect")
    if rng.random() < cfg.noise_prob and cfg.noise_sigma:
        out = out + rng.normal(0, cfg.noise_sigma, size=out.shape)
    if rng.random() < cfg.salt_pepper_prob and cfg.salt_pepper_density:
        hit = rng.random(out.shape) < cfg.salt_pepper_density
        salt = rng.random(out.shape) < 0.5
        out = np.where(hit, np.where(salt, 1.0, 0.0), out)
    return np.clip(out, 0, 1), boxes


def augment(image, boxes, cfg: AugmentConfig, rng):
    return (augment_heavy if cfg.heavy else augment_light)(image, boxes, cfg, rng)


def no_augment_config() -> AugmentConfig:
    return AugmentConfig(translate_px=0, scale_sigma=0, rotate_range=0, shear=0, perspective=0,
                         gamma_sigma=0, blur_prob=0, noise_prob=0, salt_pepper_prob=0)

