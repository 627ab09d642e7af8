"""Deterministic synthetic image pairs with known flow."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .matching import FlowField

TEXTURES = ("noise", "checker")
MOTIONS = ("translation", "affine", "warp")


class SyntheticError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    shape: tuple[int, int] = (128, 128)
    texture: str = "noise"
    motion: str = "translation"
    magnitude: float = 4.0
    seed: int = 0
    params: tuple | None = None  # explicit (dx, dy) for translations
    max_displacement: int = 80

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise SyntheticError(f"unknown texture {self.texture!r}")
        if self.motion not in MOTIONS:
            raise SyntheticError(f"unknown motion {self.motion!r}")
        if self.shape[0] <= 0 or self.shape[1] <= 0:
            raise SyntheticError("extent must be positive")
        if self.magnitude > self.max_displacement:
            raise SyntheticError(
                f"motion magnitude {self.magnitude} exceeds the scoreable range {self.max_displacement}"
            )


def texture(shape, kind: str, rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    img = np.zeros(shape)
    for sigma, weight in ((1.0, 0.5), (2.0, 1.0), (4.0, 1.0)):
        layer = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
        img += weight * layer / layer.std()
    if kind == "checker":
        yy, xx = np.indices(shape)
        img = 0.5 * img + 2.0 * (((yy // 8) + (xx // 8)) % 2 - 0.5)
    img = (img - img.min()) / (img.max() - img.min())
    return np.round(img * 255).astype(np.uint8)


def _forward_field(spec: SyntheticSpec, rng: np.random.Generator):
    """Return ``f(y, x) -> (dy, dx)`` giving the displacement of reference points."""
    h, w = spec.shape
    if spec.motion == "translation":
        if spec.params is not None:
            dx, dy = (float(v) for v in spec.params)
        else:
            ang = rng.uniform(0, 2 * np.pi)
            dx, dy = np.round(spec.magnitude * np.cos(ang)), np.round(spec.magnitude * np.sin(ang))
        if max(abs(dx), abs(dy)) > spec.max_displacement:
            raise SyntheticError(f"translation ({dx}, {dy}) exceeds range {spec.max_displacement}")
        return lambda y, x: (np.full_like(y, dy, dtype=float), np.full_like(x, dx, dtype=float))
    if spec.motion == "affine":
        lin = rng.uniform(-1, 1, size=(2, 2))
        cy, cx = (h - 1) / 2, (w - 1) / 2
        corner = np.array([[cy, cx], [cy, -cx], [-cy, cx], [-cy, -cx]])
        reach = np.abs(corner @ lin.T).max()
        shift = rng.uniform(-1, 1, size=2)
        # split the magnitude budget between the linear part and the shift
        lin *= 0.5 * spec.magnitude / max(reach, 1e-12)
        shift *= 0.5 * spec.magnitude / np.sqrt(2)
        return lambda y, x: (
            lin[0, 0] * (y - cy) + lin[0, 1] * (x - cx) + shift[0],
            lin[1, 0] * (y - cy) + lin[1, 1] * (x - cx) + shift[1],
        )
    fields = []
    for _ in range(2):
        f = ndimage.gaussian_filter(rng.standard_normal((h, w)), max(h, w) / 8, mode="reflect")
        fields.append(f)
    peak = max(np.hypot(*fields).max(), 1e-12)
    fy, fx = (spec.magnitude * f / peak for f in fields)

    def warp(y, x):
        coords = np.stack([y, x])
        return (ndimage.map_coordinates(fy, coords, order=1, mode="nearest"),
                ndimage.map_coordinates(fx, coords, order=1, mode="nearest"))

    return warp


def generate_pair(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, FlowField]:
    """Reference image, target image and the ground-truth flow from reference to target."""
    rng = np.random.default_rng(spec.seed)
    img0 = texture(spec.shape, spec.texture, rng)
    field = _forward_field(spec, rng)
    h, w = spec.shape
    yy, xx = np.indices(spec.shape).astype(float)
    dy, dx = field(yy, xx)
    if np.hypot(dx, dy).max() > spec.max_displacement + 1e-9:
        raise SyntheticError("generated motion exceeds the scoreable range")
    # inverse warp: find the reference point x with x + flow(x) = y
    sy, sx = yy.copy(), xx.copy()
    for _ in range(30):
        fy, fx = field(sy, sx)
        ny, nx = yy - fy, xx - fx
        done = np.allclose(ny, sy, atol=1e-10) and np.allclose(nx, sx, atol=1e-10)
        sy, sx = ny, nx
        if done:
            break
    img1 = ndimage.map_coordinates(img0.astype(float), np.stack([sy, sx]), order=1, mode="nearest")
    img1 = np.clip(np.round(img1), 0, 255).astype(np.uint8)
    ty, tx = yy + dy, xx + dx
    valid = (ty >= 0) & (ty <= h - 1) & (tx >= 0) & (tx <= w - 1)
    return img0, img1, FlowField(dx, dy, valid)
