"""Discretization arithmetic for the score pyramid.

Index conventions follow the 1-based notation used throughout the matching
literature for the public helpers (``target_coord``, ``ref_coord``); array
code elsewhere in the package uses 0-based offsets ``kk = k - 1``.

Index pairs are ``(row, col)``. The four aggregation corners are, in order,
``(-1, -1), (-1, +1), (+1, +1), (+1, -1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

CORNERS = np.array([[-1, -1], [-1, 1], [1, 1], [1, -1]], dtype=np.int64)


class GeometryError(ValueError):
    """Raised when discretization parameters break a divisibility invariant."""


@dataclass(frozen=True)
class LevelGeometry:
    level: int
    R: int
    gamma0: int = 1
    alpha0: int = 8
    beta0: int = 4
    delta0: int = 8
    eta0: int = 1
    H: int = 1
    W: int = 1

    def __post_init__(self):
        validate(self.gamma0, self.alpha0, self.delta0, self.eta0)
        if self.level < 0:
            raise GeometryError("level must be >= 0")
        if self.R < 1:
            raise GeometryError("R must be >= 1")

    @property
    def tau(self) -> Fraction:
        if self.level == 0:
            return Fraction(0)
        half = Fraction(self.delta0, 2 * self.alpha0)
        return half - math.ceil(half)

    @property
    def k_extent(self) -> int:
        return 2 * self.R + 1

    @property
    def q_stride(self) -> int:
        """Pixel distance between neighbouring displacement samples."""
        return (2**self.level) * self.gamma0

    def next(self) -> "LevelGeometry":
        return replace(self, level=self.level + 1, R=next_range(self.R))


def validate(gamma0: int, alpha0: int, delta0: int, eta0: int) -> None:
    for name, v in (("gamma0", gamma0), ("alpha0", alpha0), ("delta0", delta0), ("eta0", eta0)):
        if int(v) != v or v <= 0:
            raise GeometryError(f"{name} must be a positive integer, got {v!r}")
    if eta0 % gamma0:
        raise GeometryError(f"gamma0 must divide eta0 (gamma0={gamma0}, eta0={eta0})")
    if delta0 % alpha0:
        raise GeometryError(f"alpha0 must divide delta0 (alpha0={alpha0}, delta0={delta0})")
    if alpha0 % gamma0:
        raise GeometryError(f"gamma0 must divide alpha0 (gamma0={gamma0}, alpha0={alpha0})")


def next_range(R: int) -> int:
    if R < 1:
        raise GeometryError("R must be >= 1")
    return -(-R // 2)


def range_sequence(R0: int, levels: int) -> list[int]:
    out = [R0]
    for _ in range(levels):
        out.append(next_range(out[-1]))
    return out


def target_coord(geom: LevelGeometry, k, p) -> np.ndarray:
    """Target pixel for displacement index ``k`` (1-based) at reference pixel ``p``."""
    k = np.asarray(k, dtype=np.int64)
    if np.any(k < 1) or np.any(k > geom.k_extent):
        raise IndexError(f"displacement index {k.tolist()} outside 1..{geom.k_extent}")
    return geom.q_stride * (k - 1 - geom.R) + np.asarray(p)


def ref_coord(geom: LevelGeometry, i) -> np.ndarray:
    """Reference pixel of grid index ``i`` (1-based)."""
    i = np.asarray(i, dtype=np.int64)
    if np.any(i < 1) or i[..., 0].max() > geom.H or i[..., 1].max() > geom.W:
        raise IndexError(f"grid index {i.tolist()} outside {geom.H}x{geom.W}")
    p = [geom.alpha0 * (Fraction(int(c)) - 1 + geom.tau) + geom.beta0 for c in i.ravel()]
    if all(v.denominator == 1 for v in p):
        return np.array([int(v) for v in p], dtype=np.int64).reshape(i.shape)
    return np.array([float(v) for v in p]).reshape(i.shape)


def grid_positions(geom: LevelGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates of every grid row and column (0-based arrays)."""
    base = geom.alpha0 * geom.tau + geom.beta0
    rows = geom.alpha0 * np.arange(geom.H) + float(base)
    cols = geom.alpha0 * np.arange(geom.W) + float(base)
    return rows, cols


def pool_params(geom: LevelGeometry) -> tuple[int, int, int, int]:
    """Window, stride and (left, right) padding of the k-pooling from ``geom.level``."""
    h = geom.eta0 // geom.gamma0
    R_next = next_range(geom.R)
    window = 1 + 2 * h
    pad = h + 2 * R_next - geom.R
    if pad < 0:
        raise GeometryError(f"negative pooling padding {pad}")
    extent = (2 * geom.R + 1 + 2 * pad - window) // 2 + 1
    if extent != 2 * R_next + 1:
        raise GeometryError(f"pooled extent {extent} != {2 * R_next + 1}")
    return window, 2, pad, pad


def aggregation_shifts(geom: LevelGeometry) -> np.ndarray:
    """Grid-index offsets of the four aggregated children.

    Returns a ``(4, 2)`` integer array; child ``c`` of coarse cell ``i`` is the
    slice ``i + shifts[c]`` of the pooled map at ``geom.level``.
    """
    ratio = Fraction(geom.delta0, geom.alpha0)
    if geom.level >= 1:
        raw = [[Fraction(2 ** (geom.level - 1)) * ratio * int(e) for e in eps] for eps in CORNERS]
    else:
        base = math.ceil(ratio / 2)
        raw = [[base + ratio * Fraction(int(e) - 1, 2) for e in eps] for eps in CORNERS]
    if any(v.denominator != 1 for row in raw for v in row):
        raise GeometryError(f"non-integer aggregation shift at level {geom.level}")
    return np.array([[int(v) for v in row] for row in raw], dtype=np.int64)


@dataclass(frozen=True)
class Discretization:
    """Global sampling parameters shared by every pyramid level."""

    levels: int = 6
    R0: int = 80
    alpha0: int = 8
    beta0: int = 4
    gamma0: int = 1
    delta0: int = 8
    eta0: int = 1

    def __post_init__(self):
        validate(self.gamma0, self.alpha0, self.delta0, self.eta0)
        if self.levels < 0:
            raise GeometryError("levels must be >= 0")
        if self.R0 < 1:
            raise GeometryError("R0 must be >= 1")
        if self.beta0 < 0 or self.beta0 % self.gamma0:
            raise GeometryError(
                f"gamma0 must divide beta0 so reference pixels fall on the target grid "
                f"(gamma0={self.gamma0}, beta0={self.beta0})"
            )

    def grid_shape(self, image_shape: tuple[int, int]) -> tuple[int, int]:
        h, w = image_shape[:2]
        if h <= self.beta0 or w <= self.beta0:
            raise GeometryError(f"image {h}x{w} holds no reference grid point")
        return (h - 1 - self.beta0) // self.alpha0 + 1, (w - 1 - self.beta0) // self.alpha0 + 1

    def level_geometries(self, image_shape: tuple[int, int]) -> list[LevelGeometry]:
        H, W = self.grid_shape(image_shape)
        g = LevelGeometry(
            level=0, R=self.R0, gamma0=self.gamma0, alpha0=self.alpha0, beta0=self.beta0,
            delta0=self.delta0, eta0=self.eta0, H=H, W=W,
        )
        out = [g]
        for _ in range(self.levels):
            out.append(out[-1].next())
        return out
