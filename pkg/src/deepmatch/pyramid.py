"""Fine-to-coarse score pyramid: correlation, k-max-pooling with switches, aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .descriptors import DescriptorField
from .geometry import Discretization, GeometryError, LevelGeometry, aggregation_shifts, pool_params

SENTINEL = -np.inf
NO_SWITCH = -1


class ConfigError(ValueError):
    pass


def is_sentinel(x) -> np.ndarray:
    return np.asarray(x) <= -1e30


@dataclass
class ScoreMap:
    """Scores indexed ``(i_row, i_col, k_row, k_col)`` with 0-based ``k``.

    ``stage`` is ``"full"`` for the maps of a whole level and ``"pooled"`` for
    the half-level maps produced by k-pooling (whose ``geom`` is the level that
    was pooled, while the k extent already matches the next level).
    """

    data: np.ndarray
    geom: LevelGeometry
    stage: str = "full"

    @property
    def level(self) -> float:
        return self.geom.level + (0.5 if self.stage == "pooled" else 0.0)

    @property
    def R(self) -> int:
        return (self.data.shape[2] - 1) // 2


@dataclass
class PyramidState:
    geoms: list[LevelGeometry]
    maps: list[ScoreMap]
    pooled: list[ScoreMap]
    switches: list[np.ndarray]
    prepower: list[np.ndarray]
    exponents: np.ndarray
    corr_raw: np.ndarray | None = None
    ref: DescriptorField | None = None
    tgt: DescriptorField | None = None
    extras: dict = field(default_factory=dict)

    @property
    def L(self) -> int:
        return len(self.maps) - 1


def reference_pixels(geom: LevelGeometry) -> tuple[np.ndarray, np.ndarray]:
    rows = geom.beta0 + geom.alpha0 * np.arange(geom.H)
    cols = geom.beta0 + geom.alpha0 * np.arange(geom.W)
    return rows, cols


def _target_windows(ref: DescriptorField, tgt: DescriptorField, geom: LevelGeometry):
    """Yield ``(r, c, window, valid)`` with the target descriptors each reference cell sees."""
    R, g = geom.R, geom.gamma0
    if tgt.stride != g or tgt.offset != 0:
        raise GeometryError(f"target field must have stride {g} and offset 0")
    if ref.shape != (geom.H, geom.W):
        raise GeometryError(f"reference field {ref.shape} does not match grid {(geom.H, geom.W)}")
    ht, wt = tgt.shape
    padded = np.zeros((ht + 2 * R, wt + 2 * R, tgt.d))
    padded[R:R + ht, R:R + wt] = tgt.values
    inside = np.zeros((ht + 2 * R, wt + 2 * R), dtype=bool)
    inside[R:R + ht, R:R + wt] = True
    rows, cols = reference_pixels(geom)
    K = geom.k_extent
    for r, pr in enumerate(rows):
        for c, pc in enumerate(cols):
            tr, tc = pr // g, pc // g
            yield r, c, padded[tr:tr + K, tc:tc + K], inside[tr:tr + K, tc:tc + K]


def correlate(ref: DescriptorField, tgt: DescriptorField, geom: LevelGeometry) -> tuple[ScoreMap, np.ndarray]:
    """Rectified cosine scores; also returns the raw correlation (SENTINEL off-image)."""
    if ref.d != tgt.d:
        raise ValueError(f"descriptor dimensions differ: {ref.d} vs {tgt.d}")
    K = geom.k_extent
    raw = np.full((geom.H, geom.W, K, K), SENTINEL)
    for r, c, win, valid in _target_windows(ref, tgt, geom):
        raw[r, c] = np.where(valid, win @ ref.values[r, c], SENTINEL)
    scores = np.where(is_sentinel(raw), SENTINEL, np.maximum(raw, 0.0))
    return ScoreMap(scores, geom, "full"), raw


def correlate_backward(grad: np.ndarray, raw: np.ndarray, ref: DescriptorField, tgt: DescriptorField,
                       geom: LevelGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. reference and target descriptor values."""
    g = np.where(raw > 0, grad, 0.0)
    g_ref = np.zeros_like(ref.values)
    R, K = geom.R, geom.k_extent
    ht, wt = tgt.shape
    g_tgt = np.zeros((ht + 2 * R, wt + 2 * R, tgt.d))
    rows, cols = reference_pixels(geom)
    gam = geom.gamma0
    for r, c, win, _ in _target_windows(ref, tgt, geom):
        gc = g[r, c]
        if not gc.any():
            continue
        g_ref[r, c] = np.tensordot(gc, win, axes=([0, 1], [0, 1]))
        tr, tc = rows[r] // gam, cols[c] // gam
        g_tgt[tr:tr + K, tc:tc + K] += gc[..., None] * ref.values[r, c]
    return g_ref, g_tgt[R:R + ht, R:R + wt]


def max_pool(smap: ScoreMap) -> tuple[ScoreMap, np.ndarray]:
    """Pool over the displacement axes; switches hold flat input indices or ``NO_SWITCH``."""
    geom = smap.geom
    window, stride, pad_lo, pad_hi = pool_params(geom)
    K = smap.data.shape[2]
    Ko = 2 * geom.next().R + 1
    H, W = smap.data.shape[:2]
    out = np.empty((H, W, Ko, Ko))
    switches = np.empty((H, W, Ko, Ko), dtype=np.int64)
    base = stride * np.arange(Ko) - pad_lo
    for r in range(H):
        padded = np.pad(smap.data[r], ((0, 0), (pad_lo, pad_hi), (pad_lo, pad_hi)), constant_values=SENTINEL)
        win = sliding_window_view(padded, (window, window), axis=(1, 2))[:, ::stride, ::stride]
        flat = win.reshape(W, Ko, Ko, window * window)
        arg = flat.argmax(axis=-1)
        vals = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        dr, dc = np.divmod(arg, window)
        kr = base[:, None] + dr
        kc = base[None, :] + dc
        sw = kr * K + kc
        empty = is_sentinel(vals)
        out[r] = np.where(empty, SENTINEL, vals)
        switches[r] = np.where(empty, NO_SWITCH, sw)
    return ScoreMap(out, geom, "pooled"), switches


def shifted_slices(shape: tuple[int, int], shift) -> tuple[tuple[slice, slice], tuple[slice, slice]]:
    """Slices ``dst, src`` such that ``dst`` cell ``i`` pairs with ``src`` cell ``i + shift`` in-grid."""
    out = []
    for n, s in zip(shape, shift):
        s = int(s)
        lo, hi = max(0, -s), min(n, n - s)
        out.append((slice(lo, max(lo, hi)), slice(lo + s, max(lo, hi) + s)))
    (d0, s0), (d1, s1) = out
    return (d0, d1), (s0, s1)


def aggregate(pooled: ScoreMap, nu: float) -> tuple[ScoreMap, np.ndarray]:
    """Average four corner slices (SENTINEL and off-grid count as 0), then raise to ``nu``."""
    if not nu > 0:
        raise ConfigError(f"aggregation exponent must be > 0, got {nu}")
    geom = pooled.geom
    shifts = aggregation_shifts(geom)
    src = np.where(is_sentinel(pooled.data), 0.0, pooled.data)
    pre = np.zeros_like(src)
    for sh in shifts:
        dst, s = shifted_slices(src.shape[:2], sh)
        pre[dst] += src[s]
    pre *= 0.25
    return ScoreMap(pre**nu, geom.next(), "full"), pre


def pyramid_from_scores(s0: ScoreMap, exponents) -> PyramidState:
    exponents = np.asarray(exponents, dtype=np.float64)
    maps, pooled, switches, prepower = [s0], [], [], []
    for nu in exponents:
        half, sw = max_pool(maps[-1])
        nxt, pre = aggregate(half, float(nu))
        pooled.append(half)
        switches.append(sw)
        prepower.append(pre)
        maps.append(nxt)
    return PyramidState(
        geoms=[m.geom for m in maps], maps=maps, pooled=pooled, switches=switches,
        prepower=prepower, exponents=exponents,
    )


def build_pyramid(ref: DescriptorField, tgt: DescriptorField, disc: Discretization, exponents,
                  image_shape: tuple[int, int]) -> PyramidState:
    exponents = np.asarray(exponents, dtype=np.float64)
    if len(exponents) != disc.levels:
        raise ConfigError(f"expected {disc.levels} exponents, got {len(exponents)}")
    geom0 = disc.level_geometries(image_shape)[0]
    s0, raw = correlate(ref, tgt, geom0)
    state = pyramid_from_scores(s0, exponents)
    state.corr_raw, state.ref, state.tgt = raw, ref, tgt
    return state
