"""Match extraction, reciprocal verification, densification and flow metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import LevelGeometry
from .pyramid import is_sentinel, reference_pixels


class MetricError(ValueError):
    pass


@dataclass
class FlowField:
    """Dense displacement ``(u, v) = (dx, dy)`` per pixel with a validity mask."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    @classmethod
    def constant(cls, shape, u=0.0, v=0.0) -> "FlowField":
        return cls(np.full(shape, float(u)), np.full(shape, float(v)), np.ones(shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape


@dataclass
class Match:
    p: tuple[int, int]  # (x, y) reference pixel
    q: tuple[int, int]  # (x, y) target pixel
    confidence: float
    verified: bool = False
    cell: tuple[int, int] = (0, 0)  # (row, col) reference grid index
    k: tuple[int, int] = (0, 0)  # (row, col) 0-based displacement index


class MatchSet(list):
    """Quasi-dense matches, one per reference cell, in raster order of the grid."""

    def displacements(self) -> np.ndarray:
        return np.array([(m.q[0] - m.p[0], m.q[1] - m.p[1]) for m in self], dtype=np.float64).reshape(-1, 2)

    def verified_only(self) -> "MatchSet":
        return MatchSet(m for m in self if m.verified)

    def to_text(self) -> str:
        return "".join(
            f"{m.p[0]} {m.p[1]} {m.q[0]} {m.q[1]} {m.confidence!r} {int(m.verified)}\n" for m in self
        )

    @classmethod
    def from_text(cls, text: str) -> "MatchSet":
        out = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(f"line {lineno}: expected 6 fields, got {len(parts)}")
            px, py, qx, qy = (int(v) for v in parts[:4])
            out.append(Match((px, py), (qx, qy), float(parts[4]), parts[5] == "1"))
        return out


def extract(q0: np.ndarray, geom: LevelGeometry) -> MatchSet:
    """Best displacement per reference cell; cells without any live score are dropped."""
    H, W, K, _ = q0.shape
    flat = np.where(is_sentinel(q0), -np.inf, q0).reshape(H, W, K * K)
    best = flat.argmax(axis=-1)
    conf = np.take_along_axis(flat, best[..., None], axis=-1)[..., 0]
    rows, cols = reference_pixels(geom)
    step = geom.q_stride
    out = MatchSet()
    for r in range(H):
        for c in range(W):
            if not np.isfinite(conf[r, c]):
                continue
            kr, kc = divmod(int(best[r, c]), K)
            py, px = int(rows[r]), int(cols[c])
            qy, qx = py + step * (kr - geom.R), px + step * (kc - geom.R)
            out.append(Match((px, py), (qx, qy), float(conf[r, c]), False, (r, c), (kr, kc)))
    return out


def verify(matches: MatchSet, q0: np.ndarray, geom: LevelGeometry) -> MatchSet:
    """Keep a match iff no other reference cell scores its target higher (ties verify)."""
    H, W, K, _ = q0.shape
    rows, cols = reference_pixels(geom)
    step = geom.q_stride
    scores = np.where(is_sentinel(q0), -np.inf, q0)
    out = MatchSet()
    for m in matches:
        qx, qy = m.q
        # displacement index of q as seen from every reference cell
        dr = qy - rows
        dc = qx - cols
        kr = dr / step + geom.R
        kc = dc / step + geom.R
        ok_r = (kr == np.round(kr)) & (kr >= 0) & (kr < K)
        ok_c = (kc == np.round(kc)) & (kc >= 0) & (kc < K)
        rr, cc = np.nonzero(ok_r[:, None] & ok_c[None, :])
        others = scores[rr, cc, kr[rr].astype(int), kc[cc].astype(int)]
        own = scores[m.cell[0], m.cell[1], m.k[0], m.k[1]]
        out.append(Match(m.p, m.q, m.confidence, bool(own >= others.max()), m.cell, m.k))
    return out


def densify(matches: MatchSet, shape: tuple[int, int], radius: int = 8, confidence_first: bool = True) -> FlowField:
    """Give each pixel the displacement of the best verified match within L-inf ``radius``.

    Candidates are ranked by confidence, then by L-inf distance, then by raster
    order (``confidence_first=False`` swaps the first two keys).
    """
    h, w = shape
    u = np.zeros(shape)
    v = np.zeros(shape)
    valid = np.zeros(shape, dtype=bool)
    best_conf = np.full(shape, -np.inf)
    best_dist = np.full(shape, np.inf)
    ys, xs = np.indices(shape)
    for m in matches:
        if not m.verified:
            continue
        px, py = m.p
        y0, y1 = max(0, py - radius), min(h, py + radius + 1)
        x0, x1 = max(0, px - radius), min(w, px + radius + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        win = (slice(y0, y1), slice(x0, x1))
        dist = np.maximum(np.abs(ys[win] - py), np.abs(xs[win] - px))
        bc, bd = best_conf[win], best_dist[win]
        if confidence_first:
            better = (m.confidence > bc) | ((m.confidence == bc) & (dist < bd))
        else:
            better = (dist < bd) | ((dist == bd) & (m.confidence > bc))
        dx, dy = m.q[0] - px, m.q[1] - py
        u[win] = np.where(better, dx, u[win])
        v[win] = np.where(better, dy, v[win])
        best_conf[win] = np.where(better, m.confidence, bc)
        best_dist[win] = np.where(better, dist, bd)
        valid[win] |= better
    return FlowField(u, v, valid)


def _errors(est: FlowField, gt: FlowField) -> np.ndarray:
    if est.shape != gt.shape:
        raise MetricError(f"flow shapes differ: {est.shape} vs {gt.shape}")
    return np.hypot(est.u - gt.u, est.v - gt.v)


def accuracy_at(est: FlowField, gt: FlowField, T: float, mask: np.ndarray | None = None) -> float:
    """Fraction of ground-truth pixels whose estimate lies within ``T`` pixels (L2)."""
    err = _errors(est, gt)
    omega = gt.valid if mask is None else gt.valid & mask
    n = int(omega.sum())
    if n == 0:
        raise MetricError("empty evaluation domain")
    good = omega & est.valid & (err <= T)
    return float(good.sum()) / n


def epe(est: FlowField, gt: FlowField, mask: np.ndarray | None = None) -> float:
    """Mean end-point error over pixels valid in both fields (and ``mask``)."""
    err = _errors(est, gt)
    sel = gt.valid & est.valid
    if mask is not None:
        sel &= mask
    if not sel.any():
        raise MetricError("empty evaluation mask")
    return float(err[sel].mean())


def match_mask(matches: MatchSet, shape: tuple[int, int], verified_only: bool = False) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for m in matches:
        if verified_only and not m.verified:
            continue
        x, y = m.p
        if 0 <= y < shape[0] and 0 <= x < shape[1]:
            mask[y, x] = True
    return mask


def match_flow(matches: MatchSet, shape: tuple[int, int]) -> FlowField:
    """Sparse flow holding each match's displacement at its reference pixel."""
    flow = FlowField(np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=bool))
    for m in matches:
        x, y = m.p
        if 0 <= y < shape[0] and 0 <= x < shape[1]:
            flow.u[y, x] = m.q[0] - x
            flow.v[y, x] = m.q[1] - y
            flow.valid[y, x] = True
    return flow
