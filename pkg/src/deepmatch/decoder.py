"""Coarse-to-fine decoding: disaggregation and unpooling, plus a path-enumeration oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import aggregation_shifts
from .pyramid import NO_SWITCH, SENTINEL, PyramidState, ScoreMap, is_sentinel, shifted_slices

NO_ROUTE = -1


class OracleTooLarge(RuntimeError):
    pass


@dataclass
class DecodeState:
    maps: list[np.ndarray]  # Q_0 .. Q_L
    halves: list[np.ndarray]  # Q_{l+1/2}, l = 0 .. L-1
    corner_routes: list[np.ndarray]  # winning corner per Q_{l+1/2} cell
    unpool_routes: list[np.ndarray]  # winning flat k' per Q_l cell, l < L

    @property
    def q0(self) -> np.ndarray:
        return self.maps[0]


def disaggregate(q_next: np.ndarray, shifts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max over the coarse cells ``i - shift`` of the four corners; SENTINEL if none is in-grid."""
    cand = np.full((len(shifts),) + q_next.shape, SENTINEL)
    for c, sh in enumerate(shifts):
        dst, src = shifted_slices(q_next.shape[:2], -sh)
        cand[c][dst] = q_next[src]
    routes = cand.argmax(axis=0)
    out = np.take_along_axis(cand, routes[None], axis=0)[0]
    routes = np.where(is_sentinel(out), NO_ROUTE, routes)
    return out, routes


def unpool(q_half: np.ndarray, switches: np.ndarray, s_full: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scatter ``q_half`` back through the switches (max on overlap, SENTINEL infill) and add ``s_full``."""
    if q_half.shape != switches.shape or q_half.shape[:2] != s_full.shape[:2]:
        raise ValueError(f"shape mismatch: {q_half.shape}, {switches.shape}, {s_full.shape}")
    H, W, K, _ = s_full.shape
    Ko = q_half.shape[2]
    cells = np.arange(H * W)[:, None]
    sw = switches.reshape(H * W, Ko * Ko)
    vals = q_half.reshape(H * W, Ko * Ko)
    kprime = np.broadcast_to(np.arange(Ko * Ko), sw.shape)
    keep = (sw != NO_SWITCH) & ~is_sentinel(vals)
    target = (cells * K * K + sw)[keep]
    v, kp = vals[keep], kprime[keep]
    order = np.lexsort((kp, -v, target))
    target, v, kp = target[order], v[order], kp[order]
    first = np.ones(len(target), dtype=bool)
    first[1:] = target[1:] != target[:-1]
    best = np.full(H * W * K * K, SENTINEL)
    routes = np.full(H * W * K * K, NO_ROUTE, dtype=np.int64)
    best[target[first]] = v[first]
    routes[target[first]] = kp[first]
    best = best.reshape(s_full.shape)
    out = np.where(is_sentinel(best) | is_sentinel(s_full), SENTINEL, s_full + best)
    return out, routes.reshape(s_full.shape)


def decode(pyr: PyramidState) -> DecodeState:
    L = pyr.L
    maps: list[np.ndarray | None] = [None] * (L + 1)
    halves, croutes, uroutes = [None] * L, [None] * L, [None] * L
    maps[L] = pyr.maps[L].data.copy()
    for l in range(L - 1, -1, -1):
        shifts = aggregation_shifts(pyr.geoms[l])
        halves[l], croutes[l] = disaggregate(maps[l + 1], shifts)
        maps[l], uroutes[l] = unpool(halves[l], pyr.switches[l], pyr.maps[l].data)
    return DecodeState(maps=maps, halves=halves, corner_routes=croutes, unpool_routes=uroutes)


def decode_oracle(pyr: PyramidState, max_cells: int = 64, max_range: int = 8, max_levels: int = 3) -> ScoreMap:
    """Best path sum over every admissible path, enumerated without memoization.

    Each path climbs from ``(i_0, k_0)``: at level ``l`` pick a corner ``c`` with
    ``i_{l+1} = i_l - shift_c`` on the grid, and a pooled index ``k_{l+1}`` whose
    switch at ``(i_l, k_{l+1})`` is ``k_l``. Path scores accumulate from the top
    level down so the floating-point result is comparable bit for bit with
    :func:`decode`.
    """
    L = pyr.L
    g0 = pyr.geoms[0]
    if g0.H * g0.W > max_cells or g0.R > max_range or L > max_levels:
        raise OracleTooLarge(
            f"oracle refuses {g0.H}x{g0.W} grid, R0={g0.R}, L={L} "
            f"(limits: {max_cells} cells, R0<={max_range}, L<={max_levels})"
        )
    H, W = g0.H, g0.W
    S = [m.data.tolist() for m in pyr.maps]
    shifts = [aggregation_shifts(g).tolist() for g in pyr.geoms[:L]]
    # parents[l][r][c][k_l] -> pooled indices k_{l+1} routed to k_l
    parents = []
    for l in range(L):
        K = pyr.maps[l].data.shape[2]
        sw = pyr.switches[l]
        table = [[[[] for _ in range(K * K)] for _ in range(W)] for _ in range(H)]
        for r in range(H):
            for c in range(W):
                for kp, k in enumerate(sw[r, c].ravel().tolist()):
                    if k != NO_SWITCH:
                        table[r][c][k].append(divmod(kp, sw.shape[3]))
        parents.append(table)

    def path_sums(l, r, c, kr, kc):
        s = S[l][r][c][kr][kc]
        if l == L:
            yield s
            return
        K = len(S[l][r][c])
        for dr, dc in shifts[l]:
            pr, pc = r - dr, c - dc
            if not (0 <= pr < H and 0 <= pc < W):
                continue
            for nr, nc in parents[l][r][c][kr * K + kc]:
                for rest in path_sums(l + 1, pr, pc, nr, nc):
                    yield s + rest

    K0 = pyr.maps[0].data.shape[2]
    out = np.full(pyr.maps[0].data.shape, SENTINEL)
    for r in range(H):
        for c in range(W):
            for kr in range(K0):
                for kc in range(K0):
                    if L == 0:
                        out[r, c, kr, kc] = S[0][r][c][kr][kc]
                        continue
                    best = SENTINEL
                    for total in path_sums(0, r, c, kr, kc):
                        if total > best:
                            best = total
                    out[r, c, kr, kc] = best
    return ScoreMap(out, g0, "full")
