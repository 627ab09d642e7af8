"""Patch descriptors sampled on regular pixel grids.

Two extractors share the :class:`DescriptorField` output type: a fixed
gradient-orientation histogram (16x16 patch, 4x4 cells, 8 signed orientation
bins, d=128) and a small convolutional network whose weights can be trained
through the matching pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NORM_EPS = 1e-8
PATCH = 16
CELL = 4
ORIENTATIONS = 8
LUMA = np.array([0.299, 0.587, 0.114])


class DescriptorError(ValueError):
    pass


@dataclass
class DescriptorField:
    """Unit-norm descriptors at pixels ``offset + stride * index`` along both axes."""

    values: np.ndarray
    stride: int
    offset: int

    @property
    def d(self) -> int:
        return self.values.shape[-1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]

    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        h, w = self.shape
        return self.offset + self.stride * np.arange(h), self.offset + self.stride * np.arange(w)


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        if image.shape[2] == 1:
            return image[..., 0]
        return image[..., :3] @ LUMA
    if image.ndim != 2:
        raise DescriptorError(f"expected a 2D grayscale or HxWx3 image, got shape {image.shape}")
    return image


def grid_extent(length: int, stride: int, offset: int) -> int:
    if offset >= length:
        return 0
    return (length - 1 - offset) // stride + 1


def l2_normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1)
    safe = np.where(norms < NORM_EPS, 1.0, norms)
    y = np.where((norms < NORM_EPS)[..., None], 0.0, x / safe[..., None])
    return y, norms


def l2_normalize_backward(y: np.ndarray, norms: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the pre-normalization vectors; zero for flat patches."""
    dot = np.sum(y * grad, axis=-1, keepdims=True)
    safe = np.where(norms < NORM_EPS, 1.0, norms)[..., None]
    out = (grad - y * dot) / safe
    out[norms < NORM_EPS] = 0.0
    return out


def orientation_maps(image: np.ndarray) -> np.ndarray:
    """Per-pixel gradient magnitude split over signed orientation bins, shape (H, W, 8)."""
    padded = np.pad(image, 1, mode="edge")
    gx = 0.5 * (padded[1:-1, 2:] - padded[1:-1, :-2])
    gy = 0.5 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
    mag = np.hypot(gx, gy)
    pos = np.mod(np.arctan2(gy, gx) / (2 * np.pi / ORIENTATIONS), ORIENTATIONS)
    lo = np.floor(pos).astype(np.int64) % ORIENTATIONS
    frac = pos - np.floor(pos)
    hi = (lo + 1) % ORIENTATIONS
    out = np.zeros(image.shape + (ORIENTATIONS,))
    rows, cols = np.indices(image.shape)
    np.add.at(out, (rows, cols, lo), mag * (1.0 - frac))
    np.add.at(out, (rows, cols, hi), mag * frac)
    return out


def extract_fixed(image: np.ndarray, stride: int, offset: int) -> DescriptorField:
    """Gradient-histogram descriptors of the 16x16 patch ``[p-8, p+8)`` around each grid pixel."""
    gray = to_gray(image)
    h, w = gray.shape
    if h < PATCH or w < PATCH:
        raise DescriptorError(f"image {h}x{w} is smaller than one {PATCH}x{PATCH} patch")
    half = PATCH // 2
    omap = orientation_maps(np.pad(gray, half, mode="edge"))
    # cell sums over 4x4 blocks starting at every padded pixel
    integral = np.zeros((omap.shape[0] + 1, omap.shape[1] + 1, ORIENTATIONS))
    integral[1:, 1:] = omap.cumsum(0).cumsum(1)
    cells = (
        integral[CELL:, CELL:] - integral[:-CELL, CELL:] - integral[CELL:, :-CELL] + integral[:-CELL, :-CELL]
    )
    rows = offset + stride * np.arange(grid_extent(h, stride, offset))
    cols = offset + stride * np.arange(grid_extent(w, stride, offset))
    # patch [p-8, p+8) starts at padded index p
    starts = np.arange(0, PATCH, CELL)
    r = rows[:, None] + starts[None, :]
    c = cols[:, None] + starts[None, :]
    desc = cells[r[:, None, :, None], c[None, :, None, :]]
    desc = desc.reshape(len(rows), len(cols), -1)
    values, _ = l2_normalize(desc)
    return DescriptorField(values=values, stride=stride, offset=offset)


# ---------------------------------------------------------------------------
# Trainable extractor
# ---------------------------------------------------------------------------

LAYERS = (("w1", "b1", 1, 16, 3), ("w2", "b2", 16, 32, 3), ("w3", "b3", 32, 64, 4))
MARGIN = 8  # edge padding around the image
# receptive field of one head output spans 14 pixels; its centre sits 7 past the start
RF_CENTER = 7


@dataclass
class ExtractorParams:
    """conv3x3(16) -> relu -> maxpool2 -> conv3x3(32) -> relu -> conv4x4(64)."""

    weights: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.grads:
            self.zero_grad()

    @classmethod
    def init(cls, seed: int = 0) -> "ExtractorParams":
        rng = np.random.default_rng(seed)
        weights = {}
        for wn, bn, cin, cout, k in LAYERS:
            a = np.sqrt(6.0 / (cin * k * k + cout * k * k))
            weights[wn] = rng.uniform(-a, a, size=(cout, cin, k, k))
            weights[bn] = np.zeros(cout)
        return cls(weights)

    @classmethod
    def zeros(cls) -> "ExtractorParams":
        return cls({
            name: np.zeros((cout, cin, k, k)) if name.startswith("w") else np.zeros(cout)
            for wn, bn, cin, cout, k in LAYERS
            for name in (wn, bn)
        })

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.weights.items()}

    def names(self) -> list[str]:
        return [n for wn, bn, *_ in LAYERS for n in (wn, bn)]

    def copy(self) -> "ExtractorParams":
        return ExtractorParams({k: v.copy() for k, v in self.weights.items()})


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    kh, kw = w.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(0, 1))
    return np.tensordot(win, w, axes=([2, 3, 4], [1, 2, 3])) + b


def _conv_backward(x, w, g, need_input_grad=True):
    kh, kw = w.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(0, 1))
    dw = np.tensordot(g, win, axes=([0, 1], [0, 1]))
    db = g.sum(axis=(0, 1))
    if not need_input_grad:
        return None, dw, db
    gp = np.pad(g, ((kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    gwin = sliding_window_view(gp, (kh, kw), axis=(0, 1))
    dx = np.tensordot(gwin, w[:, :, ::-1, ::-1], axes=([2, 3, 4], [0, 2, 3]))
    return dx, dw, db


def _pool2(x):
    h, w, c = x.shape
    blocks = x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 1, 3).reshape(h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg


def _pool2_backward(g, arg, shape):
    h, w, c = shape
    blocks = np.zeros((h // 2, w // 2, c, 4))
    np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
    return blocks.reshape(h // 2, w // 2, c, 2, 2).transpose(0, 3, 1, 4, 2).reshape(h, w, c)


def _phase_forward(img_pad, a, b, wts):
    x = img_pad[a:, b:]
    x = x[: x.shape[0] - x.shape[0] % 2, : x.shape[1] - x.shape[1] % 2][..., None]
    h1 = _conv(x, wts["w1"], wts["b1"])
    p1, arg = _pool2(np.maximum(h1, 0.0))
    h2 = _conv(p1, wts["w2"], wts["b2"])
    r2 = np.maximum(h2, 0.0)
    out = _conv(r2, wts["w3"], wts["b3"])
    return out, {"x": x, "h1": h1, "arg": arg, "p1": p1, "h2": h2, "r2": r2}


@dataclass
class ExtractorCache:
    image_shape: tuple[int, int]
    field_shape: tuple[int, int]
    phases: dict[tuple[int, int], dict]
    # per phase: (grid rows, grid cols, head rows, head cols) of the samples it supplies
    samples: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]
    prenorm: np.ndarray
    norms: np.ndarray
    values: np.ndarray
    weights: dict[str, np.ndarray]


def extract_trainable(
    image: np.ndarray, params: ExtractorParams, stride: int, offset: int
) -> tuple[DescriptorField, ExtractorCache]:
    gray = to_gray(image) / 255.0
    h, w = gray.shape
    if h < PATCH or w < PATCH:
        raise DescriptorError(f"image {h}x{w} is smaller than one {PATCH}x{PATCH} patch")
    rows = offset + stride * np.arange(grid_extent(h, stride, offset))
    cols = offset + stride * np.arange(grid_extent(w, stride, offset))
    img_pad = np.pad(gray, MARGIN, mode="edge")
    # pixel q reads head output t of phase a, where q + MARGIN = a + 2t + RF_CENTER
    r_shift, c_shift = rows + MARGIN - RF_CENTER, cols + MARGIN - RF_CENTER
    r_phase, c_phase = r_shift % 2, c_shift % 2
    prenorm = np.zeros((len(rows), len(cols), 64))
    phases, samples = {}, {}
    for a in (0, 1):
        ri = np.flatnonzero(r_phase == a)
        if not len(ri):
            continue
        for b in (0, 1):
            ci = np.flatnonzero(c_phase == b)
            if not len(ci):
                continue
            out, cache = _phase_forward(img_pad, a, b, params.weights)
            tr, tc = (r_shift[ri] - a) // 2, (c_shift[ci] - b) // 2
            prenorm[np.ix_(ri, ci)] = out[np.ix_(tr, tc)]
            phases[(a, b)] = cache
            samples[(a, b)] = (ri, ci, tr, tc)
            phases[(a, b)]["out_shape"] = out.shape
    if not np.all(np.isfinite(prenorm)):
        raise DescriptorError("non-finite activations in trainable extractor")
    values, norms = l2_normalize(prenorm)
    field_ = DescriptorField(values=values, stride=stride, offset=offset)
    cache = ExtractorCache(
        image_shape=(h, w), field_shape=values.shape[:2], phases=phases, samples=samples,
        prenorm=prenorm, norms=norms, values=values, weights=params.weights,
    )
    return field_, cache


def extract_backward(grad_field: np.ndarray, cache: ExtractorCache | None, params: ExtractorParams) -> None:
    """Accumulate parameter gradients into ``params.grads``; no-op for the fixed extractor."""
    if cache is None:
        return
    if grad_field.shape != cache.values.shape:
        raise DescriptorError(f"gradient shape {grad_field.shape} != field shape {cache.values.shape}")
    if params.weights is not cache.weights and any(
        params.weights[k].shape != cache.weights[k].shape for k in params.weights
    ):
        raise DescriptorError("cache was produced with differently shaped parameters")
    gpre = l2_normalize_backward(cache.values, cache.norms, grad_field)
    wts = cache.weights
    for key, pc in cache.phases.items():
        ri, ci, tr, tc = cache.samples[key]
        g_out = np.zeros(pc["out_shape"])
        g_out[np.ix_(tr, tc)] = gpre[np.ix_(ri, ci)]
        if not g_out.any():
            continue
        g_r2, dw3, db3 = _conv_backward(pc["r2"], wts["w3"], g_out)
        g_h2 = g_r2 * (pc["h2"] > 0)
        g_p1, dw2, db2 = _conv_backward(pc["p1"], wts["w2"], g_h2)
        g_h1 = _pool2_backward(g_p1, pc["arg"], pc["h1"].shape) * (pc["h1"] > 0)
        _, dw1, db1 = _conv_backward(pc["x"], wts["w1"], g_h1, need_input_grad=False)
        for name, g in (("w1", dw1), ("b1", db1), ("w2", dw2), ("b2", db2), ("w3", dw3), ("b3", db3)):
            params.grads[name] += g
