"""Structured hinge loss, regularized objective and the SGD-with-momentum trainer."""

from __future__ import annotations

import csv
import logging
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd, descriptors
from .geometry import Discretization, LevelGeometry
from .matching import FlowField
from .pyramid import is_sentinel, reference_pixels

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DMCKPT1"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def gaussian_margin(q, q_true, sigma: float) -> float:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    d = np.asarray(q, dtype=float) - np.asarray(q_true, dtype=float)
    return float(np.exp(-np.dot(d, d) / (2.0 * sigma**2)))


@dataclass
class GroundTruthField:
    """True displacement index per reference cell (0-based ``(row, col)``), snapped to the grid."""

    kstar: np.ndarray
    valid: np.ndarray
    geom: LevelGeometry
    sigma: float

    def margins(self) -> np.ndarray:
        """``g_sigma(q - q*)`` for every (cell, displacement), shape ``(H, W, K, K)``."""
        K = self.geom.k_extent
        k = np.arange(K)
        step = self.geom.q_stride
        dr = (k[None, None, :] - self.kstar[..., 0, None]) * step
        dc = (k[None, None, :] - self.kstar[..., 1, None]) * step
        return np.exp(-(dr[..., :, None] ** 2 + dc[..., None, :] ** 2) / (2.0 * self.sigma**2))


def ground_truth(flow: FlowField, geom: LevelGeometry, sigma: float) -> GroundTruthField:
    rows, cols = reference_pixels(geom)
    h, w = flow.shape
    kstar = np.zeros((geom.H, geom.W, 2), dtype=np.int64)
    valid = np.zeros((geom.H, geom.W), dtype=bool)
    step, R = geom.q_stride, geom.R
    for r, y in enumerate(rows):
        for c, x in enumerate(cols):
            if not (0 <= y < h and 0 <= x < w) or not flow.valid[y, x]:
                continue
            kr = int(np.floor(flow.v[y, x] / step + 0.5)) + R
            kc = int(np.floor(flow.u[y, x] / step + 0.5)) + R
            if 0 <= kr <= 2 * R and 0 <= kc <= 2 * R:
                kstar[r, c] = (kr, kc)
                valid[r, c] = True
    return GroundTruthField(kstar, valid, geom, float(sigma))


def structured_loss(S: np.ndarray, gt: GroundTruthField, return_arg: bool = False):
    """Hinge loss ``sum max(0, 1 - g + S(k) - S(k*))`` over valid cells and live scores.

    Returns ``(loss, dS)`` (and the hinge arguments, ``-inf`` where skipped, when
    ``return_arg``).
    """
    H, W, K, _ = S.shape
    if (H, W) != gt.kstar.shape[:2] or K != gt.geom.k_extent:
        raise ValueError(f"score map {S.shape} does not match ground-truth geometry")
    live = ~is_sentinel(S)
    r, c = np.indices((H, W))
    s_true = S[r, c, gt.kstar[..., 0], gt.kstar[..., 1]]
    usable = gt.valid & ~is_sentinel(s_true)
    margin = 1.0 - gt.margins()
    safe_s = np.where(live, S, 0.0)
    arg = margin + (safe_s - np.where(usable, s_true, 0.0)[..., None, None])
    mask = live & usable[..., None, None]
    arg = np.where(mask, arg, -np.inf)
    active = arg > 0
    loss = float(np.sum(arg[active]))
    dS = active.astype(np.float64)
    counts = active.sum(axis=(2, 3)).astype(np.float64)
    dS[r, c, gt.kstar[..., 0], gt.kstar[..., 1]] -= np.where(usable, counts, 0.0)
    if return_arg:
        return loss, dS, arg
    return loss, dS


@dataclass
class Pair:
    image0: np.ndarray
    image1: np.ndarray
    flow: FlowField


def objective(batch: list[Pair], model: autograd.Model, disc: Discretization, weight_decay: float,
              sigma: float, attach=("Q", 0), groups=("exponents", "descriptors")) -> tuple[float, dict]:
    """Mean structured loss plus ``weight_decay / 2 * ||w||^2`` over the enabled groups."""
    if not batch:
        raise TrainingError("empty batch")
    grads = {name: np.zeros_like(v) for name, v in _trainable(model, groups).items()}
    total = 0.0
    for pair in batch:
        if model.extractor is not None:
            model.extractor.zero_grad()
        tape = autograd.forward(pair.image0, pair.image1, model, disc, attach)
        gt = ground_truth(pair.flow, _attach_geom(tape), sigma)
        loss, dS = structured_loss(tape.attachment(), gt)
        total += loss
        g = autograd.backward(dS, tape)
        for name in grads:
            grads[name] += g[name]
    n = len(batch)
    value = total / n
    for name, w in _trainable(model, groups).items():
        grads[name] = grads[name] / n + weight_decay * w
        value += 0.5 * weight_decay * float(np.sum(w * w))
    return value, grads


def _attach_geom(tape: autograd.GradTape) -> LevelGeometry:
    return tape.pyramid.geoms[tape.attach[1]]


def _trainable(model: autograd.Model, groups) -> dict[str, np.ndarray]:
    out = {}
    if "exponents" in groups:
        out["exponents"] = model.exponents
    if "descriptors" in groups and model.extractor is not None:
        out.update(model.extractor.weights)
    return out


@dataclass
class TrainConfig:
    lr_exponents: float = 1e-3
    lr_descriptors: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 1
    attach: tuple[str, int] = ("Q", 0)
    sigma: float = 8.0
    seed: int = 0
    train_exponents: bool = True
    train_descriptors: bool = True
    checkpoint_every: int = 1  # epochs; 0 disables
    min_exponent: float = 1e-3

    def __post_init__(self):
        if not (self.lr_exponents >= 0 and self.lr_descriptors >= 0):
            raise ValueError("learning rates must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.checkpoint_every < 0:
            raise ValueError("epochs and checkpoint_every must be >= 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def groups(self) -> tuple[str, ...]:
        out = []
        if self.train_exponents:
            out.append("exponents")
        if self.train_descriptors:
            out.append("descriptors")
        return tuple(out)


@dataclass
class TrainState:
    model: autograd.Model
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0


@dataclass
class LogRow:
    epoch: int
    step: int
    loss: float
    val_acc2: float
    val_epe: float


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def sgd_step(state: TrainState, grads: dict[str, np.ndarray], cfg: TrainConfig) -> None:
    """``v <- mu v - lr g; w <- w + v``; ``g`` already includes weight decay."""
    params = _trainable(state.model, cfg.groups)
    for name, w in params.items():
        lr = cfg.lr_exponents if name == "exponents" else cfg.lr_descriptors
        v = state.velocity.setdefault(name, np.zeros_like(w))
        v *= cfg.momentum
        v -= lr * grads[name]
        w += v
    if "exponents" in params:
        np.maximum(state.model.exponents, cfg.min_exponent, out=state.model.exponents)


def train(dataset: list[Pair], cfg: TrainConfig, model: autograd.Model, disc: Discretization,
          validation: list[Pair] | None = None, checkpoint_path: str | None = None,
          log_path: str | None = None, state: TrainState | None = None, step_callback=None):
    """Run ``cfg.epochs`` epochs of one-pair SGD steps; returns ``(state, log rows)``.

    Passing a ``state`` loaded from a checkpoint resumes at ``state.epoch``.
    """
    if not dataset:
        raise TrainingError("empty dataset")
    state = state or TrainState(model)
    rows: list[LogRow] = []
    for epoch in range(state.epoch, cfg.epochs):
        losses = []
        for idx in epoch_order(cfg.seed, epoch, len(dataset)):
            value, grads = objective([dataset[idx]], state.model, disc, cfg.weight_decay, cfg.sigma,
                                     cfg.attach, cfg.groups)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(f"non-finite loss/gradient at epoch {epoch} step {state.step} (pair {idx})")
            sgd_step(state, grads, cfg)
            state.step += 1
            losses.append(value)
            if step_callback is not None:
                step_callback(state, value)
        state.epoch = epoch + 1
        acc2, e = (float("nan"), float("nan"))
        if validation:
            acc2, e = evaluate(validation, state.model, disc)
        row = LogRow(state.epoch, state.step, float(np.mean(losses)), acc2, e)
        rows.append(row)
        log.info("epoch %d step %d loss %.6g val acc@2 %.4f EPE %.4f", *row.__dict__.values())
        if log_path:
            _append_log(log_path, row)
        if checkpoint_path and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, state)
    return state, rows


def _append_log(path: str, row: LogRow) -> None:
    new = not os.path.exists(path)
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(["epoch", "step", "loss", "val_acc2", "val_epe"])
        writer.writerow([row.epoch, row.step, repr(row.loss), repr(row.val_acc2), repr(row.val_epe)])


def validation_loss(pairs: list[Pair], model: autograd.Model, disc: Discretization, sigma: float,
                    attach=("Q", 0)) -> float:
    total = 0.0
    for pair in pairs:
        tape = autograd.forward(pair.image0, pair.image1, model, disc, attach)
        gt = ground_truth(pair.flow, _attach_geom(tape), sigma)
        total += structured_loss(tape.attachment(), gt)[0]
    return total / len(pairs)


def evaluate(pairs: list[Pair], model: autograd.Model, disc: Discretization, radius: int = 8) -> tuple[float, float]:
    """Mean accuracy@2 and flow EPE of the densified matches."""
    from .pipeline import match_pair
    from .matching import accuracy_at, epe

    accs, epes = [], []
    for pair in pairs:
        result = match_pair(pair.image0, pair.image1, model, disc, radius=radius)
        accs.append(accuracy_at(result.flow, pair.flow, 2.0))
        try:
            epes.append(epe(result.flow, pair.flow))
        except ValueError:
            epes.append(float("nan"))
    return float(np.mean(accs)), float(np.nanmean(epes)) if not all(np.isnan(epes)) else float("nan")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _pack_groups(groups: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(groups))]
    for name, arr in groups.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def _unpack_groups(data: bytes, pos: int) -> tuple[dict[str, np.ndarray], int]:
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    groups = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        groups[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    return groups, pos


def encode_checkpoint(state: TrainState) -> bytes:
    params = state.model.groups()
    header = CKPT_MAGIC + struct.pack("<QQ", state.epoch, state.step)
    velocity = {k: state.velocity[k] for k in params if k in state.velocity}
    return header + _pack_groups(params) + _pack_groups(velocity)


def save_checkpoint(path: str, state: TrainState) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode_checkpoint(state))
    os.replace(tmp, path)


def decode_checkpoint(data: bytes) -> TrainState:
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError("bad checkpoint magic")
    pos = len(CKPT_MAGIC)
    if len(data) < pos + 16:
        raise CheckpointError("truncated checkpoint")
    epoch, step = struct.unpack("<QQ", data[pos:pos + 16])
    params, pos = _unpack_groups(data, pos + 16)
    velocity, pos = _unpack_groups(data, pos)
    if pos != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    if "exponents" not in params:
        raise CheckpointError("checkpoint has no exponents")
    ext = None
    rest = {k: v for k, v in params.items() if k != "exponents"}
    if rest:
        ext = descriptors.ExtractorParams(rest)
    model = autograd.Model(params["exponents"], ext)
    return TrainState(model, velocity, int(epoch), int(step))


def load_checkpoint(path: str) -> TrainState:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())
