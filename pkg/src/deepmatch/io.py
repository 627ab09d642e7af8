"""Binary PGM/PPM images, Middlebury ``.flo`` flow files and flow colouring."""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb

from .matching import FlowField

FLO_MAGIC = 202021.25
FLO_UNKNOWN = 1e10
FLO_UNKNOWN_THRESH = 1e9


class FormatError(ValueError):
    """Base class for every parse failure."""


class MalformedHeader(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class TrailingData(FormatError):
    pass


class UnsupportedMaxval(FormatError):
    pass


class BadMagic(FormatError):
    pass


class SizeMismatch(FormatError):
    pass


@dataclass
class ImageBuffer:
    """8-bit image stored ``(height, width, channels)``."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[..., None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected HxW, HxWx1 or HxWx3 pixels, got {px.shape}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError("image extent must be positive")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255) or np.any(px != np.round(px)):
                raise ValueError("pixels must be integers in 0..255")
            px = px.astype(np.uint8)
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def gray(self) -> np.ndarray:
        from .descriptors import to_gray

        return to_gray(self.pixels)


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*")


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    pos, tokens = 0, []
    while len(tokens) < count:
        m = _TOKEN.match(data, pos)
        pos = m.end()
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if pos == start:
            raise MalformedHeader("header ended early")
        tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise MalformedHeader("missing whitespace after maxval")
    return tokens, pos + 1


def parse_image(data: bytes) -> ImageBuffer:
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise MalformedHeader("not a binary PGM (P5) or PPM (P6) file")
    tokens, start = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MalformedHeader(f"non-numeric header field: {exc}") from None
    if width <= 0 or height <= 0:
        raise MalformedHeader(f"degenerate extent {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxval(f"maxval {maxval} (only 255 is supported)")
    channels = 1 if tokens[0] == b"P5" else 3
    n = width * height * channels
    payload = data[start:]
    if len(payload) < n:
        raise TruncatedPayload(f"expected {n} bytes of pixels, found {len(payload)}")
    if len(payload) > n:
        raise TrailingData(f"{len(payload) - n} bytes after pixel payload")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return ImageBuffer(px.copy())


def read_image(path: str | os.PathLike) -> ImageBuffer:
    with open(path, "rb") as f:
        return parse_image(f.read())


def encode_image(img: ImageBuffer) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + np.ascontiguousarray(img.pixels).tobytes()


def write_image(path: str | os.PathLike, img: ImageBuffer | np.ndarray) -> None:
    if not isinstance(img, ImageBuffer):
        img = ImageBuffer(img)
    with open(path, "wb") as f:
        f.write(encode_image(img))


def parse_flow(data: bytes) -> FlowField:
    if len(data) < 12:
        raise TruncatedPayload(f"flow header needs 12 bytes, got {len(data)}")
    magic, width, height = struct.unpack("<fii", data[:12])
    if magic != np.float32(FLO_MAGIC):
        raise BadMagic(f"bad magic {magic!r}")
    if width <= 0 or height <= 0:
        raise MalformedHeader(f"degenerate extent {width}x{height}")
    n = 12 + 8 * width * height
    if len(data) != n:
        raise SizeMismatch(f"expected {n} bytes for {width}x{height} flow, got {len(data)}")
    uv = np.frombuffer(data[12:], dtype="<f4").reshape(height, width, 2).astype(np.float64)
    u, v = uv[..., 0].copy(), uv[..., 1].copy()
    valid = np.isfinite(u) & np.isfinite(v) & (np.abs(u) <= FLO_UNKNOWN_THRESH) & (np.abs(v) <= FLO_UNKNOWN_THRESH)
    u[~valid] = 0.0
    v[~valid] = 0.0
    return FlowField(u, v, valid)


def read_flow(path: str | os.PathLike) -> FlowField:
    with open(path, "rb") as f:
        return parse_flow(f.read())


def encode_flow(flow: FlowField) -> bytes:
    h, w = flow.shape
    uv = np.empty((h, w, 2), dtype="<f4")
    uv[..., 0] = np.where(flow.valid, flow.u, FLO_UNKNOWN)
    uv[..., 1] = np.where(flow.valid, flow.v, FLO_UNKNOWN)
    return struct.pack("<fii", FLO_MAGIC, w, h) + uv.tobytes()


def write_flow(path: str | os.PathLike, flow: FlowField) -> None:
    with open(path, "wb") as f:
        f.write(encode_flow(flow))


def flow_to_color(flow: FlowField, max_magnitude: float) -> ImageBuffer:
    """Hue from direction, saturation from magnitude / ``max_magnitude``; invalid pixels black."""
    if not max_magnitude > 0:
        raise ValueError(f"max_magnitude must be positive, got {max_magnitude}")
    hue = np.mod(np.arctan2(flow.v, flow.u), 2 * np.pi) / (2 * np.pi)
    sat = np.clip(np.hypot(flow.u, flow.v) / max_magnitude, 0.0, 1.0)
    rgb = hsv_to_rgb(np.stack([hue, sat, np.ones_like(hue)], axis=-1))
    rgb = np.round(rgb * 255).astype(np.uint8)
    rgb[~flow.valid] = 0
    return ImageBuffer(rgb)


def score_slice_image(q_slice: np.ndarray) -> ImageBuffer:
    """Grey heat map of one reference cell's score slice (SENTINEL shown black)."""
    live = np.isfinite(q_slice) & (q_slice > -1e30)
    out = np.zeros(q_slice.shape, dtype=np.uint8)
    if live.any():
        lo, hi = q_slice[live].min(), q_slice[live].max()
        scale = (q_slice[live] - lo) / (hi - lo) if hi > lo else np.ones(int(live.sum()))
        out[live] = np.round(scale * 255).astype(np.uint8)
    return ImageBuffer(out)
