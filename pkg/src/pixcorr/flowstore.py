"""Optical-flow fields: 8-bit quantization, bilinear sampling, FlowPack container.

Conventions used throughout the package:

* Grids are row-major ``float64`` arrays indexed ``[y, x]``; ``u`` is the
  horizontal displacement plane and ``v`` the vertical one.
* A field is valid on the continuous rectangle ``[0, width-1] x [0, height-1]``;
  bilinear sampling never extrapolates outside the lattice hull.
* Quantization maps each plane linearly onto 8-bit codes against that plane's
  own (min, max), rounding half away from zero.  The round-trip error is at
  most ``(max - min) / 510`` per component.

FlowPack layout (all little-endian):

    magic "PCFL" | version u16=1 | codec u8 (0 = raw 8-bit) | flags u8
    (bit0: backward flow present) | T u32 | width u32 | height u32
    then per field, forward fields first, then backward fields if present:
    min_u f32 | max_u f32 | min_v f32 | max_v f32 | u-plane W*H u8 | v-plane W*H u8

The codec byte is a hook for plugging a lossy 8-bit image codec later; only
codec 0 is implemented.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import BinaryIO

import numpy as np

from .errors import FormatError, InvalidFlow, OutOfBounds

FLOWPACK_MAGIC = b"PCFL"
FLOWPACK_VERSION = 1
CODEC_RAW = 0

_HEADER = struct.Struct("<HBBIII")  # version, codec, flags, T, width, height
_FIELD_META = struct.Struct("<ffff")  # min_u, max_u, min_v, max_v


class Direction(Enum):
    FORWARD = "forward"  # frame t -> t+1
    BACKWARD = "backward"  # frame t+1 -> t


@dataclass(frozen=True)
class FlowField:
    """One displacement field; immutable (planes are locked read-only)."""

    u: np.ndarray
    v: np.ndarray
    direction: Direction = Direction.FORWARD

    def __post_init__(self):
        u = np.ascontiguousarray(np.asarray(self.u, dtype=np.float64))
        v = np.ascontiguousarray(np.asarray(self.v, dtype=np.float64))
        if u.ndim != 2 or u.shape != v.shape:
            raise InvalidFlow(
                f"u/v planes must be 2-D with identical shapes, got {u.shape} and {v.shape}"
            )
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise InvalidFlow("flow plane contains NaN or Inf")
        u.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]


@dataclass(frozen=True)
class QuantizedFlow:
    """8-bit codes for one field plus the per-channel dequantization range.

    min/max are float32-valued (what the container stores), so the round-trip
    bound holds exactly against these fields.
    """

    q_u: np.ndarray
    q_v: np.ndarray
    min_u: float
    max_u: float
    min_v: float
    max_v: float

    def __post_init__(self):
        for name in ("q_u", "q_v"):
            codes = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.uint8))
            codes.setflags(write=False)
            object.__setattr__(self, name, codes)
        if self.q_u.shape != self.q_v.shape or self.q_u.ndim != 2:
            raise InvalidFlow("code planes must be 2-D with identical shapes")
        if self.min_u > self.max_u or self.min_v > self.max_v:
            raise InvalidFlow("quantization range has min > max")


@dataclass(frozen=True)
class FlowVolume:
    """Per-video stack of forward and (optionally) backward fields.

    Immutable after construction; all sampling operations are pure, so
    concurrent reads need no synchronization.  Identical FlowField objects may
    be shared between entries (synthetic volumes exploit this).
    """

    num_frames: int
    forward: tuple[FlowField, ...]
    backward: tuple[FlowField, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "forward", tuple(self.forward))
        if self.backward is not None:
            object.__setattr__(self, "backward", tuple(self.backward))
        if self.num_frames < 1:
            raise InvalidFlow("num_frames must be >= 1")
        if len(self.forward) != self.num_frames - 1:
            raise InvalidFlow(
                f"expected {self.num_frames - 1} forward fields, got {len(self.forward)}"
            )
        if self.backward is not None and len(self.backward) != self.num_frames - 1:
            raise InvalidFlow(
                f"expected {self.num_frames - 1} backward fields, got {len(self.backward)}"
            )
        fields = list(self.forward) + list(self.backward or ())
        if fields:
            w, h = fields[0].width, fields[0].height
            for f in fields:
                if (f.width, f.height) != (w, h):
                    raise InvalidFlow("all fields in a volume must share one (width, height)")

    @property
    def width(self) -> int:
        if not self.forward:
            raise InvalidFlow("empty volume has no defined field size")
        return self.forward[0].width

    @property
    def height(self) -> int:
        return self.forward[0].height

    @cached_property
    def quant_meta(self) -> tuple[tuple[tuple[float, float], tuple[float, float]], ...]:
        """((min_u, max_u), (min_v, max_v)) per field, forward then backward."""
        meta = []
        for f in list(self.forward) + list(self.backward or ()):
            meta.append((_plane_range(f.u), _plane_range(f.v)))
        return tuple(meta)


def _plane_range(plane: np.ndarray) -> tuple[float, float]:
    # float32 is the container precision for the range endpoints
    lo = float(np.float32(plane.min()))
    hi = float(np.float32(plane.max()))
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise InvalidFlow("flow magnitude exceeds float32 range")
    return lo, hi


def _quantize_plane(plane: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = _plane_range(plane)
    if hi == lo:
        return np.zeros(plane.shape, dtype=np.uint8), lo, hi
    t = 255.0 * (plane - lo) / (hi - lo)
    # round half away from zero; t >= -eps so this is floor(t + 0.5)
    codes = np.clip(np.floor(t + 0.5), 0.0, 255.0).astype(np.uint8)
    return codes, lo, hi


def quantize_flow(field: FlowField) -> QuantizedFlow:
    """Rescale each plane linearly onto [0, 255] codes against its own range."""
    q_u, min_u, max_u = _quantize_plane(field.u)
    q_v, min_v, max_v = _quantize_plane(field.v)
    return QuantizedFlow(q_u, q_v, min_u, max_u, min_v, max_v)


def _dequantize_plane(codes: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return lo + codes.astype(np.float64) * ((hi - lo) / 255.0)


def dequantize_flow(q: QuantizedFlow, direction: Direction = Direction.FORWARD) -> FlowField:
    """Invert quantize_flow: x = min + code * (max - min) / 255."""
    u = _dequantize_plane(q.q_u, q.min_u, q.max_u)
    v = _dequantize_plane(q.q_v, q.min_v, q.max_v)
    return FlowField(u, v, direction)


def sample_flow_many(field: FlowField, points: np.ndarray) -> np.ndarray:
    """Bilinearly sample the field at an (n, 2) array of (x, y) positions.

    Exact at lattice points and on affine fields.  Raises OutOfBounds if any
    point leaves [0, width-1] x [0, height-1].
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise OutOfBounds(f"expected (n, 2) points, got shape {pts.shape}")
    x, y = pts[:, 0], pts[:, 1]
    w, h = field.width, field.height
    if np.any(x < 0.0) or np.any(x > w - 1) or np.any(y < 0.0) or np.any(y > h - 1):
        raise OutOfBounds("sample position outside the field lattice hull")

    x0 = np.floor(x)
    y0 = np.floor(y)
    if w > 1:
        x0 = np.minimum(x0, w - 2)
    if h > 1:
        y0 = np.minimum(y0, h - 2)
    fx = x - x0
    fy = y - y0
    x0i = x0.astype(np.intp)
    y0i = y0.astype(np.intp)
    x1i = np.minimum(x0i + 1, w - 1)
    y1i = np.minimum(y0i + 1, h - 1)

    out = np.empty_like(pts)
    for k, plane in enumerate((field.u, field.v)):
        top = (1.0 - fx) * plane[y0i, x0i] + fx * plane[y0i, x1i]
        bot = (1.0 - fx) * plane[y1i, x0i] + fx * plane[y1i, x1i]
        out[:, k] = (1.0 - fy) * top + fy * bot
    return out


def sample_flow(field: FlowField, x: float, y: float) -> tuple[float, float]:
    """Sample one subpixel position; see sample_flow_many."""
    uv = sample_flow_many(field, np.array([[x, y]], dtype=np.float64))
    return float(uv[0, 0]), float(uv[0, 1])


def write_flowpack(volume: FlowVolume, sink: BinaryIO) -> int:
    """Quantize and serialize a volume; returns the number of bytes written."""
    flags = 1 if volume.backward is not None else 0
    width = volume.forward[0].width if volume.forward else 0
    height = volume.forward[0].height if volume.forward else 0
    n = sink.write(FLOWPACK_MAGIC)
    n += sink.write(
        _HEADER.pack(FLOWPACK_VERSION, CODEC_RAW, flags, volume.num_frames, width, height)
    )
    for fields in (volume.forward, volume.backward or ()):
        for field in fields:
            q = quantize_flow(field)
            n += sink.write(_FIELD_META.pack(q.min_u, q.max_u, q.min_v, q.max_v))
            n += sink.write(q.q_u.tobytes())
            n += sink.write(q.q_v.tobytes())
    return n


def read_flowpack(source: BinaryIO) -> FlowVolume:
    """Parse a FlowPack stream into a dequantized volume.

    Raises FormatError (with the byte offset) on bad magic, unsupported
    version or codec, or truncation.
    """
    offset = 0

    def take(nbytes: int, what: str) -> bytes:
        nonlocal offset
        data = source.read(nbytes)
        if len(data) != nbytes:
            raise FormatError(f"truncated {what}", offset + len(data))
        start = offset
        offset += nbytes
        return data

    magic = take(4, "magic")
    if magic != FLOWPACK_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    version, codec, flags, num_frames, width, height = _HEADER.unpack(
        take(_HEADER.size, "header")
    )
    if version != FLOWPACK_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if codec != CODEC_RAW:
        raise FormatError(f"unsupported codec id {codec}", 6)
    if num_frames < 1:
        raise FormatError("num_frames must be >= 1", 8)
    if num_frames > 1 and (width < 1 or height < 1):
        raise FormatError("zero-sized field plane", 12)

    plane_bytes = width * height

    def read_fields(direction: Direction) -> tuple[FlowField, ...]:
        fields = []
        for _ in range(num_frames - 1):
            min_u, max_u, min_v, max_v = _FIELD_META.unpack(
                take(_FIELD_META.size, "field range header")
            )
            q_u = np.frombuffer(take(plane_bytes, "u plane"), dtype=np.uint8)
            q_v = np.frombuffer(take(plane_bytes, "v plane"), dtype=np.uint8)
            q = QuantizedFlow(
                q_u.reshape(height, width),
                q_v.reshape(height, width),
                min_u,
                max_u,
                min_v,
                max_v,
            )
            fields.append(dequantize_flow(q, direction))
        return tuple(fields)

    forward = read_fields(Direction.FORWARD)
    backward = read_fields(Direction.BACKWARD) if flags & 1 else None
    return FlowVolume(num_frames, forward, backward)
