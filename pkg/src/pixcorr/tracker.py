"""Point tracking through flow volumes with forward-backward consistency stops.

A point at (x_t, y_t) advances to (x_t, y_t) + w_t(x_t, y_t), where w_t is the
bilinearly sampled forward flow.  Before the step is accepted, the backward
flow w_hat is sampled at the advected position and the step is kept only while

    a < gamma * b + delta,   a = |w + w_hat|^2,   b = |w|^2 + |w_hat|^2

(strict comparison).  A failing step terminates the track with reason
``consistency`` and its destination point is *not* appended.  A step whose
advected position leaves the lattice hull terminates with ``out_of_bounds``;
reaching the last frame terminates with ``end_of_video``.  Terminated points
are never re-instantiated.

All path arithmetic is double precision; stored points are float32 and stored
per-step (a, b) residuals are float16, which makes re-thresholding sweeps over
(gamma, delta) cheap.  Tracking is deterministic: the trajectory of a seed
depends only on the flow, and a fixed PRNG (NumPy PCG64) drives seeding.

PCTR trajectory container (little-endian):

    magic "PCTR" | version u16=1 | video-id length u16 + UTF-8 bytes
    | width u32 | height u32 | T u32 | seed u64 | gamma f32 | delta f32
    | trajectory count u32
    then per trajectory:
    start_frame u32 | length u32 | stop_reason u8 | (f32 x, f32 y) * length
    | residual count u32 (0 if absent) | (f16 a, f16 b) * count

Stop-reason codes: 0 = consistency, 1 = out_of_bounds, 2 = end_of_video.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import BinaryIO, Sequence

import numpy as np

from .errors import (
    DegenerateVideo,
    FormatError,
    MissingResiduals,
    OutOfBounds,
    PermissivenessError,
)
from .flowstore import FlowVolume, sample_flow_many

PCTR_MAGIC = b"PCTR"
PCTR_VERSION = 1

_SET_HEADER = struct.Struct("<IIIQff I")  # width, height, T, seed, gamma, delta, count
_TRAJ_HEADER = struct.Struct("<IIB")  # start_frame, length, stop_reason


class StopReason(IntEnum):
    CONSISTENCY = 0
    OUT_OF_BOUNDS = 1
    END_OF_VIDEO = 2


@dataclass(frozen=True)
class ThresholdParams:
    """Consistency threshold: continue while a < gamma * b + delta.

    gamma and delta must be finite and non-negative, with one exception:
    ``delta = inf`` is the permissive sentinel used to materialize full
    bounds-limited paths whose residuals support arbitrary later sweeps.
    """

    gamma: float = 0.0
    delta: float = 4.0

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and self.gamma >= 0.0):
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if math.isnan(self.delta) or self.delta < 0.0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")

    @classmethod
    def permissive(cls) -> "ThresholdParams":
        return cls(gamma=0.0, delta=math.inf)

    @property
    def is_permissive(self) -> bool:
        return math.isinf(self.delta)


@dataclass(frozen=True)
class Trajectory:
    """One subpixel track over the frame span [start_frame, end_frame].

    points has shape (length, 2) float32; residuals, when stored, has shape
    (length - 1, 2) float16 holding (a, b) for every *retained* step.
    """

    start_frame: int
    points: np.ndarray
    stop_reason: StopReason
    residuals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float32))
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise ValueError(f"points must be (length >= 1, 2), got {pts.shape}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.residuals is not None:
            res = np.ascontiguousarray(np.asarray(self.residuals, dtype=np.float16))
            if res.shape != (pts.shape[0] - 1, 2):
                raise ValueError(
                    f"residuals must be (length - 1, 2) = {(pts.shape[0] - 1, 2)}, got {res.shape}"
                )
            res.setflags(write=False)
            object.__setattr__(self, "residuals", res)
        object.__setattr__(self, "stop_reason", StopReason(self.stop_reason))
        if self.start_frame < 0:
            raise ValueError("start_frame must be >= 0")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def end_frame(self) -> int:
        return self.start_frame + len(self) - 1


@dataclass(frozen=True, eq=False)
class TrajectorySet:
    """All trajectories tracked through one video, immutable after build."""

    video_id: str
    width: int
    height: int
    num_frames: int
    seed: int
    params: ThresholdParams
    trajectories: tuple[Trajectory, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        for tr in self.trajectories:
            if tr.end_frame >= self.num_frames:
                raise ValueError(
                    f"trajectory span [{tr.start_frame}, {tr.end_frame}] exceeds "
                    f"video length {self.num_frames}"
                )
            x, y = tr.points[:, 0], tr.points[:, 1]
            if (
                np.any(x < 0)
                or np.any(x > self.width - 1)
                or np.any(y < 0)
                or np.any(y > self.height - 1)
            ):
                raise ValueError("trajectory point outside video bounds")


def seed_points(
    volume: FlowVolume, count: int, rng_seed: int
) -> list[tuple[int, float, float]]:
    """Draw seed triples (frame, x, y) uniformly in space and time.

    Frames are uniform over the integers [0, T-2]; x and y are continuous
    uniform over [0, width-1] and [0, height-1].  Deterministic given
    rng_seed (PCG64, one stream, frames then x then y).
    """
    if volume.num_frames < 2:
        raise DegenerateVideo(f"need T >= 2 frames to seed, got {volume.num_frames}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    frames = rng.integers(0, volume.num_frames - 1, size=count)
    xs = rng.uniform(0.0, volume.width - 1, size=count)
    ys = rng.uniform(0.0, volume.height - 1, size=count)
    return [(int(f), float(x), float(y)) for f, x, y in zip(frames, xs, ys)]


def advect(volume: FlowVolume, frame: int, point: tuple[float, float]) -> tuple[float, float]:
    """One tracking step: point plus the bilinearly sampled forward flow."""
    if not 0 <= frame <= volume.num_frames - 2:
        raise OutOfBounds(f"frame {frame} has no forward field")
    uv = sample_flow_many(volume.forward[frame], np.array([point], dtype=np.float64))
    return float(point[0] + uv[0, 0]), float(point[1] + uv[0, 1])


def consistency_residual(
    volume: FlowVolume, frame: int, point: tuple[float, float]
) -> tuple[float, float]:
    """(a, b) of the consistency test at one step.

    a = |w + w_hat|^2 with w_hat sampled at the advected position; raises
    OutOfBounds when that position leaves the image (the caller terminates
    the track).
    """
    if volume.backward is None:
        raise ValueError("volume has no backward flow")
    if not 0 <= frame <= volume.num_frames - 2:
        raise OutOfBounds(f"frame {frame} has no forward field")
    w = sample_flow_many(volume.forward[frame], np.array([point], dtype=np.float64))
    advected = np.asarray([point], dtype=np.float64) + w
    w_hat = sample_flow_many(volume.backward[frame], advected)
    s = w + w_hat
    a = float(s[0, 0] ** 2 + s[0, 1] ** 2)
    b = float(w[0, 0] ** 2 + w[0, 1] ** 2 + w_hat[0, 0] ** 2 + w_hat[0, 1] ** 2)
    return a, b


def track(
    volume: FlowVolume,
    seeds: Sequence[tuple[int, float, float]],
    params: ThresholdParams,
    store_residuals: bool = False,
    *,
    video_id: str = "",
    rng_seed: int = 0,
) -> TrajectorySet:
    """Advect every seed forward in time until a stop condition fires.

    Seeds are processed in lockstep per frame (vectorized), which is
    bit-identical to tracking them one at a time: each point's arithmetic is
    independent of the rest of the active set.
    """
    if volume.num_frames < 2:
        raise DegenerateVideo(f"need T >= 2 frames to track, got {volume.num_frames}")
    if volume.backward is None:
        raise ValueError("tracking requires backward flow for the consistency test")
    T, W, H = volume.num_frames, volume.width, volume.height

    n = len(seeds)
    starts = np.fromiter((s[0] for s in seeds), dtype=np.int64, count=n)
    xy = np.array([[s[1], s[2]] for s in seeds], dtype=np.float64).reshape(n, 2)
    if n:
        if starts.min() < 0 or starts.max() > T - 1:
            raise OutOfBounds("seed frame outside [0, T-1]")
        if (
            xy[:, 0].min() < 0
            or xy[:, 0].max() > W - 1
            or xy[:, 1].min() < 0
            or xy[:, 1].max() > H - 1
        ):
            raise OutOfBounds("seed position outside the image")

    history = np.full((T, n, 2), np.nan, dtype=np.float64)
    history[starts, np.arange(n)] = xy
    res_history = np.full((T - 1, n, 2), np.nan, dtype=np.float64) if store_residuals else None

    cur = xy.copy()
    alive = np.zeros(n, dtype=bool)
    reason = np.full(n, StopReason.END_OF_VIDEO, dtype=np.uint8)
    end_frame = starts.copy()
    gamma, delta = params.gamma, params.delta

    for t in range(T - 1):
        alive |= starts == t
        act = np.nonzero(alive)[0]
        if act.size == 0:
            continue
        w = sample_flow_many(volume.forward[t], cur[act])
        nxt = cur[act] + w
        inb = (
            (nxt[:, 0] >= 0.0)
            & (nxt[:, 0] <= W - 1)
            & (nxt[:, 1] >= 0.0)
            & (nxt[:, 1] <= H - 1)
        )
        oob = act[~inb]
        reason[oob] = StopReason.OUT_OF_BOUNDS
        alive[oob] = False
        if not inb.any():
            continue
        act, w, nxt = act[inb], w[inb], nxt[inb]

        w_hat = sample_flow_many(volume.backward[t], nxt)
        s = w + w_hat
        a = s[:, 0] ** 2 + s[:, 1] ** 2
        b = w[:, 0] ** 2 + w[:, 1] ** 2 + w_hat[:, 0] ** 2 + w_hat[:, 1] ** 2
        ok = a < gamma * b + delta

        failed = act[~ok]
        reason[failed] = StopReason.CONSISTENCY
        alive[failed] = False

        keep = act[ok]
        if keep.size:
            if res_history is not None:
                res_history[t, keep, 0] = a[ok]
                res_history[t, keep, 1] = b[ok]
            cur[keep] = nxt[ok]
            history[t + 1, keep] = nxt[ok]
            end_frame[keep] = t + 1

    trajectories = []
    for i in range(n):
        s0, e0 = int(starts[i]), int(end_frame[i])
        pts = history[s0 : e0 + 1, i]
        res = res_history[s0:e0, i] if res_history is not None else None
        trajectories.append(
            Trajectory(s0, pts.astype(np.float32), StopReason(int(reason[i])), res)
        )
    return TrajectorySet(video_id, W, H, T, rng_seed, params, tuple(trajectories))


def rethreshold(traj_set: TrajectorySet, new_params: ThresholdParams) -> TrajectorySet:
    """Re-truncate stored trajectories under tighter (gamma, delta).

    Equivalent to re-running track() with new_params, up to the float16
    precision of the stored residuals.  Requires residuals, and either a
    permissive-sentinel build or componentwise-tighter new params: a more
    permissive threshold cannot extend a track that was already cut.
    """
    old = traj_set.params
    if not old.is_permissive and not (
        new_params.gamma <= old.gamma and new_params.delta <= old.delta
    ):
        raise PermissivenessError(
            f"new params ({new_params.gamma}, {new_params.delta}) are more permissive "
            f"than build params ({old.gamma}, {old.delta})"
        )
    gamma, delta = new_params.gamma, new_params.delta
    out = []
    for tr in traj_set.trajectories:
        if len(tr) == 1:
            # no steps to re-test; PCTR cannot even encode residual presence here
            out.append(tr)
            continue
        if tr.residuals is None:
            raise MissingResiduals("set was built without store_residuals")
        a = tr.residuals[:, 0].astype(np.float64)
        b = tr.residuals[:, 1].astype(np.float64)
        violations = np.nonzero(a >= gamma * b + delta)[0]
        if violations.size == 0:
            out.append(tr)
        else:
            cut = int(violations[0])
            out.append(
                Trajectory(
                    tr.start_frame,
                    tr.points[: cut + 1],
                    StopReason.CONSISTENCY,
                    tr.residuals[:cut],
                )
            )
    return replace(traj_set, params=new_params, trajectories=tuple(out))


@dataclass(frozen=True)
class TrajectoryStats:
    count: int
    length_histogram: dict[int, int]
    stop_reasons: dict[str, int]
    mean_span: float

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "length_histogram": {str(k): v for k, v in sorted(self.length_histogram.items())},
            "stop_reasons": self.stop_reasons,
            "mean_span": self.mean_span,
        }


def trajectory_stats(traj_set: TrajectorySet) -> TrajectoryStats:
    """Exact length histogram, stop-reason counts, and mean span."""
    hist: dict[int, int] = {}
    reasons = {r.name.lower(): 0 for r in StopReason}
    total = 0
    for tr in traj_set.trajectories:
        hist[len(tr)] = hist.get(len(tr), 0) + 1
        reasons[tr.stop_reason.name.lower()] += 1
        total += len(tr)
    count = len(traj_set.trajectories)
    return TrajectoryStats(count, hist, reasons, total / count if count else 0.0)


def write_trajectories(traj_set: TrajectorySet, sink: BinaryIO) -> int:
    """Serialize a TrajectorySet as PCTR; returns the byte count."""
    vid = traj_set.video_id.encode("utf-8")
    if len(vid) > 0xFFFF:
        raise ValueError("video id longer than 65535 UTF-8 bytes")
    n = sink.write(PCTR_MAGIC)
    n += sink.write(struct.pack("<H", PCTR_VERSION))
    n += sink.write(struct.pack("<H", len(vid)))
    n += sink.write(vid)
    n += sink.write(
        _SET_HEADER.pack(
            traj_set.width,
            traj_set.height,
            traj_set.num_frames,
            traj_set.seed,
            np.float32(traj_set.params.gamma),
            np.float32(traj_set.params.delta),
            len(traj_set.trajectories),
        )
    )
    for tr in traj_set.trajectories:
        n += sink.write(_TRAJ_HEADER.pack(tr.start_frame, len(tr), int(tr.stop_reason)))
        n += sink.write(tr.points.astype("<f4").tobytes())
        if tr.residuals is None:
            n += sink.write(struct.pack("<I", 0))
        else:
            n += sink.write(struct.pack("<I", tr.residuals.shape[0]))
            n += sink.write(tr.residuals.astype("<f2").tobytes())
    return n


def read_trajectories(source: BinaryIO) -> TrajectorySet:
    """Parse a PCTR stream; FormatError (with byte offset) on malformed input."""
    offset = 0

    def take(nbytes: int, what: str) -> bytes:
        nonlocal offset
        data = source.read(nbytes)
        if len(data) != nbytes:
            raise FormatError(f"truncated {what}", offset + len(data))
        offset += nbytes
        return data

    if take(4, "magic") != PCTR_MAGIC:
        raise FormatError("bad magic", 0)
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != PCTR_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    (vid_len,) = struct.unpack("<H", take(2, "video id length"))
    vid = take(vid_len, "video id").decode("utf-8")
    width, height, num_frames, seed, gamma, delta, count = _SET_HEADER.unpack(
        take(_SET_HEADER.size, "set header")
    )
    trajectories = []
    for _ in range(count):
        header_at = offset
        start, length, reason_code = _TRAJ_HEADER.unpack(
            take(_TRAJ_HEADER.size, "trajectory header")
        )
        if length < 1:
            raise FormatError("trajectory length must be >= 1", header_at + 4)
        try:
            reason = StopReason(reason_code)
        except ValueError:
            raise FormatError(f"bad stop reason {reason_code}", header_at + 8) from None
        pts = np.frombuffer(take(8 * length, "points"), dtype="<f4").reshape(length, 2)
        (res_count,) = struct.unpack("<I", take(4, "residual count"))
        res = None
        if res_count:
            if res_count != length - 1:
                raise FormatError(
                    f"residual count {res_count} != length - 1 = {length - 1}", offset - 4
                )
            res = np.frombuffer(take(4 * res_count, "residuals"), dtype="<f2").reshape(
                res_count, 2
            )
        trajectories.append(Trajectory(start, pts, reason, res))
    return TrajectorySet(
        vid, width, height, num_frames, seed,
        ThresholdParams(float(gamma), float(delta)), tuple(trajectories),
    )
