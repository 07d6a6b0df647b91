"""Budgeted pixel-correspondence batches between frame pairs.

Pipeline shape: trajectory positions (or a static grid) give matched subpixel
points between two frames; per-view crop/resize/flip geometry maps each
endpoint into its view's output space; the floor-by-stride rule maps view
coordinates onto the dense feature grid; a global budget caps the merged
multi-video batch via seeded uniform subsampling.

Only coordinates flow through this module -- image resampling lives in the
training framework.  View-space coordinates live in the continuous rectangle
[0, W'-1] x [0, H'-1]; a source point is considered inside its crop exactly
when its scaled coordinate lands in that rectangle, which keeps the flip rule
x -> W'-1-x closed over view space for any resize ratio.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, Iterator, Mapping, Sequence

import numpy as np

from .errors import OutOfBounds
from .tracker import TrajectorySet

# ((row_a, col_a), (row_b, col_b)) on the feature grids of the two views
IndexPair = tuple[tuple[int, int], tuple[int, int]]

DEFAULT_BUDGET = 65536
DEFAULT_FEATURE_SCALE = 4


@dataclass(frozen=True)
class ViewGeometry:
    """Crop + resize + optional horizontal flip for one view.

    crop is (x0, y0, w, h) in source pixels; out_size is (W', H').  Resizing
    is pure coordinate scaling by W'/w and H'/h.
    """

    crop: tuple[int, int, int, int]
    flip_h: bool = False
    out_size: tuple[int, int] = (0, 0)

    def __post_init__(self):
        x0, y0, w, h = self.crop
        if w < 1 or h < 1 or x0 < 0 or y0 < 0:
            raise ValueError(f"invalid crop {self.crop}")
        if self.out_size[0] < 1 or self.out_size[1] < 1:
            raise ValueError(f"invalid out_size {self.out_size}")

    @classmethod
    def identity(cls, width: int, height: int) -> "ViewGeometry":
        return cls(crop=(0, 0, width, height), flip_h=False, out_size=(width, height))

    def map_point(self, x: float, y: float) -> tuple[float, float] | None:
        """Map a source point into view space, or None if it falls outside."""
        x0, y0, w, h = self.crop
        out_w, out_h = self.out_size
        sx = (x - x0) * (out_w / w)
        sy = (y - y0) * (out_h / h)
        if not (0.0 <= sx <= out_w - 1 and 0.0 <= sy <= out_h - 1):
            return None
        if self.flip_h:
            sx = out_w - 1 - sx
        return sx, sy


@dataclass(frozen=True)
class PixelPair:
    """One matched subpixel position in two frames (or two views of them)."""

    frame_a: int
    frame_b: int
    pa: tuple[float, float]
    pb: tuple[float, float]
    trajectory_id: int


def pairs_from_trajectories(
    traj_set: TrajectorySet, frame_a: int, frame_b: int
) -> list[PixelPair]:
    """One pair per trajectory active on both frames, at its stored positions."""
    for f in (frame_a, frame_b):
        if not 0 <= f < traj_set.num_frames:
            raise OutOfBounds(f"frame {f} outside [0, {traj_set.num_frames - 1}]")
    pairs = []
    for i, tr in enumerate(traj_set.trajectories):
        if tr.start_frame <= frame_a <= tr.end_frame and tr.start_frame <= frame_b <= tr.end_frame:
            pa = tr.points[frame_a - tr.start_frame]
            pb = tr.points[frame_b - tr.start_frame]
            pairs.append(
                PixelPair(frame_a, frame_b, (float(pa[0]), float(pa[1])),
                          (float(pb[0]), float(pb[1])), i)
            )
    return pairs


def static_pairs(
    width: int, height: int, frame_a: int, frame_b: int, grid_stride: int
) -> list[PixelPair]:
    """Identity correspondence pa = pb on a regular grid of cell centers.

    The Static (Video) baseline; with frame_a == frame_b it is the Static
    (Frame) arm.  Grid positions are i*stride + (stride-1)/2 per axis, one per
    complete stride cell; the trajectory id slot carries the row-major cell
    index.
    """
    if grid_stride < 1:
        raise ValueError(f"grid_stride must be >= 1, got {grid_stride}")
    cols = width // grid_stride
    rows = height // grid_stride
    half = (grid_stride - 1) / 2.0
    pairs = []
    for r in range(rows):
        y = r * grid_stride + half
        for c in range(cols):
            x = c * grid_stride + half
            pairs.append(PixelPair(frame_a, frame_b, (x, y), (x, y), r * cols + c))
    return pairs


def apply_view(
    pairs: Sequence[PixelPair], geom_a: ViewGeometry, geom_b: ViewGeometry
) -> list[PixelPair]:
    """Map each endpoint through its own view; drop pairs leaving either crop."""
    out = []
    for p in pairs:
        qa = geom_a.map_point(*p.pa)
        if qa is None:
            continue
        qb = geom_b.map_point(*p.pb)
        if qb is None:
            continue
        out.append(PixelPair(p.frame_a, p.frame_b, qa, qb, p.trajectory_id))
    return out


def feature_grid_shape(out_size: tuple[int, int], scale: int) -> tuple[int, int]:
    """(rows, cols) of the dense feature map for a view of out_size (W', H')."""
    w, h = out_size
    return (-(-h // scale), -(-w // scale))


def to_feature_indices(
    pairs: Sequence[PixelPair],
    scale: int,
    size_a: tuple[int, int],
    size_b: tuple[int, int],
) -> list[IndexPair]:
    """Map view coordinates onto feature cells: (row, col) = (floor(y/s), floor(x/s)).

    Indices are clamped into the ceil(H'/s) x ceil(W'/s) grid, which guards
    the open upper edge of view space.  Pairs collapsing onto the same cell in
    both views are kept; they are still valid positives.
    """
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    shapes = (feature_grid_shape(size_a, scale), feature_grid_shape(size_b, scale))
    out = []
    for p in pairs:
        cells = []
        for (x, y), (rows, cols) in zip((p.pa, p.pb), shapes):
            row = min(max(int(y // scale), 0), rows - 1)
            col = min(max(int(x // scale), 0), cols - 1)
            cells.append((row, col))
        out.append((cells[0], cells[1]))
    return out


@dataclass(frozen=True, eq=False)
class CorrespondenceBatch:
    """Budgeted multi-video pair batch in columnar storage.

    coords rows are (xa, ya, xb, yb) float32; feature_indices rows are
    (row_a, col_a, row_b, col_b) int32.  Columnar arrays are what the
    bindings expose as zero-copy buffers.
    """

    video_ids: tuple[str, ...]
    frames: np.ndarray  # (M, 2) int32: frame_a, frame_b
    coords: np.ndarray  # (M, 4) float32
    feature_indices: np.ndarray  # (M, 4) int32
    trajectory_ids: np.ndarray  # (M,) int64
    budget: int
    scale: int

    def __post_init__(self):
        for name, dtype, cols in (
            ("frames", np.int32, 2),
            ("coords", np.float32, 4),
            ("feature_indices", np.int32, 4),
            ("trajectory_ids", np.int64, None),
        ):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=dtype))
            want = (len(self.video_ids),) if cols is None else (len(self.video_ids), cols)
            if arr.shape != want:
                raise ValueError(f"{name} must have shape {want}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if len(self.video_ids) > self.budget:
            raise ValueError("batch exceeds its budget")

    def __len__(self) -> int:
        return len(self.video_ids)

    @property
    def pairs(self) -> list[PixelPair]:
        return [
            PixelPair(
                int(self.frames[i, 0]),
                int(self.frames[i, 1]),
                (float(self.coords[i, 0]), float(self.coords[i, 1])),
                (float(self.coords[i, 2]), float(self.coords[i, 3])),
                int(self.trajectory_ids[i]),
            )
            for i in range(len(self))
        ]

    def index_pairs(self) -> list[IndexPair]:
        f = self.feature_indices
        return [
            ((int(f[i, 0]), int(f[i, 1])), (int(f[i, 2]), int(f[i, 3])))
            for i in range(len(self))
        ]

    def iter_rows(self) -> Iterator[dict]:
        for i in range(len(self)):
            yield {
                "vid": self.video_ids[i],
                "fa": int(self.frames[i, 0]),
                "fb": int(self.frames[i, 1]),
                "pa": [float(self.coords[i, 0]), float(self.coords[i, 1])],
                "pb": [float(self.coords[i, 2]), float(self.coords[i, 3])],
                "ia": [int(self.feature_indices[i, 0]), int(self.feature_indices[i, 1])],
                "ib": [int(self.feature_indices[i, 2]), int(self.feature_indices[i, 3])],
            }

    def to_jsonl(self, fp: IO[str]) -> int:
        """One compact JSON object per pair; returns the line count."""
        n = 0
        for row in self.iter_rows():
            fp.write(json.dumps(row, separators=(",", ":")) + "\n")
            n += 1
        return n


def assemble_batch(
    per_video: Mapping[str, Sequence[tuple[PixelPair, IndexPair]]],
    budget: int = DEFAULT_BUDGET,
    rng_seed: int = 0,
    scale: int = DEFAULT_FEATURE_SCALE,
    per_video_quota: bool = False,
) -> CorrespondenceBatch:
    """Merge per-video candidates and cap at the budget.

    Videos merge in sorted-id order (so parallel producers cannot change the
    output); over-budget totals are subsampled uniformly without replacement
    with a PCG64 stream, preserving original order and provenance.

    per_video_quota is the balanced ablation arm: the budget is split evenly
    over the videos (earlier ids take the remainder) and each video is
    subsampled to its own cap; a video under its cap keeps everything and its
    slack is not redistributed.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    vids: list[str] = []
    rows: list[tuple[PixelPair, IndexPair]] = []
    if per_video_quota and per_video:
        ordered = sorted(per_video)
        base, extra = divmod(budget, len(ordered))
        for i, vid in enumerate(ordered):
            items = list(per_video[vid])
            cap = base + (1 if i < extra else 0)
            if len(items) > cap:
                keep = np.sort(rng.choice(len(items), size=cap, replace=False))
                items = [items[k] for k in keep]
            vids.extend([vid] * len(items))
            rows.extend(items)
    else:
        for vid in sorted(per_video):
            for item in per_video[vid]:
                vids.append(vid)
                rows.append(item)
        if len(rows) > budget:
            keep = np.sort(rng.choice(len(rows), size=budget, replace=False))
            vids = [vids[k] for k in keep]
            rows = [rows[k] for k in keep]

    m = len(rows)
    frames = np.zeros((m, 2), dtype=np.int32)
    coords = np.zeros((m, 4), dtype=np.float32)
    feats = np.zeros((m, 4), dtype=np.int32)
    tids = np.zeros(m, dtype=np.int64)
    for i, (pair, idx) in enumerate(rows):
        frames[i] = (pair.frame_a, pair.frame_b)
        coords[i] = (pair.pa[0], pair.pa[1], pair.pb[0], pair.pb[1])
        feats[i] = (idx[0][0], idx[0][1], idx[1][0], idx[1][1])
        tids[i] = pair.trajectory_id
    return CorrespondenceBatch(tuple(vids), frames, coords, feats, tids, budget, scale)
