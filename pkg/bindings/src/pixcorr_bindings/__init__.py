"""In-process bindings over the pixcorr core for training pipelines.

Five operations -- track, rethreshold, anchor sampling, pair batching, and
InfoNCE loss/gradient evaluation -- with the same wire formats as the command
line: FlowPack bytes in, PCTR bytes out, pair batches as contiguous numeric
buffers.  The binding layer adds no numerics of its own; every operation
delegates to the core library, so outputs are bit-identical to the CLI on
identical inputs.

Pair batches are exposed through BoundBatchView, a set of read-only zero-copy
array views over the owning batch's columnar storage (standard buffer
protocol: shape, strides, dtype).  The view holds a reference to its batch, so
it can never outlive the data it points into.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

import pixcorr
from pixcorr import correspond, nce, tracker
from pixcorr.cli import RunConfig, video_pair_rows
from pixcorr.flowstore import read_flowpack

__version__ = pixcorr.__version__

__all__ = [
    "BoundBatchView",
    "TrackConfig",
    "TrajectoryHandle",
    "bound_anchor_sample",
    "bound_loss",
    "bound_pairs",
    "bound_rethreshold",
    "bound_track",
]


@dataclass(frozen=True)
class TrackConfig:
    """Mirror of the CLI track flags."""

    video_id: str = ""
    seed: int = 0
    points: int = 1000
    gamma: float = 0.0
    delta: float = 4.0
    permissive_residuals: bool = False
    store_residuals: bool = False


class TrajectoryHandle:
    """Immutable handle over a tracked TrajectorySet; shareable across threads."""

    def __init__(self, traj_set: tracker.TrajectorySet):
        self._set = traj_set

    @property
    def trajectory_set(self) -> tracker.TrajectorySet:
        return self._set

    @property
    def video_id(self) -> str:
        return self._set.video_id

    @property
    def num_frames(self) -> int:
        return self._set.num_frames

    def __len__(self) -> int:
        return len(self._set.trajectories)

    def to_bytes(self) -> bytes:
        """Serialize as PCTR, byte-identical to the CLI track output."""
        buf = io.BytesIO()
        tracker.write_trajectories(self._set, buf)
        return buf.getvalue()


def bound_track(flowpack: bytes, config: TrackConfig | None = None, **overrides) -> TrajectoryHandle:
    """Seed and track points through a FlowPack byte string."""
    cfg = config or TrackConfig(**overrides)
    volume = read_flowpack(io.BytesIO(flowpack))
    if cfg.permissive_residuals:
        params = tracker.ThresholdParams.permissive()
        store = True
    else:
        params = tracker.ThresholdParams(cfg.gamma, cfg.delta)
        store = cfg.store_residuals
    seeds = tracker.seed_points(volume, cfg.points, cfg.seed)
    traj_set = tracker.track(
        volume, seeds, params, store, video_id=cfg.video_id, rng_seed=cfg.seed
    )
    return TrajectoryHandle(traj_set)


def bound_rethreshold(handle: TrajectoryHandle, gamma: float, delta: float) -> TrajectoryHandle:
    return TrajectoryHandle(
        tracker.rethreshold(handle.trajectory_set, tracker.ThresholdParams(gamma, delta))
    )


def bound_anchor_sample(handle: TrajectoryHandle, anchor: int, n: int) -> dict:
    """Anchor plan as the same JSON payload the CLI prints."""
    from pixcorr.sampler import anchor_sample

    return anchor_sample(handle.trajectory_set, anchor, n).to_dict()


class BoundBatchView:
    """Read-only zero-copy views over a CorrespondenceBatch's buffers."""

    def __init__(self, batch: correspond.CorrespondenceBatch):
        self._batch = batch  # keeps the owning storage alive

    @property
    def batch(self) -> correspond.CorrespondenceBatch:
        return self._batch

    def __len__(self) -> int:
        return len(self._batch)

    @property
    def coords(self) -> np.ndarray:
        """(M, 4) float32 view: xa, ya, xb, yb per pair."""
        return self._batch.coords.view()

    @property
    def feature_indices(self) -> np.ndarray:
        """(M, 4) int32 view: row_a, col_a, row_b, col_b per pair."""
        return self._batch.feature_indices.view()

    @property
    def frames(self) -> np.ndarray:
        """(M, 2) int32 view: frame_a, frame_b per pair."""
        return self._batch.frames.view()

    @property
    def trajectory_ids(self) -> np.ndarray:
        """(M,) int64 view of provenance ids."""
        return self._batch.trajectory_ids.view()

    @property
    def video_ids(self) -> tuple[str, ...]:
        return self._batch.video_ids

    def to_jsonl_bytes(self) -> bytes:
        """Serialize as the CLI pairs JSONL output, byte for byte."""
        out = io.StringIO()
        self._batch.to_jsonl(out)
        return out.getvalue().encode("utf-8")


def _run_config(config: RunConfig | Mapping | None, overrides: Mapping) -> RunConfig:
    if isinstance(config, RunConfig):
        base = asdict(config)
    else:
        base = dict(config or {})
    base.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**base)


def bound_pairs(
    handles: TrajectoryHandle | Sequence[TrajectoryHandle],
    config: RunConfig | Mapping | None = None,
    views: dict | str | None = None,
    **overrides,
) -> BoundBatchView:
    """Budgeted pair batch over one or more trajectory handles.

    Equivalent to the CLI ``pairs`` command on the PCTR serializations of the
    same handles with the same RunConfig; the JSONL serialization of the
    result is byte-identical.
    """
    if isinstance(handles, TrajectoryHandle):
        handles = [handles]
    cfg = _run_config(config, overrides)
    if isinstance(views, str):
        views = json.loads(views)
    per_video: dict[str, list] = {}
    for handle in list(handles)[: cfg.videos_per_iteration]:
        traj_set = handle.trajectory_set
        if traj_set.video_id in per_video:
            raise ValueError(f"duplicate video id {traj_set.video_id!r}")
        per_video[traj_set.video_id] = video_pair_rows(traj_set, cfg, views)
    batch = correspond.assemble_batch(per_video, cfg.budget, cfg.seed, cfg.feature_scale)
    return BoundBatchView(batch)


def bound_loss(queries, positives, negatives, tau: float = nce.DEFAULT_TEMPERATURE):
    """InfoNCE loss and exact gradients over buffer-protocol embedding arrays.

    Inputs are adopted zero-copy when they are C-contiguous float64 buffers
    (anything else is converted by NumPy).  Returns (loss, (grad_queries,
    grad_positives, grad_negatives)).
    """
    batch = nce.EmbeddingBatch(queries, positives, negatives, tau)
    return nce.info_nce_loss(batch), nce.info_nce_grad(batch)
