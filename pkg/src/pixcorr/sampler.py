"""Frame selection for learning: anchor sampling and the random baseline.

Anchor sampling: given an anchor frame, every trajectory active on it votes
for the endpoint of its span that is furthest from the anchor (ties go to the
later endpoint).  The top-N frames by vote count are selected, which maximizes
temporal separation while guaranteeing trajectory density on the chosen
frames.  Votes landing on the anchor itself are discarded (a self-pair carries
no temporal variation).

All operations are pure functions over an immutable TrajectorySet; output is
invariant to trajectory ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientFrames, OutOfBounds
from .tracker import Trajectory, TrajectorySet


@dataclass(frozen=True)
class AnchorPlan:
    """Anchor frame plus the selected frames, best first, with vote counts."""

    anchor_frame: int
    selected_frames: tuple[int, ...]
    endpoint_counts: dict[int, int]
    n_requested: int

    def to_dict(self) -> dict:
        return {
            "anchor": self.anchor_frame,
            "frames": list(self.selected_frames),
            "counts": {str(f): self.endpoint_counts[f] for f in sorted(self.endpoint_counts)},
        }


def active_trajectories(traj_set: TrajectorySet, frame: int) -> list[int]:
    """Indices of trajectories whose span contains the frame."""
    if not 0 <= frame < traj_set.num_frames:
        raise OutOfBounds(f"frame {frame} outside [0, {traj_set.num_frames - 1}]")
    return [
        i
        for i, tr in enumerate(traj_set.trajectories)
        if tr.start_frame <= frame <= tr.end_frame
    ]


def furthest_endpoint(trajectory: Trajectory, anchor: int) -> int:
    """Span endpoint furthest from the anchor; ties resolve to the later one."""
    to_start = anchor - trajectory.start_frame
    to_end = trajectory.end_frame - anchor
    return trajectory.start_frame if to_start > to_end else trajectory.end_frame


def anchor_sample(traj_set: TrajectorySet, anchor: int, n: int) -> AnchorPlan:
    """Histogram furthest endpoints over active trajectories; keep the top n.

    Count ties break toward the larger |frame - anchor|, then the lower frame
    index, so selection is fully deterministic.  No active trajectories (or
    only self-votes) yield an empty plan, not an error.
    """
    if not 0 <= anchor < traj_set.num_frames:
        raise OutOfBounds(f"anchor {anchor} outside [0, {traj_set.num_frames - 1}]")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    counts: dict[int, int] = {}
    for i in active_trajectories(traj_set, anchor):
        endpoint = furthest_endpoint(traj_set.trajectories[i], anchor)
        if endpoint != anchor:
            counts[endpoint] = counts.get(endpoint, 0) + 1
    ranked = sorted(counts, key=lambda f: (-counts[f], -abs(f - anchor), f))
    return AnchorPlan(anchor, tuple(ranked[:n]), counts, n)


def random_sample(traj_set: TrajectorySet, n: int, rng_seed: int) -> list[int]:
    """n distinct frames, uniform without replacement, sorted ascending."""
    if n < 2:
        raise ValueError(f"need at least 2 frames for a pair, got n={n}")
    if n > traj_set.num_frames:
        raise InsufficientFrames(
            f"requested {n} distinct frames from a {traj_set.num_frames}-frame video"
        )
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    picked = rng.choice(traj_set.num_frames, size=n, replace=False)
    return sorted(int(f) for f in picked)
