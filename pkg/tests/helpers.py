"""Shared builders and independent oracles for the test suite.

Oracles here deliberately avoid the library code paths they check: the anchor
oracle enumerates frames directly, volumes for tracking tests are built from
raw constant planes, and scene sampling keeps flow magnitudes small enough
that float16 residual storage stays well inside the 1e-2 px^2 guard band.
"""

from __future__ import annotations

import numpy as np

from pixcorr.flowstore import Direction, FlowField, FlowVolume
from pixcorr.synth import Corrupted, OccluderPath, SceneSpec
from pixcorr.tracker import TrajectorySet, ThresholdParams, Trajectory, StopReason


def const_field(width, height, u, v, direction=Direction.FORWARD) -> FlowField:
    return FlowField(
        np.full((height, width), float(u)),
        np.full((height, width), float(v)),
        direction,
    )


def const_volume(width, height, frames, fwd=(0.0, 0.0), bwd=None) -> FlowVolume:
    """Constant forward flow; backward defaults to the exact inverse."""
    if bwd is None:
        bwd = (-fwd[0], -fwd[1])
    f = const_field(width, height, *fwd)
    b = const_field(width, height, *bwd, direction=Direction.BACKWARD)
    return FlowVolume(frames, (f,) * (frames - 1), (b,) * (frames - 1))


def field_from_fn(width, height, fn, direction=Direction.FORWARD) -> FlowField:
    """Sample (u, v) = fn(x, y) on the lattice."""
    grid_x, grid_y = np.meshgrid(
        np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64)
    )
    u, v = fn(grid_x, grid_y)
    return FlowField(np.broadcast_to(u, grid_x.shape), np.broadcast_to(v, grid_x.shape), direction)


def grid_seeds(width, height, stride, frame=0):
    """Seeds at stride-cell centers, row-major (matches static_pairs order)."""
    half = (stride - 1) / 2.0
    return [
        (frame, c * stride + half, r * stride + half)
        for r in range(height // stride)
        for c in range(width // stride)
    ]


def span_set(spans, num_frames, width=64, height=48, seed=0,
             params=ThresholdParams(0.0, 4.0)) -> TrajectorySet:
    """TrajectorySet with given (start, end) spans and placeholder geometry."""
    trajectories = []
    for start, end in spans:
        pts = np.zeros((end - start + 1, 2), dtype=np.float32)
        trajectories.append(Trajectory(start, pts, StopReason.END_OF_VIDEO))
    return TrajectorySet("spans", width, height, num_frames, seed, params,
                         tuple(trajectories))


def brute_force_anchor(spans, anchor, n, num_frames):
    """Independent anchor-sampling oracle: enumerate every candidate frame.

    For each frame g, count trajectories active on the anchor whose
    furthest-from-anchor endpoint (later endpoint on ties) equals g.  Select
    the top n frames g != anchor with count >= 1, ordering by count desc,
    then |g - anchor| desc, then g asc.
    """
    counts = {}
    for g in range(num_frames):
        c = 0
        for start, end in spans:
            if not (start <= anchor <= end):
                continue
            if anchor - start > end - anchor:
                furthest = start
            else:
                furthest = end
            if furthest == g:
                c += 1
        if c > 0 and g != anchor:
            counts[g] = c
    ranked = sorted(counts, key=lambda g: (-counts[g], -abs(g - anchor), g))
    return ranked[:n], counts


def residual_span_set(delta) -> TrajectorySet:
    """Family whose spans grow deterministically with delta.

    Every trajectory starts at frame 0 and carries the residual sequence
    a_i = i + 0.5, so rethresholding at delta cuts all of them at the same
    step; the endpoint votes stay concentrated while spans stretch.
    """
    from pixcorr.tracker import rethreshold

    steps = 20
    res = np.array([[i + 0.5, i + 0.5] for i in range(steps)], dtype=np.float16)
    pts = np.zeros((steps + 1, 2), dtype=np.float32)
    trajectories = tuple(
        Trajectory(0, pts, StopReason.END_OF_VIDEO, res) for _ in range(6)
    )
    base = TrajectorySet("family", 8, 8, steps + 4, 0,
                         ThresholdParams.permissive(), trajectories)
    return rethreshold(base, ThresholdParams(0.0, float(delta)))


def random_spans(rng, num_frames, max_count=24):
    count = int(rng.integers(0, max_count + 1))
    spans = []
    for _ in range(count):
        start = int(rng.integers(0, num_frames))
        end = int(rng.integers(start, num_frames))
        spans.append((start, end))
    return spans


def random_scene(rng) -> SceneSpec:
    """Modest-motion random scene; flows stay within ~2.5 px per step."""
    width = int(rng.integers(20, 44))
    height = int(rng.integers(16, 36))
    frames = int(rng.integers(4, 11))
    kind = rng.choice(["zero", "constant", "rotation", "zoom", "occluder", "corrupted"])
    backward = "exact_inverse"
    occluder = None
    constant = (0.0, 0.0)
    degrees = 0.0
    scale = 1.0

    def corrupt_vector():
        mag = rng.uniform(1.5, 2.4)
        angle = rng.uniform(0.0, 2 * np.pi)
        return (mag * np.cos(angle), mag * np.sin(angle))

    if kind == "constant":
        constant = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0))
    elif kind == "rotation":
        degrees = rng.uniform(-3.0, 3.0)
    elif kind == "zoom":
        scale = rng.uniform(0.96, 1.04)
    elif kind == "occluder":
        rect = (float(rng.integers(0, width - 6)), float(rng.integers(0, height - 6)),
                float(rng.integers(4, 8)), float(rng.integers(4, 8)))
        velocity = (float(rng.integers(-2, 3)), float(rng.integers(-2, 3)))
        occluder = OccluderPath(rect, velocity, corrupt_vector())
        kind = "occluder"
    elif kind == "corrupted":
        rect = (float(rng.integers(0, width - 8)), float(rng.integers(0, height - 8)),
                float(rng.integers(5, 12)), float(rng.integers(5, 12)))
        backward = Corrupted(rect, corrupt_vector())
        kind = rng.choice(["zero", "constant"])
        if kind == "constant":
            constant = (rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5))

    return SceneSpec(
        kind=str(kind),
        size=(width, height),
        frames=frames,
        constant=constant,
        degrees_per_frame=degrees,
        scale_per_frame=scale,
        occluder=occluder,
        backward=backward,
    )


def interior_seed(rng, spec: SceneSpec):
    width, height = spec.size
    frame = int(rng.integers(0, spec.frames - 1))
    x = float(rng.uniform(1.0, width - 2.0))
    y = float(rng.uniform(1.0, height - 2.0))
    return (frame, x, y)
