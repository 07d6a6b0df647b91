"""Synthetic flow volumes with closed-form ground truth.

Every scene kind is an affine per-frame motion p -> A p + t (zero, constant
translation, rotation about a center, zoom about a center), so the sampled
flow planes are affine in position and bilinear interpolation reproduces them
exactly; oracle tolerances are then derivable instead of empirical.
Inconsistent-backward regions model occlusion: ``corrupted`` overrides the
backward flow with a fixed vector inside a static rectangle, while the
``occluder`` kind sweeps a rectangle along a linear path, corrupting the
backward flow wherever the rectangle sits at the destination frame.

ground_truth_track and expected_stop never touch generated flow grids: paths
come from the closed-form motion (matrix powers reduce to angle/scale
accumulation) and the consistency test is evaluated analytically, including
the bilinear blend across a corruption-region boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
import numpy as np

from .flowstore import Direction, FlowField, FlowVolume
from .tracker import StopReason, ThresholdParams

KINDS = ("zero", "constant", "rotation", "zoom", "occluder")


def _lattice_in_rect(ix, iy, rect: tuple[float, float, float, float]):
    rx, ry, rw, rh = rect
    return (ix >= rx) & (ix < rx + rw) & (iy >= ry) & (iy < ry + rh)


@dataclass(frozen=True)
class Corrupted:
    """Static backward-flow override: fixed vector inside a rectangle."""

    region: tuple[float, float, float, float]  # (x, y, w, h)
    vector: tuple[float, float]


@dataclass(frozen=True)
class OccluderPath:
    """Rectangle translating by velocity per frame, corrupting backward flow."""

    rect: tuple[float, float, float, float]  # position at frame 0
    velocity: tuple[float, float]
    vector: tuple[float, float]

    def rect_at(self, frame: int) -> tuple[float, float, float, float]:
        rx, ry, rw, rh = self.rect
        return (rx + frame * self.velocity[0], ry + frame * self.velocity[1], rw, rh)


@dataclass(frozen=True)
class SceneSpec:
    kind: str
    size: tuple[int, int]  # (W, H)
    frames: int
    constant: tuple[float, float] = (0.0, 0.0)
    center: tuple[float, float] | None = None
    degrees_per_frame: float = 0.0
    scale_per_frame: float = 1.0
    occluder: OccluderPath | None = None
    backward: Corrupted | str = "exact_inverse"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.frames < 2:
            raise ValueError(f"need at least 2 frames, got {self.frames}")
        if self.size[0] < 1 or self.size[1] < 1:
            raise ValueError(f"invalid size {self.size}")
        if self.kind == "zoom" and not (
            math.isfinite(self.scale_per_frame) and self.scale_per_frame > 0.0
        ):
            raise ValueError(f"zoom scale must be > 0, got {self.scale_per_frame}")
        if self.kind == "occluder":
            if self.occluder is None:
                raise ValueError("occluder scene needs an OccluderPath")
            if self.backward != "exact_inverse":
                raise ValueError("occluder scene defines its own backward corruption")
        if isinstance(self.backward, str) and self.backward != "exact_inverse":
            raise ValueError(f"unknown backward mode {self.backward!r}")

    @property
    def effective_center(self) -> tuple[float, float]:
        if self.center is not None:
            return self.center
        return ((self.size[0] - 1) / 2.0, (self.size[1] - 1) / 2.0)

    @classmethod
    def from_json(cls, doc: dict | str) -> "SceneSpec":
        if isinstance(doc, str):
            doc = json.loads(doc)
        occluder = None
        if "occluder" in doc and doc["occluder"] is not None:
            o = doc["occluder"]
            occluder = OccluderPath(
                tuple(o["rect"]), tuple(o.get("velocity", (0.0, 0.0))), tuple(o["vector"])
            )
        backward: Corrupted | str = "exact_inverse"
        bw = doc.get("backward", "exact_inverse")
        if isinstance(bw, dict):
            backward = Corrupted(tuple(bw["region"]), tuple(bw["vector"]))
        elif bw != "exact_inverse":
            raise ValueError(f"unknown backward mode {bw!r}")
        return cls(
            kind=doc["kind"],
            size=tuple(doc["size"]),
            frames=int(doc["frames"]),
            constant=tuple(doc.get("constant", (0.0, 0.0))),
            center=tuple(doc["center"]) if doc.get("center") is not None else None,
            degrees_per_frame=float(doc.get("degrees_per_frame", 0.0)),
            scale_per_frame=float(doc.get("scale_per_frame", 1.0)),
            occluder=occluder,
            backward=backward,
        )


def _motion(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame affine motion (matrix, translation): p -> M p + t."""
    if spec.kind in ("zero", "occluder"):
        return np.eye(2), np.zeros(2)
    if spec.kind == "constant":
        return np.eye(2), np.asarray(spec.constant, dtype=np.float64)
    c = np.asarray(spec.effective_center, dtype=np.float64)
    if spec.kind == "rotation":
        th = math.radians(spec.degrees_per_frame)
        m = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    else:  # zoom
        m = np.eye(2) * spec.scale_per_frame
    return m, c - m @ c


def _affine_flow_planes(
    m: np.ndarray, t: np.ndarray, width: int, height: int
) -> tuple[np.ndarray, np.ndarray]:
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    grid_x, grid_y = np.meshgrid(xs, ys)
    u = (m[0, 0] - 1.0) * grid_x + m[0, 1] * grid_y + t[0]
    v = m[1, 0] * grid_x + (m[1, 1] - 1.0) * grid_y + t[1]
    return u, v


def _corruption_rect(spec: SceneSpec, step: int):
    """Backward-corruption (rect, vector) affecting the step t -> t+1, if any."""
    if spec.kind == "occluder":
        occ = spec.occluder
        return occ.rect_at(step + 1), np.asarray(occ.vector, dtype=np.float64)
    if isinstance(spec.backward, Corrupted):
        return spec.backward.region, np.asarray(spec.backward.vector, dtype=np.float64)
    return None, None


def generate(spec: SceneSpec) -> FlowVolume:
    """Materialize the scene as lattice-sampled forward/backward fields.

    Frame-invariant fields are shared between entries, so large T costs no
    extra memory for static corruption patterns.
    """
    width, height = spec.size
    m, t = _motion(spec)
    m_inv = np.linalg.inv(m)
    t_inv = -(m_inv @ t)

    fw = FlowField(*_affine_flow_planes(m, t, width, height), Direction.FORWARD)
    forward = (fw,) * (spec.frames - 1)

    bw_u, bw_v = _affine_flow_planes(m_inv, t_inv, width, height)
    grid_x, grid_y = np.meshgrid(
        np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64)
    )

    def corrupted_field(rect, vector) -> FlowField:
        mask = _lattice_in_rect(grid_x, grid_y, rect)
        u = np.where(mask, vector[0], bw_u)
        v = np.where(mask, vector[1], bw_v)
        return FlowField(u, v, Direction.BACKWARD)

    if spec.kind == "occluder":
        backward = tuple(
            corrupted_field(*_corruption_rect(spec, step)) for step in range(spec.frames - 1)
        )
    elif isinstance(spec.backward, Corrupted):
        shared = corrupted_field(spec.backward.region, np.asarray(spec.backward.vector))
        backward = (shared,) * (spec.frames - 1)
    else:
        shared = FlowField(bw_u, bw_v, Direction.BACKWARD)
        backward = (shared,) * (spec.frames - 1)

    return FlowVolume(spec.frames, forward, backward)


def ground_truth_track(
    spec: SceneSpec, point: tuple[float, float], steps: int
) -> np.ndarray:
    """Closed-form path of a point under the scene motion: (steps+1, 2) array.

    No flow sampling: repeated application of the per-frame affine map reduces
    to angle accumulation (rotation), scale powers (zoom), or a single
    multiply (translation).
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    p0 = np.asarray(point, dtype=np.float64)
    js = np.arange(steps + 1, dtype=np.float64)
    if spec.kind in ("zero", "occluder"):
        return np.tile(p0, (steps + 1, 1))
    if spec.kind == "constant":
        return p0 + js[:, None] * np.asarray(spec.constant, dtype=np.float64)
    c = np.asarray(spec.effective_center, dtype=np.float64)
    r0 = p0 - c
    if spec.kind == "rotation":
        angles = np.radians(spec.degrees_per_frame) * js
        cos_a, sin_a = np.cos(angles), np.sin(angles)
        return c + np.stack(
            [cos_a * r0[0] - sin_a * r0[1], sin_a * r0[0] + cos_a * r0[1]], axis=1
        )
    return c + (spec.scale_per_frame ** js)[:, None] * r0  # zoom


def _blend_backward(
    q: np.ndarray,
    rect,
    vector,
    m_inv: np.ndarray,
    t_inv: np.ndarray,
    width: int,
    height: int,
) -> np.ndarray:
    """Analytic bilinear sample of the (possibly corrupted) backward field at q.

    Mirrors the sampler's corner/clamp convention; corner values come from the
    closed-form inverse motion, not from a generated grid.
    """

    def lattice_value(ix: float, iy: float) -> np.ndarray:
        if rect is not None and bool(_lattice_in_rect(ix, iy, rect)):
            return vector
        corner = np.array([ix, iy])
        return (m_inv @ corner + t_inv) - corner

    if rect is None:
        return (m_inv @ q + t_inv) - q  # affine fields are bilinear-exact
    x0 = min(math.floor(q[0]), width - 2) if width > 1 else 0
    y0 = min(math.floor(q[1]), height - 2) if height > 1 else 0
    x1 = min(x0 + 1, width - 1)
    y1 = min(y0 + 1, height - 1)
    fx, fy = q[0] - x0, q[1] - y0
    top = (1.0 - fx) * lattice_value(x0, y0) + fx * lattice_value(x1, y0)
    bot = (1.0 - fx) * lattice_value(x0, y1) + fx * lattice_value(x1, y1)
    return (1.0 - fy) * top + fy * bot


@dataclass(frozen=True)
class OracleResult:
    """Closed-form track outcome plus ambiguity margins for test filtering.

    threshold_margin is the minimum |a - (gamma*b + delta)| over evaluated
    steps; boundary_margin is the minimum distance of any advected point to
    the image boundary.  Tests skip scenes where either margin is inside the
    guard band, where float noise could flip a discrete decision.
    """

    points: np.ndarray  # (length, 2) float64 path actually retained
    end_frame: int
    stop_reason: StopReason
    threshold_margin: float
    boundary_margin: float


def oracle_track(
    spec: SceneSpec, seed: tuple[int, float, float], params: ThresholdParams
) -> OracleResult:
    """Walk the closed-form path, applying the consistency test analytically."""
    frame, x, y = seed
    width, height = spec.size
    m, t = _motion(spec)
    m_inv = np.linalg.inv(m)
    t_inv = -(m_inv @ t)
    path = ground_truth_track(spec, (x, y), spec.frames - 1 - frame)

    threshold_margin = math.inf
    boundary_margin = math.inf
    kept = 1
    reason = StopReason.END_OF_VIDEO
    end_frame = frame + len(path) - 1  # end_of_video unless a stop fires

    for j in range(len(path) - 1):
        step = frame + j
        p, q = path[j], path[j + 1]
        w = q - p
        edge = min(q[0], width - 1 - q[0], q[1], height - 1 - q[1])
        boundary_margin = min(boundary_margin, abs(edge))
        if edge < 0.0:
            reason, end_frame = StopReason.OUT_OF_BOUNDS, step
            break
        rect, vector = _corruption_rect(spec, step)
        w_hat = _blend_backward(q, rect, vector, m_inv, t_inv, width, height)
        a = float((w[0] + w_hat[0]) ** 2 + (w[1] + w_hat[1]) ** 2)
        b = float(w[0] ** 2 + w[1] ** 2 + w_hat[0] ** 2 + w_hat[1] ** 2)
        margin = a - (params.gamma * b + params.delta)
        threshold_margin = min(threshold_margin, abs(margin))
        if margin >= 0.0:
            reason, end_frame = StopReason.CONSISTENCY, step
            break
        kept += 1

    return OracleResult(path[:kept], end_frame, reason, threshold_margin, boundary_margin)


def expected_stop(
    spec: SceneSpec, seed: tuple[int, float, float], params: ThresholdParams
) -> tuple[int, StopReason]:
    """(last retained frame, stop reason) of the closed-form walk."""
    result = oracle_track(spec, seed, params)
    return result.end_frame, result.stop_reason
