"""Pixel-correspondence extraction from precomputed optical-flow volumes.

Turns per-video flow stacks into budgeted pixel-level positive pairs for
dense contrastive learning: occlusion-aware point tracking, anchor-based
frame selection, view-geometry composition, feature-grid index mapping, and a
verifiable InfoNCE loss evaluator.
"""

from .correspond import (
    CorrespondenceBatch,
    IndexPair,
    PixelPair,
    ViewGeometry,
    apply_view,
    assemble_batch,
    pairs_from_trajectories,
    static_pairs,
    to_feature_indices,
)
from .errors import (
    DegenerateEmbedding,
    DegenerateVideo,
    FormatError,
    InsufficientFrames,
    InvalidFlow,
    MissingResiduals,
    OutOfBounds,
    PermissivenessError,
    PixcorrError,
    ShapeError,
)
from .flowstore import (
    Direction,
    FlowField,
    FlowVolume,
    QuantizedFlow,
    dequantize_flow,
    quantize_flow,
    read_flowpack,
    sample_flow,
    sample_flow_many,
    write_flowpack,
)
from .nce import (
    EmbeddingBatch,
    ProjectionHead,
    info_nce_grad,
    info_nce_loss,
    project,
    read_embeddings,
    similarity,
    write_embeddings,
)
from .sampler import AnchorPlan, active_trajectories, anchor_sample, random_sample
from .synth import Corrupted, OccluderPath, SceneSpec, expected_stop, generate, ground_truth_track
from .tracker import (
    StopReason,
    ThresholdParams,
    Trajectory,
    TrajectorySet,
    advect,
    consistency_residual,
    read_trajectories,
    rethreshold,
    seed_points,
    track,
    trajectory_stats,
    write_trajectories,
)

__version__ = "0.1.0"
