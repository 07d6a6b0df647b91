"""Command-line surface wiring the pipeline end to end.

Commands: synth, encode-flow, decode-flow, track, rethreshold, sample, pairs,
loss, stats.  Every command is deterministic given (input bytes, flags, seed);
per-video work in ``pairs`` fans out over a worker pool (``--threads`` or the
PICO_THREADS env var) and merges in video-id order, so pool size never changes
the output.

Exit codes: 0 success, 2 format error, 3 precondition error, 4 numerical-check
failure.

A JSON config file (--config) provides RunConfig values; explicit flags
override the file.  Raw flow files for encode-flow/decode-flow are float32
little-endian planes in field order (forward fields first, then backward if
present), u plane then v plane, row-major.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import multiprocessing
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import correspond, flowstore, nce, sampler, synth, tracker
from .errors import FormatError, PixcorrError

EXIT_OK = 0
EXIT_FORMAT = 2
EXIT_PRECONDITION = 3
EXIT_NUMERICAL = 4

GRAD_CHECK_TOLERANCE = 1e-5


@dataclass(frozen=True)
class RunConfig:
    """Pipeline defaults; counts follow the reference operating point."""

    seed: int = 0
    gamma: float = 0.0
    delta: float = 4.0
    points_per_video: int = 1000
    n_frames: int = 3
    budget: int = 65536
    videos_per_iteration: int = 256
    feature_scale: int = 4
    sampling: str = "anchor"
    correspondence: str = "tracked"

    def __post_init__(self):
        for name in ("points_per_video", "n_frames", "budget", "videos_per_iteration",
                     "feature_scale"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.sampling not in ("anchor", "random"):
            raise ValueError(f"sampling must be anchor|random, got {self.sampling!r}")
        if self.correspondence not in ("tracked", "static"):
            raise ValueError(
                f"correspondence must be tracked|static, got {self.correspondence!r}"
            )
        if self.gamma < 0 or self.delta < 0:
            raise ValueError("gamma and delta must be >= 0")

    @classmethod
    def load(cls, path: str | None, overrides: dict) -> "RunConfig":
        base: dict = {}
        if path:
            with open(path, "r", encoding="utf-8") as fp:
                base = json.load(fp)
            unknown = set(base) - {f.name for f in fields(cls)}
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)


def _thread_count(flag_value: int | None) -> int:
    if flag_value is not None:
        return max(1, flag_value)
    env = os.environ.get("PICO_THREADS")
    return max(1, int(env)) if env else 1


def _cmd_synth(args) -> int:
    with open(args.scene, "r", encoding="utf-8") as fp:
        spec = synth.SceneSpec.from_json(json.load(fp))
    volume = synth.generate(spec)
    with open(args.out, "wb") as out:
        written = flowstore.write_flowpack(volume, out)
    print(f"wrote {written} bytes: T={spec.frames} {spec.size[0]}x{spec.size[1]} {spec.kind}")
    return EXIT_OK


def _cmd_encode_flow(args) -> int:
    t, w, h = args.frames, args.width, args.height
    n_fields = t - 1
    plane = w * h
    per_dir = n_fields * 2 * plane
    raw = np.fromfile(args.raw, dtype="<f4")
    expected = per_dir * (2 if args.backward else 1)
    if raw.size != expected:
        raise ValueError(
            f"raw file holds {raw.size} float32 values, expected {expected} "
            f"for T={t} {w}x{h} backward={args.backward}"
        )

    def to_fields(block: np.ndarray, direction) -> tuple:
        planes = block.reshape(n_fields, 2, h, w).astype(np.float64)
        return tuple(
            flowstore.FlowField(planes[i, 0], planes[i, 1], direction)
            for i in range(n_fields)
        )

    forward = to_fields(raw[:per_dir], flowstore.Direction.FORWARD)
    backward = to_fields(raw[per_dir:], flowstore.Direction.BACKWARD) if args.backward else None
    with open(args.out, "wb") as out:
        written = flowstore.write_flowpack(flowstore.FlowVolume(t, forward, backward), out)
    print(f"wrote {written} bytes")
    return EXIT_OK


def _cmd_decode_flow(args) -> int:
    with open(args.flowpack, "rb") as fp:
        volume = flowstore.read_flowpack(fp)
    blocks = []
    for field in list(volume.forward) + list(volume.backward or ()):
        blocks.append(field.u.astype("<f4"))
        blocks.append(field.v.astype("<f4"))
    with open(args.out, "wb") as out:
        for block in blocks:
            out.write(block.tobytes())
    header = {
        "frames": volume.num_frames,
        "width": volume.forward[0].width if volume.forward else 0,
        "height": volume.forward[0].height if volume.forward else 0,
        "backward": volume.backward is not None,
    }
    print(json.dumps(header, separators=(",", ":")))
    return EXIT_OK


def _cmd_track(args) -> int:
    cfg = RunConfig.load(args.config, {
        "seed": args.seed, "gamma": args.gamma, "delta": args.delta,
        "points_per_video": args.points,
    })
    with open(args.flow, "rb") as fp:
        volume = flowstore.read_flowpack(fp)
    if args.permissive_residuals:
        params = tracker.ThresholdParams.permissive()
        store = True
    else:
        params = tracker.ThresholdParams(cfg.gamma, cfg.delta)
        store = args.store_residuals
    seeds = tracker.seed_points(volume, cfg.points_per_video, cfg.seed)
    traj_set = tracker.track(
        volume, seeds, params, store, video_id=args.video_id, rng_seed=cfg.seed
    )
    with open(args.out, "wb") as out:
        written = tracker.write_trajectories(traj_set, out)
    print(f"wrote {written} bytes: {len(traj_set.trajectories)} trajectories")
    return EXIT_OK


def _cmd_rethreshold(args) -> int:
    with open(args.trajectories, "rb") as fp:
        traj_set = tracker.read_trajectories(fp)
    new_set = tracker.rethreshold(traj_set, tracker.ThresholdParams(args.gamma, args.delta))
    with open(args.out, "wb") as out:
        written = tracker.write_trajectories(new_set, out)
    print(f"wrote {written} bytes")
    return EXIT_OK


def _cmd_sample(args) -> int:
    with open(args.trajectories, "rb") as fp:
        traj_set = tracker.read_trajectories(fp)
    if args.mode == "anchor":
        if args.anchor_frame is None:
            raise ValueError("--anchor-frame is required in anchor mode")
        plan = sampler.anchor_sample(traj_set, args.anchor_frame, args.n)
        print(json.dumps(plan.to_dict(), separators=(",", ":")))
    else:
        frames = sampler.random_sample(traj_set, args.n, args.seed)
        print(json.dumps({"frames": frames}, separators=(",", ":")))
    return EXIT_OK


def _load_views(path: str | None) -> dict | None:
    if not path:
        return None
    with open(path, "r", encoding="utf-8") as fp:
        return json.load(fp)


def _geometry_from_json(doc: dict | None, width: int, height: int) -> correspond.ViewGeometry:
    if doc is None:
        return correspond.ViewGeometry.identity(width, height)
    crop = tuple(doc.get("crop", (0, 0, width, height)))
    out = tuple(doc.get("out", (crop[2], crop[3])))
    geom = correspond.ViewGeometry(crop, bool(doc.get("flip_h", False)), out)
    if crop[0] + crop[2] > width or crop[1] + crop[3] > height:
        raise ValueError(f"crop {crop} exceeds source size {(width, height)}")
    return geom


def _video_rng_seed(run_seed: int, video_id: str) -> np.random.SeedSequence:
    digest = hashlib.sha256(video_id.encode("utf-8")).digest()
    return np.random.SeedSequence([run_seed, int.from_bytes(digest[:8], "little")])


def video_pair_rows(traj_set, cfg: RunConfig, views: dict | None) -> list:
    """One video's candidate (pair, feature-index) rows under a RunConfig.

    The single pipeline implementation behind both the CLI and the in-process
    bindings: frame selection (anchor drawn from a per-video stream derived
    from the run seed and video id), pair construction, view geometry, and
    feature-index mapping.
    """
    rng = np.random.Generator(np.random.PCG64(_video_rng_seed(cfg.seed, traj_set.video_id)))

    if cfg.sampling == "anchor":
        anchor = int(rng.integers(0, traj_set.num_frames))
        plan = sampler.anchor_sample(traj_set, anchor, cfg.n_frames)
        frame_pairs = [(anchor, f) for f in plan.selected_frames]
    else:
        sample_seed = int(rng.integers(0, 2**63))
        picked = sampler.random_sample(
            traj_set, min(cfg.n_frames + 1, traj_set.num_frames), sample_seed
        )
        frame_pairs = [(picked[0], f) for f in picked[1:]]

    geom_a = _geometry_from_json(
        (views or {}).get("a"), traj_set.width, traj_set.height
    )
    geom_b = _geometry_from_json(
        (views or {}).get("b"), traj_set.width, traj_set.height
    )

    rows = []
    for fa, fb in frame_pairs:
        if cfg.correspondence == "tracked":
            pairs = correspond.pairs_from_trajectories(traj_set, fa, fb)
        else:
            pairs = correspond.static_pairs(
                traj_set.width, traj_set.height, fa, fb, cfg.feature_scale
            )
        viewed = correspond.apply_view(pairs, geom_a, geom_b)
        indices = correspond.to_feature_indices(
            viewed, cfg.feature_scale, geom_a.out_size, geom_b.out_size
        )
        rows.extend(zip(viewed, indices))
    return rows


def _pairs_for_video(task) -> tuple[str, list]:
    """Worker: read one PCTR and build its candidate rows."""
    path, cfg, views = task
    with open(path, "rb") as fp:
        traj_set = tracker.read_trajectories(fp)
    return traj_set.video_id, video_pair_rows(traj_set, cfg, views)


def _cmd_pairs(args) -> int:
    cfg = RunConfig.load(args.config, {
        "seed": args.seed, "budget": args.budget, "feature_scale": args.scale,
        "n_frames": args.n_frames, "sampling": args.sampling,
        "correspondence": args.correspondence,
    })
    views = _load_views(args.views)
    paths = list(args.trajectories)[: cfg.videos_per_iteration]
    tasks = [(path, cfg, views) for path in paths]

    threads = _thread_count(args.threads)
    if threads > 1 and len(tasks) > 1:
        with multiprocessing.Pool(threads) as pool:
            results = pool.map(_pairs_for_video, tasks)
    else:
        results = [_pairs_for_video(t) for t in tasks]

    per_video: dict[str, list] = {}
    for vid, rows in results:
        if vid in per_video:
            raise ValueError(f"duplicate video id {vid!r} across inputs")
        per_video[vid] = rows
    batch = correspond.assemble_batch(per_video, cfg.budget, cfg.seed, cfg.feature_scale)

    if args.out:
        with open(args.out, "w", encoding="utf-8") as out:
            batch.to_jsonl(out)
    else:
        batch.to_jsonl(sys.stdout)
    print(f"{len(batch)} pairs (budget {cfg.budget})", file=sys.stderr)
    return EXIT_OK


def _split_embeddings(matrix: np.ndarray, k: int, tau: float) -> nce.EmbeddingBatch:
    """File layout: M query rows, M positive rows, then K-1 negative rows."""
    if k < 2:
        raise ValueError(f"K must be >= 2, got {k}")
    rows = matrix.shape[0]
    remainder = rows - (k - 1)
    if remainder < 0 or remainder % 2:
        raise ValueError(
            f"{rows} rows cannot split into 2M queries/positives + {k - 1} negatives"
        )
    m = remainder // 2
    return nce.EmbeddingBatch(matrix[:m], matrix[m : 2 * m], matrix[2 * m :], tau)


def _directional_grad_check(batch: nce.EmbeddingBatch, rng_seed: int = 0) -> float:
    """Max relative error of analytic vs central-difference directional derivatives."""
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    grads = nce.info_nce_grad(batch)
    arrays = (batch.queries, batch.positives, batch.negatives)
    step = 1e-5
    worst = 0.0
    for _ in range(16):
        dirs = [rng.normal(size=a.shape) for a in arrays]
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))

        def shifted(sign: float) -> float:
            q, p, n = (a + sign * step * d for a, d in zip(arrays, dirs))
            return nce.info_nce_loss(nce.EmbeddingBatch(q, p, n, batch.temperature))

        fd = (shifted(+1.0) - shifted(-1.0)) / (2.0 * step)
        denom = max(abs(analytic), abs(fd), 1e-8)
        worst = max(worst, abs(fd - analytic) / denom)
    return worst


def _cmd_loss(args) -> int:
    with open(args.embeddings, "rb") as fp:
        matrix = nce.read_embeddings(fp)
    batch = _split_embeddings(matrix, args.k, args.tau)
    loss = nce.info_nce_loss(batch)
    print(f"{loss:.12f}")
    if args.grad_check:
        err = _directional_grad_check(batch)
        print(f"grad-check max relative error: {err:.3e}")
        if not (err < GRAD_CHECK_TOLERANCE):
            print("grad-check FAILED", file=sys.stderr)
            return EXIT_NUMERICAL
    return EXIT_OK


def _cmd_stats(args) -> int:
    with open(args.trajectories, "rb") as fp:
        traj_set = tracker.read_trajectories(fp)
    doc = tracker.trajectory_stats(traj_set).to_dict()
    if args.delta_sweep:
        deltas = [float(d) for d in args.delta_sweep.split(",")]
        sweep = []
        for delta in deltas:
            swept = tracker.rethreshold(
                traj_set, tracker.ThresholdParams(traj_set.params.gamma, delta)
            )
            sweep.append({"delta": delta,
                          "mean_span": tracker.trajectory_stats(swept).mean_span})
        doc["delta_sweep"] = sweep
    print(json.dumps(doc, separators=(",", ":")))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pixcorr",
        description="Pixel-correspondence extraction from optical-flow volumes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic FlowPack from a scene JSON")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("encode-flow", help="raw planar float32 -> FlowPack")
    p.add_argument("--raw", required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--backward", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_encode_flow)

    p = sub.add_parser("decode-flow", help="FlowPack -> raw planar float32")
    p.add_argument("flowpack")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_decode_flow)

    p = sub.add_parser("track", help="seed and track points through a FlowPack")
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--video-id", default="")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--store-residuals", action="store_true")
    p.add_argument("--permissive-residuals", action="store_true",
                   help="bounds-only stopping plus residuals, for rethreshold sweeps")
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("rethreshold", help="re-truncate a PCTR under tighter params")
    p.add_argument("trajectories")
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.set_defaults(func=_cmd_rethreshold)

    p = sub.add_parser("sample", help="select frames from a PCTR")
    p.add_argument("trajectories")
    p.add_argument("--mode", choices=("anchor", "random"), default="anchor")
    p.add_argument("--anchor-frame", type=int, default=None)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("pairs", help="build a budgeted pair batch from PCTR files")
    p.add_argument("trajectories", nargs="+")
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--scale", type=int, default=None)
    p.add_argument("--views", default=None, help="JSON file with per-view geometry")
    p.add_argument("--sampling", choices=("anchor", "random"), default=None)
    p.add_argument("--correspondence", choices=("tracked", "static"), default=None)
    p.add_argument("--n-frames", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="worker pool size (default: PICO_THREADS or 1)")
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_pairs)

    p = sub.add_parser("loss", help="evaluate InfoNCE on a PCEB embedding file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--tau", type=float, default=nce.DEFAULT_TEMPERATURE)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--grad-check", action="store_true")
    p.set_defaults(func=_cmd_loss)

    p = sub.add_parser("stats", help="summarize a PCTR file")
    p.add_argument("trajectories")
    p.add_argument("--delta-sweep", default=None,
                   help="comma-separated deltas; reports mean span per value")
    p.set_defaults(func=_cmd_stats)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (PixcorrError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
