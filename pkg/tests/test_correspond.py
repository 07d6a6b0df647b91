import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixcorr.correspond import (
    PixelPair,
    ViewGeometry,
    apply_view,
    assemble_batch,
    feature_grid_shape,
    pairs_from_trajectories,
    static_pairs,
    to_feature_indices,
)
from pixcorr.synth import SceneSpec, generate
from pixcorr.tracker import ThresholdParams, track

from helpers import const_volume, grid_seeds


def tracked_set(width=32, height=32, frames=6, fwd=(0.0, 0.0), stride=4):
    vol = const_volume(width, height, frames, fwd=fwd)
    return track(vol, grid_seeds(width, height, stride), ThresholdParams(0.0, 4.0))


class TestPairsFromTrajectories:
    def test_zero_flow_identity_pairs(self):
        ts = tracked_set()
        for p in pairs_from_trajectories(ts, 0, 3):
            assert p.pa == p.pb

    def test_constant_flow_displacement(self):
        ts = tracked_set(fwd=(2.0, 0.0))
        pairs = pairs_from_trajectories(ts, 0, 3)
        assert pairs
        for p in pairs:
            assert p.pb[0] == pytest.approx(p.pa[0] + 6.0, abs=1e-4)
            assert p.pb[1] == pytest.approx(p.pa[1], abs=1e-4)

    def test_rotation_matches_closed_form(self):
        spec = SceneSpec("rotation", (48, 48), 11, center=(23.5, 23.5),
                         degrees_per_frame=1.0)
        ts = track(generate(spec), grid_seeds(48, 48, 8, frame=0),
                   ThresholdParams(0.0, 4.0))
        pairs = pairs_from_trajectories(ts, 0, 10)
        assert pairs
        th = math.radians(10.0)
        for p in pairs:
            dx, dy = p.pa[0] - 23.5, p.pa[1] - 23.5
            expect = (23.5 + math.cos(th) * dx - math.sin(th) * dy,
                      23.5 + math.sin(th) * dx + math.cos(th) * dy)
            assert math.hypot(p.pb[0] - expect[0], p.pb[1] - expect[1]) < 0.05

    def test_no_shared_trajectories(self):
        ts = tracked_set(fwd=(30.0, 0.0))  # everything leaves after one step
        assert pairs_from_trajectories(ts, 0, 5) == []

    def test_provenance_ids(self):
        ts = tracked_set()
        ids = [p.trajectory_id for p in pairs_from_trajectories(ts, 1, 2)]
        assert ids == sorted(ids)


class TestStaticPairs:
    def test_stride_equal_to_image_gives_center(self):
        pairs = static_pairs(32, 32, 0, 3, 32)
        assert len(pairs) == 1
        assert pairs[0].pa == pairs[0].pb == (15.5, 15.5)

    def test_static_frame_arm(self):
        pairs = static_pairs(16, 16, 2, 2, 8)
        assert all(p.frame_a == p.frame_b == 2 for p in pairs)

    def test_grid_count(self):
        assert len(static_pairs(32, 32, 0, 1, 4)) == 64

    def test_positions_inside_bounds(self):
        for p in static_pairs(33, 9, 0, 1, 4):
            assert 0 <= p.pa[0] <= 32 and 0 <= p.pa[1] <= 8


class TestApplyView:
    def test_identity_geometry(self):
        ts = tracked_set()
        pairs = pairs_from_trajectories(ts, 0, 2)
        ident = ViewGeometry.identity(32, 32)
        assert apply_view(pairs, ident, ident) == pairs

    def test_flip_formula(self):
        geom = ViewGeometry((0, 0, 32, 32), flip_h=True, out_size=(32, 32))
        pair = PixelPair(0, 1, (10.0, 5.0), (20.0, 7.0), 0)
        (out,) = apply_view([pair], geom, geom)
        assert out.pa == (31 - 10.0, 5.0) and out.pb == (31 - 20.0, 7.0)

    def test_crop_resize_worked_example(self):
        geom = ViewGeometry((8, 8, 16, 16), flip_h=False, out_size=(32, 32))
        pair = PixelPair(0, 1, (12.0, 12.0), (12.0, 12.0), 0)
        (out,) = apply_view([pair], geom, geom)
        assert out.pa == (8.0, 8.0) and out.pb == (8.0, 8.0)

    def test_drop_iff_either_endpoint_outside(self):
        rng = np.random.Generator(np.random.PCG64(12))
        geom_a = ViewGeometry((4, 2, 16, 20), flip_h=True, out_size=(24, 18))
        geom_b = ViewGeometry((0, 0, 28, 26), flip_h=False, out_size=(14, 13))

        def inside(geom, x, y):
            x0, y0, w, h = geom.crop
            sx = (x - x0) * geom.out_size[0] / w
            sy = (y - y0) * geom.out_size[1] / h
            return 0 <= sx <= geom.out_size[0] - 1 and 0 <= sy <= geom.out_size[1] - 1

        pairs = [
            PixelPair(0, 1,
                      (rng.uniform(0, 31), rng.uniform(0, 27)),
                      (rng.uniform(0, 31), rng.uniform(0, 27)), i)
            for i in range(500)
        ]
        kept = {p.trajectory_id for p in apply_view(pairs, geom_a, geom_b)}
        for p in pairs:
            expect = inside(geom_a, *p.pa) and inside(geom_b, *p.pb)
            assert (p.trajectory_id in kept) == expect

    def test_survivors_inside_output_bounds(self):
        rng = np.random.Generator(np.random.PCG64(13))
        for _ in range(50):
            w = int(rng.integers(4, 30))
            h = int(rng.integers(4, 30))
            geom = ViewGeometry(
                (int(rng.integers(0, 4)), int(rng.integers(0, 4)), w, h),
                flip_h=bool(rng.integers(0, 2)),
                out_size=(int(rng.integers(2, 40)), int(rng.integers(2, 40))),
            )
            pts = [(rng.uniform(0, 32), rng.uniform(0, 32)) for _ in range(40)]
            pairs = [PixelPair(0, 1, p, p, i) for i, p in enumerate(pts)]
            for out in apply_view(pairs, geom, geom):
                assert 0 <= out.pa[0] <= geom.out_size[0] - 1
                assert 0 <= out.pa[1] <= geom.out_size[1] - 1


class TestFeatureIndices:
    def test_floor_rule(self):
        pair = PixelPair(0, 1, (10.0, 7.0), (10.0, 7.0), 0)
        ((ia, ib),) = [to_feature_indices([pair], 4, (32, 32), (32, 32))[0]]
        assert ia == (1, 2) and ib == (1, 2)

    def test_origin(self):
        pair = PixelPair(0, 1, (0.0, 0.0), (0.0, 0.0), 0)
        idx = to_feature_indices([pair], 4, (32, 32), (32, 32))[0]
        assert idx == ((0, 0), (0, 0))

    def test_last_cell_clamped(self):
        pair = PixelPair(0, 1, (31.0, 31.0), (31.0, 31.0), 0)
        idx = to_feature_indices([pair], 4, (32, 32), (32, 32))[0]
        assert idx == ((7, 7), (7, 7))
        # odd size: 33 wide -> ceil(33/4) = 9 cells, x = 32 -> col 8
        pair2 = PixelPair(0, 1, (32.0, 8.0), (32.0, 8.0), 0)
        idx2 = to_feature_indices([pair2], 4, (33, 9), (33, 9))[0]
        assert idx2 == ((2, 8), (2, 8))

    @settings(max_examples=100, deadline=None)
    @given(
        out_w=st.integers(1, 64), out_h=st.integers(1, 64),
        scale=st.integers(1, 9), fx=st.floats(0, 1), fy=st.floats(0, 1),
    )
    def test_fuzz_indices_always_in_grid(self, out_w, out_h, scale, fx, fy):
        x, y = fx * (out_w - 1), fy * (out_h - 1)
        pair = PixelPair(0, 1, (x, y), (x, y), 0)
        (idx,) = to_feature_indices([pair], scale, (out_w, out_h), (out_w, out_h))
        rows, cols = feature_grid_shape((out_w, out_h), scale)
        for r, c in idx:
            assert 0 <= r < rows and 0 <= c < cols


class TestAssembleBatch:
    def make_rows(self, vid, count, frame_b=3):
        rows = []
        for i in range(count):
            pair = PixelPair(0, frame_b, (float(i % 31), float(i % 23)),
                             (float(i % 29), float(i % 19)), i)
            rows.append((pair, ((0, 0), (1, 1))))
        return rows

    def test_under_budget_keeps_all(self):
        per_video = {"a": self.make_rows("a", 60), "b": self.make_rows("b", 40)}
        batch = assemble_batch(per_video, budget=200, rng_seed=0)
        assert len(batch) == 100
        assert batch.video_ids[:60] == ("a",) * 60  # merged in video-id order

    def test_budget_enforced_exactly(self):
        per_video = {f"v{i:03d}": self.make_rows(f"v{i:03d}", 300) for i in range(256)}
        batch = assemble_batch(per_video, budget=65536, rng_seed=1)
        assert len(batch) == 65536

    def test_seed_deterministic(self):
        per_video = {"a": self.make_rows("a", 500)}
        one = assemble_batch(per_video, budget=100, rng_seed=9)
        two = assemble_batch(per_video, budget=100, rng_seed=9)
        other = assemble_batch(per_video, budget=100, rng_seed=10)
        assert np.array_equal(one.coords, two.coords)
        assert np.array_equal(one.trajectory_ids, two.trajectory_ids)
        assert not np.array_equal(one.trajectory_ids, other.trajectory_ids)

    def test_marginal_retention_uniform(self):
        per_video = {"a": self.make_rows("a", 200)}
        runs = 2000
        budget = 100
        hits = np.zeros(200)
        for seed in range(runs):
            batch = assemble_batch(per_video, budget=budget, rng_seed=seed)
            hits[batch.trajectory_ids] += 1
        p = budget / 200.0
        sigma = math.sqrt(runs * p * (1 - p))
        assert np.abs(hits - runs * p).max() < 5 * sigma

    def test_per_video_quota_mode(self):
        per_video = {"a": self.make_rows("a", 500), "b": self.make_rows("b", 30),
                     "c": self.make_rows("c", 500)}
        batch = assemble_batch(per_video, budget=100, rng_seed=4, per_video_quota=True)
        from collections import Counter

        counts = Counter(batch.video_ids)
        # 100 // 3 = 33, remainder goes to the earliest ids; "b" keeps its 30
        assert counts == {"a": 34, "b": 30, "c": 33}
        again = assemble_batch(per_video, budget=100, rng_seed=4, per_video_quota=True)
        assert batch.video_ids == again.video_ids
        assert np.array_equal(batch.trajectory_ids, again.trajectory_ids)

    def test_jsonl_shape(self, tmp_path):
        import io as _io
        import json

        batch = assemble_batch({"a": self.make_rows("a", 3)}, budget=10, rng_seed=0)
        out = _io.StringIO()
        assert batch.to_jsonl(out) == 3
        rows = [json.loads(line) for line in out.getvalue().splitlines()]
        assert set(rows[0]) == {"vid", "fa", "fb", "pa", "pb", "ia", "ib"}
        assert rows[0]["vid"] == "a" and rows[0]["ib"] == [1, 1]


class TestComposition:
    def test_tracked_view_equals_static_in_aligned_crop(self):
        # zero flow + stride-aligned crop at scale 1: tracked pairs mapped by
        # the view equal the static grid built directly in crop coordinates
        stride = 4
        ts = tracked_set(width=32, height=32, frames=6, fwd=(0.0, 0.0), stride=stride)
        geom = ViewGeometry((8, 4, 16, 24), flip_h=False, out_size=(16, 24))
        tracked = apply_view(pairs_from_trajectories(ts, 0, 3), geom, geom)
        static = static_pairs(16, 24, 0, 3, stride)
        assert len(tracked) == len(static) == 24
        assert [(p.pa, p.pb) for p in tracked] == [(p.pa, p.pb) for p in static]


class TestViewGeometryValidation:
    def test_bad_crop(self):
        with pytest.raises(ValueError):
            ViewGeometry((0, 0, 0, 4), out_size=(4, 4))

    def test_bad_out_size(self):
        with pytest.raises(ValueError):
            ViewGeometry((0, 0, 4, 4), out_size=(0, 4))
