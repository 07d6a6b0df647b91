import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixcorr.errors import FormatError, InvalidFlow, OutOfBounds
from pixcorr.flowstore import (
    Direction,
    FlowField,
    FlowVolume,
    dequantize_flow,
    quantize_flow,
    read_flowpack,
    sample_flow,
    write_flowpack,
)

from helpers import const_volume, field_from_fn


def roundtrip(field: FlowField) -> FlowField:
    return dequantize_flow(quantize_flow(field))


class TestQuantize:
    def test_uniform_field_degenerate_range(self):
        field = FlowField(np.full((4, 4), 3.0), np.zeros((4, 4)))
        q = quantize_flow(field)
        assert q.min_u == q.max_u == 3.0
        assert np.all(q.q_u == 0)
        assert np.all(dequantize_flow(q).u == 3.0)

    def test_endpoint_identity(self):
        u = np.array([[-10.0, 10.0], [0.0, 5.0]])
        q = quantize_flow(FlowField(u, np.zeros_like(u)))
        assert q.q_u[0, 0] == 0 and q.q_u[0, 1] == 255
        back = dequantize_flow(q).u
        assert back[0, 0] == -10.0 and back[0, 1] == 10.0

    def test_all_code_midpoints_within_bound(self):
        # exhaustive worst case: values exactly halfway between adjacent codes
        lo, hi = -8.0, 8.0
        step = (hi - lo) / 255.0
        mids = lo + (np.arange(255) + 0.5) * step
        values = np.concatenate([[lo, hi], mids])
        field = FlowField(values.reshape(1, -1), np.zeros((1, values.size)))
        err = np.abs(roundtrip(field).u - field.u)
        assert err.max() <= (hi - lo) / 510.0 + 1e-12

    def test_random_field_bound(self):
        rng = np.random.Generator(np.random.PCG64(3))
        u = rng.uniform(-8.0, 8.0, size=(17, 23))
        v = rng.uniform(-8.0, 8.0, size=(17, 23))
        field = FlowField(u, v)
        back = roundtrip(field)
        bound = 16.0 / 510.0 + 1e-12
        assert np.abs(back.u - u).max() <= bound
        assert np.abs(back.v - v).max() <= bound

    @settings(max_examples=60, deadline=None)
    @given(
        lo=st.floats(-50.0, 49.0),
        width=st.floats(1e-3, 60.0),
        seed=st.integers(0, 2**31),
    )
    def test_roundtrip_bound_property(self, lo, width, seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        u = rng.uniform(lo, lo + width, size=(6, 7))
        field = FlowField(u, np.zeros_like(u))
        q = quantize_flow(field)
        err = np.abs(dequantize_flow(q).u - u).max()
        assert err <= (q.max_u - q.min_u) / 510.0 + 1e-9

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidFlow):
            FlowField(np.array([[np.nan]]), np.array([[0.0]]))
        with pytest.raises(InvalidFlow):
            FlowField(np.array([[0.0]]), np.array([[np.inf]]))


class TestDequantize:
    def test_code_zero_is_min(self):
        q = quantize_flow(FlowField(np.array([[-2.0, 6.0]]), np.zeros((1, 2))))
        assert dequantize_flow(q).u[0, 0] == -2.0

    def test_code_255_is_max(self):
        q = quantize_flow(FlowField(np.array([[-2.0, 6.0]]), np.zeros((1, 2))))
        assert dequantize_flow(q).u[0, 1] == 6.0

    def test_midscale_formula(self):
        # code 128 with range [0, 255]: 0 + 128 * 255 / 255 = 128.0
        u = np.arange(256, dtype=np.float64).reshape(16, 16)
        q = quantize_flow(FlowField(u, np.zeros_like(u)))
        assert q.min_u == 0.0 and q.max_u == 255.0
        code_128 = np.argwhere(q.q_u == 128)[0]
        assert dequantize_flow(q).u[tuple(code_128)] == 128.0


class TestSampleFlow:
    def make_field(self):
        return field_from_fn(8, 8, lambda x, y: (2.0 * x + 3.0 * y, x - y))

    def test_lattice_identity(self):
        field = self.make_field()
        u, v = sample_flow(field, 3, 5)
        assert u == field.u[5, 3] and v == field.v[5, 3]

    def test_midpoint_symmetry(self):
        field = field_from_fn(2, 1, lambda x, y: (2.0 * x, np.zeros_like(x)))
        u, _ = sample_flow(field, 0.5, 0.0)
        assert u == 1.0

    def test_affine_exactness_worked(self):
        u, _ = sample_flow(self.make_field(), 1.25, 2.5)
        assert u == pytest.approx(2 * 1.25 + 3 * 2.5, abs=1e-12)  # 10.0

    @settings(max_examples=80, deadline=None)
    @given(
        a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5),
        x=st.floats(0, 7), y=st.floats(0, 7),
    )
    def test_affine_exactness_property(self, a, b, c, x, y):
        field = field_from_fn(8, 8, lambda gx, gy: (a + b * gx + c * gy, np.zeros_like(gx)))
        u, _ = sample_flow(field, x, y)
        assert u == pytest.approx(a + b * x + c * y, abs=1e-9)

    def test_right_and_bottom_edges(self):
        field = self.make_field()
        u, _ = sample_flow(field, 7.0, 7.0)
        assert u == field.u[7, 7]

    @pytest.mark.parametrize("x,y", [(-0.1, 0), (0, -0.1), (7.01, 0), (0, 7.01)])
    def test_out_of_bounds(self, x, y):
        with pytest.raises(OutOfBounds):
            sample_flow(self.make_field(), x, y)


class TestFlowPack:
    def test_header_only_volume_roundtrips(self):
        volume = FlowVolume(1, (), None)
        buf = io.BytesIO()
        count = write_flowpack(volume, buf)
        assert count == len(buf.getvalue()) == 20
        buf.seek(0)
        back = read_flowpack(buf)
        assert back.num_frames == 1 and back.forward == () and back.backward is None

    def test_two_frame_roundtrip_identity(self):
        rng = np.random.Generator(np.random.PCG64(11))
        vol = FlowVolume(
            2,
            (FlowField(rng.normal(size=(4, 4)), rng.normal(size=(4, 4))),),
            (FlowField(rng.normal(size=(4, 4)), rng.normal(size=(4, 4)),
                       Direction.BACKWARD),),
        )
        buf = io.BytesIO()
        write_flowpack(vol, buf)
        first = buf.getvalue()
        back = read_flowpack(io.BytesIO(first))
        assert back.quant_meta == vol.quant_meta
        # lossless after the single quantization step: re-serializing is an identity
        buf2 = io.BytesIO()
        write_flowpack(back, buf2)
        assert buf2.getvalue() == first
        again = read_flowpack(io.BytesIO(buf2.getvalue()))
        for f1, f2 in zip(back.forward + back.backward, again.forward + again.backward):
            assert np.array_equal(f1.u, f2.u) and np.array_equal(f1.v, f2.v)

    def test_written_byte_count(self):
        vol = const_volume(6, 5, 4, fwd=(1.0, -1.0))
        buf = io.BytesIO()
        assert write_flowpack(vol, buf) == len(buf.getvalue())
        # header + 2 dirs * 3 fields * (16 + 2 * 30)
        assert len(buf.getvalue()) == 20 + 6 * (16 + 60)

    def test_corrupted_magic(self):
        vol = const_volume(4, 4, 2)
        buf = io.BytesIO()
        write_flowpack(vol, buf)
        bad = b"XXXX" + buf.getvalue()[4:]
        with pytest.raises(FormatError) as exc:
            read_flowpack(io.BytesIO(bad))
        assert exc.value.offset == 0

    def test_truncation_reports_offset(self):
        vol = const_volume(4, 4, 3)
        buf = io.BytesIO()
        write_flowpack(vol, buf)
        data = buf.getvalue()
        truncated = data[: len(data) - 5]
        with pytest.raises(FormatError) as exc:
            read_flowpack(io.BytesIO(truncated))
        assert exc.value.offset == len(data) - 5

    def test_unsupported_codec(self):
        vol = const_volume(4, 4, 2)
        buf = io.BytesIO()
        write_flowpack(vol, buf)
        data = bytearray(buf.getvalue())
        data[6] = 9  # codec id byte
        with pytest.raises(FormatError) as exc:
            read_flowpack(io.BytesIO(bytes(data)))
        assert exc.value.offset == 6

    @settings(max_examples=25, deadline=None)
    @given(
        seed=st.integers(0, 2**31),
        frames=st.integers(1, 4),
        width=st.integers(1, 6),
        height=st.integers(1, 6),
        with_backward=st.booleans(),
    )
    def test_roundtrip_property(self, seed, frames, width, height, with_backward):
        rng = np.random.Generator(np.random.PCG64(seed))

        def fields(direction):
            return tuple(
                FlowField(rng.uniform(-9, 9, (height, width)),
                          rng.uniform(-9, 9, (height, width)), direction)
                for _ in range(frames - 1)
            )

        vol = FlowVolume(
            frames,
            fields(Direction.FORWARD),
            fields(Direction.BACKWARD) if with_backward else None,
        )
        buf = io.BytesIO()
        write_flowpack(vol, buf)
        first = buf.getvalue()
        back = read_flowpack(io.BytesIO(first))
        buf2 = io.BytesIO()
        write_flowpack(back, buf2)
        assert buf2.getvalue() == first


class TestVolumeInvariants:
    def test_mismatched_lengths(self):
        f = const_volume(4, 4, 3).forward
        with pytest.raises(InvalidFlow):
            FlowVolume(3, f, f[:1])

    def test_mismatched_sizes(self):
        a = const_volume(4, 4, 2).forward[0]
        b = const_volume(5, 4, 2).forward[0]
        with pytest.raises(InvalidFlow):
            FlowVolume(3, (a, b), None)

    def test_quant_meta_min_le_max(self):
        vol = const_volume(4, 4, 3, fwd=(2.0, -1.0))
        for (min_u, max_u), (min_v, max_v) in vol.quant_meta:
            assert min_u <= max_u and min_v <= max_v
