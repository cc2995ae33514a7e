import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from continualflow import diffgraph as dg
from continualflow import flowops as fo
from continualflow.errors import UsageError
from continualflow.flowops import FlowField

import oracles


def field(u, v, valid=None):
    return FlowField.from_uv(np.stack([np.asarray(u, float), np.asarray(v, float)]), valid)


class TestForwardWarp:
    def test_zero_flow_identity(self):
        out = fo.forward_warp(field(np.zeros((3, 4)), np.zeros((3, 4))))
        assert np.all(out.array == 0) and np.all(out.valid == 1)

    def test_rounding_placement(self):
        u = np.zeros((1, 3))
        u[0, 0] = 1.4
        valid = np.zeros((1, 3))
        valid[0, 0] = 1
        out = fo.forward_warp(field(u, np.zeros((1, 3)), valid))
        assert tuple(out.array[0, :, 0, 1]) == (1.4, 0.0)
        assert out.valid[0, 0, 0, 0] == 0 and out.valid[0, 0, 0, 1] == 1

    def test_collision_keeps_larger_motion(self):
        u = np.array([[2.0, 1.0, 0.0]])
        valid = np.array([[1, 1, 0]])
        out = fo.forward_warp(field(u, np.zeros((1, 3)), valid))
        assert tuple(out.array[0, :, 0, 2]) == (2.0, 0.0)

    def test_tie_goes_to_later_raster_index(self):
        u = np.array([[1.0, 0.0, -1.0]])
        v = np.array([[0.0, 0.0, 0.0]])
        valid = np.array([[1, 0, 1]])
        out = fo.forward_warp(field(u, v, valid))
        assert out.array[0, 0, 0, 1] == -1.0

    def test_half_rounds_away_from_zero(self):
        out = fo.forward_warp(field([[0.5, 0.0, -0.5, 0.0]], [[0.0] * 4], [[1, 0, 1, 0]]))
        # both land on x=1 with equal magnitude; the later source wins
        assert out.array[0, 0, 0, 1] == -0.5
        assert out.valid[0, 0, 0, 1] == 1 and out.valid[0, 0, 0, 0] == 0

    @given(arrays(np.float64, (2, 6, 7), elements=st.floats(-4, 4)))
    def test_matches_loop_oracle(self, uv):
        ref_u, ref_v, ref_ok = oracles.forward_warp_loops(uv[0].tolist(), uv[1].tolist())
        out = fo.forward_warp(FlowField.from_uv(uv))
        np.testing.assert_array_equal(out.array[0, 0], ref_u)
        np.testing.assert_array_equal(out.array[0, 1], ref_v)
        np.testing.assert_array_equal(out.valid[0, 0], ref_ok)

    @given(arrays(np.float64, (2, 5, 5), elements=st.floats(-3, 3)))
    def test_values_conserved_and_max_magnitude(self, uv):
        out = fo.forward_warp(FlowField.from_uv(uv))
        src = {(a, b) for a, b in zip(uv[0].ravel(), uv[1].ravel())}
        mags = {}
        for y in range(5):
            for x in range(5):
                tx = x + int(fo.round_half_away(uv[0, y, x]))
                ty = y + int(fo.round_half_away(uv[1, y, x]))
                if 0 <= tx < 5 and 0 <= ty < 5:
                    mags.setdefault((ty, tx), []).append(np.hypot(uv[0, y, x], uv[1, y, x]))
        for y in range(5):
            for x in range(5):
                if out.valid[0, 0, y, x]:
                    pair = (out.array[0, 0, y, x], out.array[0, 1, y, x])
                    assert pair in src
                    assert np.hypot(*pair) == max(mags[(y, x)])
                else:
                    assert (y, x) not in mags

    def test_not_differentiable(self):
        uv = dg.Tensor(np.ones((1, 2, 3, 3)), requires_grad=True)
        out = fo.forward_warp(FlowField.from_uv(uv))
        assert not isinstance(out.uv, dg.Tensor)


class TestBackwardWarp:
    def test_zero_backward_identity(self, rng):
        prev = FlowField.from_uv(rng.standard_normal((2, 4, 5)))
        out = fo.backward_warp_prev_flow(prev, FlowField.from_uv(np.zeros((2, 4, 5))))
        np.testing.assert_allclose(out.array, prev.array)
        assert out.valid.min() == 1

    def test_constant_field(self, rng):
        prev = FlowField.from_uv(np.stack([np.full((5, 5), 1.5), np.full((5, 5), -2.0)]))
        back = FlowField.from_uv(rng.uniform(-1.5, 1.5, (2, 5, 5)))
        out = fo.backward_warp_prev_flow(prev, back)
        m = out.valid[0, 0] > 0
        assert m.any()
        np.testing.assert_allclose(out.array[0, 0][m], 1.5)
        np.testing.assert_allclose(out.array[0, 1][m], -2.0)

    def test_matches_scalar_bilinear(self, rng):
        gy, gx = np.mgrid[0:7, 0:8]
        prev = np.stack([np.sin(gx / 3.0) + gy / 7, np.cos(gy / 2.0) - gx / 8])
        back = rng.uniform(-2, 2, (2, 7, 8))
        out = fo.backward_warp_prev_flow(FlowField.from_uv(prev), FlowField.from_uv(back))
        for y in range(7):
            for x in range(8):
                px, py = x + back[0, y, x], y + back[1, y, x]
                inside = 0 <= px <= 7 and 0 <= py <= 6
                assert out.valid[0, 0, y, x] == float(inside)
                if inside:
                    for c in range(2):
                        ref = oracles.bilinear_at(prev[c].tolist(), px, py)
                        assert abs(out.array[0, c, y, x] - ref) < 1e-6

    def test_invalid_previous_pixels_propagate(self):
        prev = FlowField.from_uv(np.ones((2, 3, 3)), valid=np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]]))
        out = fo.backward_warp_prev_flow(prev, FlowField.from_uv(np.zeros((2, 3, 3))))
        assert out.valid[0, 0, 1, 1] == 0 and out.valid.sum() == 8

    def test_gradient_flows_to_previous_estimate(self, rng):
        prev = dg.Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
        back = FlowField.from_uv(rng.uniform(-0.4, 0.4, (2, 4, 4)))
        out = fo.backward_warp_prev_flow(FlowField.from_uv(prev), back)
        dg.backward_sweep(dg.sum_all(out.uv))
        assert np.abs(prev.grad).sum() > 0

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            fo.backward_warp_prev_flow(FlowField.from_uv(np.zeros((2, 3, 3))), FlowField.from_uv(np.zeros((2, 3, 4))))


class TestPackTemporal:
    def test_all_absent(self):
        t = fo.pack_temporal(shape=(2, 3, 4))
        assert t.shape == (2, 9, 3, 4) and not t.data.any()

    def test_only_forward(self, rng):
        f = FlowField.from_uv(rng.standard_normal((2, 3, 4)))
        t = fo.pack_temporal(f, None, None)
        np.testing.assert_allclose(t.data[0, :2], f.array[0])
        assert np.all(t.data[0, 2] == 1) and not t.data[0, 3:].any()

    def test_channel_order(self, rng):
        a, b, c = (FlowField.from_uv(rng.standard_normal((2, 3, 3)).astype(np.float32)) for _ in range(3))
        t1 = fo.pack_temporal(a, b, c).data
        t2 = fo.pack_temporal(a, b, c).data
        assert t1.tobytes() == t2.tobytes()
        for i, f in enumerate((a, b, c)):
            np.testing.assert_array_equal(t1[0, 3 * i : 3 * i + 2], f.array[0])
            np.testing.assert_array_equal(t1[0, 3 * i + 2], 1)

    def test_invalid_pixels_zeroed(self):
        f = FlowField.from_uv(np.ones((2, 2, 2)), valid=np.array([[1, 0], [0, 1]]))
        t = fo.pack_temporal(None, f, None).data[0]
        np.testing.assert_array_equal(t[3], [[1, 0], [0, 1]])
        np.testing.assert_array_equal(t[5], [[1, 0], [0, 1]])

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            fo.pack_temporal(FlowField.from_uv(np.zeros((2, 3, 3))), FlowField.from_uv(np.zeros((2, 3, 4))))
        with pytest.raises(UsageError):
            fo.pack_temporal()


class TestUpsample:
    def test_constant_doubles(self):
        out = fo.upsample_flow_x2(field(np.ones((3, 3)), np.zeros((3, 3))))
        assert out.shape == (1, 2, 6, 6)
        np.testing.assert_allclose(out.array[0, 0], 2.0)
        np.testing.assert_allclose(out.array[0, 1], 0.0)

    def test_zero_and_composition(self):
        z = fo.upsample_flow_x2(field(np.zeros((2, 2)), np.zeros((2, 2))))
        assert not z.array.any()
        twice = fo.upsample_flow_x2(fo.upsample_flow_x2(field(np.ones((2, 2)), np.ones((2, 2)))))
        np.testing.assert_allclose(twice.array, 4.0)

    def test_downsample_inverts_on_constants(self):
        flow = np.full((1, 2, 8, 8), 4.0)
        np.testing.assert_allclose(fo.downsample_flow(flow, 2), 1.0)


class TestOcclusionOracle:
    def test_perfect_consistency(self, rng):
        fwd = np.zeros((2, 6, 6))
        lab = np.zeros((6, 6), int)
        assert not fo.occlusion_gt_oracle(fwd, -fwd, lab, lab).binary.any()

    def test_label_change(self):
        fwd = np.zeros((2, 4, 4))
        fwd[0, 1, 1] = 1.0
        bwd = np.zeros((2, 4, 4))
        bwd[0, 1, 2] = -1.0
        lab_t = np.zeros((4, 4), int)
        lab_t1 = np.zeros((4, 4), int)
        lab_t1[1, 2] = 3
        occ = fo.occlusion_gt_oracle(fwd, bwd, lab_t, lab_t1).binary
        assert occ[1, 1]

    def test_consistency_threshold(self):
        fwd = np.zeros((2, 3, 5))
        bwd = np.zeros((2, 3, 5))
        bwd[0, 1, 1] = 1.5
        bwd[0, 1, 3] = 0.5
        lab = np.zeros((3, 5), int)
        occ = fo.occlusion_gt_oracle(fwd, bwd, lab, lab).binary
        assert occ[1, 1] and not occ[1, 3]

    def test_out_of_frame(self):
        fwd = np.zeros((2, 3, 3))
        fwd[0, :, 2] = 1.0
        lab = np.zeros((3, 3), int)
        occ = fo.occlusion_gt_oracle(fwd, -fwd, lab, lab).binary
        assert occ[:, 2].all() and not occ[:, :2].any()

    def test_probabilities_sum_to_one(self, rng):
        m = fo.OcclusionMap.from_probs(dg.channel_softmax(dg.Tensor(rng.standard_normal((1, 2, 3, 3)))))
        np.testing.assert_allclose(m.p_occ + m.p_noc, 1.0, atol=1e-6)

    def test_matches_loops_on_random_instances(self, rng):
        for _ in range(30):
            fwd = rng.integers(-2, 3, (2, 8, 8)) + rng.choice([0.0, 0.25, 0.5], (2, 8, 8))
            bwd = -fwd + rng.normal(0, 0.8, (2, 8, 8))
            lt = rng.integers(0, 3, (8, 8))
            lt1 = rng.integers(0, 3, (8, 8))
            ref = oracles.occlusion_loops(*(a.tolist() for a in (fwd[0], fwd[1], bwd[0], bwd[1], lt, lt1)))
            np.testing.assert_array_equal(fo.occlusion_gt_oracle(fwd, bwd, lt, lt1).binary, np.array(ref, bool))


class TestColor:
    def test_zero_flow_white(self):
        img = fo.flow_to_color(np.zeros((2, 2, 2)), max_magnitude=1.0)
        assert np.all(img == 255)

    def test_opposite_hues(self):
        uv = np.zeros((2, 1, 2))
        uv[0, 0, 0], uv[0, 0, 1] = 1.0, -1.0
        img = fo.flow_to_color(uv, max_magnitude=1.0).astype(int)
        # the two directions sit half a wheel apart
        assert np.abs(img[0, 0] - img[0, 1]).sum() > 200

    def test_invalid_black(self):
        img = fo.flow_to_color(np.ones((2, 2, 2)), valid=np.array([[1, 0], [1, 1]]))
        assert np.all(img[0, 1] == 0) and img[0, 0].sum() > 0

    def test_radial_pattern_matches_reference(self):
        gy, gx = np.mgrid[-8:9, -8:9].astype(float)
        uv = np.stack([gx, gy])
        maxrad = np.hypot(gx, gy).max()
        img = fo.flow_to_color(uv).astype(int)
        for y in range(17):
            for x in range(17):
                ref = oracles.color_pixel(gx[y, x], gy[y, x], maxrad)
                assert np.abs(img[y, x] - ref).max() <= 2

    def test_frozen_reference_pixels(self):
        # values produced by the loop reference encoder, max magnitude 1
        cases = {(1.0, 0.0): (255, 0, 0), (0.0, 1.0): (255, 229, 0), (-1.0, 0.0): (0, 209, 255), (0.5, 0.5): (255, 155, 74)}
        for (u, v), rgb in cases.items():
            assert oracles.color_pixel(u, v, 1.0) == rgb
            img = fo.flow_to_color(np.array([[[u]], [[v]]]), max_magnitude=1.0)
            assert np.abs(img[0, 0].astype(int) - rgb).max() <= 2
