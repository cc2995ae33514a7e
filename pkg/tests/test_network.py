import numpy as np
import pytest

from continualflow import diffgraph as dg
from continualflow import flowops as fo
from continualflow.errors import ConfigurationError, UsageError
from continualflow.network import (
    ContinualFlowNet,
    NetConfig,
    occlusion_head_widths,
    preset_config,
)


def tiny(**kw):
    base = dict(levels=3, pyramid_widths=(4, 6, 8), decoder_widths=(6, 4), context_widths=(4, 4), context_dilations=(1, 2), d_max=2)
    base.update(kw)
    return NetConfig(**base)


def randomize(net, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in net.params.values():
        p.data[...] = (rng.standard_normal(p.data.shape) * scale).astype(p.data.dtype)
    return net


@pytest.fixture
def frames(rng):
    return [rng.random((1, 3, 16, 16)).astype(np.float32) for _ in range(3)]


class TestConfig:
    @pytest.mark.parametrize("d,widths", [(1, (17, 8, 4, 2, 2)), (2, (33, 16, 8, 4, 2)), (3, (57, 28, 14, 7, 2)), (4, (89, 44, 22, 11, 2))])
    def test_occlusion_head_widths(self, d, widths):
        assert occlusion_head_widths(d) == widths
        net = ContinualFlowNet(tiny(d_max=d))
        shapes = [net.params[f"dec3.occ{i}.w"].shape for i in range(5)]
        assert shapes[0][1] == widths[0] == (2 * d + 1) ** 2 + 8
        assert tuple(s[0] for s in shapes) == widths
        assert net.config.cost_channels == (2 * d + 1) ** 2

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            NetConfig(levels=3)
        with pytest.raises(ConfigurationError):
            preset_config("huge")
        with pytest.raises(ConfigurationError):
            NetConfig(temporal="sideways")

    def test_round_trip_dict(self):
        cfg = preset_config("toy", d_max=3)
        assert NetConfig.from_dict(cfg.to_dict()) == cfg


class TestPyramid:
    def test_toy_shapes(self):
        net = ContinualFlowNet(preset_config("toy"))
        feats = net.extract_pyramid(np.zeros((1, 3, 32, 32), np.float32))
        assert [f.shape[2] for f in feats] == [16, 8, 4, 2]
        assert [f.shape[1] for f in feats] == [8, 16, 24, 32]

    def test_six_levels_to_one_pixel(self):
        net = ContinualFlowNet(NetConfig(pyramid_widths=(2, 2, 2, 2, 2, 2), decoder_widths=(2,), context_widths=(2,), context_dilations=(1,)))
        feats = net.extract_pyramid(np.zeros((1, 3, 64, 64), np.float32))
        assert feats[-1].shape[2:] == (1, 1)

    def test_indivisible(self):
        net = ContinualFlowNet(tiny())
        with pytest.raises(ConfigurationError):
            net.extract_pyramid(np.zeros((1, 3, 12, 16), np.float32))

    def test_shared_weights(self, frames):
        net = ContinualFlowNet(tiny())
        a = net.extract_pyramid(frames[0])
        b = net.extract_pyramid(frames[0].copy())
        for x, y in zip(a, b):
            assert x.data.tobytes() == y.data.tobytes()


class TestEstimate:
    def test_zero_heads_zero_flow(self, frames):
        net = ContinualFlowNet(tiny())
        out = net.estimate_pair(frames[0], frames[1])
        assert all(not f.data.any() for f in out.flows.values())
        assert not out.flow_full.data.any()
        assert len(out.refined_flows) == 2

    def test_output_shapes(self, frames):
        net = randomize(ContinualFlowNet(tiny()))
        out = net.estimate_pair(frames[0], frames[1])
        assert out.flow.shape == (1, 2, 4, 4)
        assert out.flow_full.shape == (1, 2, 16, 16)
        assert sorted(out.flows) == [2, 3]
        assert out.occlusion_full().shape == (1, 16, 16)

    def test_full_resolution_scaling(self, frames):
        net = ContinualFlowNet(tiny(refinements=0))
        net.params["dec2.flow.b"].data[:] = [1.0, -0.5]
        out = net.estimate_pair(frames[0], frames[1])
        np.testing.assert_allclose(out.flow.data[0, 0], 1.0)
        np.testing.assert_allclose(out.flow_full.data[0, 0], 4.0, rtol=1e-6)
        np.testing.assert_allclose(out.flow_full.data[0, 1], -2.0, rtol=1e-6)

    def test_no_refinement_passthrough(self, frames):
        net = randomize(ContinualFlowNet(tiny(refinements=0)))
        out = net.estimate_pair(frames[0], frames[1])
        assert out.refined_flows == [] and out.flow is out.flows[2]

    def test_deterministic(self, frames):
        a = randomize(ContinualFlowNet(tiny())).estimate_pair(frames[0], frames[1]).flow_full.data
        b = randomize(ContinualFlowNet(tiny())).estimate_pair(frames[0], frames[1]).flow_full.data
        assert a.tobytes() == b.tobytes()

    def test_uniform_features_uniform_occlusion(self):
        net = randomize(ContinualFlowNet(tiny()))
        f = dg.Tensor(np.ones((1, 8, 4, 4), np.float32))
        _, logits, probs = net.decode_level(3, f, f)
        interior = probs.data[0, :, 1:-1, 1:-1]
        assert np.ptp(interior[0]) < 1e-5

    def test_refinement_error_channel_zero_on_identity(self):
        net = ContinualFlowNet(tiny())
        f = dg.Tensor(np.random.default_rng(0).random((1, 4, 8, 8)))
        from continualflow.network import ssim

        e = dg.channel_mean(dg.absolute(f - f)) + dg.channel_mean(dg.mul(1.0 - ssim(f, f), 0.5))
        assert np.abs(e.data).max() < 1e-12

    def test_refinement_smaller_than_decoder(self):
        net = ContinualFlowNet(preset_config("paper-shaped"), dtype=np.float32)
        dec = net.num_parameters("dec2.")
        ref = net.num_parameters("ref0.")
        assert 0 < ref < dec


class TestTemporal:
    def test_mask_makes_temporal_noop(self, frames, rng):
        net = randomize(ContinualFlowNet(tiny()))
        net.mask_temporal_weights()
        temporal = dg.Tensor(rng.standard_normal((1, 9, 16, 16)).astype(np.float32))
        a = net.estimate_pair(frames[0], frames[1], temporal).flow_full.data
        b = net.estimate_pair(frames[0], frames[1]).flow_full.data
        assert a.tobytes() == b.tobytes()

    def test_temporal_changes_output_when_unmasked(self, frames, rng):
        net = randomize(ContinualFlowNet(tiny()))
        temporal = dg.Tensor(rng.standard_normal((1, 9, 16, 16)).astype(np.float32))
        a = net.estimate_pair(frames[0], frames[1], temporal).flow_full.data
        b = net.estimate_pair(frames[0], frames[1]).flow_full.data
        assert np.abs(a - b).max() > 1e-4

    def test_wrong_temporal_shape(self, frames):
        net = ContinualFlowNet(tiny())
        with pytest.raises(UsageError):
            net.estimate_pair(frames[0], frames[1], dg.Tensor(np.zeros((1, 9, 8, 8), np.float32)))

    @pytest.mark.parametrize(
        "mode,two_pass,n,calls",
        [("fwd", False, 2, 1), ("fwd", True, 2, 2), ("both", False, 2, 1), ("fwd", False, 3, 2), ("fwd", True, 3, 3), ("both", False, 3, 3), ("both", True, 3, 4), ("off", True, 3, 2)],
    )
    def test_call_counting(self, frames, mode, two_pass, n, calls):
        net = ContinualFlowNet(tiny(temporal=mode))
        out = net.process_sequence(frames[:n], two_pass=two_pass)
        assert len(out) == n - 1
        assert net.pair_calls == calls

    def test_too_few_frames(self, frames):
        with pytest.raises(UsageError):
            ContinualFlowNet(tiny()).process_sequence(frames[:1])

    def test_temporal_disabled_equals_pairwise(self, frames):
        net = randomize(ContinualFlowNet(tiny()))
        seq = net.process_sequence(frames, temporal_enabled=False)
        single = net.estimate_pair(frames[1], frames[2])
        assert seq[1].flow_full.data.tobytes() == single.flow_full.data.tobytes()

    def test_two_pass_temporal_slots(self, rng):
        net = ContinualFlowNet(tiny(temporal="both"))
        first = rng.standard_normal((1, 2, 16, 16)).astype(np.float32)
        t = net.two_pass_temporal(first).data
        np.testing.assert_array_equal(t[0, 0:2], first[0])
        np.testing.assert_array_equal(t[0, 3:5], first[0])
        assert not t[0, 6:].any()

    def _grads_from_temporal(self, mode, rng):
        net = randomize(ContinualFlowNet(tiny(temporal=mode), dtype=np.float64), scale=0.2)
        f0, f1 = (rng.random((1, 3, 16, 16)) for _ in range(2))
        prev = net.estimate_pair(f0, f1).flow_full
        back = dg.Tensor(rng.uniform(-1, 1, (1, 2, 16, 16)))
        temporal = net.temporal_from_previous(prev, back.data if mode != "fwd" else None)
        net.zero_grad()
        cur = net.estimate_pair(f1, f0, temporal)
        # temporal input is the only route from ``prev`` to this loss
        loss = dg.sum_all(dg.square(cur.flow_full))
        dg.backward_sweep(loss)
        return prev.grad

    def test_backward_path_carries_gradient(self, rng):
        g = self._grads_from_temporal("bwd", rng)
        assert g is not None and np.abs(g).sum() > 0

    def test_forward_path_blocks_gradient(self, rng):
        g = self._grads_from_temporal("fwd", rng)
        assert g is None or not np.any(g)
