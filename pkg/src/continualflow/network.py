"""Coarse-to-fine flow network with occlusion-first decoding, refinement and temporal inputs."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg
from . import flowops
from .errors import ConfigurationError, UsageError
from .flowops import FlowField, TEMPORAL_CHANNELS

TEMPORAL_MODES = ("off", "fwd", "bwd", "both")
PLACEMENTS = ("decoder", "refinement", "both")
TEMPORAL_PROJ = 4
# keeps flat images from being amplified into noise
STD_FLOOR = 0.02
# indices of displacement channels inside the 9-channel temporal input
_TEMPORAL_FLOW_CHANNELS = (0, 1, 3, 4, 6, 7)


def occlusion_head_widths(d_max):
    d = (2 * d_max + 1) ** 2 + 8
    return (d, d // 2, d // 4, d // 8, 2)


@dataclass
class NetConfig:
    levels: int = 6
    pyramid_widths: tuple = (16, 32, 64, 96, 128, 196)
    d_max: int = 4
    decoder_widths: tuple = (128, 128, 96, 64, 32)
    context_widths: tuple = (128, 128, 128, 96, 64, 32)
    context_dilations: tuple = (1, 2, 4, 8, 16, 1)
    refinements: int = 2
    temporal: str = "both"
    placement: str = "both"
    occlusion_input: bool = True
    in_channels: int = 3
    output_level: int = 2
    slope: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.pyramid_widths = tuple(int(w) for w in self.pyramid_widths)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        self.context_widths = tuple(int(w) for w in self.context_widths)
        self.context_dilations = tuple(int(d) for d in self.context_dilations)
        if len(self.pyramid_widths) != self.levels:
            raise ConfigurationError("one pyramid width per level is required")
        if len(self.context_widths) != len(self.context_dilations):
            raise ConfigurationError("context widths and dilations must pair up")
        if not 1 <= self.output_level <= self.levels:
            raise ConfigurationError("output_level must lie within the pyramid")
        if self.d_max < 0 or self.refinements < 0:
            raise ConfigurationError("d_max and refinements must be non-negative")
        if self.temporal not in TEMPORAL_MODES:
            raise ConfigurationError(f"temporal must be one of {TEMPORAL_MODES}")
        if self.placement not in PLACEMENTS:
            raise ConfigurationError(f"placement must be one of {PLACEMENTS}")

    @property
    def cost_channels(self):
        return (2 * self.d_max + 1) ** 2

    @property
    def occ_head_widths(self):
        return occlusion_head_widths(self.d_max)

    @property
    def decoded_levels(self):
        return list(range(self.levels, self.output_level - 1, -1))

    @property
    def temporal_in_decoder(self):
        return self.placement in ("decoder", "both")

    @property
    def temporal_in_refinement(self):
        return self.placement in ("refinement", "both")

    @property
    def uses_fwd(self):
        return self.temporal in ("fwd", "both")

    @property
    def uses_bwd(self):
        return self.temporal in ("bwd", "both")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PRESETS = {
    "paper-shaped": {},
    "toy": dict(
        levels=4,
        pyramid_widths=(8, 16, 24, 32),
        decoder_widths=(32, 32, 24, 16, 8),
        context_widths=(32, 32, 24, 16, 8, 8),
    ),
}


def preset_config(name, **overrides):
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return NetConfig(**{**PRESETS[name], **overrides})


@dataclass
class EstimateOutputs:
    """Per-scale and final estimates for one frame pair; levels index into ``flows``."""

    flows: dict = field(default_factory=dict)
    occ_logits: dict = field(default_factory=dict)
    occ_probs: dict = field(default_factory=dict)
    refined_flows: list = field(default_factory=list)
    refined_occ_logits: list = field(default_factory=list)
    flow: dg.Tensor | None = None
    occ_prob: dg.Tensor | None = None
    flow_full: dg.Tensor | None = None

    def occlusion_full(self):
        """Occluded-class probability upsampled to input resolution, (B, H, W)."""
        p = dg.slice_channels(self.occ_prob, 0, 1)
        with dg.no_grad():
            while p.shape[2] < self.flow_full.shape[2]:
                p = dg.upsample_bilinear_x2(p)
        return p.data[:, 0]


def _fan_in_uniform(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ContinualFlowNet:
    """Parameters plus the forward computation of the flow network.

    Images are (B, C, H, W) arrays in [0, 1]; H and W must be divisible by
    ``2 ** levels``.  Flow is predicted at ``output_level`` (a quarter of the
    input by default) and bilinearly upsampled to full resolution.
    """

    def __init__(self, config: NetConfig | None = None, dtype=np.float32):
        self.config = config or NetConfig()
        self.dtype = np.dtype(dtype)
        self.params = {}
        # param name -> (start, stop) of input columns that read temporal channels
        self.temporal_columns = {}
        self.pair_calls = 0
        self._build()

    # ------------------------------------------------------------------ build

    def _add_conv(self, name, cin, cout, k=3, zero=False, temporal=None):
        self._specs.append((name, (cout, cin, k, k), zero))
        if temporal is not None:
            self.temporal_columns[name] = temporal

    def _build(self):
        cfg = self.config
        self._specs = []
        cin = cfg.in_channels
        for s, w in enumerate(cfg.pyramid_widths, start=1):
            self._add_conv(f"pyr{s}.a", cin, w)
            self._add_conv(f"pyr{s}.b", w, w)
            cin = w

        cost = cfg.cost_channels
        t_dec = TEMPORAL_CHANNELS if cfg.temporal_in_decoder else 0
        for s in cfg.decoded_levels:
            feat = cfg.pyramid_widths[s - 1]
            self._add_conv(f"dec{s}.tproj", TEMPORAL_CHANNELS, TEMPORAL_PROJ, k=1, temporal=(0, TEMPORAL_CHANNELS))
            widths = cfg.occ_head_widths
            prev = cost + 8
            for i, w in enumerate(widths):
                self._add_conv(f"dec{s}.occ{i}", prev, w)
                prev = w
            in0 = cost + 2 + feat + 2 + t_dec
            offset = 0
            for i, w in enumerate(cfg.decoder_widths):
                tcols = (offset + in0 - t_dec, offset + in0) if t_dec else None
                self._add_conv(f"dec{s}.dense{i}", offset + in0, w, temporal=tcols)
                offset += w
            total = offset + in0
            tcols = (offset + in0 - t_dec, offset + in0) if t_dec else None
            self._add_conv(f"dec{s}.flow", total, 2, zero=True, temporal=tcols)
            self._add_context(f"dec{s}", total + 2, tcols)

        t_ref = TEMPORAL_CHANNELS if cfg.temporal_in_refinement else 0
        feat = cfg.pyramid_widths[cfg.output_level - 1]
        for r in range(cfg.refinements):
            in0 = 2 + 2 + 2 * feat + 1 + t_ref
            prev = in0
            for i, w in enumerate(cfg.decoder_widths):
                tcols = (in0 - t_ref, in0) if (i == 0 and t_ref) else None
                self._add_conv(f"ref{r}.conv{i}", prev, w, temporal=tcols)
                prev = w
            self._add_conv(f"ref{r}.flow", prev, 2, zero=True)
            self._add_conv(f"ref{r}.occ", prev, 2, zero=True)
            self._add_context(f"ref{r}", prev + 2, None)

        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        for name, shape, zero in self._specs:
            w = np.zeros(shape, self.dtype) if zero else _fan_in_uniform(rng, shape, self.dtype)
            self.params[name + ".w"] = dg.Tensor(w, requires_grad=True)
            self.params[name + ".b"] = dg.Tensor(np.zeros(shape[0], self.dtype), requires_grad=True)
        del self._specs

    def _add_context(self, prefix, cin, temporal):
        cfg = self.config
        prev = cin
        for j, w in enumerate(cfg.context_widths):
            self._add_conv(f"{prefix}.ctx{j}", prev, w, temporal=temporal if j == 0 else None)
            prev = w
        self._add_conv(f"{prefix}.ctx_out", prev, 2, zero=True)

    # ------------------------------------------------------------- utilities

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self, prefix=None):
        return sum(
            t.data.size for name, t in self.params.items() if prefix is None or name.startswith(prefix)
        )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype):
        net = ContinualFlowNet.__new__(ContinualFlowNet)
        net.config = self.config
        net.dtype = np.dtype(dtype)
        net.params = {k: dg.Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        net.temporal_columns = dict(self.temporal_columns)
        net.pair_calls = 0
        return net

    def state_dict(self):
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise ConfigurationError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ConfigurationError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k] = dg.Tensor(np.array(v, dtype=self.dtype), requires_grad=True)

    def mask_temporal_weights(self):
        """Zero every weight column that reads temporal channels directly."""
        for name, (lo, hi) in self.temporal_columns.items():
            self.params[name + ".w"].data[:, lo:hi] = 0

    def _conv(self, x, name, stride=1, dilation=1):
        return dg.conv2d(x, self.params[name + ".w"], self.params[name + ".b"], stride=stride, dilation=dilation)

    def _lrelu(self, x):
        return dg.leaky_relu(x, self.config.slope)

    def _zeros(self, b, c, h, w):
        return dg.Tensor(np.zeros((b, c, h, w), self.dtype))

    # --------------------------------------------------------------- forward

    def check_image(self, image):
        img = image if isinstance(image, dg.Tensor) else dg.Tensor(np.asarray(image, dtype=self.dtype))
        if img.ndim != 4 or img.shape[1] != self.config.in_channels:
            raise ConfigurationError(
                f"images must be (B, {self.config.in_channels}, H, W), got {img.shape}"
            )
        div = 2**self.config.levels
        if img.shape[2] % div or img.shape[3] % div:
            raise ConfigurationError(f"image size {img.shape[2:]} is not divisible by {div}")
        return img

    @staticmethod
    def standardize(img):
        """Zero mean, unit variance per image; the statistics are treated as constants."""
        d = img.data
        mean = d.mean(axis=(1, 2, 3), keepdims=True)
        scale = 1.0 / (d.std(axis=(1, 2, 3), keepdims=True) + STD_FLOOR)
        shape = d.shape
        return dg.mul(dg.sub(img, np.broadcast_to(mean, shape).astype(d.dtype)), np.broadcast_to(scale, shape).astype(d.dtype))

    def extract_pyramid(self, image):
        """Feature maps for levels 1..L, index 0 holding level 1."""
        x = self.standardize(self.check_image(image))
        feats = []
        for s in range(1, self.config.levels + 1):
            x = self._lrelu(self._conv(x, f"pyr{s}.a", stride=2))
            x = self._lrelu(self._conv(x, f"pyr{s}.b"))
            feats.append(x)
        return feats

    def temporal_pyramid(self, temporal, full_shape):
        """Average-pool the full-resolution temporal input to every decoded level."""
        b, h, w = full_shape
        if temporal is None:
            return {s: None for s in range(1, self.config.levels + 1)}
        if temporal.shape != (b, TEMPORAL_CHANNELS, h, w):
            raise UsageError(f"temporal input must be {(b, TEMPORAL_CHANNELS, h, w)}, got {temporal.shape}")
        out = {}
        t = temporal
        for s in range(1, self.config.levels + 1):
            t = dg.avg_pool2x2(t)
            scale = np.ones((1, TEMPORAL_CHANNELS, 1, 1), self.dtype)
            scale[0, list(_TEMPORAL_FLOW_CHANNELS)] = 0.5
            t = dg.mul(t, np.broadcast_to(scale, t.shape).copy())
            out[s] = t
        return out

    def _occlusion_head(self, s, cv, up_flow, up_occ, temporal):
        proj = self._conv(temporal, f"dec{s}.tproj")
        h = dg.concat([cv, up_flow, up_occ, proj])
        last = len(self.config.occ_head_widths) - 1
        for i in range(last):
            h = dg.relu(self._conv(h, f"dec{s}.occ{i}"))
        return self._conv(h, f"dec{s}.occ{last}")

    def _context(self, prefix, x):
        for j, dil in enumerate(self.config.context_dilations):
            x = self._lrelu(self._conv(x, f"{prefix}.ctx{j}", dilation=dil))
        return self._conv(x, f"{prefix}.ctx_out")

    def decode_level(self, s, f1, f2, up_flow=None, up_occ=None, temporal=None):
        """One coarse-to-fine step; returns (flow, occ_logits, occ_probs)."""
        cfg = self.config
        b, _, h, w = f1.shape
        if up_flow is None:
            up_flow = self._zeros(b, 2, h, w)
            up_occ = self._zeros(b, 2, h, w)
            f2w = f2
        else:
            f2w, _ = dg.grid_sample_bilinear(f2, up_flow)
        if temporal is None or not cfg.temporal_in_decoder:
            temporal = self._zeros(b, TEMPORAL_CHANNELS, h, w)

        cv = self._lrelu(dg.correlation(f1, f2w, cfg.d_max))
        logits = self._occlusion_head(s, cv, up_flow, up_occ, temporal)
        probs = dg.channel_softmax(logits)
        occ_feed = probs if cfg.occlusion_input else self._zeros(b, 2, h, w)

        parts = [cv, occ_feed, f1, up_flow]
        if cfg.temporal_in_decoder:
            parts.append(temporal)
        x = dg.concat(parts)
        for i in range(len(cfg.decoder_widths)):
            x = dg.concat([self._lrelu(self._conv(x, f"dec{s}.dense{i}")), x])
        flow = up_flow + self._conv(x, f"dec{s}.flow")
        flow = flow + self._context(f"dec{s}", dg.concat([x, flow]))
        return flow, logits, probs

    def refine(self, r, flow, occ_logits, f1, f2, temporal=None):
        """Apply refinement block ``r``; returns corrected (flow, occ_logits)."""
        cfg = self.config
        occ_probs = dg.channel_softmax(occ_logits)
        f2w, _ = dg.grid_sample_bilinear(f2, flow)
        err = dg.channel_mean(dg.absolute(f1 - f2w)) + dg.channel_mean(dg.mul(1.0 - ssim(f1, f2w), 0.5))
        occ_feed = occ_probs if cfg.occlusion_input else self._zeros(*occ_probs.shape)
        parts = [flow, occ_feed, f1, f2w, err]
        if cfg.temporal_in_refinement:
            b, _, h, w = f1.shape
            parts.append(temporal if temporal is not None else self._zeros(b, TEMPORAL_CHANNELS, h, w))
        x = dg.concat(parts)
        for i in range(len(cfg.decoder_widths)):
            x = self._lrelu(self._conv(x, f"ref{r}.conv{i}"))
        flow = flow + self._conv(x, f"ref{r}.flow")
        occ_logits = occ_logits + self._conv(x, f"ref{r}.occ")
        flow = flow + self._context(f"ref{r}", dg.concat([x, flow]))
        return flow, occ_logits

    def estimate_pair(self, image_t, image_t1, temporal=None, pyramids=None) -> EstimateOutputs:
        """Flow and occlusion from ``image_t`` to ``image_t1``.

        ``temporal`` is the full-resolution 9-channel input built by
        :func:`continualflow.flowops.pack_temporal`, or None for zeros.
        """
        cfg = self.config
        self.pair_calls += 1
        if pyramids is None:
            pyr1 = self.extract_pyramid(image_t)
            pyr2 = self.extract_pyramid(image_t1)
        else:
            pyr1, pyr2 = pyramids
        b = pyr1[0].shape[0]
        h, w = pyr1[0].shape[2] * 2, pyr1[0].shape[3] * 2
        tpyr = self.temporal_pyramid(temporal, (b, h, w))

        out = EstimateOutputs()
        flow = probs = None
        for s in cfg.decoded_levels:
            if flow is None:
                up_flow = up_occ = None
            else:
                up_flow = dg.mul(dg.upsample_bilinear_x2(flow), 2.0)
                up_occ = dg.upsample_bilinear_x2(probs)
            flow, logits, probs = self.decode_level(s, pyr1[s - 1], pyr2[s - 1], up_flow, up_occ, tpyr[s])
            out.flows[s] = flow
            out.occ_logits[s] = logits
            out.occ_probs[s] = probs

        lo = cfg.output_level
        for r in range(cfg.refinements):
            flow, logits = self.refine(r, flow, logits, pyr1[lo - 1], pyr2[lo - 1], tpyr[lo])
            out.refined_flows.append(flow)
            out.refined_occ_logits.append(logits)
        out.flow = flow
        out.occ_prob = dg.channel_softmax(logits) if cfg.refinements else probs
        full = flow
        for _ in range(lo):
            full = dg.upsample_bilinear_x2(full)
        out.flow_full = dg.mul(full, float(2**lo))
        return out

    # -------------------------------------------------------------- sequences

    def temporal_from_previous(self, prev_full, backward_full=None):
        """Temporal input for the next pair from the previous full-resolution flow.

        ``prev_full`` is the previous pair's flow (graph tensor or array);
        ``backward_full`` the current frame's flow back to the previous frame.
        """
        cfg = self.config
        prev = FlowField.from_uv(prev_full)
        b, _, h, w = prev.shape
        if cfg.temporal == "off":
            return flowops.pack_temporal(shape=(b, h, w), dtype=self.dtype)
        fwd = flowops.forward_warp(FlowField.from_uv(prev.array)) if cfg.uses_fwd else None
        bwd = back = None
        if cfg.uses_bwd:
            if backward_full is None:
                raise UsageError("backward flow is required for backward warping")
            back = FlowField.from_uv(backward_full)
            bwd = flowops.backward_warp_prev_flow(prev, back)
        return flowops.pack_temporal(fwd, bwd, back)

    def two_pass_temporal(self, first_full):
        """Temporal input for re-estimating the first pair from its own estimate.

        The estimate already lives in the reference frame, so it fills the
        warped slots unchanged; the backward-flow slot stays empty.
        """
        cfg = self.config
        first = FlowField.from_uv(first_full)
        b, _, h, w = first.shape
        if cfg.temporal == "off":
            return flowops.pack_temporal(shape=(b, h, w), dtype=self.dtype)
        fwd = first if cfg.uses_fwd else None
        bwd = first if cfg.uses_bwd else None
        return flowops.pack_temporal(fwd, bwd, None)

    def process_sequence(self, frames, two_pass=False, temporal_enabled=True):
        """Estimate every consecutive pair of ``frames`` (list of (B, C, H, W)).

        With ``temporal_enabled=False`` every pair gets the zero temporal
        input.  Returns one :class:`EstimateOutputs` per pair.
        """
        frames = list(frames)
        if len(frames) < 2:
            raise UsageError("a sequence needs at least two frames")
        cfg = self.config
        pyrs = [self.extract_pyramid(f) for f in frames]
        b, _, h, w = self.check_image(frames[0]).shape
        use_temporal = temporal_enabled and cfg.temporal != "off"
        results = []
        for k in range(len(frames) - 1):
            if k == 0 or not use_temporal:
                est = self.estimate_pair(None, None, None, pyramids=(pyrs[k], pyrs[k + 1]))
                if k == 0 and two_pass and use_temporal:
                    t2 = self.two_pass_temporal(est.flow_full)
                    est = self.estimate_pair(None, None, t2, pyramids=(pyrs[k], pyrs[k + 1]))
            else:
                back = None
                if cfg.uses_bwd:
                    back = self.estimate_pair(None, None, None, pyramids=(pyrs[k], pyrs[k - 1])).flow_full
                temporal = self.temporal_from_previous(results[-1].flow_full, back)
                est = self.estimate_pair(None, None, temporal, pyramids=(pyrs[k], pyrs[k + 1]))
            results.append(est)
        return results


def ssim(x, y, c1=0.01**2, c2=0.03**2):
    """Per-pixel structural similarity over 3x3 neighbourhoods."""
    mx = dg.box_filter3x3(x)
    my = dg.box_filter3x3(y)
    mxx, myy, mxy = mx * mx, my * my, mx * my
    sx = dg.box_filter3x3(x * x) - mxx
    sy = dg.box_filter3x3(y * y) - myy
    sxy = dg.box_filter3x3(x * y) - mxy
    num = (mxy * 2.0 + c1) * (sxy * 2.0 + c2)
    den = (mxx + myy + c1) * (sx + sy + c2)
    return num / den
