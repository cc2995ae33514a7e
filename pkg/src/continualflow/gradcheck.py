"""Named finite-difference checks for every differentiable primitive and loss."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffgraph as dg
from . import losses
from .errors import UsageError

DEFAULT_TOL = 1e-4
SAMPLING_TOL = 1e-3


@dataclass
class GradCase:
    name: str
    build: Callable  # rng -> (fn, inputs)
    threshold: float = DEFAULT_TOL


@dataclass
class GradResult:
    name: str
    error: float
    threshold: float
    seconds: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error < self.threshold)


def _away_from_zero(rng, shape, lo=0.2, hi=1.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _smooth_image(rng, b, c, h, w):
    gy, gx = np.mgrid[0:h, 0:w] / max(h, w)
    freq = rng.uniform(0.5, 2.0, size=(b, c, 2))
    phase = rng.uniform(0, np.pi, size=(b, c))
    return np.sin(np.pi * (freq[..., 0, None, None] * gx + freq[..., 1, None, None] * gy) + phase[..., None, None])


def _conv_case(stride, dilation):
    def build(rng):
        x = rng.standard_normal((2, 3, 5, 5))
        wt = rng.standard_normal((4, 3, 3, 3))
        bias = rng.standard_normal(4)
        return (lambda t: dg.conv2d(t[0], t[1], dg.reshape(t[2], (4,)), stride=stride, dilation=dilation)), [x, wt, bias]

    return build


def _grid_sample(rng):
    x = _smooth_image(rng, 1, 2, 6, 7)
    # integer part plus a fraction kept away from cell boundaries
    flow = rng.integers(-2, 3, size=(1, 2, 6, 7)) + rng.uniform(0.2, 0.8, size=(1, 2, 6, 7))
    return (lambda t: dg.grid_sample_bilinear(t[0], t[1])[0]), [x, flow]


def _xent(rng):
    logits = rng.standard_normal((2, 2, 4, 5))
    occ = (rng.random((2, 1, 4, 5)) < 0.3).astype(float)
    rho = (rng.random((2, 1, 4, 5)) < 0.9).astype(float)
    return (lambda t: losses.occlusion_xent_loss(t[0], occ, rho)), [logits]


def _xent_balanced(rng):
    fn, inputs = _xent(rng)
    logits = inputs[0]
    occ = (rng.random((2, 1, 4, 5)) < 0.3).astype(float)
    rho = np.ones((2, 1, 4, 5))
    return (lambda t: losses.occlusion_xent_loss(t[0], occ, rho, "balanced")), [logits]


def _epe(rng):
    gt = rng.standard_normal((2, 2, 4, 4))
    pred = gt + _away_from_zero(rng, gt.shape)
    gamma = (rng.random((2, 1, 4, 4)) < 0.8).astype(float)
    return (lambda t: losses.flow_epe_loss(t[0], gt, gamma)), [pred]


def _charbonnier(rng):
    gt = rng.standard_normal((2, 2, 4, 4))
    pred = gt + _away_from_zero(rng, gt.shape)
    gamma = np.ones((2, 1, 4, 4))
    return (lambda t: losses.flow_charbonnier_loss(t[0], gt, gamma, 0.4, 0.01)), [pred]


def _total(rng):
    vals = rng.uniform(0.5, 2.0, size=6)

    def fn(t):
        flow_terms = [dg.sum_all(dg.square(t[0])), dg.sum_all(t[1])]
        occ_terms = [dg.sum_all(dg.exp(t[1])), dg.sum_all(dg.square(t[0]))]
        return losses.total_loss(flow_terms, occ_terms, (0.3, 0.7), 0.1)

    return fn, [vals[:3].reshape(1, 3, 1, 1), vals[3:].reshape(1, 3, 1, 1)]


def _unary(op, lo=0.2, hi=1.5, positive=False):
    def build(rng):
        x = rng.uniform(lo, hi, size=(2, 3, 3, 4))
        if not positive:
            x = x * rng.choice([-1.0, 1.0], size=x.shape)
        return (lambda t: op(t[0])), [x]

    return build


def _binary(op, positive=False):
    def build(rng):
        a = rng.standard_normal((2, 3, 3, 4))
        b = rng.uniform(0.5, 1.5, size=(2, 3, 3, 4))
        if not positive:
            b = b * rng.choice([-1.0, 1.0], size=b.shape)
        return (lambda t: op(t[0], t[1])), [a, b]

    return build


def _network(rng):
    from .network import ContinualFlowNet, NetConfig

    cfg = NetConfig(levels=3, pyramid_widths=(3, 4, 5), d_max=1, decoder_widths=(4, 3), context_widths=(3,),
                    context_dilations=(2,), refinements=1, output_level=2, seed=int(rng.integers(1 << 30)))
    net = ContinualFlowNet(cfg, dtype=np.float64)
    for name, p in net.params.items():
        if not np.any(p.data):
            p.data[...] = 0.1 * rng.standard_normal(p.data.shape)
    img1 = _smooth_image(rng, 1, 3, 16, 16) * 0.5 + 0.5
    img2 = np.roll(img1, 1, axis=3)
    targets = losses.PairTargets(
        rng.standard_normal((1, 2, 16, 16)) * 2,
        (rng.random((1, 1, 16, 16)) < 0.2).astype(float),
        np.ones((1, 1, 16, 16)),
        np.ones((1, 1, 16, 16)),
    )
    name = "pyr1.b.w"

    def fn(t):
        net.params[name] = t[0]
        out = net.estimate_pair(img1, img2)
        return losses.pair_loss(out, targets, losses.LossWeights(scale_weights=(0.1, 0.2)), cfg.output_level)[0]

    return fn, [net.params[name].data.copy()]


CASES = {
    c.name: c
    for c in [
        GradCase("conv2d", _conv_case(1, 1)),
        GradCase("conv2d_stride2", _conv_case(2, 1)),
        GradCase("conv2d_dilation2", _conv_case(1, 2)),
        GradCase("leaky_relu", _unary(lambda x: dg.leaky_relu(x, 0.1))),
        GradCase("relu", _unary(dg.relu)),
        GradCase("channel_softmax", lambda rng: ((lambda t: dg.channel_softmax(t[0])), [rng.standard_normal((2, 3, 3, 4))])),
        GradCase("grid_sample_bilinear", _grid_sample, SAMPLING_TOL),
        GradCase("correlation", lambda rng: ((lambda t: dg.correlation(t[0], t[1], 1)), [rng.standard_normal((2, 3, 3, 4)), rng.standard_normal((2, 3, 3, 4))])),
        GradCase("upsample_bilinear_x2", lambda rng: ((lambda t: dg.upsample_bilinear_x2(t[0])), [rng.standard_normal((1, 2, 3, 4))])),
        GradCase("avg_pool2x2", lambda rng: ((lambda t: dg.avg_pool2x2(t[0])), [rng.standard_normal((1, 2, 4, 6))])),
        GradCase("box_filter3x3", lambda rng: ((lambda t: dg.box_filter3x3(t[0])), [rng.standard_normal((1, 2, 4, 5))])),
        GradCase("concat", lambda rng: ((lambda t: dg.concat([t[0], dg.square(t[1])])), [rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 1, 3, 3))])),
        GradCase("slice_channels", lambda rng: ((lambda t: dg.slice_channels(t[0], 1, 3)), [rng.standard_normal((1, 4, 2, 3))])),
        GradCase("channel_mean", lambda rng: ((lambda t: dg.channel_mean(t[0])), [rng.standard_normal((2, 3, 2, 3))])),
        GradCase("add", _binary(dg.add)),
        GradCase("sub", _binary(dg.sub)),
        GradCase("mul", _binary(dg.mul)),
        GradCase("div", _binary(dg.div)),
        GradCase("absolute", _unary(dg.absolute)),
        GradCase("square", _unary(dg.square)),
        GradCase("sqrt", _unary(dg.sqrt, positive=True)),
        GradCase("power", _unary(lambda x: dg.power(x, 0.4), positive=True)),
        GradCase("log", _unary(dg.log, positive=True)),
        GradCase("exp", _unary(dg.exp)),
        GradCase("clamp_min", _unary(lambda x: dg.clamp_min(x, 0.1))),
        GradCase("flow_epe_loss", _epe),
        GradCase("flow_charbonnier_loss", _charbonnier),
        GradCase("occlusion_xent_loss", _xent),
        GradCase("occlusion_xent_loss_balanced", _xent_balanced),
        GradCase("total_loss", _total),
        GradCase("network_end_to_end", _network, SAMPLING_TOL),
    ]
}


def run_case(case: GradCase, seed=0, step=1e-5) -> GradResult:
    rng = np.random.default_rng(seed)
    fn, inputs = case.build(rng)
    t0 = time.perf_counter()
    err = dg.grad_check(fn, inputs, step=step, seed=seed)
    return GradResult(case.name, err, case.threshold, time.perf_counter() - t0)


def run_suite(names=None, seed=0, step=1e-5, cases=None):
    """Run the named cases (all when ``names`` is None) and return results in order."""
    table = dict(CASES if cases is None else cases)
    if names is None:
        names = list(table)
    unknown = [n for n in names if n not in table]
    if unknown:
        raise UsageError(f"unknown gradient check(s) {unknown}; available: {sorted(table)}")
    return [run_case(table[n], seed, step) for n in names]


def format_table(results):
    width = max([len(r.name) for r in results] + [4])
    lines = [f"{'op':<{width}}  {'max_rel_err':>12}  {'threshold':>9}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:>12.3e}  {r.threshold:>9.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
