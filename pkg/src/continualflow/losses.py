"""Multi-scale flow and occlusion training objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from . import flowops
from .errors import ConfigurationError

LOG_CLAMP = 1e-12
# per-level weights, finest (level 2) first
DEFAULT_SCALE_WEIGHTS = (0.005, 0.01, 0.02, 0.08, 0.32)


@dataclass
class LossWeights:
    scale_weights: tuple = DEFAULT_SCALE_WEIGHTS
    alpha_occ: float = 0.1
    q: float = 0.4
    eps: float = 0.01
    mode: str = "epe"
    occ_weighting: str = "literal"

    def __post_init__(self):
        self.scale_weights = tuple(float(a) for a in self.scale_weights)
        if any(a <= 0 for a in self.scale_weights):
            raise ConfigurationError("scale weights must be positive")
        if self.alpha_occ < 0:
            raise ConfigurationError("alpha_occ must be >= 0")
        if self.eps <= 0 or not 0 < self.q <= 1:
            raise ConfigurationError("need eps > 0 and 0 < q <= 1")
        if self.mode not in ("epe", "charbonnier"):
            raise ConfigurationError(f"unknown flow loss mode {self.mode!r}")
        if self.occ_weighting not in ("literal", "balanced"):
            raise ConfigurationError(f"unknown occlusion weighting {self.occ_weighting!r}")

    def weight_for_level(self, level, output_level=2):
        i = level - output_level
        if not 0 <= i < len(self.scale_weights):
            raise ConfigurationError(f"no scale weight configured for level {level}")
        return self.scale_weights[i]


def flow_epe_loss(pred, gt, gamma):
    """Sum over pixels of gamma * ||pred - gt||_2."""
    diff = dg.sub(pred, np.asarray(gt, dtype=pred.dtype))
    norm = dg.sqrt(dg.channel_sum(dg.square(diff)))
    return dg.sum_all(dg.mul(norm, np.asarray(gamma, dtype=pred.dtype)))


def flow_charbonnier_loss(pred, gt, gamma, q=0.4, eps=0.01):
    """Sum over pixels of gamma * (|pred - gt|_1 + eps) ** q."""
    diff = dg.sub(pred, np.asarray(gt, dtype=pred.dtype))
    l1 = dg.channel_sum(dg.absolute(diff))
    return dg.sum_all(dg.mul(dg.power(l1 + eps, q), np.asarray(gamma, dtype=pred.dtype)))


def occlusion_class_weights(occ_gt, rho):
    """Per-image fractions (w_occ, w_noc) among rho-valid pixels, each (B,)."""
    occ = np.asarray(occ_gt, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    axes = tuple(range(1, occ.ndim))
    n = rho.sum(axis=axes)
    n_occ = (occ * rho).sum(axis=axes)
    safe = np.where(n > 0, n, 1.0)
    w_occ = np.where(n > 0, n_occ / safe, 0.0)
    w_noc = np.where(n > 0, (n - n_occ) / safe, 0.0)
    return w_occ, w_noc


def occlusion_xent_loss(logits, occ_gt, rho, weighting="literal"):
    """Weighted cross-entropy over the 2-channel occlusion logits.

    Channel 0 scores "occluded", channel 1 "not occluded"; ``occ_gt`` is 1 on
    occluded pixels.  With ``weighting="literal"`` the non-occluded pixels are
    weighted by the non-occluded fraction and occluded pixels by the occluded
    fraction; ``"balanced"`` swaps the two so the rarer class gains weight.
    Images with no rho-valid pixel contribute zero.
    """
    b = logits.shape[0]
    dt = logits.dtype
    occ = np.asarray(occ_gt, dtype=dt).reshape(b, 1, *logits.shape[2:])
    rho = np.asarray(rho, dtype=dt).reshape(occ.shape)
    w_occ, w_noc = occlusion_class_weights(occ, rho)
    if weighting == "balanced":
        w_occ, w_noc = w_noc, w_occ
    elif weighting != "literal":
        raise ConfigurationError(f"unknown occlusion weighting {weighting!r}")
    wmap = np.concatenate(
        [occ * rho * w_occ[:, None, None, None], (1 - occ) * rho * w_noc[:, None, None, None]], axis=1
    ).astype(dt)
    logp = dg.log(dg.clamp_min(dg.channel_softmax(logits), LOG_CLAMP))
    return dg.neg(dg.sum_all(dg.mul(logp, wmap)))


def total_loss(flow_losses, occ_losses, scale_weights, alpha_occ):
    """sum_s a_s * L_F^s + alpha_occ * sum_s a_s * L_O^s (tensors or floats)."""
    if len(flow_losses) != len(scale_weights) or len(occ_losses) != len(scale_weights):
        raise ConfigurationError("one flow and one occlusion loss per scale weight required")
    flow_part = None
    occ_part = None
    for lf, lo, a in zip(flow_losses, occ_losses, scale_weights):
        flow_part = lf * a if flow_part is None else flow_part + lf * a
        occ_part = lo * a if occ_part is None else occ_part + lo * a
    return flow_part + occ_part * alpha_occ


@dataclass
class PairTargets:
    """Full-resolution ground truth of one frame pair, batched."""

    flow: np.ndarray  # (B, 2, H, W)
    occ: np.ndarray  # (B, 1, H, W), 1 = occluded
    gamma: np.ndarray  # (B, 1, H, W)
    rho: np.ndarray  # (B, 1, H, W)

    def at_level(self, level):
        """Ground truth pooled to a pyramid level (values scaled to that level's pixels)."""
        return PairTargets(
            flowops.downsample_flow(self.flow, level),
            flowops.downsample_max(self.occ, level),
            flowops.downsample_min(self.gamma, level),
            flowops.downsample_min(self.rho, level),
        )


def flow_loss(pred, target, weights):
    if weights.mode == "charbonnier":
        return flow_charbonnier_loss(pred, target.flow, target.gamma, weights.q, weights.eps)
    return flow_epe_loss(pred, target.flow, target.gamma)


def pair_loss(outputs, targets: PairTargets, weights: LossWeights, output_level=2):
    """Objective over every decoded scale plus each refinement output.

    Refinement outputs are weighted like the finest decoded scale.  Returns
    ``(total, flow_part, occ_part)`` as graph tensors.
    """
    flow_terms, occ_terms, alphas = [], [], []
    cache = {}
    for level, pred in outputs.flows.items():
        tgt = cache.setdefault(level, targets.at_level(level))
        flow_terms.append(flow_loss(pred, tgt, weights))
        occ_terms.append(occlusion_xent_loss(outputs.occ_logits[level], tgt.occ, tgt.rho, weights.occ_weighting))
        alphas.append(weights.weight_for_level(level, output_level))
    tgt = cache.setdefault(output_level, targets.at_level(output_level))
    for pred, logits in zip(outputs.refined_flows, outputs.refined_occ_logits):
        flow_terms.append(flow_loss(pred, tgt, weights))
        occ_terms.append(occlusion_xent_loss(logits, tgt.occ, tgt.rho, weights.occ_weighting))
        alphas.append(weights.weight_for_level(output_level, output_level))
    flow_part = _weighted_sum(flow_terms, alphas)
    occ_part = _weighted_sum(occ_terms, alphas)
    return flow_part + dg.mul(occ_part, weights.alpha_occ), flow_part, occ_part


def _weighted_sum(terms, alphas):
    out = dg.mul(terms[0], alphas[0])
    for t, a in zip(terms[1:], alphas[1:]):
        out = out + dg.mul(t, a)
    return out
