"""Optimizer, batch sampling and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffgraph as dg
from .data import SequenceSample, crop_sample
from .errors import ConfigurationError, TrainingDiverged
from .losses import LossWeights, PairTargets, pair_loss
from .network import ContinualFlowNet

log = logging.getLogger(__name__)

# how a training pair receives its temporal input
TEMPORAL_SOURCES = ("none", "previous", "two_pass", "ground_truth")
# parameter and first-moment magnitudes treated as exactly zero
FLUSH_BELOW = 1e-20


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    weight_decay: float = 4e-4
    batch: int = 4
    crop: tuple | None = (48, 48)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # probabilities of the temporal sources, in TEMPORAL_SOURCES order; a
    # three-entry mix leaves out "ground_truth"
    temporal_mix: tuple = (0.25, 0.5, 0.25)
    # linear learning-rate ramp over the first ``warmup`` steps, then constant
    warmup: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.warmup < 0:
            raise ConfigurationError("steps and warmup must be >= 0 and batch >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigurationError("lr must be positive and weight decay non-negative")
        mix = np.asarray(self.temporal_mix, dtype=float)
        if mix.shape not in ((3,), (4,)) or (mix < 0).any() or not math.isclose(mix.sum(), 1.0):
            raise ConfigurationError("temporal_mix needs three or four non-negative weights summing to 1")
        self.temporal_mix = tuple(float(m) for m in mix)
        if self.crop is not None:
            self.crop = tuple(int(c) for c in self.crop)

    def lr_at(self, step):
        """Learning rate used at 1-based ``step``."""
        if step <= self.warmup:
            return self.lr * step / self.warmup
        return self.lr


class Adam:
    """Adam with L2 weight decay added to the gradient of ``.w`` parameters."""

    def __init__(self, params: dict, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.wd = lr, weight_decay
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad.astype(p.data.dtype)
            if self.wd and k.endswith(".w"):
                g = g + self.wd * p.data
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)
            # weights of units that never receive gradient decay towards the
            # subnormal range, where float arithmetic becomes very slow
            p.data[np.abs(p.data) < FLUSH_BELOW] = 0
            self.m[k][np.abs(self.m[k]) < FLUSH_BELOW] = 0
            self.v[k][self.v[k] < np.finfo(self.v[k].dtype).tiny] = 0


@dataclass
class Batch:
    frames_prev: np.ndarray  # (B, C, H, W) frame k-1 (copy of frame k when absent)
    frames_t: np.ndarray
    frames_t1: np.ndarray
    targets: PairTargets
    source: str
    # ground-truth flows of pair k-1, forward and back, for the "ground_truth" source
    prev_fwd: np.ndarray | None = None
    prev_bwd: np.ndarray | None = None


def sample_batch(samples, cfg: TrainConfig, rng, use_temporal=True):
    """Draw ``cfg.batch`` frame pairs (with optional previous frame) and their ground truth."""
    mix = cfg.temporal_mix
    source = TEMPORAL_SOURCES[rng.choice(len(mix), p=mix)] if use_temporal else "none"
    prev, cur, nxt, flow, occ, gamma, rho, pf, pb = [], [], [], [], [], [], [], [], []
    for _ in range(cfg.batch):
        s: SequenceSample = samples[rng.integers(len(samples))]
        lo = 1 if source in ("previous", "ground_truth") and s.length >= 3 else 0
        k = int(rng.integers(lo, s.length - 1))
        h, w = s.shape
        if cfg.crop is not None:
            ch, cw = cfg.crop
            if ch > h or cw > w:
                raise ConfigurationError(f"crop {cfg.crop} larger than samples {s.shape}")
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            s = crop_sample(s, (top, left, ch, cw))
        prev.append(s.frames[max(k - 1, 0)])
        cur.append(s.frames[k])
        nxt.append(s.frames[k + 1])
        flow.append(s.flow_fwd[k])
        occ.append(s.occ[k][None])
        gamma.append(s.gamma[k][None])
        rho.append(s.rho[k][None])
        if source == "ground_truth":
            # a first pair has no predecessor; its temporal input stays empty
            pf.append(s.flow_fwd[k - 1] if k else None)
            pb.append(s.flow_bwd[k - 1] if k else None)
    st = lambda xs: np.stack(xs).astype(np.float32)
    batch = Batch(st(prev), st(cur), st(nxt), PairTargets(st(flow), st(occ), st(gamma), st(rho)), source)
    if source == "ground_truth":
        if any(f is None for f in pf):
            batch.source = "none"
        else:
            batch.prev_fwd, batch.prev_bwd = st(pf), st(pb)
    return batch


def temporal_for_batch(net: ContinualFlowNet, batch: Batch, pyr_t, pyr_t1):
    """Temporal input for the batch, computed without gradient."""
    if batch.source == "none" or net.config.temporal == "off":
        return None
    if batch.source == "ground_truth":
        return net.temporal_from_previous(batch.prev_fwd, batch.prev_bwd if net.config.uses_bwd else None)
    with dg.no_grad():
        if batch.source == "two_pass":
            first = net.estimate_pair(None, None, None, pyramids=(pyr_t, pyr_t1)).flow_full
            return net.two_pass_temporal(first.data)
        pyr_prev = net.extract_pyramid(batch.frames_prev)
        prev = net.estimate_pair(None, None, None, pyramids=(pyr_prev, pyr_t)).flow_full
        back = None
        if net.config.uses_bwd:
            back = net.estimate_pair(None, None, None, pyramids=(pyr_t, pyr_prev)).flow_full.data
        return net.temporal_from_previous(prev.data, back)


def train_step(net, optimizer, batch: Batch, weights: LossWeights):
    """One optimization step; returns (total, flow, occ) loss values."""
    net.zero_grad()
    pyr_t = net.extract_pyramid(batch.frames_t)
    pyr_t1 = net.extract_pyramid(batch.frames_t1)
    temporal = temporal_for_batch(net, batch, pyr_t, pyr_t1)
    out = net.estimate_pair(None, None, temporal, pyramids=(pyr_t, pyr_t1))
    total, flow_part, occ_part = pair_loss(out, batch.targets, weights, net.config.output_level)
    # the occlusion column is logged with its weight so that total = flow + occ
    values = (total.item(), flow_part.item(), weights.alpha_occ * occ_part.item())
    if not all(math.isfinite(v) for v in values):
        return values
    dg.backward_sweep(total)
    optimizer.step()
    return values


def _dump_batch(batch: Batch, path):
    np.savez(
        path,
        frames_prev=batch.frames_prev,
        frames_t=batch.frames_t,
        frames_t1=batch.frames_t1,
        flow=batch.targets.flow,
        occ=batch.targets.occ,
        gamma=batch.targets.gamma,
        rho=batch.targets.rho,
    )


def train(net: ContinualFlowNet, samples, cfg: TrainConfig, weights: LossWeights | None = None,
          log_path=None, dump_dir=None, callback=None):
    """Train ``net`` in place and return the list of (step, total, flow, occ) rows.

    Rows are written to ``log_path`` as CSV when given.  A non-finite loss
    stops training with :class:`TrainingDiverged` after saving the offending
    batch under ``dump_dir``.
    """
    weights = weights or LossWeights()
    if not samples:
        raise ConfigurationError("no training samples")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    opt = Adam(net.params, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rows = []
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "total", "flow", "occ"])
    try:
        for step in range(1, cfg.steps + 1):
            opt.lr = cfg.lr_at(step)
            batch = sample_batch(samples, cfg, rng, use_temporal=net.config.temporal != "off")
            values = train_step(net, opt, batch, weights)
            if not all(math.isfinite(v) for v in values):
                dump = None
                if dump_dir is not None:
                    Path(dump_dir).mkdir(parents=True, exist_ok=True)
                    dump = Path(dump_dir) / f"diverged_step{step}.npz"
                    _dump_batch(batch, dump)
                raise TrainingDiverged(f"non-finite loss {values} at step {step}", dump_path=dump)
            row = (step, *values)
            rows.append(row)
            if writer is not None:
                writer.writerow([step, *(repr(float(v)) for v in values)])
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d total %.4f flow %.4f occ %.4f", *row)
            if callback is not None:
                callback(row)
    finally:
        if fh is not None:
            fh.close()
    return rows


def train_config_dict(cfg: TrainConfig):
    return asdict(cfg)
