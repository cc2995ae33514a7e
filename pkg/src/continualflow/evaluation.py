"""Run a network over sequences and score the results."""
from __future__ import annotations

import numpy as np

from . import diffgraph as dg
from .data import SequenceSample
from .metrics import aggregate, evaluate_pair
from .network import ContinualFlowNet


def predict_sequence(net: ContinualFlowNet, frames, two_pass=False, temporal=True):
    """Full-resolution flows (N-1, 2, H, W) and occlusion probabilities (N-1, H, W)."""
    frames = [np.asarray(f, dtype=net.dtype)[None] for f in frames]
    with dg.no_grad():
        outs = net.process_sequence(frames, two_pass=two_pass, temporal_enabled=temporal)
    flows = np.stack([o.flow_full.data[0] for o in outs])
    occ = np.stack([o.occlusion_full()[0] for o in outs])
    return flows, occ


def evaluate_samples(net: ContinualFlowNet, samples, two_pass=False, temporal=True, threshold=0.5):
    """Per-pair reports keyed by sequence and pair index, plus their aggregate."""
    per_image = []
    for i, s in enumerate(samples):
        s: SequenceSample
        flows, occ = predict_sequence(net, s.frames, two_pass, temporal)
        for k in range(s.length - 1):
            rep = evaluate_pair(flows[k], s.flow_fwd[k], occ[k], s.occ[k], s.labels[k], s.gamma[k], s.rho[k], threshold)
            per_image.append(({"sequence": i, "pair": k}, rep))
    return per_image, aggregate(r for _, r in per_image)
