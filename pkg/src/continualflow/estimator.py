"""scikit-learn style wrapper around training and inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import SequenceSample
from .errors import ConfigurationError
from .evaluation import evaluate_samples, predict_sequence
from .losses import LossWeights
from .network import ContinualFlowNet, preset_config
from .training import TrainConfig, train


def validate_frames(frames, in_channels=None):
    """Return frames as a float32 (N, C, H, W) array in [0, 1] or raise ConfigurationError."""
    arr = np.asarray(frames)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[0] < 2:
        raise ConfigurationError(f"frames must be (N>=2, C, H, W), got {arr.shape}")
    if in_channels is not None and arr.shape[1] != in_channels:
        raise ConfigurationError(f"expected {in_channels} channels, got {arr.shape[1]}")
    if not np.issubdtype(arr.dtype, np.number):
        raise ConfigurationError("frames must be numeric")
    arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise ConfigurationError("frame values must be finite and within [0, 1]")
    return arr


def validate_samples(samples):
    samples = list(samples)
    if not samples:
        raise ConfigurationError("at least one sequence is required")
    for s in samples:
        if not isinstance(s, SequenceSample):
            raise ConfigurationError(f"expected SequenceSample, got {type(s).__name__}")
        validate_frames(s.frames)
    return samples


class ContinualFlowEstimator(BaseEstimator):
    """Fit on :class:`SequenceSample` lists; predict flows for frame stacks.

    ``predict`` returns one (N-1, 2, H, W) array per sequence, ``score`` the
    negated aggregate end-point error so that larger is better.
    """

    def __init__(self, preset="toy", d_max=None, refinements=2, temporal="both", placement="both",
                 occlusion_input=True, steps=2000, lr=1e-4, weight_decay=4e-4, batch=4, crop=(48, 48),
                 alpha_occ=0.1, loss="epe", occ_weighting="literal", two_pass=False, seed=0):
        self.preset = preset
        self.d_max = d_max
        self.refinements = refinements
        self.temporal = temporal
        self.placement = placement
        self.occlusion_input = occlusion_input
        self.steps = steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch = batch
        self.crop = crop
        self.alpha_occ = alpha_occ
        self.loss = loss
        self.occ_weighting = occ_weighting
        self.two_pass = two_pass
        self.seed = seed

    def _net_config(self):
        over = dict(refinements=self.refinements, temporal=self.temporal, placement=self.placement,
                    occlusion_input=self.occlusion_input, seed=self.seed)
        if self.d_max is not None:
            over["d_max"] = self.d_max
        return preset_config(self.preset, **over)

    def fit(self, X, y=None, log_path=None):
        samples = validate_samples(X)
        net = ContinualFlowNet(self._net_config())
        cfg = TrainConfig(steps=self.steps, lr=self.lr, weight_decay=self.weight_decay, batch=self.batch,
                          crop=self.crop, seed=self.seed)
        weights = LossWeights(alpha_occ=self.alpha_occ, mode=self.loss, occ_weighting=self.occ_weighting)
        self.loss_history_ = train(net, samples, cfg, weights, log_path=log_path)
        self.net_ = net
        return self

    def _frames(self, x):
        return x.frames if isinstance(x, SequenceSample) else validate_frames(x, self.net_.config.in_channels)

    def predict(self, X):
        check_is_fitted(self, "net_")
        return [predict_sequence(self.net_, self._frames(x), self.two_pass)[0] for x in X]

    def predict_occlusion(self, X):
        check_is_fitted(self, "net_")
        return [predict_sequence(self.net_, self._frames(x), self.two_pass)[1] for x in X]

    def evaluate(self, X, temporal=True):
        check_is_fitted(self, "net_")
        return evaluate_samples(self.net_, validate_samples(X), self.two_pass, temporal)[1]

    def score(self, X, y=None):
        return -self.evaluate(X).epe_all
