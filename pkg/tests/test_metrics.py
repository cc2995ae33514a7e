import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from continualflow import metrics
from continualflow.errors import UsageError

import oracles


def flows_with_error(errors):
    """Prediction/gt pair whose per-pixel end-point errors are ``errors`` (1-D)."""
    e = np.asarray(errors, float)[None, :]
    gt = np.zeros((2, 1, e.shape[1]))
    pred = np.stack([e * 0.6, e * 0.8])
    return pred, gt


class TestFlowMetrics:
    def test_epe_value(self):
        pred, gt = flows_with_error([1.0, 2.0, 6.0])
        assert metrics.epe(pred, gt) == pytest.approx(3.0)

    def test_fl_boundary_is_inlier(self):
        pred = np.array([[[3.0, 3.0001, 2.9]], [[0.0, 0.0, 0.0]]])
        assert metrics.fl(pred, np.zeros_like(pred)) == pytest.approx(1 / 3)

    def test_exactly_three_never_outlier(self):
        pred = np.zeros((2, 2, 2))
        pred[0] = 3.0
        assert metrics.fl(pred, np.zeros_like(pred)) == 0.0

    def test_empty_region_is_none(self):
        pred, gt = flows_with_error([1.0, 2.0])
        assert metrics.epe(pred, gt, region=np.zeros((1, 2))) is None
        assert metrics.fl(pred, gt, gamma=np.zeros((1, 2))) is None

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            metrics.epe(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


class TestOcclusionScores:
    def test_confusion_matches_loops(self, rng):
        for _ in range(20):
            pred = rng.random(50)
            gt = rng.integers(0, 2, 50)
            rho = rng.integers(0, 2, 50)
            tp, fp, fn, _ = metrics.confusion(pred, gt, rho)
            assert (tp, fp, fn) == oracles.confusion_loops(pred, gt, rho)

    def test_perfect(self):
        gt = np.array([1, 0, 1, 0])
        assert metrics.occlusion_scores(gt.astype(float), gt) == (1.0, 1.0, 1.0)

    def test_undefined_cases(self):
        gt = np.zeros(4)
        p, r, f = metrics.occlusion_scores(np.zeros(4), gt)
        assert p is None and r is None and f is None
        p, r, f = metrics.occlusion_scores(np.ones(4), gt)
        assert p == 0.0 and r is None and f == 0.0

    def test_threshold_range(self):
        with pytest.raises(UsageError):
            metrics.confusion(np.zeros(2), np.zeros(2), threshold=1.0)


def random_pair(rng, h=6, w=7):
    flow = rng.normal(0, 3, (2, h, w))
    gt = rng.normal(0, 3, (2, h, w))
    occ = rng.integers(0, 2, (h, w))
    labels = rng.integers(0, 3, (h, w))
    return flow, gt, rng.random((h, w)), occ, labels


class TestReports:
    def test_regions_and_counts(self, rng):
        flow, gt, prob, occ, labels = random_pair(rng)
        rep = metrics.evaluate_pair(flow, gt, prob, occ, labels)
        assert rep.n_all == 42 and rep.n_occ == occ.sum() and rep.n_fg == (labels > 0).sum()
        assert rep.epe_occ == pytest.approx(metrics.epe(flow, gt, region=occ))
        assert rep.partition_consistent()

    @given(st.integers(0, 10_000))
    def test_partition_law_holds(self, seed):
        rng = np.random.default_rng(seed)
        reps = [metrics.evaluate_pair(*random_pair(rng)) for _ in range(3)]
        for r in reps + [metrics.aggregate(reps)]:
            assert r.partition_consistent()

    def test_aggregate_is_count_weighted(self, rng):
        a = metrics.evaluate_pair(*random_pair(rng, 2, 2))
        b = metrics.evaluate_pair(*random_pair(rng, 4, 4))
        agg = metrics.aggregate([a, b])
        assert agg.n_all == 20
        assert agg.epe_all == pytest.approx((a.epe_all * 4 + b.epe_all * 16) / 20)
        assert agg.occ_tp == a.occ_tp + b.occ_tp

    def test_partition_violation_detected(self, rng):
        rep = metrics.evaluate_pair(*random_pair(rng))
        rep.epe_all += 0.5
        assert not rep.partition_consistent()

    def test_format_round_trip(self, rng):
        per = [({"sequence": i, "pair": 0}, metrics.evaluate_pair(*random_pair(rng))) for i in range(2)]
        agg = metrics.aggregate(r for _, r in per)
        text = metrics.format_reports(per, agg, {"checkpoint": "x"})
        lines = text.splitlines()
        assert len(lines) == 4
        header, images, back = metrics.parse_reports(text)
        assert "strictly greater than 3" in header["fl_definition"]
        assert header["checkpoint"] == "x"
        assert [k for k, _ in images] == [{"sequence": 0, "pair": 0}, {"sequence": 1, "pair": 0}]
        assert back == agg

    def test_no_occlusion_gt(self, rng):
        flow, gt, *_ = random_pair(rng)
        rep = metrics.evaluate_pair(flow, gt)
        assert rep.n_occ == 0 and rep.epe_occ is None and rep.occ_f1 is None
        assert rep.partition_consistent()


@given(arrays(np.float64, (2, 3, 3), elements=st.floats(-10, 10)))
def test_epe_nonnegative_and_zero_on_self(flow):
    assert metrics.epe(flow, flow) == 0.0
    assert metrics.epe(flow, np.zeros_like(flow)) >= 0.0
