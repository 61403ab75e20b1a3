"""Detection metrics against brute-force and enumeration oracles."""

import itertools
import json

import numpy as np
import pytest

from t3guard.errors import MetricError, ValidationError
from t3guard.evalkit import (
    LabeledScores,
    auprc,
    auroc,
    evaluate,
    fpr_at_95_tpr,
    max_f1,
    write_report,
)


def pairwise_auroc(id_scores, ood_scores):
    """O(n*m) comparison count: wins plus half-ties over all pairs."""
    total = 0.0
    for o in ood_scores:
        for i in id_scores:
            if o > i:
                total += 1.0
            elif o == i:
                total += 0.5
    return total / (len(id_scores) * len(ood_scores))


def fpr95_enumeration(id_scores, ood_scores):
    """Try every candidate threshold; keep the loosest with TPR >= 0.95."""
    ood = np.asarray(ood_scores)
    ids = np.asarray(id_scores)
    best_t = None
    for t in np.unique(np.concatenate([ood, ids])):
        if (ood >= t).mean() >= 0.95:
            best_t = t if best_t is None else max(best_t, t)
    assert best_t is not None
    return float((ids >= best_t).mean())


class TestAuroc:
    def test_frozen_example(self):
        s = LabeledScores(id_scores=np.array([0.4, 0.9]),
                          ood_scores=np.array([0.6, 0.1]))
        # pairs (ood > id): (0.6,0.4) wins; other three lose -> 1/4
        assert auroc(s) == pytest.approx(0.25)

    def test_matches_pairwise_brute_force(self):
        for trial in range(100):
            rng = np.random.default_rng([400, trial])
            n_id = int(rng.integers(1, 60))
            n_ood = int(rng.integers(1, 60))
            # quantized scores force plenty of exact ties
            ids = np.round(rng.random(n_id), 1)
            oods = np.round(rng.random(n_ood), 1)
            s = LabeledScores(id_scores=ids, ood_scores=oods)
            assert auroc(s) == pytest.approx(
                pairwise_auroc(ids, oods), abs=1e-12
            ), trial

    def test_extremes(self):
        perfect = LabeledScores(id_scores=np.array([0.1, 0.2]),
                                ood_scores=np.array([0.8, 0.9]))
        inverted = LabeledScores(id_scores=np.array([0.8, 0.9]),
                                 ood_scores=np.array([0.1, 0.2]))
        tied = LabeledScores(id_scores=np.array([0.5, 0.5]),
                             ood_scores=np.array([0.5, 0.5]))
        assert auroc(perfect) == 1.0
        assert auroc(inverted) == 0.0
        assert auroc(tied) == 0.5


class TestFpr95:
    def test_matches_enumeration_oracle(self):
        for trial in range(100):
            rng = np.random.default_rng([401, trial])
            ids = np.round(rng.random(int(rng.integers(5, 80))), 1)
            oods = np.round(rng.random(int(rng.integers(5, 80))), 1)
            s = LabeledScores(id_scores=ids, ood_scores=oods)
            assert fpr_at_95_tpr(s) == fpr95_enumeration(ids, oods), trial

    def test_threshold_is_ceil_rank_order_statistic(self):
        # 20 harmful scores: threshold is the 19th largest = 2.0
        oods = np.arange(1.0, 21.0)
        ids = np.array([1.5, 2.0, 2.5, 100.0])
        s = LabeledScores(id_scores=ids, ood_scores=oods)
        assert fpr_at_95_tpr(s) == pytest.approx(3 / 4)

    def test_perfect_separation_gives_zero(self):
        s = LabeledScores(id_scores=np.zeros(10),
                          ood_scores=np.ones(10))
        assert fpr_at_95_tpr(s) == 0.0


class TestMonotoneInvariance:
    TRANSFORMS = (
        lambda v: 3.0 * v + 7.0,
        lambda v: np.exp(v),
        lambda v: np.arctan(v),
        lambda v: v ** 3,
    )

    def test_rank_metrics_unchanged(self):
        rng = np.random.default_rng(402)
        ids = rng.standard_normal(70)
        oods = rng.standard_normal(50) + 0.8
        base = LabeledScores(id_scores=ids, ood_scores=oods)
        for fn in self.TRANSFORMS:
            warped = LabeledScores(id_scores=fn(ids), ood_scores=fn(oods))
            assert auroc(warped) == pytest.approx(auroc(base), abs=1e-12)
            assert fpr_at_95_tpr(warped) == fpr_at_95_tpr(base)
            assert auprc(warped) == pytest.approx(auprc(base), abs=1e-12)
            assert max_f1(warped)[0] == pytest.approx(max_f1(base)[0],
                                                      abs=1e-12)


class TestAuprc:
    def test_all_tied_scores_give_prevalence(self):
        s = LabeledScores(id_scores=np.full(30, 0.5),
                          ood_scores=np.full(10, 0.5))
        assert auprc(s) == pytest.approx(10 / 40)

    def test_perfect_separation_gives_one(self):
        s = LabeledScores(id_scores=np.linspace(0, 0.4, 20),
                          ood_scores=np.linspace(0.6, 1.0, 20))
        assert auprc(s) == pytest.approx(1.0)

    def test_worked_three_point_curve(self):
        # ood = {3, 1}, id = {2}; thresholds 3, 2, 1:
        #   t=3: recall 1/2, precision 1      -> anchor 0.5
        #   t=2: recall 1/2, precision 1/2    -> zero-width segment
        #   t=1: recall 1,   precision 2/3    -> trapezoid 0.5*(1/2+2/3)/2
        s = LabeledScores(id_scores=np.array([2.0]),
                          ood_scores=np.array([3.0, 1.0]))
        assert auprc(s) == pytest.approx(0.5 + 0.5 * (0.5 + 2 / 3) / 2)


class TestMaxF1:
    def test_worked_example_and_tie_break(self):
        # ood = {3, 1}, id = {2}: t=3 -> F1 2/3; t=2 -> 1/2; t=1 -> 4/5
        s = LabeledScores(id_scores=np.array([2.0]),
                          ood_scores=np.array([3.0, 1.0]))
        f1, threshold = max_f1(s)
        assert f1 == pytest.approx(4 / 5)
        assert threshold == 1.0

    def test_tied_f1_keeps_lower_threshold(self):
        # ood = {5, 2}, id = {4, 3}: t=5 gives (tp=1, fp=0) and t=2 gives
        # (tp=2, fp=2); both work out to F1 = 2/3, so the scan keeps t=2
        s = LabeledScores(id_scores=np.array([4.0, 3.0]),
                          ood_scores=np.array([5.0, 2.0]))
        f1, threshold = max_f1(s)
        assert f1 == pytest.approx(2 / 3)
        assert threshold == 2.0

    def test_exhaustive_thresholds_cannot_beat_it(self):
        rng = np.random.default_rng(403)
        ids = np.round(rng.random(25), 1)
        oods = np.round(rng.random(15), 1)
        s = LabeledScores(id_scores=ids, ood_scores=oods)
        best, _ = max_f1(s)
        for t in itertools.chain(np.unique(np.concatenate([ids, oods])),
                                 [-1.0, 2.0]):
            tp = float((oods >= t).sum())
            fp = float((ids >= t).sum())
            fn = len(oods) - tp
            f1 = 2 * tp / max(2 * tp + fp + fn, 1.0)
            assert f1 <= best + 1e-12


class TestReportAndValidation:
    def test_evaluate_bundles_everything(self, tmp_path):
        s = LabeledScores(id_scores=np.array([0.1, 0.2]),
                          ood_scores=np.array([0.8, 0.9]))
        report = evaluate(s)
        assert report.auroc == 1.0
        assert report.n_id == 2 and report.n_ood == 2
        out = tmp_path / "report.json"
        write_report(out, report)
        doc = json.loads(out.read_text())
        assert set(doc) == {"auroc", "fpr95", "auprc", "max_f1",
                            "threshold", "n_id", "n_ood"}
        assert doc["auroc"] == 1.0

    def test_empty_class_rejected(self):
        with pytest.raises(MetricError):
            LabeledScores(id_scores=np.array([]),
                          ood_scores=np.array([1.0]))
        with pytest.raises(MetricError):
            LabeledScores(id_scores=np.array([1.0]),
                          ood_scores=np.array([]))

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            LabeledScores(id_scores=np.array([np.nan]),
                          ood_scores=np.array([1.0]))
        with pytest.raises(ValidationError):
            LabeledScores(id_scores=np.array([0.0]),
                          ood_scores=np.array([np.inf]))
