"""Acceptance criteria, one test per criterion at the stated tolerances.

Each test carries an ``acceptance`` marker; the conftest hook prints one
PASS/FAIL line per criterion after the run.  Criterion A02 is implemented
exactly as stated and marked strict-xfail: the targeted limit value is not
what the statistic converges to (the observed mean sits on the closed-form
order-statistic value instead), so an honest implementation cannot reach
it.  The analysis lives in notes/decisions.md.
"""

import math
import time

import numpy as np
import pytest

from t3guard.detectors import (
    OCSVM_NU_GRID,
    anomaly_score,
    calibrate,
    fit_gmm_em,
    fit_ocsvm,
    normalize_score,
    select_gmm_bic,
)
from t3guard.embedding_store import EmbeddingView, MultiViewDataset
from t3guard.evalkit import LabeledScores, auroc, fpr_at_95_tpr
from t3guard.neighborhood import build_index, split_reference
from t3guard.prdc import (
    FeatureSubset,
    brute_force_prdc,
    check_coupling,
    compute_prdc_batch,
    feature_matrix,
)
from t3guard.stream_guard import (
    FallbackPolicy,
    MarkerScorer,
    SchedulerConfig,
    run_simulation,
)
from t3guard.theory import (
    mc_null_expectations,
    recall_agreement_check,
    two_sample_stats,
)

SEED = 20240601


def unit_rows(rng, count, dim):
    rows = rng.standard_normal((count, dim))
    return (rows / np.linalg.norm(rows, axis=1, keepdims=True)).astype(
        np.float32
    )


@pytest.mark.acceptance(
    "A01", "null-expectation calibration (recall, density, coverage bound)"
)
def test_null_expectations_match_closed_forms():
    t0 = time.monotonic()
    rep = mc_null_expectations(m=200, n=200, k=5, d=8, trials=200, seed=SEED)
    assert abs(rep.mean_recall - 0.025) <= 0.2 * 0.025
    assert abs(rep.mean_density - 0.005) <= 0.2 * 0.005
    bound = 1.0 - (1.0 - 5 / 200) ** 200
    assert rep.bound_coverage == pytest.approx(bound)
    assert rep.mean_coverage <= bound + 0.02
    assert time.monotonic() - t0 <= 120.0


@pytest.mark.acceptance(
    "A02", "matched-sample coverage limit 0.6321 with monotone approach",
    note=(
        "implemented as stated and expected to fail: under matched "
        "distributions the k-NN ball mass is Beta(k, n-k) exactly, so at "
        "m=n, k=1 the mean coverage converges to 1-(1+1)^-1 = 0.5, not to "
        "the Poissonization value 1-e^-1 = 0.6321; the observed mean sits "
        "on the exact limit, 0.13 outside the 0.02 tolerance "
        "(notes/decisions.md has the derivation and what was tried)"
    ),
)
@pytest.mark.xfail(
    strict=True,
    reason=(
        "the 0.6321 +/- 0.02 target at m=n=2000 is unattainable: the exact "
        "fixed-k limit of mean coverage is 1-(1+lambda)^-k = 0.5 at "
        "lambda=1, k=1, and the Monte Carlo mean lands on it"
    ),
)
def test_coverage_approaches_poissonization_limit():
    t0 = time.monotonic()
    target = 1.0 - math.exp(-1.0)
    means = {}
    for m, trials in ((200, 120), (500, 80), (2000, 40)):
        rep = mc_null_expectations(m=m, n=m, k=1, d=8, trials=trials,
                                   seed=SEED)
        means[m] = rep.mean_coverage
    assert time.monotonic() - t0 <= 120.0
    assert abs(means[2000] - target) <= 0.02
    gaps = [abs(means[m] - target) for m in (200, 500, 2000)]
    assert gaps[0] >= gaps[1] >= gaps[2]


@pytest.mark.acceptance(
    "A03", "pooled k-NN label agreement: null level, disjoint case, "
           "min-variant ordering"
)
def test_pooled_agreement_statistics():
    for trial in range(5):
        rng = np.random.default_rng([SEED, 30, trial])
        x = rng.standard_normal((1000, 8))
        y = rng.standard_normal((1000, 8))
        stat = two_sample_stats(x, y, 5)
        assert abs(stat.mean_agreement - 0.5) <= 0.03, trial

    rng = np.random.default_rng([SEED, 31])
    x = rng.standard_normal((1000, 8))
    y = rng.standard_normal((1000, 8)) + 100.0
    assert two_sample_stats(x, y, 5).mean_agreement >= 0.98

    for trial in range(50):
        rng = np.random.default_rng([SEED, 32, trial])
        m = int(rng.integers(20, 80))
        n = int(rng.integers(20, 80))
        k = int(rng.integers(1, 6))
        x = rng.standard_normal((m, 4))
        y = rng.standard_normal((n, 4)) + rng.uniform(0, 2)
        stat = two_sample_stats(x, y, k)
        assert stat.min_agreement <= stat.mean_agreement + 1e-12, trial

    for trial in range(20):
        rng = np.random.default_rng([SEED, 33, trial])
        x = rng.standard_normal((40, 4))
        y = rng.standard_normal((40, 4)) + rng.uniform(0, 2)
        stat = two_sample_stats(x, y, 1)
        assert stat.min_agreement == stat.mean_agreement, trial


@pytest.mark.acceptance(
    "A04", "zero-recall / all-neighbors-same-label equivalence, 1000 configs"
)
def test_recall_agreement_equivalence():
    assert recall_agreement_check(m=30, n=30, k=3, trials=1000,
                                  seed=SEED) == 0


@pytest.mark.acceptance(
    "A05", "feature computation equals brute-force oracle on 200 instances"
)
def test_prdc_matches_brute_force_oracle():
    for trial in range(200):
        rng = np.random.default_rng([SEED, 50, trial])
        m = int(rng.integers(4, 51))
        k = int(rng.integers(1, min(m - 1, 6) + 1))
        n = int(rng.integers(k + 1, 51))
        dim = int(rng.integers(2, 9))
        reference = unit_rows(rng, m, dim)
        test = unit_rows(rng, n, dim)
        index = build_index(EmbeddingView("v", reference, normalized=True),
                            [k])
        fast = compute_prdc_batch(
            [index],
            MultiViewDataset(views=[EmbeddingView("v", test,
                                                  normalized=True)]),
            [k],
        )
        slow = brute_force_prdc(reference, test, k)
        assert [v.values for v in fast] == [v.values for v in slow], trial
        for vec in fast:
            check_coupling(vec)


@pytest.mark.acceptance(
    "A06", "detector numerics: EM monotonicity, BIC parsimony, "
           "boundary-fraction property"
)
def test_detector_numerics():
    for trial in range(100):
        rng = np.random.default_rng([SEED, 60, trial])
        comps = int(rng.integers(1, 5))
        n = int(rng.integers(40, 200))
        dim = int(rng.integers(2, 6))
        x = rng.standard_normal((n, dim))
        x[: n // 2] += rng.uniform(0, 4)
        model = fit_gmm_em(x, comps, seed=trial)
        diffs = np.diff(model.loglik_path)
        assert (diffs >= -1e-9).all(), (trial, diffs.min())

    rng = np.random.default_rng([SEED, 61])
    blob = rng.standard_normal((500, 4))
    assert select_gmm_bic(blob, seed=0).n_components == 1

    rng = np.random.default_rng([SEED, 62])
    x = rng.standard_normal((400, 4))
    for nu in OCSVM_NU_GRID:
        model = fit_ocsvm(x, nu=nu)
        outlier_frac = float((model.decision(x) < 0.0).mean())
        sv_frac = model.support_vectors.shape[0] / x.shape[0]
        assert outlier_frac <= nu + 0.02, (nu, outlier_frac)
        assert sv_frac >= nu - 0.02, (nu, sv_frac)


@pytest.mark.acceptance(
    "A07", "end-to-end synthetic detection: AUROC >= 0.95, FPR@95 <= 0.30, "
           "full subset >= fallback subset"
)
def test_end_to_end_synthetic_detection():
    t0 = time.monotonic()
    rng = np.random.default_rng(SEED)
    dim, m, sigma, k, n_views = 64, 2000, 0.05, 5, 8
    centers = rng.standard_normal((3, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    view_ids = [f"enc{i}" for i in range(n_views)]

    def make_views(count, assign, shift=0.0):
        views = []
        for vid in view_ids:
            rows = (centers[assign] + shift
                    + sigma * rng.standard_normal((count, dim)))
            rows /= np.linalg.norm(rows, axis=1, keepdims=True)
            views.append(EmbeddingView(vid, rows.astype(np.float32),
                                       normalized=True))
        return views

    train = make_views(m, rng.integers(0, 3, size=m))
    split = split_reference(m, 7)
    indexes, cal_views = [], []
    for view in train:
        indexes.append(build_index(
            EmbeddingView(view.view_id, view.rows[split.half_a],
                          normalized=True), [k]))
        cal_views.append(EmbeddingView(view.view_id,
                                       view.rows[split.half_b],
                                       normalized=True))

    def features(views, subset):
        return feature_matrix(compute_prdc_batch(
            indexes, MultiViewDataset(views=views), [k], subset))

    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    id_views = make_views(1000, rng.integers(0, 3, size=1000))
    ood_views = make_views(500, np.zeros(500, dtype=int),
                           shift=3 * sigma * direction)

    results = {}
    for subset in (FeatureSubset.FULL, FeatureSubset.PD):
        cal_feats = features(cal_views, subset)
        model = select_gmm_bic(cal_feats, seed=0)
        cal = calibrate(anomaly_score(model, cal_feats))
        scores = LabeledScores(
            id_scores=normalize_score(
                cal, anomaly_score(model, features(id_views, subset))),
            ood_scores=normalize_score(
                cal, anomaly_score(model, features(ood_views, subset))),
        )
        results[subset] = (auroc(scores), fpr_at_95_tpr(scores))

    full_auroc, full_fpr = results[FeatureSubset.FULL]
    pd_auroc, _ = results[FeatureSubset.PD]
    assert time.monotonic() - t0 <= 60.0
    assert full_auroc >= 0.95, full_auroc
    assert full_fpr <= 0.30, full_fpr
    assert full_auroc >= pd_auroc, (full_auroc, pd_auroc)


@pytest.mark.acceptance(
    "A08", "metric oracles: pairwise AUROC to 1e-12, exact FPR@95 "
           "enumeration, monotone invariance"
)
def test_metric_oracles():
    for trial in range(100):
        rng = np.random.default_rng([SEED, 80, trial])
        n_id = int(rng.integers(5, 501))
        n_ood = int(rng.integers(5, 501))
        ids = rng.standard_normal(n_id)
        oods = rng.standard_normal(n_ood) + rng.uniform(0, 1)
        if trial % 2:  # force heavy ties on half the instances
            ids = np.round(ids, 1)
            oods = np.round(oods, 1)
        s = LabeledScores(id_scores=ids, ood_scores=oods)

        wins = (oods[:, None] > ids[None, :]).sum()
        ties = (oods[:, None] == ids[None, :]).sum()
        pairwise = (wins + 0.5 * ties) / (n_id * n_ood)
        assert abs(auroc(s) - pairwise) <= 1e-12, trial

        best_t = None
        for t in np.unique(np.concatenate([oods, ids])):
            if (oods >= t).mean() >= 0.95:
                best_t = t if best_t is None else max(best_t, t)
        assert fpr_at_95_tpr(s) == float((ids >= best_t).mean()), trial

    for trial in range(10):
        rng = np.random.default_rng([SEED, 81, trial])
        ids = rng.standard_normal(200)
        oods = rng.standard_normal(150) + 0.5
        base = LabeledScores(id_scores=ids, ood_scores=oods)
        for fn in (lambda v: 5.0 * v - 2.0, np.exp, np.arctan):
            warped = LabeledScores(id_scores=fn(ids), ood_scores=fn(oods))
            assert abs(auroc(warped) - auroc(base)) <= 1e-12
            assert fpr_at_95_tpr(warped) == fpr_at_95_tpr(base)


def _guardrail_trace(inject_marker):
    """Three streams, five words per step; one turns toxic at word 23."""
    import json

    last_step = {"alpha": 6, "mid": 8, "tail": 7}
    lines = []
    for step in range(9):
        for rid in ("alpha", "mid", "tail"):
            if step > last_step[rid]:
                continue
            body = " ".join(
                f"{rid}-{i}" for i in range(5 * step + 1, 5 * step + 6))
            if inject_marker and rid == "mid" and step == 4:
                parts = body.split()
                parts[2] = "<<TOXIC>>"  # word 23 of the stream
                body = " ".join(parts)
            record = {"step": step, "req": rid, "segment": " " + body}
            if step == last_step[rid]:
                record["engine_finish"] = "stop"
            lines.append(json.dumps(record))
    return lines


@pytest.mark.acceptance(
    "A09", "streaming guardrail: bounded abort latency, clean-trace "
           "coverage, deterministic replay"
)
def test_streaming_guardrail_contract():
    config = SchedulerConfig(interval_words=20, min_batch_size=2,
                             near_slack_words=5,
                             fallback=FallbackPolicy.REDUCED_BATCH)
    interval, words_per_step = 20, 5

    result = run_simulation(_guardrail_trace(True), MarkerScorer(), config)
    finals = {f.req_id: f for f in result.finals}
    assert result.summary["aborts"] == 1
    assert finals["mid"].reason == "abort"
    abort_record = next(s for s in result.scored
                        if s["req_id"] == "mid" and s["label"] == 0)
    # zero post-abort text: the final text stops at the abort checkpoint
    assert finals["mid"].word_count == abort_record["word_count"]
    assert "mid-41" not in finals["mid"].text
    assert result.summary["mean_abort_latency_words"] <= (
        interval + words_per_step
    )

    clean = run_simulation(_guardrail_trace(False), MarkerScorer(), config)
    assert clean.summary["aborts"] == 0
    for rid in ("alpha", "mid", "tail"):
        scored_at = [s["word_count"] for s in clean.scored
                     if s["req_id"] == rid]
        final = next(f for f in clean.finals if f.req_id == rid)
        checkpoints = [0] + scored_at + [final.word_count]
        gaps = np.diff(checkpoints)
        assert (gaps <= interval + words_per_step).all(), (rid, checkpoints)

    again = run_simulation(_guardrail_trace(True), MarkerScorer(), config)
    assert again.decisions == result.decisions
    assert again.scored == result.scored
    assert [f.to_json_dict() for f in again.finals] == [
        f.to_json_dict() for f in result.finals]


@pytest.mark.acceptance(
    "A10", "linear cost scaling in reference size and batch size"
)
def test_complexity_scaling():
    def bench(m, n, reps=5):
        rng = np.random.default_rng([SEED, 100])
        k, dim = 5, 16
        index = build_index(
            EmbeddingView("v", unit_rows(rng, m, dim), normalized=True), [k])
        batch = MultiViewDataset(views=[
            EmbeddingView("v", unit_rows(rng, n, dim), normalized=True)])
        compute_prdc_batch([index], batch, [k])  # warmup
        best = math.inf
        for _ in range(reps):
            t0 = time.perf_counter()
            compute_prdc_batch([index], batch, [k])
            best = min(best, time.perf_counter() - t0)
        return best

    base = bench(4000, 500)
    double_m = bench(8000, 500)
    double_n = bench(4000, 1000)
    per_query_ratio = (double_m / 500) / (base / 500)
    batch_ratio = double_n / base
    assert 1.5 <= per_query_ratio <= 2.5, per_query_ratio
    assert 1.5 <= batch_ratio <= 2.5, batch_ratio
