"""Throwaway end-to-end smoke run (not part of the test suite)."""
import json
import tempfile
from pathlib import Path

import numpy as np

import t3guard as tg

rng = np.random.default_rng(0)

# --- embeddings round trip
rows = rng.standard_normal((50, 16)).astype(np.float32)
view = tg.normalize_rows(tg.EmbeddingView("viewA", rows))
tmp = Path(tempfile.mkdtemp())
tg.save_embedding_file(tmp / "a.tge", view)
back = tg.load_embedding_file(tmp / "a.tge")
assert back.view_id == "viewA" and back.count == 50 and back.normalized
assert np.array_equal(back.rows, view.rows)
print("embedding round trip ok")

# --- index + prdc vs brute force
m, n, k = 120, 40, 3
x = rng.standard_normal((m, 8))
x /= np.linalg.norm(x, axis=1, keepdims=True)
y = rng.standard_normal((n, 8))
y /= np.linalg.norm(y, axis=1, keepdims=True)
xv = tg.EmbeddingView("v", x.astype(np.float32), normalized=True)
yv = tg.EmbeddingView("v", y.astype(np.float32), normalized=True)
index = tg.build_index(xv, [k])
fast = tg.compute_prdc_batch([index], tg.MultiViewDataset(views=[yv]), [k])
slow = tg.brute_force_prdc(xv.rows, yv.rows, k)
fast_arr = np.array([v.values for v in fast])
slow_arr = np.array([v.values for v in slow])
assert np.array_equal(fast_arr, slow_arr), (fast_arr[:3], slow_arr[:3])
for v in fast:
    tg.check_coupling(v)
print("prdc fast == brute force, coupling ok")

# --- index save/load
tg.save_index(tmp / "v.tgi", index)
loaded = tg.load_index(tmp / "v.tgi", view_id="v")
assert loaded.k_list == index.k_list
assert np.array_equal(loaded.vectors, index.vectors)
assert np.allclose(loaded.radii, index.radii, atol=1e-6)
print("index round trip ok")

# --- detectors
feats_id = rng.standard_normal((300, 4)) * 0.3
gmm = tg.select_gmm_bic(feats_id, (1, 2, 4), seed=1)
raw = tg.anomaly_score(gmm, feats_id)
cal = tg.calibrate(raw)
scores_id = tg.normalize_score(cal, raw)
feats_ood = rng.standard_normal((100, 4)) * 0.3 + 4.0
scores_ood = tg.normalize_score(cal, tg.anomaly_score(gmm, feats_ood))
assert scores_ood.mean() > scores_id.mean()
oc = tg.fit_ocsvm(feats_id, nu=0.1, gamma=tg.default_gamma(feats_id))
frac_out = float((oc.decision(feats_id) < 0).mean())
assert frac_out <= 0.12, frac_out
print("gmm + ocsvm ok; ocsvm outlier frac", frac_out)

# --- metrics
ls = tg.LabeledScores(id_scores=np.array([0.4, 0.9]),
                      ood_scores=np.array([0.6, 0.1]))
assert abs(tg.auroc(ls) - 0.25) < 1e-12, tg.auroc(ls)
big = tg.LabeledScores(id_scores=scores_id, ood_scores=scores_ood)
rep = tg.evaluate(big)
print("metrics ok; auroc on gaussian shift:", round(rep.auroc, 4))

# --- theory quick
checks = tg.verify_suite(seed=5, quick=True)
for c in checks:
    print(f"  {'PASS' if c['pass'] else 'FAIL'} {c['name']}: "
          f"observed={c['observed']!r} target={c['target']!r}")

# --- scheduler with marker scorer
lines = []
step = 0
for step in range(12):
    for rid in ("req-a", "req-b"):
        seg = " word" * 5
        if rid == "req-b" and step == 6:
            seg += " <<TOXIC>>"
        lines.append(json.dumps({"step": step, "req": rid, "segment": seg}))
lines.append(json.dumps({"step": 12, "req": "req-a", "segment": " end",
                         "engine_finish": "stop"}))
cfg = tg.SchedulerConfig(interval_words=20, min_batch_size=2,
                         near_slack_words=5, max_defer_rounds=1)
result = tg.run_simulation(lines, tg.MarkerScorer(), cfg)
print("simulation summary:", json.dumps(result.summary, indent=1))
assert result.summary["aborts"] == 1
finals = {f.req_id: f.reason for f in result.finals}
assert finals == {"req-a": "stop", "req-b": "abort"}, finals
print("scheduler ok")
print("ALL SMOKE OK")
