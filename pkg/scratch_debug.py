"""Debug the inverted AUROC in the CLI round trip."""
import numpy as np
import t3guard as tg
from t3guard.prdc import FeatureSubset

rng = np.random.default_rng(42)
d, m_id = 32, 600
centers = rng.standard_normal((3, d))
centers /= np.linalg.norm(centers, axis=1, keepdims=True)


def make(count, shift=0.0, seed=0):
    r = np.random.default_rng(seed)
    assign = r.integers(0, 3, size=count)
    pts = centers[assign] + 0.05 * r.standard_normal((count, d)) + shift
    return pts.astype(np.float32)


views = {}
for tag, count, shift, seed in (
    ("train", m_id, 0.0, 1),
    ("id_test", 200, 0.0, 2),
    ("ood_test", 200, 0.35, 3),
):
    vs = []
    for view_seed, vid in ((10, "va"),):
        r = np.random.default_rng([seed, view_seed])
        pts = make(count, shift, seed) + 0.01 * r.standard_normal((count, d)).astype(np.float32)
        vs.append(tg.normalize_rows(tg.EmbeddingView(vid, pts)))
    views[tag] = vs

k_list = [3]
split = tg.split_reference(views["train"][0].count, 7)
ref = tg.EmbeddingView("va", views["train"][0].rows[split.half_a], normalized=True)
cal_view = tg.EmbeddingView("va", views["train"][0].rows[split.half_b], normalized=True)
index = tg.build_index(ref, k_list, split_seed=7, counterpart_count=split.half_b.size)

fit_vecs = tg.compute_prdc_batch([index], tg.MultiViewDataset(views=[cal_view]), k_list)
fit_mat = tg.feature_matrix(fit_vecs)
print("fit features: shape", fit_mat.shape)
print("fit feature means:", fit_mat.mean(axis=0))
print("fit feature stds:", fit_mat.std(axis=0))

id_vecs = tg.compute_prdc_batch([index], tg.MultiViewDataset(views=[views["id_test"][0]]), k_list)
ood_vecs = tg.compute_prdc_batch([index], tg.MultiViewDataset(views=[views["ood_test"][0]]), k_list)
id_mat, ood_mat = tg.feature_matrix(id_vecs), tg.feature_matrix(ood_vecs)
print("id feature means:", id_mat.mean(axis=0))
print("ood feature means:", ood_mat.mean(axis=0))

from t3guard.detectors import GMM_COMPONENT_GRID
gmm = tg.select_gmm_bic(fit_mat, GMM_COMPONENT_GRID, seed=7)
print("gmm components:", gmm.n_components)
raw_fit = tg.anomaly_score(gmm, fit_mat)
raw_id = tg.anomaly_score(gmm, id_mat)
raw_ood = tg.anomaly_score(gmm, ood_mat)
print("raw NLL fit mean/std:", raw_fit.mean(), raw_fit.std())
print("raw NLL id mean:", raw_id.mean(), "raw NLL ood mean:", raw_ood.mean())
cal = tg.calibrate(raw_fit)
s_id = tg.normalize_score(cal, raw_id)
s_ood = tg.normalize_score(cal, raw_ood)
print("normalized id mean:", np.mean(s_id), "ood mean:", np.mean(s_ood))
ls = tg.LabeledScores(id_scores=np.asarray(s_id), ood_scores=np.asarray(s_ood))
print("auroc:", tg.auroc(ls))
