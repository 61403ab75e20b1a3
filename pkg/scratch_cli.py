"""Throwaway CLI round-trip smoke (not part of the test suite)."""
import json
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

import t3guard as tg

tmp = Path(tempfile.mkdtemp())
rng = np.random.default_rng(42)

# Two views: ID = 3 clusters on the sphere; OOD = shifted cluster.
d, m_id, n_ood = 32, 600, 200
centers = rng.standard_normal((3, d))
centers /= np.linalg.norm(centers, axis=1, keepdims=True)


def make(count, shift=0.0, seed=0):
    r = np.random.default_rng(seed)
    assign = r.integers(0, 3, size=count)
    pts = centers[assign] + 0.05 * r.standard_normal((count, d)) + shift
    return pts.astype(np.float32)


for tag, count, shift, seed in (
    ("train", m_id, 0.0, 1),
    ("id_test", 200, 0.0, 2),
    ("ood_test", n_ood, 1.0, 3),
):
    for view_seed, vid in ((10, "va"), (20, "vb")):
        r = np.random.default_rng([seed, view_seed])
        pts = make(count, shift, seed) + 0.01 * r.standard_normal((count, d)).astype(np.float32)
        view = tg.normalize_rows(tg.EmbeddingView(vid, pts))
        tg.save_embedding_file(tmp / f"{tag}_{vid}.tge", view)

fit_cfg = {
    "views": [
        {"view_id": "va", "path": str(tmp / "train_va.tge")},
        {"view_id": "vb", "path": str(tmp / "train_vb.tge")},
    ],
    "k_list": [5],
    "detector": "gmm",
    "out_dir": str(tmp / "model"),
    "seed": 7,
}
(tmp / "fit.json").write_text(json.dumps(fit_cfg))


def cli(*argv):
    proc = subprocess.run(
        [sys.executable, "-m", "t3guard.cli", *argv],
        capture_output=True, text=True,
    )
    print("$ t3guard", " ".join(argv))
    if proc.returncode != 0:
        print("STDOUT:", proc.stdout)
        print("STDERR:", proc.stderr)
        raise SystemExit(f"exit {proc.returncode}")
    return proc.stdout


out = cli("fit", "--config", str(tmp / "fit.json"))
print(out)

for tag in ("id_test", "ood_test"):
    cli(
        "score", "--bundle", str(tmp / "model/bundle.json"),
        "--view", str(tmp / f"{tag}_va.tge"),
        "--view", str(tmp / f"{tag}_vb.tge"),
        "--out", str(tmp / f"{tag}_scores.jsonl"),
    )

out = cli(
    "eval",
    "--id-scores", str(tmp / "id_test_scores.jsonl"),
    "--ood-scores", str(tmp / "ood_test_scores.jsonl"),
)
report = json.loads(out)
print("eval:", json.dumps(report))
assert report["auroc"] > 0.9, report

# trace simulation via CLI with marker scorer
lines = []
for step in range(10):
    for rid in ("r1", "r2", "r3"):
        seg = " tok" * 6 + (" <<TOXIC>>" if rid == "r2" and step == 4 else "")
        lines.append(json.dumps({"step": step, "req": rid, "segment": seg}))
trace_path = tmp / "trace.jsonl"
trace_path.write_text("\n".join(lines) + "\n")
out = cli("simulate", "--trace", str(trace_path), "--min-batch", "3",
          "--out", str(tmp / "sim.json"))
summary = json.loads(out)
print("simulate:", json.dumps(summary))
assert summary["aborts"] == 1

# error path: missing file -> JSON on stderr, exit 2
proc = subprocess.run(
    [sys.executable, "-m", "t3guard.cli", "score", "--bundle", "/nope.json",
     "--view", "/nope.tge"],
    capture_output=True, text=True,
)
assert proc.returncode == 2, proc.returncode
err = json.loads(proc.stderr)
print("error path:", err)
assert "error" in err and "message" in err

# PD fallback on a tiny batch (below k+1)
small = tmp / "small"
small.mkdir()
for vid in ("va", "vb"):
    src = tg.load_embedding_file(tmp / f"id_test_{vid}.tge")
    tiny = tg.EmbeddingView(vid, src.rows[:2], normalized=True)
    tg.save_embedding_file(small / f"{vid}.tge", tiny)
out = cli("score", "--bundle", str(tmp / "model/bundle.json"),
          "--view", str(small / "va.tge"), "--view", str(small / "vb.tge"))
res = json.loads(out)
assert res["subset"] == "pd" and res["fallback"] is True, res
print("pd fallback ok")
print("CLI SMOKE OK")
