"""Command-line interface.

Subcommands
-----------
fit            split a reference corpus, build neighbor indexes, fit and
               calibrate detectors, write a bundle directory.
score          score a batch of embedded texts against a fitted bundle.
eval           compute detection metrics from two score files.
verify-theory  run the distributional checks and report observed vs target.
simulate       replay a generation trace through the streaming guardrail.

Every subcommand accepts ``--config PATH`` (a JSON file of defaults for
that subcommand); explicit flags override config values, which override
built-in defaults.  All randomness flows from ``--seed``.  Failures are
reported as one JSON object on stderr with exit code 2.  The environment
variable ``T3_LOG_LEVEL`` (error, info, debug) controls logging verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .detectors import (
    GMM_COMPONENT_GRID,
    OCSVM_NU_GRID,
    DetectorBundle,
    DetectorEntry,
    anomaly_score,
    calibrate,
    default_gamma,
    fit_gmm_em,
    fit_ocsvm,
    load_bundle,
    normalize_score,
    predict_label,
    save_bundle,
    select_gmm_bic,
    select_ocsvm_nu,
)
from .embedding_store import (
    EmbeddingView,
    MultiViewDataset,
    load_embedding_file,
    normalize_rows,
    read_sample_ids,
)
from .errors import AlignmentError, ParameterError, T3GuardError
from .evalkit import LabeledScores, evaluate, write_report
from .neighborhood import build_index, load_index, save_index, split_reference
from .prdc import (
    FeatureSubset,
    compute_prdc_batch,
    feature_matrix,
    write_feature_dump,
)
from .stream_guard import (
    FallbackPolicy,
    MarkerScorer,
    PipelineScorer,
    SchedulerConfig,
    run_simulation,
)
from . import theory

LOG = logging.getLogger("t3guard")
_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO,
               "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("T3_LOG_LEVEL", "error").lower()
    if name not in _LOG_LEVELS:
        raise ParameterError(
            f"T3_LOG_LEVEL must be one of {sorted(_LOG_LEVELS)}, got {name!r}"
        )
    logging.basicConfig(
        level=_LOG_LEVELS[name],
        format="%(levelname)s %(name)s: %(message)s",
    )


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParameterError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ParameterError(f"config {path} must hold a JSON object")
    return obj


def _pick(*values, default=None):
    """First non-None value wins: flag, then config, then default."""
    for value in values:
        if value is not None:
            return value
    return default


def _emit(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _load_views(specs: list, base: Path | None = None) -> list[EmbeddingView]:
    if not isinstance(specs, list) or not specs:
        raise ParameterError("'views' must be a non-empty list of "
                             "{'path': ..., 'view_id': optional} entries")
    views = []
    for spec in specs:
        if isinstance(spec, str):
            spec = {"path": spec}
        if not isinstance(spec, dict) or "path" not in spec:
            raise ParameterError(f"bad view entry {spec!r}; expected a path "
                                 "or an object with a 'path' key")
        path = Path(spec["path"])
        if base is not None and not path.is_absolute():
            path = base / path
        view = load_embedding_file(path)
        wanted = spec.get("view_id")
        if wanted is not None and wanted != view.view_id:
            raise AlignmentError(
                f"file {path} holds view {view.view_id!r}, "
                f"config expects {wanted!r}"
            )
        if not view.normalized:
            LOG.info("normalizing view %s (%d rows)", view.view_id, view.count)
            view = normalize_rows(view)
        view.validate()
        views.append(view)
    return views


# ------------------------------------------------------------------- fit
def _fit_detector(kind: str, feats: np.ndarray, seed: int, config: dict):
    if kind == "gmm":
        components = config.get("gmm", {}).get("components")
        if components is not None:
            return fit_gmm_em(feats, int(components), seed)
        return select_gmm_bic(feats, GMM_COMPONENT_GRID, seed)
    if kind == "ocsvm":
        opts = config.get("ocsvm", {})
        gamma = opts.get("gamma")
        gamma = float(gamma) if gamma is not None else default_gamma(feats)
        nu = opts.get("nu")
        if nu is not None:
            return fit_ocsvm(feats, float(nu), gamma)
        count = feats.shape[0]
        perm = np.random.default_rng([seed, 7]).permutation(count)
        cut = max(int(0.8 * count), 1)
        train, val = feats[perm[:cut]], feats[perm[cut:]]
        if val.shape[0] == 0:
            val = train
        picked = select_ocsvm_nu(train, val, OCSVM_NU_GRID, gamma)
        return fit_ocsvm(feats, picked.nu, gamma)
    raise ParameterError(f"unknown detector kind {kind!r}")


def _cmd_fit(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    base = Path(args.config).parent if args.config else None
    seed = int(_pick(args.seed, config.get("seed"), default=0))
    threshold = float(_pick(args.threshold, config.get("threshold"),
                            default=0.5))
    out_dir = _pick(args.out, config.get("out_dir"))
    if out_dir is None:
        raise ParameterError("fit needs an output directory (--out or "
                             "config 'out_dir')")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    k_list = [int(k) for k in config.get("k_list", [5])]
    kind_cfg = config.get("detector", "gmm")
    kinds = ["gmm", "ocsvm"] if kind_cfg == "both" else [kind_cfg]
    for kind in kinds:
        if kind not in ("gmm", "ocsvm"):
            raise ParameterError(f"unknown detector kind {kind!r}")

    views = _load_views(config.get("views"), base)
    MultiViewDataset(views=views)  # count/uniqueness validation
    count = views[0].count
    split = split_reference(count, seed)
    LOG.info("split %d rows into %d reference / %d calibration",
             count, split.half_a.size, split.half_b.size)

    indexes, index_paths, fit_views = [], {}, []
    for view in views:
        ref = EmbeddingView(view.view_id, view.rows[split.half_a],
                            normalized=True)
        fit_view = EmbeddingView(view.view_id, view.rows[split.half_b],
                                 normalized=True)
        index = build_index(ref, k_list, split_seed=seed,
                            counterpart_count=split.half_b.size)
        rel = f"index_{view.view_id}.tgi"
        save_index(out_dir / rel, index)
        indexes.append(index)
        index_paths[view.view_id] = rel
        fit_views.append(fit_view)

    fit_set = MultiViewDataset(views=fit_views)
    features = {}
    for subset in (FeatureSubset.FULL, FeatureSubset.PD):
        vectors = compute_prdc_batch(indexes, fit_set, k_list, subset)
        features[subset] = feature_matrix(vectors)

    entries, described = [], []
    for kind in kinds:
        for subset in (FeatureSubset.FULL, FeatureSubset.PD):
            feats = features[subset]
            LOG.info("fitting %s on %s features %s", kind, subset.value,
                     feats.shape)
            model = _fit_detector(kind, feats, seed, config)
            raw = anomaly_score(model, feats)
            cal = calibrate(raw)
            entries.append(DetectorEntry(kind=kind, subset=subset,
                                         model=model, calibration=cal))
            info = {"kind": kind, "subset": subset.value}
            if kind == "gmm":
                info["components"] = model.n_components
            else:
                info["nu"] = model.nu
            described.append(info)

    bundle = DetectorBundle(
        k_list=k_list,
        view_ids=[v.view_id for v in views],
        entries=entries,
        threshold=threshold,
        default_kind=kinds[0],
        extras={
            "index_paths": index_paths,
            "split_seed": seed,
            "reference_rows": int(split.half_a.size),
            "calibration_rows": int(split.half_b.size),
        },
    )
    bundle_path = out_dir / "bundle.json"
    save_bundle(bundle_path, bundle)

    _emit(
        {
            "bundle": str(bundle_path),
            "indexes": {vid: str(out_dir / rel)
                        for vid, rel in index_paths.items()},
            "k_list": k_list,
            "detectors": described,
            "reference_rows": int(split.half_a.size),
            "calibration_rows": int(split.half_b.size),
            "threshold": threshold,
        },
        None,
    )
    return 0


# ----------------------------------------------------------------- score
def _load_bundle_and_indexes(bundle_path: Path):
    bundle = load_bundle(bundle_path)
    index_paths = bundle.extras.get("index_paths", {})
    indexes = []
    for vid in bundle.view_ids:
        rel = index_paths.get(vid)
        if rel is None:
            raise ParameterError(
                f"bundle lists no index path for view {vid!r}"
            )
        path = Path(rel)
        if not path.is_absolute():
            path = bundle_path.parent / path
        indexes.append(load_index(path, view_id=vid))
    return bundle, indexes


def _cmd_score(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    base = Path(args.config).parent if args.config else None
    bundle_arg = _pick(args.bundle, config.get("bundle"))
    if bundle_arg is None:
        raise ParameterError("score needs --bundle or config 'bundle'")
    bundle, indexes = _load_bundle_and_indexes(Path(bundle_arg))
    threshold = float(_pick(args.threshold, config.get("threshold"),
                            default=bundle.threshold))

    view_specs = args.view or config.get("views")
    views = _load_views(view_specs, base)
    test_set = MultiViewDataset(views=views)
    if [v.view_id for v in views] != list(bundle.view_ids):
        raise AlignmentError(
            f"test views {[v.view_id for v in views]} do not match bundle "
            f"views {list(bundle.view_ids)}"
        )

    ids_path = _pick(args.ids, config.get("ids"))
    if ids_path is not None:
        ids = read_sample_ids(Path(ids_path))
        if len(ids) != views[0].count:
            raise AlignmentError(
                f"{len(ids)} sample ids for {views[0].count} embedded rows"
            )
    else:
        ids = [str(i) for i in range(views[0].count)]

    subset_arg = _pick(args.subset, config.get("subset"))
    k_max = max(bundle.k_list)
    fallback = False
    if subset_arg is not None:
        subset = FeatureSubset.parse(subset_arg)
    elif views[0].count >= k_max + 1:
        subset = FeatureSubset.FULL
    else:
        subset = FeatureSubset.PD
        fallback = True
        LOG.info("batch of %d is below k+1=%d; falling back to the "
                 "density/precision subset", views[0].count, k_max + 1)

    vectors = compute_prdc_batch(indexes, test_set, list(bundle.k_list),
                                 subset)
    feats = feature_matrix(vectors)
    entry = bundle.find(bundle.default_kind, subset)
    raw = anomaly_score(entry.model, feats)
    scores = np.atleast_1d(normalize_score(entry.calibration, raw))
    labels = [predict_label(float(s), threshold) for s in scores]

    records = [
        {
            "id": ids[i],
            "score": float(scores[i]),
            "label": labels[i],
            "subset": subset.value,
            "fallback": fallback,
        }
        for i in range(len(ids))
    ]
    out_path = _pick(args.out, config.get("out"))
    if out_path:
        path = Path(out_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    features_out = _pick(args.features_out, config.get("features_out"))
    if features_out:
        write_feature_dump(Path(features_out), ids, vectors)

    _emit(
        {
            "count": len(records),
            "flagged": int(sum(1 for r in records if r["label"] == 0)),
            "subset": subset.value,
            "fallback": fallback,
            "threshold": threshold,
            "mean_score": float(np.mean(scores)) if records else 0.0,
            "scores": None if out_path else records,
        },
        None,
    )
    return 0


# ------------------------------------------------------------------ eval
def _read_scores(path: Path) -> np.ndarray:
    values = []
    for lineno, line in enumerate(
        path.read_text(encoding="utf-8").splitlines(), start=1
    ):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParameterError(
                f"{path}:{lineno}: not a JSON value: {exc}"
            ) from exc
        if isinstance(obj, dict):
            if "score" not in obj:
                raise ParameterError(
                    f"{path}:{lineno}: object has no 'score' field"
                )
            values.append(float(obj["score"]))
        elif isinstance(obj, (int, float)) and not isinstance(obj, bool):
            values.append(float(obj))
        else:
            raise ParameterError(
                f"{path}:{lineno}: expected a number or an object with "
                f"'score', got {type(obj).__name__}"
            )
    if not values:
        raise ParameterError(f"{path} holds no scores")
    return np.asarray(values, dtype=np.float64)


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    id_path = _pick(args.id_scores, config.get("id_scores"))
    ood_path = _pick(args.ood_scores, config.get("ood_scores"))
    if id_path is None or ood_path is None:
        raise ParameterError("eval needs --id-scores and --ood-scores")
    scores = LabeledScores(
        id_scores=_read_scores(Path(id_path)),
        ood_scores=_read_scores(Path(ood_path)),
    )
    report = evaluate(scores)
    out_path = _pick(args.out, config.get("out"))
    if out_path:
        write_report(Path(out_path), report)
    print(json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
    return 0


# -------------------------------------------------------- verify-theory
def _cmd_verify_theory(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    seed = int(_pick(args.seed, config.get("seed"), default=20240601))
    quick = bool(args.quick or config.get("quick", False))
    checks = theory.verify_suite(seed=seed, quick=quick)
    passed = sum(1 for c in checks if c["pass"])
    _emit(
        {
            "seed": seed,
            "quick": quick,
            "passed": passed,
            "failed": len(checks) - passed,
            "checks": checks,
        },
        _pick(args.out, config.get("out")),
    )
    return 0


# -------------------------------------------------------------- simulate
def _cmd_simulate(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    trace = _pick(args.trace, config.get("trace"))
    if trace is None:
        raise ParameterError("simulate needs --trace or config 'trace'")

    sched_cfg = dict(config.get("scheduler", {}))
    overrides = {
        "interval_words": args.interval,
        "min_batch_size": args.min_batch,
        "near_slack_words": args.near_slack,
        "max_defer_rounds": args.max_defer,
        "threshold": args.threshold,
    }
    for key, value in overrides.items():
        if value is not None:
            sched_cfg[key] = value
    if args.fallback is not None:
        sched_cfg["fallback"] = args.fallback
    if "fallback" in sched_cfg and isinstance(sched_cfg["fallback"], str):
        sched_cfg["fallback"] = FallbackPolicy.parse(sched_cfg["fallback"])
    scheduler_config = SchedulerConfig(**sched_cfg)

    scorer_kind = _pick(args.scorer, config.get("scorer"), default="marker")
    if scorer_kind == "marker":
        marker = _pick(args.marker, config.get("marker"),
                       default="<<TOXIC>>")
        scorer = MarkerScorer(marker)
    elif scorer_kind == "pipeline":
        bundle_arg = _pick(args.bundle, config.get("bundle"))
        if bundle_arg is None:
            raise ParameterError("pipeline scorer needs --bundle")
        bundle, indexes = _load_bundle_and_indexes(Path(bundle_arg))
        scorer = PipelineScorer(bundle, indexes)
    else:
        raise ParameterError(
            f"unknown scorer {scorer_kind!r}; expected marker or pipeline"
        )

    result = run_simulation(trace, scorer, scheduler_config)
    out_path = _pick(args.out, config.get("out"))
    if out_path:
        path = Path(out_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(result.to_json_dict(), indent=2) + "\n",
            encoding="utf-8",
        )
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    return 0


# ------------------------------------------------------------------ main
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="t3guard",
        description="Typicality-based OOD scoring and streaming guardrail "
                    "tooling for text embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file with defaults")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--out", help="output path")

    p_fit = sub.add_parser("fit", help="fit detectors from embedding files")
    common(p_fit)
    p_fit.add_argument("--threshold", type=float,
                       help="abort threshold stored in the bundle")
    p_fit.set_defaults(func=_cmd_fit)

    p_score = sub.add_parser("score", help="score embedded texts")
    common(p_score)
    p_score.add_argument("--bundle", help="fitted bundle JSON")
    p_score.add_argument("--view", action="append",
                         help="embedding file for one view (repeatable)")
    p_score.add_argument("--ids", help="sample id sidecar JSONL")
    p_score.add_argument("--subset", choices=["full", "rc", "pd"],
                         help="feature subset override")
    p_score.add_argument("--threshold", type=float,
                         help="abort threshold override")
    p_score.add_argument("--features-out",
                         help="also dump per-point features as JSONL")
    p_score.set_defaults(func=_cmd_score)

    p_eval = sub.add_parser("eval", help="compute detection metrics")
    common(p_eval)
    p_eval.add_argument("--id-scores", help="scores for in-distribution "
                        "texts (JSONL or one float per line)")
    p_eval.add_argument("--ood-scores", help="scores for out-of-"
                        "distribution texts")
    p_eval.set_defaults(func=_cmd_eval)

    p_verify = sub.add_parser("verify-theory",
                              help="run the distributional checks")
    common(p_verify)
    p_verify.add_argument("--quick", action="store_true",
                          help="smaller samples for a fast smoke run")
    p_verify.set_defaults(func=_cmd_verify_theory)

    p_sim = sub.add_parser("simulate", help="replay a generation trace")
    common(p_sim)
    p_sim.add_argument("--trace", help="JSONL trace file")
    p_sim.add_argument("--scorer", choices=["marker", "pipeline"],
                       help="scorer backend (default marker)")
    p_sim.add_argument("--bundle", help="bundle for the pipeline scorer")
    p_sim.add_argument("--marker", help="toxic marker for the oracle scorer")
    p_sim.add_argument("--interval", type=int,
                       help="words between evaluations")
    p_sim.add_argument("--min-batch", type=int, help="minimum batch size")
    p_sim.add_argument("--near-slack", type=int,
                       help="near-threshold slack in words")
    p_sim.add_argument("--max-defer", type=int,
                       help="defer rounds before a forced fire")
    p_sim.add_argument("--fallback", choices=["defer", "reduced_batch"],
                       help="short-batch policy")
    p_sim.add_argument("--threshold", type=float, help="abort threshold")
    p_sim.set_defaults(func=_cmd_simulate)

    return parser


def run(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except T3GuardError as exc:
        sys.stderr.write(json.dumps(exc.to_json_dict()) + "\n")
        return 2
    except OSError as exc:
        sys.stderr.write(
            json.dumps({"error": "io", "message": str(exc)}) + "\n"
        )
        return 2


if __name__ == "__main__":
    sys.exit(main())
