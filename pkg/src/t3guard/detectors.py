"""Density detectors fitted on in-distribution feature vectors.

Two model families, both trained on safe data only: a full-covariance
Gaussian mixture fitted by EM with BIC component selection, and a
one-class SVM with RBF kernel solved in its dual by pairwise coordinate
updates.  Raw anomaly scores (negative log-likelihood, or negated SVM
decision value) are squashed to (0,1) by a sigmoid centered on the
training-score mean.  Several fitted detectors travel together in a JSON
bundle: one per (model kind, feature subset), so a scoring batch too small
for recall/coverage features can fall back to the precision/density model
instead of zero-filling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, logsumexp

from .errors import DimensionError, FormatError, ParameterError

BUNDLE_VERSION = 1

GMM_COMPONENT_GRID = (1, 2, 4, 8, 16, 32, 64)
OCSVM_NU_GRID = (0.01, 0.05, 0.1, 0.2, 0.5)

_LOG_2PI = math.log(2.0 * math.pi)


def _as_matrix(features: np.ndarray, what: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.ndim != 2 or x.shape[0] == 0:
        raise ParameterError(f"{what}: expected a non-empty 2-d feature array")
    if not np.isfinite(x).all():
        raise ParameterError(f"{what}: features contain non-finite values")
    return x


def _ridged(cov: np.ndarray) -> np.ndarray:
    """Add the scaled ridge to the diagonal so Cholesky always succeeds.

    The ridge is 1e-6 of the mean diagonal mass; a cluster of identical
    points has zero trace, so an absolute floor keeps the matrix SPD there
    too (fitting must never fail on degenerate data).
    """
    f = cov.shape[0]
    scale = 1e-6 * float(np.trace(cov)) / f
    if scale <= 1e-18:
        scale = 1e-12
    out = cov.copy()
    out[np.diag_indices(f)] += scale
    return out


@dataclass
class GmmModel:
    """Full-covariance Gaussian mixture with its EM training trajectory."""

    n_components: int
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    train_loglik: float
    seed: int
    loglik_path: list[float] = field(default_factory=list)
    _chols: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_features(self) -> int:
        return int(self.means.shape[1])

    def _cholesky_factors(self) -> np.ndarray:
        if self._chols is None:
            self._chols = np.linalg.cholesky(self.covariances)
        return self._chols

    def component_logpdf(self, x: np.ndarray) -> np.ndarray:
        """(n, n_components) log N(x; mu_c, Sigma_c)."""
        x = _as_matrix(x, "gmm input")
        if x.shape[1] != self.n_features:
            raise DimensionError(
                f"feature length {x.shape[1]} does not match model "
                f"dimension {self.n_features}"
            )
        n, f = x.shape
        chols = self._cholesky_factors()
        out = np.empty((n, self.n_components))
        for c in range(self.n_components):
            centered = x - self.means[c]
            # solve L z = centered^T; quad form = |z|^2
            z = solve_triangular(chols[c], centered.T, lower=True)
            quad = np.einsum("ij,ij->j", z, z)
            logdet = 2.0 * np.log(np.diag(chols[c])).sum()
            out[:, c] = -0.5 * (f * _LOG_2PI + logdet + quad)
        return out

    def log_density(self, x: np.ndarray) -> np.ndarray:
        comp = self.component_logpdf(x)
        return logsumexp(comp + np.log(self.weights)[None, :], axis=1)

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        comp = self.component_logpdf(x) + np.log(self.weights)[None, :]
        comp -= logsumexp(comp, axis=1, keepdims=True)
        return np.exp(comp)

    def bic(self, count: int) -> float:
        f = self.n_features
        p = (self.n_components - 1) + self.n_components * f \
            + self.n_components * f * (f + 1) // 2
        return -2.0 * self.train_loglik + p * math.log(count)


def _kmeanspp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Distance-weighted center seeding; degenerates gracefully on duplicates."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    sq = np.sum((x - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = sq.sum()
        if total <= 0.0:
            centers[c:] = centers[0]
            break
        probs = sq / total
        centers[c] = x[rng.choice(n, p=probs)]
        sq = np.minimum(sq, np.sum((x - centers[c]) ** 2, axis=1))
    return centers


def fit_gmm_em(
    features: np.ndarray,
    n_components: int,
    seed: int,
    max_iter: int = 200,
    tol: float = 1e-6,
) -> GmmModel:
    """EM for a full-covariance mixture, deterministic for a fixed seed.

    Initialization is distance-weighted center seeding plus a hard
    assignment pass.  The recorded log-likelihood path is non-decreasing
    up to a 1e-9 slack (the covariance ridge perturbs the exact M-step by
    a second-order amount).
    """
    x = _as_matrix(features, "gmm training set")
    n, f = x.shape
    n_components = int(n_components)
    if n_components < 1:
        raise ParameterError(f"n_components must be >= 1, got {n_components}")
    if n_components > n:
        raise ParameterError(
            f"n_components={n_components} exceeds training count {n}"
        )
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_centers(x, n_components, rng)

    # hard-assignment initialization
    sq = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    assign = np.argmin(sq, axis=1)
    weights = np.empty(n_components)
    means = np.empty((n_components, f))
    covs = np.empty((n_components, f, f))
    global_cov = _ridged(np.atleast_2d(np.cov(x, rowvar=False, bias=True)))
    for c in range(n_components):
        members = x[assign == c]
        weights[c] = max(len(members), 1) / n
        if len(members):
            means[c] = members.mean(axis=0)
            centered = members - means[c]
            covs[c] = _ridged(centered.T @ centered / len(members))
        else:
            means[c] = centers[c]
            covs[c] = global_cov
    weights /= weights.sum()

    model = GmmModel(
        n_components=n_components, weights=weights, means=means,
        covariances=covs, train_loglik=-np.inf, seed=int(seed),
    )
    loglik_path: list[float] = []
    prev = -np.inf
    for _ in range(max_iter):
        # E step
        comp = model.component_logpdf(x) + np.log(model.weights)[None, :]
        norm = logsumexp(comp, axis=1)
        loglik = float(norm.sum())
        loglik_path.append(loglik)
        resp = np.exp(comp - norm[:, None])
        if np.isfinite(prev) and abs(loglik - prev) <= tol * abs(loglik):
            break
        prev = loglik
        # M step
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-300)
        new_weights = nk / n
        new_means = (resp.T @ x) / nk[:, None]
        new_covs = np.empty_like(covs)
        for c in range(n_components):
            centered = x - new_means[c]
            scatter = (resp[:, c][:, None] * centered).T @ centered / nk[c]
            new_covs[c] = _ridged(scatter)
        model = GmmModel(
            n_components=n_components, weights=new_weights / new_weights.sum(),
            means=new_means, covariances=new_covs,
            train_loglik=loglik, seed=int(seed),
        )
    model.train_loglik = loglik_path[-1]
    model.loglik_path = loglik_path
    return model


def select_gmm_bic(
    features: np.ndarray,
    component_grid=GMM_COMPONENT_GRID,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-6,
) -> GmmModel:
    """Fit the grid (entries capped at the sample count) and keep lowest BIC.

    Grid order is ascending and only a strictly lower BIC displaces the
    incumbent, so exact ties go to the smaller component count.
    """
    x = _as_matrix(features, "gmm training set")
    n = x.shape[0]
    grid = sorted({int(c) for c in component_grid if int(c) <= n})
    if not grid:
        raise ParameterError(
            f"no component count in {tuple(component_grid)} fits {n} samples"
        )
    best: GmmModel | None = None
    best_bic = math.inf
    for c in grid:
        model = fit_gmm_em(x, c, seed=seed, max_iter=max_iter, tol=tol)
        bic = model.bic(n)
        if bic < best_bic:
            best, best_bic = model, bic
    assert best is not None
    return best


@dataclass
class OcsvmModel:
    """RBF one-class SVM: decision(x) = sum_s a_s exp(-gamma |x-v_s|^2) - rho.

    Dual coefficients are positive, sum to 1, and each is capped at
    1/(nu * L) where L was the training count.
    """

    support_vectors: np.ndarray
    dual_coefs: np.ndarray
    rho: float
    gamma: float
    nu: float

    @property
    def n_features(self) -> int:
        return int(self.support_vectors.shape[1])

    def decision(self, x: np.ndarray) -> np.ndarray:
        x = _as_matrix(x, "ocsvm input")
        if x.shape[1] != self.n_features:
            raise DimensionError(
                f"feature length {x.shape[1]} does not match model "
                f"dimension {self.n_features}"
            )
        sq = (
            np.sum(x ** 2, axis=1)[:, None]
            + np.sum(self.support_vectors ** 2, axis=1)[None, :]
            - 2.0 * x @ self.support_vectors.T
        )
        np.maximum(sq, 0.0, out=sq)
        kernel = np.exp(-self.gamma * sq)
        return kernel @ self.dual_coefs - self.rho


def default_gamma(features: np.ndarray) -> float:
    """1 / (F * var), the usual scale heuristic; safe on constant input."""
    x = _as_matrix(features, "gamma heuristic")
    var = float(x.var())
    return 1.0 / (x.shape[1] * max(var, 1e-12))


def fit_ocsvm(
    features: np.ndarray,
    nu: float,
    gamma: float | None = None,
    tol: float = 1e-6,
    max_iter: int | None = None,
) -> OcsvmModel:
    """Solve the one-class dual by maximal-violating-pair updates.

    Minimizes 0.5 a^T K a subject to sum(a) = 1 and 0 <= a_i <= 1/(nu L).
    Each step moves mass between the highest-gradient giver and the
    lowest-gradient taker; the certificate gap at exit is far inside the
    1e-4 decision tolerance the scorer promises.
    """
    x = _as_matrix(features, "ocsvm training set")
    n = x.shape[0]
    nu = float(nu)
    if not 0.0 < nu < 1.0:
        raise ParameterError(f"nu must lie in (0,1), got {nu}")
    if gamma is None:
        gamma = default_gamma(x)
    gamma = float(gamma)
    if gamma <= 0.0:
        raise ParameterError(f"gamma must be positive, got {gamma}")

    cap = 1.0 / (nu * n)
    sq = (
        np.sum(x ** 2, axis=1)[:, None]
        + np.sum(x ** 2, axis=1)[None, :]
        - 2.0 * x @ x.T
    )
    np.maximum(sq, 0.0, out=sq)
    gram = np.exp(-gamma * sq)

    alpha = np.full(n, 1.0 / n)
    grad = gram @ alpha
    if max_iter is None:
        max_iter = max(2000, 60 * n)
    for _ in range(max_iter):
        can_give = alpha > 0.0
        can_take = alpha < cap
        i = int(np.argmax(np.where(can_give, grad, -np.inf)))
        j = int(np.argmin(np.where(can_take, grad, np.inf)))
        violation = grad[i] - grad[j]
        if violation <= tol:
            break
        curve = gram[i, i] + gram[j, j] - 2.0 * gram[i, j]
        step = violation / curve if curve > 1e-12 else np.inf
        step = min(step, alpha[i], cap - alpha[j])
        if step <= 0.0:
            break
        if step == alpha[i]:
            alpha[i] = 0.0
        else:
            alpha[i] -= step
        if cap - alpha[j] == step:
            alpha[j] = cap
        else:
            alpha[j] += step
        grad += step * (gram[:, j] - gram[:, i])

    free = (alpha > 0.0) & (alpha < cap)
    if free.any():
        # the smallest free gradient keeps every free vector's decision >= 0,
        # so only bound-constrained vectors (at most nu*count of them) can
        # land strictly inside the outlier region
        rho = float(grad[free].min())
    else:
        lower = float(grad[alpha >= cap].max()) if (alpha >= cap).any() else -np.inf
        upper = float(grad[alpha <= 0.0].min()) if (alpha <= 0.0).any() else np.inf
        if np.isfinite(lower) and np.isfinite(upper):
            rho = 0.5 * (lower + upper)
        elif np.isfinite(lower):
            rho = lower
        else:
            rho = float(np.mean(grad))

    sv = alpha > 0.0
    return OcsvmModel(
        support_vectors=x[sv].copy(),
        dual_coefs=alpha[sv].copy(),
        rho=rho,
        gamma=gamma,
        nu=nu,
    )


def select_ocsvm_nu(
    features_train: np.ndarray,
    features_val_id: np.ndarray,
    nu_grid=OCSVM_NU_GRID,
    gamma: float | None = None,
) -> OcsvmModel:
    """Pick the nu whose boundary accepts the most held-out safe points.

    Accuracy here is the in-distribution accept rate (decision >= 0) on
    the validation features; with no labeled harmful data that is the only
    accuracy available.  Grid ascends and ties keep the smaller nu.
    """
    val = _as_matrix(features_val_id, "ocsvm validation set")
    grid = sorted({float(v) for v in nu_grid})
    if not grid:
        raise ParameterError("empty nu grid")
    best: OcsvmModel | None = None
    best_acc = -1.0
    for nu in grid:
        model = fit_ocsvm(features_train, nu=nu, gamma=gamma)
        acc = float((model.decision(val) >= 0.0).mean())
        if acc > best_acc:
            best, best_acc = model, acc
    assert best is not None
    return best


def anomaly_score(model: GmmModel | OcsvmModel, features: np.ndarray) -> np.ndarray:
    """Raw anomaly scores, higher = more anomalous."""
    x = _as_matrix(features, "scoring input")
    if isinstance(model, GmmModel):
        return -model.log_density(x)
    if isinstance(model, OcsvmModel):
        return -model.decision(x)
    raise ParameterError(f"unknown model type {type(model).__name__}")


@dataclass(frozen=True)
class ScoreCalibration:
    """Standardization constants for the sigmoid squash."""

    mean_nll: float
    std_nll: float


def calibrate(raw_scores: np.ndarray) -> ScoreCalibration:
    raw = np.asarray(raw_scores, dtype=np.float64).ravel()
    if raw.size == 0:
        raise ParameterError("cannot calibrate on zero scores")
    return ScoreCalibration(
        mean_nll=float(raw.mean()),
        std_nll=float(max(raw.std(), 1e-9)),
    )


def normalize_score(cal: ScoreCalibration, raw) -> np.ndarray | float:
    raw_arr = np.asarray(raw, dtype=np.float64)
    out = expit((raw_arr - cal.mean_nll) / cal.std_nll)
    return float(out) if np.isscalar(raw) or raw_arr.ndim == 0 else out


def predict_label(normalized_score: float, threshold: float = 0.5) -> int:
    """1 = safe, 0 = toxic; a score exactly at threshold flags toxic."""
    return 1 if normalized_score < threshold else 0


def _subset_value(subset) -> str:
    """Feature-subset spellings ("full") and enum members both work."""
    return getattr(subset, "value", str(subset))


@dataclass
class DetectorEntry:
    kind: str            # "gmm" | "ocsvm"
    subset: str          # "full" | "rc" | "pd"
    model: GmmModel | OcsvmModel
    calibration: ScoreCalibration

    def __post_init__(self) -> None:
        self.subset = _subset_value(self.subset)


@dataclass
class DetectorBundle:
    """Everything cmd_score needs, persisted as one JSON document."""

    k_list: list[int]
    view_ids: list[str]
    entries: list[DetectorEntry]
    threshold: float = 0.5
    default_kind: str = "gmm"
    extras: dict = field(default_factory=dict)

    def find(self, kind: str, subset) -> DetectorEntry:
        wanted = _subset_value(subset)
        for entry in self.entries:
            if entry.kind == kind and entry.subset == wanted:
                return entry
        raise ParameterError(f"bundle has no ({kind}, {wanted}) detector")

    def has(self, kind: str, subset) -> bool:
        wanted = _subset_value(subset)
        return any(
            e.kind == kind and e.subset == wanted for e in self.entries
        )


def _model_to_dict(model: GmmModel | OcsvmModel) -> dict:
    if isinstance(model, GmmModel):
        return {
            "type": "gmm",
            "n_components": model.n_components,
            "weights": model.weights.tolist(),
            "means": model.means.tolist(),
            "covariances": model.covariances.tolist(),
            "train_loglik": model.train_loglik,
            "seed": model.seed,
        }
    return {
        "type": "ocsvm",
        "support_vectors": model.support_vectors.tolist(),
        "dual_coefs": model.dual_coefs.tolist(),
        "rho": model.rho,
        "gamma": model.gamma,
        "nu": model.nu,
    }


def _model_from_dict(doc: dict) -> GmmModel | OcsvmModel:
    if doc.get("type") == "gmm":
        return GmmModel(
            n_components=int(doc["n_components"]),
            weights=np.asarray(doc["weights"], dtype=np.float64),
            means=np.asarray(doc["means"], dtype=np.float64),
            covariances=np.asarray(doc["covariances"], dtype=np.float64),
            train_loglik=float(doc["train_loglik"]),
            seed=int(doc["seed"]),
        )
    if doc.get("type") == "ocsvm":
        return OcsvmModel(
            support_vectors=np.asarray(doc["support_vectors"], dtype=np.float64),
            dual_coefs=np.asarray(doc["dual_coefs"], dtype=np.float64),
            rho=float(doc["rho"]),
            gamma=float(doc["gamma"]),
            nu=float(doc["nu"]),
        )
    raise FormatError(f"unknown model type {doc.get('type')!r} in bundle")


def save_bundle(path: str | Path, bundle: DetectorBundle) -> None:
    doc = {
        "format_version": BUNDLE_VERSION,
        "k_list": [int(k) for k in bundle.k_list],
        "view_ids": list(bundle.view_ids),
        "threshold": bundle.threshold,
        "default_kind": bundle.default_kind,
        "extras": bundle.extras,
        "detectors": [
            {
                "kind": e.kind,
                "subset": _subset_value(e.subset),
                "model": _model_to_dict(e.model),
                "calibration": {
                    "mean_nll": e.calibration.mean_nll,
                    "std_nll": e.calibration.std_nll,
                },
            }
            for e in bundle.entries
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_bundle(path: str | Path) -> DetectorBundle:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bundle is not valid JSON: {exc}") from exc
    if doc.get("format_version") != BUNDLE_VERSION:
        raise FormatError(
            f"{path}: unsupported bundle version {doc.get('format_version')!r}"
        )
    entries = [
        DetectorEntry(
            kind=str(e["kind"]),
            subset=str(e["subset"]),
            model=_model_from_dict(e["model"]),
            calibration=ScoreCalibration(
                mean_nll=float(e["calibration"]["mean_nll"]),
                std_nll=float(e["calibration"]["std_nll"]),
            ),
        )
        for e in doc.get("detectors", [])
    ]
    return DetectorBundle(
        k_list=[int(k) for k in doc["k_list"]],
        view_ids=[str(v) for v in doc["view_ids"]],
        entries=entries,
        threshold=float(doc.get("threshold", 0.5)),
        default_kind=str(doc.get("default_kind", "gmm")),
        extras=dict(doc.get("extras", {})),
    )
