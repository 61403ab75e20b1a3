"""Per-point typicality features against a reference sample.

For a test point y and a reference half X indexed by ``neighborhood``:

* precision: does y land inside any reference point's k-NN ball,
* density: what fraction of the m*k possible ball memberships y collects,
* recall: what fraction of reference points land inside y's own k-NN ball
  (the ball radius taken within the scoring batch itself),
* coverage: did at least one reference point land inside that ball.

Each feature is computed per (view, k) pair and concatenated in view-major,
k-ascending order as [recall, density, precision, coverage] blocks.  The
recall/coverage half needs a batch of at least max(k)+1 points; the
documented fallback for smaller batches is the precision/density subset,
scored by its own separately fitted detector.  A brute-force oracle with
the same contract backs the fast path in tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .embedding_store import MultiViewDataset
from .errors import (
    AlignmentError,
    BatchTooSmallError,
    ParameterError,
    ValidationError,
)
from .neighborhood import ReferenceIndex, pairwise_sq_dists, test_set_radii


class FeatureSubset(Enum):
    FULL = "full"
    RC = "rc"
    PD = "pd"

    @classmethod
    def parse(cls, name: str) -> "FeatureSubset":
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ParameterError(
                f"unknown feature subset {name!r}; expected full, rc, or pd"
            ) from None


# slot order within one (view, k) block, full layout
_BLOCK = ("recall", "density", "precision", "coverage")

_SUBSET_SLOTS = {
    FeatureSubset.FULL: ("recall", "density", "precision", "coverage"),
    FeatureSubset.RC: ("recall", "coverage"),
    FeatureSubset.PD: ("density", "precision"),
}


def subset_length(subset: FeatureSubset, n_views: int, n_k: int) -> int:
    return len(_SUBSET_SLOTS[subset]) * n_views * n_k


@dataclass(frozen=True)
class PrdcVector:
    """Feature vector of one test point.

    values holds len(slots) floats per (view, k) pair, view-major and k
    ascending; m_used is the reference-half size the counts were divided by.
    """

    values: tuple[float, ...]
    m_used: int
    k_list: tuple[int, ...]
    subset: FeatureSubset

    def __post_init__(self) -> None:
        per_block = len(_SUBSET_SLOTS[self.subset])
        if len(self.values) % (per_block * len(self.k_list)) != 0:
            raise AlignmentError(
                f"{len(self.values)} values do not tile {per_block} slots "
                f"x {len(self.k_list)} k values"
            )

    @property
    def n_views(self) -> int:
        per_block = len(_SUBSET_SLOTS[self.subset])
        return len(self.values) // (per_block * len(self.k_list))


def _block_values(
    subset: FeatureSubset,
    recall: float,
    density: float,
    precision: float,
    coverage: float,
) -> tuple[float, ...]:
    full = {"recall": recall, "density": density,
            "precision": precision, "coverage": coverage}
    return tuple(full[slot] for slot in _SUBSET_SLOTS[subset])


def compute_prdc_batch(
    indexes: list[ReferenceIndex],
    test: MultiViewDataset,
    k_list,
    subset: FeatureSubset = FeatureSubset.FULL,
) -> list[PrdcVector]:
    """Score a test batch against one reference index per view.

    Indexes must line up with test.views by position and view_id.  With
    subset FULL or RC the batch must hold at least max(k_list)+1 points so
    within-batch ball radii exist; otherwise ``BatchTooSmallError`` points
    the caller at the PD fallback.
    """
    ks = [int(k) for k in k_list]
    if not ks or sorted(set(ks)) != ks:
        raise ParameterError(f"k_list must be sorted, unique, non-empty: {k_list}")
    if len(indexes) != len(test.views):
        raise AlignmentError(
            f"{len(indexes)} indexes for {len(test.views)} test views"
        )
    for index, view in zip(indexes, test.views):
        if index.view_id != view.view_id:
            raise AlignmentError(
                f"index view {index.view_id!r} paired with test view {view.view_id!r}"
            )
        if index.dim != view.dim:
            raise AlignmentError(
                f"view {view.view_id!r}: index dim {index.dim} vs test dim {view.dim}"
            )
        if not view.normalized:
            raise ValidationError(
                f"test view {view.view_id!r} is not marked normalized; "
                "normalize_rows it first"
            )
        missing = [k for k in ks if k not in index.k_list]
        if missing:
            raise ParameterError(
                f"index for view {index.view_id!r} lacks k={missing}"
            )
    n = test.count
    needs_radii = subset in (FeatureSubset.FULL, FeatureSubset.RC)
    kmax = max(ks)
    if needs_radii and n < kmax + 1:
        raise BatchTooSmallError(
            f"batch of {n} cannot compute recall/coverage at k={kmax}; "
            f"need at least {kmax + 1} points, or defer, or use the PD subset",
            required=kmax + 1,
        )
    m = indexes[0].count

    per_point: list[list[float]] = [[] for _ in range(n)]
    for index, view in zip(indexes, test.views):
        rows64 = view.rows.astype(np.float64)
        sq_to_ref = pairwise_sq_dists(rows64, index.vectors)  # n x m
        if needs_radii:
            radii_cols = {k: test_set_radii(rows64, k) for k in ks}
        for k in ks:
            col = index.k_list.index(k)
            inside_ref = sq_to_ref <= (index.radii[:, col] ** 2)[None, :]
            counts = inside_ref.sum(axis=1)
            density = counts / (index.count * k)
            precision = (counts > 0).astype(np.float64)
            if needs_radii:
                rho = radii_cols[k]
                rec_counts = (sq_to_ref <= (rho ** 2)[:, None]).sum(axis=1)
                recall = rec_counts / index.count
                coverage = (rec_counts > 0).astype(np.float64)
            else:
                recall = np.zeros(n)
                coverage = np.zeros(n)
            for j in range(n):
                per_point[j].extend(_block_values(
                    subset,
                    float(recall[j]), float(density[j]),
                    float(precision[j]), float(coverage[j]),
                ))
    return [
        PrdcVector(values=tuple(vals), m_used=m, k_list=tuple(ks), subset=subset)
        for vals in per_point
    ]


def brute_force_prdc(
    reference: np.ndarray, test: np.ndarray, k: int
) -> list[PrdcVector]:
    """Direct single-view evaluation straight from the definitions.

    Kept loop-based and index-free on purpose: it is the ground truth the
    fast path is checked against, so it must not share that code.  Scale
    guard: m, n <= 1000.
    """
    reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    test = np.atleast_2d(np.asarray(test, dtype=np.float64))
    m, n, k = reference.shape[0], test.shape[0], int(k)
    if m > 1000 or n > 1000:
        raise ParameterError(f"oracle limited to 1000 points, got m={m}, n={n}")
    if k < 1 or k > m - 1:
        raise ParameterError(f"k={k} needs 1 <= k <= m-1 with m={m}")
    if n == 0:
        return []
    if n < k + 1:
        raise BatchTooSmallError(
            f"oracle batch of {n} cannot support k={k}", required=k + 1
        )

    def dist(a: np.ndarray, b: np.ndarray) -> float:
        return float(np.sqrt(np.sum((a - b) ** 2)))

    ref_radii = []
    for i in range(m):
        ds = sorted(dist(reference[i], reference[t]) for t in range(m) if t != i)
        ref_radii.append(ds[k - 1])
    out = []
    for j in range(n):
        ds = sorted(dist(test[j], test[t]) for t in range(n) if t != j)
        rho = ds[k - 1]
        ball_count = sum(
            1 for i in range(m) if dist(test[j], reference[i]) <= ref_radii[i]
        )
        rec_count = sum(1 for i in range(m) if dist(reference[i], test[j]) <= rho)
        out.append(PrdcVector(
            values=_block_values(
                FeatureSubset.FULL,
                rec_count / m, ball_count / (m * k),
                1.0 if ball_count else 0.0, 1.0 if rec_count else 0.0,
            ),
            m_used=m,
            k_list=(k,),
            subset=FeatureSubset.FULL,
        ))
    return out


def assemble_features(per_view: list[PrdcVector]) -> PrdcVector:
    """Concatenate one single-view block per encoder into one vector."""
    if not per_view:
        raise AlignmentError("no blocks to assemble")
    first = per_view[0]
    for block in per_view[1:]:
        if block.k_list != first.k_list:
            raise AlignmentError(
                f"blocks disagree on k_list: {block.k_list} vs {first.k_list}"
            )
        if block.subset != first.subset:
            raise AlignmentError(
                f"blocks disagree on subset: {block.subset} vs {first.subset}"
            )
        if block.m_used != first.m_used:
            raise AlignmentError(
                f"blocks disagree on reference size: {block.m_used} vs {first.m_used}"
            )
    values: tuple[float, ...] = ()
    for block in per_view:
        values = values + block.values
    return PrdcVector(
        values=values, m_used=first.m_used,
        k_list=first.k_list, subset=first.subset,
    )


def feature_matrix(vectors: list[PrdcVector]) -> np.ndarray:
    """Stack PRDC vectors into an (n, F) float64 matrix for the detectors."""
    if not vectors:
        return np.zeros((0, 0))
    lengths = {len(v.values) for v in vectors}
    if len(lengths) != 1:
        raise AlignmentError(f"inconsistent feature lengths: {sorted(lengths)}")
    return np.asarray([v.values for v in vectors], dtype=np.float64)


def write_feature_dump(
    path: str | Path, ids: list[str], vectors: list[PrdcVector]
) -> None:
    """One JSON object per test point: {"id", "subset", "k_list", "values"}."""
    if len(ids) != len(vectors):
        raise AlignmentError(f"{len(ids)} ids for {len(vectors)} vectors")
    with open(path, "w", encoding="utf-8") as fh:
        for sid, vec in zip(ids, vectors):
            fh.write(json.dumps({
                "id": sid,
                "subset": vec.subset.value,
                "k_list": list(vec.k_list),
                "values": [float(v) for v in vec.values],
            }) + "\n")


def check_coupling(vec: PrdcVector) -> None:
    """Assert the definitional couplings; raises ValidationError on breach.

    coverage = 1 exactly when recall > 0, precision = 1 exactly when
    density > 0, and recall/density are lattice-valued in 1/m and 1/(m*k).
    """
    slots = _SUBSET_SLOTS[vec.subset]
    per_block = len(slots)
    for start in range(0, len(vec.values), per_block):
        block = dict(zip(slots, vec.values[start : start + per_block]))
        k = vec.k_list[(start // per_block) % len(vec.k_list)]
        if "recall" in block and "coverage" in block:
            if (block["coverage"] == 1.0) != (block["recall"] > 0.0):
                raise ValidationError(
                    f"coverage {block['coverage']} inconsistent with recall "
                    f"{block['recall']}"
                )
        if "precision" in block and "density" in block:
            if (block["precision"] == 1.0) != (block["density"] > 0.0):
                raise ValidationError(
                    f"precision {block['precision']} inconsistent with density "
                    f"{block['density']}"
                )
        if "recall" in block:
            scaled = block["recall"] * vec.m_used
            if abs(scaled - round(scaled)) > 1e-9:
                raise ValidationError(f"recall {block['recall']} not on 1/m lattice")
        if "density" in block:
            scaled = block["density"] * vec.m_used * k
            if abs(scaled - round(scaled)) > 1e-9:
                raise ValidationError(
                    f"density {block['density']} not on 1/(m*k) lattice"
                )
        if "precision" in block and block["precision"] not in (0.0, 1.0):
            raise ValidationError(f"precision {block['precision']} not binary")
        if "coverage" in block and block["coverage"] not in (0.0, 1.0):
            raise ValidationError(f"coverage {block['coverage']} not binary")
        if "density" in block and not 0.0 <= block["density"] <= 1.0 / k + 1e-12:
            raise ValidationError(f"density {block['density']} outside [0, 1/k]")


def null_expectations(m: int, n: int, k: int) -> dict:
    """Exact expectations when test and reference share one distribution."""
    return {
        "recall": k / n,
        "density": 1.0 / m,
        "coverage_bound": 1.0 - (1.0 - k / n) ** m,
        "precision_limit": 1.0,
    }


def exact_null_coverage(m: int, n: int, k: int) -> float:
    """Closed-form mean coverage under matched distributions.

    The mass of a test point's k-NN ball is a Beta(k, n-k) order statistic
    for any continuous sampling distribution, so the chance that none of m
    reference draws lands inside is a ratio of gamma functions. This is the
    finite-sample value the Monte Carlo estimates converge to.
    """
    if not 1 <= k <= n - 1:
        raise ParameterError(f"need 1 <= k <= n-1, got k={k}, n={n}")
    log_miss = (
        math.lgamma(n) + math.lgamma(n + m - k)
        - math.lgamma(n - k) - math.lgamma(n + m)
    )
    return 1.0 - math.exp(log_miss)
