"""Reference split, exact k-NN ball radii, and containment queries.

The reference corpus is halved once (seeded shuffle): one half is indexed,
the other half is scored against it, so in-distribution calibration never
measures a point against itself.  An index stores, for every reference
point and every configured k, the exact distance to its k-th nearest
neighbor within the indexed half (self excluded).  Containment uses closed
balls: a point exactly on a ball boundary counts as inside.

Cost model: building is quadratic in the half size m, a batch query is
linear in m per test point.  Distances accumulate in float64 even though
vectors are stored in float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding_store import EmbeddingView
from .errors import (
    BatchTooSmallError,
    ContractError,
    FormatError,
    InsufficientDataError,
    ParameterError,
    PayloadLengthError,
)

INDEX_MAGIC = b"TGI1"
INDEX_VERSION = 1

# bytes of float64 scratch a chunked pairwise-distance pass may allocate
_CHUNK_BUDGET = 64_000_000


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between row sets, float64, chunked.

    Uses the difference form sum((a-b)^2) rather than the expanded dot
    product so results match a per-pair oracle bit for bit.
    """
    a64 = np.ascontiguousarray(a, dtype=np.float64)
    b64 = np.ascontiguousarray(b, dtype=np.float64)
    n, d = a64.shape
    m = b64.shape[0]
    out = np.empty((n, m), dtype=np.float64)
    rows_per_chunk = max(1, _CHUNK_BUDGET // (8 * max(1, m * d)))
    for start in range(0, n, rows_per_chunk):
        stop = min(n, start + rows_per_chunk)
        diff = a64[start:stop, None, :] - b64[None, :, :]
        np.einsum("ijk,ijk->ij", diff, diff, out=out[start:stop])
    return out


def _check_unit_rows(rows: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(np.asarray(rows, dtype=np.float64), axis=1)
    if norms.size and np.abs(norms - 1.0).max() > 1e-4:
        worst = int(np.argmax(np.abs(norms - 1.0)))
        raise ContractError(
            f"{what}: rows must be unit-norm; row {worst} has norm {norms[worst]:.6f}"
        )


@dataclass(frozen=True)
class ReferenceSplit:
    """Disjoint halves of 0..count-1; half_a is the indexed half."""

    half_a: np.ndarray
    half_b: np.ndarray
    seed: int

    @property
    def count(self) -> int:
        return int(self.half_a.size + self.half_b.size)


def split_reference(count: int, seed: int) -> ReferenceSplit:
    """Shuffle 0..count-1 with the seed and cut into near-equal halves.

    The first ceil(count/2) shuffled indices form half_a (the half that
    gets indexed), so for odd counts half_a is the larger one.  Halves are
    returned sorted; determinism is part of the contract.
    """
    if count < 2:
        raise InsufficientDataError(f"cannot split {count} sample(s) into two halves")
    perm = np.random.default_rng(seed).permutation(count)
    cut = (count + 1) // 2
    half_a = np.sort(perm[:cut]).astype(np.int64)
    half_b = np.sort(perm[cut:]).astype(np.int64)
    return ReferenceSplit(half_a=half_a, half_b=half_b, seed=int(seed))


@dataclass
class ReferenceIndex:
    """Vectors of the indexed half plus cached k-NN ball radii.

    radii[i, j] is the exact distance from point i to its k_list[j]-th
    nearest neighbor inside the half, self excluded, ties between equal
    distances resolved toward the smaller point index. Immutable once
    built; batch queries share it freely.
    """

    view_id: str
    k_list: list[int]
    vectors: np.ndarray
    radii: np.ndarray
    split_seed: int
    counterpart_count: int = 0

    @property
    def count(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def _k_column(self, k: int) -> int:
        try:
            return self.k_list.index(int(k))
        except ValueError:
            raise ParameterError(
                f"k={k} not in this index's k_list {self.k_list}"
            ) from None

    def ball_counts(self, points: np.ndarray, k: int) -> np.ndarray:
        """For each query row, how many reference balls of order k contain it."""
        col = self._k_column(k)
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if pts.shape[1] != self.dim:
            raise ParameterError(
                f"query dim {pts.shape[1]} does not match index dim {self.dim}"
            )
        sq = pairwise_sq_dists(pts, self.vectors)
        inside = sq <= (self.radii[:, col] ** 2)[None, :]
        return inside.sum(axis=1).astype(np.int64)

    def contains(self, point: np.ndarray, k: int) -> tuple[bool, int]:
        """Closed-ball membership for a single unit-norm query point."""
        point = np.asarray(point, dtype=np.float64).ravel()
        _check_unit_rows(point[None, :], "query point")
        count = int(self.ball_counts(point[None, :], k)[0])
        return count > 0, count


def _knn_radii(rows: np.ndarray, k_list: list[int], what: str) -> np.ndarray:
    """Exact k-th NN distance per row for each k, self excluded."""
    n = rows.shape[0]
    kmax = max(k_list)
    sq = pairwise_sq_dists(rows, rows)
    np.fill_diagonal(sq, np.inf)
    # partition once at the largest k, then sort just that prefix
    part = np.partition(sq, kmax - 1, axis=1)[:, :kmax]
    part.sort(axis=1)
    cols = np.array([k - 1 for k in k_list], dtype=np.int64)
    return np.sqrt(part[:, cols])


def _validated_k_list(k_list, m: int) -> list[int]:
    ks = [int(k) for k in k_list]
    if not ks:
        raise ParameterError("k_list must not be empty")
    if any(k < 1 for k in ks):
        raise ParameterError(f"k values must be positive, got {ks}")
    if len(set(ks)) != len(ks):
        raise ParameterError(f"k_list has duplicates: {ks}")
    if sorted(ks) != ks:
        raise ParameterError(f"k_list must be sorted ascending: {ks}")
    if max(ks) > m - 1:
        raise ParameterError(f"max k={max(ks)} needs at least {max(ks)+1} points, have {m}")
    return ks


def build_index(
    half: EmbeddingView,
    k_list,
    split_seed: int = 0,
    counterpart_count: int = 0,
) -> ReferenceIndex:
    """Compute ball radii for the indexed half. Quadratic in its size."""
    ks = _validated_k_list(k_list, half.count)
    _check_unit_rows(half.rows, f"view {half.view_id!r}")
    radii = _knn_radii(half.rows.astype(np.float64), ks, half.view_id)
    return ReferenceIndex(
        view_id=half.view_id,
        k_list=ks,
        vectors=np.ascontiguousarray(half.rows, dtype=np.float32),
        radii=radii,
        split_seed=int(split_seed),
        counterpart_count=int(counterpart_count),
    )


def test_set_radii(rows: np.ndarray, k: int) -> np.ndarray:
    """k-NN ball radii of a scoring batch within itself, self excluded.

    Needs at least k+1 rows; a smaller batch raises ``BatchTooSmallError``
    whose ``required`` field tells the caller the minimum batch size (the
    usual fallbacks being to defer the batch or score the precision and
    density features only).
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    k = int(k)
    if k < 1:
        raise ParameterError(f"k must be positive, got {k}")
    if rows.shape[0] < k + 1:
        raise BatchTooSmallError(
            f"batch of {rows.shape[0]} cannot support k={k} within-batch "
            f"neighborhoods; need at least {k + 1} rows",
            required=k + 1,
        )
    _check_unit_rows(rows, "test batch")
    return _knn_radii(rows, [k], "test batch")[:, 0]


# header after magic: version u32 | m u64 | dim u32 | k_count u16
_INDEX_HEADER = struct.Struct("<IQIH")


def save_index(path: str | Path, index: ReferenceIndex) -> None:
    """Persist in the TGI1 layout (vectors and radii stored as float32)."""
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(_INDEX_HEADER.pack(
            INDEX_VERSION, index.count, index.dim, len(index.k_list)
        ))
        fh.write(struct.pack(f"<{len(index.k_list)}I", *index.k_list))
        fh.write(struct.pack("<Q", index.split_seed & 0xFFFFFFFFFFFFFFFF))
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(index.radii, dtype="<f4").tobytes())


def load_index(path: str | Path, view_id: str = "") -> ReferenceIndex:
    """Read a TGI1 file. The layout does not carry the view id; pass it in."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(INDEX_MAGIC) + _INDEX_HEADER.size:
        raise PayloadLengthError(f"{path}: file shorter than the fixed header")
    if blob[: len(INDEX_MAGIC)] != INDEX_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {INDEX_MAGIC!r}")
    version, m, dim, k_count = _INDEX_HEADER.unpack_from(blob, len(INDEX_MAGIC))
    if version != INDEX_VERSION:
        raise FormatError(f"{path}: unsupported index version {version}")
    offset = len(INDEX_MAGIC) + _INDEX_HEADER.size
    need = k_count * 4 + 8
    if len(blob) < offset + need:
        raise PayloadLengthError(f"{path}: truncated k_list or seed")
    ks = list(struct.unpack_from(f"<{k_count}I", blob, offset))
    offset += k_count * 4
    (split_seed,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    vec_bytes = m * dim * 4
    rad_bytes = m * k_count * 4
    if len(blob) - offset != vec_bytes + rad_bytes:
        raise PayloadLengthError(
            f"{path}: payload holds {len(blob) - offset} bytes, "
            f"header promises {vec_bytes + rad_bytes}"
        )
    vectors = np.frombuffer(blob, dtype="<f4", count=m * dim, offset=offset)
    vectors = vectors.reshape(m, dim).copy()
    offset += vec_bytes
    radii = np.frombuffer(blob, dtype="<f4", count=m * k_count, offset=offset)
    radii = radii.reshape(m, k_count).astype(np.float64)
    return ReferenceIndex(
        view_id=view_id,
        k_list=[int(k) for k in ks],
        vectors=vectors,
        radii=radii,
        split_seed=int(split_seed),
    )
