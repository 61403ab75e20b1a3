"""Embedding views: validated float32 matrices with a binary file format.

A *view* is one encoder's embedding of a corpus: a ``count x dim`` float32
matrix plus a view id.  Views of the same corpus are sample-aligned by row
position, with optional sample ids carried in a sibling JSON-lines file.

On-disk layout (all integers little-endian)::

    magic "TGE1" | version u32 | dim u32 | count u64 | normalized u8
    | view_id_len u16 | view_id UTF-8 | count*dim float32, row-major

Floats are stored in 32 bits; norm and distance arithmetic elsewhere in
the package accumulates in 64 bits.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AlignmentError,
    DegenerateVectorError,
    DimensionError,
    FormatError,
    PayloadLengthError,
    ValidationError,
)

MAGIC = b"TGE1"
FORMAT_VERSION = 1

# header after magic: version u32 | dim u32 | count u64 | normalized u8 | id_len u16
_HEADER = struct.Struct("<IIQBH")


@dataclass
class EmbeddingView:
    """One encoder's embeddings for a corpus, row i = sample i."""

    view_id: str
    rows: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.float32)
        if rows.ndim != 2:
            raise ValidationError(
                f"view {self.view_id!r}: expected a 2-d array, got shape {rows.shape}"
            )
        self.rows = np.ascontiguousarray(rows)
        self.validate()

    @property
    def count(self) -> int:
        return int(self.rows.shape[0])

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    def validate(self) -> None:
        """Check finiteness, and unit norms when the view claims them."""
        if not np.isfinite(self.rows).all():
            bad = int(np.argwhere(~np.isfinite(self.rows).all(axis=1))[0, 0])
            raise ValidationError(
                f"view {self.view_id!r}: non-finite value in row {bad}"
            )
        if self.normalized and self.count:
            norms = np.linalg.norm(self.rows.astype(np.float64), axis=1)
            off = np.abs(norms - 1.0)
            worst = int(np.argmax(off))
            if off[worst] > 1e-6:
                raise ValidationError(
                    f"view {self.view_id!r}: row {worst} has norm {norms[worst]:.8f}, "
                    "expected 1 within 1e-6"
                )


@dataclass
class MultiViewDataset:
    """Sample-aligned views of one corpus. ``views[v].rows[i]`` is sample i."""

    views: list[EmbeddingView]
    sample_ids: list[str] | None = field(default=None)

    def __post_init__(self) -> None:
        if not self.views:
            raise AlignmentError("a dataset needs at least one view")
        counts = {v.count for v in self.views}
        if len(counts) != 1:
            detail = ", ".join(f"{v.view_id}={v.count}" for v in self.views)
            raise AlignmentError(f"views disagree on sample count: {detail}")
        ids = [v.view_id for v in self.views]
        if len(set(ids)) != len(ids):
            raise AlignmentError(f"duplicate view ids: {ids}")
        if self.sample_ids is not None and len(self.sample_ids) != self.count:
            raise AlignmentError(
                f"{len(self.sample_ids)} sample ids for {self.count} rows"
            )

    @property
    def count(self) -> int:
        return self.views[0].count

    @property
    def view_ids(self) -> list[str]:
        return [v.view_id for v in self.views]


def normalize_rows(view: EmbeddingView) -> EmbeddingView:
    """Project every row onto the unit sphere.

    Norms are computed in float64 before dividing. A zero row cannot be
    normalized and raises ``DegenerateVectorError`` naming the row.
    Already-normalized input passes through unchanged up to float32
    rounding, so the operation is idempotent at 1e-7.
    """
    rows64 = view.rows.astype(np.float64)
    norms = np.linalg.norm(rows64, axis=1)
    zero = np.where(norms == 0.0)[0]
    if zero.size:
        raise DegenerateVectorError(
            f"view {view.view_id!r}: row {int(zero[0])} has zero norm"
        )
    out = (rows64 / norms[:, None]).astype(np.float32)
    return EmbeddingView(view_id=view.view_id, rows=out, normalized=True)


def align_views(
    views: list[EmbeddingView], sample_ids: list[str] | None = None
) -> MultiViewDataset:
    """Bundle per-encoder views into one sample-aligned dataset."""
    return MultiViewDataset(views=views, sample_ids=sample_ids)


def squared_l2_on_sphere(a: np.ndarray, b: np.ndarray) -> float:
    """Squared Euclidean distance, accumulated in float64.

    For unit vectors this equals ``2 * (1 - cosine_similarity)`` up to
    rounding, which is what ties cosine retrieval geometry to the
    Euclidean neighborhoods used everywhere else.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    d = a - b
    return float(np.dot(d, d))


def save_embedding_file(path: str | Path, view: EmbeddingView) -> None:
    """Write a view in the TGE1 binary layout."""
    view_id_bytes = view.view_id.encode("utf-8")
    if len(view_id_bytes) > 0xFFFF:
        raise ValidationError("view id longer than 65535 bytes")
    header = _HEADER.pack(
        FORMAT_VERSION, view.dim, view.count, 1 if view.normalized else 0,
        len(view_id_bytes),
    )
    payload = np.ascontiguousarray(view.rows, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header)
        fh.write(view_id_bytes)
        fh.write(payload)


def load_embedding_file(path: str | Path) -> EmbeddingView:
    """Read a TGE1 file back into a validated view.

    Raises ``FormatError`` for a bad magic or version, ``PayloadLengthError``
    when the file is shorter than the header promises, and the usual
    validation errors for non-finite content.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + _HEADER.size:
        raise PayloadLengthError(f"{path}: file shorter than the fixed header")
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, dim, count, normalized, id_len = _HEADER.unpack_from(blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    offset = len(MAGIC) + _HEADER.size
    if len(blob) < offset + id_len:
        raise PayloadLengthError(f"{path}: truncated view id")
    try:
        view_id = blob[offset : offset + id_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: view id is not valid UTF-8") from exc
    offset += id_len
    expected = count * dim * 4
    actual = len(blob) - offset
    if actual != expected:
        raise PayloadLengthError(
            f"{path}: payload holds {actual} bytes, header promises {expected}"
        )
    rows = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=offset)
    rows = rows.reshape(count, dim).copy()
    return EmbeddingView(view_id=view_id, rows=rows, normalized=bool(normalized))


def write_sample_ids(path: str | Path, sample_ids: list[str]) -> None:
    """Write the sibling id file: one ``{"i": row, "id": str}`` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, sid in enumerate(sample_ids):
            fh.write(json.dumps({"i": i, "id": str(sid)}) + "\n")


def read_sample_ids(path: str | Path) -> list[str]:
    """Read a sibling id file, insisting on dense 0..count-1 row numbers."""
    path = Path(path)
    out: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                row, sid = int(rec["i"]), str(rec["id"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad id record") from exc
            if row != len(out):
                raise FormatError(
                    f"{path}:{lineno}: row index {row}, expected {len(out)}"
                )
            out.append(sid)
    return out
