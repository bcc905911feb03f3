"""Embedding store with prior-art-filtered exact cosine retrieval.

Vectors are L2-normalized at insert and kept columnar next to their
grant dates and class/patent ids, so a query is a single dense dot
product followed by a date mask.  Search is exact (full scan, then
top-k selection); ranking ties break by ascending record_id.

On disk the index uses the PIRV binary format (little-endian):

    magic "PIRV" | u32 version=1 | u32 dim | u64 count
    count*dim float32 vectors, row-major
    u64 metadata byte length
    JSONL metadata, one object per row, in row order
        {"record_id", "grant_date", "class_id", "patent_id"}

Dumps are byte-deterministic: identical inputs produce identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from datetime import date
from typing import Optional, Sequence

import numpy as np

PIRV_MAGIC = b"PIRV"
PIRV_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_U64 = struct.Struct("<Q")


class PirvFormatError(Exception):
    """Malformed PIRV file; .code is one of bad_magic, bad_version,
    truncated, trailing_data, bad_metadata."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class IndexBuildError(ValueError):
    """Raised for invalid build inputs (zero vectors, duplicate ids)."""


class QueryError(ValueError):
    """Raised for invalid queries (dim mismatch, zero vector, bad k)."""


@dataclass(frozen=True)
class QueryHit:
    record_id: str
    score: float
    class_id: str
    patent_id: str
    grant_date: date


@dataclass(frozen=True)
class QueryResult:
    """Ranked hits for one query; every hit predates cutoff_date."""

    hits: tuple
    cutoff_date: date
    query_record_id: Optional[str] = None


class TemporalIndex:
    """Immutable columnar store of (vector, grant date, class, patent).

    Vectors arrive already unit-normalized in float32; scoring runs in
    float64 on a lazily materialized upcast copy so that ranking is
    reproducible bit-for-bit across dump/load round trips.
    """

    def __init__(
        self,
        vectors32: np.ndarray,
        record_ids: Sequence[str],
        grant_dates: Sequence[date],
        class_ids: Sequence[str],
        patent_ids: Sequence[str],
    ):
        vectors32 = np.ascontiguousarray(vectors32, dtype=np.float32)
        if vectors32.ndim != 2:
            raise IndexBuildError("vectors must be a 2-D matrix")
        n = vectors32.shape[0]
        if not (len(record_ids) == len(grant_dates) == len(class_ids) == len(patent_ids) == n):
            raise IndexBuildError("metadata length must equal the vector count")
        if n:
            norms = np.linalg.norm(vectors32.astype(np.float64), axis=1)
            off = np.nonzero(np.abs(norms - 1.0) > 1e-4)[0]
            if off.size:
                raise IndexBuildError(
                    f"vector at row {int(off[0])} is not unit-normalized "
                    f"(norm={norms[off[0]]:.6g})"
                )
        self.vectors32 = vectors32
        self.record_ids = np.asarray(list(record_ids), dtype=np.str_)
        self.class_ids = np.asarray(list(class_ids), dtype=np.str_)
        self.patent_ids = np.asarray(list(patent_ids), dtype=np.str_)
        self.grant_days = np.asarray([d.toordinal() for d in grant_dates], dtype=np.int64)
        self.grant_dates = tuple(grant_dates)
        self.date_order = np.lexsort((np.arange(n), self.grant_days))
        self._vectors64: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return int(self.vectors32.shape[1])

    def __len__(self) -> int:
        return int(self.vectors32.shape[0])

    @property
    def vectors64(self) -> np.ndarray:
        if self._vectors64 is None:
            self._vectors64 = self.vectors32.astype(np.float64)
        return self._vectors64

    def row_of(self, record_id: str) -> Optional[int]:
        hits = np.nonzero(self.record_ids == record_id)[0]
        return int(hits[0]) if hits.size else None


def build_index(vectors: np.ndarray, metadata: Sequence[tuple]) -> TemporalIndex:
    """Normalize vectors and assemble an immutable index.

    metadata holds one (record_id, grant_date, class_id, patent_id)
    tuple per vector row.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise IndexBuildError("vectors must be a 2-D matrix")
    if vectors.shape[0] != len(metadata):
        raise IndexBuildError(
            f"{vectors.shape[0]} vectors but {len(metadata)} metadata rows"
        )
    if not np.all(np.isfinite(vectors)):
        raise IndexBuildError("vectors contain NaN or Inf")
    if vectors.shape[0]:
        norms = np.linalg.norm(vectors, axis=1)
        zero = np.nonzero(norms == 0.0)[0]
        if zero.size:
            raise IndexBuildError(f"zero vector at row {int(zero[0])}")
        unit = (vectors / norms[:, None]).astype(np.float32)
    else:
        unit = vectors.astype(np.float32)

    record_ids = [str(m[0]) for m in metadata]
    if len(set(record_ids)) != len(record_ids):
        seen = set()
        dup = next(r for r in record_ids if r in seen or seen.add(r))
        raise IndexBuildError(f"duplicate record_id {dup!r}")
    grant_dates = [m[1] for m in metadata]
    class_ids = [str(m[2]) for m in metadata]
    patent_ids = [str(m[3]) for m in metadata]
    return TemporalIndex(unit, record_ids, grant_dates, class_ids, patent_ids)


def _prepare_query(index: TemporalIndex, query_vector: np.ndarray) -> np.ndarray:
    q = np.asarray(query_vector, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise QueryError(f"query dim {q.shape[0]} does not match index dim {index.dim}")
    if not np.all(np.isfinite(q)):
        raise QueryError("query vector contains NaN or Inf")
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        raise QueryError("query vector has zero norm")
    return q / norm


def query_topk(
    index: TemporalIndex,
    query_vector: np.ndarray,
    cutoff_date: date,
    k: int,
    exclude_patent: Optional[str] = None,
    exclude_record: Optional[str] = None,
    query_record_id: Optional[str] = None,
) -> QueryResult:
    """Exact top-k cosine hits over items granted strictly before cutoff.

    Ties break by ascending record_id.  Fewer than k eligible items
    yield a shorter list.  exclude_patent drops all images of one
    patent; exclude_record drops a single record (used to keep a query
    from retrieving itself).
    """
    if k < 1:
        raise QueryError(f"k must be >= 1, got {k}")
    q = _prepare_query(index, query_vector)
    n = len(index)
    if n == 0:
        return QueryResult(hits=(), cutoff_date=cutoff_date, query_record_id=query_record_id)

    mask = index.grant_days < cutoff_date.toordinal()
    if exclude_patent is not None:
        mask &= index.patent_ids != exclude_patent
    if exclude_record is not None:
        mask &= index.record_ids != exclude_record
    n_eligible = int(mask.sum())
    if n_eligible == 0:
        return QueryResult(hits=(), cutoff_date=cutoff_date, query_record_id=query_record_id)

    scores = index.vectors64 @ q
    scores[~mask] = -np.inf
    take = min(k, n_eligible)
    if take < n:
        part = np.argpartition(-scores, take - 1)[:take]
        threshold = scores[part].min()
        candidates = np.nonzero(scores >= threshold)[0]
    else:
        candidates = np.nonzero(mask)[0]
    order = sorted(candidates, key=lambda i: (-scores[i], index.record_ids[i]))[:take]

    hits = tuple(
        QueryHit(
            record_id=str(index.record_ids[i]),
            score=float(scores[i]),
            class_id=str(index.class_ids[i]),
            patent_id=str(index.patent_ids[i]),
            grant_date=index.grant_dates[i],
        )
        for i in order
    )
    return QueryResult(hits=hits, cutoff_date=cutoff_date, query_record_id=query_record_id)


def query_batch(
    index: TemporalIndex,
    queries: np.ndarray,
    cutoffs: Sequence[date],
    k: int,
    exclude_patents: Optional[Sequence[Optional[str]]] = None,
    exclude_records: Optional[Sequence[Optional[str]]] = None,
) -> list:
    """Run query_topk over a batch; results match the input order.

    Elementwise identical to per-query calls by construction (the batch
    path shares the single-query code), so partitioning a batch across
    workers cannot change any result.
    """
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2:
        raise QueryError("queries must be a 2-D matrix")
    if queries.shape[0] != len(cutoffs):
        raise QueryError("cutoffs length must equal the query count")
    if exclude_patents is not None and len(exclude_patents) != queries.shape[0]:
        raise QueryError("exclude_patents length must equal the query count")
    if exclude_records is not None and len(exclude_records) != queries.shape[0]:
        raise QueryError("exclude_records length must equal the query count")
    out = []
    for i in range(queries.shape[0]):
        out.append(
            query_topk(
                index,
                queries[i],
                cutoffs[i],
                k,
                exclude_patent=exclude_patents[i] if exclude_patents else None,
                exclude_record=exclude_records[i] if exclude_records else None,
            )
        )
    return out


def _meta_line(record_id: str, grant_date: date, class_id: str, patent_id: str) -> str:
    return json.dumps(
        {
            "record_id": record_id,
            "grant_date": grant_date.isoformat(),
            "class_id": class_id,
            "patent_id": patent_id,
        },
        separators=(",", ":"),
        ensure_ascii=True,
    )


def write_pirv(path, vectors32: np.ndarray, metadata: Sequence[tuple]) -> None:
    """Write a float32 matrix plus per-row metadata in PIRV layout."""
    vectors32 = np.ascontiguousarray(vectors32, dtype=np.float32)
    count, dim = vectors32.shape
    if count != len(metadata):
        raise ValueError("metadata length must equal the vector count")
    lines = [
        _meta_line(str(m[0]), m[1], str(m[2]), str(m[3])) for m in metadata
    ]
    meta_blob = ("".join(line + "\n" for line in lines)).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PIRV_MAGIC, PIRV_VERSION, dim, count))
        fh.write(vectors32.tobytes(order="C"))
        fh.write(_U64.pack(len(meta_blob)))
        fh.write(meta_blob)


def read_pirv(path):
    """Read a PIRV file into (float32 matrix, metadata tuples).

    Raises PirvFormatError with a distinct code for a bad magic, an
    unsupported version, or a truncated/overlong file.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise PirvFormatError("truncated", f"file too short for header ({len(blob)} bytes)")
    magic, version, dim, count = _HEADER.unpack_from(blob, 0)
    if magic != PIRV_MAGIC:
        raise PirvFormatError("bad_magic", f"bad magic {magic!r}")
    if version != PIRV_VERSION:
        raise PirvFormatError("bad_version", f"unsupported version {version}")
    vec_bytes = 4 * dim * count
    meta_len_off = _HEADER.size + vec_bytes
    if len(blob) < meta_len_off + _U64.size:
        raise PirvFormatError("truncated", "file ends inside the vector block")
    (meta_len,) = _U64.unpack_from(blob, meta_len_off)
    meta_off = meta_len_off + _U64.size
    if len(blob) < meta_off + meta_len:
        raise PirvFormatError("truncated", "file ends inside the metadata block")
    if len(blob) > meta_off + meta_len:
        raise PirvFormatError("trailing_data", "unexpected bytes after metadata block")

    vectors = np.frombuffer(
        blob, dtype="<f4", count=dim * count, offset=_HEADER.size
    ).reshape(count, dim).copy()
    metadata = []
    meta_blob = blob[meta_off : meta_off + meta_len]
    if meta_blob:
        for lineno, line in enumerate(meta_blob.decode("utf-8").splitlines(), start=1):
            try:
                obj = json.loads(line)
                metadata.append(
                    (
                        str(obj["record_id"]),
                        date.fromisoformat(obj["grant_date"]),
                        str(obj["class_id"]),
                        str(obj["patent_id"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise PirvFormatError(
                    "bad_metadata", f"metadata line {lineno}: {exc}"
                ) from exc
    if len(metadata) != count:
        raise PirvFormatError(
            "bad_metadata", f"{count} vectors but {len(metadata)} metadata lines"
        )
    return vectors, metadata


def dump_index(index: TemporalIndex, path) -> None:
    metadata = [
        (str(index.record_ids[i]), index.grant_dates[i],
         str(index.class_ids[i]), str(index.patent_ids[i]))
        for i in range(len(index))
    ]
    write_pirv(path, index.vectors32, metadata)


def load_index(path) -> TemporalIndex:
    """Load a PIRV file as a searchable index (vectors must be unit norm)."""
    vectors, metadata = read_pirv(path)
    return TemporalIndex(
        vectors,
        [m[0] for m in metadata],
        [m[1] for m in metadata],
        [m[2] for m in metadata],
        [m[3] for m in metadata],
    )


def save_embeddings(path, matrix: np.ndarray, metadata: Sequence[tuple]) -> None:
    """Persist a raw (not necessarily normalized) feature matrix as PIRV."""
    write_pirv(path, np.asarray(matrix, dtype=np.float32), metadata)


def load_embeddings(path):
    """Read a PIRV feature file into (float64 matrix, metadata tuples)."""
    vectors, metadata = read_pirv(path)
    return vectors.astype(np.float64), metadata
