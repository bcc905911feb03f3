"""Domain records, metadata ingestion, and the head/tail class split.

A corpus is a list of per-drawing metadata records (JSONL on disk, one
object per line) plus a class distribution computed from the train split.
The distribution partitions classes into "head" (most frequent) and
"tail" (the rest); that category label feeds the category-level
contrastive loss and the evaluation buckets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Iterable, Sequence

import numpy as np

DATE_MIN = date(1900, 1, 1)
DATE_MAX = date(2100, 1, 1)

SPLITS = ("train", "validation", "query")

HEAD = "head"
TAIL = "tail"

JSONL_FIELDS = (
    "record_id",
    "patent_id",
    "class_id",
    "grant_date",
    "object_name",
    "perspective",
    "description",
    "split",
)

# Vocabulary for the synthetic generator.  Object names are assigned
# per class so that same-class records share an object name, mirroring
# how Locarno classes group similar articles.
OBJECT_VOCABULARY = (
    "lighting fixture",
    "toy car",
    "armchair",
    "wristwatch",
    "coffee maker",
    "bicycle frame",
    "table lamp",
    "running shoe",
    "handbag",
    "desk fan",
    "bottle opener",
    "garden chair",
    "vacuum cleaner",
    "electric kettle",
    "door handle",
    "smartphone case",
)

PERSPECTIVES = (
    "front elevational view",
    "rear elevational view",
    "left side elevational view",
    "right side elevational view",
    "top plan view",
    "bottom plan view",
    "perspective view",
)


class MetadataError(ValueError):
    """Raised for malformed metadata files or invalid record fields."""


@dataclass(frozen=True)
class PatentImageRecord:
    """Metadata for a single patent drawing."""

    record_id: str
    patent_id: str
    class_id: str
    grant_date: date
    object_name: str
    perspective: str
    description: str
    split: str = "train"

    def __post_init__(self) -> None:
        if not self.record_id:
            raise MetadataError("record_id must be non-empty")
        if not self.class_id:
            raise MetadataError(f"record {self.record_id!r}: class_id must be non-empty")
        if not (DATE_MIN <= self.grant_date <= DATE_MAX):
            raise MetadataError(
                f"record {self.record_id!r}: grant_date {self.grant_date} outside "
                f"[{DATE_MIN}, {DATE_MAX}]"
            )
        if self.split not in SPLITS:
            raise MetadataError(
                f"record {self.record_id!r}: split {self.split!r} not one of {SPLITS}"
            )

    def to_json_dict(self) -> dict:
        d = {name: getattr(self, name) for name in JSONL_FIELDS}
        d["grant_date"] = self.grant_date.isoformat()
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "PatentImageRecord":
        missing = [k for k in JSONL_FIELDS if k not in d]
        if missing:
            raise MetadataError(f"missing fields: {', '.join(missing)}")
        try:
            grant = date.fromisoformat(str(d["grant_date"]))
        except ValueError as exc:
            raise MetadataError(f"unparseable grant_date {d['grant_date']!r}") from exc
        return cls(
            record_id=str(d["record_id"]),
            patent_id=str(d["patent_id"]),
            class_id=str(d["class_id"]),
            grant_date=grant,
            object_name=str(d["object_name"]),
            perspective=str(d["perspective"]),
            description=str(d["description"]),
            split=str(d["split"]),
        )


@dataclass(frozen=True)
class ClassDistribution:
    """Head/tail partition of a class histogram.

    Classes are ranked by (frequency desc, class_id asc); the first
    floor(head_fraction * n_classes) are head, the rest tail.  The
    tie-break keeps the partition deterministic.
    """

    counts: dict
    head_classes: frozenset
    tail_classes: frozenset
    head_fraction: float = 0.4

    def category_of(self, class_id: str) -> str:
        """Category label for a class; unseen classes count as tail."""
        return HEAD if class_id in self.head_classes else TAIL

    def to_json_dict(self) -> dict:
        return {
            "counts": dict(sorted(self.counts.items())),
            "head_classes": sorted(self.head_classes),
            "tail_classes": sorted(self.tail_classes),
            "head_fraction": self.head_fraction,
        }


def compute_head_tail(counts: dict, head_fraction: float = 0.4) -> ClassDistribution:
    """Partition a class histogram into head and tail classes.

    Only classes with positive count participate.  Raises on an empty
    histogram or a head_fraction outside (0, 1).
    """
    if not (0.0 < head_fraction < 1.0):
        raise ValueError(f"head_fraction must be in (0,1), got {head_fraction}")
    positive = {c: int(n) for c, n in counts.items() if n > 0}
    if any(n < 0 for n in counts.values()):
        raise ValueError("class counts must be non-negative")
    if not positive:
        raise ValueError("empty class histogram")
    ranked = sorted(positive, key=lambda c: (-positive[c], c))
    n_head = math.floor(head_fraction * len(ranked))
    return ClassDistribution(
        counts=positive,
        head_classes=frozenset(ranked[:n_head]),
        tail_classes=frozenset(ranked[n_head:]),
        head_fraction=head_fraction,
    )


def _empty_distribution(head_fraction: float) -> ClassDistribution:
    return ClassDistribution(
        counts={}, head_classes=frozenset(), tail_classes=frozenset(),
        head_fraction=head_fraction,
    )


@dataclass(frozen=True)
class Corpus:
    """Immutable record collection with the train-split class distribution."""

    records: tuple
    distribution: ClassDistribution

    @classmethod
    def from_records(
        cls, records: Iterable[PatentImageRecord], head_fraction: float = 0.4
    ) -> "Corpus":
        records = tuple(records)
        seen = set()
        for rec in records:
            if rec.record_id in seen:
                raise MetadataError(f"duplicate record_id {rec.record_id!r}")
            seen.add(rec.record_id)
        counts: dict = {}
        for rec in records:
            if rec.split == "train":
                counts[rec.class_id] = counts.get(rec.class_id, 0) + 1
        if counts:
            dist = compute_head_tail(counts, head_fraction)
        else:
            # A queries-only file is a legal input to evaluation; it just
            # carries no distribution of its own.
            dist = _empty_distribution(head_fraction)
        return cls(records=records, distribution=dist)

    def split_records(self, split: str) -> tuple:
        return tuple(r for r in self.records if r.split == split)

    def by_id(self) -> dict:
        return {r.record_id: r for r in self.records}

    def __len__(self) -> int:
        return len(self.records)


def ingest_metadata(path, format: str = "jsonl", head_fraction: float = 0.4) -> Corpus:
    """Read a JSONL metadata file into a Corpus.

    Each line must be one JSON object with the PatentImageRecord fields.
    Errors name the offending line; duplicate record_ids are rejected.
    """
    if format != "jsonl":
        raise ValueError(f"unsupported metadata format {format!r}")
    records = []
    seen = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MetadataError(f"malformed JSON at line {lineno}: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise MetadataError(f"line {lineno} is not a JSON object")
            try:
                rec = PatentImageRecord.from_json_dict(obj)
            except MetadataError as exc:
                raise MetadataError(f"line {lineno}: {exc}") from exc
            if rec.record_id in seen:
                raise MetadataError(
                    f"duplicate record_id {rec.record_id!r} at line {lineno} "
                    f"(first seen at line {seen[rec.record_id]})"
                )
            seen[rec.record_id] = lineno
            records.append(rec)
    return Corpus.from_records(records, head_fraction)


def write_metadata(records_or_corpus, path) -> None:
    """Write records as JSONL, one object per line, in input order."""
    records = (
        records_or_corpus.records
        if isinstance(records_or_corpus, Corpus)
        else records_or_corpus
    )
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict(), separators=(",", ":")) + "\n")


def generate_synthetic_corpus(
    seed: int,
    n_classes: int,
    records_per_class: Sequence[int],
    date_range: tuple = (date(2016, 1, 1), date(2019, 12, 31)),
    head_fraction: float = 0.4,
    query_fraction: float = 0.0,
) -> Corpus:
    """Deterministic synthetic corpus for tests and the trainer demo.

    Class c{i} gets records_per_class[i] records sharing one object name;
    grant dates are uniform over date_range.  With query_fraction > 0 the
    last ceil(fraction * count) records of each class are marked as the
    query split (distribution still comes from the train records only).
    """
    if len(records_per_class) != n_classes:
        raise ValueError("records_per_class length must equal n_classes")
    if any(n <= 0 for n in records_per_class):
        raise ValueError("records_per_class entries must be positive")
    lo, hi = date_range
    if hi < lo:
        raise ValueError("date_range must be ordered (lo, hi)")
    if not (0.0 <= query_fraction < 1.0):
        raise ValueError("query_fraction must be in [0,1)")

    rng = np.random.default_rng(seed)
    span_days = (hi - lo).days
    records = []
    serial = 0
    for ci in range(n_classes):
        class_id = f"c{ci}"
        object_name = OBJECT_VOCABULARY[ci % len(OBJECT_VOCABULARY)]
        count = records_per_class[ci]
        n_query = math.ceil(query_fraction * count) if query_fraction > 0 else 0
        n_query = min(n_query, count - 1)  # keep at least one train record per class
        for k in range(count):
            grant = lo + timedelta(days=int(rng.integers(0, span_days + 1)))
            perspective = PERSPECTIVES[int(rng.integers(0, len(PERSPECTIVES)))]
            split = "query" if k >= count - n_query else "train"
            records.append(
                PatentImageRecord(
                    record_id=f"r{serial:06d}",
                    patent_id=f"p{serial:06d}",
                    class_id=class_id,
                    grant_date=grant,
                    object_name=object_name,
                    perspective=perspective,
                    description=f"FIG. {k + 1} is a {perspective} of the {object_name}",
                    split=split,
                )
            )
            serial += 1
    return Corpus.from_records(records, head_fraction)
