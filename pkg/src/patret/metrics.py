"""Retrieval evaluation: AP/mAP, Recall@K, MRR@K, and a paired t-test.

Every metric is computed over the prior-art candidate set of each query
(items granted strictly before the query's grant date).  mAP is macro
over classes: AP per query, averaged within class, then across classes.
Recall@K uses the hit-rate convention (at least one relevant item in
the top K); MRR@K is the mean reciprocal rank of the first relevant hit
within K, else 0.  Queries with no eligible relevant item are excluded
from denominators and reported as a separate count.

Reported buckets: "head", "tail" (by the query's class category under
the train-split distribution) and "all" (the union, not the bucket
mean).  Aggregation uses exact compensated summation (math.fsum), so
results do not depend on accumulation order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from math import fsum, sqrt
from typing import Optional, Sequence

import numpy as np
from scipy.special import stdtr

from .index import TemporalIndex, query_topk
from .records import HEAD, TAIL, ClassDistribution, PatentImageRecord

logger = logging.getLogger(__name__)

SAME_CLASS = "same_class"
SAME_PATENT = "same_patent"

BUCKETS = (HEAD, TAIL, "all")


@dataclass(frozen=True)
class RankedHit:
    record_id: str
    class_id: str
    score: float


@dataclass
class RetrievalRun:
    """One query's ranked candidates with relevance flags.

    eligible_relevant_count is the number of relevant items in the whole
    prior-art candidate set, not just among the retrieved ranks; it
    normalizes truncated AP.
    """

    query_record_id: str
    query_class: str
    query_category: str
    ranked: list
    relevant: list
    eligible_relevant_count: int

    def __post_init__(self):
        if len(self.ranked) != len(self.relevant):
            raise ValueError("ranked and relevant lengths differ")
        scores = [h.score for h in self.ranked]
        if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
            raise ValueError("ranked hits must be sorted by score descending")
        if self.eligible_relevant_count < sum(self.relevant):
            raise ValueError(
                "eligible_relevant_count cannot be below the retrieved relevant count"
            )
        if self.query_category not in (HEAD, TAIL):
            raise ValueError(f"query_category must be head or tail, got {self.query_category!r}")


def relevance(
    query: PatentImageRecord, candidate: PatentImageRecord, mode: str = SAME_CLASS
) -> bool:
    """Whether a candidate counts as a correct retrieval for a query."""
    if mode == SAME_CLASS:
        return candidate.class_id == query.class_id
    if mode == SAME_PATENT:
        return candidate.patent_id == query.patent_id
    raise ValueError(f"unknown relevance mode {mode!r}")


def average_precision(run: RetrievalRun, depth: int = 100) -> float:
    """Truncated AP: precision summed at relevant ranks, normalized by
    min(eligible_relevant_count, depth).  0.0 when nothing is eligible."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if run.eligible_relevant_count == 0:
        return 0.0
    seen_relevant = 0
    precisions = []
    for rank, rel in enumerate(run.relevant[:depth], start=1):
        if rel:
            seen_relevant += 1
            precisions.append(seen_relevant / rank)
    return fsum(precisions) / min(run.eligible_relevant_count, depth)


def _scored(runs: Sequence[RetrievalRun]):
    return [r for r in runs if r.eligible_relevant_count > 0]


def _bucket_runs(runs: Sequence[RetrievalRun], bucket: str):
    if bucket == "all":
        return list(runs)
    return [r for r in runs if r.query_category == bucket]


def mean_average_precision(runs: Sequence[RetrievalRun], depth: int = 100) -> dict:
    """Macro mAP per bucket: class means of AP, then the mean over classes.

    Buckets with no scored query map to None rather than 0.
    """
    if not runs:
        raise ValueError("runs must be non-empty")
    out = {}
    for bucket in BUCKETS:
        scored = _scored(_bucket_runs(runs, bucket))
        if not scored:
            out[bucket] = None
            continue
        by_class: dict = {}
        for run in scored:
            by_class.setdefault(run.query_class, []).append(average_precision(run, depth))
        class_means = [fsum(v) / len(v) for _, v in sorted(by_class.items())]
        out[bucket] = fsum(class_means) / len(class_means)
    return out


def _first_relevant_rank(run: RetrievalRun, k: int) -> Optional[int]:
    for rank, rel in enumerate(run.relevant[:k], start=1):
        if rel:
            return rank
    return None


def recall_at_k(runs: Sequence[RetrievalRun], k: int) -> dict:
    """Hit rate per bucket: fraction of scored queries with a relevant
    item in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    out = {}
    for bucket in BUCKETS:
        scored = _scored(_bucket_runs(runs, bucket))
        if not scored:
            out[bucket] = None
            continue
        hits = sum(1 for r in scored if _first_relevant_rank(r, k) is not None)
        out[bucket] = hits / len(scored)
    return out


def mrr_at_k(runs: Sequence[RetrievalRun], k: int) -> dict:
    """Mean reciprocal rank of the first relevant hit within k, else 0."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    out = {}
    for bucket in BUCKETS:
        scored = _scored(_bucket_runs(runs, bucket))
        if not scored:
            out[bucket] = None
            continue
        rr = []
        for r in scored:
            rank = _first_relevant_rank(r, k)
            rr.append(1.0 / rank if rank is not None else 0.0)
        out[bucket] = fsum(rr) / len(rr)
    return out


@dataclass
class EvalConfig:
    k_list: tuple = (5, 10)
    depth: int = 100
    relevance_mode: str = SAME_CLASS
    exclude_same_patent: bool = False

    def __post_init__(self):
        if not self.k_list:
            raise ValueError("k_list must be non-empty")
        if self.relevance_mode not in (SAME_CLASS, SAME_PATENT):
            raise ValueError(f"unknown relevance mode {self.relevance_mode!r}")


@dataclass
class MetricReport:
    """Per-bucket metrics plus the per-class AP table and query counts."""

    buckets: dict
    per_class_ap: dict
    depth: int
    k_list: tuple
    relevance_mode: str

    def to_json_dict(self) -> dict:
        return {
            "depth": self.depth,
            "k_list": list(self.k_list),
            "relevance_mode": self.relevance_mode,
            "buckets": {
                name: {
                    "map": vals["map"],
                    "recall_at": {str(k): v for k, v in vals["recall_at"].items()},
                    "mrr_at": {str(k): v for k, v in vals["mrr_at"].items()},
                    "query_count": vals["query_count"],
                    "zero_eligible_count": vals["zero_eligible_count"],
                }
                for name, vals in self.buckets.items()
            },
            "per_class_ap": dict(sorted(self.per_class_ap.items())),
        }

    def write_per_class_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class_id", "mean_ap", "query_count"])
            for class_id, entry in sorted(self.per_class_ap.items()):
                writer.writerow([class_id, f"{entry['mean_ap']:.10g}", entry["query_count"]])


def build_runs(
    index: TemporalIndex,
    queries: Sequence[PatentImageRecord],
    query_vectors: np.ndarray,
    distribution: ClassDistribution,
    config: EvalConfig,
) -> list:
    """Retrieve for each query record and assemble RetrievalRuns.

    The cutoff is each query's own grant date; the query record itself is
    always excluded from candidates.  Queries whose class is absent from
    the train distribution are bucketed as tail with a warning.
    """
    query_vectors = np.asarray(query_vectors, dtype=np.float64)
    if query_vectors.shape[0] != len(queries):
        raise ValueError("query_vectors rows must match the query count")
    k_retrieve = max(config.depth, max(config.k_list))
    runs = []
    unseen: set = set()
    class_arr = index.class_ids
    patent_arr = index.patent_ids
    for rec, vec in zip(queries, query_vectors):
        if rec.class_id not in distribution.counts and rec.class_id not in unseen:
            unseen.add(rec.class_id)
            logger.warning(
                "query class %r absent from the train distribution; bucketed as tail",
                rec.class_id,
            )
        category = distribution.category_of(rec.class_id)
        exclude_patent = rec.patent_id if config.exclude_same_patent else None
        result = query_topk(
            index,
            vec,
            cutoff_date=rec.grant_date,
            k=k_retrieve,
            exclude_patent=exclude_patent,
            exclude_record=rec.record_id,
            query_record_id=rec.record_id,
        )
        eligible = index.grant_days < rec.grant_date.toordinal()
        eligible &= index.record_ids != rec.record_id
        if exclude_patent is not None:
            eligible &= patent_arr != exclude_patent
        if config.relevance_mode == SAME_CLASS:
            rel_mask = eligible & (class_arr == rec.class_id)
            rel_flags = [h.class_id == rec.class_id for h in result.hits]
        else:
            rel_mask = eligible & (patent_arr == rec.patent_id)
            rel_flags = [h.patent_id == rec.patent_id for h in result.hits]
        runs.append(
            RetrievalRun(
                query_record_id=rec.record_id,
                query_class=rec.class_id,
                query_category=category,
                ranked=[RankedHit(h.record_id, h.class_id, h.score) for h in result.hits],
                relevant=rel_flags,
                eligible_relevant_count=int(rel_mask.sum()),
            )
        )
    return runs


def report_from_runs(runs: Sequence[RetrievalRun], config: EvalConfig) -> MetricReport:
    maps = mean_average_precision(runs, config.depth)
    recalls = {k: recall_at_k(runs, k) for k in config.k_list}
    mrrs = {k: mrr_at_k(runs, k) for k in config.k_list}
    buckets = {}
    for bucket in BUCKETS:
        bucket_all = _bucket_runs(runs, bucket)
        scored = _scored(bucket_all)
        buckets[bucket] = {
            "map": maps[bucket],
            "recall_at": {k: recalls[k][bucket] for k in config.k_list},
            "mrr_at": {k: mrrs[k][bucket] for k in config.k_list},
            "query_count": len(scored),
            "zero_eligible_count": len(bucket_all) - len(scored),
        }
    per_class: dict = {}
    for run in _scored(runs):
        per_class.setdefault(run.query_class, []).append(
            average_precision(run, config.depth)
        )
    per_class_ap = {
        c: {"mean_ap": fsum(v) / len(v), "query_count": len(v)}
        for c, v in sorted(per_class.items())
    }
    return MetricReport(
        buckets=buckets,
        per_class_ap=per_class_ap,
        depth=config.depth,
        k_list=tuple(config.k_list),
        relevance_mode=config.relevance_mode,
    )


def evaluate(
    index: TemporalIndex,
    queries: Sequence[PatentImageRecord],
    query_vectors: np.ndarray,
    distribution: ClassDistribution,
    config: Optional[EvalConfig] = None,
) -> MetricReport:
    """Full evaluation: retrieve per query, then aggregate per bucket."""
    config = config if config is not None else EvalConfig()
    runs = build_runs(index, queries, query_vectors, distribution, config)
    return report_from_runs(runs, config)


@dataclass(frozen=True)
class PairedSamples:
    """Aligned measurements of two conditions for the same subjects."""

    pairs: tuple
    label_a: str = "A"
    label_b: str = "B"

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((float(a), float(b)) for a, b in self.pairs))
        if len(self.pairs) < 2:
            raise ValueError("paired t-test needs at least 2 pairs")


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p_two_tailed: float


def paired_t_test(samples: PairedSamples) -> TTestResult:
    """Two-tailed paired t-test on the within-pair differences.

    t = mean(d) / (sd(d) / sqrt(n)) with the sample standard deviation;
    p comes from the Student-t CDF.  Raises on zero-variance
    differences ("degenerate differences").
    """
    diffs = np.array([a - b for a, b in samples.pairs], dtype=np.float64)
    n = diffs.shape[0]
    sd = float(diffs.std(ddof=1))
    if sd == 0.0:
        raise ValueError("degenerate differences: zero variance")
    t = float(diffs.mean() / (sd / sqrt(n)))
    df = n - 1
    p = 2.0 * float(stdtr(df, -abs(t)))
    return TTestResult(t=t, df=df, p_two_tailed=p)
