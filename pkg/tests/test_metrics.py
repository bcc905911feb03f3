import json
import math
from datetime import date, timedelta

import numpy as np
import pytest

from patret.index import build_index
from patret.metrics import (
    EvalConfig,
    PairedSamples,
    RankedHit,
    RetrievalRun,
    average_precision,
    build_runs,
    evaluate,
    mean_average_precision,
    mrr_at_k,
    paired_t_test,
    recall_at_k,
    relevance,
    report_from_runs,
)
from patret.records import Corpus, ingest_metadata

from conftest import angle_vector, record


def run_from_pattern(pattern, eligible, query_class="X", category="head", qid="q"):
    ranked = [
        RankedHit(f"h{i}", query_class if rel else "other", 1.0 - 0.01 * i)
        for i, rel in enumerate(pattern)
    ]
    return RetrievalRun(
        query_record_id=qid,
        query_class=query_class,
        query_category=category,
        ranked=ranked,
        relevant=[bool(r) for r in pattern],
        eligible_relevant_count=eligible,
    )


# ---------------------------------------------------------------------------
# Independent naive evaluator: literal definitions, no shared code with the
# metrics module.  AP: mean of precision at each relevant rank, normalized by
# min(eligible, depth).  Recall: any hit in top k.  MRR: 1/first-hit-rank.
# ---------------------------------------------------------------------------


def naive_ap(flags, eligible, depth):
    if eligible == 0:
        return 0.0
    hits = 0
    acc = 0.0
    for rank in range(1, min(len(flags), depth) + 1):
        if flags[rank - 1]:
            hits += 1
            acc += hits / rank
    return acc / min(eligible, depth)


def naive_report(runs, depth, ks):
    out = {}
    for bucket in ("head", "tail", "all"):
        rs = [r for r in runs if bucket == "all" or r.query_category == bucket]
        rs = [r for r in rs if r.eligible_relevant_count > 0]
        if not rs:
            out[bucket] = None
            continue
        per_class = {}
        for r in rs:
            per_class.setdefault(r.query_class, []).append(
                naive_ap(r.relevant, r.eligible_relevant_count, depth)
            )
        class_means = [sum(v) / len(v) for _, v in sorted(per_class.items())]
        entry = {"map": sum(class_means) / len(class_means)}
        for k in ks:
            hits = [any(r.relevant[:k]) for r in rs]
            entry[f"r@{k}"] = sum(hits) / len(rs)
            rr = []
            for r in rs:
                first = next((i + 1 for i, f in enumerate(r.relevant[:k]) if f), None)
                rr.append(0.0 if first is None else 1.0 / first)
            entry[f"mrr@{k}"] = sum(rr) / len(rs)
        out[bucket] = entry
    return out


class TestRelevance:
    def test_same_class_mode(self):
        q = record("q", class_id="A")
        assert relevance(q, record("c", class_id="A"), "same_class")
        assert not relevance(q, record("c", class_id="B"), "same_class")

    def test_same_patent_vs_class_mode_differ(self):
        q = record("q", class_id="A", patent_id="p1")
        c = record("c", class_id="A", patent_id="p2")
        assert relevance(q, c, "same_class")
        assert not relevance(q, c, "same_patent")

    def test_same_patent_different_class(self):
        q = record("q", class_id="A", patent_id="p1")
        c = record("c", class_id="B", patent_id="p1")
        assert not relevance(q, c, "same_class")
        assert relevance(q, c, "same_patent")

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            relevance(record("q"), record("c"), "same_examiner")


class TestAveragePrecision:
    def test_hand_computed_pattern(self):
        # relevant at ranks 1 and 3, two eligible: (1/1 + 2/3) / 2
        run = run_from_pattern([1, 0, 1, 0], eligible=2)
        assert abs(average_precision(run, depth=4) - (1.0 + 2.0 / 3.0) / 2.0) < 1e-12
        assert abs(average_precision(run, depth=4) - 0.8333333333333333) < 1e-10

    def test_all_relevant_gives_one(self):
        run = run_from_pattern([1, 1, 1], eligible=5)
        assert average_precision(run, depth=3) == 1.0

    def test_nothing_retrieved_gives_zero(self):
        run = run_from_pattern([0, 0, 0], eligible=2)
        assert average_precision(run, depth=3) == 0.0

    def test_zero_eligible_gives_zero(self):
        run = run_from_pattern([0, 0], eligible=0)
        assert average_precision(run, depth=2) == 0.0

    def test_depth_truncates(self):
        run = run_from_pattern([0, 0, 0, 1], eligible=1)
        assert average_precision(run, depth=3) == 0.0
        assert average_precision(run, depth=4) == 0.25


class TestBucketedMetrics:
    def test_single_class_map_is_mean_ap(self):
        runs = [
            run_from_pattern([1, 0], eligible=1, qid="q1"),
            run_from_pattern([0, 1], eligible=1, qid="q2"),
        ]
        out = mean_average_precision(runs, depth=2)
        assert out["all"] == (1.0 + 0.5) / 2.0

    def test_macro_not_micro(self):
        # class X: three queries, all AP 1.0; class Y: one query with AP 0.0
        runs = [
            run_from_pattern([1], eligible=1, query_class="X", qid=f"x{i}")
            for i in range(3)
        ] + [run_from_pattern([0], eligible=1, query_class="Y", qid="y0")]
        out = mean_average_precision(runs, depth=1)
        assert out["all"] == 0.5

    def test_map_invariant_to_duplicating_a_class_query(self):
        runs = [
            run_from_pattern([1, 0], eligible=1, query_class="X", qid="x0"),
            run_from_pattern([0, 1], eligible=2, query_class="Y", qid="y0"),
        ]
        base = mean_average_precision(runs, depth=2)["all"]
        doubled = runs + [
            run_from_pattern([1, 0], eligible=1, query_class="X", qid="x1"),
            run_from_pattern([1, 0], eligible=1, query_class="X", qid="x2"),
        ]
        # class X's mean AP stays 1.0 whether it holds 1 query or 3
        assert mean_average_precision(doubled, depth=2)["all"] == base

    def test_empty_bucket_is_none_not_zero(self):
        runs = [run_from_pattern([1], eligible=1, category="head")]
        out = mean_average_precision(runs, depth=1)
        assert out["head"] == 1.0
        assert out["tail"] is None

    def test_recall_counts_first_hit_at_exactly_k(self):
        runs = [run_from_pattern([0, 0, 1], eligible=1)]
        assert recall_at_k(runs, 3)["all"] == 1.0
        assert recall_at_k(runs, 2)["all"] == 0.0

    def test_recall_planted_hit_fraction(self):
        rng = np.random.default_rng(0)
        planted = []
        want_hits = 0
        for i in range(100):
            rank = int(rng.integers(1, 20))
            pattern = [0] * 19
            pattern[rank - 1] = 1
            want_hits += rank <= 10
            planted.append(run_from_pattern(pattern, eligible=1, qid=f"q{i}"))
        assert recall_at_k(planted, 10)["all"] == want_hits / 100

    def test_mrr_reciprocal_ranks(self):
        assert mrr_at_k([run_from_pattern([0, 0, 0, 1], eligible=1)], 10)["all"] == 0.25
        assert mrr_at_k([run_from_pattern([0] * 10 + [1], eligible=1)], 10)["all"] == 0.0
        runs = [
            run_from_pattern([1, 0], eligible=1, qid="q1"),
            run_from_pattern([0, 1], eligible=1, qid="q2"),
            run_from_pattern([0, 0], eligible=1, qid="q3"),
        ]
        assert mrr_at_k(runs, 10)["all"] == (1.0 + 0.5 + 0.0) / 3.0

    def test_zero_eligible_excluded_from_denominators(self):
        runs = [
            run_from_pattern([1], eligible=1, qid="q1"),
            run_from_pattern([0], eligible=0, qid="q2"),
        ]
        assert recall_at_k(runs, 1)["all"] == 1.0
        report = report_from_runs(runs, EvalConfig(k_list=(1,), depth=1))
        assert report.buckets["all"]["query_count"] == 1
        assert report.buckets["all"]["zero_eligible_count"] == 1

    def test_mrr_bounded_by_recall(self):
        rng = np.random.default_rng(1)
        runs = []
        for i in range(60):
            pattern = [int(rng.uniform() < 0.2) for _ in range(15)]
            runs.append(run_from_pattern(pattern, eligible=max(1, sum(pattern)), qid=f"q{i}"))
        for k in (1, 5, 10):
            r = recall_at_k(runs, k)["all"]
            m = mrr_at_k(runs, k)["all"]
            assert m <= r + 1e-12
            assert m >= r / k - 1e-12

    def test_matches_naive_evaluator_on_random_runs(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            runs = []
            for i in range(int(rng.integers(2, 30))):
                n = int(rng.integers(1, 25))
                pattern = [int(rng.uniform() < 0.3) for _ in range(n)]
                extra = int(rng.integers(0, 4))
                runs.append(
                    run_from_pattern(
                        pattern,
                        eligible=sum(pattern) + extra,
                        query_class=f"c{rng.integers(0, 4)}",
                        category=("head", "tail")[int(rng.integers(0, 2))],
                        qid=f"q{i}",
                    )
                )
            # at least one run must be scorable
            if all(r.eligible_relevant_count == 0 for r in runs):
                continue
            depth = int(rng.integers(1, 30))
            ks = (1, 5)
            want = naive_report(runs, depth, ks)
            got_map = mean_average_precision(runs, depth)
            for bucket in ("head", "tail", "all"):
                if want[bucket] is None:
                    assert got_map[bucket] is None
                    continue
                assert abs(got_map[bucket] - want[bucket]["map"]) < 1e-10
                for k in ks:
                    assert abs(recall_at_k(runs, k)[bucket] - want[bucket][f"r@{k}"]) < 1e-10
                    assert abs(mrr_at_k(runs, k)[bucket] - want[bucket][f"mrr@{k}"]) < 1e-10


class TestRunValidation:
    def test_unsorted_scores_rejected(self):
        with pytest.raises(ValueError, match="sorted"):
            RetrievalRun(
                query_record_id="q",
                query_class="X",
                query_category="head",
                ranked=[RankedHit("a", "X", 0.1), RankedHit("b", "X", 0.9)],
                relevant=[True, True],
                eligible_relevant_count=2,
            )

    def test_eligible_below_retrieved_rejected(self):
        with pytest.raises(ValueError, match="eligible"):
            run_from_pattern([1, 1], eligible=1)


class TestEvaluateEndToEnd:
    def _corpus_and_vectors(self):
        # two classes at orthogonal directions; queries sit on the class axes
        train = [
            record("t0", class_id="A", grant_date="2018-01-01"),
            record("t1", class_id="A", grant_date="2018-02-01"),
            record("t2", class_id="B", grant_date="2018-03-01"),
            record("t3", class_id="B", grant_date="2018-04-01"),
            record("t4", class_id="B", grant_date="2018-05-01"),
        ]
        queries = [
            record("q0", class_id="A", grant_date="2019-01-01", split="query"),
            record("q1", class_id="B", grant_date="2019-01-01", split="query"),
        ]
        vectors = {
            "t0": angle_vector(0),
            "t1": angle_vector(8),
            "t2": angle_vector(90),
            "t3": angle_vector(82),
            "t4": angle_vector(74),
            "q0": angle_vector(4),
            "q1": angle_vector(86),
        }
        return train, queries, vectors

    def test_nearest_prior_neighbor_same_class_gives_recall_one(self):
        train, queries, vectors = self._corpus_and_vectors()
        corpus = Corpus.from_records(train + queries)
        index = build_index(
            np.array([vectors[r.record_id] for r in train]),
            [(r.record_id, r.grant_date, r.class_id, r.patent_id) for r in train],
        )
        report = evaluate(
            index,
            queries,
            np.array([vectors[q.record_id] for q in queries]),
            corpus.distribution,
            EvalConfig(k_list=(1, 5), depth=5),
        )
        assert report.buckets["all"]["recall_at"][1] == 1.0
        assert report.buckets["all"]["map"] == 1.0

    def test_query_never_retrieves_itself(self):
        train, queries, vectors = self._corpus_and_vectors()
        # index the query record too: it must still be excluded from its own run
        everything = train + queries
        corpus = Corpus.from_records(everything)
        index = build_index(
            np.array([vectors[r.record_id] for r in everything]),
            [(r.record_id, r.grant_date, r.class_id, r.patent_id) for r in everything],
        )
        runs = build_runs(
            index,
            queries,
            np.array([vectors[q.record_id] for q in queries]),
            corpus.distribution,
            EvalConfig(k_list=(5,), depth=5),
        )
        for run in runs:
            assert run.query_record_id not in [h.record_id for h in run.ranked]

    def test_unseen_query_class_bucketed_as_tail(self, caplog):
        train, _, vectors = self._corpus_and_vectors()
        corpus = Corpus.from_records(train)
        index = build_index(
            np.array([vectors[r.record_id] for r in train]),
            [(r.record_id, r.grant_date, r.class_id, r.patent_id) for r in train],
        )
        stranger = record("qz", class_id="Z", grant_date="2019-06-01", split="query")
        import logging

        with caplog.at_level(logging.WARNING, logger="patret.metrics"):
            runs = build_runs(
                index,
                [stranger],
                angle_vector(45)[None, :],
                corpus.distribution,
                EvalConfig(k_list=(5,), depth=5),
            )
        assert runs[0].query_category == "tail"
        assert any("absent" in message for message in caplog.messages)

    def test_shuffled_labels_give_chance_level_map(self):
        # with class labels assigned independently of geometry, AP per query
        # concentrates near the class prior
        rng = np.random.default_rng(7)
        n, n_query, prior = 400, 300, 0.25
        classes = [f"c{i}" for i in range(4)]
        train = [
            record(
                f"t{i}",
                class_id=classes[int(rng.integers(0, 4))],
                grant_date="2018-01-01",
            )
            for i in range(n)
        ]
        queries = [
            record(
                f"q{i}",
                class_id=classes[int(rng.integers(0, 4))],
                grant_date="2019-01-01",
                split="query",
            )
            for i in range(n_query)
        ]
        corpus = Corpus.from_records(train + queries)
        index = build_index(
            rng.standard_normal((n, 8)),
            [(r.record_id, r.grant_date, r.class_id, r.patent_id) for r in train],
        )
        # full-depth AP: truncation would shrink the chance level below the prior
        report = evaluate(
            index,
            queries,
            rng.standard_normal((n_query, 8)),
            corpus.distribution,
            EvalConfig(k_list=(10,), depth=n),
        )
        # macro mAP over balanced random classes ~ prior (slight upward bias
        # at finite candidate counts); 3 sigma of the per-query AP spread
        # (~0.06 here) over ~75 queries per class
        assert abs(report.buckets["all"]["map"] - prior) < 0.012 + 3 * 0.06 / math.sqrt(n_query / 4)

    def test_temporal_monotonicity_of_eligible_counts(self):
        rng = np.random.default_rng(8)
        base = date(2018, 1, 1)
        train = [
            record(
                f"t{i}",
                class_id="A",
                grant_date=(base + timedelta(days=int(rng.integers(0, 300)))).isoformat(),
            )
            for i in range(40)
        ]
        corpus = Corpus.from_records(train)
        index = build_index(
            rng.standard_normal((40, 4)),
            [(r.record_id, r.grant_date, r.class_id, r.patent_id) for r in train],
        )
        counts = []
        for offset in (50, 150, 250):
            q = record("q", class_id="A", grant_date=(base + timedelta(days=offset)).isoformat(), split="query")
            runs = build_runs(
                index, [q], rng.standard_normal((1, 4)), corpus.distribution,
                EvalConfig(k_list=(5,), depth=5),
            )
            counts.append(runs[0].eligible_relevant_count)
        assert counts == sorted(counts)


class TestWorksheet:
    """Hand-computed 10-record corpus.

    Geometry (unit vectors by angle, degrees): a1=2, a2=26, a3=44, b1=20,
    b2=52, c1=138, c2=10; queries qa=0, qb=40, qc=80.  Cutoffs make
    a3, b2 invisible to qa; everything visible to qb; only a1, a2, b1, c1
    visible to qc.  Rankings by angular distance:

      qa over {a1,c2,b1,a2,c1}: a1(2) c2(10) b1(20) a2(26) c1(138)
          relevant ranks 1,4; eligible 2 -> AP = (1 + 2/4)/2 = 0.75
      qb over all 7:           a3(4) b2(12) a2(14) b1(20) c2(30) a1(38) c1(98)
          relevant ranks 2,4; eligible 2 -> AP = (1/2 + 2/4)/2 = 0.5
      qc over {a1,a2,b1,c1}:   a2(54) c1(58) b1(60) a1(78)
          relevant rank 2; eligible 1 -> AP = (1/2)/1 = 0.5

    Buckets: head={A}: mAP 0.75; tail={B,C}: (0.5+0.5)/2 = 0.5;
    all: (0.75+0.5+0.5)/3 = 7/12.  R@1: qa only -> head 1, tail 0, all 1/3.
    R@5: all hit -> 1.0 everywhere.  MRR@1 = R@1 here.  MRR@5: head 1,
    tail (1/2+1/2)/2 = 0.5, all (1 + 1/2 + 1/2)/3 = 2/3.
    """

    def test_report_matches_committed_expectations(
        self, worksheet_corpus_path, worksheet_angles, worksheet_expected
    ):
        corpus = ingest_metadata(worksheet_corpus_path)
        train = [r for r in corpus.records if r.split == "train"]
        queries = [r for r in corpus.records if r.split == "query"]
        index = build_index(
            np.array([angle_vector(worksheet_angles[r.record_id]) for r in train]),
            [(r.record_id, r.grant_date, r.class_id, r.patent_id) for r in train],
        )
        report = evaluate(
            index,
            queries,
            np.array([angle_vector(worksheet_angles[q.record_id]) for q in queries]),
            corpus.distribution,
            EvalConfig(k_list=(1, 5), depth=5),
        )
        assert report.to_json_dict() == worksheet_expected


class TestPairedTTest:
    def test_hand_computed_example(self):
        samples = PairedSamples(pairs=tuple((d, 0.0) for d in (1, 2, 3, 4, 5)))
        out = paired_t_test(samples)
        # mean 3, sd sqrt(2.5): t = 3 / (sqrt(2.5)/sqrt(5)) = 3*sqrt(2)
        assert abs(out.t - 3.0 * math.sqrt(5) / math.sqrt(2.5)) < 1e-12
        assert abs(out.t - 4.242640687119285) < 1e-12
        assert out.df == 4

    def test_constant_nonzero_differences_rejected(self):
        samples = PairedSamples(pairs=((2.0, 1.0), (3.0, 2.0), (4.0, 3.0)))
        with pytest.raises(ValueError, match="degenerate"):
            paired_t_test(samples)

    def test_minimum_pairs(self):
        with pytest.raises(ValueError, match="at least 2"):
            PairedSamples(pairs=((1.0, 0.0),))

    def test_antisymmetry(self):
        rng = np.random.default_rng(3)
        pairs = tuple((float(a), float(b)) for a, b in rng.uniform(0, 5, size=(12, 2)))
        fwd = paired_t_test(PairedSamples(pairs=pairs))
        rev = paired_t_test(PairedSamples(pairs=tuple((b, a) for a, b in pairs)))
        assert abs(fwd.t + rev.t) < 1e-12
        assert abs(fwd.p_two_tailed - rev.p_two_tailed) < 1e-12

    def test_fifteen_participant_fixture_matches_reported_shape(self):
        # constructed so mean(d) = 3.30 and sd(d) = sqrt(15) exactly:
        # t = 3.30 / (sqrt(15)/sqrt(15)) = 3.30 with df = 14
        z = [1.0] * 7 + [-1.0] * 7 + [0.0]
        diffs = [3.30 + math.sqrt(15) * zi for zi in z]
        samples = PairedSamples(pairs=tuple((d, 0.0) for d in diffs))
        out = paired_t_test(samples)
        assert abs(out.t - 3.30) < 1e-12
        assert out.df == 14
        assert out.p_two_tailed < 0.01

    def test_p_value_against_scipy_reference(self):
        from scipy import stats

        rng = np.random.default_rng(4)
        a = rng.normal(1.0, 1.0, size=10)
        b = rng.normal(0.4, 1.0, size=10)
        ours = paired_t_test(PairedSamples(pairs=tuple(zip(a, b))))
        ref = stats.ttest_rel(a, b)
        assert abs(ours.t - ref.statistic) < 1e-10
        assert abs(ours.p_two_tailed - ref.pvalue) < 1e-10
