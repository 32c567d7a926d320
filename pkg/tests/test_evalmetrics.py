import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neuroretrieve.evalmetrics import (
    SplitError,
    average_precision,
    evaluate_retrieval,
    fold,
    make_splits,
    mrr,
    open_set_report,
    rank_gallery,
    restrict_queries,
)


def brute_force(queries, q_ids, q_cls, gallery, g_ids, g_cls):
    """Pure-python cosine ranking, reciprocal rank and AP, one query at a time."""
    rrs, aps = [], []
    for q, qid, qc in zip(queries, q_ids, q_cls):
        scored = []
        for g, gid, gc in zip(gallery, g_ids, g_cls):
            cos = sum(a * b for a, b in zip(q, g)) / (math.sqrt(sum(a * a for a in q)) * math.sqrt(sum(b * b for b in g)))
            scored.append((-cos, gid, gc))
        scored.sort()
        rrs.append(1.0 / (1 + [s[1] for s in scored].index(qid)))
        hits, prec = 0, []
        for r, s in enumerate(scored, 1):
            if s[2] == qc:
                hits += 1
                prec.append(hits / r)
        aps.append(sum(prec) / len(prec))
    return sum(rrs) / len(rrs), sum(aps) / len(aps)


def random_gallery(seed):
    rng = np.random.default_rng(seed)
    n, d, k = int(rng.integers(3, 30)), int(rng.integers(2, 8)), int(rng.integers(1, 5))
    ids = [f"p{i:03d}" for i in range(n)]
    cls = [f"c{int(c)}" for c in rng.integers(0, k, n)]
    gallery = rng.standard_normal((n, d))
    queries = gallery + rng.uniform(0, 2) * rng.standard_normal((n, d))
    return queries, ids, cls, gallery, ids, cls


def test_metrics_match_brute_force_on_100_galleries():
    for seed in range(100):
        args = random_gallery(seed)
        report = evaluate_retrieval(*args)
        want_mrr, want_map = brute_force(*args)
        assert abs(report.mrr - want_mrr) <= 1e-12
        assert abs(report.map - want_map) <= 1e-12


def test_ties_break_by_ascending_id():
    gallery = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    assert rank_gallery(np.array([1.0, 0.0]), gallery, ["b", "a", "c"]) == ["a", "b", "c"]


@pytest.mark.parametrize(
    "labels,q,ap",
    [
        (["x", "y", "x"], "x", (1 + 2 / 3) / 2),
        (["y", "x"], "x", 0.5),
        (["y", "y"], "x", 0.0),
        (["x"], "x", 1.0),
    ],
)
def test_average_precision_cases(labels, q, ap):
    assert average_precision(labels, q) == pytest.approx(ap, abs=1e-15)


@given(st.lists(st.sampled_from("ab"), min_size=1, max_size=30))
def test_average_precision_bounds(labels):
    ap = average_precision(labels, "a")
    assert 0.0 <= ap <= 1.0
    if "a" in labels:
        k = labels.count("a")
        n = len(labels)
        worst = sum(i / (n - k + i) for i in range(1, k + 1)) / k  # all hits ranked last
        assert ap >= worst - 1e-12
        assert (ap == 1.0) == (labels[:k] == ["a"] * k)


@given(st.lists(st.integers(1, 100), min_size=1, max_size=50))
def test_mrr_bounds(ranks):
    v = mrr(ranks)
    assert 1 / max(ranks) - 1e-15 <= v <= 1.0


def test_mrr_rejects_bad_ranks():
    with pytest.raises(ValueError):
        mrr([])
    with pytest.raises(ValueError):
        mrr([0, 1])


def test_perfect_embeddings_give_perfect_scores():
    g = np.eye(4)
    report = evaluate_retrieval(g, list("abcd"), list("wxyz"), g, list("abcd"), list("wxyz"))
    assert report.mrr == report.map == report.accuracy == 1.0
    assert report.per_class_accuracy == {c: 1.0 for c in "wxyz"}


def test_open_set_report_and_restriction():
    g = np.eye(4)
    q = np.array([[1, 0, 0, 0], [1, 0, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=float)
    report = evaluate_retrieval(q, list("abcd"), ["u", "u", "v", "v"], g, list("abcd"), ["u", "u", "v", "v"])
    sub = restrict_queries(report, "u")
    assert len(sub.queries) == 2 and sub.mrr == pytest.approx(0.75)
    rep = open_set_report(report, "v", ["u", "u", "v", "v"])
    assert rep["top1_accuracy"] == 1.0 and rep["gallery_prevalence"] == 0.5
    with pytest.raises(ValueError):
        open_set_report(report, "w", ["u"])


def test_hundred_balanced_disjoint_sets():
    pairs = [(f"c{c}_{i}", f"c{c}") for c in range(40) for i in range(1000)]
    plan = make_splits(pairs, n_sets=100, seed=0)
    assert len(plan.assignment) == 40_000
    counts = Counter((s, pid.split("_")[0]) for pid, s in plan.assignment.items())
    assert len(counts) == 100 * 40 and set(counts.values()) == {10}


def test_synthetic_five_set_split():
    pairs = [(f"c{c}_{i}", f"c{c}") for c in range(8) for i in range(25)]
    plan = make_splits(pairs, n_sets=5, seed=7)
    for s in range(5):
        assert Counter(p.split("_")[0] for p in plan.members(s)) == {f"c{c}": 5 for c in range(8)}


def test_uneven_classes_are_rejected():
    with pytest.raises(SplitError):
        make_splits([("a", "x"), ("b", "x"), ("c", "x")], n_sets=2)


@given(n_sets=st.integers(3, 20), seed=st.integers(0, 100))
def test_folds_partition_the_sets(n_sets, seed):
    seen = set()
    for k in range((n_sets - 2) // 2 + 1):
        if 2 * k + 1 >= n_sets:
            break
        roles = fold(n_sets, seed, k)
        assert sorted(roles["train"] + roles["val"] + roles["test"]) == list(range(n_sets))
        held = set(roles["val"] + roles["test"])
        assert not held & seen
        seen |= held


def test_fold_limits():
    with pytest.raises(SplitError):
        fold(5, 0, 2)
    with pytest.raises(SplitError):
        fold(2)
