"""Ranking metrics, classification-via-retrieval, split management and the open-set protocol."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import torch

from .crossmodal import cosine_matrix


# --------------------------------------------------------------------------- ranking


def rank_gallery(query: np.ndarray, gallery: np.ndarray, gallery_ids) -> list[str]:
    """Gallery ids by descending cosine similarity to ``query``; ties by ascending id."""
    return rank_many(np.asarray(query)[None], gallery, gallery_ids)[0]


def rank_many(queries: np.ndarray, gallery: np.ndarray, gallery_ids) -> list[list[str]]:
    cos = cosine_scores(queries, gallery)
    ids = list(gallery_ids)
    id_order = np.argsort(np.argsort(np.asarray(ids, dtype=object), kind="stable"), kind="stable")
    return [[ids[j] for j in np.lexsort((id_order, -row))] for row in cos]


def cosine_scores(queries, gallery) -> np.ndarray:
    q = torch.as_tensor(np.asarray(queries, dtype=np.float64))
    g = torch.as_tensor(np.asarray(gallery, dtype=np.float64))
    return cosine_matrix(q, g).numpy()


def reciprocal_rank(rank: int) -> float:
    return 1.0 / rank


def mrr(ranks) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("no ranks")
    if np.any(ranks < 1):
        raise ValueError("ranks are 1-based")
    return float(np.mean(1.0 / ranks))


def average_precision(ranked_labels, query_label) -> float:
    """Mean of precision@r over the ranks r holding an item of ``query_label``."""
    hits = 0
    total = 0.0
    for r, lab in enumerate(ranked_labels, 1):
        if lab == query_label:
            hits += 1
            total += hits / r
    if hits == 0:
        return 0.0
    return total / hits


def mean_average_precision(ranked_label_lists, query_labels) -> float:
    aps = [average_precision(rl, ql) for rl, ql in zip(ranked_label_lists, query_labels)]
    return float(np.mean(aps))


def classify_via_retrieval(ranked_ids, id_to_class) -> str:
    return id_to_class[ranked_ids[0]]


@dataclass
class QueryResult:
    pair_id: str
    query_class: str
    rank_of_correct: int
    ranked_ids: list[str]
    ap: float
    predicted_class: str


@dataclass
class RetrievalReport:
    queries: list[QueryResult]
    mrr: float
    map: float
    accuracy: float
    per_class_accuracy: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict:
        return {"mrr": self.mrr, "map": self.map, "accuracy": self.accuracy, "n_queries": len(self.queries)}


def evaluate_retrieval(query_emb, query_ids, query_classes, gallery_emb, gallery_ids, gallery_classes) -> RetrievalReport:
    """Rank the gallery for every query. A query's correct item is the gallery
    entry sharing its pair_id; relevant items for AP share its class."""
    id_to_class = dict(zip(gallery_ids, gallery_classes))
    ranked = rank_many(query_emb, gallery_emb, gallery_ids)
    results = []
    for pid, qc, r in zip(query_ids, query_classes, ranked):
        labels = [id_to_class[g] for g in r]
        rank = r.index(pid) + 1 if pid in r else None
        results.append(
            QueryResult(
                pair_id=pid,
                query_class=qc,
                rank_of_correct=rank,
                ranked_ids=r,
                ap=average_precision(labels, qc),
                predicted_class=classify_via_retrieval(r, id_to_class),
            )
        )
    return _aggregate(results)


def _aggregate(results: list[QueryResult]) -> RetrievalReport:
    ranks = [q.rank_of_correct for q in results if q.rank_of_correct is not None]
    per_class = defaultdict(list)
    for q in results:
        per_class[q.query_class].append(q.predicted_class == q.query_class)
    return RetrievalReport(
        queries=results,
        mrr=mrr(ranks) if ranks else float("nan"),
        map=float(np.mean([q.ap for q in results])) if results else float("nan"),
        accuracy=float(np.mean([q.predicted_class == q.query_class for q in results])) if results else float("nan"),
        per_class_accuracy={c: float(np.mean(v)) for c, v in sorted(per_class.items())},
    )


def restrict_queries(report: RetrievalReport, classes) -> RetrievalReport:
    """Re-aggregate a report over the queries of the given classes only (the gallery is unchanged)."""
    keep = {classes} if isinstance(classes, str) else set(classes)
    return _aggregate([q for q in report.queries if q.query_class in keep])


def open_set_report(report: RetrievalReport, open_class: str, gallery_classes) -> dict:
    """Top-1 accuracy on queries of a class never seen in training, next to its gallery prevalence."""
    sub = restrict_queries(report, open_class)
    if not sub.queries:
        raise ValueError(f"no queries of class {open_class!r}")
    g = list(gallery_classes)
    return {
        "open_class": open_class,
        "n_queries": len(sub.queries),
        "top1_accuracy": sub.accuracy,
        "mrr": sub.mrr,
        "map": sub.map,
        "gallery_prevalence": g.count(open_class) / len(g),
    }


# --------------------------------------------------------------------------- splits


class SplitError(ValueError):
    pass


@dataclass
class SplitPlan:
    n_sets: int
    assignment: dict[str, int]

    def members(self, set_id: int) -> list[str]:
        return [p for p, s in self.assignment.items() if s == set_id]


def make_splits(pairs, n_sets: int = 100, seed: int = 0) -> SplitPlan:
    """Class-stratified round-robin assignment of ``(pair_id, class_label)`` pairs.

    Accepts a PairManifest or an iterable of (pair_id, class_label) tuples.
    Every class must split evenly over the sets.
    """
    if hasattr(pairs, "entries"):
        pairs = [(e.pair_id, e.class_label) for e in pairs.entries]
    by_class = defaultdict(list)
    for pid, cls in pairs:
        by_class[cls].append(pid)
    bad = {c: len(v) % n_sets for c, v in by_class.items() if len(v) % n_sets}
    if bad:
        raise SplitError(f"class sizes not divisible by n_sets={n_sets}; remainders: {bad}")
    rng = np.random.default_rng(seed)
    assignment = {}
    for cls in sorted(by_class):
        ids = sorted(by_class[cls])
        for r, j in enumerate(rng.permutation(len(ids))):
            assignment[ids[j]] = r % n_sets
    return SplitPlan(n_sets=n_sets, assignment=assignment)


def fold(plan, seed: int = 0, index: int = 0) -> dict[str, list[int]]:
    """Set roles for cross-validation fold ``index`` (``plan``: SplitPlan, manifest or set count).

    Sets are shuffled once per seed; fold k takes positions 2k and 2k+1 as
    validation and test, so different folds never reuse a held-out set.
    """
    n_sets = plan if isinstance(plan, int) else plan.n_sets
    if n_sets < 3:
        raise SplitError("need at least 3 sets for train/val/test")
    if 2 * index + 1 >= n_sets:
        raise SplitError(f"fold {index} needs {2 * index + 2} held-out sets, only {n_sets} exist")
    order = np.random.default_rng(seed).permutation(n_sets).tolist()
    val, test = order[2 * index], order[2 * index + 1]
    train = sorted(s for s in range(n_sets) if s not in (val, test))
    return {"train": train, "val": [val], "test": [test]}
