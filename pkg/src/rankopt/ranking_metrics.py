"""Exact Precision@j, Average Precision, and mean Average Precision.

All quantities are finite rational sums evaluated in double precision.
AP sums accumulate in rank order so results are deterministic. Queries
whose relevant set is empty have no defined AP; callers decide whether
to skip them (training and mAP both do).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, NoRelevantPoints


@dataclass(frozen=True)
class LabeledBatch:
    """Feature vectors with integer class labels.

    points is coerced to a float64 matrix of shape (n, d); labels to a
    tuple of ints of length n. Requires n >= 2, d >= 1, and at least two
    distinct labels (otherwise no query has a negative).
    """

    points: np.ndarray
    labels: tuple[int, ...]

    def __init__(self, points, labels):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2:
            raise ContractError(f"points must be 2-D, got shape {pts.shape}")
        labs = tuple(int(c) for c in labels)
        if len(labs) != pts.shape[0]:
            raise ContractError(
                f"{pts.shape[0]} points but {len(labs)} labels"
            )
        if pts.shape[0] < 2:
            raise ContractError("a batch needs at least 2 points")
        if pts.shape[1] < 1:
            raise ContractError("feature dimension must be >= 1")
        if len(set(labs)) < 2:
            raise ContractError("a batch needs at least two distinct classes")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labs)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class RankOrder:
    """A query's ranking over the rest of the batch.

    order[j] is the index of the (j+1)-th most similar point; it must be
    a permutation of all non-query indices.
    """

    query_index: int
    order: tuple[int, ...]

    def __post_init__(self):
        if self.query_index in self.order:
            raise ContractError("query_index must not appear in its own order")
        if len(set(self.order)) != len(self.order):
            raise ContractError("order contains duplicate indices")

    def __len__(self) -> int:
        return len(self.order)


@dataclass(frozen=True)
class RelevanceMask:
    """Indices sharing the query's class, query itself excluded."""

    query_index: int
    relevant: frozenset[int]

    def __post_init__(self):
        if self.query_index in self.relevant:
            raise ContractError("query_index cannot be relevant to itself")


def relevance_mask(batch: LabeledBatch, query_index: int) -> RelevanceMask:
    """Relevant set of a query: same-class points, the query excluded."""
    label = batch.labels[query_index]
    rel = frozenset(
        j for j, c in enumerate(batch.labels) if c == label and j != query_index
    )
    return RelevanceMask(query_index, rel)


def rank_order_from_scores(query_index: int, scores: Sequence[float]) -> RankOrder:
    """Canonical RankOrder induced by per-point scores.

    Non-query indices are sorted by descending score; ties break by
    ascending index. scores[query_index] is ignored.
    """
    scores = np.asarray(scores, dtype=np.float64)
    candidates = [i for i in range(len(scores)) if i != query_index]
    candidates.sort(key=lambda i: (-scores[i], i))
    return RankOrder(query_index, tuple(candidates))


def precision_at(order: RankOrder, rel: RelevanceMask, j: int) -> float:
    """Fraction of the top-j ranked points that are relevant.

    Raises IndexError when j is outside [1, len(order)] and ContractError
    when order and rel belong to different queries.
    """
    if order.query_index != rel.query_index:
        raise ContractError(
            f"order is for query {order.query_index}, "
            f"mask for query {rel.query_index}"
        )
    if not 1 <= j <= len(order):
        raise IndexError(f"j={j} outside [1, {len(order)}]")
    hits = sum(1 for k in order.order[:j] if k in rel.relevant)
    return hits / j


def average_precision(order: RankOrder, rel: RelevanceMask) -> float:
    """Mean of Prec@j over the positions j that hold relevant points.

    Raises NoRelevantPoints when the relevant set is empty (AP is
    undefined there).
    """
    if order.query_index != rel.query_index:
        raise ContractError(
            f"order is for query {order.query_index}, "
            f"mask for query {rel.query_index}"
        )
    if not rel.relevant:
        raise NoRelevantPoints(f"query {rel.query_index} has no relevant points")
    hits = 0
    total = 0.0
    for j, idx in enumerate(order.order, start=1):
        if idx in rel.relevant:
            hits += 1
            total += hits / j
    return total / len(rel.relevant)


def ap_task_loss(order: RankOrder, rel: RelevanceMask) -> float:
    """Task loss of a ranking: 1 - AP."""
    return 1.0 - average_precision(order, rel)


def mean_average_precision(batch: LabeledBatch, orders: Sequence[RankOrder]) -> float:
    """Arithmetic mean of per-query AP over the given orders.

    Every order's query must have a non-empty relevant set; pass one
    order per usable query.
    """
    if not orders:
        raise ContractError("mean_average_precision needs at least one order")
    total = 0.0
    for order in orders:
        total += average_precision(order, relevance_mask(batch, order.query_index))
    return total / len(orders)
