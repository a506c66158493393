"""Datasets, synthetic cluster generation, batch sampling, and few-shot
episode evaluation.

Datasets are stored as CSV, one row per point: class id followed by the
feature values. Class splits are disjoint at the class level (few-shot
convention), cut by sorted class id. Episodes draw n_way classes with
k_shot support and n_query query points each; classification assigns
each query the class of its most similar support point, retrieval ranks
every other episode point and reports mean AP.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import ContractError, DataFormatError, PlacementFailed
from .ranking_metrics import (
    LabeledBatch,
    average_precision,
    rank_order_from_scores,
    relevance_mask,
)
from .scoring import EmbeddingModel, similarity_matrix

MEAN_PLACEMENT_ATTEMPTS = 1000


@dataclass
class Dataset:
    """Feature vectors grouped by integer class id."""

    classes: dict[int, np.ndarray]
    dim: int

    def __post_init__(self):
        normalized = {}
        for cid, vectors in self.classes.items():
            arr = np.asarray(vectors, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] == 0:
                raise ContractError(f"class {cid} must be a non-empty 2-D array")
            if arr.shape[1] != self.dim:
                raise ContractError(
                    f"class {cid} has dim {arr.shape[1]}, dataset dim is {self.dim}"
                )
            normalized[int(cid)] = arr
        self.classes = normalized

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.classes))

    @property
    def n_points(self) -> int:
        return sum(len(v) for v in self.classes.values())


def generate_synthetic(
    n_classes: int,
    per_class: int,
    dim: int,
    spread: float,
    separation: float,
    seed: int,
) -> Dataset:
    """Gaussian class clusters with means at pairwise distance >= separation.

    Means are rejection-sampled from a zero-centered Gaussian whose scale
    widens with failed attempts; per-class points are mean + spread * N(0, I).
    Deterministic under seed. Raises PlacementFailed if a mean cannot be
    placed within the attempt budget.
    """
    if n_classes < 1 or per_class < 1 or dim < 1:
        raise ContractError("n_classes, per_class and dim must all be >= 1")
    if not spread > 0:
        raise ContractError(f"spread must be > 0, got {spread}")
    if separation < 0:
        raise ContractError(f"separation must be >= 0, got {separation}")
    rng = np.random.default_rng(seed)
    base_scale = max(separation, spread)
    means: list[np.ndarray] = []
    for cid in range(n_classes):
        for attempt in range(MEAN_PLACEMENT_ATTEMPTS):
            candidate = rng.normal(0.0, base_scale * (1.0 + attempt / 50.0), dim)
            if all(np.linalg.norm(candidate - m) >= separation for m in means):
                means.append(candidate)
                break
        else:
            raise PlacementFailed(
                f"could not place mean {cid} at separation {separation} "
                f"after {MEAN_PLACEMENT_ATTEMPTS} attempts"
            )
    classes = {
        cid: means[cid] + rng.normal(0.0, spread, (per_class, dim))
        for cid in range(n_classes)
    }
    return Dataset(classes, dim)


def save_dataset(dataset: Dataset, path) -> None:
    """Write CSV rows: class_id, then the point's feature values."""
    with open(path, "w", encoding="ascii") as fh:
        for cid in dataset.class_ids:
            for row in dataset.classes[cid]:
                values = ",".join(repr(float(v)) for v in row)
                fh.write(f"{cid},{values}\n")


def load_dataset(path) -> Dataset:
    """Read a CSV dataset; dimension is inferred from the first row and
    enforced on the rest."""
    rows: dict[int, list[np.ndarray]] = {}
    dim = None
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            try:
                cid = int(fields[0])
                vec = np.array([float(v) for v in fields[1:]])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad row: {exc}") from exc
            if vec.size == 0:
                raise DataFormatError(f"{path}:{lineno}: row has no features")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise DataFormatError(
                    f"{path}:{lineno}: {vec.size} features, expected {dim}"
                )
            rows.setdefault(cid, []).append(vec)
    if dim is None:
        raise DataFormatError(f"{path}: empty dataset file")
    return Dataset({cid: np.vstack(vs) for cid, vs in rows.items()}, dim)


def split_by_class(
    dataset: Dataset, fractions: tuple[float, float, float]
) -> tuple[Dataset, Dataset, Dataset]:
    """Class-disjoint train/val/test split, cut by sorted class id.

    Train gets floor(f_train * n) classes, val the next floor(f_val * n),
    test the remainder. Splits may be empty.
    """
    f_train, f_val, f_test = fractions
    if min(fractions) < 0 or f_train + f_val + f_test > 1.0 + 1e-9:
        raise ContractError(f"bad split fractions {fractions}")
    ids = dataset.class_ids
    n_train = int(len(ids) * f_train)
    n_val = int(len(ids) * f_val)
    cut = lambda chosen: Dataset(
        {cid: dataset.classes[cid] for cid in chosen}, dataset.dim
    )
    return (
        cut(ids[:n_train]),
        cut(ids[n_train : n_train + n_val]),
        cut(ids[n_train + n_val :]),
    )


def sample_batch(
    dataset: Dataset, classes_per_batch: int, points_per_class: int, seed
) -> LabeledBatch:
    """Uniform without-replacement batch: classes_per_batch classes (among
    those with enough points), points_per_class points from each.
    Deterministic under seed."""
    if classes_per_batch < 1 or points_per_class < 1:
        raise ContractError("batch shape counts must be >= 1")
    eligible = [
        cid
        for cid in dataset.class_ids
        if len(dataset.classes[cid]) >= points_per_class
    ]
    if len(eligible) < classes_per_batch:
        raise ContractError(
            f"need {classes_per_batch} classes with >= {points_per_class} "
            f"points, found {len(eligible)}"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(np.array(eligible), size=classes_per_batch, replace=False)
    points, labels = [], []
    for cid in chosen:
        members = dataset.classes[int(cid)]
        idx = rng.choice(len(members), size=points_per_class, replace=False)
        points.append(members[idx])
        labels.extend([int(cid)] * points_per_class)
    return LabeledBatch(np.vstack(points), labels)


@dataclass(frozen=True)
class EpisodeSpec:
    """N-way k-shot episode layout."""

    n_way: int
    k_shot: int
    n_query: int
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 2:
            raise ContractError("n_way must be >= 2")
        if self.k_shot < 1 or self.n_query < 1:
            raise ContractError("k_shot and n_query must be >= 1")


class EpisodeResult(NamedTuple):
    accuracy: float
    retrieval_map: float


class EvalSummary(NamedTuple):
    accuracy_mean: float
    accuracy_ci95: float
    map_mean: float
    map_ci95: float
    n_episodes: int


def run_episode(
    model: EmbeddingModel,
    dataset: Dataset,
    spec: EpisodeSpec,
    seed=None,
) -> EpisodeResult:
    """One few-shot episode under the learned similarity.

    Classification: each query point takes the class of its most similar
    support point (ties by ascending support index). Retrieval: each
    query point ranks all other episode points; relevant means same
    class; the episode's mAP averages over query points.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    need = spec.k_shot + spec.n_query
    eligible = [cid for cid in dataset.class_ids if len(dataset.classes[cid]) >= need]
    if len(eligible) < spec.n_way:
        raise ContractError(
            f"need {spec.n_way} classes with >= {need} points, "
            f"found {len(eligible)}"
        )
    chosen = rng.choice(np.array(eligible), size=spec.n_way, replace=False)
    support_x, support_c, query_x, query_c = [], [], [], []
    for cid in chosen:
        members = dataset.classes[int(cid)]
        idx = rng.choice(len(members), size=need, replace=False)
        support_x.append(members[idx[: spec.k_shot]])
        support_c.extend([int(cid)] * spec.k_shot)
        query_x.append(members[idx[spec.k_shot :]])
        query_c.extend([int(cid)] * spec.n_query)

    points = np.vstack(support_x + query_x)
    labels = support_c + query_c
    batch = LabeledBatch(points, labels)
    sims = similarity_matrix(model, points)
    n_support = len(support_c)

    correct = 0
    ap_total = 0.0
    n_queries = len(query_c)
    for qi in range(n_support, n_support + n_queries):
        nearest = int(np.argmax(sims[qi, :n_support]))
        if support_c[nearest] == labels[qi]:
            correct += 1
        order = rank_order_from_scores(qi, sims[qi])
        ap_total += average_precision(order, relevance_mask(batch, qi))
    return EpisodeResult(correct / n_queries, ap_total / n_queries)


def evaluate(
    model: EmbeddingModel,
    dataset: Dataset,
    spec: EpisodeSpec,
    n_episodes: int,
    threads: Optional[int] = None,
) -> EvalSummary:
    """Mean accuracy and retrieval mAP with 95% confidence intervals.

    Episode i uses the seed pair (spec.seed, i), so summaries are pure
    functions of (model, dataset, spec, n_episodes). Episodes may run on
    a thread pool; results reduce in episode order either way.
    """
    if n_episodes < 2:
        raise ContractError("n_episodes must be >= 2 for a confidence interval")

    def one(i: int) -> EpisodeResult:
        return run_episode(model, dataset, spec, seed=(spec.seed, i))

    if threads is not None and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n_episodes)))
    else:
        results = [one(i) for i in range(n_episodes)]

    acc = np.array([r.accuracy for r in results])
    maps = np.array([r.retrieval_map for r in results])
    half = lambda xs: float(1.96 * xs.std(ddof=1) / np.sqrt(n_episodes))
    return EvalSummary(
        float(acc.mean()), half(acc), float(maps.mean()), half(maps), n_episodes
    )
