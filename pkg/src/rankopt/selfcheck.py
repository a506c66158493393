"""Oracle and gradient verification suites.

Each check pits a production code path against an independent oracle:
definition-level AP recounting, exhaustive interleaving enumeration,
full-permutation enumeration, central finite differences, and the
exhaustive 3-point order table. The CLI selfcheck mode and the
acceptance tests both run these.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import inference
from .learner import finite_difference_score_gradient, score_gradient
from .ranking_metrics import (
    LabeledBatch,
    RankOrder,
    average_precision,
    mean_average_precision,
    rank_order_from_scores,
    relevance_mask,
)
from .scoring import EmbeddingModel, QueryDecomposition, consistency_check, forward_trace


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    checked: int
    failures: int
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.checked} checked, {self.failures} failed ({self.detail})"


def definition_average_precision(order: RankOrder, relevant: frozenset) -> float:
    """AP recomputed literally: for every rank j holding a relevant
    point, recount precision@j from scratch, then average over the
    relevant set. Deliberately quadratic and independent of the
    library's running-sum implementation."""
    total = 0.0
    for j in range(1, len(order.order) + 1):
        if order.order[j - 1] in relevant:
            hits_at_j = sum(1 for idx in order.order[:j] if idx in relevant)
            total += hits_at_j / j
    return total / len(relevant)


def _random_labeled_batch(rng, max_batch: int) -> LabeledBatch:
    size = int(rng.integers(3, max_batch + 1))
    n_classes = int(rng.integers(2, min(size, 4) + 1))
    labels = rng.integers(0, n_classes, size)
    labels[0], labels[1] = 0, 1  # guarantee two distinct classes
    points = rng.normal(size=(size, 2))
    return LabeledBatch(points, labels)


def check_ap_oracle(instances: int = 1000, max_batch: int = 12,
                    seed: int = 0, tol: float = 1e-12) -> CheckResult:
    """Library AP and mAP vs definition-level recounting on random
    batches with random rankings."""
    rng = np.random.default_rng(seed)
    failures = 0
    worst = 0.0
    for _ in range(instances):
        usable = []
        while not usable:  # skip batches where every class is a singleton
            batch = _random_labeled_batch(rng, max_batch)
            usable = [
                q for q in range(batch.size) if relevance_mask(batch, q).relevant
            ]
        orders = []
        oracle_aps = []
        for q in usable:
            perm = rng.permutation([i for i in range(batch.size) if i != q])
            order = RankOrder(q, tuple(int(i) for i in perm))
            orders.append(order)
            rel = relevance_mask(batch, q)
            lib = average_precision(order, rel)
            ora = definition_average_precision(order, rel.relevant)
            worst = max(worst, abs(lib - ora))
            if abs(lib - ora) > tol:
                failures += 1
        lib_map = mean_average_precision(batch, orders)
        ora_map = sum(
            definition_average_precision(o, relevance_mask(batch, o.query_index).relevant)
            for o in orders
        ) / len(orders)
        worst = max(worst, abs(lib_map - ora_map))
        if abs(lib_map - ora_map) > tol:
            failures += 1
    return CheckResult(
        "ap-oracle", failures == 0, instances, failures, f"max |diff| {worst:.3g}"
    )


def _random_instance(rng, max_side: int = 5):
    """A synthetic one-query decomposition with random similarities."""
    p = int(rng.integers(1, max_side + 1))
    n = int(rng.integers(1, max_side + 1))
    decomp = QueryDecomposition(
        0, tuple(range(1, p + 1)), tuple(range(p + 1, p + n + 1))
    )
    sims = rng.uniform(-1.0, 1.0, p + n + 1)
    return decomp, sims


def check_inference_oracle(per_mode: int = 500, seed: int = 0,
                           tol: float = 1e-9) -> CheckResult:
    """Efficient solver vs exhaustive enumeration, all four modes,
    epsilon in {0.1, 1, 10}."""
    rng = np.random.default_rng(seed)
    epsilons = (0.1, 1.0, 10.0)
    failures = 0
    checked = 0
    worst = 0.0
    for mode in inference.MODES:
        for k in range(per_mode):
            decomp, sims = _random_instance(rng)
            objective = inference.AugmentedObjective(mode, epsilons[k % 3])
            gt = inference.ground_truth_interleaving(decomp)
            if mode == inference.STANDARD:
                solved = inference.standard_inference(decomp, sims)
            else:
                solved = inference.loss_augmented_inference(decomp, sims, gt, objective)
            value = inference.objective_value(decomp, sims, solved, objective)
            _, oracle_value = inference.brute_force_augmented(decomp, sims, gt, objective)
            gap = abs(value - oracle_value)
            worst = max(worst, gap)
            checked += 1
            if gap > tol:
                failures += 1
    return CheckResult(
        "inference-oracle", failures == 0, checked, failures, f"max |gap| {worst:.3g}"
    )


def check_full_permutation(instances: int = 200, max_total: int = 7,
                           seed: int = 0, tol: float = 1e-9) -> CheckResult:
    """No full candidate permutation may beat the best interleaving:
    validates the canonical within-block ordering restriction."""
    rng = np.random.default_rng(seed)
    epsilons = (0.1, 1.0, 10.0)
    failures = 0
    worst = 0.0
    for k in range(instances):
        p = int(rng.integers(1, max_total))
        n = int(rng.integers(1, max_total - p + 1))
        decomp = QueryDecomposition(
            0, tuple(range(1, p + 1)), tuple(range(p + 1, p + n + 1))
        )
        sims = rng.uniform(-1.0, 1.0, p + n + 1)
        mode = inference.MODES[k % 4]
        objective = inference.AugmentedObjective(mode, epsilons[k % 3])
        gt = inference.ground_truth_interleaving(decomp)
        _, best_itl = inference.brute_force_augmented(decomp, sims, gt, objective)
        best_perm = inference.best_full_permutation_value(decomp, sims, objective)
        excess = best_perm - best_itl
        worst = max(worst, excess)
        if excess > tol:
            failures += 1
    return CheckResult(
        "full-permutation",
        failures == 0,
        instances,
        failures,
        f"max excess {worst:.3g}",
    )


def _min_hidden_preactivation(model: EmbeddingModel, X: np.ndarray) -> float:
    """Smallest |pre-activation| across hidden layers; finite differences
    are only trusted away from rectifier kinks."""
    layers = list(model.layers())
    h = X
    smallest = np.inf
    for li, (w, b) in enumerate(layers):
        z = h @ w + b
        if li < len(layers) - 1:
            smallest = min(smallest, float(np.abs(z).min()))
            h = np.maximum(z, 0.0)
        else:
            h = z
    return smallest


def random_gradient_triple(rng):
    """A (model, batch, decomposition, interleaving) draw suitable for
    finite-difference checking: kept clear of rectifier kinks and
    near-zero embeddings, where the difference quotient is invalid."""
    while True:
        dim = int(rng.integers(3, 6))
        hidden = int(rng.integers(4, 9))
        out = int(rng.integers(3, 6))
        model = EmbeddingModel.initialize(
            (dim, hidden, out), seed=int(rng.integers(0, 2**31))
        )
        size = int(rng.integers(4, 9))
        labels = rng.integers(0, 3, size)
        labels[0], labels[1] = 0, 1
        batch = LabeledBatch(rng.normal(size=(size, dim)), labels)
        usable = [
            q for q in range(size)
            if relevance_mask(batch, q).relevant
            and any(c != batch.labels[q] for c in batch.labels)
        ]
        if not usable:
            continue
        q = int(rng.choice(usable))
        pos = tuple(
            j for j in range(size) if j != q and batch.labels[j] == batch.labels[q]
        )
        neg = tuple(
            j for j in range(size) if batch.labels[j] != batch.labels[q]
        )
        decomp = QueryDecomposition(q, pos, neg)
        p, n = len(pos), len(neg)
        ranks = np.sort(rng.choice(np.arange(1, p + n + 1), size=p, replace=False))
        itl = inference.Interleaving(q, tuple(int(r) for r in ranks))
        # Central differences at h=1e-5 need the h-neighborhood smooth and
        # well-conditioned: no rectifier kink within reach, and embedding
        # norms large enough that cosine curvature stays in the quadratic
        # regime (truncation ~ h^2 / norm^2 must sit far below 1e-4).
        if _min_hidden_preactivation(model, batch.points) < 1e-3:
            continue
        emb = forward_trace(model, batch.points)[0][-1]
        if np.linalg.norm(emb, axis=1).min() < 0.05:
            continue
        return model, batch, decomp, itl


def check_gradients(triples: int = 100, h: float = 1e-5, seed: int = 0,
                    rel_tol: float = 1e-4, grad_floor: float = 1e-8) -> CheckResult:
    """Backpropagated score gradient vs central finite differences on
    every coordinate whose derivative exceeds grad_floor."""
    rng = np.random.default_rng(seed)
    failures = 0
    worst = 0.0
    for _ in range(triples):
        model, batch, decomp, itl = random_gradient_triple(rng)
        analytic = score_gradient(model, batch, decomp, itl)
        numeric = finite_difference_score_gradient(model, batch, decomp, itl, h=h)
        live = np.abs(analytic) > grad_floor
        if not live.any():
            continue
        rel = np.abs(analytic[live] - numeric[live]) / np.abs(analytic[live])
        worst = max(worst, float(rel.max()))
        if rel.max() >= rel_tol:
            failures += 1
    return CheckResult(
        "gradient-fd", failures == 0, triples, failures, f"max rel err {worst:.3g}"
    )


def check_consistency_table() -> CheckResult:
    """All four joint assignments of the two same-class constraints must
    admit a witness order; cross-checked by enumerating all 6 orders."""
    failures = 0
    checked = 0
    for y_i_kj, y_k_ij in itertools.product((1, -1), repeat=2):
        checked += 1
        witness = consistency_check(y_i_kj, y_k_ij)
        satisfying = []
        for perm in itertools.permutations(("i", "k", "j")):
            rank = {name: pos for pos, name in enumerate(perm)}
            if ((rank["k"] < rank["j"]) == (y_i_kj == 1)) and (
                (rank["i"] < rank["j"]) == (y_k_ij == 1)
            ):
                satisfying.append(perm)
        if not satisfying or witness not in satisfying:
            failures += 1
    return CheckResult(
        "consistency-table", failures == 0, checked, failures, "4 assignments x 6 orders"
    )


def run_all(seed: int = 0, scale: float = 1.0) -> list[CheckResult]:
    """Every suite at counts scaled by `scale` (1.0 = acceptance counts)."""
    k = lambda n: max(1, int(n * scale))
    return [
        check_ap_oracle(instances=k(1000), seed=seed),
        check_inference_oracle(per_mode=k(500), seed=seed),
        check_full_permutation(instances=k(200), seed=seed),
        check_gradients(triples=k(100), seed=seed),
        check_consistency_table(),
    ]
