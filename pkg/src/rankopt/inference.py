"""Standard and loss-augmented inference over per-query interleavings.

A query's ranking search space is the set of interleavings of its
positives and negatives, with each block internally ordered by
descending similarity (ties by ascending index). The four objectives
share one form,

    score(y) + c * (1 - AP(y))

with c = 0 (standard), 1 (hinge margin rescaling), +epsilon (direct
positive) or -epsilon (direct negative). The efficient solver is a
dynamic program over (positives placed, negatives placed) states; its
correctness contract is agreement with the exhaustive oracle in this
module, which enumerates every interleaving and evaluates the
definition formulas directly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, EmptySide
from .scoring import PairwiseRanking, QueryDecomposition

STANDARD = "standard"
HINGE = "hinge"
DIRECT_POSITIVE = "direct_positive"
DIRECT_NEGATIVE = "direct_negative"

MODES = (STANDARD, HINGE, DIRECT_POSITIVE, DIRECT_NEGATIVE)
AUGMENTED_MODES = (HINGE, DIRECT_POSITIVE, DIRECT_NEGATIVE)

BRUTE_FORCE_MAX = 16
FULL_PERMUTATION_MAX = 8


@dataclass(frozen=True)
class Interleaving:
    """Ranks of a query's positives among all its candidates.

    positions[k] is the 1-based rank of the (k+1)-th canonical positive;
    canonical within-block order makes the sequence strictly increasing.
    """

    query_index: int
    positions: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(int(r) for r in self.positions))
        if any(r < 1 for r in self.positions):
            raise ContractError("positions are 1-based ranks")
        if any(a >= b for a, b in zip(self.positions, self.positions[1:])):
            raise ContractError("positions must be strictly increasing")


@dataclass(frozen=True)
class AugmentedObjective:
    """Which inference objective to maximize, and epsilon for DLM modes."""

    mode: str
    epsilon: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.mode in (DIRECT_POSITIVE, DIRECT_NEGATIVE) and not self.epsilon > 0:
            raise ContractError(f"direct modes need epsilon > 0, got {self.epsilon}")

    @property
    def loss_coefficient(self) -> float:
        """Coefficient c of the task-loss term in score + c * (1 - AP)."""
        if self.mode == STANDARD:
            return 0.0
        if self.mode == HINGE:
            return 1.0
        if self.mode == DIRECT_POSITIVE:
            return float(self.epsilon)
        return -float(self.epsilon)


def canonical_blocks(decomp: QueryDecomposition, sims):
    """Positives and negatives sorted by descending similarity, ties by
    ascending batch index: the fixed within-block candidate orders."""
    key = lambda i: (-sims[i], i)
    return (
        tuple(sorted(decomp.positives, key=key)),
        tuple(sorted(decomp.negatives, key=key)),
    )


def _require_sides(decomp: QueryDecomposition) -> tuple[int, int]:
    p, n = len(decomp.positives), len(decomp.negatives)
    if p == 0 or n == 0:
        raise EmptySide(f"query {decomp.query_index}: |P|={p}, |N|={n}")
    return p, n


def ground_truth_interleaving(decomp: QueryDecomposition) -> Interleaving:
    """The all-positives-first interleaving: zero loss, maximal AP."""
    p, _ = _require_sides(decomp)
    return Interleaving(decomp.query_index, tuple(range(1, p + 1)))


def _check_ground_truth(decomp: QueryDecomposition, ground_truth: Interleaving):
    expected = tuple(range(1, len(decomp.positives) + 1))
    if ground_truth.positions != expected:
        raise ContractError(
            "ground truth must be the all-positives-first interleaving"
        )


def standard_inference(decomp: QueryDecomposition, sims) -> Interleaving:
    """Highest-scoring interleaving: all candidates sorted by descending
    similarity (ties by ascending index)."""
    p, _ = _require_sides(decomp)
    pos = set(decomp.positives)
    merged = sorted(
        decomp.positives + decomp.negatives, key=lambda i: (-sims[i], i)
    )
    positions = tuple(r for r, i in enumerate(merged, start=1) if i in pos)
    return Interleaving(decomp.query_index, positions)


def interleaving_order(decomp: QueryDecomposition, sims, itl: Interleaving):
    """Merged candidate order (batch indices) an interleaving describes."""
    p, n = _require_sides(decomp)
    if len(itl.positions) != p or (itl.positions and itl.positions[-1] > p + n):
        raise ContractError("interleaving does not fit this decomposition")
    pos_block, neg_block = canonical_blocks(decomp, sims)
    merged = [-1] * (p + n)
    for k, r in enumerate(itl.positions):
        merged[r - 1] = pos_block[k]
    neg_iter = iter(neg_block)
    for t in range(p + n):
        if merged[t] == -1:
            merged[t] = next(neg_iter)
    return tuple(merged)


def pairwise_ranking(
    decomp: QueryDecomposition, sims, itl: Interleaving
) -> PairwiseRanking:
    """The P x N orientation map induced by an interleaving."""
    order = interleaving_order(decomp, sims, itl)
    rank = {idx: r for r, idx in enumerate(order)}
    y = {
        (i, j): 1 if rank[i] < rank[j] else -1
        for i in decomp.positives
        for j in decomp.negatives
    }
    return PairwiseRanking(decomp.query_index, y)


def interleaving_ap(itl: Interleaving) -> float:
    """AP of an interleaving: mean over positives k of k / rank_k."""
    if not itl.positions:
        raise ContractError("empty interleaving has no AP")
    return float(
        np.mean(np.arange(1, len(itl.positions) + 1) / np.asarray(itl.positions))
    )


def objective_value(
    decomp: QueryDecomposition,
    sims,
    itl: Interleaving,
    objective: AugmentedObjective,
) -> float:
    """Evaluate score + c * (1 - AP) for one interleaving by the
    definition formulas (pairwise sum for the score, positionwise
    precision for AP)."""
    p, n = _require_sides(decomp)
    pos_block, neg_block = canonical_blocks(decomp, sims)
    phi_p = np.array([sims[i] for i in pos_block])
    phi_n = np.array([sims[j] for j in neg_block])
    rpos = np.asarray(itl.positions)
    if rpos.size != p or (rpos.size and rpos[-1] > p + n):
        raise ContractError("interleaving does not fit this decomposition")
    all_ranks = np.arange(1, p + n + 1)
    rneg = all_ranks[~np.isin(all_ranks, rpos)]
    y = np.where(rpos[:, None] < rneg[None, :], 1.0, -1.0)
    f = float((y * (phi_p[:, None] - phi_n[None, :])).sum() / (p * n))
    ap = interleaving_ap(itl)
    return f + objective.loss_coefficient * (1.0 - ap)


def loss_augmented_inference(
    decomp: QueryDecomposition,
    sims,
    ground_truth: Interleaving,
    objective: AugmentedObjective,
) -> Interleaving:
    """Argmax of the augmented objective over all interleavings.

    Dynamic program over (positives placed, negatives placed) states;
    each placement contributes its pairings with already-placed
    opposite-block candidates to the score, and each positive placement
    contributes its precision term to AP. Exact ties during
    reconstruction prefer placing the next positive, which yields the
    lexicographically smallest optimal positions vector.
    """
    if objective.mode not in AUGMENTED_MODES:
        raise ContractError(f"loss-augmented inference needs one of {AUGMENTED_MODES}")
    _check_ground_truth(decomp, ground_truth)
    return _dp_argmax(decomp, sims, objective)


def _dp_argmax(
    decomp: QueryDecomposition, sims, objective: AugmentedObjective
) -> Interleaving:
    p, n = _require_sides(decomp)
    pos_block, neg_block = canonical_blocks(decomp, sims)
    phi_p = [sims[i] for i in pos_block]
    phi_n = [sims[j] for j in neg_block]
    sp = [0.0] * (p + 1)
    for a in range(p):
        sp[a + 1] = sp[a] + phi_p[a]
    sn = [0.0] * (n + 1)
    for b in range(n):
        sn[b + 1] = sn[b] + phi_n[b]
    pn = float(p * n)
    c = objective.loss_coefficient

    # Value gained when the next positive/negative enters rank a + b + 1.
    def gain_pos(a, b):
        return (sn[b] - b * phi_p[a]) / pn - c * (a + 1) / (p * (a + b + 1))

    def gain_neg(a, b):
        return (sp[a] - a * phi_n[b]) / pn

    neg_inf = float("-inf")
    best = [[0.0] * (n + 1) for _ in range(p + 1)]
    for a in range(p, -1, -1):
        for b in range(n, -1, -1):
            if a == p and b == n:
                continue
            via_pos = gain_pos(a, b) + best[a + 1][b] if a < p else neg_inf
            via_neg = gain_neg(a, b) + best[a][b + 1] if b < n else neg_inf
            best[a][b] = via_pos if via_pos >= via_neg else via_neg

    positions = []
    a = b = 0
    while a < p or b < n:
        via_pos = gain_pos(a, b) + best[a + 1][b] if a < p else neg_inf
        via_neg = gain_neg(a, b) + best[a][b + 1] if b < n else neg_inf
        if via_pos >= via_neg:
            positions.append(a + b + 1)
            a += 1
        else:
            b += 1
    return Interleaving(decomp.query_index, tuple(positions))


def all_interleaving_values(
    decomp: QueryDecomposition, sims, objective: AugmentedObjective
):
    """Every interleaving with its objective value, in lexicographic
    position order, evaluated by the definition formulas."""
    p, n = _require_sides(decomp)
    if p + n > BRUTE_FORCE_MAX:
        raise ContractError(
            f"|P|+|N| = {p + n} exceeds enumeration bound {BRUTE_FORCE_MAX}"
        )
    pos_block, neg_block = canonical_blocks(decomp, sims)
    phi_p = np.array([sims[i] for i in pos_block])
    phi_n = np.array([sims[j] for j in neg_block])
    combos = np.array(
        list(itertools.combinations(range(1, p + n + 1), p)), dtype=np.int64
    )
    k = combos.shape[0]
    slot_is_pos = np.zeros((k, p + n), dtype=bool)
    slot_is_pos[np.arange(k)[:, None], combos - 1] = True
    cols = np.broadcast_to(np.arange(1, p + n + 1), (k, p + n))
    rneg = cols[~slot_is_pos].reshape(k, n)

    y = np.where(combos[:, :, None] < rneg[:, None, :], 1.0, -1.0)
    f = (y * (phi_p[None, :, None] - phi_n[None, None, :])).sum(axis=(1, 2)) / (p * n)
    ap = (np.arange(1, p + 1) / combos).mean(axis=1)
    values = f + objective.loss_coefficient * (1.0 - ap)
    return combos, values


def brute_force_augmented(
    decomp: QueryDecomposition,
    sims,
    ground_truth: Interleaving,
    objective: AugmentedObjective,
) -> tuple[Interleaving, float]:
    """Exact argmax by enumerating all C(|P|+|N|, |P|) interleavings.

    Ties break toward the lexicographically smallest positions vector.
    Definition-level evaluation throughout; this is the verification
    oracle for the dynamic program.
    """
    _check_ground_truth(decomp, ground_truth)
    combos, values = all_interleaving_values(decomp, sims, objective)
    k = int(np.argmax(values))  # first maximum: combos are in lex order
    return Interleaving(decomp.query_index, tuple(combos[k])), float(values[k])


def best_full_permutation_value(
    decomp: QueryDecomposition, sims, objective: AugmentedObjective
) -> float:
    """Maximum augmented objective over ALL candidate permutations, not
    just canonical interleavings.

    Validates the within-block ordering assumption: no full permutation
    may beat the best interleaving. Factorial enumeration; bounded to
    small instances.
    """
    p, n = _require_sides(decomp)
    total = p + n
    if total > FULL_PERMUTATION_MAX:
        raise ContractError(
            f"|P|+|N| = {total} exceeds permutation bound {FULL_PERMUTATION_MAX}"
        )
    pos_block, neg_block = canonical_blocks(decomp, sims)
    phi_p = np.array([sims[i] for i in pos_block])
    phi_n = np.array([sims[j] for j in neg_block])
    perms = np.array(list(itertools.permutations(range(total))), dtype=np.int64)
    ranks = np.argsort(perms, axis=1)  # ranks[k, cand] = 0-based rank
    rpos = ranks[:, :p] + 1
    rneg = ranks[:, p:] + 1
    y = np.where(rpos[:, :, None] < rneg[:, None, :], 1.0, -1.0)
    f = (y * (phi_p[None, :, None] - phi_n[None, None, :])).sum(axis=(1, 2)) / (p * n)
    ap = (np.arange(1, p + 1) / np.sort(rpos, axis=1)).mean(axis=1)
    values = f + objective.loss_coefficient * (1.0 - ap)
    return float(values.max())
