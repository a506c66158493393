"""Gradient rules and SGD training for the ranking objectives.

The parameter update for one query combines score gradients at two
structures:

    ssvm:  alpha * grad F(y_hinge) - grad F(y_ground_truth)
    dlm:   +/- (1/epsilon) * (alpha * grad F(y_direct) - grad F(y_w))

with y_hinge / y_direct found by loss-augmented inference and y_w by
standard inference. Batch updates sum per-query vectors; queries
without positives contribute nothing. Score gradients are computed by
manual backpropagation through the cosine similarity and the embedding
network, and are checked against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import inference
from .data_episodes import Dataset, sample_batch
from .errors import ContractError, Diverged, EmptyGradient
from .ranking_metrics import LabeledBatch
from .scoring import (
    NORM_EPS,
    EmbeddingModel,
    QueryDecomposition,
    decompose_batch,
    forward_trace,
)

SSVM = "ssvm"
DLM = "dlm"
POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass(frozen=True)
class GradientRule:
    """Which update to run: ssvm, or dlm with a +/- direction.

    epsilon scales the task loss inside the direct argmax (dlm only);
    alpha weights the loss-augmented gradient term in both methods.
    """

    method: str
    direction: Optional[str] = None
    epsilon: float = 1.0
    alpha: float = 10.0

    def __post_init__(self):
        if self.method not in (SSVM, DLM):
            raise ContractError(f"method must be {SSVM!r} or {DLM!r}")
        if self.method == DLM:
            if self.direction not in (POSITIVE, NEGATIVE):
                raise ContractError("dlm needs direction 'positive' or 'negative'")
        elif self.direction is not None:
            raise ContractError("direction applies to dlm only")
        if not self.epsilon > 0:
            raise ContractError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.alpha > 0:
            raise ContractError(f"alpha must be > 0, got {self.alpha}")

    def augmented_objective(self) -> inference.AugmentedObjective:
        """The loss-augmented argmax this rule maximizes."""
        if self.method == SSVM:
            return inference.AugmentedObjective(inference.HINGE)
        mode = (
            inference.DIRECT_POSITIVE
            if self.direction == POSITIVE
            else inference.DIRECT_NEGATIVE
        )
        return inference.AugmentedObjective(mode, self.epsilon)


@dataclass(frozen=True)
class TrainConfig:
    """SGD schedule and batch layout for train()."""

    max_steps: int
    learning_rate: float = 0.001
    decay_every: int = 2000
    decay_factor: float = 0.75
    classes_per_batch: int = 4
    points_per_class: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ContractError("max_steps must be >= 1")
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be >= 0")
        if self.decay_every < 1:
            raise ContractError("decay_every must be >= 1")
        if not 0 < self.decay_factor <= 1:
            raise ContractError("decay_factor must be in (0, 1]")
        if self.classes_per_batch < 2 or self.points_per_class < 2:
            raise ContractError(
                "training batches need >= 2 classes and >= 2 points per class"
            )

    def lr_at(self, step: int) -> float:
        """Learning rate applied at a 1-based step, under the decay
        schedule (multiply by decay_factor every decay_every steps)."""
        return self.learning_rate * self.decay_factor ** (step // self.decay_every)


@dataclass(frozen=True)
class StepMetrics:
    """One metrics-log row: the CSV columns step,lr,objective,batch_map."""

    step: int
    lr: float
    objective: float
    batch_map: float

    def csv_row(self) -> str:
        return f"{self.step},{self.lr!r},{self.objective!r},{self.batch_map!r}"


METRICS_CSV_HEADER = "step,lr,objective,batch_map"


def _similarity_row(embeddings: np.ndarray, query: int) -> np.ndarray:
    norms = np.linalg.norm(embeddings, axis=1) + NORM_EPS
    return (embeddings @ embeddings[query]) / (norms * norms[query])


def _interleaving_coefficients(
    decomp: QueryDecomposition, sims, itl: inference.Interleaving
) -> dict[int, float]:
    """dF/d(similarity) per candidate for a fixed interleaving.

    A positive ranked above b of the negatives sees coefficient
    (|N| - 2b) / (|P||N|); a negative below a of the positives sees
    (|P| - 2a) / (|P||N|).
    """
    p, n = len(decomp.positives), len(decomp.negatives)
    pos_block, neg_block = inference.canonical_blocks(decomp, sims)
    pn = p * n
    coef = {}
    for k, r in enumerate(itl.positions):
        above = r - 1 - k  # negatives ranked above this positive
        coef[pos_block[k]] = (n - 2 * above) / pn
    neg_ranks = sorted(set(range(1, p + n + 1)) - set(itl.positions))
    for m, r in enumerate(neg_ranks):
        above = r - 1 - m  # positives ranked above this negative
        coef[neg_block[m]] = (p - 2 * above) / pn
    return coef


def _accumulate_similarity_gradient(
    grad_emb: np.ndarray,
    embeddings: np.ndarray,
    query: int,
    coef: dict[int, float],
) -> None:
    """Add d(sum_c coef_c * sim(query, c)) / d(embeddings) into grad_emb."""
    cands = np.fromiter(coef.keys(), dtype=np.int64, count=len(coef))
    weights = np.fromiter(coef.values(), dtype=np.float64, count=len(coef))
    u = embeddings[query]
    ru = np.linalg.norm(u)
    nu = ru + NORM_EPS
    V = embeddings[cands]
    rv = np.linalg.norm(V, axis=1)
    nv = rv + NORM_EPS
    s = (V @ u) / (nu * nv)
    # d sim/d v = u/(nu*nv) - sim * v/(rv*nv); the rv in the denominator
    # comes from differentiating the stabilized norm rv + eps.
    inv_rv = np.where(rv > 0.0, 1.0 / np.where(rv > 0.0, rv, 1.0), 0.0)
    dv = (weights / nv)[:, None] * (
        u[None, :] / nu - (s * inv_rv)[:, None] * V
    )
    np.add.at(grad_emb, cands, dv)
    du = (weights / nv) @ V / nu
    if ru > 0.0:
        du -= (weights @ s) * u / (ru * nu)
    grad_emb[query] += du


def _backprop(model: EmbeddingModel, activations, masks, grad_out: np.ndarray):
    """Flat parameter gradient from an embedding-space gradient matrix."""
    layers = list(model.layers())
    pieces = [None] * len(layers)
    g = grad_out
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        dw = activations[li].T @ g
        db = g.sum(axis=0)
        pieces[li] = (dw, db)
        if li > 0:
            g = (g @ w.T) * masks[li - 1]
    return np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in pieces])


def score_gradient(
    model: EmbeddingModel,
    batch: LabeledBatch,
    decomp: QueryDecomposition,
    itl: inference.Interleaving,
) -> np.ndarray:
    """Exact gradient of the query's score F with respect to the flat
    parameter vector, holding the pairwise ranking fixed."""
    activations, masks = forward_trace(model, batch.points)
    embeddings = activations[-1]
    sims = _similarity_row(embeddings, decomp.query_index)
    coef = _interleaving_coefficients(decomp, sims, itl)
    grad_emb = np.zeros_like(embeddings)
    _accumulate_similarity_gradient(grad_emb, embeddings, decomp.query_index, coef)
    return _backprop(model, activations, masks, grad_emb)


def finite_difference_score_gradient(
    model: EmbeddingModel,
    batch: LabeledBatch,
    decomp: QueryDecomposition,
    itl: inference.Interleaving,
    h: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of the same fixed-ranking score;
    the verification oracle for score_gradient."""
    base_sims = _similarity_row(
        forward_trace(model, batch.points)[0][-1], decomp.query_index
    )
    coef = _interleaving_coefficients(decomp, base_sims, itl)
    involved = sorted(coef) + [decomp.query_index]
    X = batch.points[involved]
    qpos = len(involved) - 1
    weights = np.array([coef[i] for i in involved[:-1]])

    def f_of(w: np.ndarray) -> float:
        m = EmbeddingModel(model.layer_dims, w)
        emb = forward_trace(m, X)[0][-1]
        norms = np.linalg.norm(emb, axis=1) + NORM_EPS
        sims = (emb[:-1] @ emb[qpos]) / (norms[:-1] * norms[qpos])
        return float(weights @ sims)

    grad = np.zeros_like(model.weights)
    w = model.weights.copy()
    for c in range(w.size):
        orig = w[c]
        w[c] = orig + h
        up = f_of(w)
        w[c] = orig - h
        down = f_of(w)
        w[c] = orig
        grad[c] = (up - down) / (2.0 * h)
    return grad


def _rule_structures(rule, decomp, sims):
    """(augmented, reference) interleavings for one query under a rule."""
    objective = rule.augmented_objective()
    gt = inference.ground_truth_interleaving(decomp)
    y_aug = inference.loss_augmented_inference(decomp, sims, gt, objective)
    y_ref = gt if rule.method == SSVM else inference.standard_inference(decomp, sims)
    return y_aug, y_ref, objective


def _batch_update(model: EmbeddingModel, batch: LabeledBatch, rule: GradientRule,
                  query_indices: Optional[Sequence[int]] = None):
    """Summed update vector plus step diagnostics.

    Returns (gradient, mean augmented objective, batch mAP) where the
    mAP is over usable queries under standard inference.
    """
    decomps = decompose_batch(batch)
    if query_indices is not None:
        wanted = set(query_indices)
        decomps = [d for d in decomps if d.query_index in wanted]
    if not decomps:
        raise EmptyGradient("no query in the batch has a positive")

    scale = 1.0
    if rule.method == DLM:
        scale = 1.0 / rule.epsilon
        if rule.direction == NEGATIVE:
            scale = -scale

    activations, masks = forward_trace(model, batch.points)
    embeddings = activations[-1]
    grad_emb = np.zeros_like(embeddings)
    objective_total = 0.0
    ap_total = 0.0
    for decomp in decomps:
        sims = _similarity_row(embeddings, decomp.query_index)
        y_aug, y_ref, objective = _rule_structures(rule, decomp, sims)
        c_aug = _interleaving_coefficients(decomp, sims, y_aug)
        c_ref = _interleaving_coefficients(decomp, sims, y_ref)
        combined = {
            i: scale * (rule.alpha * c_aug[i] - c_ref[i]) for i in c_aug
        }
        _accumulate_similarity_gradient(
            grad_emb, embeddings, decomp.query_index, combined
        )
        objective_total += inference.objective_value(decomp, sims, y_aug, objective)
        ap_total += inference.interleaving_ap(
            inference.standard_inference(decomp, sims)
        )
    grad = _backprop(model, activations, masks, grad_emb)
    return grad, objective_total / len(decomps), ap_total / len(decomps)


def batch_gradient(
    model: EmbeddingModel,
    batch: LabeledBatch,
    rule: GradientRule,
    query_indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Summed per-query update vector for the whole batch.

    query_indices restricts the sum to those queries (used to check
    gradient additivity). Raises EmptyGradient when no usable query
    remains.
    """
    grad, _, _ = _batch_update(model, batch, rule, query_indices)
    return grad


def train(
    model: EmbeddingModel,
    dataset: Dataset,
    rule: GradientRule,
    config: TrainConfig,
    on_step: Optional[Callable[[StepMetrics], None]] = None,
) -> tuple[EmbeddingModel, list[StepMetrics]]:
    """Plain SGD on the summed batch update, with step-count lr decay.

    Batches are drawn from the dataset with seeds derived from
    (config.seed, step), so identical configs replay identical runs.
    The input model is not modified; the trained copy is returned along
    with one StepMetrics row per step (diagnostics are measured on the
    pre-update weights). Raises Diverged if any weight goes non-finite.
    """
    trained = model.copy()
    log: list[StepMetrics] = []
    for step in range(1, config.max_steps + 1):
        lr = config.lr_at(step)
        batch = sample_batch(
            dataset,
            config.classes_per_batch,
            config.points_per_class,
            seed=(config.seed, step),
        )
        grad, objective, batch_map = _batch_update(trained, batch, rule)
        trained.weights -= lr * grad
        if not np.all(np.isfinite(trained.weights)):
            raise Diverged(step)
        row = StepMetrics(step, lr, objective, batch_map)
        log.append(row)
        if on_step is not None:
            on_step(row)
    return trained, log
