"""Embedding model, learned similarity, and the structured ranking score.

The similarity between two points is the cosine of their shared-weight
embeddings. A per-query ranking is scored by averaging, over all
(positive, negative) pairs, the signed similarity difference:

    score = (1 / |P||N|) * sum_{i in P, j in N} y_ij * (sim_i - sim_j)

with y_ij = +1 when positive i is ranked above negative j and -1
otherwise. Embedding norms are stabilized with a 1e-12 additive term so
zero-norm embeddings yield similarity 0 instead of a singularity.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ContractError, DataFormatError, EmptySide
from .ranking_metrics import LabeledBatch

NORM_EPS = 1e-12

CHECKPOINT_MAGIC = "RANKOPT1"

DEFAULT_HIDDEN_DIMS = (64, 32)


def parameter_count(layer_dims: tuple[int, ...]) -> int:
    """Flat parameter count: sum of (fan_in + 1) * fan_out over layers."""
    return sum(
        (fan_in + 1) * fan_out
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:])
    )


@dataclass
class EmbeddingModel:
    """A fully-connected embedding network with a flat parameter vector.

    layer_dims runs input -> hidden... -> embedding. Hidden layers are
    rectified, the output layer is linear. weights stores, per layer, the
    (fan_in, fan_out) weight matrix row-major followed by the fan_out
    biases.
    """

    layer_dims: tuple[int, ...]
    weights: np.ndarray

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or any(d < 1 for d in self.layer_dims):
            raise ContractError(f"bad layer dims {self.layer_dims}")
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        expected = parameter_count(self.layer_dims)
        if self.weights.size != expected:
            raise ContractError(
                f"weights length {self.weights.size}, "
                f"expected {expected} for dims {self.layer_dims}"
            )

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def embedding_dim(self) -> int:
        return self.layer_dims[-1]

    def layers(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield (weight matrix, bias) views into the flat vector."""
        offset = 0
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            w = self.weights[offset : offset + fan_in * fan_out]
            offset += fan_in * fan_out
            b = self.weights[offset : offset + fan_out]
            offset += fan_out
            yield w.reshape(fan_in, fan_out), b

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.layer_dims, self.weights.copy())

    @classmethod
    def initialize(cls, layer_dims, seed: int) -> "EmbeddingModel":
        """Seeded symmetric init: weight matrices uniform in [-a, a] with
        a = sqrt(6 / (fan_in + fan_out)); biases start at zero."""
        dims = tuple(int(d) for d in layer_dims)
        rng = np.random.default_rng(seed)
        chunks = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-a, a, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return cls(dims, np.concatenate(chunks))


def forward_trace(model: EmbeddingModel, X: np.ndarray):
    """Forward pass keeping per-layer activations and rectifier masks.

    Returns (activations, masks): activations[0] is the input matrix,
    activations[-1] the embeddings; masks[l] is the boolean rectifier
    mask of hidden layer l. Used by the learner's backward pass.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ContractError(
            f"input shape {X.shape} incompatible with input dim {model.input_dim}"
        )
    layers = list(model.layers())
    activations = [X]
    masks = []
    h = X
    for li, (w, b) in enumerate(layers):
        z = h @ w + b
        if li < len(layers) - 1:
            mask = z > 0.0
            masks.append(mask)
            h = np.where(mask, z, 0.0)
        else:
            h = z
        activations.append(h)
    return activations, masks


def embed_batch(model: EmbeddingModel, X: np.ndarray) -> np.ndarray:
    """Embed a matrix of points row-wise."""
    activations, _ = forward_trace(model, X)
    return activations[-1]


def embed(model: EmbeddingModel, x: np.ndarray) -> np.ndarray:
    """Embed a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError(f"expected a vector, got shape {x.shape}")
    return embed_batch(model, x[None, :])[0]


def similarity(model: EmbeddingModel, query: np.ndarray, candidate: np.ndarray) -> float:
    """Cosine similarity of the two embeddings, in [-1, 1].

    Symmetric in its arguments and invariant to positive rescaling of
    either embedding. Norms carry a 1e-12 stabilizer, so a zero-norm
    embedding gives similarity 0.
    """
    u = embed(model, query)
    v = embed(model, candidate)
    nu = np.linalg.norm(u) + NORM_EPS
    nv = np.linalg.norm(v) + NORM_EPS
    return float(u @ v / (nu * nv))


def similarity_matrix(model: EmbeddingModel, points: np.ndarray) -> np.ndarray:
    """All-pairs stabilized cosine similarities of the embedded points."""
    E = embed_batch(model, points)
    norms = np.linalg.norm(E, axis=1) + NORM_EPS
    return (E @ E.T) / np.outer(norms, norms)


@dataclass(frozen=True)
class QueryDecomposition:
    """A query's positives (same class) and negatives (all other classes)."""

    query_index: int
    positives: tuple[int, ...]
    negatives: tuple[int, ...]

    def __post_init__(self):
        p, n = set(self.positives), set(self.negatives)
        if p & n:
            raise ContractError("positives and negatives overlap")
        if self.query_index in p or self.query_index in n:
            raise ContractError("query cannot be its own candidate")


@dataclass(frozen=True)
class PairwiseRanking:
    """Pairwise orientation map over P x N: +1 ranks the positive above."""

    query_index: int
    y: dict

    def flipped(self) -> "PairwiseRanking":
        return PairwiseRanking(
            self.query_index, {pair: -v for pair, v in self.y.items()}
        )


def decompose_batch(batch: LabeledBatch) -> list[QueryDecomposition]:
    """One decomposition per query whose class has >= 2 members.

    Queries from singleton classes yield no decomposition but still
    appear in other queries' negative sets.
    """
    out = []
    for q in range(batch.size):
        label = batch.labels[q]
        pos = tuple(
            j for j in range(batch.size) if j != q and batch.labels[j] == label
        )
        if not pos:
            continue
        neg = tuple(j for j in range(batch.size) if batch.labels[j] != label)
        out.append(QueryDecomposition(q, pos, neg))
    return out


def score(decomp: QueryDecomposition, ranking: PairwiseRanking, sims) -> float:
    """The pair-averaged structured score of one query's ranking.

    sims must be indexable by batch index for every candidate in
    P union N (an array over the batch works).
    """
    p, n = len(decomp.positives), len(decomp.negatives)
    if p == 0 or n == 0:
        raise EmptySide(f"query {decomp.query_index}: |P|={p}, |N|={n}")
    total = 0.0
    for i in decomp.positives:
        for j in decomp.negatives:
            total += ranking.y[(i, j)] * (sims[i] - sims[j])
    return total / (p * n)


def consistency_check(y_i_kj: int, y_k_ij: int) -> tuple[str, str, str]:
    """Witness total order for a pair of same-class pairwise constraints.

    For same-class points i, k and cross-class point j: y_i_kj orients k
    against j in i's ranking, y_k_ij orients i against j in k's ranking.
    Returns a permutation of ('i', 'k', 'j'), highest rank first,
    satisfying both. A witness exists for all four assignments; the
    search over the 6 permutations is exhaustive, so failure would be a
    logic error rather than an input condition.
    """
    if y_i_kj not in (1, -1) or y_k_ij not in (1, -1):
        raise ContractError("constraints must be +1 or -1")
    for perm in itertools.permutations(("i", "k", "j")):
        rank = {name: pos for pos, name in enumerate(perm)}
        ok_i = (rank["k"] < rank["j"]) == (y_i_kj == 1)
        ok_k = (rank["i"] < rank["j"]) == (y_k_ij == 1)
        if ok_i and ok_k:
            return perm
    raise AssertionError("no witness order exists; constraint logic is broken")


def save_model(model: EmbeddingModel, path) -> None:
    """Write a checkpoint: ASCII header line with the magic string and
    layer dims, then the flat weights as little-endian float64."""
    header = " ".join([CHECKPOINT_MAGIC] + [str(d) for d in model.layer_dims])
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(model.weights.astype("<f8").tobytes())


def load_model(path) -> EmbeddingModel:
    """Read a checkpoint written by save_model. Bit-exact round trip."""
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    fields = header.decode("ascii", errors="replace").split()
    if not fields or fields[0] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: missing {CHECKPOINT_MAGIC} magic header")
    try:
        dims = tuple(int(d) for d in fields[1:])
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-integer layer dims in header") from exc
    if len(dims) < 2:
        raise DataFormatError(f"{path}: header needs at least 2 layer dims")
    expected = parameter_count(dims)
    weights = np.frombuffer(payload, dtype="<f8")
    if weights.size != expected:
        raise DataFormatError(
            f"{path}: payload holds {weights.size} floats, expected {expected}"
        )
    return EmbeddingModel(dims, weights.copy())
