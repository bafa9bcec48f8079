"""One-vs-rest linear max-margin classification and score-closeness ranking.

Per class c the trainer solves

    min_{w,b}  (||w||^2 + b^2)/2 + (C/n) * sum_i max(0, 1 - y_i (w.x_i + b))

by dual coordinate descent on the bias-augmented features. The per-sample
cost C/n makes the solution invariant to duplicating the training set.

Retrieval ranks a database by closeness of classifier scores to the
query's. Three readings of "closeness within the same class" are
supported; the default filters the database to the query's predicted
class and ranks by absolute difference of that class's score, backfilling
by full score-vector distance when the class pool is short. Backfilled
entries continue the closeness scale from the last in-class value so the
reported column stays non-decreasing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, ParameterError

RULE_CLASS_FILTERED = "class-filtered"
RULE_CLASS_SCORE = "class-score"
RULE_SCORE_DISTANCE = "score-distance"
RANKING_RULES = (RULE_CLASS_FILTERED, RULE_CLASS_SCORE, RULE_SCORE_DISTANCE)

_PG_TOLERANCE = 1e-10


@dataclass
class SvmModel:
    """Per-class linear scorers: score_c(v) = weights[c] . v + biases[c]."""

    weights: np.ndarray  # (C, dim)
    biases: np.ndarray   # (C,)
    c_reg: float
    seed: int = 0
    epochs: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32)
        self.biases = np.asarray(self.biases, dtype=np.float32)
        if self.weights.ndim != 2 or len(self.weights) < 2:
            raise ParameterError("model needs at least 2 classes")
        if len(self.biases) != len(self.weights):
            raise ParameterError("bias count must match class count")

    @property
    def n_classes(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class RankedResult:
    """Retrieval outcome: ids with their true classes and closeness values."""

    predicted_class: int
    ids: list
    classes: np.ndarray
    closeness: np.ndarray


def _solve_binary(xaug: np.ndarray, y: np.ndarray, cost: float, epochs: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Dual coordinate descent for the L1-loss SVM on augmented features."""
    n = len(xaug)
    q_diag = np.einsum("ij,ij->i", xaug, xaug)
    alpha = np.zeros(n)
    w = np.zeros(xaug.shape[1])
    for _ in range(max(1, epochs)):
        order = rng.permutation(n)
        max_violation = 0.0
        for i in order:
            g = y[i] * float(xaug[i] @ w) - 1.0
            if alpha[i] <= 0.0:
                pg = min(g, 0.0)
            elif alpha[i] >= cost:
                pg = max(g, 0.0)
            else:
                pg = g
            if abs(pg) > _PG_TOLERANCE:
                max_violation = max(max_violation, abs(pg))
                new_alpha = min(max(alpha[i] - g / q_diag[i], 0.0), cost)
                delta = new_alpha - alpha[i]
                if delta != 0.0:
                    w += delta * y[i] * xaug[i]
                    alpha[i] = new_alpha
        if max_violation < _PG_TOLERANCE:
            break
    return w


def primal_objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray,
                     c_reg: float) -> float:
    """Primal value of the per-class problem (used by the solver contract)."""
    margins = 1.0 - y * (x @ w + b)
    hinge = np.maximum(margins, 0.0).sum()
    return 0.5 * (float(w @ w) + b * b) + (c_reg / len(x)) * float(hinge)


def train_svm(vectors: np.ndarray, labels: np.ndarray, c_reg: float = 1.0,
              seed: int = 0, epochs: int = 1000) -> SvmModel:
    """Train one-vs-rest linear scorers; deterministic under a fixed seed."""
    x = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(labels):
        raise ParameterError("vectors and labels disagree in length")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ParameterError("need at least 2 classes to train")
    if not np.array_equal(classes, np.arange(len(classes))):
        raise ParameterError("labels must be dense in [0, C)")
    if c_reg <= 0:
        raise ParameterError("C must be positive")

    xaug = np.hstack([x, np.ones((len(x), 1))])
    cost = c_reg / len(x)
    weights = np.zeros((len(classes), x.shape[1]), dtype=np.float64)
    biases = np.zeros(len(classes), dtype=np.float64)
    for c in classes:
        rng = np.random.default_rng(np.random.SeedSequence([seed, int(c)]))
        y = np.where(labels == c, 1.0, -1.0)
        waug = _solve_binary(xaug, y, cost, epochs, rng)
        weights[c] = waug[:-1]
        biases[c] = waug[-1]
    return SvmModel(weights, biases, c_reg, seed, epochs)


def score(model: SvmModel, v: np.ndarray) -> np.ndarray:
    """Per-class decision scores for one vector."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if len(v) != model.dim:
        raise DimensionMismatchError(f"vector dim {len(v)} != model dim {model.dim}")
    return model.weights.astype(np.float64) @ v + model.biases.astype(np.float64)


def score_many(model: SvmModel, vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[1] != model.dim:
        raise DimensionMismatchError(
            f"vector dim {vectors.shape[1]} != model dim {model.dim}")
    return vectors @ model.weights.T.astype(np.float64) + model.biases.astype(np.float64)


def predict(model: SvmModel, v: np.ndarray) -> int:
    """Argmax class; ties resolve to the lowest class index."""
    return int(np.argmax(score(model, v)))


def retrieve(model: SvmModel, query: np.ndarray, db_ids: list,
             db_vectors: np.ndarray, db_classes: np.ndarray, k: int,
             rule: str = RULE_CLASS_FILTERED) -> RankedResult:
    """Rank the database by score closeness to the query; return the top k."""
    if k < 1:
        raise ParameterError("k must be >= 1")
    if rule not in RANKING_RULES:
        raise ParameterError(f"unknown ranking rule {rule!r}")
    db_vectors = np.asarray(db_vectors, dtype=np.float64)
    db_classes = np.asarray(db_classes, dtype=np.int64)
    n = len(db_ids)
    if n == 0:
        raise ParameterError("database is empty")

    s_q = score(model, query)
    predicted = int(np.argmax(s_q))
    db_scores = score_many(model, db_vectors)

    if rule == RULE_SCORE_DISTANCE:
        closeness = np.linalg.norm(db_scores - s_q, axis=1)
        order = np.argsort(closeness, kind="stable")[:k]
        return RankedResult(predicted, [db_ids[i] for i in order],
                            db_classes[order], closeness[order])

    class_gap = np.abs(db_scores[:, predicted] - s_q[predicted])
    if rule == RULE_CLASS_SCORE:
        order = np.argsort(class_gap, kind="stable")[:k]
        return RankedResult(predicted, [db_ids[i] for i in order],
                            db_classes[order], class_gap[order])

    db_predicted = np.argmax(db_scores, axis=1)
    in_class = np.flatnonzero(db_predicted == predicted)
    order_in = in_class[np.argsort(class_gap[in_class], kind="stable")][:k]
    chosen = list(order_in)
    closeness = list(class_gap[order_in])
    if len(chosen) < min(k, n):
        base = closeness[-1] if closeness else 0.0
        rest = np.setdiff1d(np.arange(n), order_in, assume_unique=False)
        dist = np.linalg.norm(db_scores[rest] - s_q, axis=1)
        for j in np.argsort(dist, kind="stable"):
            chosen.append(int(rest[j]))
            closeness.append(base + float(dist[j]))
            if len(chosen) == min(k, n):
                break
    idx = np.array(chosen, dtype=np.int64)
    return RankedResult(predicted, [db_ids[i] for i in idx],
                        db_classes[idx], np.array(closeness))
