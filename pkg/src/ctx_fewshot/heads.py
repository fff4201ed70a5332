"""Prototypical and CrossTransformer classification heads.

Feature maps are (N, H', W', D) tensors; positions are flattened row-major so
position index ``m = row * W' + col``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

METRICS = ("sq-euclid", "cosine")


@dataclass
class HeadParams:
    """Linear CrossTransformer heads; one matrix serves as key and query map."""
    key_query: Tensor  # D x d_k
    value: Tensor  # D x d_v

    @classmethod
    def init(cls, feature_dim: int, d_k: int = 128, d_v: int = 128, rng=None):
        if d_k <= 0 or d_v <= 0:
            raise ValueError("d_k and d_v must be positive")
        rng = np.random.default_rng(0) if rng is None else rng
        scale = 1.0 / np.sqrt(feature_dim)
        return cls(Tensor(rng.normal(0, scale, (feature_dim, d_k)), requires_grad=True),
                   Tensor(rng.normal(0, scale, (feature_dim, d_v)), requires_grad=True))

    @property
    def d_k(self) -> int:
        return self.key_query.shape[1]

    @property
    def d_v(self) -> int:
        return self.value.shape[1]

    @property
    def temperature(self) -> float:
        return float(np.sqrt(self.d_k))

    def tensors(self) -> dict:
        return {"head.key_query": self.key_query, "head.value": self.value}


# -- Prototypical Nets -------------------------------------------------------

def proto_prototype(support_vectors) -> Tensor:
    if isinstance(support_vectors, list) and not support_vectors:
        raise ValueError("proto_prototype: empty class")
    vecs = T.as_tensor(support_vectors) if not isinstance(support_vectors, list) \
        else T.stack(support_vectors, axis=0)
    if vecs.ndim != 2 or vecs.shape[0] == 0:
        raise ValueError("proto_prototype: need a nonempty class of vectors")
    return T.mean(vecs, axis=0)


def class_prototypes(vectors: Tensor, labels, n_classes: int) -> Tensor:
    """Mean embedding per class as a (C, D) tensor."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes)
    if len(counts) > n_classes or np.any(counts == 0):
        raise ValueError(f"class_prototypes: every class in 0..{n_classes - 1} needs support")
    avg = np.zeros((n_classes, len(labels)))
    avg[labels, np.arange(len(labels))] = 1.0
    avg /= counts[:, None]
    return T.matmul(T.Tensor(avg), vectors)


def proto_logits(query, prototypes, metric: str = "sq-euclid") -> Tensor:
    """Negative distances from queries (Q, D) to prototypes (C, D)."""
    query, prototypes = T.as_tensor(query), T.as_tensor(prototypes)
    single = query.ndim == 1
    if single:
        query = T.reshape(query, (1, -1))
    if prototypes.ndim != 2 or prototypes.shape[0] < 2:
        raise ValueError("proto_logits: need at least two prototypes")
    if metric == "sq-euclid":
        logits = T.neg(T.pairwise_sq_dist(query, prototypes))
    elif metric == "cosine":
        # -(1 - cos); the constant is kept so logits are true negative distances
        sims = T.matmul(T.l2_normalize(query), T.transpose(T.l2_normalize(prototypes)))
        logits = T.sub(sims, 1.0)
    else:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    return T.reshape(logits, (-1,)) if single else logits


# -- CrossTransformers -----------------------------------------------------------

@dataclass
class Attention:
    """Attention of Q queries over one class: weights/scores are (Q, P, N, M)."""
    weights: Tensor
    scores: Tensor

    def flat_weights(self) -> Tensor:
        q, p, n, m = self.weights.shape
        return T.reshape(self.weights, (q, p, n * m))


def _batched(fm) -> Tensor:
    fm = T.as_tensor(fm)
    return T.reshape(fm, (1,) + fm.shape) if fm.ndim == 3 else fm


def ctx_attention(query_fm, support_fms, params: HeadParams) -> Attention:
    """Softmax over all support images and positions of key . query / sqrt(d_k)."""
    if params.d_k <= 0:
        raise ValueError("ctx_attention: d_k must be positive")
    qf, sf = _batched(query_fm), T.as_tensor(support_fms)
    if qf.shape[1:] != sf.shape[1:]:
        raise T.ShapeError(f"ctx_attention: query maps {qf.shape} and support maps {sf.shape} differ")
    nq, h, w, d = qf.shape
    ns = sf.shape[0]
    p = m = h * w
    queries = T.matmul(T.reshape(qf, (nq * p, d)), params.key_query)  # (Q*P, dk)
    keys = T.matmul(T.reshape(sf, (ns * m, d)), params.key_query)  # (N*M, dk)
    scores = T.matmul(queries, T.transpose(keys))
    weights = T.softmax(T.mul(scores, 1.0 / params.temperature), axis=-1)
    return Attention(T.reshape(weights, (nq, p, ns, m)), T.reshape(scores, (nq, p, ns, m)))


def support_values(support_fms, params: HeadParams) -> Tensor:
    sf = T.as_tensor(support_fms)
    n, h, w, d = sf.shape
    return T.reshape(T.matmul(T.reshape(sf, (n * h * w, d)), params.value), (n, h * w, params.d_v))


def query_values(query_fm, params: HeadParams) -> Tensor:
    qf = _batched(query_fm)
    n, h, w, d = qf.shape
    return T.reshape(T.matmul(T.reshape(qf, (n * h * w, d)), params.value), (n, h * w, params.d_v))


def ctx_aligned_prototype(att, values) -> Tensor:
    """Attention-weighted sum of support values: (Q, P, d_v)."""
    weights = att.flat_weights() if isinstance(att, Attention) else T.as_tensor(att)
    values = T.as_tensor(values)
    if values.ndim == 3:
        values = T.reshape(values, (values.shape[0] * values.shape[1], values.shape[2]))
    if weights.ndim == 4:
        q, p, n, m = weights.shape
        weights = T.reshape(weights, (q, p, n * m))
    if weights.shape[-1] != values.shape[0]:
        raise T.ShapeError(f"ctx_aligned_prototype: weights {weights.shape} vs values {values.shape}")
    return T.matmul(weights, values)


def ctx_distance(proto, qvals) -> Tensor:
    """Mean over query positions of the squared distance; shape (Q,)."""
    proto, qvals = T.as_tensor(proto), T.as_tensor(qvals)
    if proto.shape != qvals.shape:
        raise T.ShapeError(f"ctx_distance: prototype {proto.shape} vs query values {qvals.shape}")
    return T.mean(T.sq_l2(T.sub(proto, qvals), axis=-1), axis=-1)


def ctx_logits(support_fms: Tensor, support_labels, query_fms: Tensor, params: HeadParams,
               n_classes: int | None = None) -> Tensor:
    """(Q, C) logits, one attention block per class."""
    labels = np.asarray(support_labels)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    ns, h, w, d = support_fms.shape
    nq = query_fms.shape[0]
    if query_fms.shape[1:] != support_fms.shape[1:]:
        raise T.ShapeError(f"ctx_logits: query maps {query_fms.shape} vs support maps {support_fms.shape}")
    m = h * w
    sflat = T.reshape(support_fms, (ns * m, d))
    qflat = T.reshape(query_fms, (nq * m, d))
    keys = T.matmul(sflat, params.key_query)
    vals = T.matmul(sflat, params.value)
    queries = T.matmul(qflat, params.key_query)
    qv = T.matmul(qflat, params.value)
    scale = 1.0 / params.temperature
    columns = []
    for c in range(n_classes):
        images = np.flatnonzero(labels == c)
        if images.size == 0:
            raise ValueError(f"ctx_logits: class {c} has no support images")
        rows = (images[:, None] * m + np.arange(m)[None, :]).reshape(-1)
        aligned = T.cross_attention(queries, T.take(keys, rows), T.take(vals, rows), scale)
        sq = T.reshape(T.sq_l2(T.sub(aligned, qv), axis=-1), (nq, m))
        columns.append(T.reshape(T.neg(T.mean(sq, axis=1)), (nq, 1)))
    return T.concat(columns, axis=1)


# -- global-feature logistic regression -------------------------------------------

class LRDivergenceError(FloatingPointError):
    pass


def fit_logistic_regression(x: np.ndarray, y: np.ndarray, n_classes: int, c_reg: float = 10.0,
                            max_iter: int = 500, tol: float = 1e-5):
    """Full-batch gradient descent on L2-regularized multinomial logistic loss.

    Objective: mean cross-entropy + ||W||^2 / (2 * c_reg * n); bias unpenalized.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    reg = 1.0 / (c_reg * n)
    onehot = np.eye(n_classes)[y]
    # softmax cross-entropy Hessian is bounded by 0.5 * ||[x, 1]||^2 per sample
    lipschitz = 0.5 * (np.max((x * x).sum(axis=1)) + 1.0) + reg
    step = 1.0 / lipschitz
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    for it in range(1, max_iter + 1):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.log(np.maximum(p[onehot > 0], 1e-300)).mean() + 0.5 * reg * (w * w).sum()
        if not np.isfinite(loss):
            raise LRDivergenceError(f"logistic regression diverged at iteration {it}")
        r = (p - onehot) / n
        gw = x.T @ r + reg * w
        gb = r.sum(axis=0)
        if np.sqrt((gw * gw).sum() + (gb * gb).sum()) < tol:
            break
        w -= step * gw
        b -= step * gb
    return w, b


def _l2n(x):
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norm, 1e-12)


def lr_logits(pooled_support, support_labels, pooled_query, n_classes: int | None = None,
              c_reg: float = 10.0) -> np.ndarray:
    labels = np.asarray(support_labels)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    w, b = fit_logistic_regression(_l2n(pooled_support), labels, n_classes, c_reg=c_reg)
    return _l2n(pooled_query) @ w + b


def global_lr_combine(ctx_logits_, pooled_support, support_labels, pooled_query,
                      lam: float = 5.0, c_reg: float = 10.0) -> np.ndarray:
    """CTX logits plus ``lam`` times logistic-regression logits on pooled features."""
    base = np.asarray(ctx_logits_.data if isinstance(ctx_logits_, Tensor) else ctx_logits_)
    if lam == 0:
        return base.copy()
    lr = lr_logits(pooled_support, support_labels, pooled_query, base.shape[1], c_reg)
    return (base + lam * lr).astype(base.dtype)


# -- auxiliary global classification ---------------------------------------------

def aux_global_loss(pooled_support, global_labels, weight: Tensor, bias: Tensor) -> Tensor:
    """Cross-entropy of a linear classifier over all training classes."""
    logits = T.add(T.matmul(T.as_tensor(pooled_support), weight), bias)
    return T.cross_entropy(logits, global_labels)
