"""Contrastive and consistency objectives with closed-form gradients.

All four training terms reduce to two kernels over row-matched, unit-norm
embedding matrices Q (point side) and K (image side):

* info_nce: softmax cross-entropy over the M x M similarity logits at
  temperature tau, positives on the diagonal. The same kernel serves the
  spatial, intra-sensor temporal, and cross-sensor temporal terms; only the
  operands change.
* d2s_loss: mean cosine distance between index-matched rows, tying the
  dense-cloud embeddings to the keyframe embeddings.

Gradients are exact derivatives w.r.t. both matrix arguments and flow into
the image side as well; whether they reach a frozen backbone is the
trainer's concern. Values use max-subtracted log-sum-exp so small tau stays
finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Row-norm acceptance window. Loose enough that finite-difference harnesses
# (h ~ 1e-5) can perturb entries of a unit matrix without tripping it.
_NORM_ATOL = 1e-4


@dataclass(frozen=True)
class LossResult:
    value: float
    grad_q: np.ndarray
    grad_k: np.ndarray


def _as_rows(x, name: str) -> np.ndarray:
    data = getattr(x, "data", x)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError(f"{name} contains non-finite values")
    return data


def _require_normalized(data: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(data, axis=1)
    bad = np.abs(norms - 1.0) > _NORM_ATOL
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"{name} row {row} has norm {norms[row]!r}; rows must be unit length")


def info_nce(q, k, tau: float) -> LossResult:
    """Contrastive loss over row-matched embeddings with temperature tau.

    value = -(1/M) sum_i log softmax_j(<q_i, k_j> / tau)[i]; gradients are
    the exact derivatives w.r.t. the entries of both matrices.
    """
    q = _as_rows(q, "Q")
    k = _as_rows(k, "K")
    if q.shape != k.shape:
        raise ValueError(f"shape mismatch: Q {q.shape} vs K {k.shape}")
    if q.shape[0] < 1:
        raise ValueError("at least one region is required")
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    _require_normalized(q, "Q")
    _require_normalized(k, "K")

    m = q.shape[0]
    logits = (q @ k.T) / tau
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    softmax = exp / exp.sum(axis=1, keepdims=True)
    log_softmax_diag = shifted.diagonal() - np.log(exp.sum(axis=1))
    value = -log_softmax_diag.mean()

    dlogits = (softmax - np.eye(m)) / m
    grad_q = dlogits @ k / tau
    grad_k = dlogits.T @ q / tau
    return LossResult(float(value), grad_q, grad_k)


def d2s_loss(q_dense, q_sparse) -> LossResult:
    """Mean cosine distance (1 - <q_i^d, q_i^t>) between matched rows."""
    qd = _as_rows(q_dense, "Q_dense")
    qt = _as_rows(q_sparse, "Q_sparse")
    if qd.shape != qt.shape:
        raise ValueError(f"shape mismatch: {qd.shape} vs {qt.shape}")
    if qd.shape[0] < 1:
        raise ValueError("at least one region is required")
    _require_normalized(qd, "Q_dense")
    _require_normalized(qt, "Q_sparse")

    m = qd.shape[0]
    value = float(np.mean(1.0 - np.sum(qd * qt, axis=1)))
    return LossResult(value, -qt / m, -qd / m)


# ---------------------------------------------------------------------------
# Composite objective
# ---------------------------------------------------------------------------

PREV, CURR, NEXT = "prev", "curr", "next"


@dataclass(frozen=True)
class LossWeights:
    spatial: float = 1.0
    temporal: float = 1.0
    cross: float = 1.0
    d2s: float = 1.0


@dataclass
class CompositeBatch:
    """Embeddings for three consecutive frames plus the dense cloud.

    q[frame] / k[frame] are the frame's unit-row superpoint / superpixel
    embeddings (each frame keeps its own region count). Match arrays are
    (n, 2) with column 0 indexing current-frame region rows and column 1
    indexing the paired rows of the prev / next / dense side, as produced by
    superpoints.match_regions(curr_index, other_index).
    """

    q: dict[str, np.ndarray]
    k: dict[str, np.ndarray]
    q_dense: np.ndarray
    match_prev: np.ndarray = field(default_factory=lambda: np.empty((0, 2), dtype=int))
    match_next: np.ndarray = field(default_factory=lambda: np.empty((0, 2), dtype=int))
    match_dense: np.ndarray = field(default_factory=lambda: np.empty((0, 2), dtype=int))


@dataclass
class CompositeResult:
    total: float
    terms: dict[str, float]
    missing: tuple[str, ...]
    grads: dict[str, np.ndarray]


def _pairs(match) -> np.ndarray:
    pairs = np.asarray(match, dtype=np.int64)
    if pairs.size == 0:
        return pairs.reshape(0, 2)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValueError(f"match list must be (n, 2), got shape {pairs.shape}")
    return pairs


def composite_objective(batch: CompositeBatch, tau: float,
                        weights: LossWeights = LossWeights()) -> CompositeResult:
    """Weighted sum of the four objectives with per-term breakdown.

    total = w_sc * mean(3 spatial terms)
          + w_tc * mean(2 intra-sensor temporal terms)
          + w_cc * mean(2 cross-sensor temporal terms)
          + w_d2s * dense-to-sparse term

    A term whose operand pairing is empty contributes 0 and is listed in
    ``missing``; the enclosing mean keeps its nominal divisor.
    """
    grads = {f"q_{f}": np.zeros_like(batch.q[f]) for f in (PREV, CURR, NEXT)}
    grads.update({f"k_{f}": np.zeros_like(batch.k[f]) for f in (PREV, CURR, NEXT)})
    grads["q_dense"] = np.zeros_like(batch.q_dense)
    terms: dict[str, float] = {}
    missing: list[str] = []

    def spatial(frame: str) -> float:
        name = f"spatial_{frame}"
        value = 0.0
        if batch.q[frame].shape[0] == 0:
            missing.append(name)
        else:
            res = info_nce(batch.q[frame], batch.k[frame], tau)
            scale = weights.spatial / 3.0
            grads[f"q_{frame}"] += scale * res.grad_q
            grads[f"k_{frame}"] += scale * res.grad_k
            value = res.value
        terms[name] = value
        return value

    def contrast_matched(name: str, other_key: str, pairs_raw, scale: float) -> float:
        pairs = _pairs(pairs_raw)
        value = 0.0
        if pairs.shape[0] == 0:
            missing.append(name)
        else:
            ci, oi = pairs[:, 0], pairs[:, 1]
            side, frame = other_key.split("_", 1)
            other = (batch.q if side == "q" else batch.k)[frame]
            res = info_nce(batch.q[CURR][ci], other[oi], tau)
            np.add.at(grads[f"q_{CURR}"], ci, scale * res.grad_q)
            np.add.at(grads[other_key], oi, scale * res.grad_k)
            value = res.value
        terms[name] = value
        return value

    spatial_mean = (spatial(PREV) + spatial(CURR) + spatial(NEXT)) / 3.0

    w_tc = weights.temporal / 2.0
    temporal_mean = (
        contrast_matched("temporal_next", f"q_{NEXT}", batch.match_next, w_tc)
        + contrast_matched("temporal_prev", f"q_{PREV}", batch.match_prev, w_tc)
    ) / 2.0

    w_cc = weights.cross / 2.0
    cross_mean = (
        contrast_matched("cross_next", f"k_{NEXT}", batch.match_next, w_cc)
        + contrast_matched("cross_prev", f"k_{PREV}", batch.match_prev, w_cc)
    ) / 2.0

    d2s_pairs = _pairs(batch.match_dense)
    d2s_value = 0.0
    if d2s_pairs.shape[0] == 0:
        missing.append("d2s")
    else:
        ci, di = d2s_pairs[:, 0], d2s_pairs[:, 1]
        res = d2s_loss(batch.q_dense[di], batch.q[CURR][ci])
        np.add.at(grads["q_dense"], di, weights.d2s * res.grad_q)
        np.add.at(grads[f"q_{CURR}"], ci, weights.d2s * res.grad_k)
        d2s_value = res.value
    terms["d2s"] = d2s_value

    total = (weights.spatial * spatial_mean + weights.temporal * temporal_mean
             + weights.cross * cross_mean + weights.d2s * d2s_value)
    terms["spatial"] = spatial_mean
    terms["temporal"] = temporal_mean
    terms["cross"] = cross_mean
    terms["total"] = total
    return CompositeResult(float(total), terms, tuple(missing), grads)
