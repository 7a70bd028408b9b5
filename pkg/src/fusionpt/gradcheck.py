"""Central finite-difference validation of the analytic loss gradients.

Each check perturbs individual matrix entries of the loss operands by h,
re-evaluates the loss value, and compares the resulting numerical gradient
against the closed-form one. The comparison metric is the Euclidean norm of
the difference over the larger of the two norms, so near-zero entries do
not blow up the score.
"""

from __future__ import annotations

import numpy as np

from .losses import d2s_loss, info_nce


def finite_difference(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar fn w.r.t. every entry of x."""
    grad = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        plus = x.copy()
        plus[idx] += h
        minus = x.copy()
        minus[idx] -= h
        grad[idx] = (fn(plus) - fn(minus)) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / scale


def _unit_rows(rng: np.random.Generator, m: int, c: int) -> np.ndarray:
    rows = rng.standard_normal((m, c))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def check_contrastive(rng: np.random.Generator, tau: float, h: float = 1e-5) -> float:
    """Worst relative error across both gradients of one random instance."""
    m = int(rng.integers(2, 9))
    c = int(rng.integers(2, 17))
    q = _unit_rows(rng, m, c)
    k = _unit_rows(rng, m, c)
    res = info_nce(q, k, tau)
    fd_q = finite_difference(lambda x: info_nce(x, k, tau).value, q, h)
    fd_k = finite_difference(lambda x: info_nce(q, x, tau).value, k, h)
    return max(relative_error(res.grad_q, fd_q), relative_error(res.grad_k, fd_k))


def check_d2s(rng: np.random.Generator, h: float = 1e-5) -> float:
    m = int(rng.integers(2, 9))
    c = int(rng.integers(2, 17))
    qd = _unit_rows(rng, m, c)
    qt = _unit_rows(rng, m, c)
    res = d2s_loss(qd, qt)
    fd_d = finite_difference(lambda x: d2s_loss(x, qt).value, qd, h)
    fd_t = finite_difference(lambda x: d2s_loss(qd, x).value, qt, h)
    return max(relative_error(res.grad_q, fd_d), relative_error(res.grad_k, fd_t))


def run_loss_check(instances: int = 100, seed: int = 0,
                   taus=(1.0, 0.1, 0.07), tolerance: float = 1e-5) -> dict:
    """Validate all four objective kernels; returns a machine-readable report.

    The spatial, intra-sensor temporal, and cross-sensor temporal objectives
    share the contrastive kernel and are checked under their own names with
    independently drawn operands; the dense-to-sparse kernel is checked
    separately.
    """
    rng = np.random.default_rng(seed)
    report = {"instances": instances, "taus": list(taus),
              "tolerance": tolerance, "losses": {}}
    for name in ("spatial", "temporal", "cross"):
        worst = 0.0
        for _ in range(instances):
            for tau in taus:
                worst = max(worst, check_contrastive(rng, tau))
        report["losses"][name] = {"max_rel_err": worst, "pass": worst < tolerance}
    worst = max(check_d2s(rng) for _ in range(instances))
    report["losses"]["d2s"] = {"max_rel_err": worst, "pass": worst < tolerance}
    report["pass"] = all(entry["pass"] for entry in report["losses"].values())
    return report
