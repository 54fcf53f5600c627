"""Shared numerical kernels: weighted logistic IRLS, damped Newton root
finding, adaptive Gauss-Kronrod quadrature, and seeded substream RNG."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


class DomainError(ValueError):
    pass


IRLS_TOL = 1e-8
IRLS_MAX_ITER = 50
COEF_CAP = 30.0  # odds must stay finite for IPW stability


@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray  # intercept first
    converged: bool
    iterations: int
    grad_norm: float
    separation: bool = False
    ridged: bool = False


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def fit_logistic(features: np.ndarray, labels: np.ndarray,
                 weights: np.ndarray | None = None) -> LogisticFit:
    """Weighted Bernoulli MLE by IRLS with zero initialization.

    ``features`` is n x p without the intercept; the returned coefficient
    vector has length p + 1 with the intercept first.
    """
    X = np.column_stack([np.ones(len(features)), np.asarray(features, dtype=float)])
    y = np.asarray(labels, dtype=float)
    n, p = X.shape
    if n < p:
        raise DomainError(f"n={n} < number of parameters {p}")
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("labels must be binary 0/1")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise DomainError("weights must be nonnegative")
    if w[y == 1].sum() <= 0 or w[y == 0].sum() <= 0:
        raise DomainError("both classes must carry positive weight")

    beta = np.zeros(p)
    ridged = False
    grad_norm = np.inf
    for it in range(1, IRLS_MAX_ITER + 1):
        mu = sigmoid(X @ beta)
        grad = X.T @ (w * (y - mu))
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm <= IRLS_TOL:
            return LogisticFit(beta, True, it, grad_norm, ridged=ridged)
        v = w * mu * (1.0 - mu)
        H = X.T @ (X * v[:, None])
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            ridged = True
            H = H + 1e-8 * max(1.0, float(np.trace(H))) * np.eye(p)
            step = np.linalg.solve(H, grad)
        beta = beta + step
        if np.max(np.abs(beta)) > COEF_CAP:
            beta = np.clip(beta, -COEF_CAP, COEF_CAP)
            mu = sigmoid(X @ beta)
            grad_norm = float(np.max(np.abs(X.T @ (w * (y - mu)))))
            return LogisticFit(beta, False, it, grad_norm, separation=True, ridged=ridged)
    return LogisticFit(beta, False, IRLS_MAX_ITER, grad_norm, ridged=ridged)


@dataclass(frozen=True)
class RootSolveResult:
    solution: np.ndarray
    residual_norm: float
    converged: bool
    iterations: int


def fd_jacobian(g: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    """Central differences, step = cbrt(eps) * max(1, |x_j|)."""
    x = np.asarray(x, dtype=float)
    p = x.size
    base = math.pow(np.finfo(float).eps, 1.0 / 3.0)
    J = np.empty((p, p))
    for j in range(p):
        h = base * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        J[:, j] = (np.atleast_1d(g(xp)) - np.atleast_1d(g(xm))) / (2.0 * h)
    return J


def newton_solve(g: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, tol: float,
                 jac: Callable[[np.ndarray], np.ndarray] | None = None,
                 max_iter: int = 100) -> RootSolveResult:
    """Damped Newton on ||g||_inf; accepted steps decrease the residual."""
    if tol <= 0:
        raise DomainError("tol must be positive")
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()

    def resid(v: np.ndarray) -> tuple[np.ndarray, float]:
        gv = np.atleast_1d(np.asarray(g(v), dtype=float))
        if not np.all(np.isfinite(gv)):
            raise DomainError("non-finite value from estimating function")
        return gv, float(np.max(np.abs(gv)))

    gx, r = resid(x)
    for it in range(1, max_iter + 1):
        if r <= tol:
            return RootSolveResult(x, r, True, it - 1)
        J = jac(x) if jac is not None else fd_jacobian(g, x)
        try:
            step = np.linalg.solve(J, -gx)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -gx, rcond=None)[0]
        scale = 1.0
        for _ in range(40):
            try:
                gn, rn = resid(x + scale * step)
            except DomainError:
                scale *= 0.5
                continue
            if rn < r:
                break
            scale *= 0.5
        else:
            return RootSolveResult(x, r, r <= tol, it)
        x = x + scale * step
        gx, r = gn, rn
    return RootSolveResult(x, r, r <= tol, max_iter)


# Gauss-Kronrod 7-15 nodes/weights on [-1, 1]
_K15_NODES = np.array([
    -0.991455371120813, -0.949107912342759, -0.864864423359769,
    -0.741531185599394, -0.586087235467691, -0.405845151377397,
    -0.207784955007898, 0.0, 0.207784955007898, 0.405845151377397,
    0.586087235467691, 0.741531185599394, 0.864864423359769,
    0.949107912342759, 0.991455371120813,
])
_K15_WEIGHTS = np.array([
    0.022935322010529, 0.063092092629979, 0.104790010322250,
    0.140653259715525, 0.169004726639267, 0.190350578064785,
    0.204432940075298, 0.209482141084728, 0.204432940075298,
    0.190350578064785, 0.169004726639267, 0.140653259715525,
    0.104790010322250, 0.063092092629979, 0.022935322010529,
])
_G7_WEIGHTS = np.array([
    0.129484966168870, 0.279705391489277, 0.381830050505119,
    0.417959183673469, 0.381830050505119, 0.279705391489277,
    0.129484966168870,
])
_G7_IDX = np.array([1, 3, 5, 7, 9, 11, 13])


def _gk_panel(f, lo: float, hi: float) -> tuple[float, float]:
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    x = mid + half * _K15_NODES
    fx = np.asarray(f(x), dtype=float)
    if not np.all(np.isfinite(fx)):
        raise DomainError(f"non-finite integrand value on [{lo}, {hi}]")
    k15 = half * float(_K15_WEIGHTS @ fx)
    g7 = half * float(_G7_WEIGHTS @ fx[_G7_IDX])
    return k15, abs(k15 - g7)


def integrate_1d(f: Callable[[np.ndarray], np.ndarray], lo: float, hi: float,
                 tol: float = 1e-8, max_panels: int = 2048) -> float:
    """Adaptive Gauss-Kronrod quadrature; hi = inf is mapped to (0, 1) by
    y = lo + t/(1-t).  The integrand must accept numpy arrays."""
    if math.isinf(hi):
        base = f

        def f(t, shift=lo):  # noqa: ANN001 - transformed integrand
            u = 1.0 - t
            return base(shift + t / u) / (u * u)

        lo, hi = 0.0, 1.0
    val, err = _gk_panel(f, lo, hi)
    heap = [(-err, lo, hi, val, err)]
    total_val, total_err = val, err
    panels = 1
    while total_err > tol and panels < max_panels:
        _, a, b, v, e = heapq.heappop(heap)
        m = 0.5 * (a + b)
        v1, e1 = _gk_panel(f, a, m)
        v2, e2 = _gk_panel(f, m, b)
        total_val += v1 + v2 - v
        total_err += e1 + e2 - e
        heapq.heappush(heap, (-e1, a, m, v1, e1))
        heapq.heappush(heap, (-e2, m, b, v2, e2))
        panels += 1
    return total_val


def substream(seed: int, *path: int) -> np.random.Generator:
    """Deterministic counter-based stream; identical (seed, path) gives
    identical draws regardless of scheduling or thread count."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=path)))


def mvn_cholesky(gen: np.random.Generator, mean: np.ndarray, cov: np.ndarray,
                 size: int) -> np.ndarray:
    """Multivariate normal draws via the Cholesky factor (raises on non-PD)."""
    mean = np.asarray(mean, dtype=float)
    L = np.linalg.cholesky(np.asarray(cov, dtype=float))
    z = gen.standard_normal((size, mean.size))
    return mean + z @ L.T
