"""Projection, soft thresholding and FISTA for the sparse outlier block."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .model import FactorState, SufficientStats, lipschitz_o, phi

L_EPS = 1e-12


class NumericError(ArithmeticError):
    pass


def project_nonneg(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def soft_threshold(x, mu: float):
    if mu < 0:
        raise ValueError("threshold must be nonnegative")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - mu, 0.0)


def theta_next(theta: float) -> float:
    return (1.0 + math.sqrt(1.0 + 4.0 * theta * theta)) / 2.0


def outlier_objective(u, v, o, stats: SufficientStats, mu_t: float) -> float:
    """phi(U, V, O) + mu_t ||O||_1, the O-subproblem cost."""
    return phi(FactorState(u, v, o), stats) + mu_t * float(np.abs(o).sum())


@dataclass
class FistaState:
    """Iterate pair, extrapolation point and momentum sequence carried between steps."""

    o_curr: np.ndarray
    o_prev: np.ndarray
    w: np.ndarray
    theta_curr: float = 1.0
    theta_prev: float = 1.0

    @classmethod
    def start(cls, o: np.ndarray) -> "FistaState":
        o = np.asarray(o, dtype=float)
        return cls(o.copy(), o.copy(), o.copy(), 1.0, 1.0)


def fista_step(fs: FistaState, z_fixed: np.ndarray, gram_v: np.ndarray, sv: np.ndarray,
               s_scalar: float, mu_t: float, lip: float) -> FistaState:
    """One accelerated proximal step on O.

    ``z_fixed`` is U, ``gram_v`` is V^T V and ``sv`` is S^t V; the gradient at
    W is 2 s (U + W) V^T V - 2 S V.
    """
    lip = max(lip, L_EPS)
    grad = 2.0 * s_scalar * ((z_fixed + fs.w) @ gram_v) - 2.0 * sv
    x = fs.w - grad / lip
    o_new = project_nonneg(soft_threshold(x, mu_t / lip))
    th_new = theta_next(fs.theta_curr)
    w_new = o_new + ((fs.theta_curr - 1.0) / th_new) * (o_new - fs.o_curr)
    return FistaState(o_new, fs.o_curr, w_new, th_new, fs.theta_curr)


@numba.njit(cache=True)
def _fista_loop(u, gram, sv, s_scalar, mu_t, lip, o_init, max_inner, tol):
    n, c = u.shape
    o_curr = o_init.copy()
    w = o_init.copy()
    o_new = np.empty_like(o_init)
    zrow = np.empty(c)
    theta = 1.0
    thr = mu_t / lip
    r = 0
    while r < max_inner:
        r += 1
        d2 = 0.0
        n2 = 0.0
        for i in range(n):
            for k in range(c):
                zrow[k] = u[i, k] + w[i, k]
            for j in range(c):
                acc = 0.0
                for k in range(c):
                    acc += zrow[k] * gram[k, j]
                grad = 2.0 * s_scalar * acc - 2.0 * sv[i, j]
                x = w[i, j] - grad / lip
                if not np.isfinite(x):
                    return o_new, r, False
                # [S_thr(x)]_+ ; the negative branch of S_thr is clipped anyway
                y = abs(x) - thr
                val = 0.0
                if y > 0.0:
                    val = y if x > 0.0 else -y
                if val < 0.0:
                    val = 0.0
                o_new[i, j] = val
                d = val - o_curr[i, j]
                d2 += d * d
                n2 += val * val
        th_new = (1.0 + np.sqrt(1.0 + 4.0 * theta * theta)) / 2.0
        mom = (theta - 1.0) / th_new
        for i in range(n):
            for j in range(c):
                w[i, j] = o_new[i, j] + mom * (o_new[i, j] - o_curr[i, j])
                o_curr[i, j] = o_new[i, j]
        theta = th_new
        if np.sqrt(d2) <= tol * max(1.0, np.sqrt(n2)):
            break
    return o_curr, r, True


def fista_outlier_solve(u: np.ndarray, v: np.ndarray, o_init: np.ndarray, stats: SufficientStats,
                        mu_t: float, max_inner: int = 200, tol: float = 1e-8,
                        *, return_iterations: bool = False):
    """Minimize phi(U, V, O) + mu_t ||O||_1 over O >= 0 by FISTA, warm-started at o_init.

    Stops once ||O_r - O_{r-1}||_F <= tol * max(1, ||O_r||_F) or after max_inner steps.
    """
    if mu_t < 0:
        raise ValueError("mu_t must be nonnegative")
    lip = max(lipschitz_o(v, stats.s_scalar), L_EPS)
    u = np.ascontiguousarray(u, dtype=float)
    o_init = np.ascontiguousarray(o_init, dtype=float)
    gram = np.ascontiguousarray(v.T @ v)
    sv = np.ascontiguousarray(stats.s_mat @ v)
    o, r, ok = _fista_loop(u, gram, sv, float(stats.s_scalar), float(mu_t), float(lip),
                           o_init, int(max_inner), float(tol))
    if not ok:
        raise NumericError(f"non-finite outlier iterate at FISTA iteration {r}")
    if return_iterations:
        return o, r
    return o


@numba.njit(cache=True)
def _nnqp_rows(g, r, x, tol, max_sweeps):
    n, c = x.shape
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        worst = 0.0
        for i in range(n):
            for j in range(c):
                acc = 0.0
                for k in range(c):
                    acc += x[i, k] * g[k, j]
                new = x[i, j] - (acc - r[i, j]) / g[j, j]
                if new < 0.0:
                    new = 0.0
                d = abs(new - x[i, j])
                scale = max(1.0, abs(new))
                if d / scale > worst:
                    worst = d / scale
                x[i, j] = new
        if worst <= tol:
            break
    return x, sweeps


def nnqp_rows(g: np.ndarray, r: np.ndarray, x0: np.ndarray | None = None,
              tol: float = 1e-13, max_sweeps: int = 10000) -> np.ndarray:
    """Row-wise min 0.5 x G x^T - r x^T over x >= 0 by cyclic coordinate descent.

    The unconstrained stationarity condition of each row is X G = R, so this
    is the orthant-constrained counterpart of solving that system.
    ``g`` must be symmetric positive definite.
    """
    g = np.ascontiguousarray(g, dtype=float)
    r = np.ascontiguousarray(r, dtype=float)
    if np.any(np.diag(g) <= 0):
        raise NumericError("coordinate descent needs a positive diagonal")
    x = np.zeros_like(r) if x0 is None else np.array(x0, dtype=float, order="C")
    x = np.maximum(x, 0.0)
    x, _ = _nnqp_rows(g, r, x, float(tol), int(max_sweeps))
    return x
