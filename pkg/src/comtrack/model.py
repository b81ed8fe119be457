"""Outlier-aware factor model A ~ (U + O) V^T under exponentially weighted least squares.

Objective values here drop the data constant sum_tau beta^(t-tau) ||A^tau||_F^2,
so they can be negative; only differences are meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Union

import numba
import numpy as np

from .snapshots import AdjacencySnapshot, ValidationError


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class FactorState:
    u: np.ndarray
    v: np.ndarray
    o: np.ndarray

    def __post_init__(self):
        u, v, o = (np.asarray(x, dtype=float) for x in (self.u, self.v, self.o))
        if u.ndim != 2 or u.shape[1] < 1:
            raise ShapeError(f"u must be N x C with C >= 1, got {u.shape}")
        if o.shape != u.shape:
            raise ShapeError(f"o shape {o.shape} != u shape {u.shape}")
        if v.ndim != 2 or v.shape[1] != u.shape[1]:
            raise ShapeError(f"v must have {u.shape[1]} columns, got {v.shape}")
        if (u < 0).any() or (v < 0).any() or (o < 0).any():
            raise ValidationError("factor entries must be nonnegative")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "o", o)

    @property
    def c(self) -> int:
        return self.u.shape[1]

    @property
    def n(self) -> int:
        return self.u.shape[0]

    @classmethod
    def zeros(cls, n: int, c: int) -> "FactorState":
        z = np.zeros((n, c))
        return cls(z, z.copy(), z.copy())

    def reconstruction(self) -> np.ndarray:
        return (self.u + self.o) @ self.v.T


@dataclass(frozen=True)
class SufficientStats:
    """Recursive pair S^t = A^t + beta S^{t-1}, s^t = sum_{k<t} beta^k.

    ``t`` is the interval index of the last folded snapshot (-1 before any).
    """

    s_mat: np.ndarray
    s_scalar: float
    t: int = -1

    @classmethod
    def initial(cls, n: int) -> "SufficientStats":
        return cls(np.zeros((n, n)), 0.0, -1)

    @classmethod
    def single(cls, a: np.ndarray, t: int = 0) -> "SufficientStats":
        """Stats that see only ``a`` with unit weight (the beta -> 0 case)."""
        return cls(np.asarray(a, dtype=float), 1.0, t)

    @property
    def count(self) -> int:
        return self.t + 1


def weight_sum(count: int, beta: float) -> float:
    if beta == 1.0:
        return float(count)
    return (1.0 - beta ** count) / (1.0 - beta)


def update_stats(prev: SufficientStats, a_t: AdjacencySnapshot, beta: float) -> SufficientStats:
    if not 0.0 < beta <= 1.0:
        raise ValidationError(f"beta must lie in (0, 1], got {beta}")
    if prev.s_mat.shape != a_t.entries.shape:
        raise ShapeError(f"stats shape {prev.s_mat.shape} != snapshot shape {a_t.entries.shape}")
    if a_t.interval_index != prev.t + 1:
        raise ValidationError(
            f"snapshot interval {a_t.interval_index} does not follow stats interval {prev.t}"
        )
    t = prev.t + 1
    return SufficientStats(a_t.entries + beta * prev.s_mat, weight_sum(t + 1, beta), t)


class Schedule:
    """Regularization weight as a function of the 1-based interval count t.

    kind ``"constant"`` gives base; ``"sqrt"`` gives base * sqrt(t).
    """

    kinds = ("constant", "sqrt")

    def __init__(self, base: float, kind: str = "constant"):
        if base < 0:
            raise ValidationError("schedule base must be nonnegative")
        if kind not in self.kinds:
            raise ValidationError(f"unknown schedule kind {kind!r}")
        self.base = float(base)
        self.kind = kind

    def __call__(self, t: int) -> float:
        if self.kind == "sqrt":
            return self.base * float(np.sqrt(t))
        return self.base

    def __eq__(self, other):
        return isinstance(other, Schedule) and (self.base, self.kind) == (other.base, other.kind)

    def __repr__(self):
        return f"Schedule({self.base!r}, {self.kind!r})"

    def to_dict(self) -> dict:
        return {"base": self.base, "kind": self.kind}


StepPolicy = Union[float, str]  # positive float, or "auto"


@dataclass(frozen=True)
class Hyperparams:
    beta: float
    c: int
    lambda_schedule: Callable[[int], float]
    mu_schedule: Callable[[int], float]
    alpha_u: StepPolicy = "auto"
    alpha_v: StepPolicy = "auto"
    rho: float = 1.0
    anomaly_eps: float = 1e-3
    max_outer: int = 500
    max_inner: int = 200
    tol: float = 1e-6
    inner_tol: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValidationError(f"beta must lie in (0, 1], got {self.beta}")
        if self.c < 1:
            raise ValidationError("community count must be >= 1")
        if not self.rho > 0:
            raise ValidationError("rho must be positive")
        if self.anomaly_eps < 0:
            raise ValidationError("anomaly_eps must be nonnegative")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValidationError("iteration caps must be >= 1")
        for name in ("alpha_u", "alpha_v"):
            a = getattr(self, name)
            if isinstance(a, str):
                if a != "auto":
                    raise ValidationError(f"{name} must be a positive number or 'auto'")
            elif not a > 0:
                raise ValidationError(f"{name} must be positive")

    @classmethod
    def synthetic_defaults(cls, **overrides) -> "Hyperparams":
        """beta=0.97, C=5, lambda_t=0.05, mu_t=0.1*sqrt(t)."""
        kw = dict(beta=0.97, c=5, lambda_schedule=Schedule(0.05),
                  mu_schedule=Schedule(0.1, "sqrt"))
        kw.update(overrides)
        return cls(**kw)

    def lam(self, count: int) -> float:
        return float(self.lambda_schedule(count))

    def mu(self, count: int) -> float:
        return float(self.mu_schedule(count))

    def with_(self, **changes) -> "Hyperparams":
        return replace(self, **changes)


def _check(state: FactorState, stats: SufficientStats):
    n = state.n
    if stats.s_mat.shape != (n, n) or state.v.shape[0] != n:
        raise ShapeError(
            f"stats {stats.s_mat.shape} incompatible with factors u{state.u.shape} v{state.v.shape}"
        )


def phi(state: FactorState, stats: SufficientStats) -> float:
    """s^t ||(U+O) V^T||_F^2 - 2 Tr{(S^t)^T (U+O) V^T}."""
    _check(state, stats)
    z = state.u + state.o
    v = state.v
    quad = np.sum((z.T @ z) * (v.T @ v))
    lin = np.sum((stats.s_mat @ v) * z)
    return float(stats.s_scalar * quad - 2.0 * lin)


def full_objective(state: FactorState, stats: SufficientStats, lambda_t: float, mu_t: float) -> float:
    ridge = 0.5 * lambda_t * (np.sum(state.u ** 2) + np.sum(state.v ** 2))
    return phi(state, stats) + float(ridge) + float(mu_t * np.abs(state.o).sum())


def smooth_objective(state: FactorState, stats: SufficientStats, lambda_t: float) -> float:
    return full_objective(state, stats, lambda_t, 0.0)


def history_constant(history, beta: float) -> float:
    """sum_tau beta^(t-tau) ||A^tau||_F^2 over a stored history (oldest first)."""
    t = len(history)
    return float(sum(beta ** (t - 1 - k) * np.sum(np.asarray(a) ** 2) for k, a in enumerate(history)))


def _grad_z(z, v, stats):
    return 2.0 * stats.s_scalar * (z @ (v.T @ v)) - 2.0 * (stats.s_mat @ v)


def grad_u(state: FactorState, stats: SufficientStats, lambda_t: float) -> np.ndarray:
    _check(state, stats)
    return _grad_z(state.u + state.o, state.v, stats) + lambda_t * state.u


def grad_o(state: FactorState, stats: SufficientStats) -> np.ndarray:
    """Gradient of phi alone in O (no l1 term)."""
    _check(state, stats)
    return _grad_z(state.u + state.o, state.v, stats)


def grad_v(state: FactorState, stats: SufficientStats, lambda_t: float) -> np.ndarray:
    _check(state, stats)
    z = state.u + state.o
    return (2.0 * stats.s_scalar * (state.v @ (z.T @ z))
            - 2.0 * (stats.s_mat.T @ z) + lambda_t * state.v)


@numba.njit(cache=True)
def _power_iteration(g, tol, max_iter):
    c = g.shape[0]
    x = np.ones(c) + np.arange(c) * 1e-3
    x /= np.sqrt(np.sum(x * x))
    lam = 0.0
    for _ in range(max_iter):
        y = g @ x
        ny = np.sqrt(np.sum(y * y))
        if ny == 0.0:
            return 0.0
        x = y / ny
        lam_new = x @ (g @ x)
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return lam_new
        lam = lam_new
    return lam


def lambda_max_psd(g: np.ndarray, tol: float = 1e-10, max_iter: int = 1000) -> float:
    """Largest eigenvalue of a small symmetric PSD matrix by power iteration."""
    g = np.ascontiguousarray(g, dtype=float)
    if not np.any(g):
        return 0.0
    return float(_power_iteration(g, tol, max_iter))


def lipschitz_o(v: np.ndarray, s_scalar: float) -> float:
    """2 s^t lambda_max(V^T V): a Lipschitz constant of grad_o."""
    if s_scalar < 0:
        raise ValidationError("s_scalar must be nonnegative")
    return 2.0 * s_scalar * lambda_max_psd(v.T @ v)


def auto_step_u(v: np.ndarray, s_scalar: float, lambda_t: float) -> float:
    """1 / (2 s^t lambda_max(V^T V) + lambda_t)."""
    return 1.0 / max(2.0 * s_scalar * lambda_max_psd(v.T @ v) + lambda_t, 1e-12)


def auto_step_v(z: np.ndarray, s_scalar: float, lambda_t: float) -> float:
    """1 / (2 s^t lambda_max(Z^T Z) + lambda_t) with Z = U + O."""
    return 1.0 / max(2.0 * s_scalar * lambda_max_psd(z.T @ z) + lambda_t, 1e-12)


def stationarity_residual(state: FactorState, stats: SufficientStats, lambda_t: float,
                          mu_t: float) -> float:
    """Frobenius norm of the projected-gradient map of the full objective.

    Per block X it is X - [X - G]_+, with G the gradient of the smooth part
    (plus mu_t for O, the l1 term's gradient on the orthant). Zero exactly at
    first-order stationary points of the nonnegatively constrained problem.
    """
    gu = grad_u(state, stats, lambda_t)
    gv = grad_v(state, stats, lambda_t)
    go = grad_o(state, stats) + mu_t
    parts = [x - np.maximum(x - g, 0.0) for x, g in ((state.u, gu), (state.v, gv), (state.o, go))]
    return float(np.sqrt(sum(np.sum(p * p) for p in parts)))
