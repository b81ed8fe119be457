"""Centralized trackers: exact alternating minimization, one-step inexact AM, and SGD.

Every tracker warm-starts interval t from the state emitted at t-1 and
returns one FactorState per interval.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import (
    FactorState,
    Hyperparams,
    SufficientStats,
    auto_step_u,
    auto_step_v,
    full_objective,
    grad_u,
    grad_v,
    lipschitz_o,
    update_stats,
)
from .prox import FistaState, NumericError, fista_outlier_solve, fista_step, project_nonneg
from .snapshots import SnapshotSeries, ValidationError, nmf


@dataclass
class IntervalDiagnostics:
    interval: int
    outer_iterations: int
    objective: float
    inner_iterations: int
    wall_time: float
    update_norm: float
    objective_trace: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


@dataclass
class TrackResult:
    algorithm: str
    states: list
    diagnostics: list

    def __len__(self):
        return len(self.states)

    @property
    def final(self) -> FactorState:
        return self.states[-1]


@dataclass(frozen=True)
class InitPolicy:
    """How the factors are initialized before the first interval.

    ``nmf``: U, V from an NMF of the first snapshot and O = 0.
    ``given``: a caller-supplied FactorState.
    ``random``: entries uniform on (0, 1) scaled by mean(A^0) / C, O = 0.
    """

    kind: str = "nmf"
    state: FactorState | None = None
    seed: int = 0
    nmf_max_iter: int = 2000

    @classmethod
    def nmf_of_first_snapshot(cls, seed: int = 0) -> "InitPolicy":
        return cls("nmf", None, seed)

    @classmethod
    def given(cls, state: FactorState) -> "InitPolicy":
        return cls("given", state)

    @classmethod
    def random(cls, seed: int) -> "InitPolicy":
        return cls("random", None, seed)

    def resolve(self, series: SnapshotSeries, c: int) -> FactorState:
        n = series.n
        a0 = series[0].entries
        if self.kind == "given":
            if self.state is None or self.state.u.shape != (n, c) or self.state.v.shape != (n, c):
                raise ValidationError(f"given init state must be {n}x{c}")
            return self.state
        if self.kind == "nmf":
            u, v = nmf(a0, c, max_iter=self.nmf_max_iter, seed=self.seed, strict=False)
            return FactorState(u, v, np.zeros((n, c)))
        if self.kind == "random":
            rng = np.random.default_rng(self.seed)
            scale = max(float(a0.mean()), 1e-12) / c
            u = (1.0 - rng.random((n, c))) * scale
            v = (1.0 - rng.random((n, c))) * scale
            return FactorState(u, v, np.zeros((n, c)))
        raise ValidationError(f"unknown init policy {self.kind!r}")


def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.linalg.norm(new - old) / max(1.0, np.linalg.norm(old)))


def _finite(x: np.ndarray, interval: int, block: str):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {block} at interval {interval}")


def _alpha(policy, auto_value: float) -> float:
    return auto_value if policy == "auto" else float(policy)


def _pg_u(u, v, o, stats, lam, policy, interval):
    alpha = _alpha(policy, auto_step_u(v, stats.s_scalar, lam))
    u_new = project_nonneg(u - alpha * grad_u(FactorState(u, v, o), stats, lam))
    _finite(u_new, interval, "U")
    return u_new


def _pg_v(u, v, o, stats, lam, policy, interval):
    alpha = _alpha(policy, auto_step_v(u + o, stats.s_scalar, lam))
    v_new = project_nonneg(v - alpha * grad_v(FactorState(u, v, o), stats, lam))
    _finite(v_new, interval, "V")
    return v_new


def track_exact(series: SnapshotSeries, hp: Hyperparams, init: InitPolicy,
                *, record_trace: bool = True) -> TrackResult:
    """Per interval, cycle U (PG step), V (PG step), O (FISTA to convergence)
    until the largest relative block change is <= hp.tol or hp.max_outer cycles."""
    state = init.resolve(series, hp.c)
    u, v, o = state.u.copy(), state.v.copy(), state.o.copy()
    stats = SufficientStats.initial(series.n)
    states, diags = [], []
    for snap in series:
        t0 = time.perf_counter()
        stats = update_stats(stats, snap, hp.beta)
        t = stats.t
        lam, mu = hp.lam(stats.count), hp.mu(stats.count)
        trace = []
        if record_trace:
            trace.append(full_objective(FactorState(u, v, o), stats, lam, mu))
        inner_total, change, k = 0, np.inf, 0
        for k in range(1, hp.max_outer + 1):
            u_new = _pg_u(u, v, o, stats, lam, hp.alpha_u, t)
            v_new = _pg_v(u_new, v, o, stats, lam, hp.alpha_v, t)
            try:
                o_new, r = fista_outlier_solve(u_new, v_new, o, stats, mu, hp.max_inner,
                                               hp.inner_tol, return_iterations=True)
            except NumericError as exc:
                raise NumericError(f"interval {t}, block O: {exc}") from exc
            inner_total += r
            change = max(_rel_change(u_new, u), _rel_change(v_new, v), _rel_change(o_new, o))
            u, v, o = u_new, v_new, o_new
            if record_trace:
                trace.append(full_objective(FactorState(u, v, o), stats, lam, mu))
            if change <= hp.tol:
                break
        st = FactorState(u.copy(), v.copy(), o.copy())
        states.append(st)
        diags.append(IntervalDiagnostics(
            t, k, full_objective(st, stats, lam, mu), inner_total,
            time.perf_counter() - t0, change, trace,
        ))
    return TrackResult("exact", states, diags)


def batch_reference(series: SnapshotSeries, hp: Hyperparams, init: InitPolicy) -> TrackResult:
    """track_exact run to a tight tolerance; the yardstick for relative errors."""
    res = track_exact(series, hp.with_(tol=1e-10, max_outer=5000), init, record_trace=False)
    res.algorithm = "batch"
    return res


def _one_step_track(series: SnapshotSeries, hp: Hyperparams, init: InitPolicy,
                    stats_for, name: str) -> TrackResult:
    state = init.resolve(series, hp.c)
    u, v, o = state.u.copy(), state.v.copy(), state.o.copy()
    fs = FistaState.start(o)
    stats = SufficientStats.initial(series.n)
    states, diags = [], []
    for snap in series:
        t0 = time.perf_counter()
        stats = stats_for(stats, snap)
        t = snap.interval_index
        count = t + 1
        lam, mu = hp.lam(count), hp.mu(count)
        thetas = []
        u_prev, v_prev, o_prev = u, v, o
        for _ in range(hp.max_outer):
            u = _pg_u(u, v, o, stats, lam, hp.alpha_u, t)
            v = _pg_v(u, v, o, stats, lam, hp.alpha_v, t)
            lip = lipschitz_o(v, stats.s_scalar)
            fs = fista_step(fs, u, v.T @ v, stats.s_mat @ v, stats.s_scalar, mu, lip)
            o = fs.o_curr
            _finite(o, t, "O")
            thetas.append(fs.theta_curr)
        change = max(_rel_change(u, u_prev), _rel_change(v, v_prev), _rel_change(o, o_prev))
        st = FactorState(u.copy(), v.copy(), o.copy())
        states.append(st)
        diags.append(IntervalDiagnostics(
            t, hp.max_outer, full_objective(st, stats, lam, mu), hp.max_outer,
            time.perf_counter() - t0, change, [], {"theta": thetas},
        ))
    return TrackResult(name, states, diags)


def track_inexact(series: SnapshotSeries, hp: Hyperparams, init: InitPolicy) -> TrackResult:
    """hp.max_outer (U, V, O) single-step sweeps per interval; FISTA momentum
    (W, theta) carries across intervals. max_outer=1 is the one-step tracker."""
    return _one_step_track(series, hp, init,
                           lambda prev, snap: update_stats(prev, snap, hp.beta), "inexact")


def track_sgd(series: SnapshotSeries, hp: Hyperparams, init: InitPolicy) -> TrackResult:
    """Same sweep as track_inexact but on the current snapshot alone (S = A^t, s = 1);
    beta is never read."""
    return _one_step_track(series, hp, init,
                           lambda prev, snap: SufficientStats.single(snap.entries, snap.interval_index),
                           "sgd")
