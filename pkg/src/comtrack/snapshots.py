"""Adjacency snapshot series: synthetic generation, edge-list I/O, weight transforms.

The synthetic pipeline is SBM -> NMF factorization -> anomaly injection ->
piecewise-constant edge evolution.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np


class ValidationError(ValueError):
    """Invalid snapshot, series or generator parameters."""


class EdgeSeriesParseError(ValueError):
    def __init__(self, lineno: int, line: str, reason: str):
        super().__init__(f"line {lineno}: {reason}: {line!r}")
        self.lineno = lineno
        self.line = line


class NmfConvergenceError(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(
            f"NMF did not converge in {iterations} iterations "
            f"(last relative residual change {residual:.3e})"
        )
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class AdjacencySnapshot:
    """Weighted directed adjacency matrix for one interval (row i -> col j)."""

    entries: np.ndarray
    interval_index: int = 0

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError(f"adjacency must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValidationError("adjacency contains non-finite entries")
        if np.any(a < 0):
            raise ValidationError("adjacency entries must be nonnegative")
        if self.interval_index < 0:
            raise ValidationError("interval_index must be >= 0")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class SnapshotSeries:
    snapshots: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        snaps = tuple(self.snapshots)
        if not snaps:
            raise ValidationError("series must contain at least one snapshot")
        n = snaps[0].n
        for k, s in enumerate(snaps):
            if s.n != n:
                raise ValidationError(f"snapshot {k} has n={s.n}, expected {n}")
            if s.interval_index != k:
                raise ValidationError(
                    f"interval indices must be 0..T-1, got {s.interval_index} at position {k}"
                )
        object.__setattr__(self, "snapshots", snaps)

    @classmethod
    def from_arrays(cls, arrays: Iterable[np.ndarray], metadata: dict | None = None):
        return cls(
            tuple(AdjacencySnapshot(a, t) for t, a in enumerate(arrays)),
            dict(metadata or {}),
        )

    @property
    def n(self) -> int:
        return self.snapshots[0].n

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, t: int) -> AdjacencySnapshot:
        return self.snapshots[t]

    def __iter__(self):
        return iter(self.snapshots)

    def arrays(self) -> np.ndarray:
        return np.stack([s.entries for s in self.snapshots])


@dataclass(frozen=True)
class SbmSpec:
    community_sizes: Sequence[int]
    affinity: np.ndarray
    seed: int = 0

    def __post_init__(self):
        sizes = [int(s) for s in self.community_sizes]
        aff = np.asarray(self.affinity, dtype=float)
        if not sizes or any(s <= 0 for s in sizes):
            raise ValidationError("community sizes must be positive integers")
        if aff.shape != (len(sizes), len(sizes)):
            raise ValidationError(
                f"affinity must be {len(sizes)}x{len(sizes)}, got {aff.shape}"
            )
        if np.any(~np.isfinite(aff)) or np.any(aff < 0) or np.any(aff > 1):
            raise ValidationError("affinity entries must lie in [0, 1]")
        if self.seed < 0:
            raise ValidationError("seed must be unsigned")
        object.__setattr__(self, "community_sizes", tuple(sizes))
        object.__setattr__(self, "affinity", aff)

    @property
    def n(self) -> int:
        return sum(self.community_sizes)

    def membership(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.community_sizes)), self.community_sizes)


@dataclass(frozen=True)
class AnomalySpec:
    rows: frozenset
    magnitude: float | None = None  # None -> each anomalous row scaled by its own max in U^0
    seed: int = 0

    def __post_init__(self):
        rows = frozenset(int(r) for r in self.rows)
        if any(r < 0 for r in rows):
            raise ValidationError("anomaly rows must be nonnegative node indices")
        if self.magnitude is not None and not self.magnitude > 0:
            raise ValidationError("anomaly magnitude must be positive")
        object.__setattr__(self, "rows", rows)


def generate_sbm(spec: SbmSpec) -> AdjacencySnapshot:
    """Directed binary SBM draw; edge i->j present w.p. affinity[c(i), c(j)], no self-loops."""
    rng = np.random.default_rng(spec.seed)
    block = spec.membership()
    probs = spec.affinity[np.ix_(block, block)]
    a = (rng.random(probs.shape) < probs).astype(float)
    np.fill_diagonal(a, 0.0)
    return AdjacencySnapshot(a, 0)


def cyclic_affinity(c: int = 5, within: float = 0.8, between: float = 0.1) -> np.ndarray:
    """Block affinity: `within` on the diagonal, `between` for cyclically adjacent
    blocks, zero elsewhere. With the defaults every row sums to 1."""
    aff = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            d = min(abs(i - j), c - abs(i - j))
            aff[i, j] = within if d == 0 else (between if d == 1 else 0.0)
    return aff


def nmf(a: np.ndarray, c: int, *, max_iter: int = 500, tol: float = 1e-6,
        seed: int = 0, strict: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Frobenius NMF a ~ u @ v.T by multiplicative updates.

    Stops when the relative change of ||a - u v^T||_F between sweeps is
    <= tol. Returned factors are rescaled so that matching columns of u and v
    have equal Euclidean norm (the scaling preferred by a ridge penalty on both).
    With ``strict=False`` the last iterate is returned instead of raising.
    """
    a = np.asarray(a, dtype=float)
    if np.any(a < 0):
        raise ValidationError("NMF input must be nonnegative")
    n, m = a.shape
    rng = np.random.default_rng(seed)
    scale = math.sqrt(max(a.mean(), 1e-12) / c)
    u = rng.uniform(0.1, 1.0, (n, c)) * scale
    v = rng.uniform(0.1, 1.0, (m, c)) * scale
    tiny = 1e-12
    prev = np.linalg.norm(a - u @ v.T)
    change = math.inf
    for it in range(1, max_iter + 1):
        u *= (a @ v) / (u @ (v.T @ v) + tiny)
        v *= (a.T @ u) / (v @ (u.T @ u) + tiny)
        res = np.linalg.norm(a - u @ v.T)
        change = abs(prev - res) / max(prev, tiny)
        prev = res
        if change <= tol or res <= tiny:
            return balance_columns(u, v)
    if strict:
        raise NmfConvergenceError(max_iter, change)
    return balance_columns(u, v)


def balance_columns(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nu = np.linalg.norm(u, axis=0)
    nv = np.linalg.norm(v, axis=0)
    ok = (nu > 0) & (nv > 0)
    g = np.ones_like(nu)
    g[ok] = np.sqrt(nv[ok] / nu[ok])
    return u * g, v / g


def inject_anomalies(a_init: AdjacencySnapshot, c: int, spec: AnomalySpec,
                     *, nmf_max_iter: int = 500, nmf_tol: float = 1e-6
                     ) -> tuple[AdjacencySnapshot, np.ndarray]:
    """Rebuild a_init as (U0 + O0) V0^T with O0 supported on ``spec.rows``.

    U0, V0 come from a rank-c NMF of a_init (seeded by spec.seed). Entries of
    the anomalous rows of O0 are uniform on (0, magnitude]; without a magnitude
    each row uses the largest entry of its own row of U0.
    """
    if c < 1:
        raise ValidationError("community count must be >= 1")
    n = a_init.n
    if any(r >= n for r in spec.rows):
        raise ValidationError(f"anomaly rows must lie in [0, {n})")
    u0, v0 = nmf(a_init.entries, c, max_iter=nmf_max_iter, tol=nmf_tol, seed=spec.seed)
    o0 = np.zeros_like(u0)
    rows = sorted(spec.rows)
    if rows:
        if spec.magnitude is None:
            mag = u0[rows].max(axis=1, keepdims=True)
        else:
            mag = float(spec.magnitude)
        rng = np.random.default_rng([spec.seed, 1])
        # 1 - U[0,1) lies in (0, 1]
        o0[rows] = mag * (1.0 - rng.random((len(rows), c)))
    a0 = (u0 + o0) @ v0.T
    return AdjacencySnapshot(np.maximum(a0, 0.0), a_init.interval_index), o0


def step(x) -> np.ndarray:
    """Unit step with H(0) = 1."""
    return (np.asarray(x) >= 0).astype(float)


def edge_profiles(t: np.ndarray | Sequence[int]) -> np.ndarray:
    """Rows are the four edge-variation profiles f_1..f_4 evaluated at t."""
    t = np.asarray(t, dtype=float)
    return np.stack([
        step(t),
        step(t - 50),
        1.0 - step(t - 50),
        step(t) - step(t - 25) + step(t - 50) - step(t - 75),
    ])


def draw_profile_labels(n: int, seed: int) -> np.ndarray:
    """Per-edge profile index kappa in {1, 2, 3, 4}."""
    return np.random.default_rng(seed).integers(1, 5, size=(n, n))


def evolve_series(a0: AdjacencySnapshot, t_len: int, seed: int) -> SnapshotSeries:
    if t_len < 1:
        raise ValidationError("t_len must be >= 1")
    kappa = draw_profile_labels(a0.n, seed)
    prof = edge_profiles(np.arange(t_len))  # (4, T)
    snaps = []
    for t in range(t_len):
        mask = prof[kappa - 1, t]
        snaps.append(AdjacencySnapshot(a0.entries * mask, t))
    return SnapshotSeries(tuple(snaps), {"evolution_seed": seed})


def log_transform_weights(series: SnapshotSeries) -> SnapshotSeries:
    """Replace every weight w by ln(1 + w); zeros stay zero."""
    return SnapshotSeries(
        tuple(AdjacencySnapshot(np.log1p(s.entries), s.interval_index) for s in series),
        {**series.metadata, "log_transformed": True},
    )


_HEADER = re.compile(r"^#\s*nodes=(\d+)\s+intervals=(\d+)\s*$")


def load_edge_series(path, n: int | None = None, t_len: int | None = None) -> SnapshotSeries:
    """Read an Edge-Series CSV (``#nodes=<n> intervals=<T>`` header, rows ``t,i,j,w``).

    Without a header (or explicit n / t_len) the node universe is the union
    of endpoints and T is one past the largest interval index.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                m = _HEADER.match(line)
                if m is None:
                    raise EdgeSeriesParseError(lineno, line, "bad header")
                n = int(m.group(1)) if n is None else n
                t_len = int(m.group(2)) if t_len is None else t_len
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise EdgeSeriesParseError(lineno, line, "expected 4 fields t,i,j,w")
            try:
                t, i, j = (int(p) for p in parts[:3])
                w = float(parts[3])
            except ValueError:
                raise EdgeSeriesParseError(lineno, line, "non-numeric field") from None
            if t < 0 or i < 0 or j < 0:
                raise EdgeSeriesParseError(lineno, line, "negative index")
            if not math.isfinite(w):
                raise EdgeSeriesParseError(lineno, line, "non-finite weight")
            if w < 0:
                raise ValidationError(f"line {lineno}: negative weight {w}")
            records.append((lineno, t, i, j, w))

    max_node = max((max(i, j) for _, _, i, j, _ in records), default=-1)
    max_t = max((t for _, t, _, _, _ in records), default=-1)
    n = max_node + 1 if n is None else n
    t_len = max_t + 1 if t_len is None else t_len
    if n < 1 or t_len < 1:
        raise ValidationError("empty edge series needs a declared node count and interval count")
    a = np.zeros((t_len, n, n))
    for lineno, t, i, j, w in records:
        if t >= t_len or i >= n or j >= n:
            raise ValidationError(f"line {lineno}: record outside declared {n} nodes / {t_len} intervals")
        a[t, i, j] = w
    return SnapshotSeries.from_arrays(a, {"source": str(path)})


def write_edge_series(series: SnapshotSeries, path) -> None:
    """Write nonzero entries in (t, i, j) order; floats use their shortest round-trip repr."""
    lines = [f"#nodes={series.n} intervals={len(series)}"]
    for s in series:
        ii, jj = np.nonzero(s.entries)  # row-major => sorted by (i, j)
        t = s.interval_index
        lines.extend(f"{t},{i},{j},{float(s.entries[i, j])!r}" for i, j in zip(ii, jj))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


@dataclass(frozen=True)
class Scenario:
    """Synthetic scenario outputs kept for evaluation and manifests."""

    series: SnapshotSeries
    a_init: AdjacencySnapshot
    a0: AdjacencySnapshot
    o_truth: np.ndarray
    params: dict[str, Any]


def synthetic_scenario(
    *,
    community_sizes: Sequence[int] = (20, 20, 20, 20, 20),
    within: float = 0.8,
    between: float = 0.1,
    anomaly_rows: Iterable[int] = (0, 25, 30, 80),
    magnitude: float | None = None,
    t_len: int = 100,
    seed: int = 0,
) -> Scenario:
    """End-to-end synthetic pipeline with seeds derived from one master seed."""
    c = len(community_sizes)
    sbm_seed, anom_seed, evo_seed = (int(x) for x in
                                     np.random.SeedSequence(seed).generate_state(3))
    sbm = SbmSpec(community_sizes, cyclic_affinity(c, within, between), sbm_seed)
    a_init = generate_sbm(sbm)
    a0, o0 = inject_anomalies(a_init, c, AnomalySpec(frozenset(anomaly_rows), magnitude, anom_seed))
    series = evolve_series(a0, t_len, evo_seed)
    params = {
        "community_sizes": list(community_sizes), "within": within, "between": between,
        "anomaly_rows": sorted(anomaly_rows), "magnitude": magnitude, "t_len": t_len,
        "seed": seed, "sbm_seed": sbm_seed, "anomaly_seed": anom_seed, "evolution_seed": evo_seed,
    }
    return Scenario(SnapshotSeries(series.snapshots, {"scenario": params}), a_init, a0, o0, params)
