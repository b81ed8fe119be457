"""Consensus ADMM over a simulated network of computing agents.

Agent m owns a contiguous (or given) block of rows of every snapshot, keeps
its own U_m, O_m, P_m and a full local copy V_m of the shared basis, and
talks only to single-hop neighbors. Rounds are bulk-synchronous: every agent
reads the V copies its neighbors broadcast in round k, then updates.
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import networkx as nx
import numpy as np

from .model import FactorState, Hyperparams, SufficientStats, full_objective, weight_sum
from .prox import NumericError, nnqp_rows, project_nonneg, soft_threshold
from .snapshots import SnapshotSeries, ValidationError
from .trackers import InitPolicy, IntervalDiagnostics, TrackResult

NONNEG_MODES = ("none", "project", "exact")


class ConfigError(ValueError):
    pass


class ShapeMismatch(ValidationError):
    pass


# --------------------------------------------------------------------------- topology

def partition_rows(n: int, m: int, policy="contiguous") -> list[np.ndarray]:
    """Split rows 0..n-1 among m agents.

    ``policy`` is ``"contiguous"`` (balanced blocks, sizes differ by at most one)
    or a list of m index collections forming a disjoint cover.
    """
    if not 1 <= m <= n:
        raise ValidationError(f"need 1 <= m <= n, got m={m}, n={n}")
    if isinstance(policy, str):
        if policy != "contiguous":
            raise ValidationError(f"unknown partition policy {policy!r}")
        return [np.asarray(b, dtype=int) for b in np.array_split(np.arange(n), m)]
    blocks = [np.asarray(sorted(b), dtype=int) for b in policy]
    if len(blocks) != m:
        raise ValidationError(f"given partition has {len(blocks)} blocks, expected {m}")
    if any(len(b) == 0 for b in blocks):
        raise ValidationError("every agent needs at least one row")
    allrows = np.concatenate(blocks)
    if len(allrows) != n or len(np.unique(allrows)) != n or allrows.min() < 0 or allrows.max() >= n:
        raise ValidationError("given partition must be a disjoint cover of 0..n-1")
    return blocks


@dataclass(frozen=True)
class AgentTopology:
    m: int
    neighbors: tuple           # neighbors[a] is a sorted tuple of agent ids
    row_partition: tuple       # row_partition[a] is an int array of owned rows

    def __post_init__(self):
        if len(self.neighbors) != self.m or len(self.row_partition) != self.m:
            raise ValidationError("neighbors and row_partition need one entry per agent")
        for a, nb in enumerate(self.neighbors):
            for b in nb:
                if b == a:
                    raise ValidationError(f"agent {a} lists itself as a neighbor")
                if not 0 <= b < self.m:
                    raise ValidationError(f"agent {a} has out-of-range neighbor {b}")
                if a not in self.neighbors[b]:
                    raise ValidationError(f"link {a}-{b} is not symmetric")
        allrows = np.concatenate([np.asarray(r) for r in self.row_partition])
        if len(np.unique(allrows)) != len(allrows):
            raise ValidationError("row blocks overlap")

    @property
    def n(self) -> int:
        return int(sum(len(r) for r in self.row_partition))

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.m))
        g.add_edges_from((a, b) for a, nb in enumerate(self.neighbors) for b in nb)
        return g

    def is_connected(self) -> bool:
        return nx.is_connected(self.graph())

    def links(self) -> list[tuple[int, int]]:
        return sorted((a, b) for a, nb in enumerate(self.neighbors) for b in nb if a < b)

    @classmethod
    def from_links(cls, m: int, links, n: int, policy="contiguous") -> "AgentTopology":
        nb = [set() for _ in range(m)]
        for a, b in links:
            a, b = int(a), int(b)
            if not (0 <= a < m and 0 <= b < m):
                raise ValidationError(f"link {a}-{b} references an agent outside 0..{m - 1}")
            if a == b:
                raise ValidationError(f"self-link on agent {a}")
            nb[a].add(b)
            nb[b].add(a)
        return cls(m, tuple(tuple(sorted(s)) for s in nb), tuple(partition_rows(n, m, policy)))


def ladder_topology(n: int, m: int = 10) -> AgentTopology:
    """Two rows of m/2 agents; neighbors along each row and across rungs."""
    if m < 2 or m % 2:
        raise ValidationError("ladder topology needs an even agent count >= 2")
    half = m // 2
    links = [(i, i + 1) for i in range(half - 1)]
    links += [(half + i, half + i + 1) for i in range(half - 1)]
    links += [(i, half + i) for i in range(half)]
    return AgentTopology.from_links(m, links, n)


def single_agent_topology(n: int) -> AgentTopology:
    return AgentTopology(1, ((),), (np.arange(n),))


def load_topology(path, n: int, partition_path=None) -> AgentTopology:
    """Topology CSV: ``#agents=<M>`` header then ``a,b`` links.

    The optional partition CSV holds ``agent,row`` lines; without it rows are
    split contiguously.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#agents="):
        raise ValidationError(f"{path}: first line must be '#agents=<M>'")
    try:
        m = int(lines[0].split("=", 1)[1])
    except ValueError as exc:
        raise ValidationError(f"{path}: bad agent count in header") from exc
    links = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ValidationError(f"{path}:{lineno}: expected 'a,b', got {line!r}")
        try:
            links.append((int(parts[0]), int(parts[1])))
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: non-integer agent id") from exc
    policy = "contiguous"
    if partition_path is not None:
        blocks = [[] for _ in range(m)]
        for lineno, line in enumerate(Path(partition_path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                a, row = (int(x) for x in line.split(","))
            except ValueError as exc:
                raise ValidationError(f"{partition_path}:{lineno}: expected 'agent,row'") from exc
            if not 0 <= a < m:
                raise ValidationError(f"{partition_path}:{lineno}: agent {a} out of range")
            blocks[a].append(row)
        policy = blocks
    return AgentTopology.from_links(m, links, n, policy)


def write_topology(topo: AgentTopology, path) -> None:
    rows = [f"#agents={topo.m}"] + [f"{a},{b}" for a, b in topo.links()]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8", newline="\n")


# --------------------------------------------------------------------------- agent state

@dataclass(frozen=True)
class AgentState:
    agent: int
    rows: np.ndarray
    u_m: np.ndarray
    o_m: np.ndarray
    p_m: np.ndarray
    v_m: np.ndarray
    gamma_m: np.ndarray
    pi_bar_m: np.ndarray
    s_mat_m: np.ndarray
    s_scalar: float

    def __post_init__(self):
        nm, c = self.u_m.shape
        n = self.v_m.shape[0]
        for name, arr, shape in (("o_m", self.o_m, (nm, c)), ("p_m", self.p_m, (nm, c)),
                                 ("v_m", self.v_m, (n, c)), ("gamma_m", self.gamma_m, (nm, c)),
                                 ("pi_bar_m", self.pi_bar_m, (n, c)), ("s_mat_m", self.s_mat_m, (nm, n))):
            if arr.shape != shape:
                raise ValidationError(f"agent {self.agent}: {name} has shape {arr.shape}, expected {shape}")


@dataclass(frozen=True)
class RoundMessage:
    sender: int
    round: int
    v_payload: np.ndarray


class MessageBus:
    """Barrier-synchronized mailbox; delivery of round k happens only after every
    agent has posted its round-k payload."""

    def __init__(self, topo: AgentTopology):
        self.topo = topo
        self._posted: dict[int, RoundMessage] = {}
        self._delivered: dict[int, RoundMessage] = {}
        self.round = -1
        self.sent_per_agent = np.zeros(topo.m, dtype=int)
        self.payload_entries = 0

    def post(self, msg: RoundMessage) -> None:
        if msg.round != self.round + 1:
            raise RuntimeError(f"agent {msg.sender} posted for round {msg.round} during round {self.round + 1}")
        if (msg.v_payload < 0).any():
            raise ValidationError("V payloads must be nonnegative")
        self._posted[msg.sender] = msg

    def barrier(self) -> None:
        if len(self._posted) != self.topo.m:
            missing = sorted(set(range(self.topo.m)) - set(self._posted))
            raise RuntimeError(f"barrier reached with missing posts from agents {missing}")
        self._delivered = self._posted
        self._posted = {}
        self.round += 1
        for a, nb in enumerate(self.topo.neighbors):
            self.sent_per_agent[a] += len(nb)
            self.payload_entries += len(nb) * self._delivered[a].v_payload.size

    def receive(self, agent: int) -> list[np.ndarray]:
        """V payloads from agent's neighbors, ordered by neighbor id."""
        return [self._delivered[b].v_payload for b in self.topo.neighbors[agent]]


# --------------------------------------------------------------------------- block updates

def _solve(g: np.ndarray, r: np.ndarray, nonneg: str) -> np.ndarray:
    """Rows x minimizing 0.5 x G x^T - r x^T: raw (``none``), clipped (``project``)
    or over the orthant (``exact``, coordinate descent started from the clipped point)."""
    if nonneg not in NONNEG_MODES:
        raise ConfigError(f"nonneg must be one of {NONNEG_MODES}")
    try:
        x = np.linalg.solve(g, r.T).T
    except np.linalg.LinAlgError as exc:
        raise ConfigError("singular block system") from exc
    if nonneg == "none":
        return x
    x = project_nonneg(x)
    if nonneg == "exact" and x.size:
        x = nnqp_rows(g, r, x)
    return x


def dual_update(agent: AgentState, neighbor_vs, rho: float) -> AgentState:
    """Gamma += rho (O - P); Pi_bar += (rho/2)(|N| V_m - sum_n V_n)."""
    gamma = agent.gamma_m + rho * (agent.o_m - agent.p_m)
    pi_bar = agent.pi_bar_m.copy()
    if neighbor_vs:
        for vn in neighbor_vs:
            if vn.shape != agent.v_m.shape:
                raise ShapeMismatch(f"neighbor V shape {vn.shape} != {agent.v_m.shape}")
        pi_bar = pi_bar + 0.5 * rho * (len(neighbor_vs) * agent.v_m - sum(neighbor_vs))
    return replace(agent, gamma_m=gamma, pi_bar_m=pi_bar)


def vm_update(agent: AgentState, neighbor_vs, rho: float, lambda_t: float, m_total: int,
              nonneg: str = "project") -> np.ndarray:
    """Solve V G = R with G = 2s Z^T Z + (lambda/M + rho |N|) I, Z = U_m + O_m."""
    deg = len(neighbor_vs)
    z = agent.u_m + agent.o_m
    c = z.shape[1]
    shift = lambda_t / m_total + rho * deg
    if shift <= 0 and np.linalg.matrix_rank(z) < c:
        raise ConfigError("V block is singular: lambda_t/M + rho |N_m| is zero and Z is rank deficient")
    g = 2.0 * agent.s_scalar * (z.T @ z) + shift * np.eye(c)
    r = 2.0 * agent.s_mat_m.T @ z - agent.pi_bar_m
    if deg:
        r = r + 0.5 * rho * (deg * agent.v_m + sum(neighbor_vs))
    return _solve(g, r, nonneg)


def um_update(agent: AgentState, lambda_t: float, nonneg: str = "project") -> np.ndarray:
    """Solve U G_u = R_u with G_u = 2s V^T V + lambda I, R_u = 2 S_m V - 2s O_m V^T V."""
    v = agent.v_m
    gram = v.T @ v
    c = gram.shape[0]
    if lambda_t <= 0 and np.linalg.matrix_rank(gram) < c:
        # degenerate ridge-free block: fall back to one projected gradient step
        grad = 2.0 * agent.s_scalar * (agent.u_m + agent.o_m) @ gram - 2.0 * agent.s_mat_m @ v
        lip = max(2.0 * agent.s_scalar * np.linalg.eigvalsh(gram).max(), 1e-12)
        out = agent.u_m - grad / lip
        return out if nonneg == "none" else project_nonneg(out)
    g = 2.0 * agent.s_scalar * gram + lambda_t * np.eye(c)
    r = 2.0 * agent.s_mat_m @ v - 2.0 * agent.s_scalar * agent.o_m @ gram
    return _solve(g, r, nonneg)


def om_update(agent: AgentState, rho: float, lambda_t: float, nonneg: str = "project") -> np.ndarray:
    """Solve O G_o = R_o with G_o = 2s V^T V + rho I,
    R_o = 2 S_m V - 2s U_m V^T V - Gamma + rho P.

    lambda_t is accepted for signature symmetry; the ridge does not touch O.
    """
    del lambda_t
    v = agent.v_m
    gram = v.T @ v
    g = 2.0 * agent.s_scalar * gram + rho * np.eye(gram.shape[0])
    r = (2.0 * agent.s_mat_m @ v - 2.0 * agent.s_scalar * agent.u_m @ gram
         - agent.gamma_m + rho * agent.p_m)
    return _solve(g, r, nonneg)


def pm_update(agent: AgentState, rho: float, mu_t: float) -> np.ndarray:
    """[S_{mu/rho}(O + Gamma/rho)]_+."""
    return project_nonneg(soft_threshold(agent.o_m + agent.gamma_m / rho, mu_t / rho))


def agent_round(agent: AgentState, neighbor_vs, rho: float, lambda_t: float, mu_t: float,
                m_total: int, nonneg: str) -> AgentState:
    """Dual step, then V, U, O, P in that order, each using the freshest values."""
    ag = dual_update(agent, neighbor_vs, rho)
    ag = replace(ag, v_m=vm_update(ag, neighbor_vs, rho, lambda_t, m_total, nonneg))
    ag = replace(ag, u_m=um_update(ag, lambda_t, nonneg))
    ag = replace(ag, o_m=om_update(ag, rho, lambda_t, nonneg))
    ag = replace(ag, p_m=pm_update(ag, rho, mu_t))
    for name in ("u_m", "v_m", "o_m", "p_m", "gamma_m", "pi_bar_m"):
        if not np.all(np.isfinite(getattr(ag, name))):
            raise NumericError(f"agent {ag.agent}: non-finite {name[:-2].upper()}")
    return ag


# --------------------------------------------------------------------------- harness

class RowBlockFeed:
    """Hands an agent its own rows of each snapshot and logs what was served."""

    def __init__(self, series: SnapshotSeries, rows: np.ndarray):
        self._series = series
        self.rows = np.asarray(rows, dtype=int)
        self.rows_served: set[int] = set()

    def block(self, t: int) -> np.ndarray:
        self.rows_served.update(self.rows.tolist())
        return self._series[t].entries[self.rows]


def consensus_residual(vs) -> float:
    """max_{m,n} ||V_m - V_n||_F / ||mean V||_F (0 for a single agent)."""
    if len(vs) < 2:
        return 0.0
    vbar = np.mean(vs, axis=0)
    denom = max(float(np.linalg.norm(vbar)), 1e-300)
    worst = 0.0
    for i in range(len(vs)):
        for j in range(i + 1, len(vs)):
            worst = max(worst, float(np.linalg.norm(vs[i] - vs[j])))
    return worst / denom


def _rel(new, old) -> float:
    return float(np.linalg.norm(new - old) / max(1.0, np.linalg.norm(old)))


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("COMTRACK_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class DecentralizedRun:
    """Extras kept alongside the TrackResult for inspection and tests."""
    agents: list
    feeds: list
    bus_messages: np.ndarray
    rounds_per_interval: list = field(default_factory=list)


def run_decentralized(series: SnapshotSeries, hp: Hyperparams, topo: AgentTopology,
                      init: InitPolicy, *, nonneg: str = "exact", workers: int | None = None,
                      agent_order=None, return_run: bool = False):
    """Track with per-agent ADMM rounds; see the module docstring.

    Per interval the rounds stop once every agent's relative change of
    (U_m, V_m, O_m) is <= hp.tol, or after hp.max_outer rounds. Global U and O
    stack the agents' row blocks; global V is the mean of the local copies.
    ``agent_order`` permutes the order agents are processed within a round;
    results do not depend on it.
    """
    if topo.n != series.n:
        raise ValidationError(f"topology covers {topo.n} rows, series has {series.n}")
    if not topo.is_connected():
        raise ValidationError("agent topology is not connected")
    if nonneg not in NONNEG_MODES[1:]:
        raise ConfigError("run_decentralized needs nonneg 'project' or 'exact'")
    workers = default_workers() if workers is None else max(1, int(workers))
    order = list(range(topo.m)) if agent_order is None else list(agent_order)
    if sorted(order) != list(range(topo.m)):
        raise ValidationError("agent_order must be a permutation of the agent ids")

    n, c = series.n, hp.c
    st0 = init.resolve(series, c)
    feeds = [RowBlockFeed(series, rows) for rows in topo.row_partition]
    agents = []
    for a, rows in enumerate(topo.row_partition):
        nm = len(rows)
        agents.append(AgentState(
            a, np.asarray(rows), st0.u[rows].copy(), st0.o[rows].copy(), st0.o[rows].copy(),
            st0.v.copy(), np.zeros((nm, c)), np.zeros((n, c)), np.zeros((nm, n)), 0.0,
        ))
    bus = MessageBus(topo)
    for ag in agents:
        bus.post(RoundMessage(ag.agent, 0, ag.v_m))
    bus.barrier()

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    states, diags, rounds_log = [], [], []
    stats = SufficientStats.initial(n)
    try:
        for t in range(len(series)):
            t0 = time.perf_counter()
            count = t + 1
            s_scalar = weight_sum(count, hp.beta)
            lam, mu = hp.lam(count), hp.mu(count)
            agents = [replace(ag, s_mat_m=feeds[ag.agent].block(t) + hp.beta * ag.s_mat_m,
                              s_scalar=s_scalar, p_m=ag.o_m.copy()) for ag in agents]
            change, k = np.inf, 0
            for k in range(1, hp.max_outer + 1):
                inbox = {a: bus.receive(a) for a in range(topo.m)}

                def work(a, _agents=agents, _inbox=inbox):
                    return a, agent_round(_agents[a], _inbox[a], hp.rho, lam, mu, topo.m, nonneg)

                if pool is None:
                    results = dict(work(a) for a in order)
                else:
                    results = dict(pool.map(work, order))
                new_agents = [results[a] for a in range(topo.m)]
                change = max(max(_rel(nw.u_m, od.u_m), _rel(nw.v_m, od.v_m), _rel(nw.o_m, od.o_m))
                             for nw, od in zip(new_agents, agents))
                agents = new_agents
                for ag in agents:
                    bus.post(RoundMessage(ag.agent, bus.round + 1, ag.v_m))
                bus.barrier()
                if change <= hp.tol:
                    break
            u = np.zeros((n, c))
            o = np.zeros((n, c))
            for ag in agents:
                u[ag.rows] = ag.u_m
                o[ag.rows] = ag.o_m
            vs = [ag.v_m for ag in agents]
            v = np.mean(vs, axis=0)
            st = FactorState(u, v, o)
            stats = SufficientStats(series[t].entries + hp.beta * stats.s_mat, s_scalar, t)
            states.append(st)
            rounds_log.append(k)
            diags.append(IntervalDiagnostics(
                t, k, full_objective(st, stats, lam, mu), 0, time.perf_counter() - t0, change, [],
                {"consensus_residual": consensus_residual(vs),
                 "v_max_deviation": float(max(np.abs(x - v).max() for x in vs)),
                 "op_residual": float(max(np.linalg.norm(ag.o_m - ag.p_m) for ag in agents))},
            ))
    finally:
        if pool is not None:
            pool.shutdown()
    result = TrackResult("decentralized", states, diags)
    if return_run:
        return result, DecentralizedRun(agents, feeds, bus.sent_per_agent.copy(), rounds_log)
    return result
