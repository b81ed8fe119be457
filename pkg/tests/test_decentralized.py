from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comtrack.decentralized import (
    AgentState,
    AgentTopology,
    ConfigError,
    MessageBus,
    RoundMessage,
    ShapeMismatch,
    agent_round,
    consensus_residual,
    dual_update,
    ladder_topology,
    load_topology,
    om_update,
    partition_rows,
    pm_update,
    run_decentralized,
    single_agent_topology,
    um_update,
    vm_update,
    write_topology,
)
from comtrack.model import FactorState, Hyperparams, Schedule, SufficientStats, grad_v
from comtrack.snapshots import SnapshotSeries, ValidationError
from comtrack.trackers import InitPolicy, track_exact

from oracles import PairwiseDualOracle, central_difference


def make_agent(rng, n=8, nm=3, c=2, agent=0, rows=None, **over):
    fields = dict(
        agent=agent, rows=np.arange(nm) if rows is None else rows,
        u_m=rng.random((nm, c)), o_m=rng.random((nm, c)), p_m=rng.random((nm, c)),
        v_m=rng.random((n, c)), gamma_m=rng.standard_normal((nm, c)),
        pi_bar_m=rng.standard_normal((n, c)), s_mat_m=rng.random((nm, n)) * 2,
        s_scalar=float(rng.uniform(1, 3)),
    )
    fields.update(over)
    return AgentState(**fields)


def psi(agent, u, o, v, lam, m_total):
    """Local smooth cost: s||(U+O)V^T||^2 - 2 Tr(S_m^T (U+O) V^T) + lam/2 ||U||^2 + lam/(2M) ||V||^2."""
    z = u + o
    rec = z @ v.T
    return (agent.s_scalar * np.sum(rec * rec) - 2 * np.sum(agent.s_mat_m * rec)
            + 0.5 * lam * np.sum(u * u) + 0.5 * lam / m_total * np.sum(v * v))


def small_series(seed, n=20, c=2, t_len=3):
    rng = np.random.default_rng(seed)
    u, v = rng.random((n, c)), rng.random((n, c))
    return SnapshotSeries.from_arrays(
        [np.maximum(u @ v.T + 0.1 * rng.standard_normal((n, n)), 0) for _ in range(t_len)])


def small_hp(**kw):
    base = dict(beta=0.9, c=2, lambda_schedule=Schedule(0.5), mu_schedule=Schedule(0.3),
                rho=5.0, max_outer=40, tol=1e-8)
    base.update(kw)
    return Hyperparams(**base)


# --------------------------------------------------------------------------- topology

def test_contiguous_partition_of_100_rows_over_10_agents():
    blocks = partition_rows(100, 10)
    assert [len(b) for b in blocks] == [10] * 10
    assert np.array_equal(np.concatenate(blocks), np.arange(100))


def test_single_block_partition():
    (block,) = partition_rows(7, 1)
    assert block.tolist() == list(range(7))


@given(st.integers(1, 60).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n), st.integers(0, 2**31))))
def test_random_partitions_are_disjoint_covers(args):
    n, m, seed = args
    perm = np.random.default_rng(seed).permutation(n)
    cuts = np.sort(np.random.default_rng(seed + 1).choice(np.arange(1, n), m - 1, replace=False)) if m > 1 else []
    given_blocks = np.split(perm, cuts)
    for blocks in (partition_rows(n, m), partition_rows(n, m, given_blocks)):
        flat = np.concatenate(blocks)
        assert sorted(flat.tolist()) == list(range(n))
        assert len(blocks) == m
    sizes = [len(b) for b in partition_rows(n, m)]
    assert max(sizes) - min(sizes) <= 1


def test_invalid_partitions():
    with pytest.raises(ValidationError):
        partition_rows(3, 4)
    with pytest.raises(ValidationError):
        partition_rows(4, 2, [[0, 1], [1, 2, 3]])
    with pytest.raises(ValidationError):
        partition_rows(4, 2, [[0, 1, 2, 3], []])


def test_ladder_shape():
    topo = ladder_topology(100)
    assert topo.m == 10 and topo.is_connected()
    assert len(topo.links()) == 13
    assert sorted(len(nb) for nb in topo.neighbors) == [2, 2, 2, 2, 3, 3, 3, 3, 3, 3]


def test_topology_validation():
    with pytest.raises(ValidationError):
        AgentTopology(2, ((1,), ()), (np.arange(2), np.arange(2, 4)))
    with pytest.raises(ValidationError):
        AgentTopology.from_links(2, [(0, 0)], 4)
    with pytest.raises(ValidationError):
        AgentTopology.from_links(2, [(0, 5)], 4)


def test_topology_file_round_trip(tmp_path):
    topo = ladder_topology(40)
    p = tmp_path / "topo.csv"
    write_topology(topo, p)
    back = load_topology(p, 40)
    assert back.neighbors == topo.neighbors
    part = tmp_path / "part.csv"
    part.write_text("".join(f"{r % 10},{r}\n" for r in range(40)))
    custom = load_topology(p, 40, part)
    assert custom.row_partition[3].tolist() == [3, 13, 23, 33]


def test_topology_file_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("0,1\n")
    with pytest.raises(ValidationError):
        load_topology(p, 4)
    p.write_text("#agents=2\n0;1\n")
    with pytest.raises(ValidationError):
        load_topology(p, 4)


def test_disconnected_topology_rejected():
    topo = AgentTopology.from_links(3, [(0, 1)], 6)
    with pytest.raises(ValidationError, match="connected"):
        run_decentralized(small_series(0, n=6), small_hp(), topo, InitPolicy.random(0))


# --------------------------------------------------------------------------- dual updates

def test_duals_fixed_at_consensus():
    rng = np.random.default_rng(0)
    ag = make_agent(rng)
    ag = replace(ag, p_m=ag.o_m.copy())
    out = dual_update(ag, [ag.v_m.copy(), ag.v_m.copy()], 2.0)
    assert np.array_equal(out.gamma_m, ag.gamma_m)
    assert np.array_equal(out.pi_bar_m, ag.pi_bar_m)


def test_single_neighbor_shift_moves_pi_bar_by_half_rho_delta():
    rng = np.random.default_rng(1)
    ag = make_agent(rng)
    delta = rng.random(ag.v_m.shape)
    out = dual_update(ag, [ag.v_m + delta], 3.0)
    assert np.allclose(ag.pi_bar_m - out.pi_bar_m, 1.5 * delta)


def test_dual_shape_mismatch():
    rng = np.random.default_rng(2)
    ag = make_agent(rng)
    with pytest.raises(ShapeMismatch):
        dual_update(ag, [np.zeros((3, 2))], 1.0)


def test_pairwise_duals_are_antisymmetric_and_aggregate():
    """Run real rounds on a 2-agent line next to the unreduced per-link recursion."""
    series = small_series(3, n=10, t_len=1)
    topo = AgentTopology.from_links(2, [(0, 1)], 10)
    rng = np.random.default_rng(3)
    c = 2
    v0 = rng.random((10, c))
    agents = []
    for a, rows in enumerate(topo.row_partition):
        nm = len(rows)
        agents.append(AgentState(a, rows, rng.random((nm, c)), np.zeros((nm, c)), np.zeros((nm, c)),
                                 v0.copy() + a * 0.1, np.zeros((nm, c)), np.zeros((10, c)),
                                 series[0].entries[rows], 1.0))
    oracle = PairwiseDualOracle(topo.neighbors, (10, c))
    rho = 2.0
    for _ in range(6):
        vs = [ag.v_m for ag in agents]
        oracle.step(vs, rho)
        agents = [agent_round(ag, [vs[b] for b in topo.neighbors[ag.agent]], rho, 0.3, 0.2, 2, "exact")
                  for ag in agents]
        assert np.allclose(oracle.pi[(0, 1)], -oracle.pi[(1, 0)], atol=0)
        for ag in agents:
            assert np.allclose(ag.pi_bar_m, oracle.aggregated(ag.agent), rtol=1e-12, atol=1e-12)


# --------------------------------------------------------------------------- block solves

def test_vm_update_neighborhood_average():
    rng = np.random.default_rng(4)
    z = np.zeros((3, 2))
    ag = make_agent(rng, u_m=z, o_m=z, pi_bar_m=np.zeros((8, 2)))
    nbs = [rng.random((8, 2)) for _ in range(3)]
    v = vm_update(ag, nbs, rho=1.7, lambda_t=0.0, m_total=4)
    assert np.allclose(v, (3 * ag.v_m + sum(nbs)) / 6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 3))
def test_vm_update_zeroes_local_gradient(seed, deg):
    rng = np.random.default_rng(seed)
    ag = make_agent(rng)
    nbs = [rng.random(ag.v_m.shape) for _ in range(deg)]
    rho, lam, m_total = 1.3, 0.4, 5

    def cost(v):
        extra = 0.5 * rho * deg * np.sum(v * v) + np.sum(v * ag.pi_bar_m)
        if deg:
            extra -= np.sum(v * 0.5 * rho * (deg * ag.v_m + sum(nbs)))
        return psi(ag, ag.u_m, ag.o_m, v, lam, m_total) + extra

    if deg == 0:
        ag = replace(ag, pi_bar_m=np.zeros_like(ag.pi_bar_m))
    v = vm_update(ag, nbs, rho, lam, m_total, nonneg="none")
    assert np.abs(central_difference(cost, v, h=1e-5)).max() <= 1e-6


def test_single_agent_v_update_is_centralized_stationary_point():
    rng = np.random.default_rng(5)
    u, o, v_star = rng.random((6, 2)), rng.random((6, 2)), rng.random((6, 2)) + 0.5
    s = 1.7
    # data generated by v_star keeps the ridge-shrunk root inside the orthant
    ag = make_agent(rng, n=6, nm=6, u_m=u, o_m=o, pi_bar_m=np.zeros((6, 2)),
                    s_mat_m=s * (u + o) @ v_star.T, s_scalar=s)
    v = vm_update(ag, [], rho=1.0, lambda_t=0.05, m_total=1, nonneg="none")
    assert (v >= 0).all()
    stats = SufficientStats(ag.s_mat_m, s, 0)
    assert np.abs(grad_v(FactorState(u, v, o), stats, 0.05)).max() <= 1e-8


def test_v_singular_block_is_config_error():
    rng = np.random.default_rng(6)
    z = np.zeros((3, 2))
    ag = make_agent(rng, u_m=z, o_m=z)
    with pytest.raises(ConfigError):
        vm_update(ag, [], rho=1.0, lambda_t=0.0, m_total=1)


def test_um_update_recovers_consistent_factor():
    rng = np.random.default_rng(7)
    u_star, v = rng.random((3, 2)), rng.random((8, 2))
    s = 2.5
    ag = make_agent(rng, u_m=np.zeros((3, 2)), o_m=np.zeros((3, 2)), v_m=v,
                    s_mat_m=s * u_star @ v.T, s_scalar=s)
    assert np.allclose(um_update(ag, 0.0), u_star, atol=1e-8)


def test_um_update_with_zero_basis_is_zero():
    rng = np.random.default_rng(8)
    ag = make_agent(rng, v_m=np.zeros((8, 2)))
    assert not um_update(ag, 0.5).any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_um_and_om_updates_zero_their_gradients(seed):
    rng = np.random.default_rng(seed)
    ag = make_agent(rng)
    lam, rho = 0.4, 1.7
    u = um_update(ag, lam, nonneg="none")
    gu = central_difference(lambda x: psi(ag, x, ag.o_m, ag.v_m, lam, 1), u, h=1e-5)
    assert np.abs(gu).max() <= 1e-6

    def o_cost(o):
        return (psi(ag, ag.u_m, o, ag.v_m, lam, 1) + np.sum(ag.gamma_m * o)
                + 0.5 * rho * np.sum((o - ag.p_m) ** 2))

    o = om_update(ag, rho, lam, nonneg="none")
    assert np.abs(central_difference(o_cost, o, h=1e-5)).max() <= 1e-6


def test_exact_mode_block_solutions_satisfy_kkt():
    rng = np.random.default_rng(9)
    ag = make_agent(rng, s_mat_m=rng.random((3, 8)) - 0.7)
    u = um_update(ag, 0.4, nonneg="exact")
    g = central_difference(lambda x: psi(ag, x, ag.o_m, ag.v_m, 0.4, 1), u, h=1e-6)
    assert (u >= 0).all()
    assert np.abs(u - np.maximum(u - g, 0)).max() <= 1e-6


def test_pm_update_cases():
    rng = np.random.default_rng(10)
    ag = make_agent(rng, o_m=np.zeros((3, 2)), gamma_m=np.zeros((3, 2)))
    assert not pm_update(ag, 1.0, 0.0).any()
    one = make_agent(rng, nm=1, c=1, o_m=np.ones((1, 1)), gamma_m=np.zeros((1, 1)))
    assert pm_update(one, 1.0, 0.4)[0, 0] == pytest.approx(0.6)


def test_unknown_nonneg_mode():
    rng = np.random.default_rng(11)
    with pytest.raises(ConfigError):
        um_update(make_agent(rng), 0.4, nonneg="clip")
    with pytest.raises(ConfigError):
        run_decentralized(small_series(0), small_hp(), ladder_topology(20, 2), InitPolicy.random(0),
                          nonneg="none")


# --------------------------------------------------------------------------- message bus

def test_bus_requires_every_post_before_barrier():
    topo = ladder_topology(8, 4)
    bus = MessageBus(topo)
    bus.post(RoundMessage(0, 0, np.zeros((8, 2))))
    with pytest.raises(RuntimeError, match="missing"):
        bus.barrier()
    with pytest.raises(RuntimeError):
        bus.post(RoundMessage(1, 3, np.zeros((8, 2))))
    with pytest.raises(ValidationError):
        bus.post(RoundMessage(1, 0, -np.ones((8, 2))))


def test_consensus_residual_values():
    v = np.ones((3, 2))
    assert consensus_residual([v]) == 0.0
    assert consensus_residual([v, v]) == 0.0
    assert consensus_residual([v, 2 * v]) == pytest.approx(np.linalg.norm(v) / np.linalg.norm(1.5 * v))


# --------------------------------------------------------------------------- harness

@pytest.fixture(scope="module")
def ladder_run():
    series = small_series(12)
    topo = ladder_topology(20, 4)
    res, run = run_decentralized(series, small_hp(), topo, InitPolicy.nmf_of_first_snapshot(),
                                 return_run=True)
    return series, topo, res, run


def test_information_locality(ladder_run):
    _, topo, _, run = ladder_run
    for feed, rows in zip(run.feeds, topo.row_partition):
        assert feed.rows_served == set(rows.tolist())
    for ag in run.agents:
        assert ag.s_mat_m.shape[0] == len(topo.row_partition[ag.agent])


def test_message_counts(ladder_run):
    _, topo, _, run = ladder_run
    rounds = sum(run.rounds_per_interval) + 1  # one initial broadcast
    for a, nb in enumerate(topo.neighbors):
        assert run.bus_messages[a] == len(nb) * rounds


def test_outputs_nonnegative_with_diagnostics(ladder_run):
    series, _, res, _ = ladder_run
    assert len(res) == len(series)
    for st_, d in zip(res.states, res.diagnostics):
        assert min(st_.u.min(), st_.v.min(), st_.o.min()) >= 0
        assert {"consensus_residual", "v_max_deviation", "op_residual"} <= set(d.extra)


def test_agent_order_and_thread_count_do_not_change_results(ladder_run):
    series, topo, res, _ = ladder_run
    for kw in ({"agent_order": [3, 1, 0, 2]}, {"workers": 3}):
        other = run_decentralized(series, small_hp(), topo, InitPolicy.nmf_of_first_snapshot(), **kw)
        for a, b in zip(res.states, other.states):
            assert a.u.tobytes() == b.u.tobytes()
            assert a.v.tobytes() == b.v.tobytes()
            assert a.o.tobytes() == b.o.tobytes()


def test_topology_size_must_match_series():
    with pytest.raises(ValidationError):
        run_decentralized(small_series(0, n=20), small_hp(), ladder_topology(22, 2), InitPolicy.random(0))


def test_single_agent_matches_exact_tracker():
    rng = np.random.default_rng(1)
    n, c = 12, 2
    u, v = rng.random((n, c)), rng.random((n, c))
    series = SnapshotSeries.from_arrays(
        [np.maximum(u @ v.T + 0.1 * rng.standard_normal((n, n)), 0) for _ in range(2)])
    hp = Hyperparams(beta=0.9, c=c, lambda_schedule=Schedule(1.0), mu_schedule=Schedule(0.5),
                     tol=1e-10, max_outer=20000, max_inner=2000, inner_tol=1e-12, rho=1.0)
    init = InitPolicy.given(FactorState(u * 0.9 + 0.05, v * 0.9 + 0.05, np.zeros((n, c))))
    dec = run_decentralized(series, hp, single_agent_topology(n), init)
    ex = track_exact(series, hp, init, record_trace=False)
    for a, b in zip(dec.diagnostics, ex.diagnostics):
        assert abs(a.objective - b.objective) <= 1e-6
