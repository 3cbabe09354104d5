import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import random_factor_instance
from vgicp_slam.factors import MatchingCostFactor, RelativePoseFactor, RobustKernel
from vgicp_slam.linear import (
    BLOCK,
    BlockSystem,
    NotPositiveDefiniteError,
    assemble_normal_equations,
    solve_block_system,
)
from vgicp_slam.optimizer import LMSettings, MappingGraph, optimize
from vgicp_slam.se3 import Pose, between, random_pose, se3_exp


def random_sparse_system(rng, n, edge_prob):
    sys_ = BlockSystem(list(range(n)))
    for a in range(n):
        A = rng.normal(size=(BLOCK, BLOCK))
        sys_.add(a, a, A @ A.T + 0.5 * np.eye(BLOCK))
    for a in range(n):
        for b in range(a):
            if rng.random() < edge_prob:
                J = rng.normal(size=(BLOCK, 2 * BLOCK))
                H = J.T @ J
                sys_.add(a, a, H[:BLOCK, :BLOCK])
                sys_.add(b, b, H[BLOCK:, BLOCK:])
                sys_.add(a, b, H[:BLOCK, BLOCK:])
    sys_.rhs = rng.normal(size=BLOCK * n)
    return sys_


@given(st.integers(1, 20), st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_block_cholesky_matches_dense_solve(n, p, seed):
    rng = np.random.default_rng(seed)
    system = random_sparse_system(rng, n, p)
    H = system.dense()
    expected = np.linalg.solve(H, system.rhs)
    x = solve_block_system(system)
    assert np.linalg.norm(x - expected) <= 1e-9 * max(1.0, np.linalg.norm(expected)) * np.linalg.cond(H) ** 0.5


def test_not_positive_definite_names_variable(rng):
    system = random_sparse_system(rng, 4, 0.0)
    system.variables = [10, 11, 12, 13]
    system.blocks[(1, 1)] = -np.eye(BLOCK)
    with pytest.raises(NotPositiveDefiniteError) as exc:
        solve_block_system(system)
    assert exc.value.variable == 11
    assert "11" in str(exc.value)


def test_assembly_drops_fixed_variables(rng):
    f = RelativePoseFactor(0, 1, random_pose(rng))
    lin = f.linearize([random_pose(rng), random_pose(rng)])
    s = assemble_normal_equations([lin], 2, [True, False])
    assert s.variables == [1]
    assert np.allclose(s.dense(), lin.H_jj)
    assert np.allclose(s.rhs, lin.b_j)
    s2 = assemble_normal_equations([lin], 2, [False, False])
    assert np.allclose(s2.dense(), lin.H)


def _chain_graph(rng, n, noise=0.1):
    truth = [Pose()]
    for _ in range(n - 1):
        truth.append(truth[-1] @ se3_exp(np.r_[0, 0, 0.1, 1.0, 0, 0]))
    factors = [RelativePoseFactor(k, k + 1, between(truth[k], truth[k + 1])) for k in range(n - 1)]
    factors.append(RelativePoseFactor(0, n - 1, between(truth[0], truth[-1]), kernel=RobustKernel.huber(5.0)))
    init = [truth[0]] + [p.retract(rng.normal(scale=noise, size=6)) for p in truth[1:]]
    return MappingGraph(init, [], factors), truth


def test_lm_trace_is_non_increasing_and_converges(rng):
    graph, truth = _chain_graph(rng, 12)
    poses, report = optimize(graph)
    acc = [r["error"] for r in report.trace if r["accepted"]]
    assert all(b <= a for a, b in zip(acc, acc[1:]))
    assert report.final_error < 1e-10
    for p, t in zip(poses, truth):
        assert np.allclose(p.matrix(), t.matrix(), atol=1e-5)


def test_lm_does_not_modify_graph(rng):
    graph, _ = _chain_graph(rng, 5)
    before = [p.matrix() for p in graph.poses]
    optimize(graph)
    assert all(np.array_equal(a, p.matrix()) for a, p in zip(before, graph.poses))


def test_zero_error_graph_is_fixed_point(rng):
    graph, truth = _chain_graph(rng, 6, noise=0.0)
    graph.poses = list(truth)
    poses, report = optimize(graph)
    assert report.termination == "already_optimal"
    assert all(p is t for p, t in zip(poses, truth))


def test_lm_with_matching_cost_factor(rng):
    source, vmap, T_i, T_j = random_factor_instance(rng, 600, resolution=2.0)
    f = MatchingCostFactor(0, 1, source, vmap)
    graph = MappingGraph([T_i, T_j.retract(np.r_[0.01, 0, 0.01, 0.05, -0.05, 0])], [f])
    poses, report = optimize(graph, LMSettings(max_iterations=50))
    acc = [r["error"] for r in report.trace if r["accepted"]]
    assert all(b <= a for a, b in zip(acc, acc[1:]))
    assert report.final_error <= report.initial_error
    assert poses[0] is T_i


def test_gauge_fixed_per_component(rng):
    poses = [random_pose(rng) for _ in range(5)]
    factors = [
        RelativePoseFactor(0, 1, random_pose(rng)),
        RelativePoseFactor(3, 2, random_pose(rng)),
        RelativePoseFactor(4, 3, random_pose(rng)),
    ]
    graph = MappingGraph(poses, [], factors)
    assert graph.fixed_mask().tolist() == [True, False, True, False, False]
    out, _ = optimize(graph)
    assert out[0] is poses[0] and out[2] is poses[2]
    assert np.linalg.norm(RelativePoseFactor(3, 2, factors[1].measurement).residual(out[3], out[2])) < 1e-6


def test_validate_rejects_bad_factor_keys(rng):
    graph = MappingGraph([Pose(), Pose()], [], [RelativePoseFactor(0, 5, Pose())])
    with pytest.raises(ValueError):
        optimize(graph)
    graph = MappingGraph([Pose(), Pose()], [], [RelativePoseFactor(0, 1, Pose())], fixed=set())
    with pytest.raises(ValueError):
        optimize(graph)


def test_explicit_fixed_set_is_honoured(rng):
    graph, truth = _chain_graph(rng, 4)
    graph.fixed = {0, 2}
    out, _ = optimize(graph)
    assert out[2] is graph.poses[2]
