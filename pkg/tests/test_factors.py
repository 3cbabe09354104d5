import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import structured_scene
from oracles import central_gradient, frozen_cost, random_factor_instance
from vgicp_slam.factors import (
    MatchingCostFactor,
    RelativePoseFactor,
    RobustKernel,
    apply_kernel,
    gicp_align,
    gicp_error,
    hessian_covariance,
    linearize_matching_cost,
    relative_pose_jacobians,
)
from vgicp_slam.pointcloud import GaussianPoint, estimate_covariances
from vgicp_slam.se3 import Pose, between, random_pose, se3_exp
from vgicp_slam.voxelmap import GaussianVoxel


def test_gicp_error_single_pair():
    p = GaussianPoint(np.array([1.0, 0.0, 0.0]), np.diag([0.1, 0.2, 0.3]))
    v = GaussianVoxel(np.array([1.0, 2.0, 0.0]), np.diag([0.9, 0.3, 0.2]), 1)
    err, d, omega = gicp_error(p, v, Pose())
    assert np.allclose(d, [0, 2, 0])
    assert np.allclose(omega, np.diag([1.0, 2.0, 2.0]))
    assert err == pytest.approx(8.0)


def test_error_matches_per_point_oracle(rng):
    source, vmap, T_i, T_j = random_factor_instance(rng, 400)
    f = MatchingCostFactor(0, 1, source, vmap)
    corr = f.correspondences(between(T_i, T_j))
    assert (corr >= 0).sum() > 100
    assert f.error([T_i, T_j]) == pytest.approx(frozen_cost(source, vmap, T_i, T_j, corr), rel=1e-12)
    lin = f.linearize([T_i, T_j])
    assert lin.error == pytest.approx(f.error([T_i, T_j]), rel=1e-12)
    assert lin.inliers == (corr >= 0).sum()


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    source, vmap, T_i, T_j = random_factor_instance(rng, int(rng.integers(200, 600)))
    f = MatchingCostFactor(0, 1, source, vmap)
    corr = f.correspondences(between(T_i, T_j))
    lin = linearize_matching_cost(f, T_i, T_j)
    num = central_gradient(lambda a, b: frozen_cost(source, vmap, a, b, corr), T_i, T_j)
    analytic = -2.0 * lin.b
    assert np.linalg.norm(analytic - num) / np.linalg.norm(num) < 1e-5


def test_hessian_is_gauss_newton_of_residuals(rng):
    source, vmap, T_i, T_j = random_factor_instance(rng, 300)
    f = MatchingCostFactor(0, 1, source, vmap)
    T = between(T_i, T_j)
    corr = f.correspondences(T)
    # numeric residual Jacobians w.r.t. a right perturbation of T_j, weights frozen
    H = np.zeros((6, 6))
    h = 1e-6
    for k, j in enumerate(corr):
        if j < 0:
            continue
        M = vmap.covariances[j] + T.R @ source.covariances[k] @ T.R.T
        W = np.linalg.inv(M)
        J = np.zeros((3, 6))
        for a in range(6):
            d = np.zeros(6)
            d[a] = h
            ep = vmap.means[j] - between(T_i, T_j.retract(d)).act(source.points[k])
            em = vmap.means[j] - between(T_i, T_j.retract(-d)).act(source.points[k])
            J[:, a] = (ep - em) / (2 * h)
        H += J.T @ W @ J
    lin = linearize_matching_cost(f, T_i, T_j)
    assert np.allclose(lin.H_jj, H, rtol=1e-5, atol=1e-6 * np.abs(H).max())
    full = lin.H
    assert np.allclose(full, full.T, atol=1e-9 * np.abs(full).max())
    assert np.linalg.eigvalsh(full).min() > -1e-8 * np.abs(full).max()


def test_factor_depends_only_on_relative_pose(rng):
    source, vmap, T_i, T_j = random_factor_instance(rng, 300)
    f = MatchingCostFactor(0, 1, source, vmap)
    G = random_pose(rng)
    assert f.error([G @ T_i, G @ T_j]) == pytest.approx(f.error([T_i, T_j]), rel=1e-9)


def test_no_overlap_gives_zero_factor(rng):
    source, vmap, T_i, T_j = random_factor_instance(rng, 200)
    far = Pose(np.eye(3), [1000.0, 0, 0])
    f = MatchingCostFactor(0, 1, source, vmap)
    lin = f.linearize([Pose(), far])
    assert lin.error == 0.0 and lin.inliers == 0
    assert not lin.H.any() and not lin.b.any()


def test_matching_factor_rejects_self_loop(rng):
    source, vmap, _, _ = random_factor_instance(rng, 50)
    with pytest.raises(ValueError):
        MatchingCostFactor(2, 2, source, vmap)


# --- relative pose factor -------------------------------------------------


def test_relative_factor_zero_at_measurement(rng):
    T_i = random_pose(rng)
    Z = random_pose(rng, max_angle=0.5)
    f = RelativePoseFactor(0, 1, Z)
    poses = [T_i, T_i @ Z]
    assert np.allclose(f.residual(*poses), 0, atol=1e-12)
    assert f.error(poses) == pytest.approx(0.0, abs=1e-20)


@given(st.integers(0, 10_000))
def test_relative_pose_jacobians_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    T_i = random_pose(rng)
    T_j = T_i @ random_pose(rng, max_angle=1.0, max_trans=3.0)
    f = RelativePoseFactor(0, 1, random_pose(rng, max_angle=1.0, max_trans=3.0))
    r, J_i, J_j = relative_pose_jacobians(f, T_i, T_j)
    h = 1e-6
    for k in range(6):
        d = np.zeros(6)
        d[k] = h
        num_i = (f.residual(T_i.retract(d), T_j) - f.residual(T_i.retract(-d), T_j)) / (2 * h)
        num_j = (f.residual(T_i, T_j.retract(d)) - f.residual(T_i, T_j.retract(-d))) / (2 * h)
        assert np.allclose(J_i[:, k], num_i, atol=1e-5)
        assert np.allclose(J_j[:, k], num_j, atol=1e-5)


def test_relative_factor_gradient_matches_cost(rng):
    T_i, T_j = random_pose(rng), random_pose(rng)
    f = RelativePoseFactor(0, 1, random_pose(rng), kernel=RobustKernel.huber(3.0))
    lin = f.linearize([T_i, T_j])
    num = central_gradient(lambda a, b: f.error([a, b]), T_i, T_j)
    assert np.allclose(-2.0 * lin.b, num, rtol=1e-5, atol=1e-6)


def test_information_validation():
    with pytest.raises(ValueError):
        RelativePoseFactor(0, 1, Pose(), information=-np.eye(6))
    with pytest.raises(ValueError):
        RelativePoseFactor(0, 1, Pose(), information=np.eye(5))


# --- kernels ----------------------------------------------------------------


def test_shifted_tukey_examples():
    k = RobustKernel.shifted_tukey(1.0, 1.0)
    assert apply_kernel(k, 1.0)[0] == 1.0  # x = offset
    assert apply_kernel(k, 4.0)[0] == 0.0  # x - offset = sqrt(w)
    assert apply_kernel(RobustKernel.shifted_tukey(1.0, 2.0), 0.0)[0] == 0.0
    assert apply_kernel(k, 100.0**2)[0] == 0.0


def test_shifted_tukey_far_error_gives_zero_factor(rng):
    f = RelativePoseFactor(0, 1, Pose(), kernel=RobustKernel.shifted_tukey(1.0, 1.0))
    lin = f.linearize([Pose(), Pose(np.eye(3), [50.0, 0, 0])])
    assert not lin.H.any() and not lin.b.any()


@pytest.mark.parametrize("kernel", [RobustKernel.huber(1.5), RobustKernel.shifted_tukey(2.0, 1.0), RobustKernel()])
def test_kernel_cost_derivative_is_weight(kernel):
    s = np.linspace(0.01, 20.0, 400)
    w, _ = apply_kernel(kernel, s)
    h = 1e-6
    num = (apply_kernel(kernel, s + h)[1] - apply_kernel(kernel, s - h)[1]) / (2 * h)
    assert np.allclose(num, w, atol=1e-6)


def test_huber_weight():
    k = RobustKernel.huber(2.0)
    assert apply_kernel(k, 1.0)[0] == 1.0
    assert apply_kernel(k, 16.0)[0] == pytest.approx(0.5)


def test_kernel_parameter_validation():
    with pytest.raises(ValueError):
        RobustKernel.shifted_tukey(0.0, 1.0)
    with pytest.raises(ValueError):
        RobustKernel.shifted_tukey(1.0, -1.0)
    with pytest.raises(ValueError):
        RobustKernel("cauchy")


# --- conventional GICP ------------------------------------------------------


def test_gicp_align_recovers_perturbation(rng):
    target = estimate_covariances(structured_scene(rng))
    truth = se3_exp(np.array([0.02, -0.01, 0.05, 0.2, -0.1, 0.05]))
    source = estimate_covariances(truth.inverse().act(target.points))
    res = gicp_align(source, target, Pose())
    assert res.converged
    err = between(truth, res.pose)
    assert np.linalg.norm(err.t) < 1e-3 and err.rotation_angle() < np.radians(0.05)
    assert res.inlier_fraction > 0.9
    cov = hessian_covariance(res.hessian)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_hessian_covariance_floors_degenerate_directions():
    H = np.diag([10.0, 10.0, 10.0, 5.0, 5.0, 0.0])
    info = hessian_covariance(H, invert=False, floor=1e-6)
    assert np.linalg.eigvalsh(info).min() == pytest.approx(1e-6)
    cov = hessian_covariance(H)
    assert cov[5, 5] == pytest.approx(1e6)
