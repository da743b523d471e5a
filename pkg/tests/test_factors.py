import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fusionloc.factors import (
    BadNoiseModel,
    ElevationConstraint,
    ElevationFactor,
    FactorKind,
    ImuBatch,
    ImuFactor,
    PriorFactor,
    RangeFactor,
    ScalarBatch,
    TdoaFactor,
    check_jacobians,
    evaluate,
    factor_cost,
    numerical_jacobians,
    random_factor,
    sqrt_information,
    whiten,
)
from fusionloc.imu import STATE_DIM, ImuBias, ImuNoise, ImuSample, NavState, PreintegratedImu, StateArrays
from fusionloc.manifold import Pose, so3_exp, so3_log
from fusionloc.optimizer import WindowGraph, total_error

G = np.array([0.0, 0.0, -9.81])


def at(p, R=None):
    return NavState(Pose(np.eye(3) if R is None else R, np.asarray(p, float)), np.zeros(3))


def test_tdoa_zero_at_truth(rng):
    p = rng.uniform(-5, 5, 3)
    ai, aj = rng.uniform(-10, 10, (2, 3))
    f = TdoaFactor(keys=(0,), anchor_i=ai, anchor_j=aj, delta_d=np.linalg.norm(p - ai) - np.linalg.norm(p - aj))
    r, _ = evaluate(f, [at(p)])
    assert abs(r[0]) < 1e-12


def test_range_and_elevation_axis_aligned():
    a = np.array([1.0, 2.0, 3.0])
    d = 1.7
    s = at(a + [0.0, 0.0, d])
    r, _ = evaluate(RangeFactor(keys=(0,), anchor=a, range=d), [s])
    assert r[0] == pytest.approx(0.0, abs=1e-15)
    r, _ = evaluate(ElevationFactor(keys=(0,), constraint=ElevationConstraint(a, 0.4)), [s])
    assert r[0] == pytest.approx(d - 0.4, abs=1e-15)


def test_evaluate_rejects_wrong_state_count(rng):
    f, states = random_factor(FactorKind.IMU_PREINT, rng)
    with pytest.raises(ValueError):
        evaluate(f, states[:1])


def test_elevation_normal_must_be_unit():
    with pytest.raises(ValueError):
        ElevationConstraint(np.zeros(3), 0.0, np.array([0.0, 0.0, 1.1]))


def test_analytic_jacobians_match_finite_differences():
    worst = check_jacobians(n_points=50, seed=0)
    assert set(worst) == {k.value for k in FactorKind}
    for kind, err in worst.items():
        assert err < 1e-5, kind


def test_numerical_jacobian_shapes(rng):
    f, states = random_factor(FactorKind.IMU_PREINT, rng)
    Ji, Jj = numerical_jacobians(f, states)
    assert Ji.shape == Jj.shape == (15, STATE_DIM)


def test_whiten_identity(rng):
    f = PriorFactor(keys=(0,), H=np.eye(STATE_DIM), b=np.zeros(STATE_DIM), lin_states=(at(np.zeros(3)),))
    r = rng.normal(size=STATE_DIM)
    J = rng.normal(size=(STATE_DIM, STATE_DIM))
    rw, (Jw,), w = whiten(f, r, [J])
    np.testing.assert_array_equal(rw, r)
    np.testing.assert_array_equal(Jw, J)
    assert w == 1.0


def test_whiten_scalar_variance():
    f = RangeFactor(keys=(0,), anchor=np.zeros(3), range=1.0, sigma=2.0)
    rw, (Jw,), w = whiten(f, np.array([2.0]), [np.ones((1, STATE_DIM))])
    assert rw[0] == 1.0
    np.testing.assert_array_equal(Jw, 0.5)
    assert w == 1.0


@given(st.floats(-0.299, 0.299))
def test_robust_weight_is_one_in_quadratic_zone(r):
    f = TdoaFactor(keys=(0,), anchor_i=np.zeros(3), anchor_j=np.ones(3), sigma=0.1, huber_delta=0.3)
    _, _, w = whiten(f, np.array([r]), [np.zeros((1, STATE_DIM))])
    assert w == 1.0


def test_robust_weight_outside_zone():
    f = TdoaFactor(keys=(0,), anchor_i=np.zeros(3), anchor_j=np.ones(3), sigma=0.1, huber_delta=0.3)
    rw, _, w = whiten(f, np.array([1.2]), [np.zeros((1, STATE_DIM))])
    assert w == pytest.approx(3.0 / 12.0)
    assert rw[0] == pytest.approx(12.0 * np.sqrt(0.25))


@pytest.mark.parametrize(
    "cov",
    [np.array([[1.0, 0.5], [0.4, 1.0]]), np.array([[1.0, 2.0], [2.0, 1.0]]), np.array([[0.0]]), np.array([[-1.0]])],
)
def test_bad_noise_model(cov):
    with pytest.raises(BadNoiseModel):
        sqrt_information(cov)


def test_sqrt_information_whitens(rng):
    A = rng.normal(size=(4, 4))
    cov = A @ A.T + np.eye(4)
    L = sqrt_information(cov)
    np.testing.assert_allclose(L @ cov @ L.T, np.eye(4), atol=1e-12)


def test_prior_at_linearization_point(rng):
    s = NavState.from_arrays(so3_exp(rng.normal(size=3)), rng.normal(size=3), rng.normal(size=3))
    H = rng.normal(size=(STATE_DIM, STATE_DIM))
    b = rng.normal(size=STATE_DIM)
    f = PriorFactor(keys=(0,), H=H, b=b, lin_states=(s,))
    r, (J,) = f.evaluate([s])
    # r = H dx - b with dx = 0
    np.testing.assert_array_equal(r, -b)
    np.testing.assert_array_equal(J, H)


def test_prior_is_linear_in_tangent_offset(rng):
    s = NavState.from_arrays(so3_exp(rng.normal(size=3)), rng.normal(size=3), rng.normal(size=3))
    H = rng.normal(size=(STATE_DIM, STATE_DIM))
    b = rng.normal(size=STATE_DIM)
    d = rng.normal(size=STATE_DIM) * 0.3
    f = PriorFactor(keys=(0,), H=H, b=b, lin_states=(s,))
    np.testing.assert_allclose(f.residual([s.retract(d)]), H @ d - b, atol=1e-12)


def test_tdoa_gradient_vanishes_along_bisector(rng):
    ai = np.array([0.0, 0.0, 0.0])
    aj = np.array([10.0, 0.0, 0.0])
    f = TdoaFactor(keys=(0,), anchor_i=ai, anchor_j=aj, delta_d=0.0)
    for _ in range(20):
        p = np.array([5.0, *rng.uniform(-10, 10, 2)])
        s = at(p)
        r, (J,) = f.evaluate([s])
        assert abs(r[0]) < 1e-12
        for u in (np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])):
            fd = (f.residual([at(p + 1e-6 * u)])[0] - f.residual([at(p - 1e-6 * u)])[0]) / 2e-6
            assert abs(fd) < 1e-8
            assert abs(J[0, 3:6] @ u) < 1e-12


def test_two_state_objective_by_hand(rng):
    """Total error equals an objective written out term by term."""
    noise = ImuNoise()
    bias = ImuBias(np.array([1e-3, -2e-3, 5e-4]), np.array([0.02, -0.01, 0.03]))
    pre = PreintegratedImu.start(bias, noise)
    for k in range(20):
        pre = pre.integrate(ImuSample(k * 0.005, rng.normal(size=3) + [0, 0, 9.81], rng.normal(size=3) * 0.3), 0.005)

    lin = NavState.from_arrays(so3_exp([0.1, -0.2, 0.3]), [1.0, 2.0, 1.0], [0.3, 0.0, 0.1], bias.gyro_bias, bias.accel_bias)
    d0 = rng.normal(size=15) * 0.05
    d0[9:] = 0.0  # keep the bias at the pre-integration linearization point
    s0 = lin.retract(d0)
    s1 = NavState.from_arrays(
        so3_exp([0.12, -0.18, 0.35]), [1.05, 2.0, 1.02], [0.31, 0.02, 0.1], s0.bias.gyro_bias, s0.bias.accel_bias
    )
    sig = np.full(15, 0.1)
    ai, aj = np.array([0.0, 0.0, 3.0]), np.array([20.0, 15.0, 0.3])
    us = np.array([2.0, 2.0, 3.0])
    tdoa_in = TdoaFactor(keys=(1,), anchor_i=ai, anchor_j=aj, delta_d=-11.9, sigma=0.1, huber_delta=0.3)
    tdoa_out = TdoaFactor(keys=(1,), anchor_i=aj, anchor_j=ai, delta_d=14.0, sigma=0.1, huber_delta=0.3)
    rng_f = RangeFactor(keys=(1,), anchor=us, range=2.3, sigma=0.02)
    elev = ElevationFactor(keys=(1,), constraint=ElevationConstraint(np.zeros(3), 1.0), sigma=0.05)
    imu_f = ImuFactor(keys=(0, 1), preint=pre, gravity=G)

    g = WindowGraph(ids=[0, 1], times=[0.0, 0.1], states=[s0, s1], next_id=2)
    g.prior = PriorFactor.from_sigmas(0, lin, sig)
    for f in (imu_f, tdoa_in, tdoa_out, rng_f, elev):
        g.add_factor(f)

    # prior: |d0 / sigma|^2
    expected = np.sum((d0 / sig) ** 2)
    # IMU: bias of state 0 equals the pre-integration linearization point
    Ri, Rj = s0.R, s1.R
    dt = pre.dt_total
    r = np.concatenate(
        [
            so3_log(pre.delta_R.T @ Ri.T @ Rj),
            Ri.T @ (s1.velocity - s0.velocity - G * dt) - pre.delta_v,
            Ri.T @ (s1.p - s0.p - s0.velocity * dt - 0.5 * G * dt * dt) - pre.delta_p,
            np.zeros(6),
        ]
    )
    cov = np.zeros((15, 15))
    cov[:9, :9] = pre.covariance
    cov[9:12, 9:12] = np.eye(3) * noise.gyro_walk**2 * dt
    cov[12:15, 12:15] = np.eye(3) * noise.accel_walk**2 * dt
    expected += r @ np.linalg.solve(cov, r)
    # TDoA terms carry 2 * Huber(e) in whitened units, threshold 0.3 / 0.1 = 3
    t = s1.p
    for a, b, dd in ((ai, aj, -11.9), (aj, ai, 14.0)):
        e = abs(np.linalg.norm(t - a) - np.linalg.norm(t - b) - dd) / 0.1
        expected += e * e if e <= 3.0 else 2 * 3.0 * e - 9.0
    expected += ((np.linalg.norm(t - us) - 2.3) / 0.02) ** 2
    expected += ((t[2] - 1.0) / 0.05) ** 2

    assert total_error(g) == pytest.approx(expected, rel=1e-10)
    per_factor = sum(factor_cost(f, f.residual([g.state(k) for k in f.keys])) for f in g.all_factors())
    assert per_factor == pytest.approx(expected, rel=1e-10)


def test_scalar_batch_matches_factors(rng):
    factors, states = [], []
    for k in range(30):
        kind = [FactorKind.TDOA, FactorKind.ULTRASONIC_RANGE, FactorKind.ELEVATION][k % 3]
        f, (s,) = random_factor(kind, rng)
        f.keys = (k,)
        if kind is FactorKind.TDOA and k % 2:
            f.huber_delta = 0.3
        factors.append(f)
        states.append(s)
    X = StateArrays.from_states(states)
    batch = ScalarBatch(factors, {k: k for k in range(30)})
    rw, J, w = batch.linearize(X.p, X.R)
    cost = 0.0
    for k, (f, s) in enumerate(zip(factors, states)):
        r, (Jf,) = f.evaluate([s])
        rwf, (Jwf,), wf = whiten(f, r, [Jf])
        assert rw[k] == pytest.approx(rwf[0], rel=1e-12, abs=1e-12)
        np.testing.assert_allclose(J[k], Jwf[0, 3:6], rtol=1e-12, atol=1e-12)
        assert w[k] == pytest.approx(wf, rel=1e-12)
        cost += factor_cost(f, r)
    assert batch.cost(X.p) == pytest.approx(cost, rel=1e-12)


def test_imu_batch_matches_factors(rng):
    factors, states = [], []
    for k in range(5):
        f, (si, sj) = random_factor(FactorKind.IMU_PREINT, rng)
        f.keys = (2 * k, 2 * k + 1)
        factors.append(f)
        states += [si, sj]
    X = StateArrays.from_states(states)
    batch = ImuBatch(factors, {k: k for k in range(10)})
    rw, Ji, Jj = batch.linearize(X)
    for k, f in enumerate(factors):
        r, Js = f.evaluate(states[2 * k : 2 * k + 2])
        rwf, (Jwi, Jwj), _ = whiten(f, r, Js)
        scale = np.abs(rwf).max()
        np.testing.assert_allclose(rw[k], rwf, atol=1e-9 * scale)
        np.testing.assert_allclose(Ji[k], Jwi, atol=1e-9 * np.abs(Jwi).max())
        np.testing.assert_allclose(Jj[k], Jwj, atol=1e-9 * np.abs(Jwj).max())
