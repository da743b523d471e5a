"""IMU pre-integration between keyframes.

State tangent ordering used project-wide (15 dims)::

    [dtheta(3), dp(3), dv(3), dbg(3), dba(3)]

Pose perturbations are on the right, ``T <- T * exp([dp, dtheta])``; velocity
and biases are perturbed additively. Pre-integration covariance is ordered
``(dtheta, dv, dp)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .manifold import (
    Pose,
    compose,
    hat,
    inverse,
    orthonormalize,
    se3_exp,
    se3_log,
    se3_right_jacobian_inv,
    so3_exp,
    so3_exp_batch,
    so3_left_jacobian_batch,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)

STATE_DIM = 15
_I3 = np.eye(3)
TH, P, V, BG, BA = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))


@dataclass(frozen=True)
class ImuSample:
    t: float
    accel: NDArray[np.float64]
    gyro: NDArray[np.float64]


@dataclass(frozen=True)
class ImuBias:
    gyro_bias: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    accel_bias: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def vector(self) -> NDArray[np.float64]:
        return np.concatenate([self.gyro_bias, self.accel_bias])


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities of a consumer MEMS IMU."""

    gyro: float = 1e-3  # rad/s/sqrt(Hz)
    accel: float = 1e-2  # m/s^2/sqrt(Hz)
    gyro_walk: float = 1e-5  # rad/s^2/sqrt(Hz)
    accel_walk: float = 1e-4  # m/s^3/sqrt(Hz)


@dataclass(frozen=True)
class NavState:
    pose: Pose
    velocity: NDArray[np.float64]
    bias: ImuBias = field(default_factory=ImuBias)

    @property
    def R(self) -> NDArray[np.float64]:
        return self.pose.rotation

    @property
    def p(self) -> NDArray[np.float64]:
        return self.pose.translation

    @classmethod
    def from_arrays(cls, R, p, v, bg=None, ba=None) -> NavState:
        bg = np.zeros(3) if bg is None else np.asarray(bg, dtype=float)
        ba = np.zeros(3) if ba is None else np.asarray(ba, dtype=float)
        return cls(
            Pose(np.asarray(R, dtype=float), np.asarray(p, dtype=float)),
            np.asarray(v, dtype=float),
            ImuBias(bg, ba),
        )

    def retract(self, delta: ArrayLike) -> NavState:
        d = np.asarray(delta, dtype=float)
        pose = compose(self.pose, se3_exp(np.concatenate([d[P], d[TH]])))
        return NavState(
            pose,
            self.velocity + d[V],
            ImuBias(self.bias.gyro_bias + d[BG], self.bias.accel_bias + d[BA]),
        )

    def local(self, ref: NavState) -> NDArray[np.float64]:
        """Tangent coordinates of ``self`` relative to ``ref`` (inverse of retract)."""
        xi = se3_log(compose(inverse(ref.pose), self.pose))
        out = np.empty(STATE_DIM)
        out[TH] = xi[3:]
        out[P] = xi[:3]
        out[V] = self.velocity - ref.velocity
        out[BG] = self.bias.gyro_bias - ref.bias.gyro_bias
        out[BA] = self.bias.accel_bias - ref.bias.accel_bias
        return out

    def local_jacobian(self, ref: NavState) -> NDArray[np.float64]:
        """d local(self.retract(delta), ref) / d delta at delta = 0."""
        xi = se3_log(compose(inverse(ref.pose), self.pose))
        Jinv = se3_right_jacobian_inv(xi)
        # reorder (rho, phi) -> (theta, p)
        perm = [3, 4, 5, 0, 1, 2]
        out = np.eye(STATE_DIM)
        out[:6, :6] = Jinv[np.ix_(perm, perm)]
        return out


@dataclass(frozen=True)
class PreintegratedImu:
    delta_R: NDArray[np.float64] = field(default_factory=lambda: np.eye(3))
    delta_v: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    delta_p: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    dt_total: float = 0.0
    bias_lin_point: ImuBias = field(default_factory=ImuBias)
    covariance: NDArray[np.float64] = field(default_factory=lambda: np.zeros((9, 9)))
    # d(dR)/dbg, d(dv)/dbg, d(dv)/dba, d(dp)/dbg, d(dp)/dba
    dR_dbg: NDArray[np.float64] = field(default_factory=lambda: np.zeros((3, 3)))
    dv_dbg: NDArray[np.float64] = field(default_factory=lambda: np.zeros((3, 3)))
    dv_dba: NDArray[np.float64] = field(default_factory=lambda: np.zeros((3, 3)))
    dp_dbg: NDArray[np.float64] = field(default_factory=lambda: np.zeros((3, 3)))
    dp_dba: NDArray[np.float64] = field(default_factory=lambda: np.zeros((3, 3)))
    noise: ImuNoise = field(default_factory=ImuNoise)

    @classmethod
    def start(cls, bias: ImuBias | None = None, noise: ImuNoise | None = None) -> PreintegratedImu:
        return cls(
            bias_lin_point=bias if bias is not None else ImuBias(),
            noise=noise if noise is not None else ImuNoise(),
        )

    def integrate(self, sample: ImuSample, dt: float) -> PreintegratedImu:
        return integrate(self, sample, dt)

    def corrected(self, bias: ImuBias):
        """First-order bias-corrected (dR, dv, dp) at ``bias``."""
        dbg = bias.gyro_bias - self.bias_lin_point.gyro_bias
        dba = bias.accel_bias - self.bias_lin_point.accel_bias
        dR = self.delta_R @ so3_exp(self.dR_dbg @ dbg)
        dv = self.delta_v + self.dv_dbg @ dbg + self.dv_dba @ dba
        dp = self.delta_p + self.dp_dbg @ dbg + self.dp_dba @ dba
        return dR, dv, dp


def integrate(pre: PreintegratedImu, sample: ImuSample, dt: float) -> PreintegratedImu:
    """Zero-order-hold step of ``sample`` over ``dt`` seconds."""
    if not np.isfinite(dt) or dt <= 0.0:
        raise ValueError(f"dt must be positive and finite, got {dt!r}")
    w = np.asarray(sample.gyro, dtype=float) - pre.bias_lin_point.gyro_bias
    a = np.asarray(sample.accel, dtype=float) - pre.bias_lin_point.accel_bias
    dR = pre.delta_R
    dt2 = dt * dt
    step = so3_exp(w * dt)
    Jr = so3_right_jacobian(w * dt)
    a_hat = hat(a)
    dR_ahat = dR @ a_hat

    A = np.eye(9)
    A[0:3, 0:3] = step.T
    A[3:6, 0:3] = -dR_ahat * dt
    A[6:9, 0:3] = -0.5 * dR_ahat * dt2
    A[6:9, 3:6] = np.eye(3) * dt
    B = np.zeros((9, 6))
    B[0:3, 0:3] = Jr * dt
    B[3:6, 3:6] = dR * dt
    B[6:9, 3:6] = 0.5 * dR * dt2
    n = pre.noise
    q = np.concatenate([np.full(3, n.gyro**2 / dt), np.full(3, n.accel**2 / dt)])
    cov = A @ pre.covariance @ A.T + (B * q) @ B.T
    cov = 0.5 * (cov + cov.T)

    dp_dba = pre.dp_dba + pre.dv_dba * dt - 0.5 * dR * dt2
    dp_dbg = pre.dp_dbg + pre.dv_dbg * dt - 0.5 * dR_ahat @ pre.dR_dbg * dt2
    dv_dba = pre.dv_dba - dR * dt
    dv_dbg = pre.dv_dbg - dR_ahat @ pre.dR_dbg * dt
    dR_dbg = step.T @ pre.dR_dbg - Jr * dt

    Ra = dR @ a
    return replace(
        pre,
        delta_R=orthonormalize(dR @ step),
        delta_v=pre.delta_v + Ra * dt,
        delta_p=pre.delta_p + pre.delta_v * dt + 0.5 * Ra * dt2,
        dt_total=pre.dt_total + dt,
        covariance=cov,
        dR_dbg=dR_dbg,
        dv_dbg=dv_dbg,
        dv_dba=dv_dba,
        dp_dbg=dp_dbg,
        dp_dba=dp_dba,
    )


def integrate_stream(
    samples, t_end: float, bias: ImuBias | None = None, noise: ImuNoise | None = None
) -> PreintegratedImu:
    """Integrate consecutive samples; the last one is held until ``t_end``."""
    pre = PreintegratedImu.start(bias, noise)
    samples = list(samples)
    for k, s in enumerate(samples):
        t_next = samples[k + 1].t if k + 1 < len(samples) else t_end
        pre = integrate(pre, s, t_next - s.t)
    return pre


def predict(state: NavState, pre: PreintegratedImu, gravity: ArrayLike) -> NavState:
    g = np.asarray(gravity, dtype=float)
    dt = pre.dt_total
    dR, dv, dp = pre.corrected(state.bias)
    R = state.R
    R_j = orthonormalize(R @ dR)
    v_j = state.velocity + g * dt + R @ dv
    p_j = state.p + state.velocity * dt + 0.5 * g * dt * dt + R @ dp
    return NavState(Pose(R_j, p_j), v_j, state.bias)


def residual(
    state_i: NavState, state_j: NavState, pre: PreintegratedImu, gravity: ArrayLike
) -> NDArray[np.float64]:
    """Stacked (rotation, velocity, position) residual in the body frame of ``i``."""
    g = np.asarray(gravity, dtype=float)
    dt = pre.dt_total
    RiT = state_i.R.T
    dR, dv, dp = pre.corrected(state_i.bias)
    e_R = so3_log(dR.T @ RiT @ state_j.R)
    r_v = RiT @ (state_j.velocity - state_i.velocity - g * dt) - dv
    r_p = RiT @ (state_j.p - state_i.p - state_i.velocity * dt - 0.5 * g * dt * dt) - dp
    return np.concatenate([e_R, r_v, r_p])


def residual_and_jacobians(
    state_i: NavState, state_j: NavState, pre: PreintegratedImu, gravity: ArrayLike
):
    """Residual (9,) and Jacobians (9x15 each) w.r.t. both state tangents."""
    g = np.asarray(gravity, dtype=float)
    dt = pre.dt_total
    Ri, Rj = state_i.R, state_j.R
    RiT = Ri.T
    dbg = state_i.bias.gyro_bias - pre.bias_lin_point.gyro_bias
    dR, dv, dp = pre.corrected(state_i.bias)

    E = dR.T @ RiT @ Rj
    e_R = so3_log(E)
    dv_w = state_j.velocity - state_i.velocity - g * dt
    dp_w = state_j.p - state_i.p - state_i.velocity * dt - 0.5 * g * dt * dt
    r_v = RiT @ dv_w - dv
    r_p = RiT @ dp_w - dp
    r = np.concatenate([e_R, r_v, r_p])

    Jr_inv = so3_right_jacobian_inv(e_R)
    Ji = np.zeros((9, STATE_DIM))
    Jj = np.zeros((9, STATE_DIM))
    Ji[0:3, TH] = -Jr_inv @ Rj.T @ Ri
    Ji[0:3, BG] = -Jr_inv @ E.T @ so3_right_jacobian(pre.dR_dbg @ dbg) @ pre.dR_dbg
    Jj[0:3, TH] = Jr_inv

    Ji[3:6, TH] = hat(RiT @ dv_w)
    Ji[3:6, V] = -RiT
    Ji[3:6, BG] = -pre.dv_dbg
    Ji[3:6, BA] = -pre.dv_dba
    Jj[3:6, V] = RiT

    Ji[6:9, TH] = hat(RiT @ dp_w)
    Ji[6:9, P] = -_I3
    Ji[6:9, V] = -RiT * dt
    Ji[6:9, BG] = -pre.dp_dbg
    Ji[6:9, BA] = -pre.dp_dba
    Jj[6:9, P] = RiT @ Rj
    return r, Ji, Jj


@dataclass
class StateArrays:
    """A window of states packed into arrays for vectorized evaluation."""

    R: NDArray[np.float64]
    p: NDArray[np.float64]
    v: NDArray[np.float64]
    bg: NDArray[np.float64]
    ba: NDArray[np.float64]

    @classmethod
    def from_states(cls, states) -> StateArrays:
        return cls(
            np.array([s.R for s in states]),
            np.array([s.p for s in states]),
            np.array([s.velocity for s in states]),
            np.array([s.bias.gyro_bias for s in states]),
            np.array([s.bias.accel_bias for s in states]),
        )

    def __len__(self) -> int:
        return len(self.p)

    def state(self, k: int) -> NavState:
        return NavState(Pose(self.R[k], self.p[k]), self.v[k], ImuBias(self.bg[k], self.ba[k]))

    def to_states(self) -> list:
        return [self.state(k) for k in range(len(self))]

    def retract(self, delta: NDArray[np.float64]) -> StateArrays:
        """Vectorized :meth:`NavState.retract`; ``delta`` has shape ``(n, 15)``."""
        d = np.asarray(delta, dtype=float).reshape(len(self), STATE_DIM)
        phi = d[:, TH]
        rho = np.einsum("nij,nj->ni", so3_left_jacobian_batch(phi), d[:, P])
        return StateArrays(
            self.R @ so3_exp_batch(phi),
            self.p + np.einsum("nij,nj->ni", self.R, rho),
            self.v + d[:, V],
            self.bg + d[:, BG],
            self.ba + d[:, BA],
        )
