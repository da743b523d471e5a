"""Error-state EKF baseline over the 15-dim navigation state.

The filter shares the motion model and the measurement residuals with the
factor-graph engine:

* the nominal state is propagated one IMU sample at a time through
  :func:`fusionloc.imu.predict`, and the error-state transition is the
  implicit-function linearization of the pre-integration residual
  (``dx_j = -J_j^-1 J_i dx_i``), so propagation and pre-integration cannot
  disagree;
* updates call ``evaluate`` on the same factor classes the optimizer uses.

Updates are sequential and scalar, with a chi-square gate and no robust
loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from . import imu
from .factors import ElevationConstraint, ElevationFactor, Factor, RangeFactor, TdoaFactor
from .imu import STATE_DIM, ImuNoise, ImuSample, NavState, PreintegratedImu
from .tdoa import AnchorSet, TdoaMeasurement, UltrasonicRange

DEFAULT_GATE_SIGMA = 3.0


@dataclass(frozen=True)
class EkfState:
    nominal: NavState
    covariance: NDArray[np.float64]

    @classmethod
    def from_sigmas(cls, nominal: NavState, sigmas) -> EkfState:
        return cls(nominal, np.diag(np.asarray(sigmas, dtype=float) ** 2))


def _symmetrize(P):
    return 0.5 * (P + P.T)


def transition(state: NavState, pre: PreintegratedImu, gravity):
    """Predicted state, error transition ``F`` (15x15) and process noise ``Q``."""
    nxt = imu.predict(state, pre, gravity)
    _, Ji, Jj = imu.residual_and_jacobians(state, nxt, pre, gravity)
    Jj_inv = np.linalg.inv(Jj[:, :9])
    F = np.eye(STATE_DIM)
    F[:9, :] = -Jj_inv @ Ji
    n = pre.noise
    dt = pre.dt_total
    Q = np.zeros((STATE_DIM, STATE_DIM))
    Q[:9, :9] = Jj_inv @ pre.covariance @ Jj_inv.T
    Q[9:12, 9:12] = np.eye(3) * n.gyro_walk**2 * dt
    Q[12:15, 12:15] = np.eye(3) * n.accel_walk**2 * dt
    return nxt, F, Q


def propagate(
    s: EkfState, sample: ImuSample, dt: float, gravity, noise: ImuNoise | None = None
) -> EkfState:
    """Advance the filter over one IMU sample held for ``dt`` seconds."""
    pre = PreintegratedImu.start(s.nominal.bias, noise).integrate(sample, dt)
    nxt, F, Q = transition(s.nominal, pre, gravity)
    return EkfState(nxt, _symmetrize(F @ s.covariance @ F.T + Q))


def update_factor(s: EkfState, f: Factor, gate_sigma: float = DEFAULT_GATE_SIGMA):
    """Scalar update with a one-row factor; returns ``(state, accepted)``.

    Joseph-form covariance update. An innovation beyond ``gate_sigma``
    standard deviations leaves the state untouched.
    """
    r, (J,) = f.evaluate([s.nominal])
    H = J[0]
    var = float(f.noise[0, 0])
    P = s.covariance
    PHt = P @ H
    S = float(H @ PHt) + var
    y = -float(r[0])
    if y * y > gate_sigma * gate_sigma * S:
        return s, False
    K = PHt / S
    nominal = s.nominal.retract(K * y)
    IKH = np.eye(STATE_DIM) - np.outer(K, H)
    P = IKH @ P @ IKH.T + var * np.outer(K, K)
    return EkfState(nominal, _symmetrize(P)), True


def update_tdoa(
    s: EkfState, m: TdoaMeasurement, anchors: AnchorSet, gate_sigma: float = DEFAULT_GATE_SIGMA
):
    f = TdoaFactor(
        keys=(0,),
        anchor_i=anchors.position(m.anchor_i),
        anchor_j=anchors.position(m.anchor_j),
        delta_d=m.delta_d,
        sigma=m.sigma,
    )
    return update_factor(s, f, gate_sigma)


def update_ultrasonic(
    s: EkfState, m: UltrasonicRange, anchors: AnchorSet, gate_sigma: float = DEFAULT_GATE_SIGMA
):
    f = RangeFactor(keys=(0,), anchor=anchors.position(m.anchor_id), range=m.range, sigma=m.sigma)
    return update_factor(s, f, gate_sigma)


def update_elevation(
    s: EkfState, constraint: ElevationConstraint, sigma: float, gate_sigma: float = DEFAULT_GATE_SIGMA
):
    return update_factor(s, ElevationFactor(keys=(0,), constraint=constraint, sigma=sigma), gate_sigma)
