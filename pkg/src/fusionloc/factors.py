"""Factor types: residual, analytic Jacobians and noise model.

Every factor is connected to one or more keyframes through ``keys`` (the
keyframe ids, not window positions). Jacobians are taken w.r.t. the 15-dim
state tangent documented in :mod:`fusionloc.imu`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import imu
from .imu import BA, BG, P, STATE_DIM, NavState, PreintegratedImu
from .manifold import (
    hat_batch,
    so3_exp_batch,
    so3_log_batch,
    so3_right_jacobian_batch,
    so3_right_jacobian_inv_batch,
)
from .tdoa import huber_weight


_I6 = np.eye(6)


class BadNoiseModel(ValueError):
    pass


class FactorKind(str, Enum):
    IMU_PREINT = "ImuPreint"
    TDOA = "Tdoa"
    ULTRASONIC_RANGE = "UltrasonicRange"
    ELEVATION = "Elevation"
    PRIOR = "Prior"


def sqrt_information(cov: ArrayLike) -> NDArray[np.float64]:
    """``L^-1`` for ``cov = L L^T``, so that ``|L^-1 r|^2`` is the Mahalanobis norm."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise BadNoiseModel("noise covariance is not symmetric")
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise BadNoiseModel("noise covariance is not positive definite") from None
    return np.linalg.inv(L)


@dataclass(eq=False)
class Factor:
    kind = None
    keys: tuple

    @property
    def noise(self) -> NDArray[np.float64]:
        raise NotImplementedError

    @property
    def robust_delta(self) -> float | None:
        """Huber threshold in whitened units, or None for a plain quadratic."""
        return None

    @cached_property
    def sqrt_info(self) -> NDArray[np.float64]:
        return sqrt_information(self.noise)

    def evaluate(self, states):
        raise NotImplementedError

    def residual(self, states) -> NDArray[np.float64]:
        return self.evaluate(states)[0]


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else np.zeros(3), n


@dataclass(eq=False)
class TdoaFactor(Factor):
    """``|t - a_i| - |t - a_j| - delta_d``."""

    kind = FactorKind.TDOA
    anchor_i: NDArray[np.float64] = None
    anchor_j: NDArray[np.float64] = None
    delta_d: float = 0.0
    sigma: float = 0.1
    huber_delta: float | None = None  # meters

    @property
    def noise(self):
        return np.array([[self.sigma**2]])

    @property
    def robust_delta(self):
        return None if self.huber_delta is None else self.huber_delta / self.sigma

    def evaluate(self, states):
        (s,) = states
        ui, ni = _unit(s.p - self.anchor_i)
        uj, nj = _unit(s.p - self.anchor_j)
        r = np.array([ni - nj - self.delta_d])
        J = np.zeros((1, STATE_DIM))
        J[0, P] = (ui - uj) @ s.R
        return r, [J]


@dataclass(eq=False)
class RangeFactor(Factor):
    """Ultrasonic range ``|t - a_k| - d_k``."""

    kind = FactorKind.ULTRASONIC_RANGE
    anchor: NDArray[np.float64] = None
    range: float = 0.0
    sigma: float = 0.02

    @property
    def noise(self):
        return np.array([[self.sigma**2]])

    def evaluate(self, states):
        (s,) = states
        u, n = _unit(s.p - self.anchor)
        J = np.zeros((1, STATE_DIM))
        J[0, P] = u @ s.R
        return np.array([n - self.range]), [J]


@dataclass(frozen=True)
class ElevationConstraint:
    anchor_pos: NDArray[np.float64]
    floor_height_delta: float
    normal: NDArray[np.float64] = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-12:
            raise ValueError("elevation normal must be a unit vector")


@dataclass(eq=False)
class ElevationFactor(Factor):
    """``n^T (t - a_k) - dh_floor``."""

    kind = FactorKind.ELEVATION
    constraint: ElevationConstraint = None
    sigma: float = 0.05

    @property
    def noise(self):
        return np.array([[self.sigma**2]])

    def evaluate(self, states):
        (s,) = states
        c = self.constraint
        J = np.zeros((1, STATE_DIM))
        J[0, P] = c.normal @ s.R
        return np.array([c.normal @ (s.p - c.anchor_pos) - c.floor_height_delta]), [J]


@dataclass(eq=False)
class ImuFactor(Factor):
    """Pre-integration residual (9 rows) stacked with bias random-walk rows (6)."""

    kind = FactorKind.IMU_PREINT
    preint: PreintegratedImu = None
    gravity: NDArray[np.float64] = None

    @cached_property
    def noise(self):
        n = self.preint.noise
        dt = self.preint.dt_total
        cov = np.zeros((15, 15))
        cov[:9, :9] = self.preint.covariance
        cov[9:12, 9:12] = np.eye(3) * n.gyro_walk**2 * dt
        cov[12:15, 12:15] = np.eye(3) * n.accel_walk**2 * dt
        return cov

    def evaluate(self, states):
        si, sj = states
        r9, Ji9, Jj9 = imu.residual_and_jacobians(si, sj, self.preint, self.gravity)
        r = np.empty(15)
        r[:9] = r9
        r[9:12] = sj.bias.gyro_bias - si.bias.gyro_bias
        r[12:15] = sj.bias.accel_bias - si.bias.accel_bias
        Ji = np.zeros((15, STATE_DIM))
        Jj = np.zeros((15, STATE_DIM))
        Ji[:9] = Ji9
        Jj[:9] = Jj9
        Ji[9:15, 9:15] = -_I6
        Jj[9:15, 9:15] = _I6
        return r, [Ji, Jj]

    def residual(self, states):
        si, sj = states
        r = np.empty(15)
        r[:9] = imu.residual(si, sj, self.preint, self.gravity)
        r[9:12] = sj.bias.gyro_bias - si.bias.gyro_bias
        r[12:15] = sj.bias.accel_bias - si.bias.accel_bias
        return r


@dataclass(eq=False)
class PriorFactor(Factor):
    """Linear prior ``r = H dx - b``, ``dx`` the tangent offset from ``lin_states``.

    ``H`` is a square-root information matrix, so ``|r|^2`` carries the
    marginal information ``H^T H`` of the eliminated states.
    """

    kind = FactorKind.PRIOR
    H: NDArray[np.float64] = None
    b: NDArray[np.float64] = None
    lin_states: tuple = ()

    @property
    def noise(self):
        return np.eye(len(self.b))

    @cached_property
    def sqrt_info(self):
        return np.eye(len(self.b))

    @classmethod
    def from_sigmas(cls, key, state: NavState, sigmas: ArrayLike) -> PriorFactor:
        sig = np.asarray(sigmas, dtype=float)
        return cls(keys=(key,), H=np.diag(1.0 / sig), b=np.zeros(STATE_DIM), lin_states=(state,))

    def evaluate(self, states):
        dx = np.concatenate(
            [np.zeros(STATE_DIM) if s is l else s.local(l) for s, l in zip(states, self.lin_states)]
        )
        r = self.H @ dx - self.b
        Js = []
        for k, (s, l) in enumerate(zip(states, self.lin_states)):
            cols = self.H[:, k * STATE_DIM : (k + 1) * STATE_DIM]
            Js.append(cols.copy() if s is l else cols @ s.local_jacobian(l))
        return r, Js


def evaluate(f: Factor, states):
    """Residual and per-state Jacobians of ``f`` at ``states`` (ordered as ``f.keys``)."""
    states = list(states)
    if len(states) != len(f.keys):
        raise ValueError(f"{f.kind.value} factor expects {len(f.keys)} states, got {len(states)}")
    return f.evaluate(states)


def whiten(f: Factor, residual, jacobians):
    """Mahalanobis whitening, then Huber reweighting if the factor is robust.

    Returns ``(whitened residual, whitened Jacobians, robust weight)``.
    """
    L = f.sqrt_info
    rw = L @ residual
    Jw = [L @ J for J in jacobians]
    delta = f.robust_delta
    if delta is None:
        return rw, Jw, 1.0
    w = float(huber_weight(np.linalg.norm(rw), delta))
    s = np.sqrt(w)
    return rw * s, [J * s for J in Jw], w


def factor_cost(f: Factor, residual) -> float:
    """Contribution of ``f`` to the total squared error: ``|r|^2_Sigma`` or ``2 rho(|r|_Sigma)``."""
    rw = f.sqrt_info @ residual
    e2 = float(rw @ rw)
    delta = f.robust_delta
    if delta is None:
        return e2
    e = np.sqrt(e2)
    return e2 if e <= delta else 2.0 * delta * e - delta * delta


# -- batched scalar position factors ---------------------------------------------------


class ScalarBatch:
    """Vectorized evaluation of one-row position factors (TDoA, range, elevation).

    Each row is ``alpha |t - a1| - beta |t - a2| + n.(t - a1) - z``, which
    covers all three kinds. Used by the optimizer to avoid per-factor Python
    overhead; results match :meth:`Factor.evaluate` row by row.
    """

    def __init__(self, factors, key_index):
        n = len(factors)
        self.factors = list(factors)
        self.rows = np.array([key_index[f.keys[0]] for f in factors], dtype=int)
        self.alpha = np.zeros(n)
        self.beta = np.zeros(n)
        self.a1 = np.zeros((n, 3))
        self.a2 = np.zeros((n, 3))
        self.nrm = np.zeros((n, 3))
        self.z = np.zeros(n)
        self.info = np.zeros(n)
        self.delta = np.full(n, np.inf)
        for k, f in enumerate(factors):
            self.info[k] = 1.0 / f.sigma
            if isinstance(f, TdoaFactor):
                self.alpha[k], self.beta[k] = 1.0, 1.0
                self.a1[k], self.a2[k] = f.anchor_i, f.anchor_j
                self.z[k] = f.delta_d
                if f.robust_delta is not None:
                    self.delta[k] = f.robust_delta
            elif isinstance(f, RangeFactor):
                self.alpha[k] = 1.0
                self.a1[k] = f.anchor
                self.a2[k] = f.anchor + 1.0
                self.z[k] = f.range
            elif isinstance(f, ElevationFactor):
                c = f.constraint
                self.a1[k] = c.anchor_pos
                self.a2[k] = c.anchor_pos + 1.0
                self.nrm[k] = c.normal
                self.z[k] = c.floor_height_delta
            else:
                raise TypeError(f"not a scalar position factor: {f.kind}")

    def __len__(self):
        return len(self.rows)

    def _terms(self, positions):
        t = positions[self.rows]
        d1 = t - self.a1
        d2 = t - self.a2
        n1 = np.linalg.norm(d1, axis=1)
        n2 = np.linalg.norm(d2, axis=1)
        h = self.alpha * n1 - self.beta * n2 + np.einsum("ij,ij->i", self.nrm, d1)
        return h - self.z, d1, d2, n1, n2

    def whitened_residuals(self, positions):
        return self._terms(positions)[0] * self.info

    def cost(self, positions) -> float:
        e = np.abs(self.whitened_residuals(positions))
        m = np.minimum(self.delta, e)  # equals e inside the quadratic zone
        return float(np.sum(2.0 * m * e - m * m))

    def linearize(self, positions, rotations):
        """Whitened, robust-weighted residuals and ``d r / d dp`` rows (n x 3)."""
        r, d1, d2, n1, n2 = self._terms(positions)
        g = (
            self.alpha[:, None] * d1 / np.maximum(n1, 1e-12)[:, None]
            - self.beta[:, None] * d2 / np.maximum(n2, 1e-12)[:, None]
            + self.nrm
        )
        J = np.einsum("ni,nij->nj", g, rotations[self.rows])
        rw = r * self.info
        e = np.abs(rw)
        w = np.where(e <= self.delta, 1.0, self.delta / np.maximum(e, 1e-300))
        s = np.sqrt(w) * self.info
        return r * s, J * s[:, None], w


class ImuBatch:
    """Vectorized evaluation of :class:`ImuFactor` residuals and Jacobians.

    Matches :meth:`ImuFactor.evaluate` factor by factor; states come in as a
    :class:`fusionloc.imu.StateArrays` indexed through ``key_index``.
    """

    def __init__(self, factors, key_index):
        self.factors = list(factors)
        self.i = np.array([key_index[f.keys[0]] for f in factors], dtype=int)
        self.j = np.array([key_index[f.keys[1]] for f in factors], dtype=int)
        pre = [f.preint for f in factors]
        self.dt = np.array([q.dt_total for q in pre])
        self.g = np.array([f.gravity for f in factors])
        self.dR = np.array([q.delta_R for q in pre])
        self.dv = np.array([q.delta_v for q in pre])
        self.dp = np.array([q.delta_p for q in pre])
        self.bg0 = np.array([q.bias_lin_point.gyro_bias for q in pre])
        self.ba0 = np.array([q.bias_lin_point.accel_bias for q in pre])
        self.dR_dbg = np.array([q.dR_dbg for q in pre])
        self.dv_dbg = np.array([q.dv_dbg for q in pre])
        self.dv_dba = np.array([q.dv_dba for q in pre])
        self.dp_dbg = np.array([q.dp_dbg for q in pre])
        self.dp_dba = np.array([q.dp_dba for q in pre])
        self.L = np.array([f.sqrt_info for f in factors])

    def __len__(self):
        return len(self.i)

    def _core(self, X):
        i, j = self.i, self.j
        dt = self.dt[:, None]
        dbg = X.bg[i] - self.bg0
        dba = X.ba[i] - self.ba0
        corr = np.einsum("mij,mj->mi", self.dR_dbg, dbg)
        dR = self.dR @ so3_exp_batch(corr)
        dv = self.dv + np.einsum("mij,mj->mi", self.dv_dbg, dbg) + np.einsum("mij,mj->mi", self.dv_dba, dba)
        dp = self.dp + np.einsum("mij,mj->mi", self.dp_dbg, dbg) + np.einsum("mij,mj->mi", self.dp_dba, dba)
        RiT = np.swapaxes(X.R[i], 1, 2)
        E = np.swapaxes(dR, 1, 2) @ RiT @ X.R[j]
        e_R = so3_log_batch(E)
        dv_w = X.v[j] - X.v[i] - self.g * dt
        dp_w = X.p[j] - X.p[i] - X.v[i] * dt - 0.5 * self.g * dt * dt
        a_v = np.einsum("mij,mj->mi", RiT, dv_w)
        a_p = np.einsum("mij,mj->mi", RiT, dp_w)
        r = np.concatenate([e_R, a_v - dv, a_p - dp, X.bg[j] - X.bg[i], X.ba[j] - X.ba[i]], axis=1)
        return r, (corr, RiT, E, e_R, a_v, a_p)

    def residuals(self, X) -> NDArray[np.float64]:
        return self._core(X)[0]

    def cost(self, X) -> float:
        rw = np.einsum("mij,mj->mi", self.L, self.residuals(X))
        return float(np.sum(rw * rw))

    def linearize(self, X):
        """Whitened residuals ``(m, 15)`` and Jacobians ``(m, 15, 15)`` for states i and j."""
        r, (corr, RiT, E, e_R, a_v, a_p) = self._core(X)
        m = len(self)
        Jr_inv = so3_right_jacobian_inv_batch(e_R)
        Rj = X.R[self.j]
        Ji = np.zeros((m, 15, STATE_DIM))
        Jj = np.zeros((m, 15, STATE_DIM))
        Ji[:, 0:3, 0:3] = -Jr_inv @ np.swapaxes(Rj, 1, 2) @ X.R[self.i]
        Ji[:, 0:3, BG] = -Jr_inv @ np.swapaxes(E, 1, 2) @ so3_right_jacobian_batch(corr) @ self.dR_dbg
        Jj[:, 0:3, 0:3] = Jr_inv
        Ji[:, 3:6, 0:3] = hat_batch(a_v)
        Ji[:, 3:6, 6:9] = -RiT
        Ji[:, 3:6, BG] = -self.dv_dbg
        Ji[:, 3:6, BA] = -self.dv_dba
        Jj[:, 3:6, 6:9] = RiT
        Ji[:, 6:9, 0:3] = hat_batch(a_p)
        Ji[:, 6:9, P] = -np.eye(3)
        Ji[:, 6:9, 6:9] = -RiT * self.dt[:, None, None]
        Ji[:, 6:9, BG] = -self.dp_dbg
        Ji[:, 6:9, BA] = -self.dp_dba
        Jj[:, 6:9, P] = RiT @ Rj
        Ji[:, 9:15, 9:15] = -_I6
        Jj[:, 9:15, 9:15] = _I6
        rw = np.einsum("mij,mj->mi", self.L, r)
        return rw, self.L @ Ji, self.L @ Jj


# -- Jacobian self-test ----------------------------------------------------------------


def numerical_jacobians(f: Factor, states, eps: float = 1e-6):
    """Central finite differences of ``f.residual`` along each state's retraction."""
    states = list(states)
    out = []
    for k, s in enumerate(states):
        cols = []
        for d in range(STATE_DIM):
            e = np.zeros(STATE_DIM)
            e[d] = eps
            plus = states[:k] + [s.retract(e)] + states[k + 1 :]
            minus = states[:k] + [s.retract(-e)] + states[k + 1 :]
            cols.append((f.residual(plus) - f.residual(minus)) / (2.0 * eps))
        out.append(np.stack(cols, axis=1))
    return out


def _random_state(rng) -> NavState:
    from .manifold import so3_exp

    return NavState.from_arrays(
        so3_exp(rng.normal(size=3)),
        rng.uniform(-10.0, 10.0, 3),
        rng.normal(size=3),
        rng.normal(size=3) * 0.01,
        rng.normal(size=3) * 0.1,
    )


def random_factor(kind: FactorKind, rng):
    """A factor of ``kind`` with random parameters plus random states to evaluate it at."""
    if kind is FactorKind.TDOA:
        return TdoaFactor(
            keys=(0,), anchor_i=rng.uniform(-20, 20, 3), anchor_j=rng.uniform(-20, 20, 3), delta_d=rng.normal()
        ), [_random_state(rng)]
    if kind is FactorKind.ULTRASONIC_RANGE:
        return RangeFactor(keys=(0,), anchor=rng.uniform(-20, 20, 3), range=abs(rng.normal()) + 1.0), [
            _random_state(rng)
        ]
    if kind is FactorKind.ELEVATION:
        n = rng.normal(size=3)
        c = ElevationConstraint(rng.normal(size=3), rng.normal(), n / np.linalg.norm(n))
        return ElevationFactor(keys=(0,), constraint=c), [_random_state(rng)]
    if kind is FactorKind.IMU_PREINT:
        from .imu import ImuBias, ImuSample

        pre = PreintegratedImu.start(ImuBias(rng.normal(size=3) * 0.01, rng.normal(size=3) * 0.1))
        for _ in range(int(rng.integers(1, 20))):
            pre = pre.integrate(ImuSample(0.0, rng.normal(size=3) * 3, rng.normal(size=3)), 0.005)
        return ImuFactor(keys=(0, 1), preint=pre, gravity=np.array([0.0, 0.0, -9.81])), [
            _random_state(rng),
            _random_state(rng),
        ]
    if kind is FactorKind.PRIOR:
        lin = (_random_state(rng), _random_state(rng))
        H = rng.normal(size=(2 * STATE_DIM, 2 * STATE_DIM))
        # evaluate near the linearization point, where the prior is meant to be used
        states = [s.retract(rng.normal(size=STATE_DIM) * 0.3) for s in lin]
        return PriorFactor(keys=(0, 1), H=H, b=rng.normal(size=2 * STATE_DIM), lin_states=lin), states
    raise ValueError(kind)


def check_jacobians(n_points: int = 50, seed: int = 0) -> dict:
    """Max relative analytic-vs-numeric Jacobian error per factor kind.

    The error at one point is ``max|J_a - J_n| / max|J_n|`` over all states
    of the factor.
    """
    rng = np.random.default_rng(seed)
    worst = {}
    for kind in FactorKind:
        w = 0.0
        for _ in range(n_points):
            f, states = random_factor(kind, rng)
            _, Ja = f.evaluate(states)
            Jn = numerical_jacobians(f, states)
            num = max(np.abs(a - n).max() for a, n in zip(Ja, Jn))
            den = max(np.abs(n).max() for n in Jn)
            w = max(w, num / max(den, 1e-12))
        worst[kind.value] = float(w)
    return worst
