"""Sliding-window factor-graph smoother.

Keyframes are created at UWB epochs; the IMU samples between two epochs go
into one pre-integration factor. The oldest keyframe is eliminated by a
Schur complement once the window is full, leaving a linear prior factor on
the states it was connected to.
"""

from __future__ import annotations

import time
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
from numpy.typing import NDArray

from .factors import (
    ElevationConstraint,
    ElevationFactor,
    Factor,
    ImuBatch,
    ImuFactor,
    PriorFactor,
    RangeFactor,
    ScalarBatch,
    TdoaFactor,
    factor_cost,
    whiten,
)
from .imu import STATE_DIM, ImuNoise, ImuSample, NavState, PreintegratedImu, StateArrays, predict
from .tdoa import AnchorSet, TdoaMeasurement, UltrasonicRange, ultrasonic_init

_SCALAR_TYPES = (TdoaFactor, RangeFactor, ElevationFactor)
MAX_LAMBDA = 1e8


class SingularSystem(RuntimeError):
    """The damped normal equations are not positive definite even at max damping."""


class OutOfOrder(ValueError):
    pass


@dataclass
class NlosConfig:
    """Two-stage TDoA covariance inflation.

    Stage one compares each TDoA with the ultrasonic-only position; stage two
    watches the rolling mean of squared whitened residuals per anchor pair.
    """

    ultrasonic_stage: bool = True
    residual_stage: bool = True
    gate_chi2: float = 4.0
    inflation_base: float = 10.0
    residual_window: int = 10
    ultrasonic_disagreement_gate: float = 0.3  # m
    min_ultrasonic: int = 3

    def __post_init__(self):
        if self.inflation_base < 1.0:
            raise ValueError("inflation_base must be >= 1")

    @property
    def enabled(self) -> bool:
        return self.ultrasonic_stage or self.residual_stage


@dataclass
class EngineConfig:
    gravity: NDArray[np.float64] = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    window_size: int = 10
    lm_initial_lambda: float = 1e-4
    lm_lambda_up: float = 10.0
    lm_lambda_down: float = 0.5
    max_iterations: int = 10
    convergence_tol: float = 1e-4  # step norm; 0.1 mm / 0.1 mrad
    huber_delta: float | None = 0.3  # m; None disables the robust loss
    # The robust loss assumes the estimate already sits near the inliers. The
    # engine starts in least squares (wide basin, tolerant of a poor first fix)
    # and engages Huber once the median |TDoA residual| has stayed within
    # huber_delta for engage_patience epochs. If the median then stays above
    # lost_residual for lost_patience epochs it drops back to least squares.
    engage_patience: int = 10
    lost_residual: float = 1.0  # m
    lost_patience: int = 10
    nlos: NlosConfig = field(default_factory=NlosConfig)
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    sigma_tdoa: float = 0.10
    sigma_us: float = 0.02
    sigma_elev: float = 0.05
    use_ultrasonic: bool = True
    use_elevation: bool = True
    us_association_tol: float = 0.025  # s
    # initial prior: rotation (rad), position (m), velocity (m/s), gyro bias, accel bias
    prior_sigmas: tuple = (0.01, 0.01, 0.05, 0.5, 0.5, 0.5, 0.1, 0.1, 0.1) + (0.01,) * 3 + (0.1,) * 3

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float)
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.engage_patience < 1 or self.lost_patience < 1:
            raise ValueError("engage_patience and lost_patience must be >= 1")


@dataclass
class WindowGraph:
    window_size: int = 10
    ids: list = field(default_factory=list)
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    factors: list = field(default_factory=list)
    prior: PriorFactor | None = None
    next_id: int = 0
    clamped_eigenvalues: int = 0
    marginalized: int = 0

    def __len__(self) -> int:
        return len(self.states)

    def index(self) -> dict:
        return {k: i for i, k in enumerate(self.ids)}

    def state(self, key) -> NavState:
        return self.states[self.ids.index(key)]

    def add_factor(self, f: Factor) -> None:
        known = set(self.ids)
        if not all(k in known for k in f.keys):
            raise KeyError(f"factor keys {f.keys} not all in window {self.ids}")
        self.factors.append(f)

    def all_factors(self) -> list:
        return self.factors + ([self.prior] if self.prior is not None else [])

    def copy(self) -> WindowGraph:
        return WindowGraph(
            self.window_size,
            list(self.ids),
            list(self.times),
            list(self.states),
            list(self.factors),
            self.prior,
            self.next_id,
            self.clamped_eigenvalues,
            self.marginalized,
        )


@dataclass
class OptimizeReport:
    iterations: int = 0
    initial_error: float = 0.0
    final_error: float = 0.0
    accepted: int = 0
    rejected: int = 0
    converged: bool = False
    errors: list = field(default_factory=list)
    duration: float = 0.0


def add_keyframe(g: WindowGraph, state_init: NavState, t: float) -> WindowGraph:
    """Append a keyframe; marginalize the oldest one if the window overflows."""
    if g.times and not t > g.times[-1]:
        raise OutOfOrder(f"keyframe time {t} not after {g.times[-1]}")
    if len(g.states) >= g.window_size:
        marginalize(g, 0)
    g.ids.append(g.next_id)
    g.times.append(float(t))
    g.states.append(state_init)
    g.next_id += 1
    return g


# -- linear system ---------------------------------------------------------------------


class _System:
    """Factors of a (sub)graph grouped for vectorized evaluation.

    ``index`` maps keyframe ids to rows of the :class:`StateArrays` passed in.
    """

    def __init__(self, factors, index):
        scalar, imus, other = [], [], []
        for f in factors:
            if isinstance(f, _SCALAR_TYPES):
                scalar.append(f)
            elif isinstance(f, ImuFactor):
                imus.append(f)
            else:
                other.append(f)
        self.index = index
        self.scalar = ScalarBatch(scalar, index) if scalar else None
        self.imu = ImuBatch(imus, index) if imus else None
        self.other = other

    def cost(self, X: StateArrays) -> float:
        total = 0.0
        if self.scalar is not None:
            total += self.scalar.cost(X.p)
        if self.imu is not None:
            total += self.imu.cost(X)
        for f in self.other:
            total += factor_cost(f, f.residual([X.state(self.index[k]) for k in f.keys]))
        return total

    def linearize(self, X: StateArrays):
        """Gauss-Newton ``H = J^T J`` and ``grad = J^T r`` of the whitened, reweighted system."""
        n = len(X)
        dim = n * STATE_DIM
        H = np.zeros((dim, dim))
        grad = np.zeros(dim)
        if self.scalar is not None:
            rw, J, _ = self.scalar.linearize(X.p, X.R)
            Hpp = np.zeros((n, 3, 3))
            gp = np.zeros((n, 3))
            np.add.at(Hpp, self.scalar.rows, J[:, :, None] * J[:, None, :])
            np.add.at(gp, self.scalar.rows, J * rw[:, None])
            for i in np.unique(self.scalar.rows):
                o = i * STATE_DIM + 3
                H[o : o + 3, o : o + 3] += Hpp[i]
                grad[o : o + 3] += gp[i]
        if self.imu is not None:
            rw, Ji, Jj = self.imu.linearize(X)
            JiT = np.swapaxes(Ji, 1, 2)
            JjT = np.swapaxes(Jj, 1, 2)
            Hii, Hij, Hjj = JiT @ Ji, JiT @ Jj, JjT @ Jj
            gi = np.einsum("mij,mj->mi", JiT, rw)
            gj = np.einsum("mij,mj->mi", JjT, rw)
            for m, (i, j) in enumerate(zip(self.imu.i, self.imu.j)):
                a = slice(i * STATE_DIM, (i + 1) * STATE_DIM)
                b = slice(j * STATE_DIM, (j + 1) * STATE_DIM)
                H[a, a] += Hii[m]
                H[a, b] += Hij[m]
                H[b, a] += Hij[m].T
                H[b, b] += Hjj[m]
                grad[a] += gi[m]
                grad[b] += gj[m]
        for f in self.other:
            r, Js = f.evaluate([X.state(self.index[k]) for k in f.keys])
            rw, Jw, _ = whiten(f, r, Js)
            offs = [self.index[k] * STATE_DIM for k in f.keys]
            for a, Ja in zip(offs, Jw):
                grad[a : a + STATE_DIM] += Ja.T @ rw
                for b, Jb in zip(offs, Jw):
                    H[a : a + STATE_DIM, b : b + STATE_DIM] += Ja.T @ Jb
        return H, grad


def _damped_solve(H, grad, lam):
    A = H + lam * np.eye(len(H))
    c = sla.cho_factor(A, lower=False, check_finite=False)
    if not np.all(np.isfinite(c[0])):
        raise np.linalg.LinAlgError("non-finite Cholesky factor")
    return -sla.cho_solve(c, grad, check_finite=False)


def optimize(g: WindowGraph, cfg: EngineConfig):
    """Levenberg-Marquardt over all window states; returns ``(g, report)``.

    A step is accepted only if it lowers the total error. Iteration stops
    when the solved step is shorter than ``cfg.convergence_tol`` or after
    ``cfg.max_iterations``.
    """
    t0 = time.perf_counter()
    X = StateArrays.from_states(g.states)
    system = _System(g.all_factors(), g.index())

    report = OptimizeReport()
    err = system.cost(X)
    report.initial_error = err
    report.errors.append(err)
    lam = cfg.lm_initial_lambda
    H = grad = None
    for it in range(cfg.max_iterations):
        report.iterations = it + 1
        if H is None:
            H, grad = system.linearize(X)
        while True:
            try:
                step = _damped_solve(H, grad, lam)
                break
            except np.linalg.LinAlgError:
                if lam >= MAX_LAMBDA:
                    raise SingularSystem("Cholesky failed at maximum damping") from None
                lam = min(lam * cfg.lm_lambda_up, MAX_LAMBDA)
        step_norm = np.linalg.norm(step)
        if step_norm < cfg.convergence_tol:
            report.converged = True
            break
        trial = X.retract(step.reshape(-1, STATE_DIM))
        new_err = system.cost(trial)
        if new_err < err:
            X, err = trial, new_err
            report.accepted += 1
            report.errors.append(err)
            lam = max(lam * cfg.lm_lambda_down, 1e-12)
            H = None
        else:
            report.rejected += 1
            lam *= cfg.lm_lambda_up
            if lam > MAX_LAMBDA:
                break
    g.states = X.to_states()
    report.final_error = err
    report.duration = time.perf_counter() - t0
    return g, report


def total_error(g: WindowGraph) -> float:
    return _System(g.all_factors(), g.index()).cost(StateArrays.from_states(g.states))


# -- marginalization -------------------------------------------------------------------


def _psd_sqrt(L, rel_eps=1e-12):
    """Eigen square root of a symmetric matrix; negative eigenvalues clamp to 0."""
    L = 0.5 * (L + L.T)
    s, V = np.linalg.eigh(L)
    clamped = int(np.sum(s < 0))
    keep = s > rel_eps * max(s.max(initial=0.0), 1e-300)
    return s[keep], V[:, keep], clamped


def marginalize(g: WindowGraph, state_index: int = 0) -> WindowGraph:
    """Eliminate the oldest keyframe by Schur complement into the window prior.

    Every factor touching it (and the existing prior) is linearized at the
    current estimate; the result replaces the prior on the union of the
    other keyframes those factors touch.
    """
    if state_index != 0:
        raise ValueError("only the oldest keyframe can be marginalized")
    m_key = g.ids[0]
    touching = [f for f in g.factors if m_key in f.keys]
    if g.prior is not None:
        touching.append(g.prior)
    pos = g.index()
    keep_keys = sorted({k for f in touching for k in f.keys if k != m_key}, key=pos.__getitem__)
    order = [m_key, *keep_keys]
    local = {k: i for i, k in enumerate(order)}
    X = StateArrays.from_states([g.states[pos[k]] for k in order])
    Lam, gvec = _System(touching, local).linearize(X)

    dim = len(order) * STATE_DIM
    m = slice(0, STATE_DIM)
    rr = slice(STATE_DIM, dim)
    s, V, clamped_m = _psd_sqrt(Lam[m, m])
    Lmm_pinv = (V / s) @ V.T
    Lrm = Lam[rr, m]
    Lschur = Lam[rr, rr] - Lrm @ Lmm_pinv @ Lrm.T
    gschur = gvec[rr] - Lrm @ Lmm_pinv @ gvec[m]

    g.factors = [f for f in g.factors if m_key not in f.keys]
    del g.ids[0], g.times[0], g.states[0]
    g.marginalized += 1
    g.clamped_eigenvalues += clamped_m
    if keep_keys:
        s, V, clamped = _psd_sqrt(Lschur)
        g.clamped_eigenvalues += clamped
        H = np.sqrt(s)[:, None] * V.T
        r0 = (V.T @ gschur) / np.sqrt(s)
        lin = tuple(X.state(local[k]) for k in keep_keys)
        g.prior = PriorFactor(keys=tuple(keep_keys), H=H, b=-r0, lin_states=lin)
    else:
        g.prior = None
    return g


# -- NLOS covariance scaling -----------------------------------------------------------


@dataclass
class NlosContext:
    """Channel evidence available when a TDoA measurement is ingested."""

    anchors: AnchorSet
    ultrasonic_position: NDArray[np.float64] | None = None
    history: dict = field(default_factory=lambda: defaultdict(deque))

    def record(self, m: TdoaMeasurement, whitened_residual: float, window: int) -> None:
        h = self.history[(m.anchor_i, m.anchor_j)]
        h.append(float(whitened_residual) ** 2)
        while len(h) > window:
            h.popleft()


def scale_tdoa_covariance(
    m: TdoaMeasurement, ctx: NlosContext | None, cfg: NlosConfig
) -> TdoaMeasurement:
    """Return ``m`` with its sigma inflated according to the NLOS evidence in ``ctx``.

    Residual values are untouched; only the weight changes.
    """
    if ctx is None:
        return m
    sigma = m.sigma
    if cfg.ultrasonic_stage and ctx.ultrasonic_position is not None:
        ai = ctx.anchors.position(m.anchor_i)
        aj = ctx.anchors.position(m.anchor_j)
        p = ctx.ultrasonic_position
        disagreement = abs(np.linalg.norm(p - ai) - np.linalg.norm(p - aj) - m.delta_d)
        if disagreement > cfg.ultrasonic_disagreement_gate:
            sigma *= cfg.inflation_base
    if cfg.residual_stage:
        h = ctx.history.get((m.anchor_i, m.anchor_j))
        if h:
            mean_sq = sum(h) / len(h)
            if mean_sq > cfg.gate_chi2:
                sigma *= mean_sq / cfg.gate_chi2
    if sigma == m.sigma:
        return m
    return TdoaMeasurement(m.t, m.anchor_i, m.anchor_j, m.delta_d, sigma)


# -- engine ----------------------------------------------------------------------------


@dataclass
class EpochResult:
    t: float
    state: NavState
    report: OptimizeReport
    n_tdoa: int = 0
    n_ultrasonic: int = 0
    inflated: int = 0
    robust: bool = True


class FusionEngine:
    """Keyframe lifecycle around :func:`optimize`.

    Feed IMU samples with :meth:`add_imu` and ultrasonic ranges with
    :meth:`add_ultrasonic` as they arrive, then call :meth:`process_epoch` at
    each UWB epoch with that epoch's TDoA packets.
    """

    def __init__(
        self,
        cfg: EngineConfig,
        anchors: AnchorSet,
        ultrasonic_anchors: AnchorSet | None = None,
        floor_reference: NDArray[np.float64] | None = None,
    ):
        self.cfg = cfg
        self.anchors = anchors
        self.us_anchors = ultrasonic_anchors
        self.floor_reference = (
            np.zeros(3) if floor_reference is None else np.asarray(floor_reference, dtype=float)
        )
        self.graph = WindowGraph(window_size=cfg.window_size)
        self.nlos = NlosContext(anchors)
        self._imu: list[ImuSample] = []
        self._hold: ImuSample | None = None
        self._us: deque[UltrasonicRange] = deque()
        self.dropped_ultrasonic = 0
        self.robust = False
        self._mode_streak = 0
        self.robust_switches = 0

    # ingestion
    def add_imu(self, sample: ImuSample) -> None:
        if self._imu and sample.t <= self._imu[-1].t:
            raise OutOfOrder("IMU samples must have increasing timestamps")
        self._imu.append(sample)

    def add_ultrasonic(self, m: UltrasonicRange) -> None:
        self._us.append(m)

    @property
    def latest(self) -> NavState:
        return self.graph.states[-1]

    def initialize(self, state: NavState, t: float, tdoas=(), floor_height=None) -> EpochResult:
        g = self.graph
        add_keyframe(g, state, t)
        g.prior = PriorFactor.from_sigmas(g.ids[-1], state, self.cfg.prior_sigmas)
        self._last_t = float(t)
        return self._measure_and_solve(t, state, tdoas, floor_height)

    def _preintegrate(self, t0: float, t1: float) -> PreintegratedImu:
        pre = PreintegratedImu.start(self.latest.bias, self.cfg.imu_noise)
        samples = [s for s in self._imu if s.t < t1]
        self._imu = [s for s in self._imu if s.t >= t1]
        seq = ([self._hold] if self._hold is not None else []) + samples
        for k, s in enumerate(seq):
            start = max(s.t, t0)
            end = seq[k + 1].t if k + 1 < len(seq) else t1
            end = min(end, t1)
            if end > start:
                pre = pre.integrate(s, end - start)
        if seq:
            self._hold = seq[-1]
        return pre

    def _take_ultrasonic(self, t: float) -> list:
        tol = self.cfg.us_association_tol
        out = []
        while self._us and self._us[0].t < t + tol - 1e-12:
            m = self._us.popleft()
            if m.t >= t - tol - 1e-12:
                out.append(m)
            else:
                self.dropped_ultrasonic += 1
        return out

    def process_epoch(self, t: float, tdoas=(), floor_height=None) -> EpochResult:
        """Create a keyframe at ``t``, attach this epoch's measurements, optimize."""
        pre = self._preintegrate(self._last_t, t)
        if pre.dt_total <= 0:
            raise ValueError(f"no IMU data between {self._last_t} and {t}")
        prev_key = self.graph.ids[-1]
        predicted = predict(self.latest, pre, self.cfg.gravity)
        add_keyframe(self.graph, predicted, t)
        self.graph.add_factor(
            ImuFactor(keys=(prev_key, self.graph.ids[-1]), preint=pre, gravity=self.cfg.gravity)
        )
        self._last_t = float(t)
        return self._measure_and_solve(t, predicted, tdoas, floor_height)

    def _measure_and_solve(self, t, predicted, tdoas, floor_height) -> EpochResult:
        cfg = self.cfg
        g = self.graph
        key = g.ids[-1]
        ranges = self._take_ultrasonic(t) if self.us_anchors is not None else []
        if not cfg.use_ultrasonic:
            ranges = []

        self.nlos.ultrasonic_position = None
        if len(ranges) >= cfg.nlos.min_ultrasonic:
            self.nlos.ultrasonic_position = ultrasonic_init(ranges, self.us_anchors, prior=predicted.p)

        inflated = 0
        new_tdoa = []
        for m in tdoas:
            m = replace(m, sigma=cfg.sigma_tdoa)
            scaled = scale_tdoa_covariance(m, self.nlos, cfg.nlos) if cfg.nlos.enabled else m
            inflated += scaled.sigma > m.sigma
            f = TdoaFactor(
                keys=(key,),
                anchor_i=self.anchors.position(m.anchor_i),
                anchor_j=self.anchors.position(m.anchor_j),
                delta_d=m.delta_d,
                sigma=scaled.sigma,
                huber_delta=cfg.huber_delta if self.robust else None,
            )
            g.add_factor(f)
            new_tdoa.append((m, f))
        for r in ranges:
            g.add_factor(
                RangeFactor(keys=(key,), anchor=self.us_anchors.position(r.anchor_id), range=r.range, sigma=cfg.sigma_us)
            )
        if floor_height is not None and cfg.use_elevation:
            c = ElevationConstraint(self.floor_reference, float(floor_height - self.floor_reference[2]))
            g.add_factor(ElevationFactor(keys=(key,), constraint=c, sigma=cfg.sigma_elev))

        _, report = optimize(g, cfg)

        est = g.states[-1]
        residuals = [f.residual([est])[0] for _, f in new_tdoa]
        for (m, _), r in zip(new_tdoa, residuals):
            self.nlos.record(m, r / m.sigma, cfg.nlos.residual_window)
        self._update_robust_mode(residuals)
        return EpochResult(t, est, report, len(new_tdoa), len(ranges), inflated, self.robust)

    def _update_robust_mode(self, residuals) -> None:
        """Switch the window's TDoA factors between Huber and least squares.

        From a bad start every TDoA residual can sit in the linear zone of the
        Huber loss, where their bounded pull cannot move the estimate out of a
        wrong basin (e.g. the mirror image of coplanar ultrasonic anchors).
        Least squares has a wide enough basin to recover.
        """
        cfg = self.cfg
        if cfg.huber_delta is None or not residuals:
            return
        median = float(np.median(np.abs(residuals)))
        switch = median > cfg.lost_residual if self.robust else median <= cfg.huber_delta
        if not switch:
            self._mode_streak = 0
            return
        self._mode_streak += 1
        if self._mode_streak < (cfg.lost_patience if self.robust else cfg.engage_patience):
            return
        self.robust = not self.robust
        self._mode_streak = 0
        self.robust_switches += 1
        delta = cfg.huber_delta if self.robust else None
        self.graph.factors = [
            replace(f, huber_delta=delta) if isinstance(f, TdoaFactor) else f for f in self.graph.factors
        ]
        self.nlos.history.clear()
