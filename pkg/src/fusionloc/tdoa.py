"""UWB-TDoA positioning: hyperbolic residual, spherical intersection,
ultrasonic-seeded initialization and Huber-robust refinement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import least_squares

SPEED_OF_LIGHT = 299_792_458.0  # m/s
DEFAULT_HUBER_DELTA = 0.3  # m


class DegenerateGeometry(ValueError):
    """Anchor geometry does not constrain all three coordinates."""


class InsufficientConstraints(ValueError):
    pass


class NoConvergence(RuntimeError):
    """Iteration limit reached; the best iterate is attached."""

    def __init__(self, message, position, covariance, iterations):
        super().__init__(message)
        self.position = position
        self.covariance = covariance
        self.iterations = iterations


class AnchorSet:
    """Surveyed anchors; TDoA pairs are formed against ``reference_id``."""

    def __init__(self, ids: Sequence, positions: ArrayLike, reference_id=None):
        pos = np.asarray(positions, dtype=float).reshape(-1, 3)
        if len(ids) != len(pos):
            raise ValueError("ids and positions differ in length")
        self.ids = tuple(ids)
        self.positions = pos
        self.reference_id = self.ids[0] if reference_id is None else reference_id
        self._index = {a: k for k, a in enumerate(self.ids)}
        if self.reference_id not in self._index:
            raise ValueError(f"reference anchor {reference_id!r} not in ids")

    def __repr__(self) -> str:
        return f"AnchorSet(ids={self.ids!r}, reference_id={self.reference_id!r})"

    def __len__(self) -> int:
        return len(self.ids)

    def position(self, anchor_id) -> NDArray[np.float64]:
        try:
            return self.positions[self._index[anchor_id]]
        except KeyError:
            raise KeyError(f"unknown anchor id {anchor_id!r}") from None

    def check_geometry(self) -> None:
        """Raise if the anchors are too few or coplanar for 3D solving."""
        if len(self) < 4:
            raise DegenerateGeometry(f"need >= 4 anchors, have {len(self)}")
        d = self.positions[1:] - self.positions[0]
        if np.linalg.matrix_rank(d, tol=1e-9) < 3:
            raise DegenerateGeometry("anchors are coplanar")


@dataclass(frozen=True)
class TdoaMeasurement:
    """Range difference ``|p - a_i| - |p - a_j|`` in meters."""

    t: float
    anchor_i: Hashable
    anchor_j: Hashable
    delta_d: float
    sigma: float = 0.1

    @classmethod
    def from_time_difference(cls, t, anchor_i, anchor_j, delta_t, sigma=0.1):
        return cls(t, anchor_i, anchor_j, SPEED_OF_LIGHT * delta_t, sigma)

    def swapped(self) -> TdoaMeasurement:
        return TdoaMeasurement(self.t, self.anchor_j, self.anchor_i, -self.delta_d, self.sigma)

    def is_feasible(self, anchors: AnchorSet) -> bool:
        baseline = np.linalg.norm(anchors.position(self.anchor_i) - anchors.position(self.anchor_j))
        return abs(self.delta_d) <= baseline + 3.0 * self.sigma


@dataclass(frozen=True)
class UltrasonicRange:
    t: float
    anchor_id: Hashable
    range: float
    sigma: float = 0.02

    def __post_init__(self):
        if not self.range > 0:
            raise ValueError("ultrasonic range must be positive")


def tdoa_residual(p: ArrayLike, m: TdoaMeasurement, anchors: AnchorSet) -> float:
    p = np.asarray(p, dtype=float)
    ai = anchors.position(m.anchor_i)
    aj = anchors.position(m.anchor_j)
    return float(np.linalg.norm(p - ai) - np.linalg.norm(p - aj) - m.delta_d)


def _tdoa_jacobian(p, ai, aj):
    ui = p - ai
    uj = p - aj
    ni = np.linalg.norm(ui, axis=-1, keepdims=True)
    nj = np.linalg.norm(uj, axis=-1, keepdims=True)
    return ui / np.maximum(ni, 1e-12) - uj / np.maximum(nj, 1e-12)


def spherical_intersection(ranges, anchors: AnchorSet) -> NDArray[np.float64]:
    """Linear least-squares position from absolute ranges.

    ``ranges`` is a sequence of ``(anchor_id, range_m)``. Sphere equations
    are differenced against the reference anchor (or the first listed one
    if the reference has no range).
    """
    ranges = list(ranges)
    if len(ranges) < 4:
        raise DegenerateGeometry(f"need >= 4 ranges, have {len(ranges)}")
    ids = [r[0] for r in ranges]
    ref = anchors.reference_id if anchors.reference_id in ids else ids[0]
    d = dict(ranges)
    ai = anchors.position(ref)
    di = d[ref]
    rows, rhs = [], []
    for aid, dj in ranges:
        if aid == ref:
            continue
        aj = anchors.position(aid)
        rows.append(2.0 * (aj - ai))
        rhs.append(di * di - dj * dj + aj @ aj - ai @ ai)
    A = np.array(rows)
    b = np.array(rhs)
    AtA = A.T @ A
    if np.linalg.matrix_rank(A, tol=1e-9 * max(1.0, np.abs(A).max())) < 3:
        raise DegenerateGeometry("anchors are coplanar or collinear")
    if np.linalg.cond(AtA) > 1e12:
        raise DegenerateGeometry("normal equations are ill-conditioned")
    return np.linalg.solve(AtA, A.T @ b)


def ultrasonic_init(
    ranges: Sequence[UltrasonicRange],
    anchors: AnchorSet,
    prior: ArrayLike | None = None,
    prior_weight: float = 1e-3,
    max_iterations: int = 20,
    step_tol: float = 1e-9,
) -> NDArray[np.float64]:
    """Gauss-Newton minimizer of ``sum (|p - a_k| - d_k)^2``.

    With fewer than four ranges the problem is regularized toward ``prior``
    by a residual ``sqrt(prior_weight) * (p - prior)``.
    """
    ranges = list(ranges)
    if not ranges and prior is None:
        raise InsufficientConstraints("no ultrasonic ranges and no prior")
    if not ranges:
        return np.asarray(prior, dtype=float).copy()
    A = np.array([anchors.position(r.anchor_id) for r in ranges])
    d = np.array([r.range for r in ranges])
    regularize = len(ranges) < 4
    if regularize and prior is None:
        raise InsufficientConstraints(f"{len(ranges)} ranges need a prior position")

    if prior is not None:
        p = np.asarray(prior, dtype=float).copy()
    else:
        try:
            p = spherical_intersection([(r.anchor_id, r.range) for r in ranges], anchors)
        except DegenerateGeometry:
            p = A.mean(axis=0)
    prior = None if prior is None else np.asarray(prior, dtype=float)
    sw = np.sqrt(prior_weight)

    for _ in range(max_iterations):
        diff = p - A
        n = np.maximum(np.linalg.norm(diff, axis=1), 1e-12)
        r = n - d
        J = diff / n[:, None]
        if regularize:
            r = np.concatenate([r, sw * (p - prior)])
            J = np.vstack([J, sw * np.eye(3)])
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        p = p + step
        if np.linalg.norm(step) < step_tol:
            break
    return p


def huber(r, delta: float):
    """Huber loss: ``r^2/2`` inside ``|r| <= delta``, linear outside."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * a * a, delta * a - 0.5 * delta * delta)[()]


def huber_derivative(r, delta: float):
    return np.clip(r, -delta, delta)[()]


def huber_weight(r, delta: float):
    """IRLS weight ``rho'(r) / r``; 1 in the quadratic regime."""
    a = np.abs(np.asarray(r, dtype=float))
    with np.errstate(divide="ignore"):
        return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))[()]


def robust_solve(
    tdoas: Sequence[TdoaMeasurement],
    init: ArrayLike,
    anchors: AnchorSet,
    delta: float = DEFAULT_HUBER_DELTA,
    max_iterations: int = 50,
    step_tol: float = 1e-10,
):
    """Huber-robust Gauss-Newton on TDoA residuals.

    ``delta`` is in meters (unwhitened residual units); ``np.inf`` gives
    plain weighted least squares. Each iteration takes the Newton step of
    the Huber cost restricted to inlier rows (quadratic convergence once the
    inlier set settles), falling back to the IRLS step when the inliers do
    not fix a 3D position, and backtracks until the robust cost decreases.

    Returns ``(position, covariance)`` with the covariance ``(J^T W J)^-1``,
    ``W`` holding the IRLS weights over ``sigma_k^2``.
    """
    tdoas = list(tdoas)
    if len(tdoas) == 0:
        raise InsufficientConstraints("no TDoA measurements")
    ai = np.array([anchors.position(m.anchor_i) for m in tdoas])
    aj = np.array([anchors.position(m.anchor_j) for m in tdoas])
    dd = np.array([m.delta_d for m in tdoas])
    inv_var = 1.0 / np.array([m.sigma for m in tdoas]) ** 2
    robust = not np.isinf(delta)
    p = np.asarray(init, dtype=float).copy()

    def residuals(x):
        return np.linalg.norm(x - ai, axis=1) - np.linalg.norm(x - aj, axis=1) - dd

    def cost(r):
        if robust:
            return float(np.sum(inv_var * huber(r, delta)))
        return float(0.5 * np.sum(inv_var * r * r))

    r = residuals(p)
    c = cost(r)
    cov = None
    for it in range(1, max_iterations + 1):
        J = _tdoa_jacobian(p, ai, aj)
        w = inv_var * huber_weight(r, delta) if robust else inv_var
        N = J.T @ (w[:, None] * J)
        if np.linalg.matrix_rank(J, tol=1e-9) < 3 or np.linalg.cond(N) > 1e12:
            raise DegenerateGeometry("TDoA geometry does not fix a 3D position")
        cov = np.linalg.inv(N)
        step = -cov @ (J.T @ (w * r))
        if robust:
            inside = np.abs(r) <= delta
            Jin = J[inside]
            if len(Jin) >= 3 and np.linalg.matrix_rank(Jin, tol=1e-9) == 3:
                Nin = Jin.T @ (inv_var[inside, None] * Jin)
                if np.linalg.cond(Nin) < 1e10:
                    step = -np.linalg.solve(Nin, J.T @ (inv_var * huber_derivative(r, delta)))
        # backtrack on the robust cost
        scale = 1.0
        for _ in range(30):
            trial = p + scale * step
            r_trial = residuals(trial)
            c_trial = cost(r_trial)
            if c_trial <= c:
                break
            scale *= 0.5
        else:
            return p, cov
        moved = np.linalg.norm(trial - p)
        p, r, c = trial, r_trial, c_trial
        if moved < step_tol:
            return p, cov
    raise NoConvergence(
        f"robust_solve did not converge in {max_iterations} iterations", p, cov, max_iterations
    )


def reflect_across_anchor_plane(p: ArrayLike, anchors: AnchorSet, tol: float = 1e-6):
    """Mirror image of ``p`` across the plane of coplanar ``anchors``, or ``None``.

    Ranges to coplanar anchors cannot tell a point from its reflection, so a
    range-based fix needs both candidates.
    """
    pos = anchors.positions
    if len(pos) < 3:
        return None
    c = pos.mean(axis=0)
    _, s, Vt = np.linalg.svd(pos - c)
    if s[1] < tol or s[-1] > tol * max(s[0], 1.0):
        return None
    n = Vt[-1]
    p = np.asarray(p, dtype=float)
    return p - 2.0 * ((p - c) @ n) * n


def joint_fix(
    tdoas: Sequence[TdoaMeasurement],
    ranges: Sequence[UltrasonicRange],
    anchors: AnchorSet,
    ultrasonic_anchors: AnchorSet,
    starts: Sequence[ArrayLike],
    delta: float = DEFAULT_HUBER_DELTA,
) -> NDArray[np.float64]:
    """Single-epoch position from TDoA and ultrasonic ranges together.

    Minimizes the Huber cost of the whitened TDoA and range residuals (the
    threshold is ``delta`` over the TDoA sigma) from every start in
    ``starts`` and returns the lowest-cost solution.
    """
    tdoas, ranges = list(tdoas), list(ranges)
    if len(tdoas) + len(ranges) < 3:
        raise InsufficientConstraints("need at least 3 measurements for a 3D fix")
    ai = np.array([anchors.position(m.anchor_i) for m in tdoas]).reshape(-1, 3)
    aj = np.array([anchors.position(m.anchor_j) for m in tdoas]).reshape(-1, 3)
    dd = np.array([m.delta_d for m in tdoas])
    st = np.array([m.sigma for m in tdoas])
    ua = np.array([ultrasonic_anchors.position(u.anchor_id) for u in ranges]).reshape(-1, 3)
    ur = np.array([u.range for u in ranges])
    su = np.array([u.sigma for u in ranges])

    def whitened(p):
        rt = (np.linalg.norm(p - ai, axis=1) - np.linalg.norm(p - aj, axis=1) - dd) / st
        ru = (np.linalg.norm(p - ua, axis=1) - ur) / su
        return np.concatenate([rt, ru])

    scale = delta / (np.median(st) if len(st) else np.median(su))
    loss = "linear" if np.isinf(scale) else "huber"
    best = None
    for p0 in starts:
        sol = least_squares(whitened, np.asarray(p0, dtype=float), loss=loss, f_scale=min(scale, 1e12))
        if best is None or sol.cost < best.cost:
            best = sol
    return best.x
