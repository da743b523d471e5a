"""Deterministic scenario simulator.

A scenario file (YAML) declares anchors, a waypoint trajectory, sensor
rates and noise, NLOS boxes, packet reception and optional floors; see
``scenarios/README.md`` for the schema. :func:`synthesize` turns it into a
ground-truth trajectory plus IMU, TDoA, ultrasonic and floor streams.

IMU samples carry interval means: the sample at ``t_k`` holds the mean
angular rate and the mean specific force (resolved in the body frame at
``t_k``) over ``[t_k, t_k + dt]``. A zero-order-hold integrator therefore
reproduces the true rotation and velocity increments exactly.

Every random stream draws from its own Philox substream keyed by a fixed
stream index, so enabling or disabling one sensor leaves the others'
draws unchanged.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from numpy.typing import ArrayLike, NDArray
from scipy.interpolate import CubicSpline

from .imu import ImuBias, ImuNoise, ImuSample
from .tdoa import AnchorSet, TdoaMeasurement, UltrasonicRange

GRAVITY = np.array([0.0, 0.0, -9.81])

# fixed substream indices; never renumber
_STREAMS = {
    "imu": 0,
    "tdoa_noise": 1,
    "nlos_bias": 2,
    "ultrasonic_noise": 3,
    "tdoa_drop": 4,
    "ultrasonic_drop": 5,
    "floor_noise": 6,
    "initial_bias": 7,
}


class ScenarioError(ValueError):
    pass


def _rng(seed: int, stream: str) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(_STREAMS[stream],))
    return np.random.Generator(np.random.Philox(ss))


# -- scenario --------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    lo: NDArray[np.float64]
    hi: NDArray[np.float64]
    bias_mean: float | None = None


@dataclass(frozen=True)
class Floor:
    z_min: float
    z_max: float
    height: float


@dataclass
class SensorNoise:
    tdoa: float = 0.10
    ultrasonic: float = 0.02
    floor: float = 0.0
    imu: ImuNoise = field(default_factory=ImuNoise)
    initial_gyro_bias: float = 2e-3  # rad/s, per-axis std of the starting bias
    initial_accel_bias: float = 2e-2  # m/s^2


@dataclass
class Scenario:
    name: str
    anchors: AnchorSet
    ultrasonic_anchors: AnchorSet | None
    waypoints: list
    duration: float
    imu_hz: float = 200.0
    uwb_hz: float = 20.0
    us_hz: float = 10.0
    noise: SensorNoise = field(default_factory=SensorNoise)
    nlos_regions: list = field(default_factory=list)
    nlos_bias_mean: float = 0.5
    packet_reception_rate: float = 1.0
    ultrasonic_max_range: float = 8.0
    seed: int = 0
    floors: list = field(default_factory=list)
    bounds: tuple | None = None
    engine: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.imu_hz, self.uwb_hz, self.us_hz) <= 0:
            raise ScenarioError("sensor rates must be positive")
        if not 0.0 <= self.packet_reception_rate <= 1.0:
            raise ScenarioError("packet_reception_rate must lie in [0, 1]")
        if self.duration <= 0:
            raise ScenarioError("duration must be positive")
        times = [w[0] for w in self.waypoints]
        if len(times) < 2 or np.any(np.diff(times) <= 0):
            raise ScenarioError("waypoint times must be strictly increasing (>= 2 waypoints)")
        if times[0] > 0 or times[-1] < self.duration:
            raise ScenarioError("waypoints must cover [0, duration]")

    def with_overrides(self, **changes) -> Scenario:
        """Return a copy with dotted-path overrides applied to the source mapping."""
        src = copy.deepcopy(self.source)
        for key, value in changes.items():
            _set_dotted(src, key, value)
        return scenario_from_dict(src)


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def _vec(x, n=3) -> NDArray[np.float64]:
    a = np.asarray(x, dtype=float)
    if a.shape != (n,):
        raise ScenarioError(f"expected a {n}-vector, got {x!r}")
    return a


def scenario_from_dict(d: dict) -> Scenario:
    try:
        anc = d["anchors"]
        positions = [_vec(p) for p in anc["positions"]]
        ids = anc.get("ids", list(range(len(positions))))
        anchors = AnchorSet(ids, positions, anc.get("reference"))
        us = d.get("ultrasonic_anchors")
        us_anchors = None
        if us:
            us_anchors = AnchorSet([f"u{k}" for k in range(len(us))], [_vec(p) for p in us])
        waypoints = [
            (float(w["t"]), _vec(w["position"]), float(w.get("yaw", 0.0)))
            for w in d["trajectory"]["waypoints"]
        ]
        rates = d.get("rates", {})
        nz = d.get("noise", {})
        imu_n = nz.get("imu", {})
        noise = SensorNoise(
            tdoa=float(nz.get("tdoa", 0.10)),
            ultrasonic=float(nz.get("ultrasonic", 0.02)),
            floor=float(nz.get("floor", 0.0)),
            imu=ImuNoise(**{k: float(v) for k, v in imu_n.items()}),
            initial_gyro_bias=float(nz.get("initial_gyro_bias", 2e-3)),
            initial_accel_bias=float(nz.get("initial_accel_bias", 2e-2)),
        )
        nlos = d.get("nlos", {}) or {}
        boxes = [
            Box(_vec(b["min"]), _vec(b["max"]), b.get("bias_mean")) for b in nlos.get("regions", [])
        ]
        for b in boxes:
            if np.any(b.hi < b.lo):
                raise ScenarioError(f"NLOS box with max < min: {b}")
        floors = [Floor(float(f["z_min"]), float(f["z_max"]), float(f["height"])) for f in d.get("floors", [])]
        bounds = d.get("bounds")
        if bounds is not None:
            bounds = (_vec(bounds["min"]), _vec(bounds["max"]))
        scn = Scenario(
            name=str(d.get("name", "scenario")),
            anchors=anchors,
            ultrasonic_anchors=us_anchors,
            waypoints=waypoints,
            duration=float(d["duration"]),
            imu_hz=float(rates.get("imu_hz", 200.0)),
            uwb_hz=float(rates.get("uwb_hz", 20.0)),
            us_hz=float(rates.get("us_hz", 10.0)),
            noise=noise,
            nlos_regions=boxes,
            nlos_bias_mean=float(nlos.get("bias_mean", 0.5)),
            packet_reception_rate=float(d.get("packet_reception_rate", 1.0)),
            ultrasonic_max_range=float(d.get("ultrasonic_max_range", 8.0)),
            seed=int(d.get("seed", 0)),
            floors=floors,
            bounds=bounds,
            engine=dict(d.get("engine", {}) or {}),
            source=copy.deepcopy(d),
        )
    except (KeyError, TypeError) as e:
        raise ScenarioError(f"malformed scenario: {e!r}") from e
    return scn


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        builtin = Path(__file__).parent / "scenarios" / f"{path.name}.yaml"
        if builtin.exists():
            path = builtin
    with open(path) as fh:
        d = yaml.safe_load(fh)
    if not isinstance(d, dict):
        raise ScenarioError(f"{path}: top level must be a mapping")
    return scenario_from_dict(d)


def noiseless(scn: Scenario) -> Scenario:
    """Same scenario with every noise source, NLOS bias and packet loss removed."""
    return scn.with_overrides(
        **{
            "noise.tdoa": 0.0,
            "noise.ultrasonic": 0.0,
            "noise.floor": 0.0,
            "noise.imu": {"gyro": 0.0, "accel": 0.0, "gyro_walk": 0.0, "accel_walk": 0.0},
            "noise.initial_gyro_bias": 0.0,
            "noise.initial_accel_bias": 0.0,
            "nlos.bias_mean": 0.0,
            "nlos.regions": [
                dict(r, bias_mean=0.0) for r in (scn.source.get("nlos", {}) or {}).get("regions", [])
            ],
            "packet_reception_rate": 1.0,
        }
    )


# -- trajectory ------------------------------------------------------------------------


def _rot_z(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class Trajectory:
    """Clamped cubic-spline position and yaw through the waypoints (C2 position)."""

    def __init__(self, waypoints):
        t = np.array([w[0] for w in waypoints])
        p = np.array([w[1] for w in waypoints])
        yaw = np.unwrap(np.array([w[2] for w in waypoints]))
        self._p = CubicSpline(t, p, bc_type="clamped")
        self._v = self._p.derivative()
        self._a = self._p.derivative(2)
        self._yaw = CubicSpline(t, yaw, bc_type="clamped")

    def position(self, t):
        return self._p(t)

    def velocity(self, t):
        return self._v(t)

    def acceleration(self, t):
        return self._a(t)

    def yaw(self, t):
        return self._yaw(t)

    def rotation(self, t) -> NDArray[np.float64]:
        return _rot_z(float(self._yaw(t)))


@dataclass
class GroundTruth:
    t: NDArray[np.float64]
    positions: NDArray[np.float64]
    rotations: NDArray[np.float64]
    velocities: NDArray[np.float64]
    gyro_bias: NDArray[np.float64]
    accel_bias: NDArray[np.float64]
    trajectory: Trajectory

    def index(self, t: float) -> int:
        k = int(np.searchsorted(self.t, t - 1e-9))
        if k >= len(self.t) or abs(self.t[k] - t) > 1e-9:
            raise KeyError(f"no ground-truth sample at t={t}")
        return k

    def position_at(self, times: ArrayLike) -> NDArray[np.float64]:
        return self.trajectory.position(np.asarray(times, dtype=float))

    def rotation_at(self, t: float) -> NDArray[np.float64]:
        return self.trajectory.rotation(t)


@dataclass
class Streams:
    imu: list
    tdoa_epochs: list  # (t, [TdoaMeasurement])
    ultrasonic: list  # UltrasonicRange, time ordered
    floor: dict  # epoch t -> floor height
    tdoa_sent: int = 0
    tdoa_kept: int = 0
    ultrasonic_sent: int = 0
    ultrasonic_kept: int = 0

    @property
    def epochs(self) -> list:
        return [t for t, _ in self.tdoa_epochs]

    @property
    def reception_achieved(self) -> float:
        sent = self.tdoa_sent + self.ultrasonic_sent
        return (self.tdoa_kept + self.ultrasonic_kept) / sent if sent else 1.0


# -- line of sight ---------------------------------------------------------------------


def los_check(p: ArrayLike, anchor: ArrayLike, boxes) -> bool:
    """True if the closed segment ``p``-``anchor`` touches none of ``boxes``.

    Slab method; boxes are closed, so a segment grazing a face is blocked.
    """
    return not bool(np.any(_blocked(np.asarray(p, float)[None], np.asarray(anchor, float)[None], boxes)))


def _blocked(p, anchors, boxes) -> NDArray[np.bool_]:
    """Vectorized slab test: ``blocked[k, b]`` for segment ``p -> anchors[k]`` and box ``b``."""
    if not boxes:
        return np.zeros((len(anchors), 0), dtype=bool)
    lo = np.array([b.lo for b in boxes])[None]  # 1 x B x 3
    hi = np.array([b.hi for b in boxes])[None]
    o = np.broadcast_to(p, anchors.shape)[:, None, :]  # K x 1 x 3
    d = (anchors[:, None, :] - o)
    parallel = d == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    tnear = np.where(parallel, -np.inf, np.minimum(t1, t2))
    tfar = np.where(parallel, np.inf, np.maximum(t1, t2))
    outside = parallel & ((o < lo) | (o > hi))
    t_enter = np.maximum(tnear.max(axis=2), 0.0)
    t_exit = np.minimum(tfar.min(axis=2), 1.0)
    return (t_enter <= t_exit) & ~outside.any(axis=2)


# -- synthesis -------------------------------------------------------------------------


def _epoch_times(duration, hz):
    """Sensor epochs on the half-open interval ``[0, duration)``."""
    n = int(np.ceil(duration * hz - 1e-9))
    return np.arange(n) / hz


def synthesize(scn: Scenario):
    """Ground truth and measurement streams for ``scn``; bit-identical per seed."""
    traj = Trajectory(scn.waypoints)
    dt = 1.0 / scn.imu_hz
    n_imu = int(round(scn.duration * scn.imu_hz))
    t = np.arange(n_imu + 1) * dt
    pos = traj.position(t)
    vel = traj.velocity(t)
    yaw = traj.yaw(t)
    if scn.bounds is not None:
        lo, hi = scn.bounds
        if np.any(pos < lo - 1e-9) or np.any(pos > hi + 1e-9):
            raise ScenarioError("trajectory leaves the declared bounding volume")
    rots = np.array([_rot_z(y) for y in yaw])

    # biases: initial offset then random walk
    noise = scn.noise
    rb = _rng(scn.seed, "initial_bias")
    bg0 = rb.normal(0.0, 1.0, 3) * noise.initial_gyro_bias
    ba0 = rb.normal(0.0, 1.0, 3) * noise.initial_accel_bias
    ri = _rng(scn.seed, "imu")
    walk = ri.normal(0.0, 1.0, (n_imu, 12))
    sq = np.sqrt(dt)
    bg = bg0 + np.vstack([np.zeros(3), np.cumsum(walk[:, 0:3] * noise.imu.gyro_walk * sq, axis=0)])
    ba = ba0 + np.vstack([np.zeros(3), np.cumsum(walk[:, 3:6] * noise.imu.accel_walk * sq, axis=0)])
    white_g = walk[:, 6:9] * noise.imu.gyro / sq
    white_a = walk[:, 9:12] * noise.imu.accel / sq

    dyaw = np.diff(yaw)
    dv = np.diff(vel, axis=0) - GRAVITY * dt
    imu = []
    for k in range(n_imu):
        gyro = np.array([0.0, 0.0, dyaw[k] / dt])
        accel = rots[k].T @ dv[k] / dt
        imu.append(ImuSample(float(t[k]), accel + ba[k] + white_a[k], gyro + bg[k] + white_g[k]))
    truth = GroundTruth(t, pos, rots, vel, bg, ba, traj)

    tdoa_epochs, sent, kept = _tdoa_stream(scn, traj)
    us, us_sent, us_kept = _ultrasonic_stream(scn, traj)
    floor = _floor_stream(scn, traj)
    streams = Streams(imu, tdoa_epochs, us, floor, sent, kept, us_sent, us_kept)
    return truth, streams


def _tdoa_stream(scn: Scenario, traj: Trajectory):
    epochs = _epoch_times(scn.duration, scn.uwb_hz)
    anchors = scn.anchors
    ref = anchors.reference_id
    ref_k = anchors.ids.index(ref)
    others = [k for k in range(len(anchors)) if k != ref_k]
    A = anchors.positions
    boxes = scn.nlos_regions
    box_mean = np.array([scn.nlos_bias_mean if b.bias_mean is None else b.bias_mean for b in boxes])
    rn = _rng(scn.seed, "tdoa_noise")
    rb = _rng(scn.seed, "nlos_bias")
    rd = _rng(scn.seed, "tdoa_drop")
    out = []
    sent = kept = 0
    positions = traj.position(epochs)
    for te, p in zip(epochs, positions):
        ranges = np.linalg.norm(A - p, axis=1)
        # draws happen unconditionally so streams do not shift with geometry
        noise = rn.normal(0.0, 1.0, len(others)) * scn.noise.tdoa
        expo = rb.exponential(1.0, len(A))
        keep = rd.random(len(others)) < scn.packet_reception_rate
        blocked = _blocked(p, A, boxes)
        if blocked.shape[1]:
            # the largest mean among the blocking boxes sets the bias scale
            mean = np.where(blocked, box_mean[None], 0.0).max(axis=1)
            ranges = ranges + expo * mean
        ms = []
        for n, k in enumerate(others):
            sent += 1
            if not keep[n]:
                continue
            kept += 1
            ms.append(
                TdoaMeasurement(
                    float(te), anchors.ids[k], ref, float(ranges[k] - ranges[ref_k] + noise[n]), max(scn.noise.tdoa, 1e-6)
                )
            )
        out.append((float(te), ms))
    return out, sent, kept


def _ultrasonic_stream(scn: Scenario, traj: Trajectory):
    if scn.ultrasonic_anchors is None:
        return [], 0, 0
    ua = scn.ultrasonic_anchors
    epochs = _epoch_times(scn.duration, scn.us_hz)
    rn = _rng(scn.seed, "ultrasonic_noise")
    rd = _rng(scn.seed, "ultrasonic_drop")
    out = []
    sent = kept = 0
    for te, p in zip(epochs, traj.position(epochs)):
        d = np.linalg.norm(ua.positions - p, axis=1)
        noise = rn.normal(0.0, 1.0, len(d)) * scn.noise.ultrasonic
        keep = rd.random(len(d)) < scn.packet_reception_rate
        blocked = _blocked(p, ua.positions, scn.nlos_regions).any(axis=1)
        for k in range(len(d)):
            if blocked[k] or d[k] >= scn.ultrasonic_max_range:
                continue
            sent += 1
            r = d[k] + noise[k]
            if keep[k] and r > 0:
                kept += 1
                out.append(UltrasonicRange(float(te), ua.ids[k], float(r), max(scn.noise.ultrasonic, 1e-6)))
    return out, sent, kept


def _floor_stream(scn: Scenario, traj: Trajectory) -> dict:
    if not scn.floors:
        return {}
    epochs = _epoch_times(scn.duration, scn.uwb_hz)
    z = traj.position(epochs)[:, 2]
    rf = _rng(scn.seed, "floor_noise")
    noise = rf.normal(0.0, 1.0, len(epochs)) * scn.noise.floor
    out = {}
    for te, zk, nk in zip(epochs, z, noise):
        for f in scn.floors:
            if f.z_min <= zk <= f.z_max:
                out[float(te)] = f.height + nk
                break
    return out


def imu_noise_free(scn: Scenario) -> bool:
    n = scn.noise
    return (
        n.imu.gyro == n.imu.accel == n.imu.gyro_walk == n.imu.accel_walk == 0.0
        and n.initial_gyro_bias == n.initial_accel_bias == 0.0
    )


def initial_bias(truth: GroundTruth) -> ImuBias:
    return ImuBias(truth.gyro_bias[0].copy(), truth.accel_bias[0].copy())


__all__ = [
    "Box",
    "Floor",
    "GroundTruth",
    "Scenario",
    "ScenarioError",
    "SensorNoise",
    "Streams",
    "Trajectory",
    "load_scenario",
    "los_check",
    "noiseless",
    "scenario_from_dict",
    "synthesize",
]
