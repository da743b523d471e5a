"""Run scenarios through an estimator and score the result against ground truth.

Methods:

``fgo``
    sliding-window factor-graph smoother (:class:`fusionloc.optimizer.FusionEngine`)
``ekf``
    error-state EKF baseline on the same streams
``tdoa_only``
    per-epoch Huber-robust TDoA multilateration
``imu_only``
    dead reckoning from the initial state
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from . import ekf as ekf_mod
from .factors import ElevationConstraint
from .imu import ImuNoise, NavState, PreintegratedImu, predict
from .manifold import so3_log
from .optimizer import EngineConfig, FusionEngine, NlosConfig
from .simulator import Scenario, load_scenario, synthesize
from .tdoa import (
    DegenerateGeometry,
    NoConvergence,
    joint_fix,
    reflect_across_anchor_plane,
    robust_solve,
    ultrasonic_init,
)

METHODS = ("fgo", "ekf", "tdoa_only", "imu_only")
ESTIMATE_COLUMNS = ["t", "x", "y", "z", "qw", "qx", "qy", "qz", "vx", "vy", "vz"]
SUMMARY_COLUMNS = [
    "method",
    "parameter",
    "value",
    "seed",
    "rmse_3d",
    "rmse_vertical",
    "orientation_error_rms_deg",
    "drift_rate",
    "reception_achieved",
    "n_epochs",
    "n_estimates",
    "timing_mean_ms",
    "timing_p95_ms",
]


class UnknownMethod(ValueError):
    pass


# -- metrics ---------------------------------------------------------------------------


def rmse_3d(est: NDArray, truth: NDArray) -> float:
    d = np.asarray(est, float) - np.asarray(truth, float)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def orientation_error_rms(R_est, R_true) -> float:
    """RMS of the rotation angle between estimated and true attitude, in degrees."""
    ang = [np.linalg.norm(so3_log(a.T @ b)) for a, b in zip(R_est, R_true)]
    return float(np.degrees(np.sqrt(np.mean(np.square(ang)))))


def drift_rate(t: NDArray, errors: NDArray) -> float:
    """Least-squares slope of position error versus time, in meters per minute."""
    t = np.asarray(t, float)
    if len(t) < 2:
        return 0.0
    slope = np.polyfit(t, np.asarray(errors, float), 1)[0]
    return float(slope * 60.0)


def rotation_to_quaternion(R: NDArray) -> NDArray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quaternion_to_rotation(q: NDArray) -> NDArray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass
class RunReport:
    method: str
    scenario: str
    seed: int
    rmse_3d: float
    rmse_vertical: float
    orientation_error_rms: float
    drift_rate: float
    n_epochs: int
    n_estimates: int
    times: NDArray = field(repr=False)
    errors: NDArray = field(repr=False)
    estimates: NDArray = field(repr=False)
    timing_mean: float = 0.0
    timing_p95: float = 0.0
    reception_achieved: float = 1.0
    dropped_ultrasonic: int = 0
    config: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "scenario": self.scenario,
            "seed": self.seed,
            "rmse_3d": self.rmse_3d,
            "rmse_vertical": self.rmse_vertical,
            "orientation_error_rms_deg": self.orientation_error_rms,
            "drift_rate": self.drift_rate,
            "n_epochs": self.n_epochs,
            "n_estimates": self.n_estimates,
            "timing_mean_ms": 1e3 * self.timing_mean,
            "timing_p95_ms": 1e3 * self.timing_p95,
            "reception_achieved": self.reception_achieved,
            "dropped_ultrasonic": self.dropped_ultrasonic,
        }


def score(estimates: NDArray, truth_positions: NDArray, truth_rotations=None, n_epochs=None, **kw) -> dict:
    """Metrics from an estimate table (``ESTIMATE_COLUMNS``) and matching truth rows.

    Rows whose position is NaN count as epochs without an estimate.
    """
    est = np.asarray(estimates, float)
    ok = np.all(np.isfinite(est[:, 1:4]), axis=1)
    t = est[ok, 0]
    p = est[ok, 1:4]
    ptrue = np.asarray(truth_positions, float)[ok]
    err = np.linalg.norm(p - ptrue, axis=1)
    out = {
        "times": t,
        "errors": err,
        "rmse_3d": rmse_3d(p, ptrue) if len(p) else float("nan"),
        "rmse_vertical": float(np.sqrt(np.mean((p[:, 2] - ptrue[:, 2]) ** 2))) if len(p) else float("nan"),
        "drift_rate": drift_rate(t, err),
        "n_epochs": len(est) if n_epochs is None else n_epochs,
        "n_estimates": int(ok.sum()),
        "orientation_error_rms": float("nan"),
    }
    q = est[ok, 4:8]
    if truth_rotations is not None and np.all(np.isfinite(q)) and len(q):
        Rt = np.asarray(truth_rotations)[ok]
        out["orientation_error_rms"] = orientation_error_rms([quaternion_to_rotation(x) for x in q], Rt)
    return out


# -- configuration ---------------------------------------------------------------------


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items) -> dict:
    """``["a.b=1", "c=x"]`` -> ``{"a.b": 1, "c": "x"}`` (values parsed as JSON when possible)."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _coerce(v.strip())
    return out


def _apply_dataclass(obj, key: str, value):
    head, _, rest = key.partition(".")
    if not any(f.name == head for f in dataclasses.fields(obj)):
        raise KeyError(f"unknown engine option {head!r}")
    if rest:
        return dataclasses.replace(obj, **{head: _apply_dataclass(getattr(obj, head), rest, value)})
    if head == "imu_noise" and isinstance(value, dict):
        value = ImuNoise(**value)
    if head == "nlos" and isinstance(value, dict):
        value = NlosConfig(**value)
    if head == "prior_sigmas":
        value = tuple(value)
    return dataclasses.replace(obj, **{head: value})


def engine_config(overrides: dict | None = None) -> EngineConfig:
    cfg = EngineConfig()
    for k, v in (overrides or {}).items():
        cfg = _apply_dataclass(cfg, k, v)
    return cfg


def split_overrides(overrides: dict | None):
    """Separate ``engine.*`` keys from scenario keys."""
    eng, scn = {}, {}
    for k, v in (overrides or {}).items():
        if k.startswith("engine."):
            eng[k[len("engine.") :]] = v
        else:
            scn[k] = v
    return scn, eng


def resolve(scenario, seed=None, overrides=None):
    """Scenario and engine config after applying ``--set`` style overrides."""
    scn = scenario if isinstance(scenario, Scenario) else load_scenario(scenario)
    scn_over, eng_over = split_overrides(overrides)
    if seed is not None:
        scn_over["seed"] = int(seed)
    if scn_over:
        scn = scn.with_overrides(**scn_over)
    merged = {**scn.engine, **eng_over}
    return scn, engine_config(merged)


def config_hash(scn: Scenario, cfg: EngineConfig, method: str) -> str:
    blob = json.dumps(
        {"scenario": scn.source, "engine": _jsonable(dataclasses.asdict(cfg)), "method": method},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


# -- estimators ------------------------------------------------------------------------


def _initial_position(scn: Scenario, tdoas, ranges, cfg: EngineConfig):
    """ultrasonic_init seeds robust_solve; with ranges available the two are
    then refined jointly, multi-started to cover the ultrasonic mirror image."""
    centroid = scn.anchors.positions.mean(axis=0)
    seed_p = centroid
    if scn.ultrasonic_anchors is None:
        ranges = []
    if ranges:
        try:
            seed_p = ultrasonic_init(ranges, scn.ultrasonic_anchors, prior=None if len(ranges) >= 4 else centroid)
        except (DegenerateGeometry, ValueError):
            pass
    tdoas = [dataclasses.replace(m, sigma=cfg.sigma_tdoa) for m in tdoas]
    p = seed_p
    if len(tdoas) >= 3:
        try:
            p, _ = robust_solve(tdoas, seed_p, scn.anchors, delta=cfg.huber_delta or np.inf)
        except NoConvergence as e:
            p = e.position
        except DegenerateGeometry:
            pass
    if not ranges or len(tdoas) + len(ranges) < 3:
        return p
    starts = [p, seed_p, centroid]
    mirror = reflect_across_anchor_plane(seed_p, scn.ultrasonic_anchors)
    if mirror is not None:
        starts.append(mirror)
    ranges = [dataclasses.replace(u, sigma=cfg.sigma_us) for u in ranges]
    return joint_fix(tdoas, ranges, scn.anchors, scn.ultrasonic_anchors, starts, delta=cfg.huber_delta or np.inf)


def _initial_state(scn, truth, streams, cfg):
    t0, tdoas0 = streams.tdoa_epochs[0]
    ranges0 = [u for u in streams.ultrasonic if abs(u.t - t0) <= cfg.us_association_tol]
    p0 = _initial_position(scn, tdoas0, ranges0, cfg)
    k = truth.index(t0)
    return NavState.from_arrays(truth.rotations[k], p0, truth.velocities[k])


def _row(t, s: NavState | None, with_rotation=True):
    if s is None:
        return [t] + [np.nan] * 10
    q = rotation_to_quaternion(s.R) if with_rotation else [np.nan] * 4
    return [t, *s.p, *q, *s.velocity]


def _floor_constraint(height):
    return ElevationConstraint(np.zeros(3), float(height))


def _imu_between(samples, t0, t1, start):
    """Yield ``(sample, dt)`` covering ``[t0, t1)``; ``start`` indexes the first candidate.

    The sample active at ``t0`` is the last one with ``t <= t0``.
    """
    k = start
    while k + 1 < len(samples) and samples[k + 1].t <= t0:
        k += 1
    out = []
    while k < len(samples) and samples[k].t < t1:
        a = max(samples[k].t, t0)
        b = min(samples[k + 1].t if k + 1 < len(samples) else t1, t1)
        if b > a:
            out.append((samples[k], b - a))
        k += 1
    return out, max(k - 1, 0)


def _run_fgo(scn, cfg, truth, streams):
    engine = FusionEngine(cfg, scn.anchors, scn.ultrasonic_anchors)
    us = list(streams.ultrasonic)
    imu = streams.imu
    ui = ii = 0
    rows, timing = [], []

    def feed(t):
        nonlocal ui, ii
        while ii < len(imu) and imu[ii].t < t:
            engine.add_imu(imu[ii])
            ii += 1
        while ui < len(us) and us[ui].t < t + cfg.us_association_tol:
            engine.add_ultrasonic(us[ui])
            ui += 1

    state0 = _initial_state(scn, truth, streams, cfg)
    t0, tdoas0 = streams.tdoa_epochs[0]
    feed(t0)
    res = engine.initialize(state0, t0, tdoas0, streams.floor.get(t0))
    rows.append(_row(t0, res.state))
    timing.append(res.report.duration)
    for t, tdoas in streams.tdoa_epochs[1:]:
        feed(t)
        res = engine.process_epoch(t, tdoas, streams.floor.get(t))
        rows.append(_row(t, res.state))
        timing.append(res.report.duration)
    return np.array(rows), timing, engine.dropped_ultrasonic


def _run_ekf(scn, cfg, truth, streams):
    state0 = _initial_state(scn, truth, streams, cfg)
    s = ekf_mod.EkfState.from_sigmas(state0, cfg.prior_sigmas)
    us = list(streams.ultrasonic)
    imu = streams.imu
    ui = ki = 0
    rows, timing = [], []
    t_prev = None
    for t, tdoas in streams.tdoa_epochs:
        tic = time.perf_counter()
        if t_prev is not None:
            steps, ki = _imu_between(imu, t_prev, t, ki)
            for sample, dt in steps:
                s = ekf_mod.propagate(s, sample, dt, cfg.gravity, cfg.imu_noise)
        if cfg.use_ultrasonic and scn.ultrasonic_anchors is not None:
            while ui < len(us) and us[ui].t < t + cfg.us_association_tol:
                m = dataclasses.replace(us[ui], sigma=cfg.sigma_us)
                s, _ = ekf_mod.update_ultrasonic(s, m, scn.ultrasonic_anchors)
                ui += 1
        for m in tdoas:
            s, _ = ekf_mod.update_tdoa(s, dataclasses.replace(m, sigma=cfg.sigma_tdoa), scn.anchors)
        h = streams.floor.get(t)
        if h is not None and cfg.use_elevation:
            s, _ = ekf_mod.update_elevation(s, _floor_constraint(h), cfg.sigma_elev)
        timing.append(time.perf_counter() - tic)
        rows.append(_row(t, s.nominal))
        t_prev = t
    return np.array(rows), timing, 0


def _run_tdoa_only(scn, cfg, truth, streams):
    p = None
    rows, timing = [], []
    delta = cfg.huber_delta if cfg.huber_delta is not None else np.inf
    for k, (t, tdoas) in enumerate(streams.tdoa_epochs):
        tic = time.perf_counter()
        if k == 0:
            p = _initial_state(scn, truth, streams, cfg).p
            est = p
        else:
            est = None
            if len(tdoas) >= 3:
                ms = [dataclasses.replace(m, sigma=cfg.sigma_tdoa) for m in tdoas]
                try:
                    est, _ = robust_solve(ms, p, scn.anchors, delta=delta)
                except NoConvergence as e:
                    est = e.position
                except DegenerateGeometry:
                    est = None
            if est is not None:
                p = est
        timing.append(time.perf_counter() - tic)
        if est is None:
            rows.append(_row(t, None))
        else:
            rows.append([t, *est, *[np.nan] * 4, *[np.nan] * 3])
    return np.array(rows), timing, 0


def _run_imu_only(scn, cfg, truth, streams):
    s = _initial_state(scn, truth, streams, cfg)
    imu = streams.imu
    rows, timing = [], []
    t_prev, ki = None, 0
    for t, _ in streams.tdoa_epochs:
        tic = time.perf_counter()
        if t_prev is not None:
            pre = PreintegratedImu.start(s.bias, cfg.imu_noise)
            steps, ki = _imu_between(imu, t_prev, t, ki)
            for sample, dt in steps:
                pre = pre.integrate(sample, dt)
            s = predict(s, pre, cfg.gravity)
        timing.append(time.perf_counter() - tic)
        rows.append(_row(t, s))
        t_prev = t
    return np.array(rows), timing, 0


_RUNNERS = {"fgo": _run_fgo, "ekf": _run_ekf, "tdoa_only": _run_tdoa_only, "imu_only": _run_imu_only}


def run(scenario, method: str = "fgo", seed=None, overrides=None, out_dir=None) -> RunReport:
    """Synthesize ``scenario``, run ``method`` over it and score against truth."""
    if method not in _RUNNERS:
        raise UnknownMethod(f"unknown method {method!r}; expected one of {METHODS}")
    scn, cfg = resolve(scenario, seed, overrides)
    truth, streams = synthesize(scn)
    estimates, timing, dropped = _RUNNERS[method](scn, cfg, truth, streams)
    t = estimates[:, 0]
    ptrue = truth.position_at(t)
    Rtrue = [truth.rotation_at(x) for x in t]
    m = score(estimates, ptrue, Rtrue)
    timing = np.asarray(timing)
    report = RunReport(
        method=method,
        scenario=scn.name,
        seed=scn.seed,
        rmse_3d=m["rmse_3d"],
        rmse_vertical=m["rmse_vertical"],
        orientation_error_rms=m["orientation_error_rms"],
        drift_rate=m["drift_rate"],
        n_epochs=m["n_epochs"],
        n_estimates=m["n_estimates"],
        times=m["times"],
        errors=m["errors"],
        estimates=estimates,
        timing_mean=float(timing.mean()) if len(timing) else 0.0,
        timing_p95=float(np.percentile(timing, 95)) if len(timing) else 0.0,
        reception_achieved=streams.reception_achieved,
        dropped_ultrasonic=dropped,
        config={"hash": config_hash(scn, cfg, method), "overrides": dict(overrides or {})},
    )
    if out_dir is not None:
        write_run(Path(out_dir), scn, cfg, report, truth)
    return report


def sweep(scenario, parameter: str, values, seeds, methods=("fgo",), overrides=None, out_dir=None):
    """Run every (method, value, seed) combination; returns ``(rows, aggregate)``.

    ``rows`` holds one summary dict per run; ``aggregate`` maps
    ``(method, value)`` to mean and standard deviation of each metric.
    """
    values = list(values)
    seeds = list(seeds)
    if not values:
        raise ValueError("sweep needs at least one value")
    if not seeds:
        raise ValueError("sweep needs at least one seed")
    rows = []
    for method in methods:
        for v in values:
            for seed in seeds:
                over = dict(overrides or {})
                over[parameter] = v
                rep = run(scenario, method, seed=seed, overrides=over)
                row = rep.summary()
                row.update(parameter=parameter, value=v)
                rows.append(row)
    aggregate = aggregate_rows(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_summary(out / "summary.csv", rows)
        write_aggregate(out / "aggregate.csv", aggregate)
    return rows, aggregate


_METRICS = ("rmse_3d", "rmse_vertical", "orientation_error_rms_deg", "drift_rate", "reception_achieved")


def aggregate_rows(rows) -> dict:
    cells: dict = {}
    for r in rows:
        cells.setdefault((r["method"], r["value"]), []).append(r)
    out = {}
    for key, rs in cells.items():
        agg = {"n": len(rs)}
        for m in _METRICS:
            x = np.array([r[m] for r in rs], float)
            agg[f"{m}_mean"] = float(np.mean(x))
            agg[f"{m}_std"] = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
        out[key] = agg
    # margin of each method over the EKF baseline in the same cell
    for (method, value), agg in out.items():
        base = out.get(("ekf", value))
        if base is not None and method != "ekf":
            agg["improvement_vs_ekf"] = 1.0 - agg["rmse_3d_mean"] / base["rmse_3d_mean"]
    return out


# -- persistence -----------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def estimates_csv(estimates: NDArray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ESTIMATE_COLUMNS)
    for row in estimates:
        w.writerow([_fmt(float(x)) for x in row])
    return buf.getvalue()


def read_estimates(path) -> NDArray:
    with open(path) as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ESTIMATE_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        return np.array([[float(x) for x in row] for row in r])


def write_summary(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in SUMMARY_COLUMNS])


def write_aggregate(path, aggregate) -> None:
    keys = sorted({k for agg in aggregate.values() for k in agg})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "value", *keys])
        for (method, value), agg in aggregate.items():
            w.writerow([method, _fmt(value), *[_fmt(agg.get(k, "")) for k in keys]])


def measurements_csv(streams) -> str:
    """All streams in one table: ``t,sensor,field...`` with sensor-specific fields."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "sensor", "f1", "f2", "f3", "f4", "f5", "f6"])
    for s in streams.imu:
        w.writerow([_fmt(s.t), "imu", *[_fmt(float(x)) for x in (*s.accel, *s.gyro)]])
    for t, ms in streams.tdoa_epochs:
        for m in ms:
            w.writerow([_fmt(t), "tdoa", m.anchor_i, m.anchor_j, _fmt(m.delta_d), _fmt(m.sigma), "", ""])
    for u in streams.ultrasonic:
        w.writerow([_fmt(u.t), "ultrasonic", u.anchor_id, _fmt(u.range), _fmt(u.sigma), "", "", ""])
    for t, h in sorted(streams.floor.items()):
        w.writerow([_fmt(t), "floor", _fmt(h), "", "", "", "", ""])
    return buf.getvalue()


def truth_csv(truth) -> str:
    rows = []
    for k, t in enumerate(truth.t):
        q = rotation_to_quaternion(truth.rotations[k])
        rows.append([t, *truth.positions[k], *q, *truth.velocities[k]])
    return estimates_csv(np.array(rows))


def _manifest(out: Path, scn, cfg, method, files) -> None:
    manifest = {
        "scenario": scn.name,
        "seed": scn.seed,
        "method": method,
        "config_hash": config_hash(scn, cfg, method),
        "scenario_source": _jsonable(scn.source),
        "engine": _jsonable(dataclasses.asdict(cfg)),
        "files": {f: hashlib.sha256((out / f).read_bytes()).hexdigest() for f in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_run(out: Path, scn, cfg, report: RunReport, truth) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "estimates.csv").write_text(estimates_csv(report.estimates))
    (out / "truth.csv").write_text(truth_csv(truth))
    rep = report.summary()
    (out / "report.json").write_text(json.dumps(_jsonable(rep), indent=2, sort_keys=True) + "\n")
    _manifest(out, scn, cfg, report.method, ["estimates.csv", "truth.csv", "report.json"])


def simulate(scenario, seed=None, overrides=None, out_dir=None):
    scn, cfg = resolve(scenario, seed, overrides)
    truth, streams = synthesize(scn)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "measurements.csv").write_text(measurements_csv(streams))
        (out / "truth.csv").write_text(truth_csv(truth))
        _manifest(out, scn, cfg, "simulate", ["measurements.csv", "truth.csv"])
    return truth, streams
