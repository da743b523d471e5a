"""Command-line entry point: ``fusionloc {run,sweep,simulate,check}``."""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .factors import check_jacobians


def _seeds(text: str) -> list:
    """``"0-19"`` or ``"1,4,7"`` -> list of ints."""
    out = []
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", required=True, help="scenario YAML path or built-in name (office, warehouse, staircase)")
    p.add_argument("--out-dir", default=None, help="directory for CSV outputs and the manifest")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a scenario key (e.g. packet_reception_rate=0.4) or engine option (engine.window_size=15)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusionloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a scenario and score one estimator")
    _common(p)
    p.add_argument("--method", default="fgo", choices=harness.METHODS)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("sweep", help="grid over one parameter and several seeds")
    _common(p)
    p.add_argument("--method", dest="methods", action="append", choices=harness.METHODS)
    p.add_argument("--parameter", required=True, help="dotted key to vary, e.g. packet_reception_rate")
    p.add_argument("--values", nargs="+", required=True, type=harness._coerce)
    p.add_argument("--seeds", default="0", type=_seeds, help="e.g. 0-19 or 1,2,3")

    p = sub.add_parser("simulate", help="write measurement and truth CSVs only")
    _common(p)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("check", help="analytic vs numeric Jacobian self-test")
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "check":
        worst = check_jacobians(args.points, args.seed)
        ok = True
        for kind, err in worst.items():
            status = "ok" if err < args.tol else "FAIL"
            ok &= err < args.tol
            print(f"{kind:16s} max rel err {err:.3e}  {status}")
        return 0 if ok else 1

    overrides = harness.parse_overrides(args.overrides)
    if args.command == "run":
        rep = harness.run(args.scenario, args.method, seed=args.seed, overrides=overrides, out_dir=args.out_dir)
        print(json.dumps(harness._jsonable(rep.summary()), indent=2))
    elif args.command == "sweep":
        rows, agg = harness.sweep(
            args.scenario,
            args.parameter,
            args.values,
            args.seeds,
            methods=tuple(args.methods or ["fgo"]),
            overrides=overrides,
            out_dir=args.out_dir,
        )
        for (method, value), a in agg.items():
            print(
                f"{method:10s} {args.parameter}={value!s:8s} n={a['n']:3d} "
                f"rmse={a['rmse_3d_mean']:.4f}+-{a['rmse_3d_std']:.4f} m  "
                f"drift={a['drift_rate_mean']:.4f} m/min"
            )
    elif args.command == "simulate":
        truth, streams = harness.simulate(args.scenario, seed=args.seed, overrides=overrides, out_dir=args.out_dir)
        print(
            f"{len(streams.imu)} IMU samples, {len(streams.tdoa_epochs)} UWB epochs "
            f"({streams.tdoa_kept}/{streams.tdoa_sent} TDoA kept), "
            f"{streams.ultrasonic_kept} ultrasonic ranges, {len(streams.floor)} floor fixes"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
