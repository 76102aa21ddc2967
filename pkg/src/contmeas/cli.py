"""Command-line front end.

Every subcommand reads a model file, runs one analysis and writes CSV and/or
JSON files into ``--out``.  Exit status: 0 on success, 2 for configuration
errors, 3 for numerical failures, 4 for invalid model files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from contmeas import __version__
from contmeas.io import (
    ModelFileError,
    load_model,
    model_hash,
    state_cells,
    state_columns,
    write_csv,
    write_json,
)
from contmeas.operators import NumericalError, StateValidationError, pure_state, trace_distance, validate_state

log = logging.getLogger("contmeas")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_MODEL = 4
SEED_MAX = 2**64 - 1


class ConfigError(ValueError):
    pass


def _positive(kind):
    def conv(text):
        try:
            val = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a valid {kind.__name__}: {text!r}")
        if val <= 0:
            raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
        return val
    return conv


def _nonnegative_float(text):
    try:
        val = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not val >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative: {text!r}")
    return val


def _seed(text):
    try:
        val = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= val <= SEED_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return val


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contmeas", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True, type=Path, help="model file (JSON)")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    timed = argparse.ArgumentParser(add_help=False)
    timed.add_argument("--t-max", type=_nonnegative_float, default=1.0)
    timed.add_argument("--dt", type=_positive(float), default=1e-3)
    timed.add_argument("--stride", type=_positive(int), default=1, help="record every K-th step")
    timed.add_argument("--state", default=None,
                       help="initial state: 'mixed', a basis index, or a JSON matrix of [re, im] "
                            "pairs; defaults to the model file's rho0, else 'mixed'")

    random = argparse.ArgumentParser(add_help=False)
    random.add_argument("--n", type=_positive(int), default=1000, help="number of trajectories")
    random.add_argument("--seed", type=_seed, default=0, help="master seed (unsigned 64-bit)")
    random.add_argument("--parallel", type=_positive(int), default=1, help="worker processes")

    engine = argparse.ArgumentParser(add_help=False)
    engine.add_argument("--engine", choices=("linear", "posterior"), default="posterior")
    engine.add_argument("--scheme", choices=("kraus", "milstein", "euler"), default="kraus")

    sub.add_parser("master", parents=[common, timed], help="a priori states (CSV)")
    p = sub.add_parser("traj", parents=[common, timed, random, engine], help="one trajectory (CSV)")
    p.add_argument("--index", type=int, default=0, help="trajectory index under the master seed")
    sub.add_parser("ensemble", parents=[common, timed, random, engine], help="ensemble means (CSV)")
    sub.add_parser("moments", parents=[common, timed, random],
                   help="output means and second moments, formula and Monte Carlo (CSV)")
    sub.add_parser("info", parents=[common, timed, random], help="entropy and information report")
    p = sub.add_parser("check", parents=[common], help="purity-preservation verdict (JSON)")
    p.add_argument("--tol", type=_positive(float), default=1e-9)
    p = sub.add_parser("purify", parents=[common, timed, random], help="purification experiment")
    p.add_argument("--threshold", type=_positive(float), default=0.05)
    return parser


def _initial_state(text, rho_file, d):
    if text is None:
        return (rho_file, "model file") if rho_file is not None else (np.eye(d) / d, "mixed")
    if text == "mixed":
        return np.eye(d) / d, "mixed"
    if text.lstrip("-").isdigit():
        k = int(text)
        if not 0 <= k < d:
            raise ConfigError(f"basis index {k} out of range for d={d}")
        v = np.zeros(d)
        v[k] = 1.0
        return pure_state(v), f"basis {k}"
    try:
        raw = json.loads(text)
        mat = np.array([[complex(*e) for e in row] for row in raw], dtype=complex)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"cannot parse --state {text!r}") from exc
    if mat.shape != (d, d):
        raise ConfigError(f"--state has shape {mat.shape}, model needs {(d, d)}")
    return mat, "explicit"


def _grid(args):
    from contmeas.trajectories import TimeGrid

    if args.t_max <= 0:
        raise ConfigError("--t-max must be positive for this command")
    try:
        return TimeGrid(args.t_max, args.dt, args.stride)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _meta(args, model, extra=None) -> dict:
    meta = {"tool": "contmeas", "version": __version__, "command": args.command,
            "model_hash": model_hash(model), "model_name": model.name}
    if hasattr(args, "t_max"):
        meta["grid"] = {"t_max": args.t_max, "dt": args.dt, "stride": args.stride}
        meta["initial_state"] = args.state_label
    if hasattr(args, "seed"):
        meta["seed"] = args.seed
        meta["n"] = args.n
    if extra:
        meta.update(extra)
    return meta


def _stamp(meta: dict) -> dict:
    return {**meta, "created": datetime.now(timezone.utc).isoformat(timespec="seconds")}


def cmd_master(args, model, rho0):
    from contmeas.lindblad import master_series

    d = model.dim
    if args.t_max == 0:
        states, dt = master_series(model, rho0, 0.0), args.dt
    else:
        _grid(args)
        states, dt = master_series(model, rho0, args.t_max, args.dt), args.dt
    steps = np.arange(0, states.shape[0], args.stride)
    if steps[-1] != states.shape[0] - 1:
        steps = np.append(steps, states.shape[0] - 1)
    meta = _meta(args, model)
    rows = [[i * dt] + state_cells(states[i]) for i in steps]
    write_csv(args.out / "master.csv", meta, ["t"] + state_columns(d), rows)
    write_json(args.out / "master.json", {**_stamp(meta), "final_state": states[-1]})


def cmd_traj(args, model, rho0):
    from contmeas.trajectories import simulate_linear, simulate_posterior

    grid = _grid(args)
    if args.engine == "linear":
        rec = simulate_linear(model, rho0, grid, seed=args.seed, index=args.index, scheme=args.scheme)
    else:
        rec = simulate_posterior(model, rho0, grid, seed=args.seed, index=args.index, scheme=args.scheme)
    nd, nk = len(model.diffusive), len(model.jumps)
    cols = (["t", "weight"] + state_columns(model.dim) + [f"wtilde_{j}" for j in range(nd)]
            + [f"count_{k}" for k in range(nk)] + [f"m_{j}" for j in range(nd)]
            + [f"nu_{k}" for k in range(nk)])
    rows = []
    for i, t in enumerate(rec.times):
        rows.append([t, rec.weights[i]] + state_cells(rec.states[i]) + list(rec.wtilde[i])
                    + [int(c) for c in rec.counts[i]] + list(rec.m[i]) + list(rec.nu[i]))
    meta = _meta(args, model, {"engine": args.engine, "scheme": args.scheme, "index": args.index})
    write_csv(args.out / "traj.csv", meta, cols, rows)
    write_json(args.out / "traj.json", {**_stamp(meta), "underflow": rec.underflow})


def cmd_ensemble(args, model, rho0):
    from contmeas.lindblad import master_series
    from contmeas.trajectories import run_ensemble

    grid = _grid(args)
    summ = run_ensemble(model, rho0, grid, args.n, args.engine, args.seed, args.parallel,
                        scheme=args.scheme)
    eta = master_series(model, rho0, grid.t_max, grid.dt)[grid.sample_steps]
    d = model.dim
    cols = (["t", "mean_weight", "se_weight", "mean_purity", "se_purity", "mean_entropy",
             "se_entropy", "trace_distance_master"] + state_columns(d, "mean_")
            + state_columns(d, "se_"))

    def se(arr, i):
        return float("nan") if arr is None else arr[i]

    rows = []
    for i, t in enumerate(summ.times):
        se_cells = (state_cells(summ.se_state[i]) if summ.se_state is not None
                    else [float("nan")] * (2 * d * d))
        rows.append([t, summ.mean_weight[i], se(summ.se_weight, i), summ.mean_purity[i],
                     se(summ.se_purity, i), summ.mean_entropy[i], se(summ.se_entropy, i),
                     trace_distance(summ.mean_state[i], eta[i])] + state_cells(summ.mean_state[i])
                    + se_cells)
    meta = _meta(args, model, {"engine": args.engine, "scheme": args.scheme, "measure": summ.measure})
    write_csv(args.out / "ensemble.csv", meta, cols, rows)
    write_json(args.out / "ensemble.json", {
        **_stamp(meta), "n_used": summ.n, "n_excluded": summ.n_excluded,
        "unreliable": summ.unreliable,
        "final_trace_distance_master": float(trace_distance(summ.mean_state[-1], eta[-1])),
    })


def cmd_moments(args, model, rho0):
    from contmeas.moments import moment_table

    grid = _grid(args)
    rows = moment_table(model, rho0, grid, args.n, args.seed, args.parallel)
    cols = ["t", "channel", "type", "mean", "second_moment", "mc_estimate", "mc_se"]
    meta = _meta(args, model)
    write_csv(args.out / "moments.csv", meta, cols, [[r[c] for c in cols] for r in rows])
    write_json(args.out / "moments.json", {**_stamp(meta), "final": [r for r in rows if r["t"] == rows[-1]["t"]]})


def cmd_info(args, model, rho0):
    from contmeas.info import info_report

    grid = _grid(args)
    rep = info_report(model, rho0, grid, args.n, args.seed, args.parallel)
    rows = rep.rows()
    cols = list(rows[0])
    meta = _meta(args, model)
    write_csv(args.out / "info.csv", meta, cols, [[r[c] for c in cols] for r in rows])
    write_json(args.out / "info.json", {
        **_stamp(meta), "final": rows[-1], "initial_entropy": rep.initial_entropy,
        "balance_residual": rep.balance_residual,
        "decomposition": {"weights": rep.decomposition_weights, "vectors": rep.decomposition_vectors},
    })


def cmd_check(args, model, rho0):
    from contmeas.completeness import check_quasi_complete, check_theorem2_hypothesis

    verdict = check_quasi_complete(model, args.tol)
    hyp = check_theorem2_hypothesis(model)
    meta = _meta(args, model)
    write_json(args.out / "check.json", {**_stamp(meta), **verdict.to_dict(), "purification": hyp.to_dict()})
    print(json.dumps({"quasi_complete": verdict.quasi_complete, "reason": verdict.reason,
                      "hypothesis_holds": hyp.holds}))


def cmd_purify(args, model, rho0):
    from contmeas.completeness import purification_experiment

    grid = _grid(args)
    rep = purification_experiment(model, rho0, grid, args.n, args.seed, args.threshold,
                                  n_jobs=args.parallel)
    rows = rep.rows()
    cols = list(rows[0])
    meta = _meta(args, model)
    write_csv(args.out / "purify.csv", meta, cols, [[r[c] for c in cols] for r in rows])
    write_json(args.out / "purify.json", {
        **_stamp(meta), "quasi_complete": rep.verdict.quasi_complete,
        "reason": rep.verdict.reason, "hypothesis": rep.hypothesis.to_dict(),
        "final_window_purity_deficit": rep.final_window, "threshold": rep.threshold,
        "purified": rep.purified, "initial_entropy": rep.initial_entropy,
        "final_information": float(rep.information[-1]),
    })


COMMANDS = {
    "master": cmd_master, "traj": cmd_traj, "ensemble": cmd_ensemble, "moments": cmd_moments,
    "info": cmd_info, "check": cmd_check, "purify": cmd_purify,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        try:
            model, rho_file = load_model(args.model)
        except OSError as exc:
            raise ConfigError(f"cannot read model file: {exc}") from exc
        except (ValueError, StateValidationError) as exc:
            if isinstance(exc, ModelFileError):
                raise
            raise ModelFileError(str(exc)) from exc
        rho0 = None
        if hasattr(args, "state"):
            rho0, args.state_label = _initial_state(args.state, rho_file, model.dim)
            try:
                rho0, _ = validate_state(rho0)
            except StateValidationError as exc:
                if args.state is None and rho_file is not None:
                    raise ModelFileError(f"rho0: {exc}") from exc
                raise ConfigError(f"initial state: {exc}") from exc
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, model, rho0)
    except ModelFileError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, StateValidationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
