"""Configuration-driven experiment runner.

Usage::

    stochcl run CONFIG [--out DIR] [--resume CKPT]
    stochcl validate CONFIG
    stochcl catalog

Exit status is 0 on success, 2 for invalid configurations or checkpoints and 3
when the solver aborts. Every run writes ``results.json`` (deterministic) and
``metadata.json`` (timestamps and versions) plus experiment-specific CSV files.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import math
import os
import platform
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .averaging import SemigroupParams, rough_random_field, verify_u0_estimate
from .checkpoint import Checkpoint, CheckpointError
from .config import EXPERIMENTS, ConfigError, ExperimentConfig, config_diff
from .ergodics import EmpiricalMeasure, coupling_experiment, snapshot_every, trapezoid_average
from .grid import Field, bessel_potential_norm, l1_norm, l2_norm, mean, sobolev_seminorm
from .kinetic import TestFunction, XiGrid, l1_from_kinetic, record_history, weak_formulation_terms
from .model import builtin_models, delta_decay, eta_decay
from .noise import NoisePath
from .solver import (CsvObserver, EnergyLedger, NumericalInstability, Trajectory, energy_balance_residual,
                     format_float, prepare_model, run)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


# ---------------------------------------------------------------------------
# deterministic JSON
# ---------------------------------------------------------------------------


def _encode(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return '"nan"'
        if math.isinf(x):
            return '"inf"' if x > 0 else '"-inf"'
        return format_float(x)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_encode(str(k), indent, level + 1)}: {_encode(obj[k], indent, level + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        return "[" + ", ".join(_encode(v, indent, level + 1) for v in seq) + "]"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    """JSON with sorted keys and floats written as ``%.17g``."""
    return _encode(obj, indent, 0) + "\n"


def _write(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _field_summary(f: Field, s: float) -> dict:
    return {"l1": l1_norm(f), "l2": l2_norm(f), "mean": mean(f), "sobolev": sobolev_seminorm(f, s)}


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


class _Setup:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.grid = config.build_grid()
        self.model = prepare_model(config.build_model())
        self.noise = config.build_noise(self.grid)
        self.solver = config.build_solver()
        self.dt = self.solver.time_step(self.grid)
        self.every = int(config.output.get("snapshot_every", 0)) or snapshot_every(self.dt)


def _run_simulate(setup: _Setup, out: Path, resume: Optional[Path]) -> dict:
    config = setup.config
    s = float(config.params.get("sobolev_s", 0.5))
    u0 = config.build_field(setup.grid, "u0")
    traj = Trajectory.start(u0, config.seed, setup.solver)
    if resume is not None:
        traj = _restore(traj, Checkpoint.load(resume), config, u0)
    observers = []
    with open(out / "series.csv", "w", encoding="utf-8", newline="") as series:
        observers.append((setup.every, CsvObserver(series, s)))
        ck_every = int(config.output.get("checkpoint_every", 0))
        if ck_every > 0:
            observers.append((ck_every, lambda snap: _checkpoint(traj, config, out)))
        run(traj, setup.model, setup.noise, setup.solver, config.t_end, observers)
    final = traj.state
    final_bytes = final.to_bytes()
    (out / "final_state.bin").write_bytes(final_bytes)
    led = traj.energy_ledger
    return {
        "dt": setup.dt,
        "steps": traj.step_count,
        "t_final": traj.time,
        "initial": _field_summary(u0, s),
        "final": _field_summary(final, s),
        "energy_balance_residual": energy_balance_residual(traj),
        "ledger": {"dissipation": led.cumulative_dissipation, "ito_input": led.cumulative_ito_input,
                   "martingale": led.cumulative_martingale},
        "final_state_sha256": hashlib.sha256(final_bytes).hexdigest(),
    }


def _checkpoint(traj: Trajectory, config: ExperimentConfig, out: Path) -> None:
    ck = Checkpoint(config.hash(), traj.time, traj.step_count, traj.state.values.reshape(1, -1), config.seed,
                    traj.noise.step_index, np.array([traj.energy_ledger.as_tuple()]), config.to_text())
    ck.save(out / f"checkpoint_{traj.step_count:010d}.bin")


def _restore(traj: Trajectory, ck: Checkpoint, config: ExperimentConfig, u0: Field) -> Trajectory:
    if ck.config_hash != config.hash():
        detail = ""
        if ck.config_text is not None:
            diff = config_diff(ck.config_text, config.to_text())
            detail = "; differing keys: " + ("; ".join(diff) if diff else "none (formatting only)")
        raise CheckpointError("checkpoint was written by a different configuration" + detail)
    if ck.fields.shape != (1, u0.grid.total_cells):
        raise CheckpointError(f"checkpoint holds fields of shape {ck.fields.shape}, expected (1, {u0.grid.total_cells})")
    if ck.seed != config.seed:
        raise CheckpointError("checkpoint seed differs from config seed")
    state = Field(u0.grid, ck.fields[0].reshape(u0.grid.shape))
    noise = NoisePath.replay(config.seed, traj.dt, ck.step_index)
    ledger = EnergyLedger(*(float(v) for v in ck.ledgers[0]))
    return Trajectory(state, noise, ck.step_count * traj.dt, ck.step_count, ledger, traj.initial_energy)


def _run_couple(setup: _Setup, out: Path) -> dict:
    config = setup.config
    p = config.params
    u0, v0 = config.build_field(setup.grid, "u0"), config.build_field(setup.grid, "v0")
    result = coupling_experiment(u0, v0, setup.model, setup.noise, setup.solver, float(p["T"]), float(p["kappa_hat"]),
                                 float(p["kappa_tilde"]), config.t_end, config.seed, setup.every)
    _write(out / "gap.csv", result.gap_csv())
    _write(out / "coupling.json", dumps(result.to_dict()))
    return {
        "dt": setup.dt,
        "initial_gap": result.initial_gap,
        "final_gap": result.final_gap,
        "gap_increases": result.gap_increases(),
        "stopping_times": len(result.stopping_times),
        "first_stopping_time": result.stopping_times[0] if result.stopping_times else None,
        "flagged_fraction": result.flagged_fraction,
    }


def _observable(name: str, s: float):
    return {"l1": l1_norm, "l2": l2_norm, "mean": mean, "sobolev": lambda f: sobolev_seminorm(f, s)}[name]


def _run_kb_measure(setup: _Setup, out: Path) -> dict:
    config = setup.config
    p = config.params
    names = list(p.get("observables", ["l1", "l2"]))
    s, q = float(p.get("s", 0.25)), float(p.get("q", 2.0))
    T = float(p.get("T", config.t_end))
    burn = float(p.get("burn_in", 0.1))
    traj = Trajectory.start(config.build_field(setup.grid, "u0"), config.seed, setup.solver)
    times, rows, tight = [], [], []

    def record(snap):
        times.append(snap.time)
        rows.append([_observable(n, s)(snap.state) for n in names])
        tight.append(bessel_potential_norm(snap.state, s, q))

    run(traj, setup.model, setup.noise, setup.solver, min(T, config.t_end), [(setup.every, record)])
    times_a, table = np.array(times), np.array(rows)
    summary = {}
    for j, name in enumerate(names):
        measure = EmpiricalMeasure(name, times_a, table[:, j], (0.0, times_a[-1])).after_burn_in(burn)
        v = measure.values
        summary[name] = {"samples": len(measure), "mean": float(v.mean()), "std": float(v.std()),
                         "q05": float(np.quantile(v, 0.05)), "median": float(np.median(v)),
                         "q95": float(np.quantile(v, 0.95))}
    with open(out / "measure.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time"] + names)
        for t, row in zip(times, rows):
            writer.writerow([format_float(t)] + [format_float(v) for v in row])
    return {"dt": setup.dt, "burn_in": burn, "observables": summary,
            "tightness": {"s": s, "q": q, "time_average": trapezoid_average(times_a, np.array(tight))}}


def _run_nondegeneracy(setup: _Setup, out: Path) -> dict:
    p = setup.config.params
    report = eta_decay(setup.model, p["lambdas"], float(p["beta"]))
    result = {"eta": report.to_dict()}
    if p.get("epsilons"):
        result["delta"] = delta_decay(setup.model, p["epsilons"]).to_dict()
    return result


def _run_averaging(setup: _Setup, out: Path) -> dict:
    p = setup.config.params
    params = SemigroupParams(float(p["gamma"]), float(p["theta"]), float(p["beta"]))
    seeds = p.get("family_seeds", list(range(8)))
    family = [rough_random_field(setup.grid, int(sd), float(p.get("amplitude", 0.3))) for sd in seeds]
    report = verify_u0_estimate(family, params, setup.model, T=float(p.get("T", 1.0)), kappa=float(p["kappa"]))
    _write(out / "averaging.json", dumps(report.to_dict()))
    return {"max_ratio": report.max_ratio, "slope": report.slope, "kappa": report.kappa, "data": len(family)}


def default_test_function(t_end: float, period: float = 1.0) -> TestFunction:
    """``sin^2(pi t / t_end) exp(-xi^2) (1 + cos(2 pi x / P) / 2)``, vanishing at both ends in time."""
    return TestFunction(lambda xi, c, t: np.sin(np.pi * t / t_end) ** 2 * np.exp(-xi**2)
                        * (1.0 + 0.5 * np.cos(2.0 * np.pi * c[0] / period)))


def _run_kinetic(setup: _Setup, out: Path) -> dict:
    config = setup.config
    cells = int(config.params.get("xi_cells", 512))
    u0 = config.build_field(setup.grid, "u0")
    history = record_history(u0, setup.model, setup.noise, setup.solver, config.t_end, config.seed)
    xi = XiGrid.covering(history.states, cells=cells)
    terms = weak_formulation_terms(history, setup.model, setup.noise, setup.solver,
                                   default_test_function(history.steps * history.dt, setup.grid.period), xi)
    final = Field(setup.grid, history.states[-1])
    direct = l1_norm(final - u0)
    kinetic = l1_from_kinetic(final, u0, xi)
    return {"dt": history.dt, "steps": history.steps, "xi_cells": cells, "terms": terms,
            "l1_identity": {"direct": direct, "kinetic": kinetic, "error": abs(direct - kinetic),
                            "bound": setup.grid.volume * xi.spacing}}


def run_experiment(config: ExperimentConfig, out_dir, resume=None) -> tuple[int, dict]:
    """Run ``config`` writing into ``out_dir``; returns ``(exit_status, results)``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = datetime.datetime.now(datetime.timezone.utc)
    results = {"experiment": config.experiment, "model": config.model_name, "config_sha256": config.hexdigest(),
               "seed": config.seed}
    status = EXIT_OK
    try:
        if resume is not None and config.experiment != "simulate":
            raise ConfigError("--resume is supported for the simulate experiment only")
        setup = _Setup(config)
        handlers = {
            "simulate": lambda: _run_simulate(setup, out, Path(resume) if resume else None),
            "couple": lambda: _run_couple(setup, out),
            "kb_measure": lambda: _run_kb_measure(setup, out),
            "nondegeneracy": lambda: _run_nondegeneracy(setup, out),
            "averaging_check": lambda: _run_averaging(setup, out),
            "kinetic_check": lambda: _run_kinetic(setup, out),
        }
        results.update(handlers[config.experiment]())
        results["status"] = "ok"
    except NumericalInstability as exc:
        status = EXIT_NUMERICAL
        results.update(status="numerical_abort", error=str(exc), step=exc.step)
    except (ValueError, OSError) as exc:
        # ConfigError, CheckpointError and parameter errors raised by the experiments
        status = EXIT_CONFIG
        results.update(status="invalid", error=str(exc))
    _write(out / "results.json", dumps(results))
    finished = datetime.datetime.now(datetime.timezone.utc)
    metadata = {"started": started.isoformat(), "finished": finished.isoformat(), "package_version": __version__,
                "python": platform.python_version(), "numpy": np.__version__, "config_sha256": config.hexdigest(),
                "resumed_from": str(resume) if resume else None}
    _write(out / "metadata.json", dumps(metadata))
    _write(out / "config.txt", config.to_text())
    return status, results


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _load(path) -> ExperimentConfig:
    return ExperimentConfig.from_file(path)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="stochcl", description="Stochastic conservation law experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment")
    p_run.add_argument("config")
    p_run.add_argument("--out", default="out")
    p_run.add_argument("--resume", default=None)
    p_val = sub.add_parser("validate", help="check a configuration")
    p_val.add_argument("config")
    sub.add_parser("catalog", help="list built-in models and experiments")
    args = parser.parse_args(argv)

    if args.command == "catalog":
        for name, model in sorted(builtin_models().items()):
            print(f"model {name}: {model.description}")
        print("model inline: polynomial flux/diffusion from model.flux and model.diffusion")
        for name in EXPERIMENTS:
            print(f"experiment {name}")
        return EXIT_OK
    try:
        config = _load(args.config)
    except (ConfigError, OSError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print(f"ok {config.hexdigest()}")
        return EXIT_OK
    status, results = run_experiment(config, args.out, args.resume)
    if status != EXIT_OK:
        print(f"{results['status']}: {results.get('error')}", file=sys.stderr)
    else:
        print(f"ok: results in {os.path.join(args.out, 'results.json')}")
    return status


if __name__ == "__main__":
    sys.exit(main())
