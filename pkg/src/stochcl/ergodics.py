"""Time-averaged empirical measures, coupling runs and stopping times.

Laws on function space are compared through scalar observables: a time average
``nu_T`` is represented by the uniformly weighted values of an observable at
equally spaced snapshots.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .grid import Field, TorusGrid, bessel_potential_norm, l1_norm
from .noise import NoiseModel, NoisePath
from .solver import Ensemble, EnsembleSnapshot, SolverConfig, format_float


def snapshot_every(dt: float, spacing: float = 0.01) -> int:
    """Steps between snapshots: ``max(1, floor(spacing / dt))``."""
    return max(1, int(np.floor(spacing / dt + 1e-9)))


@dataclass
class EmpiricalMeasure:
    """Uniformly weighted samples ``(time, value)`` of one observable."""

    observable_name: str
    times: np.ndarray
    values: np.ndarray
    window: tuple = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise ValueError("times and values must be 1-d arrays of equal length")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("samples must be sorted by time")
        if self.window is None and self.times.size:
            self.window = (float(self.times[0]), float(self.times[-1]))
        if self.times.size and (self.times[0] < self.window[0] - 1e-12 or self.times[-1] > self.window[1] + 1e-12):
            raise ValueError("window must cover all samples")
        self.window = tuple(float(w) for w in self.window) if self.window is not None else None

    def __len__(self) -> int:
        return self.values.size

    def after_burn_in(self, fraction: float = 0.1) -> "EmpiricalMeasure":
        """Drop samples in the first ``fraction`` of the window."""
        t0, t1 = self.window
        cut = t0 + fraction * (t1 - t0)
        keep = self.times >= cut - 1e-12
        return EmpiricalMeasure(self.observable_name, self.times[keep], self.values[keep], (cut, t1))

    def restricted(self, t_end: float) -> "EmpiricalMeasure":
        keep = self.times <= t_end + 1e-12
        return EmpiricalMeasure(self.observable_name, self.times[keep], self.values[keep], (self.window[0], t_end))

    def mass_near(self, point: float, radius: float) -> float:
        return float(np.mean(np.abs(self.values - point) <= radius))

    def to_dict(self) -> dict:
        return {"observable_name": self.observable_name, "window": list(self.window),
                "times": self.times.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "EmpiricalMeasure":
        return cls(data["observable_name"], data["times"], data["values"], tuple(data["window"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def kb_average(stream: Iterable, observable: Callable[[Field], float], T: float, t_start: float = 0.0,
               name: str = "observable", burn_in: float = 0.0) -> EmpiricalMeasure:
    """Time average of the observable over ``[t_start, t_start + T]``.

    ``stream`` yields ``(time, Field)`` pairs (or objects with ``time`` and
    ``state``) at uniform spacing; samples outside the window are skipped.
    """
    times, values = [], []
    t_stop = t_start + T
    for item in stream:
        t, state = (item.time, item.state) if hasattr(item, "state") else item
        if t < t_start - 1e-12:
            continue
        if t > t_stop + 1e-12:
            break
        value = float(observable(state))
        if not np.isfinite(value):
            raise ValueError(f"observable is not finite at t = {t}")
        times.append(t)
        values.append(value)
    measure = EmpiricalMeasure(name, times, values, (t_start, t_stop))
    return measure.after_burn_in(burn_in) if burn_in > 0 else measure


def wasserstein1(a, b) -> float:
    """Exact ``W_1`` between two uniformly weighted 1-d samples.

    Computed as ``int_0^1 |Q_a(p) - Q_b(p)| dp`` with the step quantile
    functions, integrating over the merged breakpoints ``i/n`` and ``j/m``.
    """
    xa = np.sort(np.asarray(a.values if isinstance(a, EmpiricalMeasure) else a, dtype=float))
    xb = np.sort(np.asarray(b.values if isinstance(b, EmpiricalMeasure) else b, dtype=float))
    if xa.size == 0 or xb.size == 0:
        raise ValueError("empirical measures must be nonempty")
    n, m = xa.size, xb.size
    if n == m:
        return float(np.mean(np.abs(xa - xb)))
    # breakpoints i*m and j*n on the common denominator n*m
    cuts = np.union1d(np.arange(1, n + 1) * m, np.arange(1, m + 1) * n)
    widths = np.diff(np.concatenate([[0], cuts]))
    ia = (cuts - 1) // m
    ib = (cuts - 1) // n
    return float(np.sum(widths * np.abs(xa[ia] - xb[ib])) / (n * m))


def trapezoid_average(times: np.ndarray, values: np.ndarray) -> float:
    times, values = np.asarray(times, dtype=float), np.asarray(values, dtype=float)
    if times.size == 1:
        return float(values[0])
    span = times[-1] - times[0]
    return float(np.trapezoid(values, times) / span) if span > 0 else float(values.mean())


def tightness_diagnostic(stream: Iterable, s: float, q: float, T: float) -> float:
    """``(1/T) int_0^T ||u(t)||_{W^{s,q}} dt`` by the trapezoid rule over snapshots."""
    if not s > 0:
        raise ValueError("s must be positive")
    measure = kb_average(stream, lambda f: bessel_potential_norm(f, s, q), T, name=f"W^{s},{q}")
    if len(measure) == 0:
        raise ValueError("no snapshots inside [0, T]")
    return trapezoid_average(measure.times, measure.values)


def running_time_average(times: np.ndarray, values: np.ndarray, horizons: Sequence[float]) -> list[float]:
    """Trapezoid time averages over ``[times[0], horizon]`` for each horizon."""
    out = []
    for horizon in horizons:
        keep = times <= horizon + 1e-12
        out.append(trapezoid_average(times[keep], values[keep]))
    return out


# ---------------------------------------------------------------------------
# ensembles with streaming observables
# ---------------------------------------------------------------------------


@dataclass
class EnsembleRecord:
    """Observables of a coupled ensemble at every snapshot.

    ``observables[name]`` has shape ``(snapshots, P, m)`` (or ``(snapshots, P)``
    for path-level observables); ``w``, ``w_max`` and ``w_min`` have shape
    ``(snapshots, P)``, the extremes running over steps since the previous one.
    """

    times: np.ndarray
    observables: dict
    w: np.ndarray
    w_max: np.ndarray
    w_min: np.ndarray
    final_states: np.ndarray
    dt: float
    every: int


def run_ensemble(grid: TorusGrid, initial: np.ndarray, seeds: Sequence[int], model, noise_model: NoiseModel,
                 cfg: SolverConfig, t_end: float, observables: dict, every: Optional[int] = None,
                 step_hook=None) -> EnsembleRecord:
    """Run ``initial`` (shape ``(P, m, *grid.shape)``) with path ``p`` seeded by ``seeds[p]``.

    ``observables`` maps names to functions of the state array returning
    per-path or per-member values; they are evaluated at every snapshot.
    """
    dt = cfg.time_step(grid)
    paths = [NoisePath(int(s), dt) for s in seeds]
    ens = Ensemble(grid, initial, paths, model, noise_model, cfg)
    every = snapshot_every(dt) if every is None else every
    n_steps = int(round(t_end / dt))
    times, ws, wmax, wmin = [], [], [], []
    obs = {name: [] for name in observables}

    def record(snap: EnsembleSnapshot):
        times.append(snap.time)
        ws.append(snap.w)
        wmax.append(snap.w_max)
        wmin.append(snap.w_min)
        for name, fn in observables.items():
            obs[name].append(np.asarray(fn(snap.states)))

    ens.run(n_steps, every, record, step_hook)
    return EnsembleRecord(np.array(times), {k: np.array(v) for k, v in obs.items()}, np.array(ws),
                          np.array(wmax), np.array(wmin), ens.states, dt, every)


def l1_norms(grid: TorusGrid) -> Callable[[np.ndarray], np.ndarray]:
    axes = tuple(range(-grid.dim, 0))
    return lambda states: np.abs(states).sum(axis=axes) * grid.cell_volume


def pair_gaps(grid: TorusGrid, i: int = 0, j: int = 1) -> Callable[[np.ndarray], np.ndarray]:
    axes = tuple(range(-grid.dim, 0))
    return lambda states: np.abs(states[:, i] - states[:, j]).sum(axis=axes) * grid.cell_volume


# ---------------------------------------------------------------------------
# coupling
# ---------------------------------------------------------------------------


def stopping_times(times: np.ndarray, norm_sums: np.ndarray, T: float, kappa_hat: float, t0: float = 0.0) -> list[float]:
    """``T_l = inf{t >= T_{l-1} + T : ||u(t)|| + ||v(t)|| <= 2 kappa_hat}`` over snapshot times, ``T_0 = t0``."""
    if not T > 0:
        raise ValueError("T must be positive")
    out = []
    prev = t0
    inside = norm_sums <= 2.0 * kappa_hat
    while True:
        candidates = np.nonzero((times >= prev + T - 1e-9) & inside)[0]
        if candidates.size == 0:
            return out
        prev = float(times[candidates[0]])
        out.append(prev)


def window_flags(times, w, w_max, w_min, starts: Sequence[float], T: float, factor: float, kappa_tilde: float):
    """Small-noise flags for the windows ``[start, start + T]`` that end inside the record.

    Returns ``(flags, sups)``; ``sups[l] = factor * sup |W(t) - W(start)|`` with
    the supremum taken over every step of the window (rounded up to a snapshot).
    """
    flags, sups = [], []
    for start in starts:
        i0 = int(np.searchsorted(times, start - 1e-9))
        ends = np.nonzero(times >= start + T - 1e-9)[0]
        if ends.size == 0:
            break
        i1 = int(ends[0])
        if i1 == i0:
            sup = 0.0
        else:
            sl = slice(i0 + 1, i1 + 1)
            sup = float(max(np.max(w_max[sl] - w[i0]), np.max(w[i0] - w_min[sl])))
        sups.append(factor * sup)
        flags.append(factor * sup <= kappa_tilde)
    return flags, sups


@dataclass
class CouplingRun:
    times: np.ndarray
    l1_gap_history: np.ndarray
    norm_sums: np.ndarray
    stopping_times: list
    small_noise_flags: list
    window_sups: list
    final_states: np.ndarray = field(default=None, repr=False)

    @property
    def initial_gap(self) -> float:
        return float(self.l1_gap_history[0])

    @property
    def final_gap(self) -> float:
        return float(self.l1_gap_history[-1])

    @property
    def flagged_fraction(self) -> Optional[float]:
        return float(np.mean(self.small_noise_flags)) if self.small_noise_flags else None

    def gap_increases(self) -> int:
        return int(np.sum(np.diff(self.l1_gap_history) > 0))

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "l1_gap_history": self.l1_gap_history.tolist(),
            "stopping_times": list(self.stopping_times),
            "small_noise_flags": [bool(f) for f in self.small_noise_flags],
            "window_sups": list(self.window_sups),
            "initial_gap": self.initial_gap,
            "final_gap": self.final_gap,
            "flagged_fraction": self.flagged_fraction,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def gap_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("time", "gap"))
        for t, g in zip(self.times, self.l1_gap_history):
            writer.writerow((format_float(t), format_float(g)))
        return buf.getvalue()


def coupling_experiment(u0: Field, v0: Field, model, noise_model: NoiseModel, cfg: SolverConfig, T: float,
                        kappa_hat: float, kappa_tilde: float, t_end: float, seed: int,
                        every: Optional[int] = None) -> CouplingRun:
    """Evolve ``u0`` and ``v0`` on one noise path and collect the coupling statistics."""
    if not (T > 0 and kappa_hat > 0 and kappa_tilde > 0):
        raise ValueError("T, kappa_hat and kappa_tilde must be positive")
    grid = u0.grid
    initial = np.stack([u0.values, v0.values])[None]
    rec = run_ensemble(grid, initial, [seed], model, noise_model, cfg, t_end,
                       {"l1": l1_norms(grid), "gap": pair_gaps(grid)}, every)
    norms = rec.observables["l1"][:, 0, :].sum(axis=1)
    gaps = rec.observables["gap"][:, 0]
    taus = stopping_times(rec.times, norms, T, kappa_hat)
    flags, sups = window_flags(rec.times, rec.w[:, 0], rec.w_max[:, 0], rec.w_min[:, 0], taus, T,
                               noise_model.w1inf_factor, kappa_tilde)
    return CouplingRun(rec.times, gaps, norms, taus, flags, sups, rec.final_states[0])


def default_kappa_hat(l1_values: np.ndarray) -> float:
    """Twice the median of ``||u||_{L^1}`` over a pilot run."""
    return 2.0 * float(np.median(l1_values))


def small_ball_average(times: np.ndarray, l1_values: np.ndarray, window: tuple) -> float:
    """Time average of ``||u||_{L^1}`` over ``window`` (trapezoid over snapshots)."""
    t_a, t_b = window
    times = np.asarray(times, dtype=float)
    if t_a < times[0] - 1e-9 or t_b > times[-1] + 1e-9 or t_b < t_a:
        raise ValueError(f"window {window} lies outside the recorded history")
    keep = (times >= t_a - 1e-9) & (times <= t_b + 1e-9)
    return trapezoid_average(times[keep], np.asarray(l1_values)[keep])


def snapshot_small_ball_average(snapshots: Sequence, window: tuple) -> float:
    """:func:`small_ball_average` over ``(time, Field)`` pairs."""
    times = np.array([t for t, _ in snapshots])
    values = np.array([l1_norm(f) for _, f in snapshots])
    return small_ball_average(times, values, window)


@dataclass
class SignTest:
    pairs: int
    wins: int
    p_value: float


def paired_sign_test(smaller: Sequence[float], larger: Sequence[float]) -> SignTest:
    """One-sided sign test that ``smaller[i] < larger[i]`` more often than not."""
    n = min(len(smaller), len(larger))
    diffs = np.asarray(larger[:n]) - np.asarray(smaller[:n])
    wins = int(np.sum(diffs > 0))
    ties = int(np.sum(diffs == 0))
    trials = n - ties
    p = stats.binomtest(wins, trials, 0.5, alternative="greater").pvalue if trials else 1.0
    return SignTest(trials, wins, float(p))
