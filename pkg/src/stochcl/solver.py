"""Finite-volume solver for ``du + div F(u) dt = div(A(u) grad u) dt + sigma dW``.

One step is a Lie splitting: an explicit Euler step of the semi-discrete
conservative scheme (monotone interface flux plus the Kirchhoff form of the
degenerate diffusion), followed by the exact additive-noise update
``u += sigma * dW``.

Energy bookkeeping per step (``dV`` the cell volume, ``L`` the semi-discrete
right-hand side, ``u~`` the state after the deterministic update)::

    dissipation += dt * (-<u, L(u)>)                  # >= 0 for monotone fluxes
    ito_input   += 1/2 ||sigma||^2 dt
    martingale  += <u~, sigma> dW + 1/2 ||sigma||^2 (dW^2 - dt)

so that ``1/2||u(t)||^2 - 1/2||u(0)||^2 + dissipation - ito_input - martingale``
equals ``sum 1/2 dt^2 ||L||^2`` exactly: zero without deterministic dynamics,
first order in ``dt`` otherwise.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .grid import Field, TorusGrid, l1_norm, l2_norm, mean, sobolev_seminorm
from .model import FluxDiffusionModel, tabulate_primitives
from .noise import BLOCK, NoiseModel, NoisePath

FLUX_SCHEMES = ("engquist_osher", "lax_friedrichs")


class NumericalInstability(RuntimeError):
    """Non-finite state or violated stability assumption."""

    def __init__(self, message, step=None, dt=None):
        super().__init__(f"{message} (step {step}, dt {dt!r})")
        self.step = step
        self.dt = dt


class CFLViolation(NumericalInstability):
    pass


@dataclass(frozen=True)
class SolverConfig:
    cfl: float = 0.4
    flux_scheme: str = "engquist_osher"
    dt_cap: float = 1e-2
    max_speed_estimate: float = 1.0
    diffusion_stability_factor: float = 0.5
    max_diffusion_estimate: float = 0.0
    check_bounds: bool = True

    def __post_init__(self):
        if not 0 < self.cfl <= 1:
            raise ValueError(f"cfl must lie in (0, 1], got {self.cfl}")
        if self.flux_scheme not in FLUX_SCHEMES:
            raise ValueError(f"flux_scheme must be one of {FLUX_SCHEMES}, got {self.flux_scheme!r}")
        if not self.dt_cap > 0:
            raise ValueError("dt_cap must be positive")
        if not self.max_speed_estimate > 0:
            raise ValueError("max_speed_estimate must be positive")
        if not 0 < self.diffusion_stability_factor <= 0.5:
            raise ValueError("diffusion_stability_factor must lie in (0, 0.5]")
        if self.max_diffusion_estimate < 0:
            raise ValueError("max_diffusion_estimate must be nonnegative")

    def time_step(self, grid: TorusGrid) -> float:
        """Fixed step keeping the full scheme monotone.

        The convective and diffusive rates are added, which is stricter than
        taking the minimum of the two separate limits: the combined update
        coefficient ``1 - lambda sum|F'| - 2 mu sum A`` then stays nonnegative.
        """
        dx = grid.spacing
        speed = self.max_speed_estimate
        if self.flux_scheme == "lax_friedrichs":
            speed *= grid.dim
        rate = speed / (self.cfl * dx)
        if self.max_diffusion_estimate > 0:
            rate += self.max_diffusion_estimate / (self.diffusion_stability_factor * dx * dx)
        return min(1.0 / rate, self.dt_cap)


# ---------------------------------------------------------------------------
# array kernel; spatial axes are the trailing grid.dim axes
# ---------------------------------------------------------------------------


def prepare_model(model: FluxDiffusionModel) -> FluxDiffusionModel:
    if model.flux_plus is None or model.flux_minus is None or model.kirchhoff is None:
        return tabulate_primitives(model)
    return model


def numerical_fluxes(u: np.ndarray, model: FluxDiffusionModel, grid: TorusGrid, scheme: str, alpha: float) -> list:
    """Interface fluxes ``F_{i, j+1/2}`` along each axis (stored at index ``j``)."""
    d = grid.dim
    out = []
    if scheme == "engquist_osher":
        fp, fm = model.flux_plus(u), model.flux_minus(u)
        for i in range(d):
            axis = u.ndim - d + i
            out.append(fp[i] + np.roll(fm[i], -1, axis=axis))
    else:
        f = model.flux(u)
        for i in range(d):
            axis = u.ndim - d + i
            up = np.roll(u, -1, axis=axis)
            out.append(0.5 * (f[i] + np.roll(f[i], -1, axis=axis)) - 0.5 * alpha * (up - u))
    return out


def rhs(u: np.ndarray, model: FluxDiffusionModel, grid: TorusGrid, scheme: str = "engquist_osher", alpha: float = 1.0) -> np.ndarray:
    """Semi-discrete right-hand side ``L(u)``."""
    d, dx = grid.dim, grid.spacing
    out = np.zeros_like(u)
    for i, face in enumerate(numerical_fluxes(u, model, grid, scheme, alpha)):
        axis = u.ndim - d + i
        out -= (face - np.roll(face, 1, axis=axis)) / dx
    if model.has_diffusion:
        beta = model.kirchhoff(u)
        for i, j in model.diffusion_support:
            ai, aj = u.ndim - d + i, u.ndim - d + j
            b = beta[i, j]
            if i == j:
                out += (np.roll(b, -1, axis=ai) - 2.0 * b + np.roll(b, 1, axis=ai)) / (dx * dx)
            else:
                bp = np.roll(b, -1, axis=ai)
                bm = np.roll(b, 1, axis=ai)
                cross = np.roll(bp, -1, axis=aj) - np.roll(bp, 1, axis=aj) - np.roll(bm, -1, axis=aj) + np.roll(bm, 1, axis=aj)
                out += 2.0 * cross / (4.0 * dx * dx)
    return out


def _spatial_sum(a: np.ndarray, d: int) -> np.ndarray:
    return a.sum(axis=tuple(range(a.ndim - d, a.ndim)))


def _check_bounds(u, model, cfg, step, dt):
    if not np.all(np.isfinite(u)):
        raise NumericalInstability("non-finite state", step, dt)
    if not cfg.check_bounds:
        return
    speed = model.max_speed(u)
    if speed > cfg.max_speed_estimate * (1 + 1e-12):
        raise CFLViolation(f"wave speed {speed:.6g} exceeds max_speed_estimate {cfg.max_speed_estimate}", step, dt)
    diff = model.max_diffusion(u)
    if diff > cfg.max_diffusion_estimate * (1 + 1e-12):
        raise CFLViolation(f"diffusion {diff:.6g} exceeds max_diffusion_estimate {cfg.max_diffusion_estimate}", step, dt)


def advance(u, dw, model, noise_model, cfg, grid, dt, step=None):
    """One split step on an array of states.

    ``dw`` must broadcast against the non-spatial leading shape of ``u``.
    Returns ``(u_new, dissipation_inc, ito_inc, martingale_inc)`` with the
    increments shaped like the leading axes.
    """
    d = grid.dim
    dv = grid.cell_volume
    _check_bounds(u, model, cfg, step, dt)
    lead = u.shape[: u.ndim - d]
    L = rhs(u, model, grid, cfg.flux_scheme, cfg.max_speed_estimate)
    dissipation = -_spatial_sum(u * L, d) * dv * dt
    u_det = u + dt * L
    sigma = noise_model.sigma.values
    sig2 = noise_model.l2_norm_sq()
    dw = np.asarray(dw, dtype=float)
    dw_b = dw.reshape(dw.shape + (1,) * d)
    martingale = _spatial_sum(u_det * sigma, d) * dv * dw + 0.5 * sig2 * (dw * dw - dt)
    u_new = u_det + sigma * dw_b
    if not np.all(np.isfinite(u_new)):
        raise NumericalInstability("non-finite state after update", step, dt)
    ito = np.full(np.broadcast_shapes(lead, dw.shape), 0.5 * sig2 * dt)
    return u_new, np.broadcast_to(dissipation, ito.shape), ito, np.broadcast_to(martingale, ito.shape)


# ---------------------------------------------------------------------------
# single trajectories
# ---------------------------------------------------------------------------


@dataclass
class EnergyLedger:
    cumulative_dissipation: float = 0.0
    cumulative_ito_input: float = 0.0
    cumulative_martingale: float = 0.0

    def as_tuple(self) -> tuple:
        return (self.cumulative_dissipation, self.cumulative_ito_input, self.cumulative_martingale)


@dataclass
class Trajectory:
    state: Field
    noise: NoisePath
    time: float = 0.0
    step_count: int = 0
    energy_ledger: EnergyLedger = field(default_factory=EnergyLedger)
    initial_energy: float = None

    def __post_init__(self):
        if self.initial_energy is None:
            self.initial_energy = 0.5 * l2_norm(self.state) ** 2

    @classmethod
    def start(cls, u0: Field, seed: int, cfg: SolverConfig, substeps: int = 1) -> "Trajectory":
        return cls(u0.copy(), NoisePath(seed, cfg.time_step(u0.grid), substeps))

    @property
    def dt(self) -> float:
        return self.noise.dt

    @property
    def grid(self) -> TorusGrid:
        return self.state.grid


def step(traj: Trajectory, model: FluxDiffusionModel, noise_model: NoiseModel, cfg: SolverConfig) -> Trajectory:
    """Advance ``traj`` in place by one step and return it."""
    dt = cfg.time_step(traj.grid)
    if abs(dt - traj.dt) > 1e-15 * dt:
        raise ValueError(f"noise path dt {traj.dt} differs from solver dt {dt}")
    model = prepare_model(model)
    dw = traj.noise.increment_at(traj.step_count)
    u_new, dis, ito, mart = advance(traj.state.values, dw, model, noise_model, cfg, traj.grid, dt, traj.step_count)
    traj.noise.step_index = traj.step_count + 1
    traj.noise.running_w += dw
    traj.state = Field(traj.grid, u_new)
    traj.step_count += 1
    traj.time = traj.step_count * dt
    led = traj.energy_ledger
    led.cumulative_dissipation += float(dis)
    led.cumulative_ito_input += float(ito)
    led.cumulative_martingale += float(mart)
    return traj


@dataclass
class Snapshot:
    time: float
    step: int
    state: Field
    ledger: tuple


Observer = Callable[[Snapshot], None]


def run(
    traj: Trajectory,
    model: FluxDiffusionModel,
    noise_model: NoiseModel,
    cfg: SolverConfig,
    t_end: float,
    observers: Sequence[tuple[int, Observer]] = (),
) -> Trajectory:
    """Step until ``t_end`` (to within one dt), calling ``(every, callback)``
    observers at step counts divisible by ``every`` including the start."""
    if t_end < traj.time - 1e-12:
        raise ValueError(f"t_end {t_end} lies before current time {traj.time}")
    model = prepare_model(model)
    dt = cfg.time_step(traj.grid)
    target = int(round(t_end / dt))

    def notify():
        snap = Snapshot(traj.time, traj.step_count, traj.state.copy(), traj.energy_ledger.as_tuple())
        for every, callback in observers:
            if traj.step_count % every == 0:
                callback(snap)

    if traj.step_count >= target:
        return traj
    notify()
    while traj.step_count < target:
        step(traj, model, noise_model, cfg)
        notify()
    return traj


def energy_balance_residual(traj: Trajectory) -> float:
    """Discrete Ito energy identity residual of ``traj`` since its start."""
    led = traj.energy_ledger
    energy = 0.5 * l2_norm(traj.state) ** 2
    return energy - traj.initial_energy + led.cumulative_dissipation - led.cumulative_ito_input - led.cumulative_martingale


class CsvObserver:
    """Writes ``time, l1, l2, mean, sobolev_s, dissipation, ito_input, martingale`` rows."""

    header = ("time", "l1", "l2", "mean", "sobolev_s", "dissipation", "ito_input", "martingale")

    def __init__(self, stream: io.TextIOBase, s: float = 0.5):
        self.writer = csv.writer(stream, lineterminator="\n")
        self.writer.writerow(self.header)
        self.s = s

    def __call__(self, snap: Snapshot):
        f = snap.state
        row = (snap.time, l1_norm(f), l2_norm(f), mean(f), sobolev_seminorm(f, self.s), *snap.ledger)
        self.writer.writerow([format_float(v) for v in row])


def format_float(x: float) -> str:
    return "%.17g" % float(x)


# ---------------------------------------------------------------------------
# batched trajectories
# ---------------------------------------------------------------------------


@dataclass
class EnsembleSnapshot:
    time: float
    step: int
    states: np.ndarray  # (paths, members, *grid.shape)
    w: np.ndarray  # W at this step, per path
    w_max: np.ndarray  # max of W over steps since the previous snapshot
    w_min: np.ndarray


class Ensemble:
    """Many trajectories stepped in lockstep.

    ``states`` has shape ``(P, m, *grid.shape)``; the ``m`` members in row ``p``
    are driven by the same noise path ``paths[p]`` (coupled copies).
    """

    def __init__(self, grid: TorusGrid, states: np.ndarray, paths: Sequence[NoisePath], model, noise_model, cfg):
        states = np.array(states, dtype=float)
        if states.ndim != grid.dim + 2 or states.shape[0] != len(paths):
            raise ValueError("states must have shape (len(paths), members, *grid.shape)")
        self.grid = grid
        self.states = states
        self.paths = list(paths)
        self.model = prepare_model(model)
        self.noise_model = noise_model
        self.cfg = cfg
        self.dt = cfg.time_step(grid)
        for p in self.paths:
            if abs(p.dt - self.dt) > 1e-15 * self.dt:
                raise ValueError(f"noise path dt {p.dt} differs from solver dt {self.dt}")
        steps = {p.step_index for p in self.paths}
        if len(steps) != 1:
            raise ValueError("all paths must sit at the same step")
        self.step_count = steps.pop()
        shape = states.shape[:2]
        self.dissipation = np.zeros(shape)
        self.ito_input = np.zeros(shape)
        self.martingale = np.zeros(shape)
        self.initial_energy = 0.5 * _spatial_sum(states**2, grid.dim) * grid.cell_volume

    @property
    def time(self) -> float:
        return self.step_count * self.dt

    def run(self, n_steps: int, every: int = 0, callback: Optional[Callable[[EnsembleSnapshot], None]] = None,
            step_hook: Optional[Callable[[np.ndarray, np.ndarray], None]] = None):
        """Advance ``n_steps``; ``callback`` gets a snapshot every ``every`` steps
        (and at the start); ``step_hook(before, after)`` sees every step."""
        w = np.array([p.running_w for p in self.paths])
        w_max, w_min = w.copy(), w.copy()
        if callback and every:
            callback(EnsembleSnapshot(self.time, self.step_count, self.states.copy(), w.copy(), w_max.copy(), w_min.copy()))
        done = 0
        while done < n_steps:
            count = min(BLOCK, n_steps - done)
            incs = np.stack([p.increments(self.step_count, count) for p in self.paths], axis=1)
            for row in incs:
                before = self.states
                after, dis, ito, mart = advance(
                    before, row[:, None], self.model, self.noise_model, self.cfg, self.grid, self.dt, self.step_count
                )
                self.dissipation += dis
                self.ito_input += ito
                self.martingale += mart
                w = w + row
                np.maximum(w_max, w, out=w_max)
                np.minimum(w_min, w, out=w_min)
                self.states = after
                self.step_count += 1
                if step_hook is not None:
                    step_hook(before, after)
                if callback and every and self.step_count % every == 0:
                    callback(EnsembleSnapshot(self.time, self.step_count, after.copy(), w.copy(), w_max.copy(), w_min.copy()))
                    w_max, w_min = w.copy(), w.copy()
            done += count
        for p, wp in zip(self.paths, w):
            p.step_index = self.step_count
            p.running_w = float(wp)
        return self

    def energy_balance_residual(self) -> np.ndarray:
        energy = 0.5 * _spatial_sum(self.states**2, self.grid.dim) * self.grid.cell_volume
        return energy - self.initial_energy + self.dissipation - self.ito_input - self.martingale
