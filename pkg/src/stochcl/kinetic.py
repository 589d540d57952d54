"""Kinetic functions on a xi grid and the discrete weak kinetic formulation.

``chi(xi, u)`` is the signed indicator of the interval between 0 and ``u``;
``chi_tilde(xi, u) = H(u - xi)``. Pairings ``<chi(u), g> = int_0^u g`` are
needed exactly in several places and are evaluated with Gauss-Legendre
quadrature on ``[0, u]``; everything that lives on the xi grid uses midpoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .grid import Field, TorusGrid, l1_norm
from .model import FluxDiffusionModel
from .noise import NoiseModel, NoisePath
from .solver import SolverConfig, Trajectory, prepare_model, rhs, step

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


@dataclass(frozen=True)
class XiGrid:
    xi_min: float
    xi_max: float
    cells: int

    def __post_init__(self):
        if self.cells < 64:
            raise ValueError("a xi grid needs at least 64 cells")
        if not self.xi_max > self.xi_min:
            raise ValueError("xi_max must exceed xi_min")

    @property
    def spacing(self) -> float:
        return (self.xi_max - self.xi_min) / self.cells

    @property
    def centers(self) -> np.ndarray:
        return self.xi_min + self.spacing * (np.arange(self.cells) + 0.5)

    @property
    def edges(self) -> np.ndarray:
        return self.xi_min + self.spacing * np.arange(self.cells + 1)

    @classmethod
    def covering(cls, *arrays, cells: int = 1024, margin_cells: int = 2) -> "XiGrid":
        """Window enclosing ``0`` and every value, with a margin of cells."""
        lo = min(0.0, *(float(np.min(_raw(a))) for a in arrays))
        hi = max(0.0, *(float(np.max(_raw(a))) for a in arrays))
        width = max(hi - lo, 1e-12)
        h = width / (cells - 2 * margin_cells)
        return cls(lo - margin_cells * h, hi + margin_cells * h, cells)

    def check_covers(self, values):
        values = _raw(values)
        h = self.spacing
        lo, hi = float(np.min(values)), float(np.max(values))
        if lo < self.xi_min + h:
            raise ValueError(f"xi window [{self.xi_min}, {self.xi_max}] too small: u = {lo} needs margin {h}")
        if hi > self.xi_max - h:
            raise ValueError(f"xi window [{self.xi_min}, {self.xi_max}] too small: u = {hi} needs margin {h}")
        if self.xi_min > -h or self.xi_max < h:
            raise ValueError("xi window must contain 0 with a margin of one cell")


def _raw(a):
    return a.values if isinstance(a, Field) else np.asarray(a, dtype=float)


@dataclass
class KineticDensity:
    """Kinetic density sampled at xi-cell midpoints; last axis is xi."""

    grid: TorusGrid
    xi: XiGrid
    values: np.ndarray
    kind: str = "chi"

    def integrate(self, weight: Optional[np.ndarray] = None) -> np.ndarray:
        """``int w(xi) values dxi`` per spatial cell (midpoint rule)."""
        w = 1.0 if weight is None else weight
        return (self.values * w).sum(axis=-1) * self.xi.spacing


def chi_values(u: np.ndarray, xi_centers: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)[..., None]
    return ((0.0 < xi_centers) & (xi_centers < u)).astype(float) - ((u < xi_centers) & (xi_centers < 0.0)).astype(float)


def chi(field: Field, xi: XiGrid, kind: str = "chi") -> KineticDensity:
    """Midpoint samples of ``chi(xi, u(x))`` or, with ``kind='tilde'``, of ``H(u - xi)``."""
    xi.check_covers(field)
    centers = xi.centers
    if kind == "chi":
        values = chi_values(field.values, centers)
    elif kind == "tilde":
        values = (centers <= field.values[..., None]).astype(float)
    else:
        raise ValueError(f"kind must be 'chi' or 'tilde', got {kind!r}")
    return KineticDensity(field.grid, xi, values, kind)


def representation(field: Field, xi: XiGrid, eta_prime: Callable[[np.ndarray], np.ndarray]) -> Field:
    """Cellwise ``int eta'(xi) chi(xi, u) dxi``, approximating ``eta(u) - eta(0)``."""
    density = chi(field, xi)
    return Field(field.grid, density.integrate(eta_prime(xi.centers)))


def l1_from_kinetic(u: Field, v: Field, xi: XiGrid) -> float:
    """``||u - v||_{L^1}`` through ``int |chi^u| + |chi^v| - 2 chi^u chi^v dxi``."""
    cu, cv = chi(u, xi).values, chi(v, xi).values
    per_cell = (np.abs(cu) + np.abs(cv) - 2.0 * cu * cv).sum(axis=-1) * xi.spacing
    return float(per_cell.sum() * u.grid.cell_volume)


def positive_part_from_kinetic(u: Field, v: Field, xi: XiGrid) -> float:
    """``||(u - v)_+||_{L^1}`` through ``int chi~^u (1 - chi~^v) dxi``."""
    tu, tv = chi(u, xi, "tilde").values, chi(v, xi, "tilde").values
    per_cell = (tu * (1.0 - tv)).sum(axis=-1) * xi.spacing
    return float(per_cell.sum() * u.grid.cell_volume)


# ---------------------------------------------------------------------------
# discrete kinetic formulation
# ---------------------------------------------------------------------------


def pair_chi(u: np.ndarray, g: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """``int chi(xi, u) g(xi) dxi = int_0^u g`` per cell, 8-point Gauss-Legendre.

    ``g`` receives xi values shaped ``(8, *u.shape)`` and may return extra
    leading axes in front of those.
    """
    u = np.asarray(u, dtype=float)
    nodes = (0.5 * (_GL_NODES + 1.0)).reshape((-1,) + (1,) * u.ndim) * u
    vals = g(nodes)
    w = _GL_WEIGHTS.reshape((-1,) + (1,) * u.ndim)
    return 0.5 * u * (vals * w).sum(axis=-1 - u.ndim)


def kinetic_primitive(G: Callable, v: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """``int_{-inf}^{xi} G'(s) chi(s, v) ds`` for every xi (last axis of result).

    ``G`` maps arrays to arrays with leading component axes (model primitives).
    """
    v = np.asarray(v, dtype=float)[..., None]
    lo, hi = np.minimum(v, 0.0), np.maximum(v, 0.0)
    clamped = np.clip(xi, lo, hi)
    return np.sign(v) * (G(clamped) - G(np.broadcast_to(lo, clamped.shape)))


def _identity(v):
    return np.asarray(v, dtype=float)[None]


def kinetic_defect_measure(u, u_det, model: FluxDiffusionModel, grid: TorusGrid, cfg: SolverConfig, dt: float, xi: np.ndarray) -> np.ndarray:
    """Antiderivative in xi of the defect of the discrete kinetic equation.

    For one deterministic step ``u -> u_det`` of the scheme this returns
    ``m(xi, x)`` (shape ``(*grid.shape, len(xi))``) such that

        chi(u_det) - chi(u) + dt div_h f(xi) - dt Lap_h (A chi)(xi) = d_xi m,

    where ``f`` is the kinetic form of the interface flux. ``m`` vanishes
    outside the range of the states and is the discrete counterpart of the
    dissipation measures (nonnegative for monotone steps).
    """
    model = prepare_model(model)
    d, dx = grid.dim, grid.spacing
    m = kinetic_primitive(_identity, u_det, xi)[0] - kinetic_primitive(_identity, u, xi)[0]
    if cfg.flux_scheme == "engquist_osher":
        kp = kinetic_primitive(model.flux_plus, u, xi)
        km = kinetic_primitive(model.flux_minus, u, xi)
    else:
        kf = kinetic_primitive(model.flux, u, xi)
        kid = kinetic_primitive(_identity, u, xi)[0]
    for i in range(d):
        axis = i  # spatial axes lead, xi is last
        if cfg.flux_scheme == "engquist_osher":
            face = kp[i] + np.roll(km[i], -1, axis=axis)
        else:
            alpha = cfg.max_speed_estimate
            face = 0.5 * (kf[i] + np.roll(kf[i], -1, axis=axis)) - 0.5 * alpha * (np.roll(kid, -1, axis=axis) - kid)
        m += dt * (face - np.roll(face, 1, axis=axis)) / dx
    if model.has_diffusion:
        kb = kinetic_primitive(model.kirchhoff, u, xi)
        for i, j in model.diffusion_support:
            b = kb[i, j]
            if i == j:
                m -= dt * (np.roll(b, -1, axis=i) - 2.0 * b + np.roll(b, 1, axis=i)) / (dx * dx)
            else:
                bp, bm = np.roll(b, -1, axis=i), np.roll(b, 1, axis=i)
                cross = np.roll(bp, -1, axis=j) - np.roll(bp, 1, axis=j) - np.roll(bm, -1, axis=j) + np.roll(bm, 1, axis=j)
                m -= dt * 2.0 * cross / (4.0 * dx * dx)
    return m


class TestFunction:
    """Test function ``phi(xi, x, t)`` with derivatives.

    ``phi(xi, coords, t)`` receives xi broadcastable against the cell
    coordinates (a tuple of ``d`` arrays). Derivatives not supplied are taken by
    centred differences.
    """

    __test__ = False  # not a pytest class

    def __init__(self, phi, dphi_dxi=None, grad_x=None, hess_x=None, step: float = 1e-4):
        self.phi = phi
        self._dxi = dphi_dxi
        self._grad = grad_x
        self._hess = hess_x
        self.h = step

    def __call__(self, xi, coords, t):
        return self.phi(xi, coords, t)

    def __add__(self, other: "TestFunction") -> "TestFunction":
        return TestFunction(lambda xi, c, t: self(xi, c, t) + other(xi, c, t),
                            lambda xi, c, t: self.dxi(xi, c, t) + other.dxi(xi, c, t),
                            lambda xi, c, t: [a + b for a, b in zip(self.grad_x(xi, c, t), other.grad_x(xi, c, t))],
                            lambda xi, c, t: [[a + b for a, b in zip(ra, rb)] for ra, rb in zip(self.hess_x(xi, c, t), other.hess_x(xi, c, t))])

    def scaled(self, a: float) -> "TestFunction":
        return TestFunction(lambda xi, c, t: a * self(xi, c, t),
                            lambda xi, c, t: a * self.dxi(xi, c, t),
                            lambda xi, c, t: [a * g for g in self.grad_x(xi, c, t)],
                            lambda xi, c, t: [[a * h for h in row] for row in self.hess_x(xi, c, t)])

    def dxi(self, xi, coords, t):
        if self._dxi is not None:
            return self._dxi(xi, coords, t)
        h = self.h
        return (self.phi(xi + h, coords, t) - self.phi(xi - h, coords, t)) / (2 * h)

    def _shift(self, coords, axis, delta):
        return tuple(c + delta if k == axis else c for k, c in enumerate(coords))

    def grad_x(self, xi, coords, t):
        if self._grad is not None:
            return self._grad(xi, coords, t)
        h = self.h
        return [(self.phi(xi, self._shift(coords, i, h), t) - self.phi(xi, self._shift(coords, i, -h), t)) / (2 * h)
                for i in range(len(coords))]

    def hess_x(self, xi, coords, t):
        if self._hess is not None:
            return self._hess(xi, coords, t)
        h = 10 * self.h
        d = len(coords)
        out = [[None] * d for _ in range(d)]
        for i in range(d):
            for j in range(d):
                pp = self.phi(xi, self._shift(self._shift(coords, i, h), j, h), t)
                pm = self.phi(xi, self._shift(self._shift(coords, i, h), j, -h), t)
                mp = self.phi(xi, self._shift(self._shift(coords, i, -h), j, h), t)
                mm = self.phi(xi, self._shift(self._shift(coords, i, -h), j, -h), t)
                out[i][j] = (pp - pm - mp + mm) / (4 * h * h)
        return out


@dataclass
class History:
    """States at every step of a run, with the data needed to replay it."""

    grid: TorusGrid
    states: np.ndarray  # (steps + 1, *grid.shape)
    dt: float
    seed: int
    substeps: int
    start_step: int = 0

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    def increments(self) -> np.ndarray:
        return NoisePath(self.seed, self.dt, self.substeps).increments(self.start_step, self.steps)


def record_history(u0: Field, model, noise_model, cfg: SolverConfig, t_end: float, seed: int, substeps: int = 1) -> History:
    traj = Trajectory.start(u0, seed, cfg, substeps)
    model = prepare_model(model)
    n = int(round(t_end / traj.dt))
    states = np.empty((n + 1,) + u0.grid.shape)
    states[0] = u0.values
    for k in range(n):
        step(traj, model, noise_model, cfg)
        states[k + 1] = traj.state.values
    return History(u0.grid, states, traj.dt, seed, substeps)


def weak_formulation_terms(history: History, model: FluxDiffusionModel, noise_model: NoiseModel, cfg: SolverConfig,
                           phi: TestFunction, xi: XiGrid) -> dict:
    """Every term of the tested kinetic equation, summed over the run.

    With ``<.,.>`` the pairing over ``(xi, x)`` and ``u~`` the state after the
    deterministic part of a step, the residual is

        time - transport - diffusion + measure - ito - martingale

    with ``time = -sum <chi^{n+1}, phi^{n+1} - phi^n> - <chi^0, phi^0> + <chi^N, phi^N>``,
    ``transport = sum dt <chi^n, F'.grad phi^n>``, ``diffusion = sum dt <chi^n, A:hess phi^n>``,
    ``measure = sum int phi_xi dm^n`` (discrete kinetic defect, xi-grid midpoints),
    ``ito = sum dt int 1/2 phi_xi(u~) sigma^2`` and
    ``martingale = sum int phi(u~) sigma dW + 1/2 phi_xi(u~) sigma^2 (dW^2 - dt)``.
    """
    if history is None or history.states.shape[0] < 2:
        raise ValueError("weak formulation needs a stored history of at least one step")
    grid = history.grid
    model = prepare_model(model)
    xi.check_covers(history.states)
    dt, dv, d = history.dt, grid.cell_volume, grid.dim
    coords = grid.coordinates()
    gl_coords = tuple(c[None] for c in coords)
    sigma = noise_model.sigma.values
    dws = history.increments()
    centers = xi.centers
    xi_coords = tuple(c[..., None] for c in coords)

    def pair(u, g):
        return float(pair_chi(u, g).sum() * dv)

    def phi_at(t):
        return lambda s: phi(s, gl_coords, t)

    terms = dict(time=0.0, transport=0.0, diffusion=0.0, measure=0.0, ito=0.0, martingale=0.0)
    times = (history.start_step + np.arange(history.states.shape[0])) * dt
    states = history.states
    for n in range(history.steps):
        u, u_next, t = states[n], states[n + 1], times[n]
        terms["time"] -= pair(u_next, lambda s: phi(s, gl_coords, times[n + 1]) - phi(s, gl_coords, t))

        def transport_integrand(s):
            speeds = model.flux_jacobian(s)
            grads = phi.grad_x(s, gl_coords, t)
            return sum(speeds[i] * grads[i] for i in range(d))

        terms["transport"] += dt * pair(u, transport_integrand)
        if model.has_diffusion:
            def diffusion_integrand(s):
                a = model.diffusion(s)
                hess = phi.hess_x(s, gl_coords, t)
                return sum(a[i, j] * hess[i][j] for i in range(d) for j in range(d))

            terms["diffusion"] += dt * pair(u, diffusion_integrand)

        u_det = u + dt * rhs(u, model, grid, cfg.flux_scheme, cfg.max_speed_estimate)
        m = kinetic_defect_measure(u, u_det, model, grid, cfg, dt, centers)
        terms["measure"] += float((phi.dxi(centers, xi_coords, t) * m).sum() * xi.spacing * dv)

        dw = dws[n]
        phi_xi_det = phi.dxi(u_det, coords, t)
        terms["ito"] += float((0.5 * phi_xi_det * sigma**2).sum() * dv * dt)
        terms["martingale"] += float((phi(u_det, coords, t) * sigma * dw + 0.5 * phi_xi_det * sigma**2 * (dw * dw - dt)).sum() * dv)

    terms["time"] -= pair(states[0], phi_at(times[0]))
    terms["time"] += pair(states[-1], phi_at(times[-1]))
    terms["residual"] = (terms["time"] - terms["transport"] - terms["diffusion"] + terms["measure"]
                         - terms["ito"] - terms["martingale"])
    return terms


def weak_formulation_residual(history: History, model, noise_model, cfg, phi: TestFunction, xi: XiGrid) -> float:
    """Signed residual of the discrete weak kinetic formulation (see :func:`weak_formulation_terms`)."""
    return weak_formulation_terms(history, model, noise_model, cfg, phi, xi)["residual"]
