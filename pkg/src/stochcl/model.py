"""Flux/diffusion models and the two non-degeneracy integrals.

A :class:`FluxDiffusionModel` bundles the flux ``F: R -> R^d``, the diffusion
matrix ``A: R -> Sym_+(d)`` and their derivatives, all vectorised over numpy
arrays of states. Flux values come back with a leading axis of length ``d``;
diffusion values with two leading axes ``(d, d)``.

The solver additionally needs the Engquist-Osher splitting
``F_plus(u) = int_0^u max(F', 0)``, ``F_minus(u) = int_0^u min(F', 0)`` and
the Kirchhoff primitive ``beta(u) = int_0^u A``. Catalog models supply these in
closed form; custom models get tabulated versions (see :func:`tabulate_primitives`).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

Array = np.ndarray
Primitive = Callable[[Array], Array]


@dataclass(frozen=True)
class FluxDiffusionModel:
    name: str
    dim: int
    flux: Primitive
    flux_jacobian: Primitive
    flux_hessian: Primitive
    diffusion: Primitive
    diffusion_derivative: Primitive
    flux_plus: Optional[Primitive] = None
    flux_minus: Optional[Primitive] = None
    kirchhoff: Optional[Primitive] = None
    # index pairs (i, j), i <= j, of entries of A that are not identically zero
    diffusion_support: tuple = ()
    # C_F, C_A in |F''(xi)| <= C_F (|xi| + 1), |A'(xi)| <= C_A (|xi| + 1)
    growth_bounds: tuple = (1.0, 1.0)
    description: str = ""

    @property
    def has_diffusion(self) -> bool:
        return bool(self.diffusion_support)

    @property
    def diagonal_diffusion(self) -> bool:
        return all(i == j for i, j in self.diffusion_support)

    def max_speed(self, u: Array) -> float:
        """``max_x sum_i |F_i'(u(x))|`` on the given states."""
        return float(np.abs(self.flux_jacobian(u)).sum(axis=0).max(initial=0.0))

    def max_diffusion(self, u: Array) -> float:
        """``max_x sum_i A_ii(u(x))``; zero for purely hyperbolic models."""
        if not self.has_diffusion:
            return 0.0
        a = self.diffusion(u)
        return float(sum(a[i, i] for i in range(self.dim)).max(initial=0.0))

    def check_derivatives(self, xi: Array, rtol: float = 1e-6, step: float = 1e-5) -> dict:
        """Compare analytic derivatives with centred differences on ``xi``.

        Returns a mapping name -> max relative error. Errors are scaled by
        ``max(1, |reference|)`` so that vanishing derivatives are compared
        absolutely.
        """
        xi = np.asarray(xi, dtype=float)

        def centred(fn):
            return (fn(xi + step) - fn(xi - step)) / (2 * step)

        pairs = {
            "flux_jacobian": (self.flux_jacobian(xi), centred(self.flux)),
            "flux_hessian": (self.flux_hessian(xi), centred(self.flux_jacobian)),
            "diffusion_derivative": (self.diffusion_derivative(xi), centred(self.diffusion)),
        }
        errors = {}
        for name, (exact, approx) in pairs.items():
            scale = np.maximum(1.0, np.abs(exact))
            errors[name] = float(np.max(np.abs(exact - approx) / scale))
        return errors

    def check_psd(self, xi: Array, tol: float = 1e-12) -> bool:
        a = np.moveaxis(self.diffusion(np.asarray(xi, dtype=float)), (0, 1), (-2, -1))
        if not np.allclose(a, np.swapaxes(a, -1, -2)):
            return False
        return bool(np.linalg.eigvalsh(a).min() >= -tol)

    def check_growth(self, xi: Array, uniqueness: bool = False) -> bool:
        """Check the polynomial growth conditions on ``F''`` and ``A'``.

        With ``uniqueness=True`` the stronger boundedness ``|F''|, |A'| <= C``
        is checked instead.
        """
        xi = np.asarray(xi, dtype=float)
        cf, ca = self.growth_bounds
        bound = np.ones_like(xi) if uniqueness else np.abs(xi) + 1.0
        f2 = np.sqrt((self.flux_hessian(xi) ** 2).sum(axis=0))
        a1 = np.sqrt((self.diffusion_derivative(xi) ** 2).sum(axis=(0, 1)))
        return bool(np.all(f2 <= cf * bound + 1e-12) and np.all(a1 <= ca * bound + 1e-12))


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------


def _stack(*arrays):
    return np.stack(np.broadcast_arrays(*arrays))


def _zeros_matrix(dim):
    def fn(u):
        u = np.asarray(u, dtype=float)
        return np.zeros((dim, dim) + u.shape)

    return fn


def _burgers(dim: int) -> FluxDiffusionModel:
    def flux(u):
        return _stack(*([0.5 * u * u] * dim))

    def jac(u):
        return _stack(*([np.asarray(u, dtype=float)] * dim))

    def hess(u):
        return _stack(*([np.ones_like(u, dtype=float)] * dim))

    def plus(u):
        p = np.maximum(u, 0.0)
        return _stack(*([0.5 * p * p] * dim))

    def minus(u):
        m = np.minimum(u, 0.0)
        return _stack(*([0.5 * m * m] * dim))

    name = "burgers" if dim == 1 else "burgers2d"
    return FluxDiffusionModel(
        name=name,
        dim=dim,
        flux=flux,
        flux_jacobian=jac,
        flux_hessian=hess,
        diffusion=_zeros_matrix(dim),
        diffusion_derivative=_zeros_matrix(dim),
        flux_plus=plus,
        flux_minus=minus,
        kirchhoff=_zeros_matrix(dim),
        growth_bounds=(math.sqrt(dim), 0.0),
        description="F(u) = u^2/2 in every direction, A = 0",
    )


def _linear_advection(speed: float = 1.0) -> FluxDiffusionModel:
    c = float(speed)

    def flux(u):
        return (c * np.asarray(u, dtype=float))[None]

    def jac(u):
        return np.full((1,) + np.shape(u), c)

    def hess(u):
        return np.zeros((1,) + np.shape(u))

    return FluxDiffusionModel(
        name="linear_advection",
        dim=1,
        flux=flux,
        flux_jacobian=jac,
        flux_hessian=hess,
        diffusion=_zeros_matrix(1),
        diffusion_derivative=_zeros_matrix(1),
        flux_plus=lambda u: (max(c, 0.0) * np.asarray(u, dtype=float))[None],
        flux_minus=lambda u: (min(c, 0.0) * np.asarray(u, dtype=float))[None],
        kirchhoff=_zeros_matrix(1),
        growth_bounds=(0.0, 0.0),
        description=f"F(u) = {c} u, A = 0 (degenerate: constant characteristic speed)",
    )


def _pure_diffusion(name, dim, a, da, beta, bounds, description) -> FluxDiffusionModel:
    """Models with F = 0 and isotropic diagonal diffusion a(u) I."""

    def zero_flux(u):
        return np.zeros((dim,) + np.shape(u))

    def diag(fn):
        def matrix(u):
            u = np.asarray(u, dtype=float)
            out = np.zeros((dim, dim) + u.shape)
            v = fn(u)
            for i in range(dim):
                out[i, i] = v
            return out

        return matrix

    return FluxDiffusionModel(
        name=name,
        dim=dim,
        flux=zero_flux,
        flux_jacobian=zero_flux,
        flux_hessian=zero_flux,
        diffusion=diag(a),
        diffusion_derivative=diag(da),
        flux_plus=zero_flux,
        flux_minus=zero_flux,
        kirchhoff=diag(beta),
        diffusion_support=tuple((i, i) for i in range(dim)),
        growth_bounds=bounds,
        description=description,
    )


def _anisotropic(cutoff: float = 2.0) -> FluxDiffusionModel:
    """2-d Burgers-type flux with diffusion acting on the first axis only."""
    r = float(cutoff)
    base = _burgers(2)

    def a(u):
        u = np.asarray(u, dtype=float)
        out = np.zeros((2, 2) + u.shape)
        out[0, 0] = (r * np.tanh(u / r)) ** 2
        return out

    def da(u):
        u = np.asarray(u, dtype=float)
        out = np.zeros((2, 2) + u.shape)
        t = np.tanh(u / r)
        out[0, 0] = 2.0 * r * t * (1.0 - t * t)
        return out

    def beta(u):
        u = np.asarray(u, dtype=float)
        out = np.zeros((2, 2) + u.shape)
        out[0, 0] = r * r * (u - r * np.tanh(u / r))
        return out

    return replace(
        base,
        name="anisotropic",
        diffusion=a,
        diffusion_derivative=da,
        kirchhoff=beta,
        diffusion_support=((0, 0),),
        growth_bounds=(math.sqrt(2.0), 1.0),
        description=f"F(u) = (u^2/2, u^2/2), A(u) = diag(c(u)^2, 0), c(u) = {r} tanh(u/{r})",
    )


def builtin_models() -> dict[str, FluxDiffusionModel]:
    """Catalog of built-in models keyed by name."""
    models = [
        _burgers(1),
        _burgers(2),
        _anisotropic(),
        _linear_advection(1.0),
        _pure_diffusion(
            "porous_medium",
            1,
            np.abs,
            np.sign,
            lambda u: 0.5 * u * np.abs(u),
            (0.0, 1.0),
            "F = 0, A(u) = |u|",
        ),
        _pure_diffusion(
            "porous_medium2d",
            2,
            np.abs,
            np.sign,
            lambda u: 0.5 * u * np.abs(u),
            (0.0, math.sqrt(2.0)),
            "F = 0, A(u) = |u| I",
        ),
        _pure_diffusion(
            "heat",
            1,
            np.ones_like,
            np.zeros_like,
            lambda u: np.asarray(u, dtype=float),
            (0.0, 0.0),
            "F = 0, A = 1",
        ),
    ]
    zero = _pure_diffusion("zero", 1, np.zeros_like, np.zeros_like, np.zeros_like, (0.0, 0.0), "F = 0, A = 0")
    models.append(replace(zero, diffusion_support=()))
    return {m.name: m for m in models}


def get_model(name: str) -> FluxDiffusionModel:
    catalog = builtin_models()
    if name not in catalog:
        raise KeyError(f"unknown model {name!r}; valid keys: {sorted(catalog)}")
    return catalog[name]


def polynomial_model(flux_coeffs: Sequence[Sequence[float]], diffusion_coeffs: Sequence[Sequence[float]] = (),
                     name: str = "inline") -> FluxDiffusionModel:
    """Model with polynomial flux components and diagonal polynomial diffusion.

    ``flux_coeffs[i]`` holds the ascending coefficients of ``F_i``;
    ``diffusion_coeffs[i]`` those of ``A_ii`` (missing axes have no diffusion).
    The EO splitting is tabulated; the Kirchhoff primitive is exact.
    """
    from numpy.polynomial import Polynomial

    dim = len(flux_coeffs)
    if dim not in (1, 2):
        raise ValueError("inline models need one or two flux components")
    if len(diffusion_coeffs) > dim:
        raise ValueError("more diffusion entries than axes")
    flux = [Polynomial(c) for c in flux_coeffs]
    diff = [Polynomial(c) for c in diffusion_coeffs] + [Polynomial([0.0])] * (dim - len(diffusion_coeffs))
    support = tuple((i, i) for i, p in enumerate(diff) if np.any(p.coef != 0))

    def vector(polys, order):
        return lambda u: np.stack([p.deriv(order)(np.asarray(u, dtype=float)) if order else p(np.asarray(u, dtype=float))
                                   for p in polys])

    def diagonal(polys):
        def fn(u):
            u = np.asarray(u, dtype=float)
            out = np.zeros((dim, dim) + u.shape)
            for i, p in enumerate(polys):
                out[i, i] = p(u)
            return out

        return fn

    model = FluxDiffusionModel(
        name=name,
        dim=dim,
        flux=vector(flux, 0),
        flux_jacobian=vector(flux, 1),
        flux_hessian=vector(flux, 2),
        diffusion=diagonal(diff),
        diffusion_derivative=diagonal([p.deriv() for p in diff]),
        kirchhoff=diagonal([p.integ(lbnd=0.0) for p in diff]),
        diffusion_support=support,
        growth_bounds=(float("inf"), float("inf")),
        description=f"polynomial flux {[list(c) for c in flux_coeffs]}, diffusion {[list(c) for c in diffusion_coeffs]}",
    )
    return tabulate_primitives(model)


def tabulate_primitives(
    model: FluxDiffusionModel, u_range: tuple[float, float] = (-20.0, 20.0), points: int = 40001
) -> FluxDiffusionModel:
    """Fill in missing EO splitting / Kirchhoff primitives by tabulation.

    The integrands are integrated with the cumulative trapezoid rule on a
    uniform table and looked up by linear interpolation, extended linearly
    beyond the table. Interpolating a monotone table keeps ``F_plus``
    nondecreasing and ``F_minus`` nonincreasing, so the EO flux stays monotone.
    """
    lo, hi = u_range
    table = np.linspace(lo, hi, points)
    zero_index = int(np.argmin(np.abs(table)))
    table[zero_index] = 0.0

    def primitive(values):
        # values shape (..., points) -> callable returning (..., *u.shape)
        cum = np.concatenate(
            [np.zeros(values.shape[:-1] + (1,)), np.cumsum(0.5 * (values[..., 1:] + values[..., :-1]) * np.diff(table), axis=-1)],
            axis=-1,
        )
        cum = cum - cum[..., zero_index : zero_index + 1]
        slope_lo = values[..., 0]
        slope_hi = values[..., -1]
        lead = values.shape[:-1]

        def fn(u):
            u = np.asarray(u, dtype=float)
            out = np.empty(lead + u.shape)
            for idx in np.ndindex(*lead):
                v = np.interp(u, table, cum[idx])
                v = np.where(u < lo, cum[idx][0] + slope_lo[idx] * (u - lo), v)
                v = np.where(u > hi, cum[idx][-1] + slope_hi[idx] * (u - hi), v)
                out[idx] = v
            return out

        return fn

    speeds = model.flux_jacobian(table)
    updates = {}
    if model.flux_plus is None:
        updates["flux_plus"] = primitive(np.maximum(speeds, 0.0))
    if model.flux_minus is None:
        updates["flux_minus"] = primitive(np.minimum(speeds, 0.0))
    if model.kirchhoff is None:
        updates["kirchhoff"] = primitive(model.diffusion(table))
    return replace(model, **updates) if updates else model


# ---------------------------------------------------------------------------
# non-degeneracy integrals
# ---------------------------------------------------------------------------


def default_khat_grid(dim: int, angles: int = 64) -> np.ndarray:
    """Unit directions: ``{+1, -1}`` in 1-d, ``angles`` equispaced angles in 2-d."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    theta = 2.0 * np.pi * np.arange(angles) / angles
    return np.stack([np.cos(theta), np.sin(theta)], axis=1)


def _midpoints(window, cells):
    a, b = map(float, window)
    if not b > a:
        raise ValueError(f"empty xi window {window}")
    h = (b - a) / cells
    return a + h * (np.arange(cells) + 0.5), h


def _projected(model, xi, khat_grid):
    """Per direction: speeds ``F'(xi).k`` and symbols ``A(xi):k(x)k``."""
    jac = model.flux_jacobian(xi)  # (d, M)
    diff = model.diffusion(xi)  # (d, d, M)
    speeds = np.einsum("dm,kd->km", jac, khat_grid)
    symbols = np.einsum("ijm,ki,kj->km", diff, khat_grid, khat_grid)
    return speeds, symbols


@dataclass
class EtaResult:
    value: float
    tau: float
    khat: np.ndarray
    at_grid_boundary: bool


def eta_sup(
    model: FluxDiffusionModel,
    lam: float,
    beta: float,
    xi_window=(-50.0, 50.0),
    tau_grid: Optional[Sequence[float]] = None,
    khat_grid: Optional[np.ndarray] = None,
    quadrature_cells: int = 65536,
    refine: bool = True,
) -> EtaResult:
    """Nonlinearity-diffusivity integral with its maximising ``(tau, khat)``."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if not 1.0 < beta < 2.0:
        raise ValueError(f"beta must lie in (1, 2), got {beta}")
    if quadrature_cells < 256:
        raise ValueError("quadrature_cells must be >= 256")
    xi, h = _midpoints(xi_window, quadrature_cells)
    khat_grid = default_khat_grid(model.dim) if khat_grid is None else np.atleast_2d(np.asarray(khat_grid, float))
    if khat_grid.size == 0:
        raise ValueError("empty khat grid")
    speeds, symbols = _projected(model, xi, khat_grid)
    if tau_grid is None:
        vmax = float(np.abs(speeds).max())
        tau_grid = np.linspace(-vmax - 1.0, vmax + 1.0, 2001)
    tau_grid = np.sort(np.asarray(tau_grid, dtype=float))
    if tau_grid.size == 0:
        raise ValueError("empty tau grid")
    lam_beta = lam**beta

    def integral(speed, sym, taus):
        taus = np.atleast_1d(taus)
        out = np.empty(taus.size)
        denom_base = (sym + lam) ** 2
        numer = lam * (sym + lam)
        for start in range(0, taus.size, 32):
            t = taus[start : start + 32, None]
            out[start : start + 32] = (numer / (denom_base + lam_beta * (speed + t) ** 2)).sum(axis=1) * h
        return out

    best = EtaResult(-np.inf, 0.0, khat_grid[0], False)
    for kidx in range(khat_grid.shape[0]):
        values = integral(speeds[kidx], symbols[kidx], tau_grid)
        i = int(np.argmax(values))
        value, tau = float(values[i]), float(tau_grid[i])
        if refine and tau_grid.size > 2:
            lo = tau_grid[max(i - 1, 0)]
            hi = tau_grid[min(i + 1, tau_grid.size - 1)]
            res = optimize.minimize_scalar(
                lambda t: -integral(speeds[kidx], symbols[kidx], t)[0],
                bounds=(lo, hi),
                method="bounded",
                options={"xatol": 1e-10 * max(1.0, abs(hi - lo))},
            )
            if -res.fun > value:
                value, tau = float(-res.fun), float(res.x)
        if value > best.value:
            best = EtaResult(value, tau, khat_grid[kidx], i in (0, tau_grid.size - 1))
    return best


def eta(model, lam, beta, xi_window=(-50.0, 50.0), tau_grid=None, khat_grid=None, quadrature_cells=65536) -> float:
    """Sup over ``(tau, khat)`` of the midpoint quadrature of

    ``lam (a + lam) / ((a + lam)^2 + lam^beta |F'(xi).khat + tau|^2)``,
    ``a = A(xi) : khat (x) khat``, over ``xi_window``.
    """
    return eta_sup(model, lam, beta, xi_window, tau_grid, khat_grid, quadrature_cells).value


def eta_truncation_sensitivity(model, lam, beta, xi_window=(-50.0, 50.0), **kwargs) -> float:
    """Relative change of ``eta`` when the xi window is doubled about its centre."""
    a, b = xi_window
    c, r = 0.5 * (a + b), b - a
    cells = kwargs.pop("quadrature_cells", 65536)
    base = eta(model, lam, beta, xi_window, quadrature_cells=cells, **kwargs)
    wide = eta(model, lam, beta, (c - r, c + r), quadrature_cells=2 * cells, **kwargs)
    return abs(wide - base) / max(abs(base), 1e-300)


def _window_counts(sorted_speeds, widths):
    """Max number of sorted speeds inside any closed interval of each width."""
    s = sorted_speeds
    out = np.empty(widths.size, dtype=np.int64)
    for i, w in enumerate(widths):
        upper = np.searchsorted(s, s + w * (1 + 1e-14) + 1e-300, side="right")
        out[i] = int((upper - np.arange(s.size)).max())
    return out


def delta_nondegeneracy(
    model: FluxDiffusionModel,
    eps: float,
    xi_window=(-1.0, 1.0),
    tau_grid: Optional[Sequence[float]] = None,
    khat_grid: Optional[np.ndarray] = None,
    t_max: float = 40.0,
    quadrature_cells: int = 16384,
    time_nodes: int = 4000,
) -> float:
    """``int_0^t_max e^{-t} sup_{tau,khat} |{xi : |F'(xi).khat + tau| <= eps t}| dt``.

    The sublevel-set measure is the number of xi cells whose midpoint speed
    satisfies the inequality times the cell width. With ``tau_grid=None`` the
    sup over all real ``tau`` is taken exactly (largest count of sorted speeds
    in a window of width ``2 eps t``); otherwise only the given shifts are used.
    The time integral is done by the midpoint rule in ``s = 1 - e^{-t}``.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if t_max < 20:
        raise ValueError("t_max must be >= 20")
    xi, h = _midpoints(xi_window, quadrature_cells)
    khat_grid = default_khat_grid(model.dim) if khat_grid is None else np.atleast_2d(np.asarray(khat_grid, float))
    speeds, _ = _projected(model, xi, khat_grid)

    s_max = -math.expm1(-t_max)
    s = (np.arange(time_nodes) + 0.5) * (s_max / time_nodes)
    t = -np.log1p(-s)
    measure = np.zeros(time_nodes)
    for kidx in range(khat_grid.shape[0]):
        if tau_grid is None:
            counts = _window_counts(np.sort(speeds[kidx]), 2.0 * eps * t)
        else:
            taus = np.asarray(tau_grid, dtype=float)
            inside = np.abs(speeds[kidx][None, :, None] + taus[None, None, :]) <= eps * t[:, None, None]
            counts = inside.sum(axis=1).max(axis=1)
        measure = np.maximum(measure, counts * h)
    return float(measure.sum() * (s_max / time_nodes))


# ---------------------------------------------------------------------------
# decay exponent fits
# ---------------------------------------------------------------------------


@dataclass
class DecayReport:
    samples: list
    values: list
    exponent: float
    residual: float

    def __post_init__(self):
        if len(self.samples) != len(self.values) or len(self.samples) < 4:
            raise ValueError("need at least 4 (sample, value) pairs of equal length")
        if np.any(np.diff(self.samples) >= 0):
            raise ValueError("samples must be strictly decreasing")

    def to_dict(self) -> dict:
        return {
            "samples": [float(x) for x in self.samples],
            "values": [float(x) for x in self.values],
            "exponent": float(self.exponent),
            "residual": float(self.residual),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "DecayReport":
        return cls(list(data["samples"]), list(data["values"]), data["exponent"], data["residual"])


def fit_decay_exponent(samples, values) -> DecayReport:
    """Least-squares slope of ``log(values)`` against ``log(samples)``."""
    samples = np.asarray(samples, dtype=float)
    values = np.asarray(values, dtype=float)
    if samples.size != values.size or samples.size < 4:
        raise ValueError("need at least 4 (sample, value) pairs")
    if np.any(samples <= 0) or np.any(values <= 0):
        raise ValueError("samples and values must be positive")
    if np.log10(samples.max() / samples.min()) < 2.0 - 1e-12:
        raise ValueError("samples must span at least two decades")
    order = np.argsort(samples)[::-1]
    samples, values = samples[order], values[order]
    x, y = np.log(samples), np.log(values)
    design = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - (slope * x + intercept)
    return DecayReport(list(samples), list(values), float(slope), float(np.sqrt(np.mean(resid**2))))


def eta_decay(model, lambdas, beta, **kwargs) -> DecayReport:
    """Evaluate ``eta`` on a lambda grid and fit its decay exponent."""
    lambdas = np.sort(np.asarray(lambdas, dtype=float))[::-1]
    values = [eta(model, lam, beta, **kwargs) for lam in lambdas]
    return fit_decay_exponent(lambdas, values)


def delta_decay(model, epsilons, **kwargs) -> DecayReport:
    epsilons = np.sort(np.asarray(epsilons, dtype=float))[::-1]
    values = [delta_nondegeneracy(model, e, **kwargs) for e in epsilons]
    return fit_decay_exponent(epsilons, values)
