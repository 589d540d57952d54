"""Regularised kinetic semigroup in Fourier space and the velocity-averaging check.

For a wavevector ``k`` the kinetic operator ``F'(xi).grad - A(xi):grad grad``
plus the regulariser ``gamma(-Lap)^alpha + theta`` has the scalar symbol

    z(xi, k) = i F'(xi).k + A(xi):k k + gamma |k|^{2 alpha} + theta,

so ``S(t)`` multiplies each xi-slice of ``chi^hat(xi, k)`` by ``exp(-z t)``. The
xi-average ``u0^hat(k, t) = int exp(-z t) chi^hat dxi`` is a finite sum of
exponentials, hence ``int_0^T |u0^hat|^2 dt`` is evaluated in closed form:

    sum_{j,l} a_j conj(a_l) (1 - exp(-(z_j + conj z_l) T)) / (z_j + conj z_l).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .grid import Field, TorusGrid, mean
from .kinetic import XiGrid, chi_values
from .model import FluxDiffusionModel


@dataclass(frozen=True)
class SemigroupParams:
    """Regulariser ``gamma (-Lap)^alpha + theta`` tied to a decay rate ``beta``.

    ``gamma = theta = 0`` is accepted as the unregularised limit.
    """

    gamma: float
    theta: float
    beta: float
    alpha: Optional[float] = None

    def __post_init__(self):
        if not 1.0 < self.beta < 2.0:
            raise ValueError(f"beta must lie in (1, 2), got {self.beta}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", (self.beta - 1.0) / self.beta)
        if not 0.0 < self.alpha < 0.5:
            raise ValueError(f"alpha must lie in (0, 1/2), got {self.alpha}")
        if abs(self.alpha * self.beta - self.beta + 1.0) >= 1e-12:
            raise ValueError("alpha must equal (beta - 1) / beta")
        if self.gamma < 0 or self.theta < 0:
            raise ValueError("gamma and theta must be nonnegative")

    def omega(self, kmag):
        """``gamma |k|^{2 alpha - 1} + theta / |k|`` for ``|k| > 0``."""
        kmag = np.asarray(kmag, dtype=float)
        if np.any(kmag <= 0):
            raise ValueError("omega is defined for k != 0 only")
        return self.gamma * kmag ** (2.0 * self.alpha - 1.0) + self.theta / kmag

    def damping(self, kmag):
        return self.gamma * np.asarray(kmag, dtype=float) ** (2.0 * self.alpha) + self.theta


def _xi_values(xi) -> np.ndarray:
    return xi.centers if isinstance(xi, XiGrid) else np.asarray(xi, dtype=float)


def symbol(params: SemigroupParams, model: FluxDiffusionModel, k, xi) -> np.ndarray:
    """``z(xi, k)`` for every xi value."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if k.size != model.dim:
        raise ValueError(f"wavevector {k} does not match model dimension {model.dim}")
    xv = _xi_values(xi)
    speeds = model.flux_jacobian(xv)
    transport = sum(speeds[i] * k[i] for i in range(model.dim))
    diffusion = np.zeros_like(xv)
    if model.has_diffusion:
        a = model.diffusion(xv)
        diffusion = sum(a[i, j] * k[i] * k[j] for i in range(model.dim) for j in range(model.dim))
    return 1j * transport + diffusion + params.damping(np.linalg.norm(k))


def semigroup_mode(params: SemigroupParams, model: FluxDiffusionModel, k, xi, t: float) -> np.ndarray:
    """Fourier multiplier ``exp(-z(xi, k) t)`` of ``S(t)`` per xi value."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return np.exp(-symbol(params, model, k, xi) * t)


def _decay_integral(w: np.ndarray, T: float) -> np.ndarray:
    """``int_0^T exp(-w t) dt`` for complex ``w`` with ``Re w >= 0``."""
    w = np.asarray(w, dtype=complex)
    if np.isinf(T):
        if np.any(w.real <= 0):
            raise ValueError("infinite horizon needs strictly positive damping")
        return 1.0 / w
    x = w * T
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    return T * np.where(small, 1.0 - 0.5 * x, -np.expm1(-safe) / safe)


def time_integral(a: np.ndarray, z: np.ndarray, T: float) -> float:
    """``int_0^T |sum_j a_j exp(-z_j t)|^2 dt`` in closed form.

    When ``Re z`` is constant and ``Im z`` affine along the index (transport
    linear in xi on a uniform grid, constant diffusion) the double sum only
    depends on ``j - l`` and is folded with an FFT autocorrelation.
    """
    a = np.asarray(a, dtype=complex)
    z = np.asarray(z, dtype=complex)
    keep = a != 0
    if not np.any(keep):
        return 0.0
    idx = np.nonzero(keep)[0]
    lo, hi = idx[0], idx[-1] + 1
    a, z = a[lo:hi], z[lo:hi]
    m = a.size
    scale = max(np.abs(z).max(), 1e-300)
    slope = (z[-1].imag - z[0].imag) / max(m - 1, 1)
    affine = (np.ptp(z.real) <= 1e-12 * scale
              and np.abs(z.imag - (z[0].imag + slope * np.arange(m))).max() <= 1e-12 * scale)
    if affine and m > 1:
        size = 2 * m
        spec = np.fft.fft(a, size)
        corr = np.fft.ifft(spec * np.conj(spec))  # corr[s] = sum_j a_j conj(a_{j-s})
        lags = np.arange(size)
        lags = np.where(lags < m, lags, lags - size)
        w = 2.0 * z[0].real + 1j * slope * lags
        return float(np.real(np.sum(corr * _decay_integral(w, T))))
    total = 0.0
    for start in range(0, m, 512):
        block = slice(start, start + 512)
        w = z[block, None] + np.conj(z)[None, :]
        total += np.real(np.sum(a[block, None] * np.conj(a)[None, :] * _decay_integral(w, T)))
    return float(total)


def chi_transform(u0: Field, xi: XiGrid, chunk: int = 256) -> np.ndarray:
    """``chi^hat(xi, k)`` with the grid's spectral normalisation; xi is the last axis."""
    grid = u0.grid
    centers = xi.centers
    out = np.empty(grid.shape + (centers.size,), dtype=complex)
    axes = tuple(range(grid.dim))
    for start in range(0, centers.size, chunk):
        sl = slice(start, start + chunk)
        out[..., sl] = np.fft.fftn(chi_values(u0.values, centers[sl]), axes=axes) / grid.total_cells
    return out


def half_modes(grid: TorusGrid) -> list[tuple[int, ...]]:
    """Nonzero, non-Nyquist modes with one representative per ``{n, -n}`` pair."""
    half = grid.cells_per_axis // 2
    if grid.dim == 1:
        return [(n,) for n in range(1, half)]
    modes = [(n1, n2) for n1 in range(0, half) for n2 in range(-half + 1, half)]
    return [m for m in modes if m[0] > 0 or (m[0] == 0 and m[1] > 0)]


@dataclass
class ModeTrace:
    n: tuple
    k: tuple
    samples: list = field(default_factory=list)  # (t, complex u0^hat)
    time_integral: float = 0.0
    weighted_energy: float = 0.0
    chi_energy: float = 0.0

    @property
    def kmag(self) -> float:
        return float(np.linalg.norm(self.k))


def _check_zero_mean(u0: Field):
    if abs(mean(u0)) > 1e-12 * max(1.0, float(np.abs(u0.values).max())):
        raise ValueError(f"initial datum must have zero mean, got {mean(u0)}")


def u0_term(u0: Field, params: SemigroupParams, model: FluxDiffusionModel, xi: XiGrid,
            t_grid: Optional[Sequence[float]] = None, T: float = 1.0, kappa: float = 0.0,
            modes: Optional[Sequence[tuple]] = None) -> dict:
    """Traces of ``u0^hat(k, t) = sum_xi exp(-z t) chi^hat(xi, k) dxi`` per mode.

    ``t_grid`` (default 256 uniform samples of ``[0, T]``) sets the stored
    samples; ``time_integral`` is the exact ``int_0^T |u0^hat|^2 dt`` and
    ``weighted_energy`` multiplies it by ``|k|^{1+kappa} omega_k^{1-kappa}``.
    The zero mode is included and vanishes identically.
    """
    _check_zero_mean(u0)
    grid = u0.grid
    xi.check_covers(u0)
    if t_grid is None:
        t_grid = np.linspace(0.0, T if np.isfinite(T) else 1.0, 256)
    t_grid = np.asarray(t_grid, dtype=float)
    ch = chi_transform(u0, xi)
    h = xi.spacing
    scale = 2.0 * np.pi / grid.period
    traces = {}
    zero = (0,) * grid.dim
    traces[zero] = ModeTrace(zero, (0.0,) * grid.dim, [(float(t), 0j) for t in t_grid])
    for n in (half_modes(grid) if modes is None else modes):
        k = tuple(scale * np.asarray(n, dtype=float))
        a = ch[tuple(np.asarray(n) % grid.cells_per_axis)] * h
        z = symbol(params, model, k, xi)
        samples = [(float(t), complex(np.sum(a * np.exp(-z * t)))) for t in t_grid] if t_grid.size else []
        trace = ModeTrace(tuple(int(v) for v in n), k, samples)
        trace.time_integral = time_integral(a, z, T)
        trace.chi_energy = float(np.sum(np.abs(a) ** 2) / h)
        kmag = trace.kmag
        trace.weighted_energy = kmag ** (1.0 + kappa) * float(params.omega(kmag)) ** (1.0 - kappa) * trace.time_integral
        traces[trace.n] = trace
    return traces


@dataclass
class ModeRatio:
    kmag: float
    weighted_energy: float
    chi_energy: float
    ratio: Optional[float]


@dataclass
class AveragingReport:
    """Per-mode ratios for a family of initial data and their summary."""

    kappa: float
    T: float
    params: dict
    modes: list  # per datum: list of ModeRatio
    family_max: list  # (kmag, max ratio over data) per mode

    @property
    def max_ratio(self) -> Optional[float]:
        vals = [r for _, r in self.family_max if r is not None]
        return max(vals) if vals else None

    @property
    def slope(self) -> Optional[float]:
        pts = [(k, r) for k, r in self.family_max if r is not None and r > 0]
        if len(pts) < 2:
            return None
        k, r = np.array(pts).T
        return float(np.polyfit(np.log(k), np.log(r), 1)[0])

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "T": self.T if np.isfinite(self.T) else "inf",
            "params": self.params,
            "max_ratio": self.max_ratio,
            "slope": self.slope,
            "modes": [[{"kmag": m.kmag, "weighted_energy": m.weighted_energy, "chi_energy": m.chi_energy,
                        "ratio": m.ratio} for m in datum] for datum in self.modes],
            "family_max": [{"kmag": k, "ratio": r} for k, r in self.family_max],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def verify_u0_estimate(u0s, params: SemigroupParams, model: FluxDiffusionModel, xi: Optional[XiGrid] = None,
                       T: float = 1.0, kappa: float = 0.0, xi_cells_per_axis_cell: int = 8) -> AveragingReport:
    """Ratio ``weighted_energy / int |chi^hat(xi, k, 0)|^2 dxi`` per mode and datum.

    ``u0s`` is one field or a family on one grid. Modes with vanishing kinetic
    energy have no ratio and are left out of the maxima. Without ``xi`` a
    window covering each datum with ``xi_cells_per_axis_cell * N`` cells is used,
    fine enough that ``|k| T dxi`` stays of order one up to the grid scale.
    """
    if isinstance(u0s, Field):
        u0s = [u0s]
    per_datum = []
    for u0 in u0s:
        grid = u0.grid
        window = xi if xi is not None else XiGrid.covering(u0, cells=max(64, xi_cells_per_axis_cell * grid.cells_per_axis))
        traces = u0_term(u0, params, model, window, t_grid=[], T=T, kappa=kappa)
        rows = []
        for n, tr in traces.items():
            if not any(n):
                continue
            ratio = tr.weighted_energy / tr.chi_energy if tr.chi_energy > 0 else None
            rows.append(ModeRatio(tr.kmag, tr.weighted_energy, tr.chi_energy, ratio))
        per_datum.append(rows)
    family = []
    if per_datum:
        for i, row in enumerate(per_datum[0]):
            vals = [d[i].ratio for d in per_datum if d[i].ratio is not None]
            family.append((row.kmag, max(vals) if vals else None))
    info = {"gamma": params.gamma, "theta": params.theta, "beta": params.beta, "alpha": params.alpha}
    return AveragingReport(kappa, T, info, per_datum, family)


def rough_random_field(grid: TorusGrid, seed: int, amplitude: float = 0.3, decay: float = 0.5) -> Field:
    """Zero-mean random Fourier series with coefficient size ``amplitude |n|^{-decay}``.

    In one dimension the coefficient of mode ``n`` depends only on ``(seed, n)``,
    so refining the grid adds modes without changing the coarse ones.
    """
    coords = grid.coordinates()
    half = grid.cells_per_axis // 2
    values = np.zeros(grid.shape)
    rng = np.random.default_rng(seed)
    if grid.dim == 1:
        coeffs = rng.standard_normal((half - 1, 2))
        for n in range(1, half):
            a, b = coeffs[n - 1]
            phase = 2.0 * np.pi * n * coords[0] / grid.period
            values += amplitude * n ** (-decay) * (a * np.cos(phase) + b * np.sin(phase))
    else:
        for n in half_modes(grid):
            a, b = rng.standard_normal(2)
            phase = 2.0 * np.pi * (n[0] * coords[0] + n[1] * coords[1]) / grid.period
            values += amplitude * np.hypot(*n) ** (-decay) * (a * np.cos(phase) + b * np.sin(phase))
    values -= values.mean()
    return Field(grid, values)
