"""Periodic grids, cell-average fields and their Fourier view.

Cell ``j`` of a :class:`TorusGrid` is centred at ``x_j = j * spacing``; all
functions sampled onto a grid use those centres. Spectral coefficients use the
normalisation ``c_k = N^{-d} * sum_j u_j exp(-i k.x_j)`` so that ``c_0`` is the
spatial mean and ``sum |u_j|^2 dx^d = |T^d| * sum |c_k|^2`` (Parseval).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic discretisation of the torus of dimension 1 or 2."""

    dim: int
    cells_per_axis: int
    period: float = 1.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        n = self.cells_per_axis
        if n < 4 or n & (n - 1):
            raise ValueError(f"cells_per_axis must be a power of two >= 4, got {n}")
        if not self.period > 0:
            raise ValueError(f"period must be positive, got {self.period}")

    @property
    def spacing(self) -> float:
        return self.period / self.cells_per_axis

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.cells_per_axis,) * self.dim

    @property
    def total_cells(self) -> int:
        return self.cells_per_axis**self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def volume(self) -> float:
        return self.period**self.dim

    def coordinates(self) -> tuple[np.ndarray, ...]:
        """Cell-centre coordinates, one array of ``shape`` per axis."""
        x = np.arange(self.cells_per_axis) * self.spacing
        if self.dim == 1:
            return (x,)
        return tuple(np.meshgrid(x, x, indexing="ij"))

    def mode_numbers(self) -> tuple[np.ndarray, ...]:
        """Integer frequency multipliers ``n`` per axis (``k = 2 pi n / P``)."""
        n = np.fft.fftfreq(self.cells_per_axis, d=1.0 / self.cells_per_axis)
        n = np.rint(n).astype(np.int64)
        if self.dim == 1:
            return (n,)
        return tuple(np.meshgrid(n, n, indexing="ij"))

    def wavevectors(self) -> tuple[np.ndarray, ...]:
        scale = 2.0 * np.pi / self.period
        return tuple(scale * n for n in self.mode_numbers())

    def wavenumber_magnitude(self) -> np.ndarray:
        return np.sqrt(sum(k**2 for k in self.wavevectors()))

    def sample(self, fn: Callable[..., np.ndarray]) -> "Field":
        """Evaluate ``fn(*coords)`` at the cell centres."""
        values = np.broadcast_to(np.asarray(fn(*self.coordinates()), dtype=float), self.shape)
        return Field(self, np.array(values))

    def zeros(self) -> "Field":
        return Field(self, np.zeros(self.shape))

    def constant(self, c: float) -> "Field":
        return Field(self, np.full(self.shape, float(c)))


@dataclass
class Field:
    """Grid-sampled real scalar state (cell-average semantics)."""

    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.size != self.grid.total_cells:
            raise ValueError(
                f"field has {values.size} values, grid needs {self.grid.total_cells}"
            )
        values = values.reshape(self.grid.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        self.values = values

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy())

    def __add__(self, other: "Field") -> "Field":
        return Field(self.grid, self.values + _values(other))

    def __sub__(self, other: "Field") -> "Field":
        return Field(self.grid, self.values - _values(other))

    def __mul__(self, scalar: float) -> "Field":
        return Field(self.grid, self.values * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> "Field":
        return Field(self.grid, -self.values)

    def to_bytes(self) -> bytes:
        """Little-endian float64 payload in row-major cell order."""
        return np.ascontiguousarray(self.values, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, grid: TorusGrid, payload: bytes) -> "Field":
        values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        return cls(grid, values.reshape(grid.shape))


def _values(f) -> np.ndarray:
    return f.values if isinstance(f, Field) else np.asarray(f, dtype=float)


@dataclass
class SpectralField:
    """Fourier coefficients of a field, indexed like ``np.fft.fftn`` output."""

    grid: TorusGrid
    coefficients: np.ndarray = field(repr=False)

    def mode_numbers(self) -> tuple[np.ndarray, ...]:
        return self.grid.mode_numbers()

    def wavevectors(self) -> tuple[np.ndarray, ...]:
        return self.grid.wavevectors()


def l1_norm(f) -> float:
    """``dx^d * sum |u|``."""
    return float(np.abs(f.values).sum() * f.grid.cell_volume)


def l2_norm(f) -> float:
    return float(np.sqrt((f.values**2).sum() * f.grid.cell_volume))


def mean(f) -> float:
    """Spatial mean over the torus."""
    return float(f.values.sum() * f.grid.cell_volume / f.grid.volume)


def to_spectral(f: Field) -> SpectralField:
    grid = f.grid
    return SpectralField(grid, np.fft.fftn(f.values) / grid.total_cells)


def from_spectral(s: SpectralField) -> Field:
    values = np.fft.ifftn(s.coefficients * s.grid.total_cells).real
    return Field(s.grid, values)


def sobolev_seminorm(f: Field, s: float) -> float:
    """Homogeneous ``H^s`` seminorm ``(|T| sum_{k != 0} |k|^{2s} |c_k|^2)^{1/2}``."""
    if s < 0:
        raise ValueError("s must be nonnegative")
    grid = f.grid
    c = to_spectral(f).coefficients
    kmag = grid.wavenumber_magnitude()
    nonzero = kmag > 0
    weights = np.zeros_like(kmag)
    weights[nonzero] = kmag[nonzero] ** (2.0 * s)
    return float(np.sqrt(grid.volume * np.sum(weights * np.abs(c) ** 2)))


def bessel_potential_norm(f: Field, s: float, q: float = 2.0) -> float:
    """``W^{s,q}`` norm realised as ``||(I - Laplacian)^{s/2} u||_{L^q}``."""
    if q < 1:
        raise ValueError("q must be >= 1")
    grid = f.grid
    symbol = (1.0 + grid.wavenumber_magnitude() ** 2) ** (0.5 * s)
    smoothed = np.fft.ifftn(np.fft.fftn(f.values) * symbol).real
    if np.isinf(q):
        return float(np.abs(smoothed).max())
    return float((np.sum(np.abs(smoothed) ** q) * grid.cell_volume) ** (1.0 / q))


def spectral_gradient(values: np.ndarray, grid: TorusGrid) -> list[np.ndarray]:
    """Spectral derivative of grid values along each axis."""
    c = np.fft.fftn(values)
    grads = []
    for axis, k in enumerate(grid.wavevectors()):
        dk = 1j * k * c
        if grid.cells_per_axis % 2 == 0:
            # drop the unpaired Nyquist mode so real data stays real
            nyq = np.abs(grid.mode_numbers()[axis]) == grid.cells_per_axis // 2
            dk = np.where(nyq, 0.0, dk)
        grads.append(np.fft.ifftn(dk).real)
    return grads
