"""Additive noise ``sigma(x) dW``: spatial amplitude, Wiener paths, small-noise events.

A single scalar Wiener process multiplies a zero-mean amplitude ``sigma``. Wiener
increments are counter based: fine-level draw ``f`` is the ``f % BLOCK``-th
standard normal of a Philox stream keyed by ``(seed, f // BLOCK)``, so any step
of any path can be regenerated from ``(seed, step_index)`` alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .grid import Field, TorusGrid

BLOCK = 4096
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class NoiseModel:
    sigma: Field
    mode_spec: tuple
    lipschitz_bound: float
    sup_norm: float

    @property
    def w1inf_factor(self) -> float:
        """``sup|sigma| + sup|grad sigma|`` on the grid: multiplies ``|W(t) - W(s)|``."""
        return self.sup_norm + self.lipschitz_bound

    @property
    def is_zero(self) -> bool:
        return not np.any(self.sigma.values)

    def l2_norm_sq(self) -> float:
        return float((self.sigma.values**2).sum() * self.sigma.grid.cell_volume)


def _normalise_mode(entry, dim):
    if len(entry) == 2:
        freq, amp = entry
        kind = "cos"
    elif len(entry) == 3:
        freq, amp, kind = entry
    else:
        raise ValueError(f"mode entry must be (frequency, amplitude[, 'cos'|'sin']), got {entry!r}")
    freq = tuple(int(n) for n in np.atleast_1d(freq))
    if len(freq) == 1 and dim == 2:
        freq = (freq[0], 0)
    if len(freq) != dim:
        raise ValueError(f"frequency {freq} does not match grid dimension {dim}")
    if all(n == 0 for n in freq):
        raise ValueError("zero-frequency mode would give sigma a nonzero mean")
    if kind not in ("cos", "sin"):
        raise ValueError(f"mode kind must be 'cos' or 'sin', got {kind!r}")
    return freq, float(amp), kind


def make_sigma(grid: TorusGrid, mode_spec: Sequence = ()) -> NoiseModel:
    """Build ``sigma = sum a cos(2 pi n.x / P)`` (or ``sin``) from integer modes."""
    modes = tuple(_normalise_mode(entry, grid.dim) for entry in mode_spec)
    coords = grid.coordinates()
    values = np.zeros(grid.shape)
    for freq, amp, kind in modes:
        phase = sum(2.0 * np.pi * n * x / grid.period for n, x in zip(freq, coords))
        values += amp * (np.cos(phase) if kind == "cos" else np.sin(phase))
    if modes:
        # discrete sums of nonzero modes vanish only up to roundoff
        values -= values.mean()
    lipschitz = float(np.sqrt(sum(g**2 for g in centred_gradient(values, grid))).max())
    sigma = Field(grid, values)
    return NoiseModel(sigma, modes, lipschitz, float(np.abs(values).max()))


def centred_gradient(values: np.ndarray, grid: TorusGrid) -> list[np.ndarray]:
    """Periodic centred differences along each axis."""
    h = grid.spacing
    return [(np.roll(values, -1, axis=i) - np.roll(values, 1, axis=i)) / (2.0 * h) for i in range(grid.dim)]


def _block_normals(seed: int, block: int) -> np.ndarray:
    bitgen = np.random.Philox(key=[seed & _MASK64, block & _MASK64])
    return np.random.Generator(bitgen).standard_normal(BLOCK)


def fine_normals(seed: int, start: int, count: int) -> np.ndarray:
    """Standard normals with fine indices ``start, ..., start + count - 1``."""
    out = np.empty(count)
    pos = 0
    while pos < count:
        f = start + pos
        b, offset = divmod(f, BLOCK)
        take = min(BLOCK - offset, count - pos)
        out[pos : pos + take] = _block_normals(seed, b)[offset : offset + take]
        pos += take
    return out


@dataclass
class NoisePath:
    """Seeded Wiener path sampled at steps of ``dt``.

    Each step increment is the sum of ``substeps`` fine increments of
    ``dt / substeps``; paths with equal ``seed`` and ``dt / substeps`` therefore
    sample the same Brownian motion at different resolutions.
    """

    seed: int
    dt: float
    substeps: int = 1
    step_index: int = 0
    running_w: float = 0.0
    anchor_w: float = 0.0
    _cache: np.ndarray = field(default=None, repr=False)
    _cache_start: int = field(default=-1, repr=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.step_index and self.running_w == 0.0:
            self.running_w = self.w_at(self.step_index)

    @classmethod
    def replay(cls, seed: int, dt: float, step_index: int, substeps: int = 1) -> "NoisePath":
        """Reconstruct a path positioned at ``step_index``."""
        path = cls(seed, dt, substeps)
        path.running_w = path.w_at(step_index)
        path.step_index = step_index
        return path

    def increments(self, start: int, count: int) -> np.ndarray:
        z = fine_normals(self.seed, start * self.substeps, count * self.substeps)
        z = z.reshape(count, self.substeps).sum(axis=1)
        return np.sqrt(self.dt / self.substeps) * z

    def _fill_cache(self, start: int):
        self._cache = self.increments(start, BLOCK)
        self._cache_start = start

    def increment_at(self, step: int) -> float:
        if not (0 <= step - self._cache_start < BLOCK) or self._cache is None:
            self._fill_cache(step)
        return float(self._cache[step - self._cache_start])

    def next_increment(self) -> float:
        dw = self.increment_at(self.step_index)
        self.step_index += 1
        self.running_w += dw
        return dw

    def set_anchor(self):
        self.anchor_w = self.running_w

    def w_series(self, start: int, stop: int) -> np.ndarray:
        """``W`` at steps ``start..stop`` inclusive, accumulated in step order."""
        if start < 0 or stop < start:
            raise ValueError(f"invalid step range [{start}, {stop}]")
        w0 = self.w_at(start)
        return np.cumsum(np.concatenate([[w0], self.increments(start, stop - start)]))

    def w_at(self, step: int) -> float:
        acc = 0.0
        for start in range(0, step, 64 * BLOCK):
            chunk = self.increments(start, min(64 * BLOCK, step - start))
            acc = float(np.cumsum(np.concatenate([[acc], chunk]))[-1])
        return acc


def _step_of(t: float, dt: float) -> int:
    n = round(t / dt)
    if abs(n * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"time {t} is not aligned to steps of {dt}")
    return int(n)


def window_noise_sup(model: NoiseModel, path: NoisePath, window) -> float:
    """``sup_{t in window} ||sigma (W(t) - W(t_a))||_{W^{1,inf}}`` on the grid."""
    t_a, t_b = window
    a, b = _step_of(t_a, path.dt), _step_of(t_b, path.dt)
    if a < 0 or b < a:
        raise ValueError(f"window {window} starts before the path or is reversed")
    if model.is_zero or a == b:
        return 0.0
    w = path.w_series(a, b)
    return float(np.abs(w - w[0]).max() * model.w1inf_factor)


@dataclass
class EventEstimate:
    probability: float
    low: float
    high: float
    successes: int
    trials: int


def small_noise_event_frequency(model: NoiseModel, paths: Sequence[NoisePath], window_length: float, threshold: float) -> EventEstimate:
    """Fraction of paths whose noise stays within ``threshold`` on ``[0, T]``."""
    if len(paths) < 100:
        raise ValueError("need at least 100 paths")
    hits = sum(window_noise_sup(model, p, (0.0, window_length)) <= threshold for p in paths)
    ci = stats.binomtest(hits, len(paths)).proportion_ci(confidence_level=0.95, method="wilson")
    return EventEstimate(hits / len(paths), float(ci.low), float(ci.high), hits, len(paths))
