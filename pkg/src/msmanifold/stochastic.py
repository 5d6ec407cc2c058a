"""Wiener ensembles, the mild-solution integrator, and mean-square norms.

Noise streams are counter-based: every increment is a pure function of
(seed, sample chunk, absolute lattice step), so output is independent of
worker count and two runs sharing a dt-lattice see bit-identical increments
on overlapping windows.
"""
from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, GridMismatch, NonfiniteState
from .problem import NoiseModel, SpectralProblem
from .resolvent import DEFAULT_LADDER, BoundaryTriple

_CHUNK = 1024          # samples per work unit, fixed so results ignore worker count
_BLOCK = 1024          # lattice steps per RNG block
_LATTICE_RTOL = 1e-6


def n_workers() -> int:
    env = os.environ.get("MSMANIFOLD_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def sample_chunks(n_samples: int) -> list:
    return [(a, min(a + _CHUNK, n_samples)) for a in range(0, n_samples, _CHUNK)]


def map_chunks(fn: Callable, n_samples: int) -> list:
    """Run fn(a, b) over fixed sample chunks; results in chunk order."""
    spans = sample_chunks(n_samples)
    workers = n_workers()
    if workers == 1 or len(spans) == 1:
        return [fn(a, b) for a, b in spans]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        futs = [ex.submit(fn, a, b) for a, b in spans]
        return [f.result() for f in futs]


def _lattice_step(t: float, dt: float, what: str) -> int:
    s = round(t / dt)
    if abs(t - s * dt) > _LATTICE_RTOL * dt:
        raise GridMismatch(f"{what} {t!r} is not on the dt={dt!r} lattice")
    return int(s)


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    dt: float
    n_steps: int
    t_end: float = None  # derived; validated if passed explicitly

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ConfigError("dt must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigError("n_steps must be a positive integer")
        end = self.t_start + self.n_steps * self.dt
        if self.t_end is not None:
            if abs(self.t_end - end) > 1e-9 * max(1.0, abs(end)):
                raise ConfigError(f"t_end {self.t_end} != t_start + n_steps*dt = {end}")
        object.__setattr__(self, "t_end", end)
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @property
    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.n_nodes)

    @property
    def step0(self) -> int:
        """Absolute lattice index of the first node."""
        return _lattice_step(self.t_start, self.dt, "t_start")

    def index_of(self, t: float) -> int:
        i = round((t - self.t_start) / self.dt)
        if not (0 <= i <= self.n_steps) or abs(t - (self.t_start + i * self.dt)) > _LATTICE_RTOL * self.dt:
            raise GridMismatch(f"time {t!r} is not a node of {self}")
        return int(i)

    def subgrid(self, i0: int, i1: int) -> "TimeGrid":
        if not (0 <= i0 < i1 <= self.n_steps):
            raise ConfigError(f"bad subgrid [{i0}, {i1}] of {self.n_steps} steps")
        return TimeGrid(self.t_start + i0 * self.dt, self.dt, i1 - i0)

    def matches(self, other: "TimeGrid") -> bool:
        return (abs(self.dt - other.dt) <= 1e-12 * self.dt
                and abs(self.t_start - other.t_start) <= _LATTICE_RTOL * self.dt
                and self.n_steps == other.n_steps)


def _block_normals(seed, chunk_idx: int, block_idx: int, clen: int, d: int) -> np.ndarray:
    key = [abs(int(seed)), int(chunk_idx), abs(int(block_idx)),
           0 if block_idx >= 0 else 1, 0 if int(seed) >= 0 else 1]
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
    return g.standard_normal((_BLOCK, clen, d))


def _fill_standard_increments(out: np.ndarray, seed, step0: int) -> None:
    """Unit-variance increments for absolute steps [step0, step0+N) into
    out[sample, step, mode]. Always draws whole RNG blocks so any window on
    the same lattice sees the same numbers."""
    n, n_steps, d = out.shape

    def fill(a, b):
        chunk_idx = a // _CHUNK
        clen = b - a
        lo_block = (step0) // _BLOCK
        hi_block = (step0 + n_steps - 1) // _BLOCK
        for blk in range(lo_block, hi_block + 1):
            raw = _block_normals(seed, chunk_idx, blk, clen, d)
            s_lo = max(step0, blk * _BLOCK)
            s_hi = min(step0 + n_steps, (blk + 1) * _BLOCK)
            rows = raw[s_lo - blk * _BLOCK:s_hi - blk * _BLOCK]
            out[a:b, s_lo - step0:s_hi - step0, :] = rows.transpose(1, 0, 2)

    map_chunks(fill, n)


@dataclass(frozen=True, eq=False)
class WienerEnsemble:
    """Sampled Q-Wiener increments on a grid, anchored at W(0) = 0."""
    grid: TimeGrid
    seed: object
    increments: np.ndarray          # (n_samples, n_steps, d), already q-scaled
    weights: np.ndarray             # (d,) covariance weights q_k
    step0: int

    @property
    def n_samples(self) -> int:
        return self.increments.shape[0]

    @property
    def n_noise_modes(self) -> int:
        return self.increments.shape[2]

    def check_grid(self, grid: TimeGrid) -> None:
        if not self.grid.matches(grid):
            raise GridMismatch("Wiener ensemble was sampled on a different grid")

    def window(self, i0: int, i1: int) -> "WienerEnsemble":
        sub = self.grid.subgrid(i0, i1)
        return replace(self, grid=sub, increments=self.increments[:, i0:i1, :],
                       step0=self.step0 + i0)

    def values(self) -> np.ndarray:
        """W at the grid nodes, (n_samples, n_nodes, d). Anchored so W = 0 at
        lattice time 0 when the grid covers it, else at the first node."""
        n, n_steps, d = self.increments.shape
        w = np.zeros((n, n_steps + 1, d))
        np.cumsum(self.increments, axis=1, out=w[:, 1:, :])
        if self.step0 <= 0 <= self.step0 + n_steps:
            z = -self.step0
            w -= w[:, z:z + 1, :]
        return w

    def value_at(self, node: int) -> np.ndarray:
        """W(t_node) per sample, (n_samples, d), same anchor as values()."""
        n, n_steps, d = self.increments.shape
        if not (0 <= node <= n_steps):
            raise GridMismatch(f"node {node} outside grid")
        anchor = -self.step0 if self.step0 <= 0 <= self.step0 + n_steps else 0
        lo, hi = sorted((anchor, node))
        if lo == hi:
            return np.zeros((n, d))
        seg = self.increments[:, lo:hi, :].sum(axis=1)
        return seg if node > anchor else -seg


def sample_wiener(seed, grid: TimeGrid, noise: NoiseModel, n_samples: int) -> WienerEnsemble:
    if n_samples < 2:
        raise ConfigError("n_samples must be >= 2")
    d = noise.n_noise_modes
    if d < 1:
        raise ConfigError("noise model has no modes")
    q = np.asarray(noise.covariance_weights, dtype=float)
    if q.shape != (d,):
        raise ConfigError(f"covariance weights shape {q.shape} != ({d},)")
    step0 = grid.step0
    inc = np.empty((n_samples, grid.n_steps, d))
    _fill_standard_increments(inc, seed, step0)
    inc *= np.sqrt(q * grid.dt)
    return WienerEnsemble(grid=grid, seed=seed, increments=inc, weights=q, step0=step0)


def resample_future(w: WienerEnsemble, node: int, new_seed) -> WienerEnsemble:
    """Replace all increments at steps >= node with draws from new_seed."""
    if not (0 <= node <= w.grid.n_steps):
        raise GridMismatch(f"node {node} outside grid")
    fresh = np.empty_like(w.increments)
    _fill_standard_increments(fresh, new_seed, w.step0)
    fresh *= np.sqrt(w.weights * w.grid.dt)
    inc = w.increments.copy()
    inc[:, node:, :] = fresh[:, node:, :]
    return replace(w, increments=inc, seed=("resampled", w.seed, new_seed, node))


@dataclass(frozen=True, eq=False)
class ProcessEnsemble:
    grid: TimeGrid
    values: np.ndarray              # (n_samples, n_nodes, m)
    adapted_to: object = None       # seed of the driving WienerEnsemble
    direction: str = "forward"
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    def at(self, node: int) -> np.ndarray:
        return self.values[:, node, :]


def solver_boundary_columns(p: SpectralProblem):
    """Columns of the top-of-ladder resolvent regularizer, lazily resolved."""
    ladder = p.meta.get("ladder", DEFAULT_LADDER)
    top = max(float(l) for l in ladder)
    by_rung = p.meta.get("boundary_columns")
    if by_rung is not None:
        cols = by_rung.get(repr(top))
        if cols is not None:
            return np.asarray(cols, dtype=float)
    if p.boundary_regularizer is not None:
        return np.asarray(p.boundary_regularizer, dtype=float)
    return None


def forcing_modes(value, cols, m: int) -> np.ndarray:
    if isinstance(value, BoundaryTriple):
        if cols is None:
            raise ConfigError("boundary-valued forcing needs a boundary regularizer")
        out = np.array(value.f, dtype=float, copy=True)
        out += np.multiply.outer(np.asarray(value.a, dtype=float), cols[:, 0])
        out += np.multiply.outer(np.asarray(value.b, dtype=float), cols[:, 1])
        return out
    return np.asarray(value, dtype=float)


def integrate_mild(p: SpectralProblem, u0: np.ndarray, grid: TimeGrid,
                   wiener: Optional[WienerEnsemble] = None,
                   overflow_limit: float = 1e12) -> ProcessEnsemble:
    """Exponential Euler-Maruyama for the mild solution:

        u_{j+1} = e^{A dt} (u_j + dt * F_reg(u_j) + sigma(u_j) dW_j)

    F values that carry boundary data are mapped into modes with the
    top-of-ladder resolvent columns; mode-local values pass through.
    """
    m = p.n_modes
    if wiener is None:
        if not p.noise.is_zero:
            raise ConfigError("nonzero noise requires a Wiener ensemble")
        n = u0.shape[0] if np.ndim(u0) == 2 else 1
    else:
        wiener.check_grid(grid)
        if not p.noise.is_zero and wiener.n_noise_modes != m:
            raise GridMismatch(f"noise has {wiener.n_noise_modes} channels, problem has {m} modes")
        n = wiener.n_samples
    u0 = np.asarray(u0, dtype=float)
    if u0.ndim == 1:
        u0 = np.broadcast_to(u0, (n, m))
    if u0.shape != (n, m):
        raise GridMismatch(f"u0 shape {u0.shape} incompatible with ({n}, {m})")

    lam_exp = np.exp(p.eigenvalues * grid.dt)
    cols = solver_boundary_columns(p)
    dt = grid.dt
    out = np.empty((n, grid.n_nodes, m))
    out[:, 0, :] = u0
    use_noise = wiener is not None and not p.noise.is_zero

    def run(a, b):
        u = np.array(out[a:b, 0, :])
        for j in range(grid.n_steps):
            step = u + dt * forcing_modes(p.nonlinearity.fn(u), cols, m)
            if use_noise:
                step += p.noise.diffusion(u) * wiener.increments[a:b, j, :]
            u = lam_exp * step
            peak = np.max(np.abs(u))
            if not np.isfinite(peak) or peak > overflow_limit:
                bad = int(np.argmax(np.max(np.abs(u), axis=1)))
                raise NonfiniteState(
                    f"state magnitude {peak:.3e} exceeded {overflow_limit:.1e}",
                    step=j + 1, sample=a + bad)
            out[a:b, j + 1, :] = u

    map_chunks(run, n)
    return ProcessEnsemble(grid=grid, values=out,
                           adapted_to=None if wiener is None else wiener.seed)


def ms_norm(ens, step: Optional[int] = None) -> float:
    """sqrt(E ||u||^2): sample mean of the squared mode-l2 norm."""
    if isinstance(ens, ProcessEnsemble):
        if step is None:
            raise ConfigError("step required for a ProcessEnsemble")
        v = ens.at(step)
    else:
        v = np.asarray(ens, dtype=float)
    if v.ndim == 1:
        v = v[None, :]
    return float(np.sqrt(np.mean(np.einsum("nm,nm->n", v, v))))


def _node_ms(values: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("njm,njm->j", values, values) / values.shape[0])


def weighted_norm(ens, rate: float, direction: str = "backward") -> float:
    """sup over grid nodes of e^{-rate*t} * ms_norm(t), restricted to t <= 0
    (backward) or t >= 0 (forward)."""
    if isinstance(ens, ProcessEnsemble):
        values, times = ens.values, ens.grid.times
    else:
        values, times = ens
        values = np.asarray(values, dtype=float)
        times = np.asarray(times, dtype=float)
    tol = _LATTICE_RTOL * max(1.0, float(np.max(np.abs(times))))
    if direction == "backward":
        mask = times <= tol
    elif direction == "forward":
        mask = times >= -tol
    else:
        raise ConfigError(f"unknown direction {direction!r}")
    if not np.any(mask):
        raise ConfigError(f"grid has no nodes on the {direction} side")
    ms = _node_ms(values[:, mask, :])
    return float(np.max(np.exp(-rate * times[mask]) * ms))


_MAGIC = b"MSMB0001"


def export_ensemble_csv(path: str, ens) -> None:
    """Rows sample,step,mode,value with full-precision floats."""
    values = ens.values if isinstance(ens, ProcessEnsemble) else np.asarray(ens)
    n, nn, m = values.shape
    with open(path, "w", newline="") as fh:
        fh.write("sample,step,mode,value\r\n")
        for s in range(n):
            block = values[s]
            lines = [f"{s},{j},{k},{block[j, k]:.17g}\r\n"
                     for j in range(nn) for k in range(m)]
            fh.write("".join(lines))


def export_ensemble_binary(path: str, ens) -> None:
    """Little-endian dump: 8-byte magic, int64 ndim, int64 dims, row-major f64."""
    values = ens.values if isinstance(ens, ProcessEnsemble) else np.asarray(ens)
    arr = np.ascontiguousarray(values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<q", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_ensemble_binary(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ConfigError(f"not an ensemble dump: magic {magic!r}")
        (ndim,) = struct.unpack("<q", fh.read(8))
        dims = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(dims)
