"""Reference oracles and refinement harnesses.

Everything here produces expected values by routes that do not touch the
fixed-point solver module: closed forms, dense quadrature, and small
matrix algebra.  The integrator and resolvent helpers needed by the
refinement sweeps are imported lazily inside `refinement_study` so the
reference oracles stay on problem data and numpy alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, MaxIterExceeded, NoSeparation
from .problem import SpectralProblem

__all__ = [
    "OracleResult",
    "RefinementStudy",
    "linear_manifold_oracle",
    "deterministic_lp_oracle",
    "moment_oracle",
    "refinement_study",
]

_SEPARATION_FLOOR = 1e-8
_RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class OracleResult:
    """Outcome of one reference-vs-observed comparison."""

    name: str
    reference: np.ndarray
    tolerance: float
    passed: bool
    observed: Optional[np.ndarray] = None
    max_error: float = float("nan")
    detail: dict = field(default_factory=dict)

    @staticmethod
    def compare(name: str, reference, observed, tolerance: float,
                detail: Optional[dict] = None) -> "OracleResult":
        ref = np.asarray(reference, dtype=float)
        obs = np.asarray(observed, dtype=float)
        if ref.shape != obs.shape:
            raise ConfigError(
                f"oracle {name}: shape mismatch {ref.shape} vs {obs.shape}")
        err = float(np.max(np.abs(ref - obs))) if ref.size else 0.0
        return OracleResult(name=name, reference=ref, tolerance=float(tolerance),
                            passed=bool(err <= tolerance), observed=obs,
                            max_error=err, detail=dict(detail or {}))

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "reference": np.asarray(self.reference).tolist(),
            "observed": None if self.observed is None
            else np.asarray(self.observed).tolist(),
            "tolerance": self.tolerance,
            "max_error": self.max_error,
            "passed": self.passed,
            "detail": self.detail,
        }


def _sylvester_solve(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Solve a@X - X@b = c by Kronecker assembly; blocks here are tiny."""
    p, q = c.shape
    lhs = np.kron(np.eye(q), a) - np.kron(b.T, np.eye(p))
    try:
        x = np.linalg.solve(lhs, c.reshape(-1, order="F"))
    except np.linalg.LinAlgError as exc:
        raise NoSeparation(f"Sylvester operator singular: {exc}") from None
    return x.reshape(p, q, order="F")


def linear_manifold_oracle(a_u, a_s, b, tol: float = 1e-13,
                           max_iter: int = 500) -> np.ndarray:
    """Slope matrix M of the invariant graph s = M u for linear coupling.

    The state ordering is (primary block, secondary block) with the full
    linear forcing B partitioned accordingly.  M solves

        M (A_u + B_uu + B_us M) = A_s M + B_su + B_ss M

    by damped fixed point on the Sylvester form; the self-residual of
    the returned slope is below 1e-10.
    """
    a_u = np.atleast_2d(np.asarray(a_u, dtype=float))
    a_s = np.atleast_2d(np.asarray(a_s, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    k = a_u.shape[0]
    ms = a_s.shape[0]
    if b.shape != (k + ms, k + ms):
        raise ConfigError(f"coupling must be {(k + ms, k + ms)}, got {b.shape}")
    b_uu, b_us = b[:k, :k], b[:k, k:]
    b_su, b_ss = b[k:, :k], b[k:, k:]

    eig_u = np.linalg.eigvals(a_u + b_uu)
    eig_s = np.linalg.eigvals(a_s)
    sep = np.min(np.abs(eig_u[:, None] - eig_s[None, :]))
    if sep < _SEPARATION_FLOOR:
        raise NoSeparation(f"spectral separation {sep:.3e} below "
                           f"{_SEPARATION_FLOOR:.0e}")

    def residual(m):
        return m @ (a_u + b_uu + b_us @ m) - (a_s @ m + b_su + b_ss @ m)

    m = np.zeros((ms, k))
    damping = 1.0
    prev = math.inf
    for _ in range(max_iter):
        # linear part solved exactly; the quadratic B_us M feedback is frozen
        rhs = b_su + b_ss @ m - m @ (b_uu + b_us @ m)
        m_new = _sylvester_solve(a_s, a_u, -rhs)
        step = float(np.max(np.abs(m_new - m)))
        if step > prev * 1.5:
            damping = max(damping * 0.5, 0.05)
        m = m + damping * (m_new - m)
        prev = step
        if step * damping <= tol:
            break
    else:
        raise MaxIterExceeded(f"slope iteration stalled at step {prev:.3e}")
    res = float(np.max(np.abs(residual(m))))
    if res >= _RESIDUAL_TOL:
        raise MaxIterExceeded(f"slope residual {res:.3e} >= {_RESIDUAL_TOL:.0e}")
    return m


def _oracle_forcing(p: SpectralProblem, states: np.ndarray) -> np.ndarray:
    """Mode forcing at every node, mapping boundary pairs through the
    frozen regularizer columns."""
    out = np.empty_like(states)
    for j in range(states.shape[0]):
        val = p.nonlinearity(states[j])
        if p.nonlinearity.returns_boundary:
            f, a, bnd = val
            cols = p.boundary_regularizer
            if cols is None:
                raise ConfigError("boundary nonlinearity without regularizer")
            out[j] = (np.asarray(f, dtype=float)
                      + float(np.atleast_1d(a)[0]) * cols[:, 0]
                      + float(np.atleast_1d(bnd)[0]) * cols[:, 1])
        else:
            out[j] = np.asarray(val, dtype=float)
    return out


def _kernel_sum(rates: np.ndarray, times: np.ndarray, f: np.ndarray,
                lower: bool, block: int = 256) -> np.ndarray:
    """Trapezoid quadrature of the diagonal exponential convolution.

    lower=True integrates over r <= t_j (stable kernel), lower=False
    over r >= t_j (unstable kernel); both kernels are bounded by one on
    their windows, so arbitrarily stiff rates cannot overflow.  Dense
    per-node sums, O(N^2), deliberately unlike the solver recurrences.
    """
    n = times.size
    dt = float(times[1] - times[0])
    out = np.zeros((n, rates.size))
    for j0 in range(0, n, block):
        j1 = min(j0 + block, n)
        rows = np.arange(j0, j1)
        wmat = np.zeros((j1 - j0, n))
        for r, j in enumerate(rows):
            if lower:
                if j == 0:
                    continue
                wmat[r, :j + 1] = dt
                wmat[r, 0] = wmat[r, j] = dt / 2.0
            else:
                if j == n - 1:
                    continue
                wmat[r, j:] = dt
                wmat[r, j] = wmat[r, n - 1] = dt / 2.0
        for i, lam in enumerate(rates):
            ker = np.exp(lam * (times[rows][:, None] - times[None, :]))
            out[j0:j1, i] = (ker * wmat) @ f[:, i]
    return out


def deterministic_lp_oracle(p: SpectralProblem, x, cfg) -> np.ndarray:
    """Single-path quadrature fixed point for the backward graph, sigma = 0.

    Dense trapezoid sums replace the solver's stepwise recurrences, so
    agreement with the Monte Carlo path is evidence, not tautology.
    Returns the stable coordinates of the graph at the anchor time.
    """
    if not p.noise.is_zero:
        raise ConfigError("deterministic oracle requires zero noise")
    x = np.asarray(x, dtype=float).reshape(-1)
    u_idx = np.asarray(p.unstable_modes, dtype=int)
    s_idx = np.asarray(p.stable_modes, dtype=int)
    if x.size != u_idx.size:
        raise ConfigError(f"anchor needs {u_idx.size} unstable coordinates")
    n = int(round(cfg.t_back / cfg.dt))
    if n < 2:
        raise ConfigError("backward window shorter than two steps")
    times = cfg.tau - cfg.dt * np.arange(n, -1, -1.0)
    lam_u = p.eigenvalues[u_idx]
    lam_s = p.eigenvalues[s_idx]
    gamma = cfg.gamma if cfg.gamma is not None else p.gamma
    decay = np.exp(-gamma * (times - cfg.tau))

    pull = np.exp(lam_u[None, :] * (times[:, None] - cfg.tau)) * x[None, :]
    state = np.zeros((n + 1, p.eigenvalues.size))
    state[:, u_idx] = pull
    for it in range(cfg.max_iter):
        f = _oracle_forcing(p, state)
        new = np.zeros_like(state)
        new[:, u_idx] = pull - _kernel_sum(lam_u, times, f[:, u_idx],
                                           lower=False)
        new[:, s_idx] = _kernel_sum(lam_s, times, f[:, s_idx], lower=True)
        dist = float(np.max(decay * np.max(np.abs(new - state), axis=1)))
        state = new
        if dist <= cfg.tol:
            return state[-1, s_idx].copy()
    raise MaxIterExceeded(f"quadrature fixed point stalled at {dist:.3e} "
                          f"after {cfg.max_iter} iterations")


def moment_oracle(lam: float, s: float, u0: float, t: float) -> float:
    """Second moment of the linear scalar diffusion du = lam u dt + s u dW."""
    return u0 * u0 * math.exp((2.0 * lam + s * s) * t)


@dataclass(frozen=True)
class RefinementStudy:
    """One refinement sweep: rows of (parameter value, observable, error)."""

    parameter: str
    rows: Tuple[Tuple[float, float, float], ...]
    slope: float
    slope_kind: str
    monotone: bool

    def as_dict(self) -> dict:
        return {
            "parameter": self.parameter,
            "rows": [list(r) for r in self.rows],
            "slope": self.slope,
            "slope_kind": self.slope_kind,
            "monotone": self.monotone,
        }

    def csv_rows(self):
        yield (self.parameter, "observable", "error")
        for value, obs, err in self.rows:
            yield ("%.17g" % value, "%.17g" % obs, "%.17g" % err)


def _fit_slope(values, errors, kind: str) -> float:
    x = np.log(np.asarray(values, dtype=float)) if kind == "loglog" \
        else np.asarray(values, dtype=float)
    y = np.log(np.asarray(errors, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def _study_rows(values, observables, errors) -> tuple:
    order = np.argsort(np.asarray(values, dtype=float))
    return tuple((float(np.asarray(values)[i]),
                  float(np.asarray(observables)[i]),
                  float(np.asarray(errors)[i])) for i in order)


def refinement_study(p: SpectralProblem, cfg, parameter: str,
                     values: Optional[Sequence[float]] = None,
                     x=None) -> RefinementStudy:
    """Error-vs-parameter sweep for dt, n_samples, T_back, or lambda.

    dt and n_samples drive the mild integrator (imported lazily; the
    closed-form oracles above never touch it), T_back drives the dense
    quadrature oracle, and lambda measures the regularization defect on
    a smooth coefficient vector.  Slopes are log-log except for T_back,
    whose truncation error is exponential and reported on a semilog fit.
    """
    if values is not None and len(tuple(values)) < 3:
        raise ConfigError("a refinement sweep needs at least 3 values")
    if parameter == "dt":
        from . import stochastic as st

        vals = tuple(values) if values is not None else (8e-3, 4e-3, 2e-3)
        vals = tuple(sorted(float(v) for v in vals))
        dt_ref = vals[0] / 4.0
        horizon = cfg.t_fwd
        steps_ref = int(round(horizon / dt_ref))
        grid_ref = st.TimeGrid(t_start=0.0, dt=dt_ref, n_steps=steps_ref)
        wie_ref = st.sample_wiener(cfg.seed, grid_ref, p.noise,
                                   max(2, cfg.n_samples))
        u0 = np.asarray(x, dtype=float) if x is not None else \
            np.full(p.eigenvalues.size, 0.1)
        ref = st.integrate_mild(p, u0, grid_ref, wie_ref).values[:, -1, :]
        obs, err = [], []
        for dt in vals:
            ratio = int(round(dt / dt_ref))
            if abs(ratio * dt_ref - dt) > 1e-12 * dt:
                raise ConfigError(f"dt {dt} is not a multiple of the "
                                  f"reference step {dt_ref}")
            steps = steps_ref // ratio
            if steps * ratio != steps_ref:
                raise ConfigError(f"horizon {horizon} does not hold a whole "
                                  f"number of dt={dt} steps")
            grid = st.TimeGrid(t_start=0.0, dt=dt, n_steps=steps)
            # coarse increments are sums of the fine ones: coupled paths
            inc = wie_ref.increments[:, :steps * ratio, :]
            inc = inc.reshape(inc.shape[0], steps, ratio, inc.shape[2]).sum(axis=2)
            wie = st.WienerEnsemble(grid=grid, seed=wie_ref.seed,
                                    increments=inc, weights=wie_ref.weights,
                                    step0=0)
            end = st.integrate_mild(p, u0, grid, wie).values[:, -1, :]
            diff = end - ref
            err.append(math.sqrt(float(np.mean(np.sum(diff * diff, axis=1)))))
            obs.append(math.sqrt(float(np.mean(np.sum(end * end, axis=1)))))
        rows = _study_rows(vals, obs, err)
        slope = _fit_slope([r[0] for r in rows], [r[2] for r in rows], "loglog")
        mono = all(rows[i][2] <= rows[i + 1][2] for i in range(len(rows) - 1))
        return RefinementStudy("dt", rows, slope, "loglog", mono)

    if parameter == "n_samples":
        from . import stochastic as st

        vals = tuple(values) if values is not None else (400, 1600, 6400)
        vals = tuple(sorted(int(v) for v in vals))
        horizon = cfg.t_fwd
        steps = int(round(horizon / cfg.dt))
        grid = st.TimeGrid(t_start=0.0, dt=cfg.dt, n_steps=steps)
        u0 = np.asarray(x, dtype=float) if x is not None else \
            np.full(p.eigenvalues.size, 0.1)
        obs, err = [], []
        for n in vals:
            wie = st.sample_wiener(cfg.seed, grid, p.noise, n)
            end = st.integrate_mild(p, u0, grid, wie).values[:, -1, :]
            sq = np.sum(end * end, axis=1)
            obs.append(float(np.mean(sq)))
            # Monte Carlo standard error of the mean from this run alone
            err.append(float(np.std(sq, ddof=1) / math.sqrt(n)))
        rows = _study_rows(vals, obs, err)
        slope = _fit_slope([r[0] for r in rows], [r[2] for r in rows], "loglog")
        mono = all(rows[i][2] >= rows[i + 1][2] for i in range(len(rows) - 1))
        return RefinementStudy("n_samples", rows, slope, "loglog", mono)

    if parameter == "T_back":
        vals = tuple(values) if values is not None else (4.0, 6.0, 8.0)
        vals = tuple(sorted(float(v) for v in vals))
        anchor = np.asarray(x, dtype=float) if x is not None else \
            np.full(len(p.unstable_modes), 0.1)
        from dataclasses import replace as _replace

        ref_cfg = _replace(cfg, t_back=vals[-1] * 1.5)
        ref = deterministic_lp_oracle(p, anchor, ref_cfg)
        obs, err = [], []
        for t_back in vals:
            g = deterministic_lp_oracle(p, anchor, _replace(cfg, t_back=t_back))
            obs.append(float(np.linalg.norm(g)))
            err.append(float(np.max(np.abs(g - ref))))
        rows = _study_rows(vals, obs, err)
        slope = _fit_slope([r[0] for r in rows], [r[2] for r in rows], "semilog")
        mono = all(rows[i][2] >= rows[i + 1][2] for i in range(len(rows) - 1))
        return RefinementStudy("T_back", rows, slope, "semilog", mono)

    if parameter == "lambda":
        from . import resolvent as rez

        vals = tuple(values) if values is not None else rez.DEFAULT_LADDER
        vals = tuple(sorted(float(v) for v in vals))
        m = p.eigenvalues.size
        g = 1.0 / (1.0 + np.arange(m, dtype=float) ** 2)
        obs, err = [], []
        for lam in vals:
            reg = rez.lambda_regularize(p, lam, g)
            obs.append(float(np.linalg.norm(reg)))
            err.append(float(np.linalg.norm(reg - g)))
        rows = _study_rows(vals, obs, err)
        slope = _fit_slope([r[0] for r in rows], [r[2] for r in rows], "loglog")
        mono = all(rows[i][2] >= rows[i + 1][2] for i in range(len(rows) - 1))
        return RefinementStudy("lambda", rows, slope, "loglog", mono)

    raise ConfigError(f"unknown refinement parameter {parameter!r}; "
                      "expected dt, n_samples, T_back, or lambda")
