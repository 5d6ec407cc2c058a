"""Backward and forward fixed-point maps for mean-square invariant graphs.

The backward map builds the unstable manifold: at each grid time the unstable
block is a conditional expectation (anchor pull-back minus the conditional
drift integral; the Ito term is zero by the martingale property) and the
stable block is a per-sample truncated convolution plus Ito quadrature. The
forward map mirrors this for the stable invariant set.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .condexp import (RegressionBasis, condexp_anchor, condexp_ito_zero,
                      condexp_lsmc)
from .errors import (ConfigError, ConsistencyFailure, GapViolation,
                     MaxIterExceeded, NonfiniteState, TruncationTooShort)
from .problem import GapReport, SpectralProblem, gap_delta, gap_eta
from .stochastic import (ProcessEnsemble, TimeGrid, WienerEnsemble,
                         forcing_modes, integrate_mild, ms_norm, sample_wiener,
                         solver_boundary_columns)

DEFAULT_SLACK = 0.25


@dataclass(frozen=True)
class LPConfig:
    """Solver configuration; rates default to the problem's own."""
    c_zeta: float
    tau: float = 0.0
    t_back: float = 1.0
    t_fwd: float = 1.0
    dt: float = 1e-3
    n_samples: int = 2
    seed: int = 0
    tol: float = 1e-6
    max_iter: int = 50
    gamma: Optional[float] = None
    zeta: Optional[float] = None
    c_zeta_source: str = "user"
    basis_degree: int = 2
    basis_kind: str = "polynomial"
    include_wiener: bool = False
    check_residual: bool = True
    force: bool = False
    slack: float = DEFAULT_SLACK

    def rates(self, p: SpectralProblem) -> tuple:
        gamma = p.gamma if self.gamma is None else float(self.gamma)
        zeta = p.zeta if self.zeta is None else float(self.zeta)
        return gamma, zeta

    def validate(self, p: SpectralProblem) -> None:
        if self.c_zeta is None or self.c_zeta <= 0:
            raise ConfigError("c_zeta must be positive")
        if self.tol <= 0:
            raise ConfigError("tol must be positive")
        if self.t_back <= 0 or self.t_fwd <= 0:
            raise ConfigError("truncation horizons must be positive")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.max_iter < 1 or self.n_samples < 1:
            raise ConfigError("max_iter and n_samples must be >= 1")
        gamma, zeta = self.rates(p)
        if not (p.beta < zeta < gamma < p.alpha):
            raise ConfigError(
                f"rate ordering violated: beta={p.beta} < zeta={zeta} < gamma={gamma} < alpha={p.alpha}")

    def basis_for(self, p: SpectralProblem) -> RegressionBasis:
        return RegressionBasis(kind=self.basis_kind, degree=self.basis_degree,
                               primary_idx=tuple(p.unstable_modes),
                               linear_idx=tuple(p.stable_modes),
                               include_wiener=self.include_wiener,
                               n_wiener=p.noise.n_noise_modes if self.include_wiener else 0)


@dataclass
class FixedPointTrace:
    distances: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    tol: float = 0.0
    residual: Optional[float] = None
    ito_check: dict = field(default_factory=dict)
    tail_bound: float = 0.0
    gap: Optional[GapReport] = None
    regression: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"distances": [float(d) for d in self.distances],
                "ratios": [float(r) for r in self.ratios],
                "iterations": self.iterations, "converged": self.converged,
                "tol": self.tol, "residual": self.residual,
                "ito_check": self.ito_check, "tail_bound": self.tail_bound,
                "gap": None if self.gap is None else self.gap.as_dict(),
                "regression": self.regression}


@dataclass(frozen=True, eq=False)
class ManifoldGraph:
    side: str                      # "unstable" | "stable"
    tau: float
    anchor: np.ndarray             # (n, k_anchor), coordinates in the anchor block
    h_value: np.ndarray            # (n, k_other), graph value in the complementary block
    anchor_idx: np.ndarray
    value_idx: np.ndarray
    process: ProcessEnsemble
    trace: FixedPointTrace
    consistency_gap: float

    @property
    def n_samples(self) -> int:
        return self.anchor.shape[0]

    def point(self) -> np.ndarray:
        """Full state x + h at tau, (n, m)."""
        m = len(self.anchor_idx) + len(self.value_idx)
        out = np.zeros((self.n_samples, m))
        out[:, self.anchor_idx] = self.anchor
        out[:, self.value_idx] = self.h_value
        return out


@dataclass(frozen=True)
class LipschitzCertificate:
    side: str
    theoretical: float
    empirical: float
    passed: bool
    slack: float
    ratios: tuple


def gap_report_for(p: SpectralProblem, cfg: LPConfig) -> GapReport:
    gamma, _ = cfg.rates(p)
    ag = p.alpha - gamma
    L1, L2 = p.nonlinearity.lipschitz_L1, p.noise.lipschitz_L2
    eta = gap_eta(p.bound_K, L1, L2, ag, cfg.c_zeta)
    delta = gap_delta(p.bound_K, L1, L2, ag, cfg.c_zeta)
    return GapReport(eta=eta, delta=delta, c_zeta=cfg.c_zeta,
                     c_zeta_source=cfg.c_zeta_source,
                     pass_unstable=eta < 1.0, pass_stable=delta < 1.0,
                     terms={"K": p.bound_K, "L1": L1, "L2": L2,
                            "alpha_minus_gamma": ag})


def _block_indices(p: SpectralProblem) -> tuple:
    return (np.asarray(p.unstable_modes, dtype=int),
            np.asarray(p.stable_modes, dtype=int))


def _normalize_anchor(x, idx: np.ndarray, m: int, n_samples: int) -> tuple:
    """Anchor as (n, len(idx)) plus deterministic flag. Full-width vectors are
    accepted when the complementary block is exactly zero."""
    arr = np.asarray(x, dtype=float)
    k = len(idx)
    if arr.ndim == 1:
        if arr.shape[0] == m and m != k:
            comp = np.delete(arr, idx)
            if np.any(comp != 0.0):
                raise ConfigError("anchor has nonzero components outside its block")
            arr = arr[idx]
        if arr.shape[0] != k:
            raise ConfigError(f"anchor length {arr.shape[0]} != block size {k}")
        return np.tile(arr, (n_samples, 1)), True
    if arr.ndim != 2:
        raise ConfigError("anchor must be a vector or (n_samples, k) array")
    if arr.shape[0] != n_samples:
        raise ConfigError(f"anchor rows {arr.shape[0]} != n_samples {n_samples}")
    if arr.shape[1] == m and m != k:
        comp = np.delete(arr, idx, axis=1)
        if np.any(comp != 0.0):
            raise ConfigError("anchor has nonzero components outside its block")
        arr = arr[:, idx]
    if arr.shape[1] != k:
        raise ConfigError(f"anchor width {arr.shape[1]} != block size {k}")
    return np.array(arr, dtype=float), bool(arr.shape[0] == 1 or np.all(arr == arr[0:1]))


def _conditional_fit(target: np.ndarray, state: np.ndarray, basis: RegressionBasis,
                     wiener_vals, agg: dict) -> np.ndarray:
    """E[target|F_t] with exact short-circuits: a deterministic target is its
    own conditional expectation; a deterministic conditioning state reduces
    the regression to the plain mean."""
    if target.shape[1] == 0:
        return target
    if target.shape[0] == 1 or np.all(target == target[0:1]):
        return target
    if np.all(state == state[0:1]):
        agg["mean_fits"] = agg.get("mean_fits", 0) + 1
        return np.broadcast_to(target.mean(axis=0), target.shape)
    est = condexp_lsmc(target, state, basis, wiener_vals)
    agg["n_regressions"] = agg.get("n_regressions", 0) + 1
    agg["max_cond"] = max(agg.get("max_cond", 0.0), est.diagnostics["cond"])
    r2 = est.diagnostics["r2"]
    agg["min_r2"] = min(agg.get("min_r2", 1.0), min(r2) if r2 else 1.0)
    return est.fitted if est.fitted.ndim == 2 else est.fitted[:, None]


def _drift_modes(p: SpectralProblem, v: np.ndarray, cols) -> np.ndarray:
    return forcing_modes(p.nonlinearity.fn(v), cols, p.n_modes)


def _weighted_gap(a: np.ndarray, b: np.ndarray, times: np.ndarray,
                  tau: float, rate: float) -> float:
    worst = 0.0
    for j in range(a.shape[1]):
        d = a[:, j, :] - b[:, j, :]
        msj = np.sqrt(np.mean(np.einsum("nm,nm->n", d, d)))
        worst = max(worst, float(np.exp(-rate * (times[j] - tau)) * msj))
    return worst


def _check_gap(p: SpectralProblem, cfg: LPConfig, side: str,
               gap: Optional[GapReport]) -> GapReport:
    if gap is None:
        gap = gap_report_for(p, cfg)
    ok = gap.pass_unstable if side == "unstable" else gap.pass_stable
    if not ok and not cfg.force:
        name = "eta" if side == "unstable" else "delta"
        val = gap.eta if side == "unstable" else gap.delta
        raise GapViolation(f"{side} gap condition fails: {name} = {val:.4f} >= 1")
    return gap


def _wiener_values_at(wiener, node: int, basis: RegressionBasis):
    if wiener is None or not basis.include_wiener:
        return None
    return wiener.value_at(node)


def lp_backward_map(p: SpectralProblem, xi: ProcessEnsemble, x, cfg: LPConfig,
                    wiener: Optional[WienerEnsemble] = None,
                    basis: Optional[RegressionBasis] = None,
                    gap: Optional[GapReport] = None) -> ProcessEnsemble:
    """One application of the backward map on the window [tau - T_back, tau].

    Unstable block at t: condexp_anchor of the pulled-back anchor minus the
    regression of the per-sample drift integral over [t, tau]; the Ito term
    is zero (martingale) and its raw-mean diagnostic lands in meta. Stable
    block at t: truncated convolution of the stable drift plus per-sample Ito
    quadrature over [tau - T_back, t].
    """
    gap = _check_gap(p, cfg, "unstable", gap)
    grid = xi.grid
    if abs(grid.t_end - cfg.tau) > 1e-6 * grid.dt:
        raise ConfigError(f"grid ends at {grid.t_end}, config anchors at {cfg.tau}")
    n = xi.n_samples
    m = p.n_modes
    u_idx, s_idx = _block_indices(p)
    xu, x_det = _normalize_anchor(x, u_idx, m, n)
    has_noise = not p.noise.is_zero
    if has_noise:
        if wiener is None:
            raise ConfigError("nonzero noise requires the driving Wiener ensemble")
        wiener.check_grid(grid)
    basis = cfg.basis_for(p) if basis is None else basis
    cols = solver_boundary_columns(p)
    dt, N = grid.dt, grid.n_steps
    lam_u, lam_s = p.eigenvalues[u_idx], p.eigenvalues[s_idx]
    decay_u = np.exp(-lam_u * dt)
    decay_s = np.exp(lam_s * dt)
    vals = xi.values
    out = np.zeros((n, grid.n_nodes, m))
    agg: dict = {}

    # anchor node: the map returns x itself at tau (E[x|F_tau] = x)
    out[:, N, u_idx] = xu

    drift = np.zeros((n, len(u_idx)))
    ito_u = np.zeros((n, len(u_idx)))
    g_next = _drift_modes(p, vals[:, N, :], cols)[:, u_idx]
    for j in range(N - 1, -1, -1):
        v_j = vals[:, j, :]
        g_j = _drift_modes(p, v_j, cols)[:, u_idx]
        drift = decay_u * (drift + 0.5 * dt * g_next) + 0.5 * dt * g_j
        if has_noise and len(u_idx):
            amp_u = p.noise.diffusion(v_j)[:, u_idx]
            ito_u = decay_u * ito_u + amp_u * wiener.increments[:, j, u_idx]
        g_next = g_j
        if len(u_idx):
            pull = np.exp(lam_u * ((j - N) * dt))
            wv = _wiener_values_at(wiener, j, basis)
            if x_det:
                anchor_fit = xu * pull  # condexp_anchor short-circuit, inlined
            else:
                anchor_fit = condexp_anchor(xu * pull, v_j, basis, wv).fitted
            out[:, j, u_idx] = anchor_fit - _conditional_fit(drift, v_j, basis, wv, agg)

    window = (grid.t_start, grid.t_end)
    _, ito_diag = condexp_ito_zero(ito_u, window)

    conv = np.zeros((n, len(s_idx)))
    ito_s = np.zeros((n, len(s_idx)))
    h_prev = _drift_modes(p, vals[:, 0, :], cols)[:, s_idx]
    amp_prev = p.noise.diffusion(vals[:, 0, :])[:, s_idx] if has_noise and len(s_idx) else None
    for j in range(1, N + 1):
        v_j = vals[:, j, :]
        h_j = _drift_modes(p, v_j, cols)[:, s_idx]
        conv = decay_s * (conv + 0.5 * dt * h_prev) + 0.5 * dt * h_j
        if amp_prev is not None:
            ito_s = decay_s * (ito_s + amp_prev * wiener.increments[:, j - 1, s_idx])
            amp_prev = p.noise.diffusion(v_j)[:, s_idx]
        h_prev = h_j
        out[:, j, s_idx] = conv + ito_s

    if not np.isfinite(out).all():
        raise NonfiniteState("backward map produced non-finite values")
    return ProcessEnsemble(grid=grid, values=out, direction="backward",
                           adapted_to=None if wiener is None else wiener.seed,
                           meta={"ito_check": ito_diag, "regression": agg})


def _initial_backward(p, grid, xu, u_idx) -> np.ndarray:
    n = xu.shape[0]
    out = np.zeros((n, grid.n_nodes, p.n_modes))
    if len(u_idx):
        steps = np.arange(grid.n_nodes) - grid.n_steps
        fac = np.exp(np.outer(steps * grid.dt, p.eigenvalues[u_idx]))
        out[:, :, u_idx] = xu[:, None, :] * fac[None, :, :]
    return out


def _truncation_check(p, cfg, gap, xnorm: float, side: str) -> float:
    """Estimated weighted-norm error from cutting the improper integrals at
    the horizon. Only the forcing terms leak across the cut, so the
    working-norm bound K*|x|/(1-contraction) is scaled by the dimensionless
    forcing strength (the gap constant itself); zero forcing has zero tail."""
    gamma, zeta = cfg.rates(p)
    contraction = gap.eta if side == "unstable" else gap.delta
    amp = 1.0 / (1.0 - contraction) if contraction < 1.0 else 1.0
    bound = p.bound_K * xnorm * amp * contraction
    if side == "unstable":
        tail = p.bound_K * np.exp((zeta - gamma) * cfg.t_back) * bound
        horizon, rate = cfg.t_back, gamma - zeta
    else:
        tail = p.bound_K * np.exp((gamma - p.alpha) * cfg.t_fwd) * bound
        horizon, rate = cfg.t_fwd, p.alpha - gamma
    if tail >= cfg.tol / 10.0 and not cfg.force:
        needed = np.log(10.0 * p.bound_K * bound / cfg.tol) / rate
        raise TruncationTooShort(
            f"truncation tail {tail:.3e} >= tol/10; horizon {horizon} too short, need >= {needed:.3f}")
    return float(tail)


def lp_backward_solve(p: SpectralProblem, x, cfg: LPConfig) -> tuple:
    """Iterate the backward map to its fixed point. Returns (ensemble, trace)."""
    cfg.validate(p)
    gap = _check_gap(p, cfg, "unstable", None)
    gamma, _ = cfg.rates(p)
    N = round(cfg.t_back / cfg.dt)
    if N < 2 or abs(N * cfg.dt - cfg.t_back) > 1e-6 * cfg.dt:
        raise ConfigError(f"t_back {cfg.t_back} is not a multiple (>= 2) of dt {cfg.dt}")
    grid = TimeGrid(cfg.tau - N * cfg.dt, cfg.dt, N)
    m = p.n_modes
    u_idx, _ = _block_indices(p)
    xarr = np.asarray(x, dtype=float)
    n = xarr.shape[0] if xarr.ndim == 2 else cfg.n_samples
    xu, _ = _normalize_anchor(x, u_idx, m, n)
    tail = _truncation_check(p, cfg, gap, ms_norm(xu), "unstable")
    wiener = None
    if not p.noise.is_zero:
        wiener = sample_wiener(cfg.seed, grid, p.noise, n)
    basis = cfg.basis_for(p)

    cur = ProcessEnsemble(grid=grid, values=_initial_backward(p, grid, xu, u_idx),
                          direction="backward",
                          adapted_to=None if wiener is None else wiener.seed)
    trace = FixedPointTrace(tol=cfg.tol, gap=gap, tail_bound=tail)
    times = grid.times
    for _ in range(cfg.max_iter):
        nxt = lp_backward_map(p, cur, x, cfg, wiener, basis=basis, gap=gap)
        d = _weighted_gap(cur.values, nxt.values, times, cfg.tau, gamma)
        if trace.distances:
            prev = trace.distances[-1]
            if prev > 0:
                trace.ratios.append(d / prev)
        trace.distances.append(d)
        cur = nxt
        if d <= cfg.tol:
            trace.converged = True
            break
    trace.iterations = len(trace.distances)
    trace.ito_check = cur.meta.get("ito_check", {})
    trace.regression = cur.meta.get("regression", {})
    if not trace.converged:
        raise MaxIterExceeded(
            f"no fixed point within {cfg.max_iter} iterations (last distance {trace.distances[-1]:.3e})",
            trace=trace)
    if cfg.check_residual:
        again = lp_backward_map(p, cur, x, cfg, wiener, basis=basis, gap=gap)
        trace.residual = _weighted_gap(cur.values, again.values, times, cfg.tau, gamma)
    return cur, trace


def _stable_integrals_at_end(p: SpectralProblem, ens: ProcessEnsemble,
                             wiener: Optional[WienerEnsemble]) -> np.ndarray:
    """Fresh evaluation of the truncated stable convolution + Ito integral at
    the window end, straight from the given process (dual-route check)."""
    _, s_idx = _block_indices(p)
    grid = ens.grid
    cols = solver_boundary_columns(p)
    dt, N = grid.dt, grid.n_steps
    decay_s = np.exp(p.eigenvalues[s_idx] * dt)
    n = ens.n_samples
    conv = np.zeros((n, len(s_idx)))
    ito_s = np.zeros((n, len(s_idx)))
    has_noise = wiener is not None and not p.noise.is_zero and len(s_idx)
    h_prev = _drift_modes(p, ens.values[:, 0, :], cols)[:, s_idx]
    amp_prev = p.noise.diffusion(ens.values[:, 0, :])[:, s_idx] if has_noise else None
    for j in range(1, N + 1):
        v_j = ens.values[:, j, :]
        h_j = _drift_modes(p, v_j, cols)[:, s_idx]
        conv = decay_s * (conv + 0.5 * dt * h_prev) + 0.5 * dt * h_j
        if has_noise:
            ito_s = decay_s * (ito_s + amp_prev * wiener.increments[:, j - 1, s_idx])
            amp_prev = p.noise.diffusion(v_j)[:, s_idx]
        h_prev = h_j
    return conv + ito_s


def unstable_graph(p: SpectralProblem, x, cfg: LPConfig) -> ManifoldGraph:
    """h(x, tau) = stable block of the fixed point at tau, with a dual-route
    consistency check against the directly recomputed stable integrals."""
    ens, trace = lp_backward_solve(p, x, cfg)
    u_idx, s_idx = _block_indices(p)
    N = ens.grid.n_steps
    anchor = np.array(ens.values[:, N, u_idx])
    h_val = np.array(ens.values[:, N, s_idx])
    wiener = None
    if not p.noise.is_zero:
        wiener = sample_wiener(cfg.seed, ens.grid, p.noise, ens.n_samples)
    other = _stable_integrals_at_end(p, ens, wiener)
    gap_val = ms_norm(h_val - other) if len(s_idx) else 0.0
    if gap_val > 2.0 * cfg.tol:
        raise ConsistencyFailure(
            f"graph value disagrees between routes: {gap_val:.3e} > 2*tol")
    return ManifoldGraph(side="unstable", tau=cfg.tau, anchor=anchor,
                         h_value=h_val, anchor_idx=u_idx, value_idx=s_idx,
                         process=ens, trace=trace, consistency_gap=float(gap_val))


def lp_forward_map(p: SpectralProblem, xi: ProcessEnsemble, x, cfg: LPConfig,
                   wiener: Optional[WienerEnsemble] = None,
                   basis: Optional[RegressionBasis] = None,
                   gap: Optional[GapReport] = None) -> ProcessEnsemble:
    """One application of the forward map on [tau, tau + T_fwd].

    Stable block: pushed-forward anchor plus truncated convolution and Ito
    quadrature over [tau, t]. Unstable block: minus the regression of the
    per-sample drift integral over [t, tau + T_fwd]; the sigma term is zero
    by the martingale property (diagnostic in meta).
    """
    gap = _check_gap(p, cfg, "stable", gap)
    grid = xi.grid
    if abs(grid.t_start - cfg.tau) > 1e-6 * grid.dt:
        raise ConfigError(f"grid starts at {grid.t_start}, config anchors at {cfg.tau}")
    n = xi.n_samples
    m = p.n_modes
    u_idx, s_idx = _block_indices(p)
    xs, _ = _normalize_anchor(x, s_idx, m, n)
    has_noise = not p.noise.is_zero
    if has_noise:
        if wiener is None:
            raise ConfigError("nonzero noise requires the driving Wiener ensemble")
        wiener.check_grid(grid)
    basis = cfg.basis_for(p) if basis is None else basis
    cols = solver_boundary_columns(p)
    dt, N = grid.dt, grid.n_steps
    lam_u, lam_s = p.eigenvalues[u_idx], p.eigenvalues[s_idx]
    decay_u = np.exp(-lam_u * dt)
    decay_s = np.exp(lam_s * dt)
    vals = xi.values
    out = np.zeros((n, grid.n_nodes, m))
    agg: dict = {}

    out[:, 0, s_idx] = xs
    conv = np.zeros((n, len(s_idx)))
    ito_s = np.zeros((n, len(s_idx)))
    h_prev = _drift_modes(p, vals[:, 0, :], cols)[:, s_idx]
    amp_prev = p.noise.diffusion(vals[:, 0, :])[:, s_idx] if has_noise and len(s_idx) else None
    for j in range(1, N + 1):
        v_j = vals[:, j, :]
        h_j = _drift_modes(p, v_j, cols)[:, s_idx]
        conv = decay_s * (conv + 0.5 * dt * h_prev) + 0.5 * dt * h_j
        if amp_prev is not None:
            ito_s = decay_s * (ito_s + amp_prev * wiener.increments[:, j - 1, s_idx])
            amp_prev = p.noise.diffusion(v_j)[:, s_idx]
        h_prev = h_j
        if len(s_idx):
            out[:, j, s_idx] = xs * np.exp(lam_s * (j * dt)) + conv + ito_s

    drift = np.zeros((n, len(u_idx)))
    ito_u = np.zeros((n, len(u_idx)))
    g_next = _drift_modes(p, vals[:, N, :], cols)[:, u_idx]
    # out[:, N, u_idx] stays 0: the drift integral beyond tau + T_fwd is the
    # reported truncation tail
    for j in range(N - 1, -1, -1):
        v_j = vals[:, j, :]
        g_j = _drift_modes(p, v_j, cols)[:, u_idx]
        drift = decay_u * (drift + 0.5 * dt * g_next) + 0.5 * dt * g_j
        if has_noise and len(u_idx):
            amp_u = p.noise.diffusion(v_j)[:, u_idx]
            ito_u = decay_u * ito_u + amp_u * wiener.increments[:, j, u_idx]
        g_next = g_j
        if len(u_idx):
            wv = _wiener_values_at(wiener, j, basis)
            out[:, j, u_idx] = -_conditional_fit(drift, v_j, basis, wv, agg)

    _, ito_diag = condexp_ito_zero(ito_u, (grid.t_start, grid.t_end))
    if not np.isfinite(out).all():
        raise NonfiniteState("forward map produced non-finite values")
    return ProcessEnsemble(grid=grid, values=out, direction="forward",
                           adapted_to=None if wiener is None else wiener.seed,
                           meta={"ito_check": ito_diag, "regression": agg})


def _initial_forward(p, grid, xs, s_idx) -> np.ndarray:
    n = xs.shape[0]
    out = np.zeros((n, grid.n_nodes, p.n_modes))
    if len(s_idx):
        fac = np.exp(np.outer(np.arange(grid.n_nodes) * grid.dt, p.eigenvalues[s_idx]))
        out[:, :, s_idx] = xs[:, None, :] * fac[None, :, :]
    return out


def lp_forward_solve(p: SpectralProblem, x, cfg: LPConfig) -> tuple:
    """Iterate the forward map. Returns (ensemble, trace, membership); a run
    that fails to converge reports membership False instead of raising."""
    cfg.validate(p)
    gap = _check_gap(p, cfg, "stable", None)
    gamma, _ = cfg.rates(p)
    N = round(cfg.t_fwd / cfg.dt)
    if N < 2 or abs(N * cfg.dt - cfg.t_fwd) > 1e-6 * cfg.dt:
        raise ConfigError(f"t_fwd {cfg.t_fwd} is not a multiple (>= 2) of dt {cfg.dt}")
    grid = TimeGrid(cfg.tau, cfg.dt, N)
    m = p.n_modes
    _, s_idx = _block_indices(p)
    xarr = np.asarray(x, dtype=float)
    n = xarr.shape[0] if xarr.ndim == 2 else cfg.n_samples
    xs, _ = _normalize_anchor(x, s_idx, m, n)
    tail = _truncation_check(p, cfg, gap, ms_norm(xs), "stable")
    wiener = None
    if not p.noise.is_zero:
        wiener = sample_wiener(cfg.seed, grid, p.noise, n)
    basis = cfg.basis_for(p)

    cur = ProcessEnsemble(grid=grid, values=_initial_forward(p, grid, xs, s_idx),
                          direction="forward",
                          adapted_to=None if wiener is None else wiener.seed)
    trace = FixedPointTrace(tol=cfg.tol, gap=gap, tail_bound=tail)
    times = grid.times
    membership = False
    try:
        for _ in range(cfg.max_iter):
            nxt = lp_forward_map(p, cur, x, cfg, wiener, basis=basis, gap=gap)
            d = _weighted_gap(cur.values, nxt.values, times, cfg.tau, gamma)
            if trace.distances:
                prev = trace.distances[-1]
                if prev > 0:
                    trace.ratios.append(d / prev)
            trace.distances.append(d)
            cur = nxt
            if d <= cfg.tol:
                trace.converged = True
                membership = True
                break
    except NonfiniteState as exc:
        trace.regression = {"aborted": str(exc)}
    trace.iterations = len(trace.distances)
    trace.ito_check = cur.meta.get("ito_check", {})
    if not trace.regression:
        trace.regression = cur.meta.get("regression", {})
    if membership and cfg.check_residual:
        again = lp_forward_map(p, cur, x, cfg, wiener, basis=basis, gap=gap)
        trace.residual = _weighted_gap(cur.values, again.values, times, cfg.tau, gamma)
    return cur, trace, membership


def _unstable_drift_at_start(p: SpectralProblem, ens: ProcessEnsemble,
                             basis: RegressionBasis, wiener, agg: dict) -> np.ndarray:
    """Fresh regression of the forward drift integral at tau (dual route)."""
    u_idx, _ = _block_indices(p)
    grid = ens.grid
    cols = solver_boundary_columns(p)
    dt, N = grid.dt, grid.n_steps
    decay_u = np.exp(-p.eigenvalues[u_idx] * dt)
    n = ens.n_samples
    drift = np.zeros((n, len(u_idx)))
    g_next = _drift_modes(p, ens.values[:, N, :], cols)[:, u_idx]
    for j in range(N - 1, -1, -1):
        g_j = _drift_modes(p, ens.values[:, j, :], cols)[:, u_idx]
        drift = decay_u * (drift + 0.5 * dt * g_next) + 0.5 * dt * g_j
        g_next = g_j
    wv = _wiener_values_at(wiener, 0, basis)
    return -_conditional_fit(drift, ens.values[:, 0, :], basis, wv, agg)


def stable_graph(p: SpectralProblem, x, cfg: LPConfig) -> ManifoldGraph:
    """h(x, tau) = unstable block of the forward fixed point at tau; raises
    when the anchor is not certified as a member of the stable set."""
    ens, trace, membership = lp_forward_solve(p, x, cfg)
    if not membership:
        raise MaxIterExceeded("anchor is not in the stable set (no converged fixed point)",
                              trace=trace)
    u_idx, s_idx = _block_indices(p)
    anchor = np.array(ens.values[:, 0, s_idx])
    h_val = np.array(ens.values[:, 0, u_idx])
    wiener = None
    if not p.noise.is_zero:
        wiener = sample_wiener(cfg.seed, ens.grid, p.noise, ens.n_samples)
    other = _unstable_drift_at_start(p, ens, cfg.basis_for(p), wiener, {})
    gap_val = ms_norm(h_val - other) if len(u_idx) else 0.0
    if gap_val > 2.0 * cfg.tol:
        raise ConsistencyFailure(
            f"graph value disagrees between routes: {gap_val:.3e} > 2*tol")
    return ManifoldGraph(side="stable", tau=cfg.tau, anchor=anchor,
                         h_value=h_val, anchor_idx=s_idx, value_idx=u_idx,
                         process=ens, trace=trace, consistency_gap=float(gap_val))


def _graph_for_side(p, x, cfg, side: str) -> ManifoldGraph:
    return unstable_graph(p, x, cfg) if side == "unstable" else stable_graph(p, x, cfg)


def lipschitz_bound(p: SpectralProblem, cfg: LPConfig, side: str) -> float:
    gap = gap_report_for(p, cfg)
    gamma, _ = cfg.rates(p)
    L1, L2 = p.nonlinearity.lipschitz_L1, p.noise.lipschitz_L2
    if side == "unstable":
        return p.bound_K * cfg.c_zeta * (L1 + L2) / (1.0 - gap.eta)
    ag = p.alpha - gamma
    return (p.bound_K ** 2 * (L1 / ag + L2 / np.sqrt(2.0 * ag))
            / (1.0 - gap.delta))


def lipschitz_certify(p: SpectralProblem, cfg: LPConfig, side: str,
                      anchor_pairs: Sequence) -> LipschitzCertificate:
    """Empirical Lipschitz ratio of the graph map over anchor pairs, checked
    against the theoretical bound with multiplicative slack."""
    _check_gap(p, cfg, side, None)
    bound = lipschitz_bound(p, cfg, side)
    cache: dict = {}

    def graph_of(anchor):
        key = np.asarray(anchor, dtype=float).tobytes()
        if key not in cache:
            cache[key] = _graph_for_side(p, anchor, cfg, side)
        return cache[key]

    ratios = []
    for x1, x2 in anchor_pairs:
        g1, g2 = graph_of(x1), graph_of(x2)
        den = ms_norm(g1.anchor - g2.anchor)
        num = ms_norm(g1.h_value - g2.h_value)
        ratios.append(0.0 if den < 1e-300 else num / den)
    empirical = max(ratios) if ratios else 0.0
    return LipschitzCertificate(side=side, theoretical=float(bound),
                                empirical=float(empirical),
                                passed=bool(empirical <= bound * (1.0 + cfg.slack)),
                                slack=cfg.slack, ratios=tuple(ratios))


def invariance_residual(p: SpectralProblem, x, cfg: LPConfig, t0: float,
                        side: str = "unstable") -> float:
    """Evolve a graph point by the mild flow for t0, recompute the graph at
    the shifted anchor time with the same coupled noise, and return the
    mean-square mismatch of the graph value at the endpoint."""
    steps = round(t0 / cfg.dt)
    if steps < 1 or abs(steps * cfg.dt - t0) > 1e-6 * cfg.dt:
        raise ConfigError(f"t0 {t0} is not a positive multiple of dt {cfg.dt}")
    g1 = _graph_for_side(p, x, cfg, side)
    u0 = g1.point()
    grid_f = TimeGrid(cfg.tau, cfg.dt, steps)
    wiener = None
    if not p.noise.is_zero:
        wiener = sample_wiener(cfg.seed, grid_f, p.noise, g1.n_samples)
    flow = integrate_mild(p, u0, grid_f, wiener)
    end = flow.values[:, -1, :]
    cfg2 = replace(cfg, tau=cfg.tau + steps * cfg.dt,
                   n_samples=g1.n_samples)
    anchor2 = end[:, g1.anchor_idx]
    g2 = _graph_for_side(p, anchor2, cfg2, side)
    defect = end[:, g1.value_idx] - g2.h_value
    if wiener is not None:
        # The graph is a conditional-mean object: individual paths carry a
        # fluctuation around it that no dt or sample refinement removes.
        # Project the pathwise defect onto the anchor coordinates so the
        # residual measures the conditional-mean mismatch instead.
        b = RegressionBasis(kind=cfg.basis_kind, degree=cfg.basis_degree,
                            primary_idx=tuple(range(anchor2.shape[1])))
        defect = condexp_lsmc(defect, anchor2, b).fitted
    return float(ms_norm(defect))
