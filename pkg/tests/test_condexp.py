import math

import numpy as np
import pytest

from msmanifold.errors import (
    AdaptednessViolation,
    ConfigError,
    IllConditionedDesign,
    Underdetermined,
)
from msmanifold import (
    RegressionBasis,
    TimeGrid,
    build_problem,
    condexp_anchor,
    condexp_ito_zero,
    condexp_lsmc,
    default_basis,
    diagonal_linear_noise,
    sample_wiener,
    zero_noise,
    zero_nonlinearity,
)


def two_mode():
    return build_problem([1.0, -1.0], [0], alpha=1.0, beta=-1.0, gamma=0.0,
                         zeta=-0.5, nonlinearity=zero_nonlinearity(2),
                         noise=zero_noise(2))


def scalar_basis(degree=2, kind="polynomial"):
    return RegressionBasis(kind=kind, degree=degree, primary_idx=(0,))


def wiener_pair(seed, t, tau, n):
    """(W(t), W(tau)) sampled jointly on a dt=0.01 lattice."""
    steps = round(tau / 0.01)
    g = TimeGrid(0.0, 0.01, steps)
    w = sample_wiener(seed, g, diagonal_linear_noise([1.0]), n)
    return w.value_at(g.index_of(t))[:, 0], w.value_at(steps)[:, 0]


# ------------------------------------------------------------------- basics

def test_default_basis_shape_for_two_mode_problem():
    p = two_mode()
    b = default_basis(p)
    # 1, u, u^2 over the unstable coordinate plus the stable coordinate
    assert b.size == 4
    state = np.array([[2.0, 3.0]])
    row = b.design(state)[0]
    assert np.allclose(row, [1.0, 2.0, 4.0, 3.0], atol=1e-15)


def test_basis_rejects_bad_parameters():
    with pytest.raises(ConfigError):
        RegressionBasis(kind="fourier")
    with pytest.raises(ConfigError):
        RegressionBasis(degree=-1)
    with pytest.raises(ConfigError):
        RegressionBasis(include_wiener=True, n_wiener=0)


def test_in_span_target_recovered_exactly():
    rng = np.random.default_rng(2)
    u = rng.standard_normal((500, 1))
    target = 0.3 - 1.2 * u[:, 0] + 0.5 * u[:, 0] ** 2
    est = condexp_lsmc(target, u, scalar_basis())
    # exactness is limited by the ridge floor, not the solver
    assert np.max(np.abs(est.fitted - target)) < 1e-7
    assert est.diagnostics["r2"][0] > 1.0 - 1e-12


def test_lsmc_gaussian_conditional_mean():
    wt, wtau = wiener_pair(101, 0.5, 1.0, 100_000)
    est = condexp_lsmc(wtau, wt[:, None], scalar_basis(degree=1))
    # E[W(tau)|F_t] = W(t): slope 1, intercept 0 within 4 standard errors
    se = est.coef_se()
    assert abs(est.coef[1] - 1.0) <= 4 * se[1]
    assert abs(est.coef[0]) <= 4 * se[0]


def test_lsmc_gaussian_conditional_second_moment():
    t, tau = 0.5, 1.0
    wt, wtau = wiener_pair(103, t, tau, 100_000)
    est = condexp_lsmc(wtau ** 2, wt[:, None], scalar_basis(degree=2))
    se = est.coef_se()
    # E[W(tau)^2|F_t] = W(t)^2 + (tau - t)
    assert abs(est.coef[0] - (tau - t)) <= 4 * se[0]
    assert abs(est.coef[1]) <= 4 * se[1]
    assert abs(est.coef[2] - 1.0) <= 4 * se[2]


def test_lsmc_projection_is_idempotent():
    rng = np.random.default_rng(4)
    u = rng.standard_normal((2000, 1))
    target = np.tanh(u[:, 0]) + 0.1 * rng.standard_normal(2000)
    first = condexp_lsmc(target, u, scalar_basis())
    second = condexp_lsmc(first.fitted, u, scalar_basis())
    assert np.max(np.abs(second.fitted - first.fitted)) < 1e-8


def test_lsmc_tower_property():
    n = 100_000
    steps = 100
    g = TimeGrid(0.0, 0.01, steps)
    w = sample_wiener(107, g, diagonal_linear_noise([1.0]), n)
    w25 = w.value_at(25)[:, 0]
    w50 = w.value_at(50)[:, 0]
    y = w.value_at(100)[:, 0] ** 2
    inner = condexp_lsmc(y, w50[:, None], scalar_basis())
    outer = condexp_lsmc(inner.fitted, w25[:, None], scalar_basis())
    direct = condexp_lsmc(y, w25[:, None], scalar_basis())
    gap = math.sqrt(np.mean((outer.fitted - direct.fitted) ** 2))
    scale = math.sqrt(np.mean(direct.fitted ** 2))
    assert gap <= 0.05 * scale


def test_lsmc_fitted_values_are_functions_of_state():
    rng = np.random.default_rng(6)
    u = rng.standard_normal((1000, 1))
    u[1] = u[0]   # duplicated conditioning state, distinct targets
    target = rng.standard_normal(1000)
    est = condexp_lsmc(target, u, scalar_basis())
    assert est.fitted[0] == est.fitted[1]


def test_lsmc_multi_column_targets_share_design():
    rng = np.random.default_rng(8)
    u = rng.standard_normal((800, 1))
    t1 = 1.0 + u[:, 0]
    t2 = u[:, 0] ** 2
    est = condexp_lsmc(np.stack([t1, t2], axis=1), u, scalar_basis())
    assert est.fitted.shape == (800, 2)
    assert np.max(np.abs(est.fitted[:, 0] - t1)) < 1e-8
    assert np.max(np.abs(est.fitted[:, 1] - t2)) < 1e-8


def test_lsmc_constant_columns_fold_into_intercept():
    # Degenerate coordinates (deep backward windows) must not masquerade as
    # ill-conditioning; they carry no information and fold away.
    rng = np.random.default_rng(10)
    n = 500
    state = np.zeros((n, 2))
    state[:, 0] = 1e-14 * rng.standard_normal(n) + 2.0   # numerically constant
    state[:, 1] = rng.standard_normal(n)
    basis = RegressionBasis(degree=2, primary_idx=(0,), linear_idx=(1,))
    target = 0.7 + 0.3 * state[:, 1]
    est = condexp_lsmc(target, state, basis)
    assert est.diagnostics["n_folded"] >= 2
    assert est.diagnostics["cond"] < 1e3
    assert np.max(np.abs(est.fitted - target)) < 1e-8


def test_lsmc_folds_duplicate_columns():
    rng = np.random.default_rng(12)
    n = 400
    u = rng.standard_normal(n)
    state = np.stack([u, u], axis=1)    # duplicated random column
    basis = RegressionBasis(degree=1, primary_idx=(0, 1))
    est = condexp_lsmc(0.7 + 0.3 * u, state, basis)
    assert est.diagnostics["n_aliased"] == 1
    assert est.diagnostics["cond"] < 1e3
    assert np.max(np.abs(est.fitted - (0.7 + 0.3 * u))) < 1e-7
    assert est.coef[2] == 0.0           # dropped column carries no weight


def test_lsmc_detects_true_collinearity():
    # A three-way dependency has no duplicate pair to fold away, so the
    # conditioning guard still refuses the design.
    rng = np.random.default_rng(12)
    n = 400
    x = rng.standard_normal(n)
    y = rng.standard_normal(n)
    state = np.stack([x, y, x + y], axis=1)
    basis = RegressionBasis(degree=1, primary_idx=(0, 1, 2))
    with pytest.raises(IllConditionedDesign):
        condexp_lsmc(x, state, basis)


def test_lsmc_rejects_underdetermined_designs():
    u = np.random.default_rng(14).standard_normal((10, 1))
    with pytest.raises(Underdetermined):
        condexp_lsmc(u[:9, 0], u[:9], scalar_basis())   # 9 <= 3 * basis size
    with pytest.raises(Underdetermined):
        condexp_lsmc(u[:5, 0], u[:5], scalar_basis())
    condexp_lsmc(u[:, 0], u, scalar_basis())            # 10 samples is enough


def test_hermite_basis_spans_same_space():
    rng = np.random.default_rng(16)
    u = rng.standard_normal((3000, 1))
    target = 1.0 - u[:, 0] + 0.25 * u[:, 0] ** 2
    poly = condexp_lsmc(target, u, scalar_basis(kind="polynomial"))
    herm = condexp_lsmc(target, u, scalar_basis(kind="tensor-hermite"))
    assert np.max(np.abs(poly.fitted - herm.fitted)) < 1e-9


def test_lsmc_diagnostics_reported():
    rng = np.random.default_rng(18)
    u = rng.standard_normal((600, 1))
    est = condexp_lsmc(u[:, 0] ** 2, u, scalar_basis())
    d = est.diagnostics
    for key in ("n_samples", "basis_size", "cond", "ridge", "r2", "normal_resid"):
        assert key in d
    assert d["n_samples"] == 600
    assert d["basis_size"] == 3
    assert d["normal_resid"] < 1e-8
    assert est.coef_se().shape == est.coef.shape


# ------------------------------------------------------------------- anchor

def test_condexp_anchor_deterministic_short_circuit():
    state = np.random.default_rng(20).standard_normal((100, 1))
    x = np.full((100, 1), 0.25)
    est = condexp_anchor(x, state, scalar_basis())
    assert np.array_equal(est.fitted, x)
    assert est.diagnostics["deterministic"]


def test_condexp_anchor_gaussian_oracle():
    t, tau, n = 0.5, 1.0, 50_000
    wt, wtau = wiener_pair(109, t, tau, n)
    est = condexp_anchor(wtau[:, None], wt[:, None], scalar_basis(degree=1))
    # E[W(tau)|F_t] = W(t); the fit deviates by the intercept/slope sampling
    # error, which scales with the regression noise sqrt(tau - t)
    resid = est.fitted[:, 0] - wt
    assert abs(resid.mean()) <= 4 * math.sqrt(tau - t) / math.sqrt(n)
    assert not est.diagnostics.get("deterministic", False)


def test_condexp_anchor_symmetric_sign_functional():
    # E[sign(W(tau)) | F_0] = 0: the conditioning state is constant, so the
    # design folds to the intercept and the fit is the raw mean.
    _, wtau = wiener_pair(111, 0.5, 1.0, 50_000)
    x = np.sign(wtau)[:, None]
    state = np.zeros((wtau.size, 1))
    est = condexp_anchor(x, state, scalar_basis())
    assert np.max(np.abs(est.fitted)) <= 4.0 / math.sqrt(wtau.size)


# ---------------------------------------------------------------- ito zeros

def test_ito_zero_plain_increment():
    n = 100_000
    g = TimeGrid(0.0, 0.01, 100)
    w = sample_wiener(113, g, diagonal_linear_noise([1.0]), n)
    sums = w.value_at(100)[:, 0]   # int_0^1 dW
    zeros, diag = condexp_ito_zero(sums, (0.0, 1.0))
    assert np.all(zeros == 0.0)
    assert diag["ok"]
    assert diag["raw_mean"] <= 4.0 / math.sqrt(n) * 1.05


def test_ito_zero_martingale_integrand():
    # int_0^1 W dW = (W(1)^2 - 1)/2 has mean zero
    n = 100_000
    g = TimeGrid(0.0, 0.01, 100)
    w = sample_wiener(115, g, diagonal_linear_noise([1.0]), n)
    vals = w.values()[:, :, 0]
    sums = np.sum(vals[:, :-1] * np.diff(vals, axis=1), axis=1)
    zeros, diag = condexp_ito_zero(sums, (0.0, 1.0))
    assert np.all(zeros == 0.0)
    assert diag["ok"]


def test_ito_zero_degenerate_window():
    zeros, diag = condexp_ito_zero(np.ones(10), (0.5, 0.5))
    assert np.all(zeros == 0.0)
    assert diag["ok"] and diag["raw_mean"] == 0.0


def test_ito_zero_guards():
    with pytest.raises(AdaptednessViolation):
        condexp_ito_zero(np.ones(10), (0.0, 1.0), adapted=False)
    with pytest.raises(ConfigError):
        condexp_ito_zero(np.ones(10), (1.0, 0.0))
