"""JSON problem and run configuration.

One file describes one problem plus, optionally, one run recipe.  The
config is the reproducibility key: reports embed its canonical sha256,
and two runs with equal hash and seed must produce byte-identical
numeric payloads.  Reconstruction is purely from the file contents;
nothing is recomputed that the file already pins (in particular the
frozen boundary-regularizer columns of the example problem).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from typing import Optional

import numpy as np

from .errors import ConfigError
from .problem import (NoiseModel, NonlinearityModel, SpectralProblem,
                      build_problem, diagonal_linear_noise, linear_nonlinearity,
                      saturated_polynomial_nonlinearity, saturated_noise,
                      zero_noise, zero_nonlinearity)

__all__ = [
    "SCHEMA",
    "canonical_json",
    "config_hash",
    "jsonable",
    "load_config",
    "validate_config",
    "problem_from_config",
    "lp_config_from_run",
    "anchor_from_run",
    "example_problem_config",
]

SCHEMA = "msmanifold/1"

_RATE_KEYS = {"alpha", "beta", "gamma", "zeta", "bound_K"}
_PROBLEM_KEYS = {"kind", "eigenvalues", "unstable_modes", "rates",
                 "nonlinearity", "noise", "boundary"}
_RUN_KEYS = {"side", "anchor", "tau", "t_back", "t_fwd", "dt", "n_samples",
             "seed", "tol", "max_iter", "c_zeta", "gamma", "zeta",
             "basis_degree", "basis_kind", "include_wiener",
             "check_residual", "slack", "t0"}

_RUN_DEFAULTS = {
    "side": "unstable",
    "tau": 0.0,
    "t_back": 1.0,
    "t_fwd": 1.0,
    "dt": 1e-3,
    "n_samples": 2,
    "seed": 0,
    "tol": 1e-6,
    "max_iter": 50,
    "c_zeta": 0.5,
    "gamma": None,
    "zeta": None,
    "basis_degree": 2,
    "basis_kind": "polynomial",
    "include_wiener": False,
    "check_residual": True,
    "slack": 0.25,
    "t0": 1.0,
}


def jsonable(obj):
    """Recursively convert numpy containers to plain JSON types."""
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return obj
    if hasattr(obj, "as_dict"):
        return jsonable(obj.as_dict())
    raise ConfigError(f"cannot serialize {type(obj).__name__} to JSON")


def canonical_json(obj) -> str:
    """Sorted keys, minimal separators; repr-exact floats."""
    return json.dumps(jsonable(obj), sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def _check_keys(block: dict, allowed: set, where: str):
    unknown = set(block) - allowed
    _require(not unknown, f"unknown {where} keys: {sorted(unknown)}")


def _float_list(x, where: str) -> list:
    arr = np.asarray(x, dtype=float)
    _require(arr.ndim == 1 and arr.size > 0 and bool(np.all(np.isfinite(arr))),
             f"{where} must be a nonempty finite list")
    return [float(v) for v in arr]


def validate_config(cfg: dict) -> dict:
    """Structural validation; returns a normalized deep copy.

    Physics-level checks (rate ordering, spectral gaps, F(0)=0) belong to
    build_problem and run there, not here.
    """
    _require(isinstance(cfg, dict), "config must be a JSON object")
    _check_keys(cfg, {"schema", "problem", "run"}, "top-level")
    _require(cfg.get("schema") == SCHEMA,
             f"schema must be {SCHEMA!r}, got {cfg.get('schema')!r}")
    _require(isinstance(cfg.get("problem"), dict), "missing problem block")

    prob = dict(cfg["problem"])
    _check_keys(prob, _PROBLEM_KEYS, "problem")
    kind = prob.get("kind", "custom")
    _require(kind in ("custom", "neumann-flux-example"),
             f"unknown problem kind {kind!r}")
    eigs = _float_list(prob.get("eigenvalues"), "eigenvalues")
    m = len(eigs)
    u_modes = prob.get("unstable_modes", [])
    _require(isinstance(u_modes, list)
             and all(isinstance(i, int) and 0 <= i < m for i in u_modes),
             "unstable_modes must be a list of in-range mode indices")

    rates = prob.get("rates")
    _require(isinstance(rates, dict), "missing rates block")
    _check_keys(rates, _RATE_KEYS, "rates")
    for key in ("alpha", "beta", "gamma", "zeta"):
        _require(isinstance(rates.get(key), (int, float)),
                 f"rates.{key} must be a number")
    rates = {k: float(v) for k, v in rates.items()}
    rates.setdefault("bound_K", 1.0)

    nl = _validate_nonlinearity(prob.get("nonlinearity", {"kind": "zero"}), m)
    noise = _validate_noise(prob.get("noise", {"kind": "zero"}), m)
    boundary = _validate_boundary(prob.get("boundary"), m)
    _require(not (nl["kind"] == "boundary-linear" and boundary is None),
             "boundary-linear nonlinearity needs a boundary block")

    out = {
        "schema": SCHEMA,
        "problem": {
            "kind": kind,
            "eigenvalues": eigs,
            "unstable_modes": [int(i) for i in u_modes],
            "rates": rates,
            "nonlinearity": nl,
            "noise": noise,
            "boundary": boundary,
        },
    }
    if cfg.get("run") is not None:
        run = dict(cfg["run"])
        _check_keys(run, _RUN_KEYS, "run")
        merged = dict(_RUN_DEFAULTS)
        merged.update(run)
        _require(merged["side"] in ("unstable", "stable"),
                 "run.side must be unstable or stable")
        for key in ("tau", "t_back", "t_fwd", "dt", "tol", "c_zeta",
                    "slack", "t0"):
            _require(isinstance(merged[key], (int, float)),
                     f"run.{key} must be a number")
            merged[key] = float(merged[key])
        for key in ("n_samples", "seed", "max_iter", "basis_degree"):
            _require(isinstance(merged[key], int),
                     f"run.{key} must be an integer")
        for key in ("gamma", "zeta"):
            if merged[key] is not None:
                merged[key] = float(merged[key])
        _require(merged["basis_kind"] in ("polynomial", "tensor-hermite"),
                 "run.basis_kind must be polynomial or tensor-hermite")
        if merged.get("anchor") is not None:
            merged["anchor"] = _float_list(merged["anchor"], "run.anchor")
        else:
            merged["anchor"] = None
        out["run"] = merged
    return out


def _validate_nonlinearity(nl, m: int) -> dict:
    _require(isinstance(nl, dict) and "kind" in nl,
             "nonlinearity must be an object with a kind")
    kind = nl["kind"]
    if kind == "zero":
        _check_keys(nl, {"kind"}, "nonlinearity")
        return {"kind": "zero"}
    if kind == "linear":
        _check_keys(nl, {"kind", "matrix"}, "nonlinearity")
        mat = np.asarray(nl.get("matrix"), dtype=float)
        _require(mat.shape == (m, m), f"linear matrix must be {m}x{m}")
        return {"kind": "linear", "matrix": mat.tolist()}
    if kind == "saturated_polynomial":
        _check_keys(nl, {"kind", "coefficients", "radius"}, "nonlinearity")
        coeffs = _float_list(nl.get("coefficients"), "coefficients")
        radius = nl.get("radius")
        _require(isinstance(radius, (int, float)) and radius > 0,
                 "saturation radius must be positive")
        return {"kind": "saturated_polynomial", "coefficients": coeffs,
                "radius": float(radius)}
    if kind == "boundary-linear":
        _check_keys(nl, {"kind", "g0_matrix", "g1_coefficients",
                         "g2_coefficients"}, "nonlinearity")
        out = {"kind": "boundary-linear"}
        g0 = nl.get("g0_matrix")
        if g0 is not None:
            g0 = np.asarray(g0, dtype=float)
            _require(g0.shape == (m, m), f"g0_matrix must be {m}x{m}")
            out["g0_matrix"] = g0.tolist()
        else:
            out["g0_matrix"] = None
        for key in ("g1_coefficients", "g2_coefficients"):
            val = nl.get(key)
            out[key] = None if val is None else _float_list(val, key)
        return out
    raise ConfigError(f"unknown nonlinearity kind {kind!r}")


def _validate_noise(noise, m: int) -> dict:
    _require(isinstance(noise, dict) and "kind" in noise,
             "noise must be an object with a kind")
    kind = noise["kind"]
    if kind == "zero":
        _check_keys(noise, {"kind"}, "noise")
        return {"kind": "zero"}
    if kind in ("diagonal_linear", "saturated"):
        allowed = {"kind", "slopes", "covariance_weights"}
        if kind == "saturated":
            allowed.add("radius")
        _check_keys(noise, allowed, "noise")
        slopes = _float_list(noise.get("slopes"), "noise.slopes")
        _require(len(slopes) == m, f"noise.slopes must have length {m}")
        out = {"kind": kind, "slopes": slopes}
        cw = noise.get("covariance_weights")
        out["covariance_weights"] = None if cw is None else \
            _float_list(cw, "covariance_weights")
        if out["covariance_weights"] is not None:
            _require(len(out["covariance_weights"]) == m,
                     f"covariance_weights must have length {m}")
        if kind == "saturated":
            radius = noise.get("radius")
            _require(isinstance(radius, (int, float)) and radius > 0,
                     "noise radius must be positive")
            out["radius"] = float(radius)
        return out
    raise ConfigError(f"unknown noise kind {kind!r}")


def _validate_boundary(boundary, m: int):
    if boundary is None:
        return None
    _require(isinstance(boundary, dict), "boundary must be an object")
    _check_keys(boundary, {"operator_shift", "ladder", "columns",
                           "regularizer", "diagnostic"}, "boundary")
    shift = boundary.get("operator_shift")
    _require(isinstance(shift, (int, float)), "operator_shift must be a number")
    ladder = _float_list(boundary.get("ladder"), "boundary.ladder")
    _require(all(b > a for a, b in zip(ladder, ladder[1:])),
             "boundary.ladder must increase strictly")
    reg = np.asarray(boundary.get("regularizer"), dtype=float)
    _require(reg.shape == (m, 2), f"regularizer must be {m}x2")
    cols = boundary.get("columns", {})
    _require(isinstance(cols, dict), "boundary.columns must be an object")
    norm_cols = {}
    for key, val in cols.items():
        arr = np.asarray(val, dtype=float)
        _require(arr.shape == (m, 2), f"column block {key} must be {m}x2")
        norm_cols[str(key)] = arr.tolist()
    return {
        "operator_shift": float(shift),
        "ladder": ladder,
        "columns": norm_cols,
        "regularizer": reg.tolist(),
        "diagnostic": jsonable(boundary.get("diagnostic", {})),
    }


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    return validate_config(raw)


def _nonlinearity_from(nl: dict, m: int, boundary) -> NonlinearityModel:
    kind = nl["kind"]
    if kind == "zero":
        return zero_nonlinearity(m)
    if kind == "linear":
        return linear_nonlinearity(np.asarray(nl["matrix"]))
    if kind == "saturated_polynomial":
        return saturated_polynomial_nonlinearity(nl["coefficients"],
                                                 nl["radius"])
    if kind == "boundary-linear":
        from .example_pde import boundary_flux_nonlinearity

        g0 = nl.get("g0_matrix")
        return boundary_flux_nonlinearity(
            m,
            g0=None if g0 is None else np.asarray(g0, dtype=float),
            g1=None if nl.get("g1_coefficients") is None
            else np.asarray(nl["g1_coefficients"], dtype=float),
            g2=None if nl.get("g2_coefficients") is None
            else np.asarray(nl["g2_coefficients"], dtype=float))
    raise ConfigError(f"unknown nonlinearity kind {kind!r}")


def _noise_from(noise: dict, m: int) -> NoiseModel:
    kind = noise["kind"]
    if kind == "zero":
        return zero_noise(m)
    if kind == "diagonal_linear":
        return diagonal_linear_noise(noise["slopes"],
                                     noise.get("covariance_weights"))
    if kind == "saturated":
        return saturated_noise(noise["slopes"], noise["radius"],
                               noise.get("covariance_weights"))
    raise ConfigError(f"unknown noise kind {kind!r}")


def problem_from_config(cfg: dict) -> SpectralProblem:
    """Build the problem pinned by a validated config."""
    prob = cfg["problem"]
    m = len(prob["eigenvalues"])
    rates = prob["rates"]
    boundary = prob.get("boundary")
    nonlinearity = _nonlinearity_from(prob["nonlinearity"], m, boundary)
    noise = _noise_from(prob["noise"], m)

    regularizer = None
    meta = {"family": prob["kind"]}
    if boundary is not None:
        regularizer = np.asarray(boundary["regularizer"], dtype=float)
        meta.update({
            "operator_shift": boundary["operator_shift"],
            "ladder": tuple(boundary["ladder"]),
            "boundary_columns": {k: np.asarray(v, dtype=float)
                                 for k, v in boundary["columns"].items()},
            "ladder_diagnostic": boundary.get("diagnostic", {}),
        })
    return build_problem(prob["eigenvalues"], prob["unstable_modes"],
                         rates["alpha"], rates["beta"], rates["gamma"],
                         rates["zeta"], nonlinearity, noise,
                         bound_K=rates.get("bound_K", 1.0),
                         boundary_regularizer=regularizer, meta=meta)


def lp_config_from_run(run: dict, force: bool = False):
    """Translate a validated run block into the solver configuration."""
    from .lyapunov_perron import LPConfig

    return LPConfig(
        c_zeta=run["c_zeta"], tau=run["tau"], t_back=run["t_back"],
        t_fwd=run["t_fwd"], dt=run["dt"], n_samples=run["n_samples"],
        seed=run["seed"], tol=run["tol"], max_iter=run["max_iter"],
        gamma=run["gamma"], zeta=run["zeta"], c_zeta_source="config",
        basis_degree=run["basis_degree"], basis_kind=run["basis_kind"],
        include_wiener=run["include_wiener"],
        check_residual=run["check_residual"], force=force,
        slack=run["slack"])


def anchor_from_run(run: dict, p: SpectralProblem) -> np.ndarray:
    side = run["side"]
    width = len(p.unstable_modes) if side == "unstable" else len(p.stable_modes)
    anchor = run.get("anchor")
    if anchor is None:
        return np.full(width, 0.1)
    anchor = np.asarray(anchor, dtype=float)
    if anchor.size not in (width, p.n_modes):
        raise ConfigError(f"anchor must have {width} (or {p.n_modes}) entries, "
                          f"got {anchor.size}")
    return anchor


def example_problem_config(p: SpectralProblem, run: Optional[dict] = None) -> dict:
    """Emit the fully explicit config for a problem built by
    build_example_problem, frozen columns included."""
    nl = p.nonlinearity
    if not nl.returns_boundary:
        raise ConfigError("not a boundary-forced example problem")
    params = nl.params.get("config")
    if params is None:
        raise ConfigError("nonlinearity does not carry its config form; "
                          "build it from linear coefficient arrays")
    noise = p.noise
    if noise.is_zero:
        noise_cfg = {"kind": "zero"}
    else:
        kind = {"diagonal-linear": "diagonal_linear",
                "saturated": "saturated"}.get(noise.kind)
        if kind is None:
            raise ConfigError(f"noise kind {noise.kind!r} has no config form")
        noise_cfg = {
            "kind": kind,
            "slopes": jsonable(noise.params.get("slopes")),
            "covariance_weights": jsonable(noise.covariance_weights),
        }
        if kind == "saturated":
            noise_cfg["radius"] = float(noise.params["radius"])
    cfg = {
        "schema": SCHEMA,
        "problem": {
            "kind": "neumann-flux-example",
            "eigenvalues": jsonable(p.eigenvalues),
            "unstable_modes": [int(i) for i in p.unstable_modes],
            "rates": {"alpha": p.alpha, "beta": p.beta, "gamma": p.gamma,
                      "zeta": p.zeta, "bound_K": p.bound_K},
            "nonlinearity": params,
            "noise": noise_cfg,
            "boundary": {
                "operator_shift": p.meta["operator_shift"],
                "ladder": list(p.meta["ladder"]),
                "columns": jsonable(p.meta["boundary_columns"]),
                "regularizer": jsonable(p.boundary_regularizer),
                "diagnostic": jsonable(p.meta.get("ladder_diagnostic", {})),
            },
        },
    }
    if run is not None:
        cfg["run"] = dict(run)
    return validate_config(cfg)
