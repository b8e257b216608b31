"""Maximum-likelihood fitting, inference, and inclusive-value diagnostics.

The optimizer is a BHHH quasi-Newton ascent: the search metric is the outer
product of per-observation scores (the same matrix the default covariance
estimator uses), with an Armijo backtracking line search enforcing sufficient
increase. Convergence is declared exactly when the max-norm of the total
gradient drops below the tolerance. Accepted steps never decrease the
log-likelihood, so the returned point always dominates the documented start
(all betas 0, free inclusive values at their configured starts, 0.5 by
default).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernel
from .model import (
    ModelSpec,
    ParameterVector,
    build_design,
    iv_parameter_name,
    parameter_layout,
    validate_spec,
)

#: |estimate| beyond which a coefficient is treated as a separation symptom.
SEPARATION_CAP = 25.0

#: Two-sided normal critical values for the 1 / 5 / 10 percent star levels.
STAR_LEVELS = ((2.576, "***"), (1.960, "**"), (1.645, "*"))

VALID_STRONG = "valid_strong_correlation"
VALID_WEAK = "valid_weak_correlation"
BOUNDARY = "boundary"
VIOLATION = "violation"

#: Inclusive values at or above this are "near 1" (weak correlation).
WEAK_CORRELATION_THRESHOLD = 0.9


class SpecificationError(ValueError):
    """Raised when a structurally invalid spec reaches the estimator."""


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    iv_parameterization: str = "direct"  # or "logistic"
    null_model: str = "equal_shares"  # or "constants_only"
    se_method: str = "outer_product"  # or "numeric_hessian"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.gradient_tolerance <= 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.iv_parameterization not in ("direct", "logistic"):
            raise ValueError(
                f"unknown iv_parameterization {self.iv_parameterization!r}"
            )
        if self.null_model not in ("equal_shares", "constants_only"):
            raise ValueError(f"unknown null_model {self.null_model!r}")
        if self.se_method not in ("outer_product", "numeric_hessian"):
            raise ValueError(f"unknown se_method {self.se_method!r}")


@dataclass(frozen=True)
class EstimationResult:
    """Fitted coefficients with inference and fit diagnostics.

    ``parameters`` covers betas and free inclusive values in layout order;
    ``iv_report`` has one entry per nest (fixed nests included) with keys
    ``estimate``, ``fixed``, ``standard_error``, ``within_unit_interval`` and
    ``distance_from_1``.
    """

    parameters: dict[str, float]
    standard_errors: dict[str, float]
    t_stats: dict[str, float]
    significance_stars: dict[str, str]
    ll_final: float
    ll_null: float
    pseudo_adjusted_r2: float
    iv_report: dict[str, dict]
    converged: bool
    iterations: int
    sample_size: int
    layout: tuple[tuple[str, str], ...]
    se_method: str
    null_model: str
    gradient_max_norm: float
    separation: tuple[str, ...]
    warnings: tuple[str, ...]

    @property
    def n_parameters(self) -> int:
        return len(self.layout)

    def parameter_vector(self) -> ParameterVector:
        values = np.array([self.parameters[name] for name, _ in self.layout])
        return ParameterVector(values, self.layout)


def significance_stars(t_stat: float) -> str:
    """Stars for a two-sided normal test at the 1/5/10 percent levels."""
    if not math.isfinite(t_stat):
        return ""
    a = abs(t_stat)
    for threshold, stars in STAR_LEVELS:
        if a >= threshold:
            return stars
    return ""


def pseudo_adjusted_r2(ll_final: float, ll_null: float, k_params: int) -> float:
    """McFadden pseudo adjusted R-squared: 1 - (ll_final - k) / ll_null."""
    if ll_null == 0.0:
        raise ValueError("null log-likelihood of 0 leaves the index undefined")
    if ll_null > 0.0:
        raise ValueError("null log-likelihood must be negative")
    if ll_final < ll_null:
        import warnings as _warnings

        _warnings.warn(
            "fitted log-likelihood is below the null; check the fit",
            stacklevel=2,
        )
    return 1.0 - (ll_final - k_params) / ll_null


def null_log_likelihood(choices: np.ndarray, n_alternatives: int, null_model: str) -> float:
    """Log-likelihood of the reference model for the pseudo R-squared.

    ``equal_shares`` is N ln(1/J); ``constants_only`` is the closed-form
    maximum of a constants-only MNL, sum_j n_j ln(n_j / N) (never-chosen
    alternatives contribute 0, the supremum).
    """
    n = len(choices)
    if null_model == "equal_shares":
        return n * math.log(1.0 / n_alternatives)
    counts = np.bincount(choices, minlength=n_alternatives)
    out = 0.0
    for c in counts:
        if c > 0:
            out += c * math.log(c / n)
    return out


def encode_choices(chosen, spec: ModelSpec) -> np.ndarray:
    """Map chosen alternative ids to tree indices; unknown ids are errors."""
    index = {a.id: a.index for a in spec.tree.alternatives}
    out = np.empty(len(chosen), dtype=int)
    for i, label in enumerate(chosen):
        try:
            out[i] = index[label]
        except KeyError:
            raise ValueError(
                f"chosen alternative {label!r} at row {i} is not in the tree"
            ) from None
    return out


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class _IvTransform:
    """Maps between optimizer space and model space for the IV slots.

    ``direct`` is the identity (the line search simply rejects non-positive
    inclusive values); ``logistic`` estimates an unconstrained parameter whose
    sigmoid is the inclusive value, confining it to (0, 1).
    """

    def __init__(self, mode: str, n_beta: int, n_total: int):
        self.mode = mode
        self.iv_slice = slice(n_beta, n_total)

    def to_model(self, theta: np.ndarray) -> np.ndarray:
        if self.mode == "direct":
            return theta
        out = theta.copy()
        out[self.iv_slice] = _sigmoid(theta[self.iv_slice])
        return out

    def from_model(self, params: np.ndarray) -> np.ndarray:
        if self.mode == "direct":
            return params
        out = params.copy()
        lam = np.clip(params[self.iv_slice], 1e-12, 1.0 - 1e-12)
        out[self.iv_slice] = np.log(lam / (1.0 - lam))
        return out

    def chain(self, theta: np.ndarray) -> np.ndarray:
        """d(model)/d(optimizer) per slot."""
        out = np.ones_like(theta)
        if self.mode == "logistic":
            lam = _sigmoid(theta[self.iv_slice])
            out[self.iv_slice] = lam * (1.0 - lam)
        return out

    def feasible(self, theta: np.ndarray) -> bool:
        if self.mode == "logistic":
            return True
        return bool(np.all(theta[self.iv_slice] > 0.0))


@dataclass
class _Ascent:
    x: np.ndarray
    ll: float
    gradient: np.ndarray
    converged: bool
    iterations: int
    line_search_failed: bool


def _maximize_bhhh(ll_of, scores_of, x0, gtol, maxiter) -> _Ascent:
    """BHHH ascent with Armijo backtracking (sufficient increase, c1 = 1e-4,
    step halving). Deterministic: no randomized components."""
    x = np.asarray(x0, dtype=float)
    f = ll_of(x)
    if not np.isfinite(f):
        raise ValueError("log-likelihood is not finite at the start point")
    scores = scores_of(x)
    g = scores.sum(axis=0)
    it = 0
    failed = False
    converged = bool(np.max(np.abs(g)) < gtol) if g.size else True
    while not converged and it < maxiter:
        info = scores.T @ scores
        ridge = 1e-10 * (np.trace(info) / info.shape[0] + 1.0)
        try:
            direction = np.linalg.solve(
                info + ridge * np.eye(info.shape[0]), g
            )
        except np.linalg.LinAlgError:
            direction = g / max(1.0, np.linalg.norm(g))
        slope = direction @ g
        if not np.isfinite(slope) or slope <= 0.0:
            direction = g / max(1.0, np.linalg.norm(g))
            slope = direction @ g
        alpha = 1.0
        accepted = False
        for _ in range(60):
            candidate = x + alpha * direction
            f_new = ll_of(candidate)
            if np.isfinite(f_new) and f_new >= f + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            failed = True
            break
        x, f = candidate, f_new
        scores = scores_of(x)
        g = scores.sum(axis=0)
        it += 1
        converged = bool(np.max(np.abs(g)) < gtol)
    return _Ascent(x, f, g, converged, it, failed)


def fit(
    spec: ModelSpec,
    dataset,
    options: FitOptions | None = None,
    *,
    threads: int = 1,
) -> EstimationResult:
    """Maximum-likelihood fit of ``spec`` on ``dataset``.

    ``dataset`` needs ``columns`` (name -> array) and ``chosen`` (per-row
    alternative ids). Non-convergence is reported in the result, not raised;
    suspected separation (a coefficient running past ``SEPARATION_CAP``) is
    flagged with the offending parameter names.
    """
    options = options or FitOptions()
    violations = validate_spec(spec)
    if violations:
        raise SpecificationError(
            "model spec is invalid: " + "; ".join(violations)
        )
    design = build_design(spec, dataset)
    choices = encode_choices(dataset.chosen, spec)
    if design.n_obs == 0:
        raise ValueError("dataset has no observations")

    layout = parameter_layout(spec)
    names = [name for name, _ in layout]
    n_beta = sum(1 for _, kind in layout if kind == "beta")
    tree = spec.tree
    warnings: list[str] = []

    if len(np.unique(choices)) < 2:
        warnings.append(
            "degenerate dataset: fewer than 2 distinct chosen alternatives"
        )

    start = np.zeros(len(layout))
    free_starts = {
        iv_parameter_name(n.id): n.iv.value for n in tree.free_nests
    }
    for i, (name, kind) in enumerate(layout):
        if kind == "iv":
            start[i] = free_starts[name]

    transform = _IvTransform(options.iv_parameterization, n_beta, len(layout))

    def ll_of(theta):
        if not transform.feasible(theta):
            return -np.inf
        pv = ParameterVector(transform.to_model(theta), layout)
        return kernel.log_likelihood(pv, design, tree, choices, threads)

    def scores_of(theta):
        pv = ParameterVector(transform.to_model(theta), layout)
        s = kernel.score_matrix(pv, design, tree, choices, threads)
        return s * transform.chain(theta)[None, :]

    ascent = _maximize_bhhh(
        ll_of,
        scores_of,
        transform.from_model(start),
        options.gradient_tolerance,
        options.max_iterations,
    )
    if ascent.line_search_failed:
        warnings.append(
            "line search could not find a sufficient-increase step; "
            "stopped at the best point found"
        )

    estimates = transform.to_model(ascent.x)
    params = ParameterVector(estimates, layout)
    ll_final = ascent.ll

    separation = tuple(
        names[i]
        for i in range(n_beta)
        if abs(estimates[i]) >= SEPARATION_CAP
    )
    for name in separation:
        warnings.append(
            f"possible separation: |{name}| reached "
            f"{abs(params[name]):.2f} (cap {SEPARATION_CAP})"
        )

    se = _standard_errors(params, design, tree, choices, options, warnings, threads)

    parameters = params.as_dict()
    standard_errors = dict(zip(names, se))
    t_stats = {
        name: (parameters[name] / standard_errors[name])
        if standard_errors[name] > 0
        else float("nan")
        for name in names
    }
    stars = {name: significance_stars(t_stats[name]) for name in names}

    ll_null = null_log_likelihood(choices, tree.n_alternatives, options.null_model)
    rho2 = pseudo_adjusted_r2(ll_final, ll_null, len(layout))

    iv_report = {}
    for nest in tree.nests:
        if nest.iv.is_fixed:
            estimate = nest.iv.value
            se_iv = None
        else:
            estimate = parameters[iv_parameter_name(nest.id)]
            se_iv = standard_errors[iv_parameter_name(nest.id)]
        iv_report[nest.id] = {
            "estimate": float(estimate),
            "fixed": nest.iv.is_fixed,
            "standard_error": se_iv,
            "within_unit_interval": bool(0.0 < estimate <= 1.0),
            "distance_from_1": abs(1.0 - estimate),
        }

    return EstimationResult(
        parameters=parameters,
        standard_errors=standard_errors,
        t_stats=t_stats,
        significance_stars=stars,
        ll_final=ll_final,
        ll_null=ll_null,
        pseudo_adjusted_r2=rho2,
        iv_report=iv_report,
        converged=ascent.converged,
        iterations=ascent.iterations,
        sample_size=design.n_obs,
        layout=layout,
        se_method=options.se_method,
        null_model=options.null_model,
        gradient_max_norm=float(np.max(np.abs(ascent.gradient)))
        if ascent.gradient.size
        else 0.0,
        separation=separation,
        warnings=tuple(warnings),
    )


def _standard_errors(params, design, tree, choices, options, warnings, threads):
    if len(params.layout) == 0:
        return np.empty(0)
    if options.se_method == "outer_product":
        scores = kernel.score_matrix(params, design, tree, choices, threads)
        info = scores.T @ scores
    else:
        info = -_numeric_hessian(params, design, tree, choices, threads)
    # Symmetric eigendecomposition keeps the covariance positive definite:
    # near-flat directions get floored curvature, so weakly identified
    # parameters surface as huge (not NaN or negative) variances.
    eigenvalues, vectors = np.linalg.eigh(0.5 * (info + info.T))
    floor = max(eigenvalues.max(), 0.0) * 1e-14 + 1e-300
    if eigenvalues.min() <= max(eigenvalues.max(), 0.0) * 1e-12:
        warnings.append(
            "information matrix is nearly singular; standard errors along "
            "weakly identified directions are unreliable"
        )
    clipped = np.maximum(eigenvalues, floor)
    cov = (vectors / clipped) @ vectors.T
    return np.sqrt(np.diag(cov))


def _numeric_hessian(params, design, tree, choices, threads=1) -> np.ndarray:
    """Central-difference Hessian of the log-likelihood via the analytic
    gradient; symmetrized."""
    theta = params.values.copy()
    n = theta.size
    H = np.empty((n, n))
    for i in range(n):
        h = 1e-5 * max(1.0, abs(theta[i]))
        up = theta.copy()
        up[i] += h
        down = theta.copy()
        down[i] -= h
        g_up = kernel.gradient(
            ParameterVector(up, params.layout), design, tree, choices, threads
        )
        g_down = kernel.gradient(
            ParameterVector(down, params.layout), design, tree, choices, threads
        )
        H[i] = (g_up - g_down) / (2.0 * h)
    return 0.5 * (H + H.T)


def validate_iv(result: EstimationResult) -> dict[str, str]:
    """Classify each nest's inclusive value against the (0, 1] validity range.

    Estimates in (0, 0.9) show strong within-nest correlation; [0.9, 1] weak
    but acceptable correlation; fixed-at-1 nests sit on the no-correlation
    boundary; anything at or below 0, or above 1, is a violation.
    """
    verdicts = {}
    for nest_id, entry in result.iv_report.items():
        estimate = entry["estimate"]
        if entry["fixed"] and estimate == 1.0:
            verdicts[nest_id] = BOUNDARY
        elif estimate <= 0.0 or estimate > 1.0:
            verdicts[nest_id] = VIOLATION
        elif estimate >= WEAK_CORRELATION_THRESHOLD:
            verdicts[nest_id] = VALID_WEAK
        else:
            verdicts[nest_id] = VALID_STRONG
    return verdicts


def hensher_diagnostics(result: EstimationResult, spec: ModelSpec) -> dict:
    """Three-part model-selection report: goodness of fit, inclusive-value
    validity, and per-parameter sign/significance. A formatter over already
    computed values; no new numerics."""
    verdicts = validate_iv(result)
    free = [n.id for n in spec.tree.free_nests]
    iv_section: dict = {
        "verdicts": verdicts,
        "appropriate": all(v != VIOLATION for v in verdicts.values()),
    }
    if not free:
        iv_section["note"] = "no free inclusive values"
    rationality = [
        {
            "parameter": name,
            "estimate": result.parameters[name],
            "standard_error": result.standard_errors[name],
            "t_stat": result.t_stats[name],
            "stars": result.significance_stars[name],
            "significant_10pct": abs(result.t_stats[name]) >= 1.645
            if math.isfinite(result.t_stats[name])
            else False,
        }
        for name, _ in result.layout
    ]
    return {
        "goodness_of_fit": {
            "ll_final": result.ll_final,
            "ll_null": result.ll_null,
            "pseudo_adjusted_r2": result.pseudo_adjusted_r2,
            "sample_size": result.sample_size,
            "converged": result.converged,
        },
        "inclusive_values": iv_section,
        "parameter_rationality": rationality,
    }


# --- report emitters -------------------------------------------------------


def result_to_json(result: EstimationResult) -> str:
    """Serialize a result to JSON with a stable key order."""
    doc = {
        "parameters": result.parameters,
        "standard_errors": result.standard_errors,
        "t_stats": result.t_stats,
        "significance_stars": result.significance_stars,
        "ll_final": result.ll_final,
        "ll_null": result.ll_null,
        "pseudo_adjusted_r2": result.pseudo_adjusted_r2,
        "iv_report": result.iv_report,
        "converged": result.converged,
        "iterations": result.iterations,
        "sample_size": result.sample_size,
        "layout": [list(entry) for entry in result.layout],
        "se_method": result.se_method,
        "null_model": result.null_model,
        "gradient_max_norm": result.gradient_max_norm,
        "separation": list(result.separation),
        "warnings": list(result.warnings),
    }
    return json.dumps(doc, indent=2)


def result_from_json(text: str) -> EstimationResult:
    doc = json.loads(text)
    return EstimationResult(
        parameters=doc["parameters"],
        standard_errors=doc["standard_errors"],
        t_stats=doc["t_stats"],
        significance_stars=doc["significance_stars"],
        ll_final=doc["ll_final"],
        ll_null=doc["ll_null"],
        pseudo_adjusted_r2=doc["pseudo_adjusted_r2"],
        iv_report=doc["iv_report"],
        converged=doc["converged"],
        iterations=doc["iterations"],
        sample_size=doc["sample_size"],
        layout=tuple((n, k) for n, k in doc["layout"]),
        se_method=doc["se_method"],
        null_model=doc["null_model"],
        gradient_max_norm=doc["gradient_max_norm"],
        separation=tuple(doc["separation"]),
        warnings=tuple(doc["warnings"]),
    )


_NAME_W = 44
_COEF_W = 14
_T_W = 10


def _table_row(name: str, coef: str, t: str) -> str:
    return f"{name:<{_NAME_W}}{coef:>{_COEF_W}}{t:>{_T_W}}"


def result_table(result: EstimationResult, spec: ModelSpec) -> str:
    """Fixed-width report: variables grouped by severity level, coefficients
    with significance stars, a t-test column, the inclusive-value section,
    fit index and sample size. Shared coefficients are listed under every
    severity level they enter."""
    lines = [
        _table_row("Variable", "Coefficient", "t-test"),
        "-" * (_NAME_W + _COEF_W + _T_W),
    ]
    for alt in spec.tree.alternatives:
        section = [t for t in spec.terms if alt.id in t.applies_to]
        if not section:
            continue
        lines.append(alt.id)
        for term in section:
            label = "Constant" if term.is_constant else term.covariate
            name = term.parameter
            coef = f"{result.parameters[name]:.4f}{result.significance_stars[name]}"
            t_stat = result.t_stats[name]
            t_txt = f"{t_stat:.2f}" if math.isfinite(t_stat) else "n/a"
            lines.append(_table_row(f"  {label} [{name}]", coef, t_txt))
    lines.append("")
    lines.append("Inclusive value parameters")
    for nest_id, entry in result.iv_report.items():
        if entry["fixed"]:
            lines.append(_table_row(f"  {nest_id}", "1 (Fixed)" if entry["estimate"] == 1.0 else f"{entry['estimate']:.4f} (Fixed)", ""))
        else:
            name = iv_parameter_name(nest_id)
            coef = f"{entry['estimate']:.4f}{result.significance_stars[name]}"
            t_stat = result.t_stats[name]
            t_txt = f"{t_stat:.2f}" if math.isfinite(t_stat) else "n/a"
            lines.append(_table_row(f"  {nest_id}", coef, t_txt))
    lines.append("")
    lines.append(
        _table_row(
            "McFadden pseudo adjusted R-squared",
            f"{result.pseudo_adjusted_r2:.4f}",
            "",
        )
    )
    lines.append(_table_row("Sample size", str(result.sample_size), ""))
    lines.append(
        _table_row("Log-likelihood (final / null)", f"{result.ll_final:.2f}", f"{result.ll_null:.2f}")
    )
    if not result.converged:
        lines.append("NOT CONVERGED after {} iterations".format(result.iterations))
    for w in result.warnings:
        lines.append(f"warning: {w}")
    lines.append("")
    lines.append("Significance: *** 1%, ** 5%, * 10% (two-sided)")
    return "\n".join(lines) + "\n"
