"""Segmented comparison workflow: fit one segment, restrict to its significant
variables, refit the other segment, and compare matched coefficients by their
ratio.

The primary segment (by default the one with more observations) determines
the variable set; the nesting structure is kept identical across segments so
coefficients are directly comparable. Ratios are only formed for parameters
significant in both segments with agreeing signs: opposite signs are reported
as conflicts, not ratios, and no ratio ever divides by an insignificant
coefficient.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

from .estimator import EstimationResult, FitOptions, fit
from .model import ModelSpec, validate_spec

#: |t| threshold matching a 10 percent two-sided significance level.
DEFAULT_ALPHA_T = 1.645


@dataclass(frozen=True)
class RatioEntry:
    parameter: str
    severity: str
    primary_coef: float
    secondary_coef: float
    ratio: float | None
    dominant: str  # "primary" | "secondary" | "sign_conflict"


@dataclass(frozen=True)
class SegmentedComparison:
    primary_result: EstimationResult
    secondary_result: EstimationResult
    restricted_spec: ModelSpec
    ratios: tuple[RatioEntry, ...]
    sign_conflicts: tuple[RatioEntry, ...]
    dropped: tuple[str, ...]
    primary_label: str = "primary"
    secondary_label: str = "secondary"

    @property
    def primary_dominant(self) -> tuple[RatioEntry, ...]:
        entries = [e for e in self.ratios if e.dominant == "primary"]
        return tuple(sorted(entries, key=lambda e: -abs(e.ratio - 1.0)))

    @property
    def secondary_dominant(self) -> tuple[RatioEntry, ...]:
        entries = [e for e in self.ratios if e.dominant == "secondary"]
        return tuple(sorted(entries, key=lambda e: -abs(e.ratio - 1.0)))

    def dominance_order(self) -> tuple[RatioEntry, ...]:
        """All ratio entries ordered by distance of the ratio from 1."""
        return tuple(sorted(self.ratios, key=lambda e: -abs(e.ratio - 1.0)))


def restrict_spec(
    spec: ModelSpec, result: EstimationResult, alpha_t: float = DEFAULT_ALPHA_T
) -> ModelSpec:
    """Keep the terms whose fitted |t| meets ``alpha_t``, plus all constants;
    the tree and base alternative are unchanged.

    Raises when no non-constant term survives: a restricted refit would have
    nothing to compare, so compare the segments directly instead.
    """
    kept = []
    significant = 0
    for term in spec.terms:
        t_stat = result.t_stats.get(term.parameter)
        if t_stat is None:
            raise ValueError(
                f"result does not cover parameter {term.parameter!r}; "
                f"was it fitted on this spec?"
            )
        if term.is_constant:
            kept.append(term)
        elif alpha_t <= 0.0 or abs(t_stat) >= alpha_t:
            kept.append(term)
            significant += 1
    if significant == 0:
        raise ValueError(
            f"no non-constant term reaches |t| >= {alpha_t}; nothing to "
            f"restrict on - compare the segments directly instead"
        )
    return ModelSpec(spec.tree, tuple(kept), spec.base_alternative)


def compute_ratios(
    spec: ModelSpec,
    primary: dict[str, tuple[float, float]],
    secondary: dict[str, tuple[float, float]],
    alpha_t: float = DEFAULT_ALPHA_T,
) -> tuple[list[RatioEntry], list[RatioEntry], list[str]]:
    """Ratio table from (coefficient, t) pairs keyed by parameter name.

    Only non-constant parameters present in both mappings are compared.
    Returns (ratios, sign_conflicts, dropped): ``dropped`` lists parameters
    insignificant in the secondary segment, conflicts are same-parameter
    pairs with opposite signs, and each ratio is primary/secondary with the
    dominant side decided by the ratio's position relative to 1.
    """
    severity_of = {
        t.parameter: "+".join(t.applies_to) for t in spec.terms
    }
    ratios: list[RatioEntry] = []
    conflicts: list[RatioEntry] = []
    dropped: list[str] = []
    for term in spec.terms:
        name = term.parameter
        if term.is_constant or name not in primary or name not in secondary:
            continue
        p_coef, p_t = primary[name]
        s_coef, s_t = secondary[name]
        if abs(p_t) < alpha_t or abs(s_t) < alpha_t:
            dropped.append(name)
            continue
        if p_coef * s_coef <= 0.0:
            conflicts.append(
                RatioEntry(name, severity_of[name], p_coef, s_coef, None, "sign_conflict")
            )
            continue
        ratio = p_coef / s_coef
        dominant = "primary" if ratio > 1.0 else "secondary"
        ratios.append(
            RatioEntry(name, severity_of[name], p_coef, s_coef, ratio, dominant)
        )
    return ratios, conflicts, dropped


def compare_segments(
    spec: ModelSpec,
    dataset_primary,
    dataset_secondary,
    options: FitOptions | None = None,
    alpha_t: float = DEFAULT_ALPHA_T,
    *,
    primary_label: str = "primary",
    secondary_label: str = "secondary",
    threads: int = 1,
) -> SegmentedComparison:
    """Run the full workflow: fit primary, restrict, refit secondary, ratio.

    Fit failures are re-raised with the segment label so batch runs can tell
    the two apart.
    """
    violations = validate_spec(spec)
    if violations:
        raise ValueError("model spec is invalid: " + "; ".join(violations))
    try:
        primary_result = fit(spec, dataset_primary, options, threads=threads)
    except Exception as exc:
        raise RuntimeError(f"fit failed for segment {primary_label!r}: {exc}") from exc
    restricted = restrict_spec(spec, primary_result, alpha_t)
    try:
        secondary_result = fit(restricted, dataset_secondary, options, threads=threads)
    except Exception as exc:
        raise RuntimeError(f"fit failed for segment {secondary_label!r}: {exc}") from exc

    primary_pairs = {
        name: (primary_result.parameters[name], primary_result.t_stats[name])
        for name, kind in primary_result.layout
        if kind == "beta"
    }
    secondary_pairs = {
        name: (secondary_result.parameters[name], secondary_result.t_stats[name])
        for name, kind in secondary_result.layout
        if kind == "beta"
    }
    ratios, conflicts, dropped = compute_ratios(
        restricted, primary_pairs, secondary_pairs, alpha_t
    )
    return SegmentedComparison(
        primary_result=primary_result,
        secondary_result=secondary_result,
        restricted_spec=restricted,
        ratios=tuple(ratios),
        sign_conflicts=tuple(conflicts),
        dropped=tuple(dropped),
        primary_label=primary_label,
        secondary_label=secondary_label,
    )


def gap_report(comparison: SegmentedComparison, out_prefix: str) -> dict[str, str]:
    """Write the comparison as two plot-ready CSVs plus a plain-text report.

    ``<prefix>_dominant_primary.csv`` and ``<prefix>_dominant_secondary.csv``
    each carry (variable, severity_level, ratio) ordered by how far the ratio
    sits from 1; the text report adds the sign conflicts and the variables
    dropped for secondary-segment insignificance.
    """
    paths = {
        "primary": f"{out_prefix}_dominant_primary.csv",
        "secondary": f"{out_prefix}_dominant_secondary.csv",
        "report": f"{out_prefix}_report.txt",
    }
    for key, entries in (
        ("primary", comparison.primary_dominant),
        ("secondary", comparison.secondary_dominant),
    ):
        with open(paths[key], "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["variable", "severity_level", "ratio"])
            for e in entries:
                writer.writerow([e.parameter, e.severity, repr(e.ratio)])

    lines = []
    header = (
        f"Coefficient ratios ({comparison.primary_label} / "
        f"{comparison.secondary_label})"
    )
    lines.append(header)
    lines.append("=" * len(header))
    for title, entries in (
        (f"{comparison.primary_label} coefficient is higher", comparison.primary_dominant),
        (f"{comparison.secondary_label} coefficient is higher", comparison.secondary_dominant),
    ):
        lines.append("")
        lines.append(title)
        lines.append("-" * len(title))
        if not entries:
            lines.append("(none)")
        for e in entries:
            lines.append(
                f"{e.parameter:<40}{e.severity:<30}"
                f"{e.primary_coef:>+10.4f}{e.secondary_coef:>+10.4f}"
                f"{e.ratio:>10.4f}"
            )
    lines.append("")
    lines.append("Sign conflicts (no ratio formed)")
    lines.append("-" * 32)
    if not comparison.sign_conflicts:
        lines.append("(none)")
    for e in comparison.sign_conflicts:
        lines.append(
            f"{e.parameter:<40}{e.severity:<30}"
            f"{e.primary_coef:>+10.4f}{e.secondary_coef:>+10.4f}"
        )
    lines.append("")
    lines.append(
        f"Dropped (significant for {comparison.primary_label}, "
        f"not for {comparison.secondary_label})"
    )
    lines.append("-" * 24)
    if not comparison.dropped:
        lines.append("(none)")
    for name in comparison.dropped:
        lines.append(name)
    lines.append("")
    with open(paths["report"], "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
    return paths


def comparison_to_json(comparison: SegmentedComparison) -> str:
    """Machine-readable summary of the comparison."""
    def entry_doc(e: RatioEntry) -> dict:
        return {
            "parameter": e.parameter,
            "severity_level": e.severity,
            "primary_coef": e.primary_coef,
            "secondary_coef": e.secondary_coef,
            "ratio": e.ratio,
            "dominant": e.dominant,
        }

    doc = {
        "primary_label": comparison.primary_label,
        "secondary_label": comparison.secondary_label,
        "ratios": [entry_doc(e) for e in comparison.dominance_order()],
        "sign_conflicts": [entry_doc(e) for e in comparison.sign_conflicts],
        "dropped": list(comparison.dropped),
        "primary_converged": comparison.primary_result.converged,
        "secondary_converged": comparison.secondary_result.converged,
    }
    return json.dumps(doc, indent=2)
