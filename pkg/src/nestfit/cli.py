"""Command-line entry point: prep, fit, simulate, and compare.

Every run writes a manifest next to its outputs recording the command, input
paths with content hashes, the seed, tool version, and output paths. Exit
codes are stable: 0 success, 2 input or configuration error, 3 numerical
non-convergence (including suspected separation). With ``--deterministic``
the manifest omits timestamps so consecutive identical runs are byte-identical
across every output file. All randomness flows from the single ``--seed``
value; the covariate and choice streams are split off it with SeedSequence so
they stay independent.

``NESTFIT_THREADS`` caps the width of the kernel's row-parallel evaluation;
thread count never changes numerical results.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__, kernel
from .dataprep import (
    ParseError,
    ParseSchema,
    dataset_from_arrays,
    parse_dataset,
    prep_config_from_json,
    replay_prep_log,
    run_prep,
    write_dataset,
    write_prep_log,
)
from .estimator import FitOptions, fit, result_table, result_to_json
from .model import build_design, load_spec, pack_parameters, validate_spec
from .segment import DEFAULT_ALPHA_T, compare_segments, comparison_to_json, gap_report


class InputError(Exception):
    """User-facing input/configuration problem; maps to exit code 2."""


def _threads() -> int:
    raw = os.environ.get("NESTFIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InputError(f"NESTFIT_THREADS={raw!r} is not an integer") from None


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def _now(deterministic: bool):
    if deterministic:
        return None
    return datetime.now(timezone.utc).isoformat()


def _write_manifest(path, command, inputs, outputs, seed, deterministic, started, extra=None):
    doc = {
        "command": command,
        "tool": "nestfit",
        "version": __version__,
        "inputs": {
            name: {"path": p, "sha256": _sha256(p)} for name, p in inputs.items()
        },
        "seed": seed,
        "deterministic": deterministic,
        "started_at": started,
        "finished_at": _now(deterministic),
        "outputs": sorted(outputs),
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _load_spec_checked(path):
    try:
        spec = load_spec(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot load model config {path}: {exc}") from exc
    violations = validate_spec(spec)
    if violations:
        raise InputError(
            f"model config {path} is structurally invalid: " + "; ".join(violations)
        )
    return spec


def _parse_data_for(spec, path, chosen_column):
    schema = ParseSchema(chosen_column, spec.tree.alternative_ids)
    try:
        return parse_dataset(path, schema)
    except (OSError, ParseError) as exc:
        raise InputError(f"cannot read dataset {path}: {exc}") from exc


def _fit_options(args) -> FitOptions:
    return FitOptions(
        null_model={"equal": "equal_shares", "constants": "constants_only"}[
            args.null_model
        ],
        se_method={"opg": "outer_product", "hessian": "numeric_hessian"}[args.se],
    )


# --- commands --------------------------------------------------------------


def cmd_prep(args) -> int:
    started = _now(args.deterministic)
    if (args.prep_config is None) == (args.replay is None):
        raise InputError("prep needs exactly one of --prep-config or --replay")
    inputs = {"data": args.data}
    if args.replay:
        inputs["replay_log"] = args.replay
        try:
            with open(args.replay, "r", encoding="utf-8") as fh:
                log_lines = fh.read().splitlines()
            prepared = replay_prep_log(args.data, log_lines)
        except (OSError, ParseError, ValueError) as exc:
            raise InputError(str(exc)) from exc
    else:
        inputs["prep_config"] = args.prep_config
        try:
            with open(args.prep_config, "r", encoding="utf-8") as fh:
                schema, config = prep_config_from_json(fh.read())
            raw = parse_dataset(args.data, schema)
            prepared, _ = run_prep(raw, config)
        except (OSError, ParseError, ValueError) as exc:
            raise InputError(str(exc)) from exc
    log_path = args.out + ".preplog"
    write_dataset(prepared, args.out)
    write_prep_log(prepared, log_path)
    _write_manifest(
        args.out + ".manifest.json",
        "prep",
        inputs,
        [args.out, log_path],
        None,
        args.deterministic,
        started,
        extra={"rows": prepared.rows},
    )
    return 0


def cmd_fit(args) -> int:
    started = _now(args.deterministic)
    spec = _load_spec_checked(args.model)
    dataset = _parse_data_for(spec, args.data, args.chosen_column)
    try:
        result = fit(spec, dataset, _fit_options(args), threads=_threads())
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    result_path = args.out + "_result.json"
    table_path = args.out + "_table.txt"
    with open(result_path, "w", encoding="utf-8") as fh:
        fh.write(result_to_json(result))
        fh.write("\n")
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(result_table(result, spec))
    _write_manifest(
        args.out + "_manifest.json",
        "fit",
        {"data": args.data, "model": args.model},
        [result_path, table_path],
        None,
        args.deterministic,
        started,
        extra={
            "converged": result.converged,
            "iterations": result.iterations,
            "separation": list(result.separation),
        },
    )
    if not result.converged or result.separation:
        for line in result.warnings:
            print(f"nestfit fit: {line}", file=sys.stderr)
        if not result.converged:
            print(
                f"nestfit fit: not converged after {result.iterations} "
                f"iterations (gradient max-norm {result.gradient_max_norm:.3e})",
                file=sys.stderr,
            )
        return 3
    return 0


def _load_params_file(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot load parameter file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError("parameter file must be a JSON object")
    unknown = sorted(set(doc) - {"parameters", "covariates"})
    if unknown:
        raise InputError(f"unknown keys {unknown} in parameter file")
    if "parameters" not in doc:
        raise InputError("parameter file is missing key 'parameters'")
    return doc["parameters"], doc.get("covariates", {})


def _draw_covariates(names, samplers, n, rng):
    """Independent draws per column: uniform(0,1) unless configured."""
    allowed = {"type", "p", "low", "high"}
    columns = {}
    for name in sorted(names):
        cfg = samplers.get(name, {"type": "uniform"})
        unknown = sorted(set(cfg) - allowed)
        if unknown:
            raise InputError(f"unknown keys {unknown} in sampler for {name!r}")
        kind = cfg.get("type", "uniform")
        if kind == "bernoulli":
            p = float(cfg.get("p", 0.5))
            if not (0.0 <= p <= 1.0):
                raise InputError(f"bernoulli share for {name!r} must be in [0, 1]")
            columns[name] = (rng.random(n) < p).astype(float)
        elif kind == "uniform":
            low = float(cfg.get("low", 0.0))
            high = float(cfg.get("high", 1.0))
            if not (high > low):
                raise InputError(f"uniform range for {name!r} is empty")
            columns[name] = rng.uniform(low, high, n)
        else:
            raise InputError(f"unknown sampler type {kind!r} for column {name!r}")
    return columns


def cmd_simulate(args) -> int:
    started = _now(args.deterministic)
    spec = _load_spec_checked(args.model)
    named, samplers = _load_params_file(args.params)
    try:
        params = pack_parameters(spec, named)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.n < 0:
        raise InputError("--n must be non-negative")
    covariate_names = sorted(
        {t.covariate for t in spec.terms if not t.is_constant}
    )
    unknown = sorted(set(samplers) - set(covariate_names))
    if unknown:
        raise InputError(
            f"sampler configured for columns not in the model: {unknown}"
        )
    # Independent child streams off the one manifest seed.
    state = np.random.SeedSequence(args.seed).generate_state(2, dtype=np.uint64)
    covariate_rng = np.random.default_rng(int(state[0]))
    choice_seed = int(state[1])
    columns = _draw_covariates(covariate_names, samplers, args.n, covariate_rng)
    dataset = dataset_from_arrays(columns, [""] * args.n, args.chosen_column)
    design = build_design(spec, dataset)
    sim = kernel.simulate(params, design, spec.tree, choice_seed)
    ids = spec.tree.alternative_ids
    chosen = [ids[i] for i in sim.choices]
    out_dataset = dataset_from_arrays(columns, chosen, args.chosen_column)
    write_dataset(out_dataset, args.out)
    _write_manifest(
        args.out + ".manifest.json",
        "simulate",
        {"model": args.model, "params": args.params},
        [args.out],
        args.seed,
        args.deterministic,
        started,
        extra={
            "n": args.n,
            "choice_seed": choice_seed,
            "generator": sim.generator,
        },
    )
    return 0


def cmd_compare(args) -> int:
    started = _now(args.deterministic)
    spec = _load_spec_checked(args.model)
    data_a = _parse_data_for(spec, args.data_a, args.chosen_column)
    data_b = _parse_data_for(spec, args.data_b, args.chosen_column)
    if data_a.rows == 0 or data_b.rows == 0:
        raise InputError("both segments need at least one observation")
    if args.primary == "a" or (args.primary == "auto" and data_a.rows >= data_b.rows):
        primary, secondary = (data_a, "a"), (data_b, "b")
    else:
        primary, secondary = (data_b, "b"), (data_a, "a")
    try:
        comparison = compare_segments(
            spec,
            primary[0],
            secondary[0],
            _fit_options(args),
            args.alpha_t,
            primary_label=primary[1],
            secondary_label=secondary[1],
            threads=_threads(),
        )
    except (RuntimeError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    paths = gap_report(comparison, args.out)
    json_path = args.out + "_comparison.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(comparison_to_json(comparison))
        fh.write("\n")
    _write_manifest(
        args.out + "_manifest.json",
        "compare",
        {"model": args.model, "data_a": args.data_a, "data_b": args.data_b},
        list(paths.values()) + [json_path],
        None,
        args.deterministic,
        started,
        extra={
            "primary_segment": primary[1],
            "primary_converged": comparison.primary_result.converged,
            "secondary_converged": comparison.secondary_result.converged,
        },
    )
    if not (
        comparison.primary_result.converged and comparison.secondary_result.converged
    ):
        print("nestfit compare: at least one segment fit did not converge", file=sys.stderr)
        return 3
    return 0


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nestfit",
        description="Two-level nested logit crash-severity toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="output path or prefix")
        p.add_argument(
            "--deterministic",
            action="store_true",
            help="omit timestamps so identical runs produce identical bytes",
        )

    p = sub.add_parser("prep", help="normalize/expand a raw CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--prep-config", default=None)
    p.add_argument("--replay", default=None, help="replay a recorded prep-log")
    common(p)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("fit", help="maximum-likelihood fit")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--chosen-column", default="chosen")
    p.add_argument("--null-model", choices=["equal", "constants"], default="equal")
    p.add_argument("--se", choices=["opg", "hessian"], default="opg")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="draw synthetic data from a known model")
    p.add_argument("--model", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--chosen-column", default="chosen")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="segmented coefficient-ratio comparison")
    p.add_argument("--model", required=True)
    p.add_argument("--data-a", required=True)
    p.add_argument("--data-b", required=True)
    p.add_argument("--chosen-column", default="chosen")
    p.add_argument("--alpha-t", type=float, default=DEFAULT_ALPHA_T)
    p.add_argument(
        "--primary",
        choices=["auto", "a", "b"],
        default="auto",
        help="primary segment (auto = larger sample)",
    )
    p.add_argument("--null-model", choices=["equal", "constants"], default="equal")
    p.add_argument("--se", choices=["opg", "hessian"], default="opg")
    common(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"nestfit {args.command}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"nestfit {args.command}: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())
