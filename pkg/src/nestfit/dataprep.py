"""Dataset ingestion and the preprocessing pipeline.

Input is comma-separated UTF-8 text with a header row and "." decimals. The
chosen-alternative column holds alternative ids; rows with a missing chosen
value are dropped and counted. Every transform appends one JSON line to the
dataset's prep-log, recording the fitted parameters (normalization bounds,
expansion decisions, screening drops) so the log can be replayed on the raw
file to reproduce the prepared output byte for byte, or applied unchanged to
held-out data.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings as _warnings
from dataclasses import dataclass

import numpy as np


class ParseError(ValueError):
    """Malformed input file: message carries the 1-based line number."""


@dataclass(frozen=True)
class ParseSchema:
    chosen_column: str
    alternatives: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "alternatives", tuple(self.alternatives))


@dataclass(frozen=True)
class PrepConfig:
    continuous_columns: tuple[str, ...] = ()
    categorical_columns: dict = None  # name -> list of category values
    min_category_frequency: float = 0.005
    collinearity_threshold: float = 0.7
    screen_columns: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "continuous_columns", tuple(self.continuous_columns))
        object.__setattr__(self, "screen_columns", tuple(self.screen_columns))
        object.__setattr__(
            self, "categorical_columns", dict(self.categorical_columns or {})
        )
        if not (0.0 < self.min_category_frequency < 1.0):
            raise ValueError("min_category_frequency must be in (0, 1)")
        if not (0.0 < self.collinearity_threshold < 1.0):
            raise ValueError("collinearity_threshold must be in (0, 1)")


@dataclass(frozen=True)
class Dataset:
    """Immutable named columns plus the chosen alternative per row.

    ``columns`` maps names to equal-length arrays (float where the raw text
    parses as numbers, else strings); ``provenance`` is the prep-log, one
    JSON document per line.
    """

    columns: dict[str, np.ndarray]
    chosen: np.ndarray
    chosen_column: str
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "provenance", tuple(self.provenance))

    @property
    def rows(self) -> int:
        return len(self.chosen)

    def with_column(self, name: str, values: np.ndarray, log_line: str) -> "Dataset":
        cols = dict(self.columns)
        cols[name] = values
        return Dataset(cols, self.chosen, self.chosen_column, self.provenance + (log_line,))


def dataset_from_arrays(columns: dict, chosen, chosen_column: str = "chosen") -> Dataset:
    """Build a dataset directly from arrays (simulator output, tests)."""
    cols = {k: np.asarray(v) for k, v in columns.items()}
    chosen = np.asarray(list(chosen), dtype=object)
    lengths = {k: len(v) for k, v in cols.items()}
    if any(n != len(chosen) for n in lengths.values()):
        raise ValueError(f"column lengths {lengths} do not match {len(chosen)} rows")
    return Dataset(cols, chosen, chosen_column)


def parse_dataset(source, schema: ParseSchema) -> Dataset:
    """Read a CSV file (path or text-file object) into a typed Dataset.

    Rows whose chosen-alternative cell is empty are dropped and counted in the
    provenance; an unknown chosen label is an error naming the line.
    """
    if hasattr(source, "read"):
        return _parse_stream(source, schema)
    with open(source, "r", encoding="utf-8", newline="") as fh:
        return _parse_stream(fh, schema)


def _parse_stream(fh, schema: ParseSchema) -> Dataset:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("line 1: missing header row") from None
    header = [h.strip() for h in header]
    if any(not h for h in header):
        raise ParseError("line 1: header contains an empty column name")
    dupes = sorted({h for h in header if header.count(h) > 1})
    if dupes:
        raise ParseError(f"line 1: duplicate header names {dupes}")
    if schema.chosen_column not in header:
        raise ParseError(
            f"line 1: chosen-alternative column {schema.chosen_column!r} "
            f"not in header"
        )
    chosen_pos = header.index(schema.chosen_column)
    valid = set(schema.alternatives)

    raw: list[list[str]] = []
    chosen: list[str] = []
    dropped = 0
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(
                f"line {line}: expected {len(header)} fields, got {len(row)}"
            )
        label = row[chosen_pos].strip()
        if not label:
            dropped += 1
            continue
        if label not in valid:
            raise ParseError(
                f"line {line}: unknown chosen-alternative label {label!r}"
            )
        chosen.append(label)
        raw.append(row)

    columns: dict[str, np.ndarray] = {}
    for pos, name in enumerate(header):
        if pos == chosen_pos:
            continue
        cells = [r[pos].strip() for r in raw]
        columns[name] = _type_column(cells)
    log = json.dumps(
        {
            "op": "parse",
            "chosen_column": schema.chosen_column,
            "alternatives": list(schema.alternatives),
            "rows": len(chosen),
            "dropped_missing_chosen": dropped,
        }
    )
    return Dataset(columns, np.asarray(chosen, dtype=object), schema.chosen_column, (log,))


def _type_column(cells: list[str]) -> np.ndarray:
    """Float array when every non-empty cell parses as a number (empty ->
    NaN), else a string array."""
    values = np.empty(len(cells))
    for i, cell in enumerate(cells):
        if cell == "":
            values[i] = math.nan
            continue
        try:
            values[i] = float(cell)
        except ValueError:
            return np.asarray(cells, dtype=object)
    return values


def _format_cell(value) -> str:
    if isinstance(value, str):
        return value
    v = float(value)
    if math.isnan(v):
        return ""
    return repr(v)


def write_dataset(dataset: Dataset, path) -> None:
    """Write the dataset back to CSV (chosen column first, then covariates in
    column order). Floats are written with shortest round-trip repr so a
    write/parse/write cycle is byte-stable."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        names = list(dataset.columns)
        writer.writerow([dataset.chosen_column] + names)
        cols = [dataset.columns[n] for n in names]
        for i in range(dataset.rows):
            writer.writerow(
                [str(dataset.chosen[i])] + [_format_cell(c[i]) for c in cols]
            )


def write_prep_log(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in dataset.provenance:
            fh.write(line)
            fh.write("\n")


def _require_numeric(dataset: Dataset, column: str) -> np.ndarray:
    if column not in dataset.columns:
        raise ValueError(f"unknown column {column!r}")
    values = dataset.columns[column]
    if values.dtype.kind not in "fiu":
        raise ValueError(f"column {column!r} is not numeric")
    return values.astype(float)


def min_max_normalize(dataset: Dataset, column: str) -> Dataset:
    """Rescale so the sample minimum maps to 0 and the maximum to 1.

    A constant column is mapped to all zeros with a warning instead of
    failing, keeping batch pipelines running. The fitted (min, max) pair is
    recorded for replay on held-out data.
    """
    values = _require_numeric(dataset, column)
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        raise ValueError(f"column {column!r} has no finite values to normalize")
    lo = float(finite.min())
    hi = float(finite.max())
    return _apply_normalize(dataset, column, lo, hi)


def _apply_normalize(dataset: Dataset, column: str, lo: float, hi: float) -> Dataset:
    values = _require_numeric(dataset, column)
    constant = hi == lo
    if constant:
        _warnings.warn(
            f"column {column!r} is constant; normalized to all zeros",
            stacklevel=3,
        )
        out = np.where(np.isfinite(values), 0.0, values)
    else:
        out = (values - lo) / (hi - lo)
    log = json.dumps(
        {
            "op": "min_max_normalize",
            "column": column,
            "min": lo,
            "max": hi,
            "constant": constant,
        }
    )
    return dataset.with_column(column, out, log)


def _category_label(category) -> str:
    if isinstance(category, str):
        return category
    v = float(category)
    return str(int(v)) if v == int(v) else repr(v)


def expand_categorical(
    dataset: Dataset, column: str, categories, floor: float = 0.005
) -> Dataset:
    """Add one 0/1 indicator column per category with sample share >= floor.

    Categories below the floor are skipped and logged. The original column is
    retained for reference; observed values outside ``categories`` are an
    error listing the novel values. Missing cells are skipped, and for
    numeric columns the value 0 counts as the "rest" code (the no/absent
    level of a binary coding), so a {0, 1} column expands against the single
    category [1].
    """
    if column not in dataset.columns:
        raise ValueError(f"unknown column {column!r}")
    values = dataset.columns[column]
    numeric = values.dtype.kind in "fiu"
    cats = [float(c) if numeric else str(c) for c in categories]

    if numeric:
        observed = values[np.isfinite(values.astype(float))].astype(float)
        novel = sorted(set(observed) - set(cats) - {0.0})
    else:
        observed = [v for v in values if str(v) != ""]
        novel = sorted(set(map(str, observed)) - set(cats))
    if novel:
        raise ValueError(
            f"column {column!r} has values outside the declared categories: {novel}"
        )

    n = dataset.rows
    out = dataset
    expanded, skipped = [], []
    for cat in cats:
        if numeric:
            indicator = (values.astype(float) == cat).astype(float)
        else:
            indicator = np.array([1.0 if str(v) == cat else 0.0 for v in values])
        share = indicator.sum() / n if n else 0.0
        label = _category_label(cat)
        if share >= floor:
            expanded.append(cat)
            name = f"{column}_{label}"
            if name in out.columns:
                raise ValueError(f"indicator column {name!r} already exists")
            out = Dataset(
                {**out.columns, name: indicator},
                out.chosen,
                out.chosen_column,
                out.provenance,
            )
        else:
            skipped.append(cat)
    log = json.dumps(
        {
            "op": "expand_categorical",
            "column": column,
            "categories": cats,
            "floor": floor,
            "expanded": expanded,
            "skipped_low_frequency": skipped,
        }
    )
    return Dataset(out.columns, out.chosen, out.chosen_column, out.provenance + (log,))


def _apply_expand(dataset: Dataset, column: str, expanded, log_line: str) -> Dataset:
    """Replay an expansion: materialize exactly the recorded indicators."""
    values = dataset.columns[column]
    numeric = values.dtype.kind in "fiu"
    out_cols = dict(dataset.columns)
    for cat in expanded:
        cat = float(cat) if numeric else str(cat)
        if numeric:
            indicator = (values.astype(float) == cat).astype(float)
        else:
            indicator = np.array([1.0 if str(v) == cat else 0.0 for v in values])
        out_cols[f"{column}_{_category_label(cat)}"] = indicator
    return Dataset(
        out_cols, dataset.chosen, dataset.chosen_column, dataset.provenance + (log_line,)
    )


def drop_columns(dataset: Dataset, names, reason: str) -> Dataset:
    log = json.dumps({"op": "drop_columns", "columns": list(names), "reason": reason})
    cols = {k: v for k, v in dataset.columns.items() if k not in set(names)}
    return Dataset(cols, dataset.chosen, dataset.chosen_column, dataset.provenance + (log,))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.corrcoef(a, b)[0, 1]
    return float(r)


def single_variable_mnl_aic(dataset: Dataset, column: str) -> float:
    """AIC (2k - 2 lnL) of an MNL with alternative-specific constants and
    slopes on one covariate; the lexicographically first alternative is the
    identification base."""
    from . import estimator
    from .model import CONSTANT, ModelSpec, NestTree, UtilityTerm

    alternatives = sorted(set(map(str, dataset.chosen)))
    if len(alternatives) < 2:
        raise ValueError("screening needs at least two distinct chosen alternatives")
    base = alternatives[0]
    terms = []
    for alt in alternatives[1:]:
        terms.append(UtilityTerm(f"const_{alt}", CONSTANT, (alt,)))
        terms.append(UtilityTerm(f"{column}_{alt}", column, (alt,)))
    spec = ModelSpec(NestTree.mnl(alternatives), tuple(terms), base)
    result = estimator.fit(
        spec,
        dataset,
        estimator.FitOptions(max_iterations=200, gradient_tolerance=1e-5),
    )
    k = result.n_parameters
    return 2.0 * k - 2.0 * result.ll_final


def screen_collinearity(
    dataset: Dataset, candidate_columns, threshold: float = 0.7
) -> tuple[list[str], list[str]]:
    """Resolve highly collinear candidate pairs by a bivariate AIC contest.

    Pairs with |Pearson r| > threshold are processed in lexicographic name
    order; for each live pair, two single-variable MNL models are fitted on
    the chosen outcome and the variable with the higher AIC is dropped (ties
    drop the later name). Three-way clusters resolve greedily in the same
    order. Returns the kept columns and the decision log.
    """
    candidates = sorted(candidate_columns)
    for c in candidates:
        _require_numeric(dataset, c)
    alive = dict.fromkeys(candidates, True)
    decisions: list[str] = []
    aic: dict[str, float] = {}

    def aic_of(col: str) -> float:
        if col not in aic:
            aic[col] = single_variable_mnl_aic(dataset, col)
        return aic[col]

    for i, a in enumerate(candidates):
        for b in candidates[i + 1 :]:
            if not (alive[a] and alive[b]):
                continue
            r = _pearson(
                dataset.columns[a].astype(float), dataset.columns[b].astype(float)
            )
            if not (abs(r) > threshold):
                continue
            aic_a, aic_b = aic_of(a), aic_of(b)
            drop = b if aic_b >= aic_a else a
            alive[drop] = False
            decisions.append(
                json.dumps(
                    {
                        "op": "collinearity_decision",
                        "pair": [a, b],
                        "abs_correlation": abs(r),
                        "aic": {a: aic_a, b: aic_b},
                        "dropped": drop,
                    }
                )
            )
    kept = [c for c in candidates if alive[c]]
    return kept, decisions


def replay_prep_log(source, log_lines) -> Dataset:
    """Re-run a recorded prep pipeline on a raw file (path or file object).

    Transform parameters come from the log, not from the data, so the result
    is byte-identical on the original file and consistently scaled on
    held-out data. The replayed dataset carries the original log lines."""
    lines = [ln for ln in log_lines if ln.strip()]
    if not lines:
        raise ValueError("empty prep-log")
    first = json.loads(lines[0])
    if first.get("op") != "parse":
        raise ValueError("prep-log must start with the parse entry")
    schema = ParseSchema(first["chosen_column"], tuple(first["alternatives"]))
    dataset = parse_dataset(source, schema)
    for line in lines[1:]:
        entry = json.loads(line)
        op = entry.get("op")
        if op == "min_max_normalize":
            if entry["constant"]:
                values = _require_numeric(dataset, entry["column"])
                out = np.where(np.isfinite(values), 0.0, values)
                dataset = dataset.with_column(entry["column"], out, line)
            else:
                dataset = _apply_normalize_recorded(
                    dataset, entry["column"], entry["min"], entry["max"], line
                )
        elif op == "expand_categorical":
            dataset = _apply_expand(dataset, entry["column"], entry["expanded"], line)
        elif op == "drop_columns":
            cols = {
                k: v
                for k, v in dataset.columns.items()
                if k not in set(entry["columns"])
            }
            dataset = Dataset(
                cols, dataset.chosen, dataset.chosen_column, dataset.provenance + (line,)
            )
        elif op == "collinearity_decision":
            dataset = Dataset(
                dataset.columns,
                dataset.chosen,
                dataset.chosen_column,
                dataset.provenance + (line,),
            )
        else:
            raise ValueError(f"unknown prep-log op {op!r}")
    return dataset


def _apply_normalize_recorded(dataset, column, lo, hi, log_line) -> Dataset:
    values = _require_numeric(dataset, column)
    out = (values - lo) / (hi - lo)
    return dataset.with_column(column, out, log_line)


def run_prep(dataset: Dataset, config: PrepConfig) -> tuple[Dataset, list[str]]:
    """Apply the configured pipeline: normalize continuous columns, expand
    categoricals, then optionally resolve collinear screen columns. Returns
    the prepared dataset and the screening decision log."""
    out = dataset
    for column in config.continuous_columns:
        out = min_max_normalize(out, column)
    for column, categories in config.categorical_columns.items():
        out = expand_categorical(
            out, column, categories, config.min_category_frequency
        )
    decisions: list[str] = []
    if config.screen_columns:
        kept, decisions = screen_collinearity(
            out, config.screen_columns, config.collinearity_threshold
        )
        dropped = [c for c in config.screen_columns if c not in kept]
        for line in decisions:
            out = Dataset(
                out.columns, out.chosen, out.chosen_column, out.provenance + (line,)
            )
        if dropped:
            out = drop_columns(out, dropped, "collinearity_screen")
    return out, decisions


def prep_config_from_json(text: str) -> tuple[ParseSchema, PrepConfig]:
    """Parse the prep configuration document (parse schema + pipeline)."""
    doc = json.loads(text)
    if not isinstance(doc, dict):
        raise ValueError("prep config must be a JSON object")
    allowed = {
        "chosen_column",
        "alternatives",
        "continuous_columns",
        "categorical_columns",
        "min_category_frequency",
        "collinearity_threshold",
        "screen_columns",
    }
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ValueError(f"unknown keys {unknown} in prep config")
    for key in ("chosen_column", "alternatives"):
        if key not in doc:
            raise ValueError(f"prep config is missing key {key!r}")
    schema = ParseSchema(doc["chosen_column"], tuple(doc["alternatives"]))
    config = PrepConfig(
        continuous_columns=tuple(doc.get("continuous_columns", ())),
        categorical_columns=doc.get("categorical_columns", {}),
        min_category_frequency=doc.get("min_category_frequency", 0.005),
        collinearity_threshold=doc.get("collinearity_threshold", 0.7),
        screen_columns=tuple(doc.get("screen_columns", ())),
    )
    return schema, config
