"""Model structure: nesting tree, utility specification, and parameter layout.

A model is a two-level nesting tree over a finite set of alternatives plus a
list of utility terms. Each term attaches one estimable coefficient to a
covariate column (or to the constant) on one or more alternatives; a term
applying to several alternatives means a single shared coefficient enters each
of those utilities. Everything here is immutable and purely structural; no
numerics happen until a design matrix is built.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

#: Sentinel covariate name marking an alternative-specific constant.
CONSTANT = "CONSTANT"


@dataclass(frozen=True)
class Alternative:
    id: str
    index: int


@dataclass(frozen=True)
class InclusiveValue:
    """Per-nest inclusive-value (logsum) coefficient: fixed or estimated.

    ``value`` is the fixed value when ``kind == "fixed"`` and the optimizer
    starting value when ``kind == "free"``.
    """

    kind: str
    value: float

    @classmethod
    def free(cls, start: float = 0.5) -> "InclusiveValue":
        return cls("free", float(start))

    @classmethod
    def fixed(cls, value: float = 1.0) -> "InclusiveValue":
        return cls("fixed", float(value))

    @property
    def is_fixed(self) -> bool:
        return self.kind == "fixed"


@dataclass(frozen=True)
class Nest:
    id: str
    members: tuple[str, ...]
    iv: InclusiveValue

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))


@dataclass(frozen=True)
class NestTree:
    """Two-level grouping of alternatives into nests.

    A tree with a single nest is only well formed when that nest spans all
    alternatives with its inclusive value fixed at 1, which is exactly the
    plain multinomial logit.
    """

    alternatives: tuple[Alternative, ...]
    nests: tuple[Nest, ...]

    def __post_init__(self):
        object.__setattr__(self, "alternatives", tuple(self.alternatives))
        object.__setattr__(self, "nests", tuple(self.nests))

    @classmethod
    def from_ids(cls, alternative_ids, nests) -> "NestTree":
        """Build a tree from alternative ids and ``(nest_id, members, iv)`` triples."""
        alts = tuple(Alternative(str(a), i) for i, a in enumerate(alternative_ids))
        return cls(alts, tuple(Nest(n, tuple(m), iv) for n, m, iv in nests))

    @classmethod
    def mnl(cls, alternative_ids, nest_id: str = "root") -> "NestTree":
        """Degenerate single-nest tree: exact multinomial logit."""
        ids = list(alternative_ids)
        return cls.from_ids(ids, [(nest_id, ids, InclusiveValue.fixed(1.0))])

    @property
    def n_alternatives(self) -> int:
        return len(self.alternatives)

    @property
    def n_nests(self) -> int:
        return len(self.nests)

    @property
    def alternative_ids(self) -> tuple[str, ...]:
        return tuple(a.id for a in self.alternatives)

    @property
    def is_mnl(self) -> bool:
        return (
            len(self.nests) == 1
            and set(self.nests[0].members) == set(self.alternative_ids)
            and self.nests[0].iv.is_fixed
            and self.nests[0].iv.value == 1.0
        )

    @property
    def free_nests(self) -> tuple[Nest, ...]:
        return tuple(n for n in self.nests if not n.iv.is_fixed)

    def alternative_index(self, alt_id: str) -> int:
        for a in self.alternatives:
            if a.id == alt_id:
                return a.index
        raise KeyError(f"unknown alternative {alt_id!r}")

    def nest_of(self) -> np.ndarray:
        """Nest index of each alternative, in alternative order."""
        out = np.full(self.n_alternatives, -1, dtype=int)
        for n, nest in enumerate(self.nests):
            for m in nest.members:
                out[self.alternative_index(m)] = n
        return out

    def member_indices(self) -> list[np.ndarray]:
        """Per nest, the member alternative indices, in nest order."""
        return [
            np.array([self.alternative_index(m) for m in nest.members], dtype=int)
            for nest in self.nests
        ]


@dataclass(frozen=True)
class UtilityTerm:
    """One coefficient slot: ``parameter`` multiplies ``covariate`` in the
    utility of every alternative in ``applies_to``."""

    parameter: str
    covariate: str
    applies_to: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "applies_to", tuple(self.applies_to))

    @property
    def is_constant(self) -> bool:
        return self.covariate == CONSTANT


@dataclass(frozen=True)
class ModelSpec:
    tree: NestTree
    terms: tuple[UtilityTerm, ...]
    base_alternative: str

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))


def iv_parameter_name(nest_id: str) -> str:
    """Layout name of a nest's free inclusive-value parameter."""
    return f"iv_{nest_id}"


def parameter_layout(spec: ModelSpec) -> tuple[tuple[str, str], ...]:
    """Ordered ``(name, kind)`` slots: betas in term order, then free IVs in
    nest order. The order is fixed so serialized vectors and optimizer traces
    are reproducible."""
    layout: list[tuple[str, str]] = []
    seen = set()
    for term in spec.terms:
        if term.parameter not in seen:
            seen.add(term.parameter)
            layout.append((term.parameter, "beta"))
    for nest in spec.tree.nests:
        if not nest.iv.is_fixed:
            layout.append((iv_parameter_name(nest.id), "iv"))
    return tuple(layout)


@dataclass(frozen=True)
class ParameterVector:
    """Flat coefficient vector with a name <-> index map."""

    values: np.ndarray
    layout: tuple[tuple[str, str], ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (len(self.layout),):
            raise ValueError(
                f"parameter vector length {values.shape} does not match "
                f"layout length {len(self.layout)}"
            )
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple(self.layout))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.layout)

    def as_dict(self) -> dict[str, float]:
        return {name: float(v) for (name, _), v in zip(self.layout, self.values)}

    def __len__(self) -> int:
        return len(self.layout)

    def __getitem__(self, name: str) -> float:
        for (nm, _), v in zip(self.layout, self.values):
            if nm == name:
                return float(v)
        raise KeyError(name)


def validate_spec(spec: ModelSpec) -> list[str]:
    """Return every structural violation, in deterministic order.

    Violations are data, not failures: an empty list means the spec is valid.
    """
    out: list[str] = []
    tree = spec.tree
    alt_ids = [a.id for a in tree.alternatives]

    dupes = sorted({a for a in alt_ids if alt_ids.count(a) > 1})
    for a in dupes:
        out.append(f"alternative id {a!r} is not unique")
    indices = [a.index for a in tree.alternatives]
    if indices != list(range(len(indices))):
        out.append(f"alternative indices {indices} are not contiguous from 0")

    known = set(alt_ids)
    nest_ids = [n.id for n in tree.nests]
    for n in sorted({x for x in nest_ids if nest_ids.count(x) > 1}):
        out.append(f"nest id {n!r} is not unique")

    membership: dict[str, list[str]] = {a: [] for a in alt_ids}
    for nest in tree.nests:
        if not nest.members:
            out.append(f"nest {nest.id!r} has no members")
        for m in nest.members:
            if m not in known:
                out.append(f"nest {nest.id!r} references unknown alternative {m!r}")
            else:
                membership[m].append(nest.id)
        if len(nest.members) == 1:
            if not nest.iv.is_fixed or nest.iv.value != 1.0:
                out.append(
                    f"singleton nest {nest.id!r} must have its inclusive value "
                    f"fixed at 1.0 (degenerate nest)"
                )
        if nest.iv.is_fixed and not (0.0 < nest.iv.value <= 1.0):
            out.append(
                f"nest {nest.id!r} has fixed inclusive value {nest.iv.value}, "
                f"outside (0, 1]"
            )
        if not nest.iv.is_fixed and nest.iv.value <= 0.0:
            out.append(
                f"nest {nest.id!r} has non-positive inclusive value start "
                f"{nest.iv.value}"
            )

    for a in alt_ids:
        owners = membership[a]
        if len(owners) == 0:
            out.append(f"alternative {a!r} belongs to no nest (partition broken)")
        elif len(owners) > 1:
            out.append(
                f"alternative {a!r} belongs to nests {owners} (partition broken)"
            )

    if tree.n_nests == 1 and not tree.is_mnl:
        out.append(
            "a single-nest tree is only valid as plain MNL (all alternatives "
            "in one nest with inclusive value fixed at 1)"
        )

    if spec.base_alternative not in known:
        out.append(f"base alternative {spec.base_alternative!r} is not in the tree")

    iv_names = {iv_parameter_name(n.id) for n in tree.free_nests}
    seen_pairs: set[tuple[str, str]] = set()
    for term in spec.terms:
        if not term.applies_to:
            out.append(f"term {term.parameter!r} applies to no alternative")
        for a in term.applies_to:
            if a not in known:
                out.append(
                    f"term {term.parameter!r} applies to unknown alternative {a!r}"
                )
                continue
            pair = (term.parameter, a)
            if pair in seen_pairs:
                out.append(
                    f"duplicate slot: parameter {term.parameter!r} enters "
                    f"alternative {a!r} more than once"
                )
            seen_pairs.add(pair)
        if term.is_constant and spec.base_alternative in term.applies_to:
            out.append(
                f"constant term {term.parameter!r} on base alternative "
                f"{spec.base_alternative!r} breaks identification"
            )
        if term.parameter in iv_names:
            out.append(
                f"parameter name {term.parameter!r} collides with an inclusive "
                f"value slot"
            )
    return out


def pack_parameters(spec: ModelSpec, named_values) -> ParameterVector:
    """Pack a name -> value mapping into the spec's flat layout.

    The mapping must cover every free parameter exactly; missing or extra
    names raise with both lists spelled out.
    """
    layout = parameter_layout(spec)
    names = [name for name, _ in layout]
    missing = [n for n in names if n not in named_values]
    extra = sorted(set(named_values) - set(names))
    if missing or extra:
        raise ValueError(
            f"parameter names do not match the spec layout: "
            f"missing={missing}, unexpected={extra}"
        )
    values = np.array([float(named_values[n]) for n in names])
    return ParameterVector(values, layout)


def unpack_parameters(params: ParameterVector) -> dict[str, float]:
    """Inverse of :func:`pack_parameters`."""
    return params.as_dict()


@dataclass(frozen=True)
class DesignMatrix:
    """Per-term covariate values plus the term -> alternative incidence map.

    Logically this is, for every observation and alternative, a sparse row
    mapping parameter slots to covariate values; slots whose parameter does
    not enter that alternative are absent. The factored storage below keeps
    the same information in O(obs x terms):

    - ``term_values[o, t]``: covariate value of term ``t`` at observation
      ``o`` (1.0 for constants),
    - ``term_mask[t, j]``: 1 if term ``t`` enters alternative ``j``,
    - ``term_slot[t]``: parameter slot of term ``t`` in the layout.
    """

    slot_names: tuple[str, ...]
    term_values: np.ndarray
    term_mask: np.ndarray
    term_slot: np.ndarray
    n_obs: int
    n_alternatives: int

    @property
    def n_slots(self) -> int:
        return len(self.slot_names)

    def slot_matrix(self) -> np.ndarray:
        """(terms, slots) scatter matrix folding shared-name terms together."""
        S = np.zeros((len(self.term_slot), self.n_slots))
        S[np.arange(len(self.term_slot)), self.term_slot] = 1.0
        return S

    def row(self, obs: int, alt: int) -> dict[str, float]:
        """Slot -> value mapping for one (observation, alternative) cell."""
        out: dict[str, float] = {}
        for t in range(len(self.term_slot)):
            if self.term_mask[t, alt]:
                out[self.slot_names[self.term_slot[t]]] = float(
                    self.term_values[obs, t]
                )
        return out


def build_design(spec: ModelSpec, data) -> DesignMatrix:
    """Assemble the design for a dataset (anything with a ``columns`` mapping).

    Pure: output depends only on (spec, data). Unknown columns and non-finite
    covariate values are rejected up front so the kernel never sees them.
    """
    columns = data.columns if hasattr(data, "columns") else data
    n_obs = len(next(iter(columns.values()))) if columns else 0
    if hasattr(data, "rows"):
        n_obs = data.rows

    layout = parameter_layout(spec)
    slot_names = tuple(name for name, kind in layout if kind == "beta")
    slot_index = {name: i for i, name in enumerate(slot_names)}

    terms = spec.terms
    J = spec.tree.n_alternatives
    term_values = np.ones((n_obs, len(terms)))
    term_mask = np.zeros((len(terms), J))
    term_slot = np.zeros(len(terms), dtype=int)
    for t, term in enumerate(terms):
        term_slot[t] = slot_index[term.parameter]
        for a in term.applies_to:
            term_mask[t, spec.tree.alternative_index(a)] = 1.0
        if term.is_constant:
            continue
        if term.covariate not in columns:
            raise ValueError(
                f"unknown covariate column {term.covariate!r} "
                f"(term {term.parameter!r})"
            )
        col = np.asarray(columns[term.covariate])
        if col.dtype.kind not in "fiu":
            raise ValueError(
                f"column {term.covariate!r} is not numeric; prepare it first"
            )
        col = col.astype(float)
        bad = np.flatnonzero(~np.isfinite(col))
        if bad.size:
            raise ValueError(
                f"non-finite value in column {term.covariate!r} at row {bad[0]}"
            )
        term_values[:, t] = col
    return DesignMatrix(
        slot_names=slot_names,
        term_values=term_values,
        term_mask=term_mask,
        term_slot=term_slot,
        n_obs=n_obs,
        n_alternatives=J,
    )


# --- JSON configuration format -------------------------------------------
#
# {
#   "alternatives": ["pdo", ...],
#   "nests": [{"id": "...", "members": [...], "iv": {"fixed": 1.0} | {"free": 0.5}}],
#   "terms": [{"param": "...", "covariate": "CONSTANT" | "<column>", "alternatives": [...]}],
#   "base_alternative": "..."
# }
#
# Unknown keys are rejected at every level.


def _reject_unknown(obj: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ValueError(f"unknown keys {unknown} in {where}")


def spec_from_json(text: str) -> ModelSpec:
    """Parse a model configuration document."""
    doc = json.loads(text)
    if not isinstance(doc, dict):
        raise ValueError("model configuration must be a JSON object")
    _reject_unknown(
        doc, {"alternatives", "nests", "terms", "base_alternative"}, "model config"
    )
    for key in ("alternatives", "nests", "terms", "base_alternative"):
        if key not in doc:
            raise ValueError(f"model config is missing key {key!r}")
    nests = []
    for entry in doc["nests"]:
        _reject_unknown(entry, {"id", "members", "iv"}, f"nest {entry.get('id')!r}")
        iv_doc = entry["iv"]
        _reject_unknown(iv_doc, {"fixed", "free"}, f"iv of nest {entry['id']!r}")
        if len(iv_doc) != 1:
            raise ValueError(
                f"iv of nest {entry['id']!r} must be exactly one of "
                f'{{"fixed": x}} or {{"free": x0}}'
            )
        if "fixed" in iv_doc:
            iv = InclusiveValue.fixed(iv_doc["fixed"])
        else:
            iv = InclusiveValue.free(iv_doc["free"])
        nests.append((entry["id"], list(entry["members"]), iv))
    terms = []
    for entry in doc["terms"]:
        _reject_unknown(
            entry, {"param", "covariate", "alternatives"}, f"term {entry.get('param')!r}"
        )
        terms.append(
            UtilityTerm(entry["param"], entry["covariate"], tuple(entry["alternatives"]))
        )
    tree = NestTree.from_ids(doc["alternatives"], nests)
    return ModelSpec(tree, tuple(terms), doc["base_alternative"])


def spec_to_json(spec: ModelSpec) -> str:
    """Serialize a spec back to the configuration format."""
    doc = {
        "alternatives": list(spec.tree.alternative_ids),
        "nests": [
            {
                "id": n.id,
                "members": list(n.members),
                "iv": {"fixed": n.iv.value} if n.iv.is_fixed else {"free": n.iv.value},
            }
            for n in spec.tree.nests
        ],
        "terms": [
            {
                "param": t.parameter,
                "covariate": t.covariate,
                "alternatives": list(t.applies_to),
            }
            for t in spec.terms
        ],
        "base_alternative": spec.base_alternative,
    }
    return json.dumps(doc, indent=2)


def load_spec(path) -> ModelSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return spec_from_json(fh.read())


def save_spec(spec: ModelSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(spec_to_json(spec))
        fh.write("\n")
