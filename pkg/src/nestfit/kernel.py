"""Numerically stable two-level nested logit kernels.

Probability algebra (utility-maximization consistent, RU2 normalization):
with per-nest coefficient ``lam_n`` and utilities ``V_i = beta . x_i``,

    P(i | n)   = exp(V_i / lam_n) / sum_{j in n} exp(V_j / lam_n)
    logsum_n   = ln sum_{j in n} exp(V_j / lam_n)
    P(n)       = exp(lam_n * logsum_n) / sum_{n'} exp(lam_{n'} * logsum_{n'})
    P(i)       = P(nest of i) * P(i | n)

With every ``lam_n = 1`` this collapses exactly to multinomial logit. All
exponentials are max-shifted so utilities up to |V| = 700 stay finite, and
log-probabilities are formed directly in log space so the likelihood never
goes through a denormalized probability.

Per-observation work is independent; the likelihood and score evaluations
optionally split rows across threads. Thread count never changes results:
chunks fill disjoint rows of the same arrays with identical values and the
final reduction is always the same fixed-order sum over the full array.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import DesignMatrix, NestTree, ParameterVector, iv_parameter_name

#: Row-chunk size for (optionally threaded) evaluation of big datasets.
_CHUNK = 16384


@dataclass(frozen=True)
class ProbabilityResult:
    """Choice probabilities and their nested decomposition.

    ``probabilities[o, i] = nest_probabilities[o, n(i)] *
    conditional_probabilities[o, i]`` holds exactly as computed; ``logsums``
    holds each nest's inclusive value statistic.
    """

    probabilities: np.ndarray
    nest_probabilities: np.ndarray
    conditional_probabilities: np.ndarray
    logsums: np.ndarray
    nest_ids: tuple[str, ...]


@dataclass(frozen=True)
class SimOutput:
    """Simulated choices plus everything needed to reproduce them."""

    choices: np.ndarray
    seed: int
    parameters: ParameterVector
    generator: str = "numpy-pcg64"


def nest_lambdas(params: ParameterVector, tree: NestTree) -> np.ndarray:
    """Per-nest inclusive value coefficients: fixed from the tree, free from
    the vector. Raises if any is non-positive."""
    values = params.as_dict()
    lam = np.empty(tree.n_nests)
    for n, nest in enumerate(tree.nests):
        if nest.iv.is_fixed:
            lam[n] = nest.iv.value
        else:
            lam[n] = values[iv_parameter_name(nest.id)]
        if not np.isfinite(lam[n]) or lam[n] <= 0.0:
            raise ValueError(
                f"inclusive value coefficient of nest {nest.id!r} is "
                f"{lam[n]}; must be positive"
            )
    return lam


def _beta_from(params: ParameterVector, design: DesignMatrix) -> np.ndarray:
    values = params.as_dict()
    return np.array([values[name] for name in design.slot_names])


def _utilities(beta: np.ndarray, design: DesignMatrix) -> np.ndarray:
    w = beta[design.term_slot]
    # non-finite products are caught by the utility check right after
    with np.errstate(invalid="ignore"):
        return (design.term_values * w) @ design.term_mask


def _check_finite_utilities(V: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(V).all(axis=1))
    if bad.size:
        raise ValueError(f"non-finite utility at observation {bad[0]}")


def _log_probs(V, lam, nest_of, members):
    """log P(i|n) (obs, alts), log P(n) (obs, nests), logsums (obs, nests)."""
    n_obs = V.shape[0]
    n_nests = len(members)
    scaled = V / lam[nest_of][None, :]
    logsums = np.empty((n_obs, n_nests))
    log_cond = np.empty_like(V)
    for n, idx in enumerate(members):
        block = scaled[:, idx]
        shift = block.max(axis=1)
        logsums[:, n] = shift + np.log(
            np.exp(block - shift[:, None]).sum(axis=1)
        )
        log_cond[:, idx] = block - logsums[:, n][:, None]
    nest_util = lam[None, :] * logsums
    shift = nest_util.max(axis=1)
    lse = shift + np.log(np.exp(nest_util - shift[:, None]).sum(axis=1))
    log_nest = nest_util - lse[:, None]
    return log_cond, log_nest, logsums


def choice_probabilities(
    params: ParameterVector, design: DesignMatrix, tree: NestTree
) -> ProbabilityResult:
    """Evaluate the nested choice probabilities for every observation."""
    beta = _beta_from(params, design)
    lam = nest_lambdas(params, tree)
    nest_of = tree.nest_of()
    members = tree.member_indices()
    V = _utilities(beta, design)
    _check_finite_utilities(V)
    log_cond, log_nest, logsums = _log_probs(V, lam, nest_of, members)
    cond = np.exp(log_cond)
    nest_probs = np.exp(log_nest)
    return ProbabilityResult(
        probabilities=nest_probs[:, nest_of] * cond,
        nest_probabilities=nest_probs,
        conditional_probabilities=cond,
        logsums=logsums,
        nest_ids=tuple(n.id for n in tree.nests),
    )


def _check_choices(choices, tree: NestTree, n_obs: int) -> np.ndarray:
    choices = np.asarray(choices, dtype=int)
    if choices.shape != (n_obs,):
        raise ValueError(
            f"choices shape {choices.shape} does not match {n_obs} observations"
        )
    if choices.size and (choices.min() < 0 or choices.max() >= tree.n_alternatives):
        raise ValueError("choice index outside the alternative range")
    return choices


def _chunk_ranges(n: int):
    return [(lo, min(lo + _CHUNK, n)) for lo in range(0, n, _CHUNK)] or [(0, 0)]


def _run_chunks(fill, n_obs: int, threads: int) -> None:
    ranges = _chunk_ranges(n_obs)
    if threads <= 1 or len(ranges) == 1:
        for lo, hi in ranges:
            fill(lo, hi)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(lambda r: fill(*r), ranges))


def log_likelihood_per_obs(
    params: ParameterVector,
    design: DesignMatrix,
    tree: NestTree,
    choices,
    threads: int = 1,
) -> np.ndarray:
    """ln P(chosen) for each observation."""
    beta = _beta_from(params, design)
    lam = nest_lambdas(params, tree)
    nest_of = tree.nest_of()
    members = tree.member_indices()
    choices = _check_choices(choices, tree, design.n_obs)
    out = np.empty(design.n_obs)

    def fill(lo, hi):
        V = _utilities_rows(beta, design, lo, hi)
        _check_finite_utilities(V)
        log_cond, log_nest, _ = _log_probs(V, lam, nest_of, members)
        c = choices[lo:hi]
        r = np.arange(hi - lo)
        out[lo:hi] = log_cond[r, c] + log_nest[r, nest_of[c]]

    _run_chunks(fill, design.n_obs, threads)
    return out


def _utilities_rows(beta, design: DesignMatrix, lo, hi):
    w = beta[design.term_slot]
    with np.errstate(invalid="ignore"):
        return (design.term_values[lo:hi] * w) @ design.term_mask


def log_likelihood(
    params: ParameterVector,
    design: DesignMatrix,
    tree: NestTree,
    choices,
    threads: int = 1,
) -> float:
    """Total log-likelihood: fixed-order sum of the per-observation values."""
    return float(np.sum(log_likelihood_per_obs(params, design, tree, choices, threads)))


def score_matrix(
    params: ParameterVector,
    design: DesignMatrix,
    tree: NestTree,
    choices,
    threads: int = 1,
) -> np.ndarray:
    """Per-observation gradient of ln P(chosen), one row per observation,
    columns in the parameter layout order (betas, then free IVs).

    For the chosen alternative ``c`` in nest ``m``,

        d lnP / dV_j    = [j == c]/lam_m
                          + (1 - 1/lam_m) P(j|m) [j in m]  -  P(j)
        d lnP / d lam_n = [n == m] ((Vbar_m - V_c)/lam_m^2
                                    + logsum_m - Vbar_m/lam_m)
                          - P(n) (logsum_n - Vbar_n/lam_n)

    with ``Vbar_n`` the conditional within-nest mean utility. Beta scores
    chain through the design: d lnP / d beta_k = sum_j (d lnP/dV_j) x_{jk}.
    """
    beta = _beta_from(params, design)
    lam = nest_lambdas(params, tree)
    nest_of = tree.nest_of()
    members = tree.member_indices()
    choices = _check_choices(choices, tree, design.n_obs)
    free_idx = np.array(
        [n for n, nest in enumerate(tree.nests) if not nest.iv.is_fixed], dtype=int
    )
    S = design.slot_matrix()
    n_params = len(params.layout)
    out = np.empty((design.n_obs, n_params))

    def fill(lo, hi):
        V = _utilities_rows(beta, design, lo, hi)
        _check_finite_utilities(V)
        log_cond, log_nest, logsums = _log_probs(V, lam, nest_of, members)
        cond = np.exp(log_cond)
        nest_probs = np.exp(log_nest)
        P = nest_probs[:, nest_of] * cond
        c = choices[lo:hi]
        n = hi - lo
        r = np.arange(n)
        m = nest_of[c]
        lam_m = lam[m]
        in_chosen_nest = (nest_of[None, :] == m[:, None]).astype(float)
        D = -P
        D += (1.0 - 1.0 / lam_m)[:, None] * cond * in_chosen_nest
        D[r, c] += 1.0 / lam_m
        term_weight = D @ design.term_mask.T
        out[lo:hi, : design.n_slots] = (
            design.term_values[lo:hi] * term_weight
        ) @ S
        if free_idx.size:
            vbar = np.empty((n, len(members)))
            for k, idx in enumerate(members):
                vbar[:, k] = (cond[:, idx] * V[:, idx]).sum(axis=1)
            v_chosen = V[r, c]
            for col, k in enumerate(free_idx):
                own = (m == k).astype(float)
                centered = logsums[:, k] - vbar[:, k] / lam[k]
                out[lo:hi, design.n_slots + col] = (
                    own * ((vbar[:, k] - v_chosen) / lam[k] ** 2 + centered)
                    - nest_probs[:, k] * centered
                )

    _run_chunks(fill, design.n_obs, threads)
    return out


def gradient(
    params: ParameterVector,
    design: DesignMatrix,
    tree: NestTree,
    choices,
    threads: int = 1,
) -> np.ndarray:
    """Gradient of the total log-likelihood, in parameter layout order."""
    return score_matrix(params, design, tree, choices, threads).sum(axis=0)


def simulate(
    params: ParameterVector, design: DesignMatrix, tree: NestTree, seed: int
) -> SimOutput:
    """Draw one chosen alternative per observation by inverse CDF over the
    exact probability vector, using a PCG64 stream keyed by ``seed``."""
    probs = choice_probabilities(params, design, tree).probabilities
    rng = np.random.default_rng(seed)
    u = rng.random(design.n_obs)
    cum = probs.cumsum(axis=1)
    choices = (u[:, None] > cum).sum(axis=1)
    np.minimum(choices, tree.n_alternatives - 1, out=choices)
    return SimOutput(choices=choices, seed=int(seed), parameters=params)
