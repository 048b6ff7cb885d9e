"""Density weights, stochastic exponentials, and conditional expectations.

The physical measure P is reached from the simulation measure Q by the
terminal reweighting dP/dQ = w_T / E_Q[w_T], where the raw weight is

    literal   : w_T = S_T**b
    corrected : w_T = exp(gamma*T) * S_T**b

(the corrected factor makes the dual candidate terminal value collapse to a
constant times S_T**-a). The dual candidate itself is the product of the
jump stochastic exponential exp(gamma*T)(S_T/2)**delta and the inverse
density Z_T = normalizer / w_T.

P-expectations of per-path data come from the self-normalized estimator;
conditional P-expectations at a stopped state come from resimulated
continuations via the Bayes ratio E_Q[X w | state] / E_Q[w | state].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .engine import (
    GridSpec,
    MarkovState,
    Path,
    PathBundle,
    STREAM_NORMALIZER,
    resimulate_from,
    simulate_paths,
)
from .errors import CensoredPath, DegenerateWeight, MisalignedSamples
from .params import CounterexampleParams, DensityVariant
from .stats import DEFAULT_CONFIDENCE, McEstimate, weighted_mean_estimate


def stoch_exp_continuous(increments: np.ndarray, dts: np.ndarray) -> np.ndarray:
    """Stochastic exponential of a Brownian path from its increments.

    Exact per-step update s <- s * exp(dB - dt/2); returns the path on the
    n+1 grid nodes, starting at 1.
    """
    increments = np.asarray(increments, dtype=np.float64)
    dts = np.asarray(dts, dtype=np.float64)
    if increments.shape != dts.shape:
        raise MisalignedSamples("increments and dts differ in shape")
    log_path = np.concatenate(([0.0], np.cumsum(increments - 0.5 * dts)))
    return np.exp(log_path)


def el_terminal_values(t_final: np.ndarray, s_final: np.ndarray,
                       params: CounterexampleParams) -> np.ndarray:
    """Terminal jump stochastic exponential exp(gamma*T) (S_T/2)**delta."""
    return np.exp(params.gamma * np.asarray(t_final)) * \
        (np.asarray(s_final) / params.level) ** params.delta


def stoch_exp_jump_terminal(path: Path | None, params: CounterexampleParams,
                            *, t_final: float | None = None,
                            s_final: float | None = None) -> float:
    """Terminal value of the jump stochastic exponential on one path.

    Equals exp(gamma*T1) when the horizon is the level hit (the price is at
    the level, so the power factor is 1).
    """
    if path is not None:
        if path.censored:
            raise CensoredPath("jump stochastic exponential needs a resolved horizon")
        t_final, s_final = path.t_final, path.price[-1]
    if t_final is None or s_final is None or t_final != t_final:
        raise CensoredPath("jump stochastic exponential needs a resolved horizon")
    return float(el_terminal_values(np.float64(t_final), np.float64(s_final), params))


def raw_weight_values(t_final: np.ndarray, s_final: np.ndarray,
                      params: CounterexampleParams) -> np.ndarray:
    """Unnormalized dP/dQ weights for the parameter record's variant."""
    s_pow = np.asarray(s_final) ** params.b
    if params.variant is DensityVariant.CORRECTED:
        return np.exp(params.gamma * np.asarray(t_final)) * s_pow
    return s_pow


def density_weight(path: Path | None, params: CounterexampleParams,
                   *, t_final: float | None = None,
                   s_final: float | None = None) -> float:
    """Raw (unnormalized) dP/dQ weight of one path; normalization is an
    ensemble-level estimate."""
    if path is not None:
        if path.censored:
            raise CensoredPath("density weight needs a resolved horizon")
        t_final, s_final = path.t_final, path.price[-1]
    if t_final is None or s_final is None or t_final != t_final:
        raise CensoredPath("density weight needs a resolved horizon")
    return float(raw_weight_values(np.float64(t_final), np.float64(s_final), params))


def estimate_normalizer(params: CounterexampleParams, grid: GridSpec, n: int,
                        seed: int, *, stream: int = STREAM_NORMALIZER,
                        workers: int = 1,
                        confidence: float = DEFAULT_CONFIDENCE) -> McEstimate:
    """E_Q[w_raw] from an ensemble of its own (avoids same-sample ratio bias)."""
    bundle = simulate_paths(params, grid, n, seed, stream=stream,
                            workers=workers)
    unc = bundle.uncensored
    w = raw_weight_values(bundle.t_final[unc], bundle.s_final[unc], params)
    return McEstimate.from_samples(w, confidence)


@dataclass
class DensityTriple:
    """Per-path terminal density data for one ensemble.

    Arrays are aligned with the bundle's paths; censored slots hold NaN.
    ``normalizer_independent`` records whether the normalizer came from a
    separate ensemble (its noise is then independent of the per-path data).
    """

    w_raw: np.ndarray
    normalizer: McEstimate
    el_terminal: np.ndarray
    y_hat_terminal: np.ndarray
    variant: DensityVariant
    uncensored: np.ndarray
    normalizer_independent: bool

    @property
    def n_censored(self) -> int:
        return int(np.sum(~self.uncensored))

    def w_max_observed(self) -> float:
        return float(np.nanmax(self.w_raw))


def make_density_triple(bundle: PathBundle, params: CounterexampleParams,
                        normalizer: McEstimate | None = None,
                        confidence: float = DEFAULT_CONFIDENCE) -> DensityTriple:
    """Assemble weights, the jump exponential, and the dual candidate.

    When ``normalizer`` is None it is estimated from this same ensemble
    (flagged accordingly); by default callers should pass an estimate from
    an independent ensemble.
    """
    unc = bundle.uncensored
    n = bundle.n_paths
    w = np.full(n, np.nan)
    el = np.full(n, np.nan)
    w[unc] = raw_weight_values(bundle.t_final[unc], bundle.s_final[unc], params)
    el[unc] = el_terminal_values(bundle.t_final[unc], bundle.s_final[unc], params)
    if np.any(w[unc] <= 0.0):
        raise ValueError("nonpositive density weight on an uncensored path")
    independent = normalizer is not None
    if normalizer is None:
        normalizer = McEstimate.from_samples(w[unc], confidence)
    y_hat = el * (normalizer.value / w)
    return DensityTriple(w, normalizer, el, y_hat, params.variant, unc,
                         independent)


def dual_minimizer_terminal(path: Path | None, params: CounterexampleParams,
                            normalizer: McEstimate, *,
                            t_final: float | None = None,
                            s_final: float | None = None) -> float:
    """Terminal dual candidate on one path: E(L)_T * Z_T."""
    el = stoch_exp_jump_terminal(path, params, t_final=t_final, s_final=s_final)
    w = density_weight(path, params, t_final=t_final, s_final=s_final)
    return el * normalizer.value / w


def p_expectation(x: np.ndarray, triple: DensityTriple,
                  confidence: float = DEFAULT_CONFIDENCE) -> McEstimate:
    """Self-normalized P-mean of per-path data x (aligned with the bundle)."""
    unc = triple.uncensored
    return weighted_mean_estimate(np.asarray(x)[unc], triple.w_raw[unc],
                                  confidence)


def p_expectation_of_dual_product(x: np.ndarray, triple: DensityTriple,
                                  confidence: float = DEFAULT_CONFIDENCE
                                  ) -> McEstimate:
    """P-mean of x * Y_hat_T.

    The weights cancel against the dual candidate's inverse density:
    E_P[x Y_hat] = normalizer * E_Q[x el] / E_Q[w]. Normalizer noise is
    folded in when it came from an independent ensemble.
    """
    unc = triple.uncensored
    xv = np.asarray(x, dtype=np.float64)[unc]
    num = xv * triple.el_terminal[unc]
    if not triple.normalizer_independent:
        # Same-ensemble normalizer cancels against the denominator exactly.
        return McEstimate.from_samples(num, confidence)
    ratio = weighted_mean_estimate(num / triple.w_raw[unc],
                                   triple.w_raw[unc], confidence)
    norm = triple.normalizer
    value = norm.value * ratio.value
    if value != 0.0:
        rel = math.hypot(norm.std_error / norm.value,
                         ratio.std_error / abs(ratio.value))
        se = abs(value) * rel
    else:
        se = norm.value * ratio.std_error
    return McEstimate.from_value_se(value, se, ratio.n, confidence)


def bayes_conditional(state: MarkovState,
                      integrand: Callable[[PathBundle], np.ndarray],
                      params: CounterexampleParams, grid: GridSpec,
                      n_inner: int, seed: int, *, stream: int,
                      unit_weight: bool = False,
                      workers: int = 1,
                      confidence: float = DEFAULT_CONFIDENCE,
                      min_weight_z: float = 3.0) -> McEstimate:
    """Conditional expectation at a stopped state by resimulation.

    P-conditional expectations use the Bayes ratio
    E_Q[X w | state] / E_Q[w | state] over fresh continuations; passing
    ``unit_weight=True`` gives the plain Q-conditional mean.

    Raises
    ------
    DegenerateWeight
        If the conditional weight mean is indistinguishable from zero at
        ``min_weight_z`` standard errors.
    """
    inner = resimulate_from(state, params, grid, n_inner, seed, stream=stream,
                            workers=workers)
    unc = inner.uncensored
    if not np.any(unc):
        raise DegenerateWeight("all continuations censored")
    x = np.asarray(integrand(inner), dtype=np.float64)[unc]
    if unit_weight:
        w = np.ones(x.size)
    else:
        w = raw_weight_values(inner.t_final[unc], inner.s_final[unc], params)
    return weighted_mean_estimate(x, w, confidence, min_weight_z=min_weight_z)
