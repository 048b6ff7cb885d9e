"""Power-utility primitives and executable duality checks.

The verification logic mirrors the classical first-order conditions: a
primal/dual candidate pair is accepted when the marginal utility of the
terminal wealth is proportional to the terminal dual value path-by-path
(checked through a scale-free coefficient of variation), the wealth-dual
product is a martingale between 0 and the horizon, and the conjugate value
is finite-looking. Weak duality makes the estimated gap nonnegative for any
candidate pair; it collapses to zero at an optimum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidRiskAversion, MisalignedSamples
from .params import ControlParams
from .stats import (
    DEFAULT_CONFIDENCE,
    McEstimate,
    hill_tail_index,
    weighted_mean_estimate,
)

FOC_CV_TOLERANCE = 1e-3
# Relative SE above which a product check is inconclusive rather than failed.
_INCONCLUSIVE_REL_SE = 0.2


class Verdict(str, Enum):
    VERIFIED = "VerifiedWithinTolerance"
    VIOLATED = "Violated"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class UtilitySpec:
    """Power utility x^(1-a)/(1-a) with its conjugate quartet.

    Invariants (to round-off): marginal(inverse_marginal(y)) = y and
    conjugate(y) = u(inverse_marginal(y)) - y*inverse_marginal(y).
    """

    a: float

    def u(self, x):
        return np.asarray(x) ** (1.0 - self.a) / (1.0 - self.a)

    def marginal(self, x):
        return np.asarray(x) ** (-self.a)

    def conjugate(self, y):
        return (self.a / (1.0 - self.a)) * np.asarray(y) ** (
            -(1.0 - self.a) / self.a)

    def inverse_marginal(self, y):
        return np.asarray(y) ** (-1.0 / self.a)

    @property
    def conjugate_power(self) -> float:
        """p = 1/(1-a), for which conjugate(y) = (p-1) y^(-1/(p-1))."""
        return 1.0 / (1.0 - self.a)


def power_utility(a: float) -> UtilitySpec:
    """Power utility with relative risk-aversion ``a`` in (0, 1)."""
    if not 0.0 < a < 1.0:
        raise InvalidRiskAversion(f"risk aversion must be in (0, 1): {a}")
    return UtilitySpec(a)


@dataclass
class EnvelopeReport:
    passed: bool
    worst_margin: float
    worst_pair: tuple[float, float]
    worst_side: str


def check_risk_aversion_bounds(marginal: Callable[[float], float], a: float,
                               b: float, big_c: float,
                               pairs: Sequence[tuple[float, float]]
                               ) -> EnvelopeReport:
    """Check (1/C)(y/x)^a <= U'(x)/U'(y) <= C(y/x)^b on a grid of x <= y.

    Margins are in log scale; the report carries the most violating pair.
    """
    worst = math.inf
    worst_pair = (float("nan"), float("nan"))
    worst_side = ""
    for x, y in pairs:
        if not (0.0 < x <= y):
            raise ValueError(f"need 0 < x <= y, got ({x}, {y})")
        ratio = math.log(marginal(x) / marginal(y))
        lo = a * math.log(y / x) - math.log(big_c)
        hi = b * math.log(y / x) + math.log(big_c)
        if ratio - lo < worst:
            worst = ratio - lo
            worst_pair = (x, y)
            worst_side = "lower"
        if hi - ratio < worst:
            worst = hi - ratio
            worst_pair = (x, y)
            worst_side = "upper"
    # Tiny negative slack from round-off is not a violation.
    return EnvelopeReport(worst >= -1e-12, worst, worst_pair, worst_side)


@dataclass
class DualityReport:
    """Outcome of the first-order verification on a candidate pair."""

    foc_cv: float
    product_mean: McEstimate
    v_estimate: McEstimate
    v_tail_index: float
    gap: McEstimate | None
    variant: str
    verdict: Verdict
    x0: float
    y0: float
    n: int

    def to_dict(self) -> dict:
        return {
            "foc_cv": self.foc_cv,
            "product_mean": self.product_mean.to_dict(),
            "v_estimate": self.v_estimate.to_dict(),
            "v_tail_index": self.v_tail_index,
            "gap": None if self.gap is None else self.gap.to_dict(),
            "variant": self.variant,
            "verdict": self.verdict.value,
            "x0": self.x0,
            "y0": self.y0,
            "n": self.n,
        }


def implied_dual_scale(utility: UtilitySpec, x_t: np.ndarray,
                       y_t: np.ndarray) -> float:
    """The y making y*Y_T sit on U'(X_T): mean of U'(X_T)/Y_T.

    With an exact first-order condition the ratio is constant and this is
    that constant; otherwise it centers the product condition.
    """
    return float(np.mean(utility.marginal(x_t) / y_t))


def verify_lemma1(utility: UtilitySpec, x_t: np.ndarray, y_t: np.ndarray,
                  x0: float, y0: float, weights: np.ndarray,
                  gap: McEstimate | None = None,
                  variant: str = "",
                  foc_tol: float = FOC_CV_TOLERANCE,
                  confidence: float = DEFAULT_CONFIDENCE) -> DualityReport:
    """First-order verification of a primal/dual candidate pair.

    Checks, against P-importance ``weights``:
      * scale-free first-order condition: the coefficient of variation of
        U'(X_T)/Y_T across paths is below ``foc_tol`` (a global scale, e.g.
        a Monte Carlo normalizer, cancels),
      * product martingality: E_P[X_T Y_T] = x0*y0 within 3 SE,
      * finiteness proxy for E_P[V(Y_T)]: the estimate plus a Hill tail
        index over the largest 1% of conjugate values.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    y_t = np.asarray(y_t, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if not (x_t.shape == y_t.shape == weights.shape):
        raise MisalignedSamples(
            f"sample shapes differ: {x_t.shape}, {y_t.shape}, {weights.shape}")
    ratio = utility.marginal(x_t) / y_t
    mean_ratio = float(np.mean(ratio))
    foc_cv = float(np.std(ratio) / mean_ratio) if mean_ratio != 0.0 else math.inf

    product = weighted_mean_estimate(x_t * y_t, weights, confidence)
    v_vals = utility.conjugate(y_t)
    v_est = weighted_mean_estimate(v_vals, weights, confidence)
    tail = hill_tail_index(v_vals)

    target = x0 * y0
    if product.std_error > _INCONCLUSIVE_REL_SE * abs(target):
        verdict = Verdict.INCONCLUSIVE
    elif foc_cv < foc_tol and abs(product.value - target) <= 3.0 * product.std_error:
        verdict = Verdict.VERIFIED
    else:
        verdict = Verdict.VIOLATED
    return DualityReport(foc_cv, product, v_est, tail, gap, variant, verdict,
                         x0, y0, int(x_t.size))


def duality_gap(utility: UtilitySpec, x0: float,
                primal_candidates: Sequence[np.ndarray],
                dual_candidates: Sequence[np.ndarray], y: float,
                weights: np.ndarray,
                confidence: float = DEFAULT_CONFIDENCE) -> McEstimate:
    """Estimate min_Y E_P[V(y Y_T)] + x0*y - max_X E_P[U(X_T)].

    Candidates are per-path terminal arrays; the best of each family is
    chosen by its estimated mean and the gap's SE comes from the per-path
    combination on the shared ensemble (weak duality would make the true
    value nonnegative and zero at an optimum).
    """
    weights = np.asarray(weights, dtype=np.float64)
    best_v = None
    for y_t in dual_candidates:
        v_vals = utility.conjugate(y * np.asarray(y_t))
        est = weighted_mean_estimate(v_vals, weights, confidence)
        if best_v is None or est.value < best_v[0].value:
            best_v = (est, v_vals)
    best_u = None
    for x_t in primal_candidates:
        u_vals = utility.u(np.asarray(x_t))
        est = weighted_mean_estimate(u_vals, weights, confidence)
        if best_u is None or est.value > best_u[0].value:
            best_u = (est, u_vals)
    if best_v is None or best_u is None:
        raise ValueError("need at least one candidate on each side")
    per_path = best_v[1] + x0 * y - best_u[1]
    return weighted_mean_estimate(per_path, weights, confidence)


# ---------------------------------------------------------------------------
# Lognormal control market: closed-form optimum
# ---------------------------------------------------------------------------


def merton_value(x: float, a: float, params: ControlParams) -> float:
    """Optimal expected power utility: U(x) exp(mpr^2 T (1-a)/(2a))."""
    growth = params.mpr ** 2 * params.maturity * (1.0 - a) / (2.0 * a)
    return x ** (1.0 - a) / (1.0 - a) * math.exp(growth)


def merton_dual_scale(x: float, a: float, params: ControlParams) -> float:
    """y = u'(x) for the control market."""
    growth = params.mpr ** 2 * params.maturity * (1.0 - a) / (2.0 * a)
    return x ** (-a) * math.exp(growth)


def merton_optimal_fraction(a: float, params: ControlParams) -> float:
    """Constant optimal risky fraction mpr/(a*vol)."""
    return params.mpr / (a * params.vol)


def merton_terminal_wealth(x: float, a: float, params: ControlParams,
                           z_terminal: np.ndarray) -> np.ndarray:
    """Optimal terminal wealth I(y* Z_T) from terminal deflator samples."""
    y_star = merton_dual_scale(x, a, params)
    return (y_star * np.asarray(z_terminal)) ** (-1.0 / a)


# ---------------------------------------------------------------------------
# Wealth/dual ratio over a stopping family (buy-and-hold primal)
# ---------------------------------------------------------------------------


@dataclass
class WealthDualRow:
    label: str
    max_ratio: float
    avg_ratio: float
    n_states: int
    n_flagged: int = 0


@dataclass
class WealthDualReport:
    """Empirical max over stopped states of X_tau / I(Y_tau).

    Existence of a finite stable bound is the point; no specific constant
    is asserted. ``terminal_ratio`` restates the first-order condition at
    the horizon (equals 1 when it holds exactly).
    """

    rows: list[WealthDualRow]
    family_max: float
    terminal_ratio: float
    n_flagged: int = 0

    def to_rows(self) -> list[dict]:
        return [{
            "rule": r.label, "max_ratio": r.max_ratio, "avg_ratio": r.avg_ratio,
            "n_states": r.n_states, "n_flagged": r.n_flagged,
        } for r in self.rows]


def wealth_dual_ratio(campaign, normalizer: McEstimate,
                      utility: UtilitySpec, x0: float, y_scale: float
                      ) -> WealthDualReport:
    """Ratios X_tau / I(y Y_tau) with X = x0*S and the dual candidate.

    Dual values at stopped states come from the campaign's conditional
    weight means: Y_tau = exp(gamma*tau) * normalizer / m(w | state). A
    state whose conditional weight mean carries more than 20% relative SE
    gives no usable dual value and is flagged instead of ranked.
    """
    params = campaign.params
    rows = []
    family_max = 0.0
    n_flagged_total = 0
    for rule in campaign.rules:
        ratios = []
        n_flagged = 0
        for st in rule.states:
            if st.m_w.std_error > 0.2 * st.m_w.value:
                n_flagged += 1
                continue
            y_tau = math.exp(params.gamma * st.tau) * normalizer.value / \
                st.m_w.value
            ratio = x0 * st.s_tau / float(
                utility.inverse_marginal(y_scale * y_tau))
            ratios.append(ratio)
        n_flagged_total += n_flagged
        if ratios:
            arr = np.array(ratios)
            rows.append(WealthDualRow(rule.label, float(arr.max()),
                                      float(arr.mean()), arr.size, n_flagged))
            family_max = max(family_max, float(arr.max()))
        else:
            rows.append(WealthDualRow(rule.label, float("nan"), float("nan"),
                                      0, n_flagged))
    # At the horizon the ratio restates the first-order condition.
    terminal = (y_scale * normalizer.value / params.level ** params.delta
                ) ** (1.0 / params.a) * x0
    return WealthDualReport(rows, family_max, terminal, n_flagged_total)
