"""Parameter records for the two built-in markets.

The jump-intensity market is driven by six tied constants (a, p, q, b,
delta, gamma): q is conjugate to p, delta = b - a, and gamma = b(1-qb)/2.
Feasibility requires

    0 < a < 1,   p > 1/(1-a),   a < b < 1/q,   gamma <= delta(1-delta)/2.

The lognormal control market needs only a market price of risk, a maturity
and a volatility.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

from .errors import ConstraintViolated, InvalidP, SingularIntensity

# The absorbing price level is hard-wired: several constants (2**-delta,
# the intensity pole) depend on it, and generalizing it is a non-goal.
ABSORBING_LEVEL = 2.0

# Resolution of the automatic b search.
_B_SEARCH_TOL = 1e-12


class DensityVariant(str, Enum):
    """Which reference-density convention to use for dP/dQ.

    LITERAL   : dP/dQ proportional to S_T**b.
    CORRECTED : dP/dQ proportional to exp(gamma*T) * S_T**b, which makes the
                dual candidate terminal value exactly proportional to S_T**-a.
    """

    LITERAL = "literal"
    CORRECTED = "corrected"


def _require(ok: bool, inequality: str, lhs: float, rhs: float) -> None:
    if not ok:
        raise ConstraintViolated(
            f"{inequality} violated: {lhs:.12g} vs {rhs:.12g}"
        )


@dataclass(frozen=True)
class CounterexampleParams:
    """Validated constants of the jump-intensity market.

    Attributes
    ----------
    a : relative risk-aversion, in (0, 1)
    p : functional exponent, > 1/(1-a)
    q : conjugate exponent p/(p-1)
    b : density exponent, in (a, 1/q)
    delta : b - a
    gamma : b(1-qb)/2, the intensity floor
    variant : density convention for dP/dQ
    level : absorbing price level (fixed at 2)
    """

    a: float
    p: float
    q: float
    b: float
    delta: float
    gamma: float
    variant: DensityVariant = DensityVariant.CORRECTED
    level: float = ABSORBING_LEVEL

    def __post_init__(self) -> None:
        if not (0.0 < self.a < 1.0):
            raise ConstraintViolated(
                f"0 < a < 1 violated: a = {self.a:.12g}"
            )
        if not self.p > 1.0 / (1.0 - self.a):
            raise InvalidP(
                f"p > 1/(1-a) violated: p = {self.p:.12g} vs "
                f"1/(1-a) = {1.0 / (1.0 - self.a):.12g}"
            )
        _require(
            math.isclose(self.q, self.p / (self.p - 1.0), rel_tol=1e-9),
            "q = p/(p-1)", self.q, self.p / (self.p - 1.0),
        )
        _require(self.q < 1.0 / self.a, "q < 1/a", self.q, 1.0 / self.a)
        _require(self.a < self.b, "a < b", self.a, self.b)
        _require(self.b < 1.0 / self.q, "b < 1/q", self.b, 1.0 / self.q)
        _require(
            math.isclose(self.delta, self.b - self.a, rel_tol=1e-9, abs_tol=1e-12),
            "delta = b - a", self.delta, self.b - self.a,
        )
        _require(self.delta > 0.0, "delta > 0", self.delta, 0.0)
        gamma_def = 0.5 * self.b * (1.0 - self.q * self.b)
        _require(
            math.isclose(self.gamma, gamma_def, rel_tol=1e-9, abs_tol=1e-12),
            "gamma = b(1-qb)/2", self.gamma, gamma_def,
        )
        _require(self.gamma > 0.0, "gamma > 0", self.gamma, 0.0)
        cap = 0.5 * self.delta * (1.0 - self.delta)
        _require(self.gamma <= cap, "gamma <= delta(1-delta)/2", self.gamma, cap)
        if self.level != ABSORBING_LEVEL:
            raise ConstraintViolated(
                f"level = 2 violated: level = {self.level:.12g}"
            )

    def with_variant(self, variant: DensityVariant) -> "CounterexampleParams":
        return replace(self, variant=variant)

    def to_json_dict(self) -> dict:
        """Flat JSON object; derived fields are included for readability."""
        return {
            "a": self.a,
            "p": self.p,
            "q": self.q,
            "b": self.b,
            "delta": self.delta,
            "gamma": self.gamma,
            "variant": self.variant.value,
            "level": self.level,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "CounterexampleParams":
        """Rebuild from JSON, re-deriving q/delta/gamma rather than trusting them.

        Stored derived fields, when present, must agree with the re-derived
        values; disagreement raises ConstraintViolated.
        """
        a = float(obj["a"])
        p = float(obj["p"])
        b = float(obj["b"])
        params = select_counterexample_params(
            a, p, b=b, variant=DensityVariant(obj.get("variant", "corrected"))
        )
        for key in ("q", "delta", "gamma"):
            if key in obj:
                _require(
                    math.isclose(float(obj[key]), getattr(params, key),
                                 rel_tol=1e-9, abs_tol=1e-12),
                    f"stored {key} consistent with (a, p, b)",
                    float(obj[key]), getattr(params, key),
                )
        if "level" in obj:
            _require(float(obj["level"]) == ABSORBING_LEVEL,
                     "level = 2", float(obj["level"]), ABSORBING_LEVEL)
        return params


@dataclass(frozen=True)
class ControlParams:
    """Lognormal control market: constant market price of risk, finite horizon."""

    mpr: float
    maturity: float
    vol: float = 0.2

    def __post_init__(self) -> None:
        if not math.isfinite(self.mpr):
            raise ConstraintViolated(f"mpr finite violated: mpr = {self.mpr}")
        _require(self.maturity > 0.0, "maturity > 0", self.maturity, 0.0)
        _require(self.vol > 0.0, "vol > 0", self.vol, 0.0)

    def to_json_dict(self) -> dict:
        return {"mpr": self.mpr, "maturity": self.maturity, "vol": self.vol}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ControlParams":
        return cls(mpr=float(obj["mpr"]), maturity=float(obj["maturity"]),
                   vol=float(obj.get("vol", 0.2)))


def select_counterexample_params(
    a: float,
    p: float,
    b: float | None = None,
    variant: DensityVariant = DensityVariant.CORRECTED,
) -> CounterexampleParams:
    """Build a fully validated parameter record.

    When ``b`` is omitted, the feasible region is searched by repeatedly
    halving the gap toward 1/q, starting from the midpoint of (a, 1/q):
    gamma -> 0 there while delta(1-delta)/2 stays bounded away from 0, so a
    feasible b always exists.

    Raises
    ------
    InvalidP
        If p <= 1/(1-a).
    ConstraintViolated
        If an explicit b lies outside (a, 1/q) or fails
        gamma <= delta(1-delta)/2.
    """
    if not (0.0 < a < 1.0):
        raise ConstraintViolated(f"0 < a < 1 violated: a = {a:.12g}")
    if p <= 1.0 / (1.0 - a):
        raise InvalidP(
            f"p > 1/(1-a) violated: p = {p:.12g} vs 1/(1-a) = {1.0 / (1.0 - a):.12g}"
        )
    q = p / (p - 1.0)

    def build(b_val: float) -> CounterexampleParams:
        return CounterexampleParams(
            a=a, p=p, q=q, b=b_val,
            delta=b_val - a,
            gamma=0.5 * b_val * (1.0 - q * b_val),
            variant=variant,
        )

    if b is not None:
        return build(b)

    hi = 1.0 / q
    x = 0.5 * (a + hi)
    while hi - x > _B_SEARCH_TOL:
        delta = x - a
        gamma = 0.5 * x * (1.0 - q * x)
        if gamma <= 0.5 * delta * (1.0 - delta):
            return build(x)
        x = 0.5 * (x + hi)
    raise ConstraintViolated(
        f"no feasible b found in (a, 1/q) = ({a:.12g}, {hi:.12g})"
    )


def intensity(s: float, params: CounterexampleParams, post_hit: bool = False) -> float:
    """Jump intensity at price ``s``.

    gamma / (1 - (s/2)**delta) before the absorbing level is reached,
    the floor gamma afterwards. Always >= gamma.

    Raises
    ------
    SingularIntensity
        At s = level with post_hit False (the pole); path simulation must
        never evaluate the pre-hit branch exactly at the level.
    """
    if not 0.0 <= s <= params.level:
        raise ValueError(f"price out of range [0, {params.level}]: {s}")
    if post_hit:
        return params.gamma
    if s == params.level:
        raise SingularIntensity(
            f"intensity pole: s = {params.level} with post_hit=False"
        )
    if s == 0.0:
        return params.gamma
    # 1 - (s/2)**delta via expm1 so the denominator stays positive even when
    # s is within an ulp of the level.
    denom = -math.expm1(params.delta * (math.log(s) - math.log(params.level)))
    return params.gamma / denom


def p_prime(a: float, b: float) -> float:
    """Exponent transfer map: 1 + b/(1-a).

    Monotone increasing in both arguments; at b = a it collapses to 1/(1-a).
    """
    if not (0.0 < a < 1.0):
        raise ConstraintViolated(f"0 < a < 1 violated: a = {a:.12g}")
    if b < a:
        raise ConstraintViolated(f"b >= a violated: b = {b:.12g} vs a = {a:.12g}")
    return 1.0 + b / (1.0 - a)
