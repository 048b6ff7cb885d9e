"""Stopping-family diagnostics over nested Monte Carlo.

"For every stopping time" conditions are probed on a finite family of rules:
deterministic times, price-level first passages, and compensator-threshold
first passages. Outer paths are evolved to each rule, a subsample of the
stopped states gets an inner ensemble of resimulated continuations, and the
conditional functionals are assembled from inner moments:

  * functional of the deflator Z at exponent p (the ratio
    E_tau[(Z_tau/Z_T)^(1/(p-1))] under P) reduces to
    m(w^qp) / m(w)^qp with qp = p/(p-1) over conditional weight moments,
  * functional of the dual candidate at exponent p' reduces to
    exp(c*gamma*tau) * m(w^(1+c)/el^c) / m(w)^(1+c) with c = 1/(p'-1),
  * the moment sandwich needs plain conditional means of S_T^eps.

Every estimate carries a delta-method standard error; per-rule aggregation
averages and maximizes over the probed outer states. The reported family
maximum is a lower bound for the essential supremum over all stopping
times, never a certificate.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    GridSpec,
    MarkovState,
    PathBundle,
    STREAM_INNER_BASE,
    STREAM_RULES,
    StoppingRuleSet,
    inner_stream,
    resimulate_from,
    simulate_paths,
)
from .errors import ConstraintViolated
from .measures import el_terminal_values, raw_weight_values
from .params import CounterexampleParams, DensityVariant
from .stats import (
    DEFAULT_CONFIDENCE,
    McEstimate,
    bonferroni_z,
    power_ratio_diff_estimate,
    power_ratio_estimate,
)

# A conditional estimate whose SE exceeds this fraction of its value is
# flagged Inconclusive rather than compared.
UNSTABLE_SE_FRACTION = 0.2


@dataclass(frozen=True)
class StoppingFamily:
    """A finite probe of the quantifier over stopping times.

    Level and compensator rules are first-passage rules (resolved at grid
    nodes), so every member is a stopping rule of the simulated filtration.
    Compensator fractions f stop at the Exp(1) quantile -log(1-f) of
    accumulated hazard.
    """

    deterministic_times: tuple[float, ...] = ()
    level_hits: tuple[float, ...] = ()
    compensator_fractions: tuple[float, ...] = ()
    include_zero: bool = True
    include_terminal: bool = True

    def __post_init__(self) -> None:
        for lv in self.level_hits:
            if not 0.0 < lv < 2.0:
                raise ConstraintViolated(
                    f"level hit in (0, 2) violated: {lv}")
        for f in self.compensator_fractions:
            if not 0.0 < f < 1.0:
                raise ConstraintViolated(
                    f"compensator fraction in (0, 1) violated: {f}")
        for t in self.deterministic_times:
            if t < 0.0:
                raise ConstraintViolated(f"deterministic time >= 0 violated: {t}")

    @classmethod
    def default_counterexample(cls) -> "StoppingFamily":
        return cls(
            deterministic_times=(0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0),
            level_hits=(0.25, 0.5, 1.25, 1.5, 1.75, 1.9),
            compensator_fractions=(0.25, 0.5, 0.75),
        )

    @classmethod
    def default_control(cls, maturity: float) -> "StoppingFamily":
        times = tuple(maturity * f for f in (0.0, 0.25, 0.5, 0.75))
        return cls(deterministic_times=times, level_hits=(),
                   compensator_fractions=())

    def to_ruleset(self, start_price: float = 1.0) -> StoppingRuleSet:
        det = sorted(set(self.deterministic_times) |
                     ({0.0} if self.include_zero else set()))
        ups = [lv for lv in self.level_hits if lv >= start_price]
        downs = [lv for lv in self.level_hits if lv < start_price]
        comp = [-math.log1p(-f) for f in self.compensator_fractions]
        return StoppingRuleSet.build(det_times=det, levels_up=ups,
                                     levels_down=downs, comp_thresholds=comp)


@dataclass
class StateStat:
    """Inner-ensemble statistics at one stopped state.

    ``heavy_share`` is the largest single-path share of the heavy moment
    sum behind the power-p functional; a share near 1 means one draw
    dominates and the estimate (and its SE) cannot be trusted.
    """

    outer_index: int
    tau: float
    s_tau: float
    n_inner_used: int
    n_inner_censored: int
    m_w: McEstimate
    m_el_dur: McEstimate
    f_z_model: McEstimate
    f_z_power: McEstimate
    f_y_power: McEstimate
    prop1_diff: McEstimate
    s_eps: dict[float, McEstimate]
    heavy_share: float = 0.0
    f_y_extra: dict[float, McEstimate] = field(default_factory=dict)

    def unstable(self, est: McEstimate) -> bool:
        """Spec'd flagging rule: SE over 20% of the value, or a dominated
        heavy-moment sample (possibly infinite conditional moments)."""
        if self.heavy_share > 0.2:
            return True
        return est.std_error > UNSTABLE_SE_FRACTION * abs(est.value)


@dataclass
class RuleResult:
    """Campaign output for one stopping rule."""

    label: str
    n_outer_resolved: int
    n_outer_terminal: int
    n_outer_censored: int
    states: list[StateStat]


@dataclass
class CampaignResult:
    params: CounterexampleParams
    family: StoppingFamily
    n_outer: int
    n_states: int
    n_inner: int
    seed: int
    grid_outer: GridSpec
    grid_inner: GridSpec
    rules: list[RuleResult]
    outer_censored_mass: float
    max_inner_censored_mass: float

    @property
    def p_power(self) -> float:
        return 1.0 / (1.0 - self.params.a)


def _state_columns(params: CounterexampleParams, inner: PathBundle,
                   tau: float):
    """Duration-based weight/exponential primitives of an inner ensemble."""
    unc = inner.uncensored
    dur = inner.t_final[unc] - tau
    s_t = inner.s_final[unc]
    w_abs = raw_weight_values(inner.t_final[unc], s_t, params)
    el_abs = el_terminal_values(inner.t_final[unc], s_t, params)
    return dur, s_t, w_abs, el_abs


def evaluate_state(params: CounterexampleParams, grid_inner: GridSpec,
                   n_inner: int, seed: int, stream: int, outer_index: int,
                   tau: float, s_tau: float, p_model: float,
                   epsilons: tuple[float, ...],
                   extra_y_exponents: tuple[float, ...] = (),
                   confidence: float = DEFAULT_CONFIDENCE,
                   ) -> StateStat:
    """Resimulate one stopped state and assemble its conditional functionals."""
    state = MarkovState(t=tau, s=s_tau)
    inner = resimulate_from(state, params, grid_inner, n_inner, seed,
                            stream=stream)
    _, s_t, w_abs, el_abs = _state_columns(params, inner, tau)
    n_used = int(s_t.size)
    n_cens = inner.n_paths - n_used

    qp = p_model / (p_model - 1.0)
    p_power = 1.0 / (1.0 - params.a)
    c = 1.0 / (p_power - 1.0)
    k_fac = math.exp(c * params.gamma * tau)

    w_qp = w_abs ** qp
    w_pc = w_abs ** (1.0 + c)
    g_pc = w_pc / el_abs ** c

    f_z_model = power_ratio_estimate(w_qp, w_abs, qp, 1.0, confidence)
    f_z_power = power_ratio_estimate(w_pc, w_abs, 1.0 + c, 1.0, confidence)
    f_y_power = power_ratio_estimate(g_pc, w_abs, 1.0 + c, k_fac, confidence)
    prop1_diff = power_ratio_diff_estimate(g_pc, w_pc, w_abs, 1.0 + c, k_fac,
                                           confidence)
    total_pc = float(np.sum(w_pc))
    heavy_share = float(np.max(w_pc)) / total_pc if total_pc > 0.0 else 1.0

    # Class-(D) margin uses the duration-based conditional mean of the jump
    # exponential: exp(gamma*tau) factors cancel against Y_tau.
    el_dur = el_abs * math.exp(-params.gamma * tau)
    m_el = McEstimate.from_samples(el_dur, confidence)
    m_w = McEstimate.from_samples(w_abs, confidence)
    s_eps = {eps: McEstimate.from_samples(s_t ** eps, confidence)
             for eps in epsilons}

    f_y_extra = {}
    for p_x in extra_y_exponents:
        cx = 1.0 / (p_x - 1.0)
        kx = math.exp(cx * params.gamma * tau)
        gx = w_abs ** (1.0 + cx) / el_abs ** cx
        f_y_extra[p_x] = power_ratio_estimate(gx, w_abs, 1.0 + cx, kx,
                                              confidence)

    return StateStat(outer_index, tau, s_tau, n_used, n_cens, m_w, m_el,
                     f_z_model, f_z_power, f_y_power, prop1_diff, s_eps,
                     heavy_share, f_y_extra)


def run_nested_campaign(
    params: CounterexampleParams,
    family: StoppingFamily,
    n_outer: int,
    n_states: int,
    n_inner: int,
    seed: int,
    *,
    grid_outer: GridSpec | None = None,
    grid_inner: GridSpec | None = None,
    epsilons: tuple[float, ...] = (0.3, 0.5, 0.7),
    extra_y_exponents: tuple[float, ...] = (),
    workers: int = 1,
    stream_base: int = STREAM_INNER_BASE,
    confidence: float = DEFAULT_CONFIDENCE,
) -> CampaignResult:
    """One outer pass recording all rules, then inner ensembles per state.

    Stopped states are subsampled evenly (by outer path index) to
    ``n_states`` per rule; outer paths whose rule resolves only at the
    horizon contribute the exact value 1 and need no inner ensemble.
    """
    if grid_outer is None:
        grid_outer = GridSpec.for_params(params)
    if grid_inner is None:
        grid_inner = GridSpec.for_params(params, dt=2.0 ** -5)
    ruleset = family.to_ruleset()
    outer = simulate_paths(params, grid_outer, n_outer, seed, rules=ruleset,
                           stream=STREAM_RULES, workers=workers)
    rs = outer.rule_states
    outer_cens = outer.censored

    jobs = []
    rule_meta = []
    for j, label in enumerate(ruleset.labels):
        resolved = rs.resolved[:, j] == 1
        terminal = (~resolved) & (~outer_cens)
        unknown = (~resolved) & outer_cens
        idx = np.flatnonzero(resolved)
        if idx.size > n_states:
            sel = idx[np.unique(np.round(
                np.linspace(0, idx.size - 1, n_states)).astype(int))]
        else:
            sel = idx
        rule_meta.append((label, int(resolved.sum()), int(terminal.sum()),
                          int(unknown.sum()), sel))
        for slot, outer_idx in enumerate(sel):
            jobs.append((j, slot, int(outer_idx),
                         float(rs.tau[outer_idx, j]),
                         float(rs.s[outer_idx, j])))

    def work(job):
        j, slot, outer_idx, tau, s_tau = job
        stream = inner_stream(stream_base, j, slot)
        return (j, evaluate_state(params, grid_inner, n_inner, seed, stream,
                                  outer_idx, tau, s_tau, params.p, epsilons,
                                  extra_y_exponents, confidence))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]

    per_rule_states: dict[int, list[StateStat]] = {j: [] for j in
                                                   range(len(ruleset.labels))}
    for j, stat in results:
        per_rule_states[j].append(stat)

    rules = []
    max_inner_cens = 0.0
    for j, (label, n_res, n_term, n_unknown, _sel) in enumerate(rule_meta):
        states = per_rule_states[j]
        for st in states:
            if st.n_inner_used + st.n_inner_censored > 0:
                max_inner_cens = max(
                    max_inner_cens,
                    st.n_inner_censored / (st.n_inner_used + st.n_inner_censored))
        rules.append(RuleResult(label, n_res, n_term, n_unknown, states))

    return CampaignResult(params, family, n_outer, n_states, n_inner, seed,
                          grid_outer, grid_inner, rules,
                          outer.censored_mass, max_inner_cens)


# ---------------------------------------------------------------------------
# A_p reports
# ---------------------------------------------------------------------------

_FUNCTIONAL_FIELDS = {
    "z_model": "f_z_model",
    "z_power": "f_z_power",
    "y_power": "f_y_power",
}


@dataclass
class RuleApStat:
    label: str
    n_states: int
    n_outer_resolved: int
    n_outer_terminal: int
    n_outer_censored: int
    avg: McEstimate
    max: McEstimate
    max_tau: float
    max_s: float


@dataclass
class ApReport:
    """Per-rule averaged/maximized conditional functional and the family max.

    ``implied_constant`` is the observed family maximum: a lower bound on
    the true essential supremum over all stopping times.
    """

    p: float
    process: str
    rules: list[RuleApStat]
    family_max: McEstimate
    family_max_rule: str
    implied_constant: float
    n_comparisons: int

    def check_upper_bound(self, bound: float, base_z: float = 3.0
                          ) -> tuple[bool, float]:
        """Does every probed estimate sit below ``bound`` within a joint
        (Bonferroni) allowance? Returns (passed, worst slack in SE units)."""
        z_joint = bonferroni_z(max(self.n_comparisons, 1), base_z)
        worst = math.inf
        for rule in self.rules:
            est = rule.max
            if est.std_error == 0.0:
                if est.value > bound:
                    return False, -math.inf
                continue
            worst = min(worst, (bound - est.value) / est.std_error)
        return worst >= -z_joint, worst

    def to_rows(self) -> list[dict]:
        rows = []
        for r in self.rules:
            rows.append({
                "process": self.process, "p": self.p, "rule": r.label,
                "n_states": r.n_states,
                "avg": r.avg.value, "avg_se": r.avg.std_error,
                "max": r.max.value, "max_se": r.max.std_error,
                "max_tau": r.max_tau, "max_s": r.max_s,
            })
        return rows


def _aggregate_rule(label: str, values: list[McEstimate],
                    taus: list[float], ss: list[float],
                    n_resolved: int, n_terminal: int, n_censored: int,
                    n_states: int,
                    confidence: float) -> RuleApStat:
    """Average over outer paths (terminal stops contribute exactly 1)."""
    total = n_resolved + n_terminal
    if not values:
        avg = McEstimate.exact(1.0 if n_terminal else float("nan"), n_terminal,
                               confidence)
        return RuleApStat(label, 0, n_resolved, n_terminal, n_censored,
                          avg, avg, float("nan"), float("nan"))
    vals = np.array([v.value for v in values])
    # Spread across states already contains the inner noise.
    se_mean = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 \
        else values[0].std_error
    mean_states = float(np.mean(vals))
    avg_value = (n_resolved * mean_states + n_terminal * 1.0) / total
    avg_se = n_resolved * se_mean / total
    avg = McEstimate.from_value_se(avg_value, avg_se, vals.size, confidence)
    k = int(np.argmax(vals))
    return RuleApStat(label, vals.size, n_resolved, n_terminal, n_censored,
                      avg, values[k], taus[k], ss[k])


def ap_report_from_campaign(campaign: CampaignResult, which: str = "z_model",
                            confidence: float = DEFAULT_CONFIDENCE) -> ApReport:
    field_name = _FUNCTIONAL_FIELDS[which]
    p = campaign.params.p if which == "z_model" else campaign.p_power
    process = "Z" if which.startswith("z") else "Y_hat"
    rule_stats = []
    n_comparisons = 0
    for rule in campaign.rules:
        values = [getattr(st, field_name) for st in rule.states]
        taus = [st.tau for st in rule.states]
        ss = [st.s_tau for st in rule.states]
        rule_stats.append(_aggregate_rule(
            rule.label, values, taus, ss, rule.n_outer_resolved,
            rule.n_outer_terminal, rule.n_outer_censored,
            len(rule.states), confidence))
        n_comparisons += len(values)
    if campaign.family.include_terminal:
        n_unc = campaign.rules[0].n_outer_resolved + \
            campaign.rules[0].n_outer_terminal if campaign.rules else 0
        one = McEstimate.exact(1.0, n_unc, confidence)
        rule_stats.append(RuleApStat("terminal", 0, n_unc, 0, 0, one, one,
                                     float("nan"), float("nan")))
    best = max((r for r in rule_stats if r.max.value == r.max.value),
               key=lambda r: r.max.value)
    return ApReport(p, process, rule_stats, best.max, best.label,
                    best.max.value, n_comparisons)


def ap_functional_at(state: MarkovState, r_process: str, p: float,
                     params: CounterexampleParams, grid: GridSpec,
                     n_inner: int, seed: int, *, stream: int,
                     confidence: float = DEFAULT_CONFIDENCE) -> McEstimate:
    """Conditional functional E_tau[(R_tau/R_T)^(1/(p-1))] at one state.

    ``r_process``: 'density' for the deflator Z, 'dual' for the dual
    candidate, 'constant' for a constant process (exact 1).
    """
    if p <= 1.0:
        raise ValueError("p > 1 required")
    if r_process == "constant":
        return McEstimate.exact(1.0, n_inner, confidence)
    stat = evaluate_state(params, grid, n_inner, seed, stream, -1,
                          state.t, state.s, p_model=p, epsilons=(),
                          extra_y_exponents=(p,), confidence=confidence)
    if r_process == "density":
        return stat.f_z_model
    if r_process == "dual":
        return stat.f_y_extra[p]
    raise ValueError(f"unknown r_process: {r_process}")


# ---------------------------------------------------------------------------
# Class (D), uniform integrability, dominance, sandwich
# ---------------------------------------------------------------------------


@dataclass
class ClassDReport:
    process: str
    constant: float
    p: float
    worst_z: float
    worst_rule: str
    passed: bool
    n_checked: int


def class_d_check(campaign: CampaignResult, constant: float, p: float,
                  process: str = "dual") -> ClassDReport:
    """Verify R_tau <= C^(p-1) E_tau[R_T] + 3 SE at every probed state.

    For the dual candidate both sides share the conditional weight mean, so
    the check reduces to 1 <= C^(p-1) * m(el_dur); for the deflator Z the
    two sides coincide (martingale), passing for any C >= 1.
    """
    cp = constant ** (p - 1.0)
    worst_z = math.inf
    worst_rule = ""
    n_checked = 0
    for rule in campaign.rules:
        for st in rule.states:
            if process == "dual":
                m = st.m_el_dur
                if m.std_error == 0.0:
                    continue
                z = (cp * m.value - 1.0) / (cp * m.std_error)
            else:
                z = math.inf if cp >= 1.0 else -math.inf
            n_checked += 1
            if z < worst_z:
                worst_z = z
                worst_rule = rule.label
    return ClassDReport(process, constant, p, worst_z, worst_rule,
                        worst_z >= -3.0, n_checked)


def ui_defect(y_terminal: np.ndarray, y0: float, weights: np.ndarray,
              confidence: float = DEFAULT_CONFIDENCE) -> McEstimate:
    """Uniform-integrability defect 1 - E_P[Y_T]/Y_0 from weighted samples.

    A defect positive at 3 standard errors certifies that Y is not a
    uniformly integrable martingale.
    """
    from .stats import weighted_mean_estimate
    est = weighted_mean_estimate(np.asarray(y_terminal, float),
                                 np.asarray(weights, float), confidence)
    return est.scaled(-1.0 / y0).shifted(1.0)


@dataclass
class RuleComparison:
    label: str
    lhs: McEstimate
    rhs: McEstimate
    diff: McEstimate
    z: float
    verdict: str  # 'pass' | 'fail' | 'inconclusive'


@dataclass
class Prop1Report:
    rules: list[RuleComparison]
    passed: bool
    worst_z: float
    n_flagged: int

    def to_rows(self) -> list[dict]:
        return [{
            "rule": r.label, "y_functional": r.lhs.value,
            "y_se": r.lhs.std_error, "z_functional": r.rhs.value,
            "z_se": r.rhs.std_error, "diff": r.diff.value,
            "diff_se": r.diff.std_error, "z_score": r.z,
            "verdict": r.verdict,
        } for r in self.rules]


def prop1_dominance(campaign: CampaignResult, base_z: float = 3.0
                    ) -> Prop1Report:
    """Dual-candidate functional <= competitor-Z functional, per rule.

    Both sides use exponent 1/(p-1) at the power p = 1/(1-a) tied to the
    model's risk aversion; differences carry shared-sample covariance.
    States whose right side is unstable (SE over 20% of the value, or a
    dominated heavy-moment sample: the conditional moment may be infinite)
    are flagged rather than compared; a rule with no comparable state is
    inconclusive, never passed.
    """
    comps = []
    n_states_total = sum(len(rule.states) for rule in campaign.rules)
    z_joint = bonferroni_z(max(n_states_total, 1), base_z)
    worst = math.inf
    n_flagged = 0
    for rule in campaign.rules:
        if not rule.states:
            one = McEstimate.exact(1.0)
            comps.append(RuleComparison(rule.label, one, one,
                                        McEstimate.exact(0.0), math.inf,
                                        "pass"))
            continue
        usable = [st for st in rule.states
                  if not (st.unstable(st.f_z_power) or
                          st.unstable(st.f_y_power))]
        n_flagged += len(rule.states) - len(usable)
        lhs = _pool_states([st.f_y_power for st in rule.states])
        rhs = _pool_states([st.f_z_power for st in rule.states])
        if not usable:
            comps.append(RuleComparison(rule.label, lhs, rhs,
                                        McEstimate.exact(float("nan")),
                                        float("nan"), "inconclusive"))
            continue
        k = int(np.argmax([st.prop1_diff.value for st in usable]))
        d = usable[k].prop1_diff
        z = math.inf if d.std_error == 0.0 else -d.value / d.std_error
        verdict = "pass" if z >= -z_joint else "fail"
        worst = min(worst, z)
        comps.append(RuleComparison(rule.label, lhs, rhs, d, z, verdict))
    passed = all(c.verdict != "fail" for c in comps)
    return Prop1Report(comps, passed, worst, n_flagged)


@dataclass
class SandwichRow:
    label: str
    epsilon: float
    worst_lower_z: float
    worst_upper_z: float
    n_states: int
    n_flagged: int = 0


@dataclass
class SandwichReport:
    factor: dict[float, float]
    rows: list[SandwichRow]
    passed: bool
    worst_z: float
    n_flagged: int = 0

    def to_rows(self) -> list[dict]:
        return [{
            "rule": r.label, "epsilon": r.epsilon,
            "worst_lower_z": r.worst_lower_z, "worst_upper_z": r.worst_upper_z,
            "n_states": r.n_states, "n_flagged": r.n_flagged,
        } for r in self.rows]


def lemma5_sandwich(campaign: CampaignResult,
                    epsilons: tuple[float, ...] = (0.3, 0.5, 0.7),
                    base_z: float = 3.0) -> SandwichReport:
    """Check m <= S_tau^eps <= (1 + eps(1-eps)/(2 gamma)) m at every state,
    with m the conditional mean of S_T^eps, to ``base_z`` standard errors
    (jointly Bonferroni-adjusted across states)."""
    gamma = campaign.params.gamma
    factors = {eps: 1.0 + eps * (1.0 - eps) / (2.0 * gamma) for eps in epsilons}
    n_states_total = sum(len(rule.states) for rule in campaign.rules)
    z_joint = bonferroni_z(max(2 * n_states_total * len(epsilons), 1), base_z)
    rows = []
    worst = math.inf
    total_flagged = 0
    for rule in campaign.rules:
        for eps in epsilons:
            lo_z = math.inf
            up_z = math.inf
            n_states = 0
            n_flagged = 0
            for st in rule.states:
                m = st.s_eps.get(eps)
                if m is None or m.std_error == 0.0:
                    continue
                # Deep states make both inequalities asymptotically tight
                # while the conditional-mean estimate loses resolution; the
                # flagging rule excludes exactly those comparisons.
                if m.std_error > UNSTABLE_SE_FRACTION * m.value:
                    n_flagged += 1
                    continue
                target = st.s_tau ** eps
                # Lower: m <= target, i.e. (target - m)/se >= -z.
                lo_z = min(lo_z, (target - m.value) / m.std_error)
                # Upper: target <= factor * m.
                fac = factors[eps]
                up_z = min(up_z, (fac * m.value - target) / (fac * m.std_error))
                n_states += 1
            if n_states:
                worst = min(worst, lo_z, up_z)
            total_flagged += n_flagged
            rows.append(SandwichRow(rule.label, eps, lo_z, up_z, n_states,
                                    n_flagged))
    passed = worst >= -z_joint
    return SandwichReport(factors, rows, passed, worst, total_flagged)


# ---------------------------------------------------------------------------
# BMO norm of a continuous martingale (control market)
# ---------------------------------------------------------------------------


@dataclass
class BmoReport:
    """Squared BMO norm over a family of deterministic times.

    ``qm_centered`` holds, per time, summary moments of the conditional
    remaining-variation martingale q(M)_t = E_t[<M>_T] - E[<M>_T].
    """

    taus: np.ndarray
    per_tau: list[McEstimate]
    norm_squared: McEstimate
    argmax_tau: float
    qm_centered: list[dict]

    def to_rows(self) -> list[dict]:
        return [{
            "tau": float(t), "remaining_qv": e.value, "se": e.std_error,
            "qm_mean": q["mean"], "qm_std": q["std"],
        } for t, e, q in zip(self.taus, self.per_tau, self.qm_centered)]


def bmo_norm(qv_at: np.ndarray, qv_final: np.ndarray, taus: np.ndarray,
             confidence: float = DEFAULT_CONFIDENCE) -> BmoReport:
    """Estimate max over the family of E_tau[<M>_T - <M>_tau].

    ``qv_at`` holds per-path realized quadratic variation at each family
    time (columns aligned with ``taus``); the conditional mean of the
    remaining variation is estimated across paths. Also emits per-time
    sample moments of the centered conditional variation q(M).
    """
    qv_at = np.asarray(qv_at, dtype=np.float64)
    qv_final = np.asarray(qv_final, dtype=np.float64)
    taus = np.asarray(taus, dtype=np.float64)
    per_tau = []
    qm = []
    total_mean = float(np.mean(qv_final))
    for k in range(taus.size):
        remaining = qv_final - qv_at[:, k]
        est = McEstimate.from_samples(remaining, confidence)
        per_tau.append(est)
        # Per-path estimate of E_t[<M>_T]: realized-so-far plus the
        # cross-path mean of the remaining variation.
        cond_total = qv_at[:, k] + est.value
        centered = cond_total - total_mean
        qm.append({"mean": float(np.mean(centered)),
                   "std": float(np.std(centered, ddof=1)) if centered.size > 1
                   else 0.0})
    k_best = int(np.argmax([e.value for e in per_tau]))
    return BmoReport(taus, per_tau, per_tau[k_best], float(taus[k_best]), qm)


# ---------------------------------------------------------------------------
# Sharpness probe: dual-candidate functional along shrinking price levels
# ---------------------------------------------------------------------------


@dataclass
class SharpnessRow:
    level: float
    n_states: int
    f_y_power: McEstimate
    f_y_below: McEstimate
    f_z_model: McEstimate


@dataclass
class SharpnessReport:
    """Growth of the dual-candidate functional along first-passage levels.

    The probed maximum of the dual functional keeps growing as the level
    shrinks (its essential supremum over all stopping times is unbounded),
    while the deflator's functional stays within its certified bound.
    ``p_below`` is an exponent strictly below 1/(1-a).
    """

    p_power: float
    p_below: float
    rows: list[SharpnessRow]
    y_monotone_increasing: bool
    z_bound: float
    z_within_bound: bool

    def to_rows(self) -> list[dict]:
        return [{
            "level": r.level, "n_states": r.n_states,
            "f_y_power": r.f_y_power.value, "f_y_power_se": r.f_y_power.std_error,
            "f_y_below": r.f_y_below.value, "f_y_below_se": r.f_y_below.std_error,
            "f_z_model": r.f_z_model.value, "f_z_model_se": r.f_z_model.std_error,
        } for r in self.rows]


def _pool_states(values: list[McEstimate],
                 confidence: float = DEFAULT_CONFIDENCE) -> McEstimate:
    if not values:
        return McEstimate.from_value_se(float("nan"), 0.0, 0, confidence)
    arr = np.array([v.value for v in values])
    se = float(np.std(arr, ddof=1) / math.sqrt(arr.size)) if arr.size > 1 \
        else values[0].std_error
    return McEstimate.from_value_se(float(np.mean(arr)), se, arr.size,
                                    confidence)


def sharpness_probe(
    params: CounterexampleParams,
    levels: tuple[float, ...] = (0.5, 0.25, 0.125, 0.0625),
    *,
    p_below: float | None = None,
    n_outer: int = 4000,
    n_states: int = 25,
    n_inner: int = 1000,
    seed: int = 0,
    grid_outer: GridSpec | None = None,
    grid_inner: GridSpec | None = None,
    workers: int = 1,
    stream_base: int = STREAM_INNER_BASE + 10_000_000,
    confidence: float = DEFAULT_CONFIDENCE,
) -> SharpnessReport:
    """Probe the dual candidate's functional at down-crossing price levels.

    Runs its own small campaign (one outer pass with only the level rules,
    ordered from the largest level down).
    """
    p_power = 1.0 / (1.0 - params.a)
    if p_below is None:
        p_below = 1.0 + 0.5 * (p_power - 1.0)
    ordered = tuple(sorted(levels, reverse=True))
    family = StoppingFamily(level_hits=ordered, include_zero=False,
                            include_terminal=False)
    campaign = run_nested_campaign(
        params, family, n_outer, n_states, n_inner, seed,
        grid_outer=grid_outer, grid_inner=grid_inner,
        epsilons=(), extra_y_exponents=(p_below,), workers=workers,
        stream_base=stream_base, confidence=confidence)
    rows = []
    for rule, level in zip(campaign.rules, ordered):
        rows.append(SharpnessRow(
            level, len(rule.states),
            _pool_states([st.f_y_power for st in rule.states], confidence),
            _pool_states([st.f_y_extra[p_below] for st in rule.states],
                         confidence),
            _pool_states([st.f_z_model for st in rule.states], confidence)))
    usable = [r for r in rows if r.n_states > 0]
    y_vals = [r.f_y_power.value for r in usable]
    monotone = all(y_vals[i] < y_vals[i + 1] for i in range(len(y_vals) - 1))
    z_bound = (1.0 + params.b * (1.0 - params.b) /
               (2.0 * params.gamma)) ** params.q
    z_ok = all(r.f_z_model.value <= z_bound + 3.0 * r.f_z_model.std_error
               for r in usable)
    return SharpnessReport(p_power, p_below, rows, monotone, z_bound, z_ok)
