"""Path simulation for the two built-in markets.

The jump-intensity market runs under its reference measure: a Brownian
motion drives the price S = exp(B_t - t/2), which is absorbed at the level
2, while a counting process with price-dependent intensity ends the market
at its first jump if that comes sooner. The horizon is T = T1 ^ T2 and a
path that resolves neither event before the grid cap is carried as censored
data, never dropped.

The control market is a lognormal price with constant market price of risk
on a fixed maturity.

Simulation is embarrassingly parallel over paths: each path consumes its own
counter-based stream keyed by (seed, stream tag, path index), blocks of
paths go to a thread pool, and every result lands in a preallocated slot, so
outputs are bit-identical for any worker count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._rng import (
    DOMAIN_NORMAL,
    DOMAIN_UNIFORM,
    U64,
    derive_key,
    draw_normal,
    draw_uniform,
    stream_counter,
)
from ._kernels import (
    RULE_COMP,
    RULE_DET,
    RULE_LEVEL_DOWN,
    RULE_LEVEL_UP,
    WHICH_CENSORED,
    WHICH_HIT,
    WHICH_JUMP,
)
from .errors import ConstraintViolated
from .params import ControlParams, CounterexampleParams

# Stream tags: ensembles that must be independent use distinct tags.
STREAM_MAIN = 0
STREAM_NORMALIZER = 1
STREAM_RULES = 2
STREAM_CONTROL = 3
STREAM_GRID_CHECK = 4
STREAM_SCRATCH = 5
# Nested inner ensembles get tags allocated above this base.
STREAM_INNER_BASE = 1_000

_BLOCK_SIZE = 4096
_RULE_KIND_NAMES = {RULE_DET: "det", RULE_LEVEL_UP: "level_up",
                    RULE_LEVEL_DOWN: "level_down", RULE_COMP: "comp"}


def inner_stream(base: int, rule_index: int, state_index: int,
                 n_states_cap: int = 4096) -> int:
    """Deterministic stream tag for the inner ensemble of one stopped state."""
    if state_index >= n_states_cap:
        raise ValueError("state_index exceeds allocation cap")
    return base + rule_index * n_states_cap + state_index


@dataclass(frozen=True)
class GridSpec:
    """Discretization contract for path simulation.

    ``refine_factor`` substeps are used above ``refine_threshold`` where the
    jump intensity steepens toward its pole.
    """

    t_max: float
    dt: float = 2.0 ** -8
    refine_threshold: float = 1.9
    refine_factor: int = 16

    def __post_init__(self) -> None:
        if not self.dt > 0.0:
            raise ConstraintViolated(f"dt > 0 violated: {self.dt}")
        if not self.t_max >= self.dt:
            raise ConstraintViolated(
                f"t_max >= dt violated: {self.t_max} vs {self.dt}")
        if not 0.0 < self.refine_threshold < 2.0:
            raise ConstraintViolated(
                f"0 < refine_threshold < 2 violated: {self.refine_threshold}")
        if not self.refine_factor >= 1:
            raise ConstraintViolated(
                f"refine_factor >= 1 violated: {self.refine_factor}")

    @classmethod
    def for_params(cls, params: CounterexampleParams, dt: float = 2.0 ** -8,
                   tail_mass: float = 1e-4, **kwargs) -> "GridSpec":
        """Horizon cap chosen so exp(-gamma * t_max) <= tail_mass."""
        t_max = math.log(1.0 / tail_mass) / params.gamma
        return cls(t_max=t_max, dt=dt, **kwargs)

    def with_dt(self, dt: float) -> "GridSpec":
        return GridSpec(t_max=self.t_max, dt=dt,
                        refine_threshold=self.refine_threshold,
                        refine_factor=self.refine_factor)


@dataclass(frozen=True)
class MarkovState:
    """Resimulation state of the jump market: (time, price, regime flags)."""

    t: float
    s: float
    post_hit: bool = False
    jumped: bool = False

    def __post_init__(self) -> None:
        if self.jumped:
            return
        if not self.s > 0.0:
            raise ConstraintViolated(f"state price > 0 violated: {self.s}")
        if not self.post_hit and not self.s < 2.0:
            raise ConstraintViolated(
                f"pre-hit state price < 2 violated: {self.s}")


@dataclass(frozen=True)
class StoppingRuleSet:
    """Low-level stopping-rule encoding shared with the kernels.

    Level and compensator rules are first-passage rules resolved at grid
    nodes; deterministic times are landed on exactly.
    """

    kinds: np.ndarray        # int8[K]
    rule_params: np.ndarray  # float64[K]
    labels: tuple[str, ...]

    @classmethod
    def build(cls, det_times=(), levels_up=(), levels_down=(),
              comp_thresholds=()) -> "StoppingRuleSet":
        kinds: list[int] = []
        params: list[float] = []
        labels: list[str] = []
        for t in det_times:
            kinds.append(RULE_DET)
            params.append(float(t))
            labels.append(f"det_t={t:g}")
        for lv in levels_up:
            kinds.append(RULE_LEVEL_UP)
            params.append(float(lv))
            labels.append(f"level_up={lv:g}")
        for lv in levels_down:
            kinds.append(RULE_LEVEL_DOWN)
            params.append(float(lv))
            labels.append(f"level_down={lv:g}")
        for c in comp_thresholds:
            kinds.append(RULE_COMP)
            params.append(float(c))
            labels.append(f"comp={c:g}")
        return cls(np.asarray(kinds, dtype=np.int8),
                   np.asarray(params, dtype=np.float64), tuple(labels))

    @property
    def n_rules(self) -> int:
        return int(self.kinds.size)

    def det_order(self) -> np.ndarray:
        det_idx = np.flatnonzero(self.kinds == RULE_DET)
        return det_idx[np.argsort(self.rule_params[det_idx],
                                  kind="stable")].astype(np.int64)


_EMPTY_RULES = StoppingRuleSet.build()


@dataclass
class RuleStates:
    """Per-path stopped states for each rule of a ruleset."""

    ruleset: StoppingRuleSet
    tau: np.ndarray        # (n, K)
    s: np.ndarray          # (n, K)
    resolved: np.ndarray   # (n, K) uint8; 0 = rule did not fire before T


@dataclass
class PathBundle:
    """Ensemble of jump-market path summaries with RNG provenance."""

    params: CounterexampleParams
    grid: GridSpec
    n_paths: int
    seed: int
    stream: int
    start: MarkovState
    antithetic: bool
    t1: np.ndarray
    t2: np.ndarray
    t_final: np.ndarray
    s_final: np.ndarray
    lambda_final: np.ndarray
    which: np.ndarray
    rule_states: RuleStates | None = None
    paths: list["Path"] | None = None

    @property
    def censored(self) -> np.ndarray:
        return self.which == WHICH_CENSORED

    @property
    def uncensored(self) -> np.ndarray:
        return self.which != WHICH_CENSORED

    @property
    def censored_mass(self) -> float:
        return float(np.mean(self.censored))

    @property
    def n_censored(self) -> int:
        return int(np.sum(self.censored))

    @property
    def durations(self) -> np.ndarray:
        """Time from the start state to the resolved horizon (NaN censored)."""
        return self.t_final - self.start.t

    @property
    def b_final(self) -> np.ndarray:
        """Brownian value at the horizon, via S = exp(B - t/2)."""
        return np.log(self.s_final) + 0.5 * self.t_final


@dataclass
class Path:
    """One fully recorded trajectory on its (refined) grid."""

    times: np.ndarray
    brownian: np.ndarray
    price: np.ndarray
    compensator: np.ndarray
    t1: float | None
    t2: float | None
    t_final: float | None
    censored: bool
    which: int


@dataclass
class ControlBundle:
    """Ensemble of control-market summaries."""

    params: ControlParams
    grid: GridSpec
    n_paths: int
    seed: int
    stream: int
    t0: float
    w0: float
    det_times: np.ndarray
    w_final: np.ndarray
    qv_final: np.ndarray
    det_w: np.ndarray
    det_qv: np.ndarray

    @property
    def s_final(self) -> np.ndarray:
        """Terminal price exp(vol*W_T + (vol*mpr - vol^2/2) T), S_0 = 1."""
        p = self.params
        drift = p.vol * p.mpr - 0.5 * p.vol ** 2
        return np.exp(p.vol * self.w_final + drift * p.maturity)

    @property
    def z_final(self) -> np.ndarray:
        """Terminal deflator exp(-mpr*W_T - mpr^2 T / 2)."""
        p = self.params
        return np.exp(-p.mpr * self.w_final - 0.5 * p.mpr ** 2 * p.maturity)

    def z_at(self, rule_index: int) -> np.ndarray:
        p = self.params
        tau = self.det_times[rule_index]
        return np.exp(-p.mpr * self.det_w[:, rule_index] - 0.5 * p.mpr ** 2 * tau)


def _run_blocks(call, n: int, workers: int) -> None:
    blocks = [(lo, min(lo + _BLOCK_SIZE, n)) for lo in range(0, n, _BLOCK_SIZE)]
    if workers <= 1 or len(blocks) == 1:
        for lo, hi in blocks:
            call(lo, hi)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(call, lo, hi) for lo, hi in blocks]
            for f in futures:
                f.result()


def simulate_paths(
    params: CounterexampleParams,
    grid: GridSpec,
    n: int,
    seed: int,
    *,
    rules: StoppingRuleSet | None = None,
    start: MarkovState | None = None,
    stream: int = STREAM_MAIN,
    workers: int = 1,
    antithetic: bool = False,
    full_paths: bool = False,
) -> PathBundle:
    """Simulate ``n`` jump-market paths under the reference measure.

    Gaussian increments are exact on the (refined) grid, the price is the
    exact per-step stochastic exponential, the compensator is integrated by
    the trapezoid rule and inverted against a unit-exponential alarm for the
    jump time, and level crossings get a Brownian-bridge correction. Paths
    with neither event before ``grid.t_max`` are carried as censored.
    """
    if n < 1:
        raise ValueError("n >= 1 required")
    if start is None:
        start = MarkovState(0.0, 1.0)
    if start.jumped:
        raise ConstraintViolated("cannot simulate from a jumped state")
    if rules is None:
        rules = _EMPTY_RULES
    # Re-wrap: numba boxes uint64 returns as Python ints, whose inferred
    # kernel-argument type would depend on the value.
    key = U64(derive_key(U64(seed), U64(stream)))

    if full_paths:
        if rules.n_rules:
            raise ValueError("full-path recording does not support rules")
        paths = [
            _simulate_jump_path_reference(i, key, start, params, grid, antithetic)
            for i in range(n)
        ]
        return _bundle_from_paths(paths, params, grid, n, seed, stream,
                                  start, antithetic)

    t1 = np.empty(n)
    t2 = np.empty(n)
    t_final = np.empty(n)
    s_final = np.empty(n)
    lambda_final = np.empty(n)
    which = np.empty(n, dtype=np.uint8)
    big_k = rules.n_rules
    rule_tau = np.empty((n, big_k))
    rule_s = np.empty((n, big_k))
    rule_resolved = np.empty((n, big_k), dtype=np.uint8)
    det_order = rules.det_order()

    def call(lo: int, hi: int) -> None:
        _kernels.run_jump_market_block(
            lo, hi, key,
            start.t, start.s, start.post_hit,
            params.delta, params.gamma, math.log(params.level),
            grid.dt, grid.t_max, grid.refine_threshold,
            float(grid.refine_factor), antithetic,
            rules.kinds, rules.rule_params, det_order,
            t1, t2, t_final, s_final, lambda_final, which,
            rule_tau, rule_s, rule_resolved,
        )

    _run_blocks(call, n, workers)

    rule_states = None
    if big_k:
        rule_states = RuleStates(rules, rule_tau, rule_s, rule_resolved)
    return PathBundle(params, grid, n, seed, stream, start, antithetic,
                      t1, t2, t_final, s_final, lambda_final, which,
                      rule_states)


def resimulate_from(
    state: MarkovState,
    params: CounterexampleParams,
    grid: GridSpec,
    n_inner: int,
    seed: int,
    *,
    stream: int,
    workers: int = 1,
) -> PathBundle:
    """Fresh ensemble of continuations from a stopped state.

    The state (price, post-hit flag) determines the conditional law; the
    compensator restarts at zero with a fresh unit-exponential alarm
    (memorylessness). ``grid.t_max`` caps the continuation *duration*.
    """
    if state.jumped:
        raise ConstraintViolated("cannot resimulate from a jumped state")
    cont_grid = GridSpec(t_max=state.t + grid.t_max, dt=grid.dt,
                         refine_threshold=grid.refine_threshold,
                         refine_factor=grid.refine_factor)
    return simulate_paths(params, cont_grid, n_inner, seed, start=state,
                          stream=stream, workers=workers)


def simulate_control_paths(
    params: ControlParams,
    n: int,
    seed: int,
    *,
    dt: float = 2.0 ** -8,
    det_times: np.ndarray | None = None,
    t0: float = 0.0,
    w0: float = 0.0,
    stream: int = STREAM_CONTROL,
    workers: int = 1,
    antithetic: bool = False,
) -> ControlBundle:
    """Simulate control-market Brownian paths on [t0, maturity]."""
    if n < 1:
        raise ValueError("n >= 1 required")
    if det_times is None:
        det_times = np.empty(0)
    det_times = np.asarray(det_times, dtype=np.float64)
    if det_times.size and (np.any(det_times < t0) or
                           np.any(det_times > params.maturity)):
        raise ValueError("det_times must lie in [t0, maturity]")
    if np.any(np.diff(det_times) < 0.0):
        raise ValueError("det_times must be sorted")
    key = U64(derive_key(U64(seed), U64(stream)))
    w_final = np.empty(n)
    qv_final = np.empty(n)
    det_w = np.full((n, det_times.size), np.nan)
    det_qv = np.full((n, det_times.size), np.nan)

    def call(lo: int, hi: int) -> None:
        _kernels.run_control_block(
            lo, hi, key, t0, w0, params.mpr, params.maturity, dt, antithetic,
            det_times, w_final, qv_final, det_w, det_qv,
        )

    _run_blocks(call, n, workers)
    grid = GridSpec(t_max=params.maturity, dt=dt)
    return ControlBundle(params, grid, n, seed, stream, t0, w0,
                         det_times, w_final, qv_final, det_w, det_qv)


def hitting_time_level(times: np.ndarray, price: np.ndarray,
                       level: float = 2.0,
                       rng: np.random.Generator | None = None) -> float | None:
    """First passage of a recorded price segment to ``level`` (upward).

    Grid crossings and Brownian-bridge-sampled intra-step crossings are both
    placed at the step midpoint. Returns None when the segment never crosses
    (bridge draws included).
    """
    times = np.asarray(times, dtype=np.float64)
    price = np.asarray(price, dtype=np.float64)
    if price[0] >= level:
        raise ValueError("segment must start below the level")
    if rng is None:
        rng = np.random.default_rng(0)
    m = math.log(level)
    x = np.log(price)
    for k in range(len(times) - 1):
        h = times[k + 1] - times[k]
        if x[k + 1] >= m:
            return times[k] + 0.5 * h
        ee = 2.0 * (m - x[k]) * (m - x[k + 1]) / h
        if ee < _kernels._BRIDGE_EXPONENT_CAP and rng.random() < math.exp(-ee):
            return times[k] + 0.5 * h
    return None


def jump_time_via_time_change(times: np.ndarray, compensator: np.ndarray,
                              exp_draw: float) -> float | None:
    """Invert a nondecreasing compensator path against an Exp(1) draw.

    Linear interpolation inside the first step where the compensator reaches
    the draw; None when the path never accumulates that much hazard.
    """
    times = np.asarray(times, dtype=np.float64)
    compensator = np.asarray(compensator, dtype=np.float64)
    if compensator[0] != 0.0:
        raise ValueError("compensator must start at 0")
    if np.any(np.diff(compensator) < 0.0):
        raise ValueError("compensator must be nondecreasing")
    if compensator[-1] < exp_draw:
        return None
    k = int(np.searchsorted(compensator, exp_draw, side="left"))
    if k == 0:
        return float(times[0])
    d = compensator[k] - compensator[k - 1]
    frac = 1.0 if d == 0.0 else (exp_draw - compensator[k - 1]) / d
    return float(times[k - 1] + frac * (times[k] - times[k - 1]))


# ---------------------------------------------------------------------------
# Reference (full-path) simulator: a literal transcription of the kernel's
# stepping and draw order, recording every grid node. Used for full-path
# dumps and as a cross-check of the compiled kernel.
# ---------------------------------------------------------------------------

def _simulate_jump_path_reference(i: int, key, start: MarkovState,
                                  params: CounterexampleParams, grid: GridSpec,
                                  antithetic: bool) -> Path:
    delta, gamma = params.delta, params.gamma
    log_level = math.log(params.level)
    log_refine = math.log(grid.refine_threshold)
    dt_fine = grid.dt / grid.refine_factor

    if antithetic:
        norm_idx = U64(i - (i & 1))
        sign = -1.0 if (i & 1) == 1 else 1.0
    else:
        norm_idx = U64(i)
        sign = 1.0
    c1n = stream_counter(DOMAIN_NORMAL, norm_idx)
    c1u = stream_counter(DOMAIN_UNIFORM, U64(i))
    npos, ncache, nhave = U64(0), 0.0, False
    upos, ucache, uhave = U64(0), 0.0, False

    u, upos, ucache, uhave = draw_uniform(key, c1u, upos, ucache, uhave)
    alarm = -math.log(u)

    if start.post_hit:
        dur = alarm / gamma
        if start.t + dur > grid.t_max:
            # No state was simulated beyond the start; record only that node.
            times = np.array([start.t])
            xs = np.array([math.log(start.s)])
            comp = np.array([0.0])
            return _make_path(times, xs, comp, None, None, None, True,
                              WHICH_CENSORED)
        z, npos, ncache, nhave = draw_normal(key, c1n, npos, ncache, nhave)
        z *= sign
        x_end = math.log(start.s) + math.sqrt(dur) * z - 0.5 * dur
        times = np.array([start.t, start.t + dur])
        xs = np.array([math.log(start.s), x_end])
        comp = np.array([0.0, alarm])
        return _make_path(times, xs, comp, None, start.t + dur, start.t + dur,
                          False, WHICH_JUMP)

    t, x, lam_acc = start.t, math.log(start.s), 0.0
    times, xs, comp = [t], [x], [0.0]
    lam_node = gamma / (-math.expm1(delta * (x - log_level)))

    while True:
        if t >= grid.t_max - 1e-12:
            return _make_path(np.array(times), np.array(xs), np.array(comp),
                              None, None, None, True, WHICH_CENSORED)
        h = dt_fine if x > log_refine else grid.dt
        if t + h >= grid.t_max:
            h = grid.t_max - t
        z, npos, ncache, nhave = draw_normal(key, c1n, npos, ncache, nhave)
        z *= sign
        x_new = x + math.sqrt(h) * z - 0.5 * h
        crossed = x_new >= log_level
        if not crossed:
            ee = 2.0 * (log_level - x) * (log_level - x_new) / h
            if ee < _kernels._BRIDGE_EXPONENT_CAP:
                u, upos, ucache, uhave = draw_uniform(key, c1u, upos, ucache,
                                                      uhave)
                crossed = u < math.exp(-ee)
        if crossed:
            t_hit = t + 0.5 * h
            d_lam = lam_node * 0.5 * h
            if lam_acc + d_lam >= alarm:
                u_t = (alarm - lam_acc) / lam_node
                x_j = x + (log_level - x) * (u_t / (0.5 * h))
                times.append(t + u_t)
                xs.append(x_j)
                comp.append(alarm)
                return _make_path(np.array(times), np.array(xs),
                                  np.array(comp), None, t + u_t, t + u_t,
                                  False, WHICH_JUMP)
            times.append(t_hit)
            xs.append(log_level)
            comp.append(lam_acc + d_lam)
            t2 = t_hit + (alarm - lam_acc - d_lam) / gamma
            return _make_path(np.array(times), np.array(xs), np.array(comp),
                              t_hit, t2, t_hit, False, WHICH_HIT)
        lam_new = gamma / (-math.expm1(delta * (x_new - log_level)))
        d_lam = 0.5 * (lam_node + lam_new) * h
        if lam_acc + d_lam >= alarm:
            u_t = h * (alarm - lam_acc) / d_lam
            x_j = x + (x_new - x) * (u_t / h)
            times.append(t + u_t)
            xs.append(x_j)
            comp.append(alarm)
            return _make_path(np.array(times), np.array(xs), np.array(comp),
                              None, t + u_t, t + u_t, False, WHICH_JUMP)
        lam_acc += d_lam
        x = x_new
        lam_node = lam_new
        t += h
        times.append(t)
        xs.append(x)
        comp.append(lam_acc)


def _make_path(times, xs, comp, t1, t2, t_final, censored, which) -> Path:
    price = np.exp(xs)
    brownian = xs + 0.5 * times
    return Path(times=times, brownian=brownian, price=price, compensator=comp,
                t1=t1, t2=t2, t_final=t_final, censored=censored, which=which)


def _bundle_from_paths(paths: list[Path], params, grid, n, seed, stream,
                       start, antithetic) -> PathBundle:
    t1 = np.array([np.nan if p.t1 is None else p.t1 for p in paths])
    t2 = np.array([np.nan if p.t2 is None else p.t2 for p in paths])
    t_final = np.array([np.nan if p.t_final is None else p.t_final
                        for p in paths])
    # Post-hit censored continuations never simulate past the start node, so
    # there is no cap-time price to report.
    s_final = np.array([np.nan if (p.censored and start.post_hit)
                        else p.price[-1] for p in paths])
    lambda_final = np.array([p.compensator[-1] for p in paths])
    which = np.array([p.which for p in paths], dtype=np.uint8)
    return PathBundle(params, grid, n, seed, stream, start, antithetic,
                      t1, t2, t_final, s_final, lambda_final, which,
                      paths=paths)


def write_paths_csv(bundle: PathBundle, path: str) -> None:
    """Per-path summary dump: one row per path."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path_id", "t1", "t2", "t_final", "censored",
                         "S_T", "B_T", "Lambda_T"])
        b_final = bundle.b_final
        for i in range(bundle.n_paths):
            censored = bool(bundle.which[i] == WHICH_CENSORED)
            writer.writerow([
                i,
                _csv_num(bundle.t1[i]),
                _csv_num(bundle.t2[i]),
                _csv_num(bundle.t_final[i]),
                int(censored),
                _csv_num(bundle.s_final[i]),
                _csv_num(b_final[i]) if not censored else "",
                _csv_num(bundle.lambda_final[i]),
            ])


def _csv_num(x: float) -> str:
    return "" if (x != x) else f"{x:.12g}"
