"""Monte-Carlo experiment orchestration.

The simulator is batched two ways: over trials (independent seeds) and over
candidate policies (e.g. multiplier candidates during tuning). Candidates
share each trial's channel and arrival streams, so every comparison uses
common random numbers.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.optimize import brentq

from .allocator import SlotContext, allocate_numeric, fixed_power_rule, joint_rule
from .model import ClusterConfig, rates_from_squares, sample_channel_block
from .priority import (
    InfeasibleTableError,
    PriorityTable,
    SolverParams,
    avg_gain,
    build_table,
    crosslink_coeffs,
    discounted_gain,
    expected_power_cost,
    sustaining_point,
)
from .queueing import Trace, queue_step, sample_arrivals

log = logging.getLogger(__name__)

LN2 = math.log(2.0)

POLICIES = ("joint", "fixed_power", "discounted", "numeric")
CHUNK = 1024
SATURATED_ALPHA = 1e4
MAX_GAIN = 1.0
MIN_DRIFT_T = 1000


class InfeasibleError(RuntimeError):
    """Targets cannot be met (no multiplier brackets the constraint).

    ``direction`` is +1 when the measurement stays above the target (budget
    too tight) and -1 when it stays below (constraint slack); ``best`` is the
    edge multiplier reached.
    """

    def __init__(self, msg, direction=0, best=None):
        super().__init__(msg)
        self.direction = direction
        self.best = best


# --- policies ----------------------------------------------------------------

@dataclass
class Multipliers:
    gamma: float
    mu_power: np.ndarray | float = 0.0
    p_fixed: np.ndarray | None = None


@dataclass
class Policy:
    """K candidate policies of one kind, stacked for batched simulation.

    ``Jp`` has shape (K, n, G) on the common grid; ``alpha_scale`` turns a
    gradient into the normalized priority; ``infeasible[k]`` marks a
    candidate whose table had no root (it runs saturated at SATURATED_ALPHA).
    """

    kind: str
    grid: np.ndarray
    Jp: np.ndarray
    gain: np.ndarray
    gamma: np.ndarray
    mu_power: np.ndarray
    alpha_scale: np.ndarray
    p_fixed: np.ndarray
    infeasible: np.ndarray
    mu_disc: float = 1.0
    tables: list = field(default_factory=list, repr=False)

    @property
    def K(self) -> int:
        return self.Jp.shape[0]

    def alpha(self, Q):
        """Normalized priority for backlogs Q of shape (K, ..., n)."""
        K, n, G = self.Jp.shape
        grid = self.grid
        idx = np.clip(np.searchsorted(grid, Q, side="right") - 1, 0, G - 2)
        kk = np.arange(K).reshape((K,) + (1,) * (Q.ndim - 1))
        base = (kk * n + np.arange(n)) * G
        flat = self.Jp.reshape(-1)
        lo = flat[base + idx]
        hi = flat[base + idx + 1]
        w = (Q - grid[idx]) / (grid[idx + 1] - grid[idx])
        jp = lo + w * (hi - lo)
        shape = (K,) + (1,) * (Q.ndim - 2) + (n,)
        grad = jp * (1.0 + self.gain.reshape(shape))
        return grad * self.alpha_scale.reshape((K,) + (1,) * (Q.ndim - 1))

    def allocate(self, Q, g, cfg: ClusterConfig):
        """(C, p_d) for backlogs Q (K, tr, n) and diagonal gains g (tr, n)."""
        al = self.alpha(Q)
        K = self.K
        if self.kind in ("fixed_power", "discounted"):
            C = fixed_power_rule(g, al, self.p_fixed[:, None, :], cfg.sigma2)
            return C, np.broadcast_to((self.p_fixed - cfg.p0)[:, None, :], C.shape)
        v = joint_rule(g, al, self.gamma.reshape(K, 1, 1), self.mu_power[:, None, :],
                       np.diag(cfg.L), cfg.p0, cfg.sigma2, cfg.p_peak - cfg.p0)
        with np.errstate(divide="ignore"):
            C = np.where(v.y > 1.0, np.log2(v.y), 0.0)
            p_d = np.where(v.x > 0, v.x * cfg.sigma2 / g, 0.0)
        return C, np.minimum(p_d, cfg.p_peak - cfg.p0)


def _table_kind(kind):
    if kind not in POLICIES:
        raise ValueError(f"unknown policy {kind!r}; choose from {POLICIES}")
    regime = "discounted" if kind == "discounted" else "average"
    model = "joint" if kind in ("joint", "numeric") else "fixed_power"
    return regime, model


def _saturated_table(params, regime, model, mu):
    scale = (mu if regime == "discounted" else 1.0) * params.W / (2.0 * params.gamma)
    Jp = np.full((params.n, len(params.Q_grid)), SATURATED_ALPHA / scale)
    Jp[:, 0] = 0.0 if regime == "discounted" else 2.0 * params.gamma / params.W
    return PriorityTable(params.Q_grid.copy(), Jp, regime, model, params.gamma, params.W,
                         mu if regime == "discounted" else 1.0, c_inf=params.c_inf)


def solve_policy_table(cfg: ClusterConfig, kind: str, m: Multipliers, *, mu_disc=None,
                       Q_ref=None, crosslink=True, Q_max=None, c_inf_mode="empty"):
    """Solve one candidate's table. Returns (table, infeasible flag)."""
    regime, model = _table_kind(kind)
    params = SolverParams.from_cluster(cfg, gamma=m.gamma, mu_power=m.mu_power,
                                       Q_max=Q_max, p_fixed=m.p_fixed,
                                       c_inf_mode=c_inf_mode)
    mu = 1.0 if mu_disc is None else mu_disc
    try:
        table = build_table(params, regime, model, mu)
    except InfeasibleTableError as exc:
        log.debug("candidate gamma=%g infeasible: %s", m.gamma, exc)
        return _saturated_table(params, regime, model, mu), True
    if crosslink and cfg.delta > 0 and Q_ref is not None:
        try:
            if model == "joint":
                al = table.alpha(np.full(cfg.n, Q_ref))
                gain = avg_gain(crosslink_coeffs(al, params, Q_ref), params)
            else:
                gain = discounted_gain(table, params, Q_ref)
        except ValueError as exc:
            log.debug("cross-link correction skipped: %s", exc)
            return table, False
        al = table.alpha(np.full(cfg.n, Q_ref))
        if np.any(np.abs(gain) > MAX_GAIN) or np.any(al < params.alpha_guard):
            # outside the perturbative regime the first-order term is not trustworthy
            log.debug("cross-link correction skipped: gain %s at alpha %s", gain, al)
            table.guard_warnings += 1
            return table, False
        table = table.with_gain(gain, Q_ref)
    return table, False


def build_policy(cfg: ClusterConfig, kind: str, mults: Sequence[Multipliers], *,
                 mu_disc=None, Q_ref=None, crosslink=True, Q_max=None,
                 c_inf_mode="empty") -> Policy:
    if kind == "discounted" and not (mu_disc and 0 < mu_disc < 1):
        raise ValueError("discounted policy needs 0 < mu_disc < 1")
    n = cfg.n
    tables, infeasible = [], []
    for m in mults:
        t, bad = solve_policy_table(cfg, kind, m, mu_disc=mu_disc, Q_ref=Q_ref,
                                    crosslink=crosslink, Q_max=Q_max,
                                    c_inf_mode=c_inf_mode)
        tables.append(t)
        infeasible.append(bad)
    gam = np.array([m.gamma for m in mults], dtype=float)
    mu_p = np.array([np.broadcast_to(np.asarray(m.mu_power, float), (n,)) for m in mults])
    p_fixed = np.array([cfg.p0 if m.p_fixed is None else
                        np.broadcast_to(np.asarray(m.p_fixed, float), (n,)) for m in mults])
    return Policy(
        kind=kind, grid=tables[0].Q_grid, Jp=np.stack([t.Jp for t in tables]),
        gain=np.stack([t.gain for t in tables]), gamma=gam, mu_power=mu_p,
        alpha_scale=np.array([t.alpha_scale for t in tables]), p_fixed=p_fixed,
        infeasible=np.array(infeasible), mu_disc=1.0 if mu_disc is None else mu_disc,
        tables=tables,
    )


# --- random streams and the slot loop ---------------------------------------

class TrialStreams:
    """Independent channel, arrival and horizon streams for one trial seed.

    Draws are made in fixed-size chunks so a stream is a pure function of
    (config seed, trial seed) regardless of how long a run is.
    """

    def __init__(self, cfg: ClusterConfig, seed: int):
        ss = np.random.SeedSequence([int(cfg.seed), int(seed)])
        ch, ar, hz = ss.spawn(3)
        self.cfg = cfg
        self.ch = np.random.default_rng(ch)
        self.ar = np.random.default_rng(ar)
        self.hz = np.random.default_rng(hz)
        self.resamples = 0

    def horizon(self, mu: float) -> int:
        """Geometric service horizon: P(T = t) = mu^(t-1) (1 - mu)."""
        return int(self.hz.geometric(1.0 - mu))

    def chunk(self):
        cfg = self.cfg
        H, S, res = sample_channel_block(cfg, self.ch, CHUNK)
        self.resamples += res
        A = sample_arrivals(cfg.lam, cfg.tau, self.ar, (CHUNK, cfg.n))
        return H, S, A


@dataclass
class BatchResult:
    """Accumulated statistics with shape (K, trials, n) unless noted."""

    mean_Q: np.ndarray
    mean_C: np.ndarray
    mean_p: np.ndarray
    disc_Q: np.ndarray | None
    disc_C: np.ndarray | None
    total_Q: np.ndarray | None
    slope: np.ndarray
    horizon: np.ndarray
    traces: list | None = None

    def delay(self, lam):
        return self.mean_Q / np.asarray(lam, float)


def _sim_group(cfg, policy, seeds, T, mu_disc, geometric, record, burn_in, Q0):
    K, tr, n = policy.K, len(seeds), cfg.n
    streams = [TrialStreams(cfg, s) for s in seeds]
    if geometric:
        horizons = np.array([st.horizon(mu_disc) for st in streams])
        T = int(horizons.max())
    else:
        horizons = np.full(tr, T)
    Q = np.zeros((K, tr, n)) if Q0 is None else np.broadcast_to(Q0, (K, tr, n)).astype(float)
    sQ = np.zeros((K, tr, n))
    sC = np.zeros((K, tr, n))
    sP = np.zeros((K, tr, n))
    dQ = np.zeros((K, tr, n)) if mu_disc is not None else None
    dC = np.zeros((K, tr, n)) if mu_disc is not None else None
    tQ = np.zeros((K, tr, n)) if geometric else None
    # streaming least squares of total backlog over the last half
    half = T // 2
    m = T - half
    st_sum = np.zeros((K, tr))
    st_tsum = np.zeros((K, tr))
    rec = {k: [] for k in "QRCpA"} if record else None
    weight = 1.0
    for start in range(0, T, CHUNK):
        parts = [st.chunk() for st in streams]
        H = np.stack([p[0] for p in parts], axis=1)
        S = np.stack([p[1] for p in parts], axis=1)
        A = np.stack([p[2] for p in parts], axis=1)
        H2 = np.abs(H) ** 2
        S2 = np.abs(S) ** 2
        g = np.diagonal(H2, axis1=-2, axis2=-1)
        for t in range(min(CHUNK, T - start)):
            slot = start + t
            if policy.kind == "numeric":
                C, p_d = _numeric_step(cfg, policy, Q, H[t], S[t])
            else:
                C, p_d = policy.allocate(Q, g[t], cfg)
            R = rates_from_squares(H2[t], S2[t], C, cfg.p0 + p_d, cfg.sigma2, cfg.W)
            if record:
                for key, val in zip("QRCpA", (Q, R, C, p_d, np.broadcast_to(A[t], Q.shape))):
                    rec[key].append(np.array(val))
            if slot >= burn_in:
                if geometric:
                    alive = (slot < horizons)[None, :, None]
                    sQ += np.where(alive, Q, 0.0)
                    sC += np.where(alive, C, 0.0)
                    sP += np.where(alive, p_d, 0.0)
                    tQ += np.where(alive, Q, 0.0)
                else:
                    sQ += Q
                    sC += C
                    sP += p_d
            if dQ is not None:
                dQ += weight * Q
                dC += weight * C
                weight *= mu_disc
            if slot >= half:
                tot = Q.sum(axis=-1)
                st_sum += tot
                st_tsum += (slot - half) * tot
            Q = queue_step(Q, R, A[t], cfg.tau)
    if geometric:
        count = np.maximum(horizons - burn_in, 1)[None, :, None]
    else:
        count = max(T - burn_in, 1)
    tbar = (m - 1) / 2.0
    var_t = (m * m - 1) / 12.0
    slope = (st_tsum / m - tbar * st_sum / m) / var_t if m > 1 else np.zeros((K, tr))
    traces = None
    if record:
        arr = {k: np.stack(v) for k, v in rec.items()}
        traces = [[Trace(arr["Q"][:, k, j], arr["R"][:, k, j], arr["C"][:, k, j],
                         arr["p"][:, k, j], arr["A"][:, k, j], cfg.tau)
                   for j in range(tr)] for k in range(K)]
    return BatchResult(sQ / count, sC / count, sP / count, dQ, dC, tQ, slope,
                       horizons, traces)


def _numeric_step(cfg, policy, Q, H, S):
    K = policy.K
    C = np.zeros(Q.shape)
    p_d = np.zeros(Q.shape)
    for k in range(K):
        al = policy.alpha(Q[k:k + 1])[0]
        grad = 2.0 * policy.gamma[k] * al / cfg.W
        ctx = SlotContext(H, S, Q[k], cfg, policy.gamma[k], policy.mu_power[k], grad=grad)
        res = allocate_numeric(ctx)
        C[k], p_d[k] = res.allocation.C, res.allocation.p_d
    return C, p_d


def simulate(cfg: ClusterConfig, policy: Policy, seeds: Sequence[int], T: int = 100_000,
             *, mu_disc: float | None = None, geometric: bool = False,
             record: bool = False, burn_in: int = 0, Q0=None,
             threads: int = 1) -> BatchResult:
    """Run every candidate policy on every trial seed.

    With ``geometric`` each trial's horizon is drawn from Geometric(1 - mu_disc)
    and sums stop at the horizon; ``disc_*`` accumulate mu^(t-1)-weighted sums
    over the full run. Thread groups split the seed list; results are
    concatenated in seed order, so output does not depend on ``threads``.
    """
    seeds = list(seeds)
    if geometric and not (mu_disc and 0 < mu_disc < 1):
        raise ValueError("geometric horizons need 0 < mu_disc < 1")
    if threads <= 1 or len(seeds) < 2:
        return _sim_group(cfg, policy, seeds, T, mu_disc, geometric, record, burn_in, Q0)
    groups = [g for g in np.array_split(np.array(seeds), min(threads, len(seeds))) if len(g)]
    with ThreadPoolExecutor(max_workers=len(groups)) as pool:
        parts = list(pool.map(lambda gs: _sim_group(cfg, policy, list(gs), T, mu_disc,
                                                    geometric, record, burn_in, Q0), groups))
    return _merge(parts)


def _merge(parts):
    cat = lambda name: (None if getattr(parts[0], name) is None else
                        np.concatenate([getattr(p, name) for p in parts], axis=1))
    traces = None
    if parts[0].traces is not None:
        traces = [sum((p.traces[k] for p in parts), []) for k in range(len(parts[0].traces))]
    return BatchResult(cat("mean_Q"), cat("mean_C"), cat("mean_p"), cat("disc_Q"),
                       cat("disc_C"), cat("total_Q"), cat("slope"),
                       np.concatenate([p.horizon for p in parts]), traces)


# --- stability ----------------------------------------------------------------

def drift_slope(total_Q) -> float:
    """Least-squares slope (bits/slot) of a backlog series over its last half."""
    y = np.asarray(total_Q, dtype=float)
    y = y[len(y) // 2:]
    if len(y) < 2:
        return 0.0
    t = np.arange(len(y), dtype=float)
    return float(np.polyfit(t, y, 1)[0])


def detect_instability(trace: Trace, lam=None, eps: float = 0.05):
    """(flag, slope): flag when the total-backlog drift exceeds eps * mean slot arrivals.

    Without ``lam`` the mean per-slot arrival is estimated from the trace.
    """
    slope = drift_slope(trace.Q.sum(axis=1))
    per_slot = (float(np.sum(lam)) * trace.tau if lam is not None
                else float(trace.A.sum(axis=1).mean()))
    return bool(slope > eps * per_slot), slope


def unstable_flags(res: BatchResult, cfg: ClusterConfig, eps: float = 0.05):
    """Per (candidate, trial) drift flags; horizons under MIN_DRIFT_T are never flagged."""
    long_enough = (res.horizon >= MIN_DRIFT_T)[None, :]
    return (res.slope > eps * float(np.sum(cfg.lam)) * cfg.tau) & long_enough


# --- experiment configuration -----------------------------------------------

@dataclass
class ExperimentConfig:
    """What to run: cluster, policies, horizon model, trials, sweep and targets.

    ``power_target`` is the average dynamic power per user the joint policy
    is tuned to (default p_max - p0). ``seeds`` defaults to
    range(seed_base, seed_base + trials).
    """

    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    policies: tuple = ("joint", "fixed_power")
    horizon: str = "fixed"
    T: int = 100_000
    mu: float = 0.9
    trials: int = 20
    seed_base: int = 0
    sweep_name: str | None = None
    sweep_values: tuple = ()
    C_tot: float | None = None
    power_target: np.ndarray | float | None = None
    pilot_T: int = 4000
    pilot_trials: int = 4
    tune_K: int = 8
    tune_tol: float = 0.02
    tune_corrections: int = 2
    crosslink: bool = True
    Q_max: float | None = None
    eps: float = 0.05
    burn_in: int = 0
    threads: int = 1
    c_inf_mode: str = "sustain"

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.horizon not in ("fixed", "geometric"):
            raise ValueError("horizon must be 'fixed' or 'geometric'")
        if self.horizon == "geometric" and not 0 < self.mu < 1:
            raise ValueError("geometric horizon needs 0 < mu < 1")
        for p in self.policies:
            _table_kind(p)

    @property
    def seeds(self) -> list:
        return list(range(self.seed_base, self.seed_base + self.trials))

    @property
    def pilot_seeds(self) -> list:
        # disjoint from the evaluation seeds
        return list(range(10_000 + self.seed_base, 10_000 + self.seed_base + self.pilot_trials))

    @property
    def pilot_seeds_disc(self) -> list:
        # short discounted horizons need many more trials for the same precision
        return list(range(20_000 + self.seed_base, 20_000 + self.seed_base
                          + 16 * self.pilot_trials))

    def budget(self, cfg: ClusterConfig) -> float:
        """Fronthaul target: the explicit override, else the swept cluster's C_tot."""
        return cfg.C_tot if self.C_tot is None else float(self.C_tot)

    def target_power(self, cfg: ClusterConfig) -> np.ndarray:
        if self.power_target is None:
            return cfg.p_max - cfg.p0
        return np.broadcast_to(np.asarray(self.power_target, float), (cfg.n,)).copy()


# --- multiplier tuning ---------------------------------------------------------

@dataclass
class TuneResult:
    mults: Multipliers
    usage: float
    power: np.ndarray
    mean_Q: float
    evaluations: int
    converged: bool
    feasible: bool = True


def _evaluate(cfg, kind, mults, exp, Q_ref, mu_disc=None, discounted_budget=False):
    pol = build_policy(cfg, kind, mults, mu_disc=mu_disc, Q_ref=Q_ref,
                       crosslink=exp.crosslink, Q_max=exp.Q_max,
                       c_inf_mode=exp.c_inf_mode)
    if discounted_budget:
        T = int(math.ceil(math.log(1e-4) / math.log(mu_disc)))
        res = simulate(cfg, pol, exp.pilot_seeds_disc, T, mu_disc=mu_disc,
                       threads=exp.threads)
        usage = (1.0 - mu_disc) * res.disc_C.sum(axis=-1).mean(axis=1)
    else:
        res = simulate(cfg, pol, exp.pilot_seeds, exp.pilot_T, burn_in=exp.pilot_T // 5,
                       threads=exp.threads)
        usage = res.mean_C.sum(axis=-1).mean(axis=1)
    power = res.mean_p.mean(axis=1)
    meanQ = res.mean_Q.mean(axis=(1, 2))
    unstable = unstable_flags(res, cfg, exp.eps).mean(axis=1) > 0.5
    if discounted_budget:
        delay = (res.disc_Q * cfg.beta / np.maximum(cfg.lam, 1e-300)).sum(-1).mean(1)
    else:
        delay = (res.mean_Q * cfg.beta / np.maximum(cfg.lam, 1e-300)).sum(-1).mean(1)
    return usage, power, meanQ, unstable, delay


def closed_form_rho(cfg: ClusterConfig, target, lo: float = 1e-3, hi: float = 1e9):
    """Power-to-fronthaul price ratio at which the closed forms meet the power target.

    Evaluated at the rate-matching priority (E[R] = lambda) per user, without
    cross-links; a starting point for the simulated search.
    """
    target = np.broadcast_to(np.asarray(target, float), (cfg.n,))
    out = np.empty(cfg.n)
    for i in range(cfg.n):
        if target[i] <= 0 or cfg.lam[i] <= 0:
            out[i] = hi
            continue

        def excess(log_rho, i=i):
            params = SolverParams.from_cluster(cfg, gamma=1.0, mu_power=np.exp(log_rho),
                                               Q_grid=np.array([0.0, 1.0]))
            u = params.user(i)
            alpha, _ = sustaining_point(u, "joint")
            return float(expected_power_cost(alpha, u)) / u.mu - target[i]

        a, b = np.log(lo), np.log(hi)
        if excess(a) <= 0:
            out[i] = lo
        elif excess(b) >= 0:
            out[i] = hi
        else:
            out[i] = np.exp(brentq(excess, a, b, xtol=1e-3))
    return out


def _ksection_points(lo, hi, K):
    return np.exp(np.linspace(np.log(lo), np.log(hi), K))


def _search(evaluate, lo, hi, target, K, tol, scale, max_rounds=12, expand=1e3,
            max_expand=4):
    """Find x with decreasing measurement m(x) ~= target by batched k-section in log x.

    ``evaluate`` maps an array of K candidates (shape (K, d)) to measurements
    (K, d); each of the d coordinates is searched independently. A coordinate
    whose measurements stay on one side of the target after ``max_expand``
    bracket expansions is marked failed with direction +1 (always above) or
    -1 (always below). Returns (best x (d,), its measurement, converged
    flags, evaluations, failure directions (d,) with 0 for no failure).
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    target = np.broadcast_to(np.asarray(target, dtype=float), lo.shape)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), lo.shape)
    d = lo.shape[0]
    best_x = np.sqrt(lo * hi)
    best_m = np.full(d, np.nan)
    best_err = np.full(d, np.inf)
    done = np.zeros(d, dtype=bool)
    conv = np.zeros(d, dtype=bool)
    failed = np.zeros(d, dtype=int)
    expansions = np.zeros(d, dtype=int)
    evals = 0
    for _ in range(max_rounds):
        xs = np.stack([_ksection_points(lo[i], hi[i], K) for i in range(d)], axis=1)
        xs[:, done] = best_x[done]
        ms = evaluate(xs)
        evals += K
        err = np.abs(ms - target) / scale
        for i in range(d):
            if done[i]:
                continue
            j = int(np.argmin(err[:, i]))
            if err[j, i] < best_err[i]:
                best_err[i], best_x[i], best_m[i] = err[j, i], xs[j, i], ms[j, i]
            if best_err[i] <= tol:
                done[i] = conv[i] = True
                continue
            above = ms[:, i] > target[i]
            if above.all() or not above.any():
                sign = 1 if above.all() else -1
                if expansions[i] >= max_expand:
                    done[i] = True
                    failed[i] = sign
                    best_x[i] = xs[-1, i] if sign > 0 else xs[0, i]
                    continue
                if sign > 0:
                    lo[i], hi[i] = hi[i], hi[i] * expand
                else:
                    lo[i], hi[i] = lo[i] / expand, lo[i]
                expansions[i] += 1
            else:
                k = int(np.nonzero(above)[0].max())
                if k + 1 < K and not above[k + 1]:
                    lo[i], hi[i] = xs[k, i], xs[k + 1, i]
                else:
                    # nonmonotone measurements (noise): narrow around the best point
                    lo[i], hi[i] = best_x[i] / 1.5, best_x[i] * 1.5
        if done.all():
            break
    return best_x, best_m, conv, evals, failed


def tune_multipliers(cfg: ClusterConfig, exp: ExperimentConfig, kind: str = "joint", *,
                     init: Multipliers | None = None, p_fixed=None, mu_disc=None,
                     span: float = 1e3, corrections: int | None = None) -> TuneResult:
    """Choose gamma (and per-user power prices for the joint policy) to meet the budgets.

    Fronthaul: gamma is searched until the measured sum_i C_i is within
    ``tune_tol`` of C_tot (time average, or the (1 - mu)-normalized
    discounted sum for discounted policies).

    Power (joint only): writing mu = rho * gamma, rho fixes the shape of the
    allocation while gamma mostly sets the backlog scale. rho starts from the
    closed forms (or ``init``) and is corrected multiplicatively from the
    measured power at most ``corrections`` times (default
    ``exp.tune_corrections``); a correction is kept only
    if the re-tuned point still meets the fronthaul budget.

    With cross-links, a final pass re-tunes gamma with the cross-link
    reference backlog set from the previous pass's mean backlog.
    """
    disc = kind == "discounted"
    n = cfg.n
    corrections = exp.tune_corrections if corrections is None else corrections
    ptarget = exp.target_power(cfg)
    tol = exp.tune_tol
    use_ref = exp.crosslink and cfg.delta > 0
    rho = np.ones(n)
    if init is not None:
        rho = np.broadcast_to(np.asarray(init.mu_power, float), (n,)) / float(init.gamma)
    elif kind == "joint":
        rho = closed_form_rho(cfg, ptarget)
    gamma = 1e-4 if init is None else float(init.gamma)
    g_span = span if init is None else 8.0
    total = 0

    def run(gamma, rho, q_ref, lo_span, reach):
        nonlocal total

        def evaluate(xs):
            ms = [Multipliers(float(v), rho * v, p_fixed) for v in xs[:, 0]]
            u, _, _, bad, _ = _evaluate(cfg, kind, ms, exp, q_ref, mu_disc, disc)
            # a drifting pilot under-serves: read it as "price too high"
            return np.where(bad, -np.inf, u)[:, None]

        x, _, conv, ev, failed = _search(evaluate, [gamma / lo_span], [gamma * lo_span],
                                         budget, exp.tune_K, tol, budget, **reach)
        total += ev
        g = float(x[0])
        u, p, q, bad, _ = _evaluate(cfg, kind, [Multipliers(g, rho * g, p_fixed)], exp,
                                    q_ref, mu_disc, disc)
        total += 1
        return g, bool(conv[0] and failed[0] == 0 and not bad[0]), float(u[0]), p[0], \
            float(q[0])

    budget = exp.budget(cfg)
    if budget <= 0:
        log.info("tune %s: no fronthaul budget", kind)
        return TuneResult(Multipliers(gamma, rho * gamma, p_fixed), np.nan,
                          np.full(n, np.nan), np.inf, 0, False, False)
    narrow = dict(expand=4.0, max_expand=3)
    gamma, ok, u, p, q = run(gamma, rho, None, g_span, dict(expand=1e3, max_expand=4))
    if not ok and init is not None:
        # a warm start from a neighbouring point can carry an unusable power price
        if kind == "joint":
            rho = closed_form_rho(cfg, ptarget)
        gamma, ok, u, p, q = run(1e-4, rho, None, span, dict(expand=1e3, max_expand=4))
    if not ok:
        log.info("tune %s: fronthaul budget infeasible (usage %.4g at gamma %.4g)",
                 kind, u, gamma)
        return TuneResult(Multipliers(gamma, rho * gamma, p_fixed), u, p, q, total,
                          False, False)
    q_ref = q / n if use_ref else None
    if kind == "joint":
        for _ in range(corrections):
            off = p / np.maximum(ptarget, 1e-12)
            if np.all(np.abs(off - 1.0) <= max(4 * tol, 0.05)):
                break
            trial_rho = rho * np.clip(off, 0.25, 4.0)
            res = run(gamma, trial_rho, q_ref, 4.0, narrow)
            if not res[1]:
                break
            rho = trial_rho
            gamma, ok, u, p, q = res
            q_ref = q / n if use_ref else None
    if use_ref:
        res = run(gamma, rho, q_ref, 4.0, narrow)
        if res[1]:
            gamma, ok, u, p, q = res
    log.info("tune %s: gamma=%.4g rho=%s usage=%.4g power=%s Q_ref=%s",
             kind, gamma, np.array2string(rho, precision=4), u,
             np.array2string(p, precision=4), q_ref)
    return TuneResult(Multipliers(gamma, rho * gamma, p_fixed), u, p, q, total, ok)


# --- experiments ---------------------------------------------------------------

@dataclass
class SweepRow:
    """One (sweep value, policy) result; ``metric`` is per-trial sum_i beta_i D_i."""

    sweep_value: float
    policy: str
    mean_metric: float
    ci_low: float
    ci_high: float
    unstable_fraction: float
    per_user: np.ndarray
    per_user_ci: np.ndarray
    usage: float
    power: np.ndarray
    gamma: float
    mu_power: np.ndarray
    budget_feasible: bool
    trials: int
    T: int
    samples: np.ndarray = field(repr=False, default=None)
    tune: TuneResult | None = field(repr=False, default=None)

    def csv_fields(self) -> list:
        return [repr(float(self.sweep_value)), self.policy, repr(float(self.mean_metric)),
                repr(float(self.ci_low)), repr(float(self.ci_high)),
                repr(float(self.unstable_fraction))]


CSV_HEADER = ["sweep_value", "policy", "mean_metric", "ci_low", "ci_high",
              "unstable_fraction"]


def mean_ci(x, level: float = 0.95):
    """(mean, low, high) with a Student-t interval along axis 0."""
    x = np.asarray(x, dtype=float)
    m = x.mean(axis=0)
    if x.shape[0] < 2:
        return m, m, m
    half = stats.t.ppf(0.5 + level / 2, x.shape[0] - 1) * x.std(axis=0, ddof=1) \
        / np.sqrt(x.shape[0])
    return m, m - half, m + half


def apply_sweep(cfg: ClusterConfig, name: str | None, value) -> ClusterConfig:
    """Cluster config at one sweep value. Names: lam, lam1, C_tot, beta1, or any field."""
    if name is None:
        return cfg
    if name == "lam1":
        lam = cfg.lam.copy()
        lam[0] = value
        return cfg.replace(lam=lam)
    if name == "beta1":
        beta = cfg.beta.copy()
        beta[0] = value
        return cfg.replace(beta=beta)
    if name == "beta":
        return cfg.replace(beta=np.asarray(value, float))
    return cfg.replace(**{name: value})


def _row(value, kind, res: BatchResult, cfg, tune: TuneResult, exp, T, metric=None):
    D = res.delay(cfg.lam)[0]                       # (trials, n)
    if metric is None:
        metric = (D * cfg.beta).sum(axis=-1)
    unstable = unstable_flags(res, cfg, exp.eps)[0]
    if not tune.feasible:
        unstable = np.ones_like(unstable)
    frac = float(unstable.mean())
    m, lo, hi = mean_ci(metric)
    if frac >= 0.5:
        m = lo = hi = np.inf
    pu, plo, phi = mean_ci(D)
    return SweepRow(float(value) if np.ndim(value) == 0 else float(np.asarray(value)[0]),
                    kind, float(m), float(lo), float(hi), frac, pu,
                    np.stack([plo, phi]), float(res.mean_C[0].sum(-1).mean()),
                    res.mean_p[0].mean(axis=0), tune.mults.gamma,
                    np.broadcast_to(np.asarray(tune.mults.mu_power, float), (cfg.n,)).copy(),
                    tune.feasible, len(metric), T, np.asarray(metric), tune)


def _given(tuned, key, p_fixed):
    """Pre-tuned result for ``key`` with the current matched power filled in."""
    t = tuned[key]
    if p_fixed is not None and t.mults.p_fixed is None:
        t = replace(t, mults=replace(t.mults, p_fixed=p_fixed))
    return t


def _final_policy(cfg, kind, tune: TuneResult, exp, mu_disc=None):
    q_ref = tune.mean_Q / cfg.n if (exp.crosslink and cfg.delta > 0
                                    and np.isfinite(tune.mean_Q)) else None
    return build_policy(cfg, kind, [tune.mults], mu_disc=mu_disc, Q_ref=q_ref,
                        crosslink=exp.crosslink, Q_max=exp.Q_max,
                        c_inf_mode=exp.c_inf_mode)


def run_average_reward_experiment(exp: ExperimentConfig, progress=None,
                                  tuned: dict | None = None) -> list:
    """Sweep one parameter; per point tune, simulate every policy, aggregate.

    ``tuned`` maps (point index, policy) to a TuneResult that replaces the
    search (a cached tuning file, or fixed multipliers).

    Power matching: the joint policy runs first and its measured mean total
    power per user becomes the fixed-power policy's constant power. When the
    joint point is infeasible or unstable the power target is used instead.
    """
    rows = []
    warm = {}
    values = exp.sweep_values if exp.sweep_name else (None,)
    for idx, v in enumerate(values):
        cfg = apply_sweep(exp.cluster, exp.sweep_name, v)
        matched = None
        for kind in exp.policies:
            if kind == "discounted":
                raise ValueError("use run_finite_service_experiment for discounted policies")
            p_fixed = None
            if kind == "fixed_power":
                p_fixed = matched if matched is not None else cfg.p_max
            if tuned is not None:
                tune = _given(tuned, (idx, kind), p_fixed)
            else:
                init = warm.get(kind)
                if init is not None:
                    init = replace(init, p_fixed=p_fixed)
                tune = tune_multipliers(cfg, exp, "joint" if kind == "numeric" else kind,
                                        init=init, p_fixed=p_fixed)
            if tune.feasible:
                warm[kind] = tune.mults
            pol = _final_policy(cfg, kind, tune, exp)
            res = simulate(cfg, pol, exp.seeds, exp.T, burn_in=exp.burn_in,
                           threads=exp.threads)
            row = _row(v if v is not None else 0.0, kind, res, cfg, tune, exp, exp.T)
            if kind == "joint":
                # an infeasible or drifting joint run has no meaningful power to match
                if np.isfinite(row.mean_metric):
                    matched = cfg.p0 + res.mean_p[0].mean(axis=0)
                else:
                    matched = cfg.p0 + exp.target_power(cfg)
            rows.append(row)
            if progress:
                progress(row)
    return rows


def run_finite_service_experiment(exp: ExperimentConfig, progress=None,
                                  tuned: dict | None = None) -> list:
    """Discounted vs average-reward fixed-power policies over a sweep of mu.

    Both use the same constant power. The average-reward policy is tuned
    once to the long-run budget; the discounted one per mu to the
    (1 - mu)-normalized discounted budget. Each trial draws one geometric
    horizon shared by both policies (common random numbers) and accumulates
    sum_i beta_i sum_t Q_i(t)/lam_i up to it.
    """
    cfg = exp.cluster
    p_fixed = exp.target_power(cfg) + cfg.p0 if exp.power_target is not None else cfg.p0
    if tuned is not None:
        avg_tune = _given(tuned, (0, "average_reward"), p_fixed)
    else:
        avg_tune = tune_multipliers(cfg, exp, "fixed_power", p_fixed=p_fixed)
    rows = []
    warm = None
    for idx, mu in enumerate(exp.sweep_values):
        mu = float(mu)
        if tuned is not None:
            disc_tune = _given(tuned, (idx, "discounted"), p_fixed)
        else:
            disc_tune = tune_multipliers(cfg, exp, "discounted", p_fixed=p_fixed,
                                         mu_disc=mu, init=warm or avg_tune.mults)
        warm = disc_tune.mults if disc_tune.feasible else warm
        for kind, tune, md in (("discounted", disc_tune, mu),
                               ("fixed_power", avg_tune, None)):
            pol = _final_policy(cfg, kind, tune, exp, mu_disc=md)
            res = simulate(cfg, pol, exp.seeds, 0, mu_disc=mu, geometric=True,
                           threads=exp.threads)
            total = (res.total_Q[0] / cfg.lam * cfg.beta).sum(axis=-1)
            m, lo, hi = mean_ci(total)
            label = "discounted" if kind == "discounted" else "average_reward"
            row = SweepRow(mu, label, float(m), float(lo), float(hi), 0.0,
                           (res.total_Q[0] / cfg.lam).mean(axis=0),
                           np.zeros((2, cfg.n)), float(disc_tune.usage if md else avg_tune.usage),
                           res.mean_p[0].mean(axis=0), tune.mults.gamma,
                           np.broadcast_to(np.asarray(tune.mults.mu_power, float),
                                           (cfg.n,)).copy(),
                           tune.feasible, len(total), int(res.horizon.max()), total,
                           tune)
            rows.append(row)
            if progress:
                progress(row)
    return rows


def fixed_power_capacity(exp: ExperimentConfig, lo: float, hi: float,
                         rel_tol: float = 0.05) -> float:
    """Largest lambda_1 the fixed-power policy (at p_max) sustains, by bisection.

    A probe point counts as supported when tuning meets the fronthaul budget
    and the pilot runs show no backlog drift.
    """
    cfg0 = exp.cluster

    def stable(lam1):
        cfg = apply_sweep(cfg0, "lam1", lam1)
        tune = tune_multipliers(cfg, exp, "fixed_power", p_fixed=cfg.p0 + exp.target_power(cfg))
        return tune.feasible

    if not stable(lo):
        raise InfeasibleError(f"fixed power cannot sustain lambda_1 = {lo:g}", +1, lo)
    if stable(hi):
        raise InfeasibleError(f"fixed power still stable at lambda_1 = {hi:g}", -1, hi)
    while hi / lo > 1.0 + rel_tol:
        mid = math.sqrt(lo * hi)
        lo, hi = (mid, hi) if stable(mid) else (lo, mid)
        log.info("capacity probe: [%g, %g]", lo, hi)
    return math.sqrt(lo * hi)


def capacity_sweep(capacity: float, points: int = 6, lo: float = 0.1,
                   hi: float = 1.2) -> tuple:
    """Sweep values from ``lo`` to ``hi`` times a probed capacity."""
    return tuple(float(f"{v:.4g}") for v in np.linspace(lo, hi, points) * capacity)


def pareto_sweep(exp: ExperimentConfig, beta_grid, progress=None,
                 tuned: dict | None = None) -> list:
    """Tune, solve and simulate the joint policy at each weight vector.

    Returns (beta, mean delays, CI (2, n), row) sorted by beta_1/beta_2.
    """
    out = []
    warm = None
    for idx, beta in enumerate(beta_grid):
        beta = np.asarray(beta, dtype=float)
        cfg = exp.cluster.replace(beta=beta)
        if tuned is not None:
            tune = _given(tuned, (idx, "joint"), None)
        else:
            tune = tune_multipliers(cfg, exp, "joint", init=warm)
        warm = tune.mults if tune.feasible else warm
        res = simulate(cfg, _final_policy(cfg, "joint", tune, exp), exp.seeds, exp.T,
                       burn_in=exp.burn_in, threads=exp.threads)
        row = _row(beta[0], "joint", res, cfg, tune, exp, exp.T)
        out.append((beta, row.per_user, row.per_user_ci, row))
        if progress:
            progress(row)
    ratio = lambda b: np.inf if b[1] == 0 else b[0] / b[1]
    return sorted(out, key=lambda r: ratio(r[0]))


def dominated_points(points) -> list:
    """Indices of Pareto points dominated beyond CI by another point.

    Point a dominates b when a's CI upper bound is below b's CI lower bound
    in every coordinate.
    """
    bad = []
    for j, (_, _, ci_j, _) in enumerate(points):
        for i, (_, _, ci_i, _) in enumerate(points):
            if i != j and np.all(ci_i[1] < ci_j[0]):
                bad.append(j)
                break
    return bad


# --- geometric horizon vs discounting -----------------------------------

@dataclass
class ToyMDP:
    """Finite MDP under a fixed stationary policy.

    ``P[a]`` is the transition matrix under action a, ``r[s, a]`` the reward,
    ``policy[s]`` the action taken in state s.
    """

    P: np.ndarray
    r: np.ndarray
    policy: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        self.policy = np.asarray(self.policy, dtype=int)
        if not np.allclose(self.P.sum(axis=-1), 1.0):
            raise ValueError("transition rows must sum to 1")
        if np.any(self.P < 0):
            raise ValueError("transition probabilities must be nonnegative")

    @property
    def n_states(self) -> int:
        return self.P.shape[-1]

    @property
    def P_pi(self):
        s = np.arange(self.n_states)
        return self.P[self.policy, s]

    @property
    def r_pi(self):
        return self.r[np.arange(self.n_states), self.policy]

    @classmethod
    def random(cls, rng, n_states=3, n_actions=2) -> "ToyMDP":
        P = rng.dirichlet(np.ones(n_states), size=(n_actions, n_states))
        r = rng.uniform(0.0, 1.0, (n_states, n_actions))
        return cls(P, r, rng.integers(0, n_actions, n_states))


@dataclass
class HorizonReport:
    mu: float
    exact: float
    mc_mean: float
    mc_se: float

    @property
    def z(self) -> float:
        return abs(self.mc_mean - self.exact) / self.mc_se if self.mc_se > 0 else \
            (0.0 if self.mc_mean == self.exact else np.inf)


def discounted_value(toy: ToyMDP, mu: float):
    """Exact policy evaluation v = (I - mu P_pi)^-1 r_pi."""
    return np.linalg.solve(np.eye(toy.n_states) - mu * toy.P_pi, toy.r_pi)


def horizon_equivalence_check(toy: ToyMDP, mu: float, trials: int = 100_000, seed: int = 0,
                              start: int = 0) -> HorizonReport:
    """Total reward over Geometric(1 - mu) horizons vs the mu-discounted value."""
    if not 0 <= mu < 1:
        raise ValueError("mu must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    T = rng.geometric(1.0 - mu, size=trials)
    cum = np.cumsum(toy.P_pi, axis=1)
    state = np.full(trials, start)
    total = np.zeros(trials)
    r = toy.r_pi
    for t in range(int(T.max())):
        alive = t < T
        total += np.where(alive, r[state], 0.0)
        u = rng.random(trials)
        nxt = (u[:, None] > cum[state]).sum(axis=1)
        state = np.minimum(nxt, toy.n_states - 1)
    exact = float(discounted_value(toy, mu)[start])
    return HorizonReport(mu, exact, float(total.mean()),
                         float(total.std(ddof=1) / np.sqrt(trials)))
