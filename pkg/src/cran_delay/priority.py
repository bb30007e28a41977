"""Priority-function derivatives for the per-user decomposed MDPs.

Every per-user quantity is expressed through the normalized priority
``alpha``: for the average-reward regime alpha = W J'(Q) / (2 gamma), for the
discounted regime alpha = mu (W/2) J'(Q) / gamma. The closed-form
expectations are taken over z = |h~_ii|^2 ~ Exp(1).

Two allocation models are supported:

``joint``
    fronthaul capacity and dynamic power chosen together; expectations use
    the large-alpha closed forms.
``fixed_power``
    constant transmit power, capacity only; expectations are exact.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from .numerics import (
    bisect_decreasing,
    e1_or_zero,
    exp_integral_e1,
    scaled_e1,
)

log = logging.getLogger(__name__)

LN2 = np.log(2.0)
ALPHA_CAP = 1e14
GRID_POINTS = 256


class InfeasibleTableError(ValueError):
    """No priority root exists at some backlog (arrival rate not supportable)."""

    def __init__(self, user: int, Q: float, detail: str = ""):
        self.user, self.Q = user, Q
        msg = f"user {user}: no priority root at Q = {Q:.6g} bits"
        super().__init__(msg + (f" ({detail})" if detail else ""))


@dataclass
class SolverParams:
    """Prices and per-user physical parameters that a table solve depends on.

    ``p_fixed`` is the transmit power assumed by fixed-power tables; it
    defaults to ``p0``. ``c_inf`` overrides the average-cost constant.
    Without an override it follows ``c_inf_mode``: "empty" gives
    2 gamma lambda_i / W (nothing is bought for an empty queue), "sustain"
    gives the cheapest expected slot spend at which E[R] keeps pace with
    lambda_i.
    """

    gamma: float
    mu_power: np.ndarray
    beta: np.ndarray
    lam: np.ndarray
    W: float
    sigma2: float
    L: np.ndarray
    p0: np.ndarray
    Q_grid: np.ndarray
    alpha_guard: float = 10.0
    c_inf: np.ndarray | None = None
    p_fixed: np.ndarray | None = None
    c_inf_mode: str = "empty"

    def __post_init__(self):
        self.gamma = float(self.gamma)
        if not self.gamma > 0:
            raise ValueError("fronthaul price gamma must be positive")
        self.L = np.asarray(self.L, dtype=float)
        n = self.L.shape[0]
        as_vec = lambda v: np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()
        self.mu_power = as_vec(self.mu_power)
        if np.any(self.mu_power < 0):
            raise ValueError("power prices must be nonnegative")
        self.beta = as_vec(self.beta)
        self.lam = as_vec(self.lam)
        self.p0 = as_vec(self.p0)
        self.p_fixed = self.p0.copy() if self.p_fixed is None else as_vec(self.p_fixed)
        self.Q_grid = np.asarray(self.Q_grid, dtype=float)
        if self.Q_grid[0] != 0 or np.any(np.diff(self.Q_grid) <= 0):
            raise ValueError("Q_grid must start at 0 and increase strictly")
        if self.c_inf_mode not in ("empty", "sustain"):
            raise ValueError(f"unknown c_inf_mode {self.c_inf_mode!r}")
        if self.c_inf is not None:
            self.c_inf = as_vec(self.c_inf)

    def offset(self, user: int, kind: str) -> tuple[float, float]:
        """(c_inf, alpha at Q = 0) for one user's average-reward equation."""
        if self.c_inf is not None:
            return float(self.c_inf[user]), 1.0
        u = self.user(user)
        if self.c_inf_mode == "empty":
            return 2.0 * self.gamma * u.lam / self.W, 1.0
        alpha, cost = sustaining_point(u, kind)
        return cost, alpha

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @classmethod
    def from_cluster(cls, config, gamma, mu_power=1.0, Q_grid=None, Q_max=None,
                     **kw) -> "SolverParams":
        if Q_grid is None:
            Q_grid = default_grid(config.lam, config.tau, Q_max)
        return cls(gamma=gamma, mu_power=mu_power, beta=config.beta, lam=config.lam,
                   W=config.W, sigma2=config.sigma2, L=config.L, p0=config.p0,
                   Q_grid=Q_grid, **kw)

    def user(self, i: int) -> "UserParams":
        return UserParams(
            gamma=self.gamma, mu=float(self.mu_power[i]), beta=float(self.beta[i]),
            lam=float(self.lam[i]), W=self.W, sigma2=self.sigma2,
            L=float(self.L[i, i]), p0=float(self.p0[i]), p=float(self.p_fixed[i]),
        )


@dataclass(frozen=True)
class UserParams:
    gamma: float
    mu: float
    beta: float
    lam: float
    W: float
    sigma2: float
    L: float
    p0: float
    p: float

    @property
    def a(self) -> float:
        """sigma^2 / (p0 L_ii): inverse base-power SNR."""
        return self.sigma2 / (self.p0 * self.L)

    @property
    def a_fixed(self) -> float:
        return self.sigma2 / (self.p * self.L)

    @property
    def b(self) -> float:
        return self.gamma * self.L / (self.mu * self.sigma2 * LN2)


def default_grid(lam, tau: float, Q_max=None, points: int = GRID_POINTS) -> np.ndarray:
    """0 followed by geometrically spaced backlogs up to 100x the mean slot arrival."""
    per_slot = float(np.max(np.asarray(lam, dtype=float))) * tau
    if Q_max is None:
        Q_max = 100.0 * per_slot if per_slot > 0 else 1.0
    Q_min = Q_max * 1e-4
    return np.concatenate(([0.0], np.geomspace(Q_min, Q_max, points)))


def _user_args(params, user):
    return params.user(user) if isinstance(params, SolverParams) else params


# --- joint power/fronthaul closed forms -----------------------------------

def thresholds(alpha, params, user: int = 0):
    """Channel-gain thresholds (h0, h4, h3) for the joint allocation.

    h0: dynamic power switches on; h4: base power alone earns capacity;
    h3 = min(h0, h4). All are +inf when alpha <= 1.
    """
    u = _user_args(params, user)
    alpha = np.asarray(alpha, dtype=float)
    on = alpha > 1.0
    am1 = np.where(on, alpha - 1.0, 1.0)
    with np.errstate(divide="ignore"):
        h0 = np.where(on, u.mu * u.sigma2 * LN2
                      / (u.gamma * u.L * (np.sqrt(np.where(on, alpha, 4.0)) - 1.0) ** 2),
                      np.inf)
    h4 = np.where(on, u.a / am1, np.inf)
    h3 = np.minimum(h0, h4)
    return h0, h4, h3


def _masked(fn, alpha, fill=0.0):
    alpha = np.asarray(alpha, dtype=float)
    out = np.full(alpha.shape, fill)
    on = alpha > 1.0
    if np.any(on):
        out[on] = fn(alpha[on])
    return out if out.ndim else float(out)


def _diff_e1(lo, hi):
    # E1(lo) - E1(hi) for lo <= hi, stable when both are large
    return np.exp(-lo) * scaled_e1(lo) - np.exp(-hi) * scaled_e1(hi)


def expected_power_cost(alpha, params, user: int = 0):
    """E[mu_i p*_{i,d}] from the large-alpha approximation, clamped at 0."""
    u = _user_args(params, user)
    if u.mu <= 0:
        raise ValueError("joint expectations need a positive power price")

    def body(al):
        h0, _, _ = thresholds(al, u)
        val = ((u.gamma / LN2) * (al - 1.0) - u.mu * u.p0) * np.exp(-h0) \
            - (u.mu * u.sigma2 / u.L) * exp_integral_e1(h0)
        return np.maximum(val, 0.0)

    return _masked(body, alpha)


def expected_capacity(alpha, params, user: int = 0):
    """E[C*_i] in bits/sec/Hz for the joint allocation."""
    u = _user_args(params, user)

    def body(al):
        h0, _, h3 = thresholds(al, u)
        c = 1.0 / (u.b * (al - 1.0))
        e0 = np.exp(-h0)
        base = -e0 * np.log2(h0 / h3) + _diff_e1(h3, h0) / LN2
        dyn = e0 * np.log2((al - 1.0) * (u.b * h0 * (al - 1.0) - 1.0)) \
            + e0 * scaled_e1(h0 - c) / LN2
        return base + dyn

    return _masked(body, alpha)


def expected_rate(alpha, params, user: int = 0):
    """E[R*_{i,0}] in bits/sec for the joint allocation (no cross-links)."""
    u = _user_args(params, user)

    def body(al):
        h0, _, h3 = thresholds(al, u)
        e0 = np.exp(-h0)
        d = h3 * (al - 1.0)
        base = -e0 * np.log2(h0 / (al * h3) + (al - 1.0) / al) \
            + (np.exp(-h3) * scaled_e1(al * h3) - e0 * scaled_e1(h0 + d)) / LN2
        dyn = e0 * np.log2((al - 1.0) ** 2 * u.b * h0 / al) + exp_integral_e1(h0) / LN2
        return 0.5 * u.W * (base + dyn)

    return _masked(body, alpha)


# --- fixed-power closed forms (exact) ---------------------------------------

def fixed_power_capacity_cost(alpha, params, user: int = 0):
    """E[gamma C*] under constant power; zero when alpha <= 1."""
    u = _user_args(params, user)
    return _masked(lambda al: (u.gamma / LN2) * exp_integral_e1(u.a_fixed / (al - 1.0)),
                   alpha)


def fixed_power_rate(alpha, params, user: int = 0):
    """E[R^0] under constant power; zero when alpha <= 1."""
    u = _user_args(params, user)
    a = u.a_fixed

    def body(al):
        h = a / (al - 1.0)
        return 0.5 * u.W * np.exp(-h) * scaled_e1(h + a) / LN2

    return _masked(body, alpha)


def fixed_power_rate_limit(params, user: int = 0) -> float:
    """Ergodic rate with unlimited fronthaul, the fixed-power stability limit."""
    u = _user_args(params, user)
    return 0.5 * u.W * float(scaled_e1(u.a_fixed)) / LN2


# --- per-user Bellman residual -------------------------------------------

def _value_terms(alpha, u: UserParams, kind: str):
    """(capacity cost, power cost, expected rate) at normalized priority alpha."""
    if kind == "joint":
        return (u.gamma * expected_capacity(alpha, u), expected_power_cost(alpha, u),
                expected_rate(alpha, u))
    if kind == "fixed_power":
        return (fixed_power_capacity_cost(alpha, u), np.zeros_like(np.asarray(alpha, float)),
                fixed_power_rate(alpha, u))
    raise ValueError(f"unknown allocation model {kind!r}")


def bellman_residual(alpha, Q, u: UserParams, kind: str, offset: float):
    """beta Q/lam + E[gamma C] + E[mu p] + J'(lam - E[R]) - offset, and its scale.

    J' is written through alpha (J' = 2 gamma alpha / W in discount-normalized
    units), so the same residual serves both regimes: ``offset`` is c_inf for
    the average-reward equation and 0 for the discounted one.
    """
    cap, pw, rate = _value_terms(alpha, u, kind)
    jp = 2.0 * u.gamma * np.asarray(alpha, float) / u.W
    delay = u.beta * np.asarray(Q, float) / u.lam
    res = delay + cap + pw + jp * (u.lam - rate) - offset
    scale = np.abs(delay) + np.abs(cap) + np.abs(pw) + jp * (u.lam + rate) + abs(offset)
    return res, scale


def _alpha_scan(u, kind, offset):
    """Locate the peak of the Q-independent part of the residual."""
    grid = 1.0 + np.geomspace(1e-6, 1e6, 1200)
    g, _ = bellman_residual(grid, 0.0, u, kind, offset)
    k = int(np.argmax(g))
    return grid, g, k


def sustaining_point(u: UserParams, kind: str) -> tuple[float, float]:
    """(alpha, cost) maximizing E[gamma C] + E[mu p] + (2 gamma alpha/W)(lam - E[R]).

    For fixed power the closed forms obey the envelope identity, so E[R] = lam
    at the maximizer. The joint closed forms use the large-alpha rate
    approximation, so there the match is only approximate at small alpha.
    """
    grid, g, k = _alpha_scan(u, kind, 0.0)
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]

    def neg(t):
        return -float(bellman_residual(1.0 + np.exp(t), 0.0, u, kind, 0.0)[0])

    res = minimize_scalar(neg, bounds=(np.log(lo - 1.0), np.log(hi - 1.0)),
                          method="bounded", options={"xatol": 1e-12})
    alpha, cost = 1.0 + float(np.exp(res.x)), -float(res.fun)
    if cost < g[k]:
        alpha, cost = float(grid[k]), float(g[k])
    return alpha, cost


def solve_user(u: UserParams, Q_grid, kind: str, offset: float, user: int = 0,
               zero_alpha: float = 1.0):
    """Solve the per-user Bellman equation for alpha at every grid backlog.

    Q = 0 is pinned to ``zero_alpha`` (the empty-queue boundary). For Q > 0 the
    root is taken on the branch where the residual decreases in alpha, i.e.
    past the peak where E[R*] overtakes the arrival rate.
    """
    Q_grid = np.asarray(Q_grid, dtype=float)
    alpha = np.full(Q_grid.shape, zero_alpha)
    if u.lam == 0:
        return alpha
    pos = Q_grid > 0
    grid, g, k = _alpha_scan(u, kind, offset)
    lo_alpha = grid[k]
    delay = u.beta * Q_grid[pos] / u.lam
    if g[k] + delay.min() <= 0:
        raise InfeasibleTableError(user, float(Q_grid[pos][0]), "residual never positive")
    # residual at lo is g[k] + delay > 0; grow hi until negative everywhere
    lo = np.full(delay.shape, lo_alpha)
    hi = np.full(delay.shape, max(2.0 * lo_alpha, 2.0))
    for _ in range(200):
        r, _ = bellman_residual(hi, Q_grid[pos], u, kind, offset)
        bad = r > 0
        if not np.any(bad):
            break
        if np.any(hi[bad] >= ALPHA_CAP):
            q_bad = float(Q_grid[pos][bad & (hi >= ALPHA_CAP)][0])
            raise InfeasibleTableError(user, q_bad, "arrival rate exceeds achievable rate")
        lo = np.where(bad, hi, lo)
        hi = np.where(bad, np.minimum(hi * 4.0, ALPHA_CAP), hi)
    f = lambda al: bellman_residual(al, Q_grid[pos], u, kind, offset)[0]
    alpha[pos] = bisect_decreasing(f, lo, hi)
    return alpha


# --- tables -----------------------------------------------------------------

@dataclass
class PriorityTable:
    """Solved priority derivatives on a backlog grid for every user.

    ``Jp`` has shape (n, G). ``gain`` holds the per-user cross-link factor,
    so the policy gradient is Jp_i(Q_i) * (1 + gain_i). ``mu`` is the
    discount (1 for the average-reward regime).
    """

    Q_grid: np.ndarray
    Jp: np.ndarray
    regime: str
    kind: str
    gamma: float
    W: float
    mu: float = 1.0
    c_inf: np.ndarray | None = None
    gain: np.ndarray | None = None
    guard_warnings: int = 0
    Q_ref: float | None = None

    def __post_init__(self):
        if self.gain is None:
            self.gain = np.zeros(self.Jp.shape[0])

    @property
    def n(self) -> int:
        return self.Jp.shape[0]

    @property
    def alpha_scale(self) -> float:
        """Factor turning J' into the normalized priority alpha."""
        return self.mu * self.W / (2.0 * self.gamma)

    def interp(self, Q):
        """Linear interpolation of each user's J' at backlogs Q (user axis last).

        Beyond the last node the final segment is extended linearly.
        """
        Q = np.asarray(Q, dtype=float)
        grid = self.Q_grid
        idx = np.clip(np.searchsorted(grid, Q, side="right") - 1, 0, len(grid) - 2)
        users = np.arange(self.n)
        lo = self.Jp[users, idx]
        hi = self.Jp[users, idx + 1]
        w = (Q - grid[idx]) / (grid[idx + 1] - grid[idx])
        return lo + w * (hi - lo)

    def gradient(self, Q):
        """dJ/dQ_i including the cross-link factor."""
        return self.interp(Q) * (1.0 + self.gain)

    def alpha(self, Q):
        return self.gradient(Q) * self.alpha_scale

    def with_gain(self, gain, Q_ref=None) -> "PriorityTable":
        return replace(self, gain=np.asarray(gain, dtype=float), Q_ref=Q_ref)

    def to_csv(self, path, extra: str | None = None) -> Path:
        path = Path(path)
        tag = self.c_inf if self.regime == "average" else np.full(self.n, self.mu)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user", "Q_bits", "Jprime", "regime", "c_inf/mu"])
            for i in range(self.n):
                for q, jp in zip(self.Q_grid, self.Jp[i]):
                    w.writerow([i, repr(float(q)), repr(float(jp)), self.regime,
                                repr(float(tag[i]))])
        return path

    @classmethod
    def from_csv(cls, path, kind: str, gamma: float, W: float) -> "PriorityTable":
        rows = list(csv.DictReader(Path(path).open()))
        users = sorted({int(r["user"]) for r in rows})
        Q = np.array([float(r["Q_bits"]) for r in rows if int(r["user"]) == users[0]])
        Jp = np.array([[float(r["Jprime"]) for r in rows if int(r["user"]) == i]
                       for i in users])
        regime = rows[0]["regime"]
        tag = np.array([float(next(r["c_inf/mu"] for r in rows if int(r["user"]) == i))
                        for i in users])
        if regime == "average":
            return cls(Q, Jp, regime, kind, gamma, W, 1.0, c_inf=tag)
        return cls(Q, Jp, regime, kind, gamma, W, float(tag[0]))


def _guard_count(alpha, guard):
    a = alpha[1:]
    return int(np.sum((a > 1.0) & (a < guard)))


def solve_subpriority_avg(params: SolverParams, user: int, kind: str = "joint"):
    """J_i'(Q) on the grid for the average-reward regime.

    Returns (Jp, guard_warnings, c_inf). With the "empty" constant
    J'(0) = 2 gamma / W (alpha = 1, nothing allocated to an empty queue); with
    "sustain" J'(0) sits at the rate-matching priority.
    """
    u = params.user(user)
    if kind == "joint" and u.mu <= 0:
        raise ValueError("joint tables need a positive power price")
    c_inf, zero_alpha = params.offset(user, kind)
    alpha = solve_user(u, params.Q_grid, kind, c_inf, user, zero_alpha)
    return (2.0 * params.gamma * alpha / params.W, _guard_count(alpha, params.alpha_guard),
            c_inf)


def solve_subpriority_discounted(params: SolverParams, user: int, mu: float):
    """J_i'(Q) on the grid for the discounted regime with fixed power.

    J'(0) = 0; for Q > 0 the root lies on the branch mu (W/2) J' > gamma.
    """
    if not 0 < mu < 1:
        raise ValueError("discount mu must lie in (0, 1)")
    u = params.user(user)
    alpha = solve_user(u, params.Q_grid, "fixed_power", 0.0, user, 0.0)
    return 2.0 * params.gamma * alpha / (mu * params.W), \
        _guard_count(alpha, params.alpha_guard)


def discounted_residual(Jp, Q, params: SolverParams, user: int, mu: float):
    """Left side of the discounted implicit equation, written out term by term."""
    u = params.user(user)
    Jp = np.asarray(Jp, dtype=float)
    m = mu * 0.5 * u.W * Jp
    on = m > u.gamma
    a = u.a_fixed
    safe = np.where(on, m - u.gamma, 1.0)
    cap = np.where(on, (u.gamma / LN2) * e1_or_zero(np.where(on, a * u.gamma / safe, np.inf)), 0.0)
    arg = np.where(on, a * m / safe, 1.0)
    rate_term = np.where(on, m * np.exp(a - arg) * scaled_e1(arg) / LN2, 0.0)
    return u.beta * np.asarray(Q, float) / u.lam + cap + mu * Jp * u.lam - rate_term


def average_residual(Jp, Q, params: SolverParams, user: int, kind: str = "joint"):
    """Normalized residual of the average-reward equation at J' (for checks)."""
    u = params.user(user)
    alpha = np.asarray(Jp, float) * params.W / (2.0 * params.gamma)
    r, s = bellman_residual(alpha, Q, u, kind, params.offset(user, kind)[0])
    return r / s


def build_table(params: SolverParams, regime: str = "average", kind: str = "joint",
                mu: float = 1.0) -> PriorityTable:
    """Solve every user's sub-priority derivative on the grid."""
    rows, warn, c_inf = [], 0, np.zeros(params.n)
    for i in range(params.n):
        if regime == "average":
            jp, w, c_inf[i] = solve_subpriority_avg(params, i, kind)
        elif regime == "discounted":
            if kind != "fixed_power":
                raise ValueError("the discounted regime is solved for fixed power only")
            jp, w = solve_subpriority_discounted(params, i, mu)
        else:
            raise ValueError(f"unknown regime {regime!r}")
        rows.append(jp)
        warn += w
    if warn:
        log.debug("%d grid points solved below alpha_guard=%g", warn, params.alpha_guard)
    return PriorityTable(params.Q_grid.copy(), np.vstack(rows), regime, kind,
                         params.gamma, params.W, mu if regime == "discounted" else 1.0,
                         c_inf=c_inf, guard_warnings=warn)


# --- cross-link corrections (average reward, joint) -------------------------

def _v12_target(alpha, u):
    h0, _, h3 = thresholds(alpha, u)
    a = u.a
    return a * (np.exp(-h3) * scaled_e1(h3 + a) - np.exp(-h0) * scaled_e1(h0 + a)) \
        + exp_integral_e1(h0) / (u.b * (alpha - 1.0))


def _v34_target(alpha, u):
    h0, _, h3 = thresholds(alpha, u)
    return (np.exp(-h3) - np.exp(-h0)) / u.a + u.b * (alpha - 1.0) * np.exp(-h0) \
        - exp_integral_e1(h0)


def _fit(alphas, values, basis):
    A = np.column_stack([f(alphas) for f in basis])
    coef, *_ = np.linalg.lstsq(A, values, rcond=None)
    return coef


def fit_window(alpha: float, span: float = 2.0, points: int = 33) -> np.ndarray:
    lo = max(alpha / span, 1.0 + (alpha - 1.0) / span)
    return np.geomspace(lo, alpha * span, points)


def fit_v12(alphas, u: UserParams):
    return _fit(alphas, _v12_target(alphas, u),
                [np.ones_like, lambda a: 1.0 / (a - 1.0)])


def fit_v34(alphas, u: UserParams):
    return _fit(alphas, _v34_target(alphas, u), [np.ones_like, lambda a: a - 1.0])


def v5_at(alpha: float, u: UserParams) -> float:
    """E1(h3): the numerator of the E1(h3)/(alpha - 1) expectation, taken at alpha."""
    return float(exp_integral_e1(thresholds(alpha, u)[2]))


@dataclass(frozen=True)
class PairCoeffs:
    i: int
    j: int
    v1: float
    v2: float
    v3: float
    v4: float
    v5: float


@dataclass
class CrossLinkCoeffs:
    """Cross-link expectation constants at the reference backlog."""

    pairs: dict
    a: np.ndarray
    b: np.ndarray
    alpha: np.ndarray
    h0: np.ndarray
    h3: np.ndarray
    h4: np.ndarray
    rate: np.ndarray
    Q_ref: float | None = None

    def __getitem__(self, key) -> PairCoeffs:
        return self.pairs[key]


def pair_coeffs(i: int, j: int, alpha_i: float, alpha_j: float,
                params: SolverParams, span: float = 2.0) -> PairCoeffs:
    """v1, v2 (user i) and v3, v4 (user j) by least squares around the alphas.

    v5 is the exact numerator at alpha_j; it needs no fit.
    """
    ui, uj = params.user(i), params.user(j)
    if alpha_i <= params.alpha_guard or alpha_j <= params.alpha_guard:
        log.debug("cross-link constants at alpha below guard (%g, %g)", alpha_i, alpha_j)
    v1, v2 = fit_v12(fit_window(alpha_i, span), ui)
    v3, v4 = fit_v34(fit_window(alpha_j, span), uj)
    v5 = v5_at(alpha_j, uj)
    return PairCoeffs(i, j, float(v1), float(v2), float(v3), float(v4), float(v5))


def crosslink_coeffs(alpha, params: SolverParams, Q_ref=None) -> CrossLinkCoeffs:
    alpha = np.asarray(alpha, dtype=float)
    n = params.n
    us = [params.user(i) for i in range(n)]
    pairs = {(i, j): pair_coeffs(i, j, alpha[i], alpha[j], params)
             for i in range(n) for j in range(n) if i != j and params.L[i, j] > 0}
    th = [thresholds(alpha[i], us[i]) for i in range(n)]
    return CrossLinkCoeffs(
        pairs=pairs,
        a=np.array([u.a for u in us]),
        b=np.array([u.b for u in us]),
        alpha=alpha,
        h0=np.array([t[0] for t in th], dtype=float),
        h4=np.array([t[1] for t in th], dtype=float),
        h3=np.array([t[2] for t in th], dtype=float),
        rate=np.array([expected_rate(alpha[i], us[i]) for i in range(n)]),
        Q_ref=Q_ref,
    )


def crosslink_gradient_avg(i: int, j: int, table: PriorityTable, coeffs: CrossLinkCoeffs,
                           params: SolverParams, Q=None):
    """(dJ~_ij/dQ_i, dJ~_ij/dQ_j) for the ordered pair (i, j).

    The v's and E[R*] are the constants at the reference backlog; alpha in
    the numerators is taken at Q (default: the reference backlog).
    """
    pc = coeffs[(i, j)]
    if Q is None:
        alpha_i, alpha_j = coeffs.alpha[i], coeffs.alpha[j]
    else:
        al = table.alpha(Q)
        alpha_i, alpha_j = al[..., i], al[..., j]
    di = coeffs.rate[i] - params.lam[i]
    dj = coeffs.rate[j] - params.lam[j]
    if di <= 0 or dj <= 0:
        raise ValueError(f"pair ({i},{j}): E[R*] does not exceed the arrival rate")
    # 1/L_jj normalization (the expectation of |h~_ij|^2 / |H_jj|^2)
    scale = params.gamma / params.L[j, j]
    d_i = scale * pc.v5 * (1.0 - pc.v1) * alpha_i / di
    d_j = scale * pc.v1 * pc.v4 * alpha_j / dj
    return d_i, d_j


def pde_residual(i, j, d_i, d_j, coeffs: CrossLinkCoeffs, params: SolverParams,
                 alpha_i=None, alpha_j=None):
    """Relative residual of the first-order PDE for the pair (i, j)."""
    pc = coeffs[(i, j)]
    alpha_i = coeffs.alpha[i] if alpha_i is None else alpha_i
    alpha_j = coeffs.alpha[j] if alpha_j is None else alpha_j
    lhs = d_i * (coeffs.rate[i] - params.lam[i]) + d_j * (coeffs.rate[j] - params.lam[j])
    rhs = params.gamma / params.L[j, j] * (pc.v5 * (1 - pc.v1) * alpha_i
                                           + pc.v1 * pc.v4 * alpha_j)
    return abs(lhs - rhs) / max(abs(rhs), 1e-300)


def avg_gain(coeffs: CrossLinkCoeffs, params: SolverParams) -> np.ndarray:
    """Per-user factor g_i with dJ/dQ_i = J_i'(Q_i) (1 + g_i).

    Every cross term is proportional to alpha_i, hence to J_i'(Q_i).
    """
    n = params.n
    gain = np.zeros(n)
    half_w = 0.5 * params.W
    for (i, j), pc in coeffs.pairs.items():
        di = coeffs.rate[i] - params.lam[i]
        dj = coeffs.rate[j] - params.lam[j]
        if di <= 0 or dj <= 0:
            raise ValueError(f"pair ({i},{j}): E[R*] does not exceed the arrival rate")
        w = params.L[i, j] / params.L[j, j]
        gain[i] += w * half_w * pc.v5 * (1.0 - pc.v1) / di
        gain[j] += w * half_w * pc.v1 * pc.v4 / dj
    return gain


def priority_gradient_avg(Q, table: PriorityTable, coeffs: CrossLinkCoeffs | None,
                          params: SolverParams):
    """dJ/dQ_i = J_i'(Q_i) + sum over pairs containing i of L_pair * cross gradient."""
    Q = np.asarray(Q, dtype=float)
    grad = np.array(table.interp(Q), dtype=float)
    if coeffs is None:
        return grad
    for (i, j) in coeffs.pairs:
        d_i, d_j = crosslink_gradient_avg(i, j, table, coeffs, params, Q)
        grad[..., i] += params.L[i, j] * d_i
        grad[..., j] += params.L[i, j] * d_j
    return grad


# --- cross-link corrections (fixed power, either regime) --------------------

def fading_constant(alpha_j: float, a_j: float) -> float:
    """K_j with E[(N_j + sigma^2)/(L_jj z_j)] = 2 sigma^2 K_j / L_jj.

    Evaluated with y - 1 ~ y over the region where the RRH gets capacity;
    the exact expectation diverges logarithmically at the threshold.
    """
    if alpha_j <= 1:
        return 0.0
    h = a_j / (alpha_j - 1.0)
    return float(alpha_j * exp_integral_e1(h) / (2.0 * (alpha_j - 1.0)))


def crosslink_gradient_discounted(i: int, j: int, table: PriorityTable,
                                  params: SolverParams, Q=None, K_j=None):
    """dJ~_ij/dQ_i for a fixed-power table; only user i's queue is affected."""
    ui = params.user(i)
    a = ui.a_fixed
    s = float(scaled_e1(a))
    denom = params.L[j, j] * (s / LN2 - 2.0 * params.lam[i] / params.W)
    if abs(denom) < 1e-12 * params.L[j, j]:
        raise ValueError(f"pair ({i},{j}): near-zero denominator")
    if K_j is None:
        Q_eval = table.Q_ref if Q is None else Q
        al = table.alpha(np.broadcast_to(np.asarray(Q_eval, float), (table.n,)))
        K_j = fading_constant(float(al[j]), params.user(j).a_fixed)
    if Q is None:
        Q = np.full(table.n, table.Q_ref if table.Q_ref is not None else 0.0)
    jp = table.interp(np.asarray(Q, float))[..., i]
    return 2.0 * K_j * jp * (1.0 - a * s) / denom


def discounted_gain(table: PriorityTable, params: SolverParams, Q_ref: float) -> np.ndarray:
    """Per-user factor g_i so that dJ/dQ_i = J_i'(Q_i) (1 + g_i) for fixed-power tables."""
    n = params.n
    al = table.alpha(np.full(n, Q_ref))
    gain = np.zeros(n)
    for i in range(n):
        ui = params.user(i)
        a = ui.a_fixed
        s = float(scaled_e1(a))
        denom = s / LN2 - 2.0 * params.lam[i] / params.W
        if denom <= 0:
            raise ValueError(f"user {i}: arrival rate at or above the fixed-power limit")
        for j in range(n):
            if j == i or params.L[i, j] == 0:
                continue
            K = fading_constant(float(al[j]), params.user(j).a_fixed)
            gain[i] += (params.L[i, j] / params.L[j, j]) * 2.0 * K * (1.0 - a * s) / denom
    return gain
