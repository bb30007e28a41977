"""Per-slot allocation rules: closed-form joint, fixed power, and a numeric oracle.

All rules are vectorized: channel arrays carry any leading batch axes and
per-user arrays have the user axis last.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import Allocation, ClusterConfig, rates_arrays

log = logging.getLogger(__name__)

LN2 = np.log(2.0)
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class SlotContext:
    """Everything one slot's decision depends on.

    ``grad`` is dJ/dQ per user (cross-link corrected if applicable); when
    omitted it is read from ``table`` at ``Q``.
    """

    H: np.ndarray
    S: np.ndarray
    Q: np.ndarray
    config: ClusterConfig
    gamma: float
    mu_power: np.ndarray
    table: object = None
    grad: np.ndarray | None = None
    p_fixed: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H)
        self.S = np.asarray(self.S)
        self.Q = np.asarray(self.Q, dtype=float)
        mu = np.asarray(self.mu_power, float)
        self.mu_power = mu if mu.ndim > 1 else np.broadcast_to(mu, (self.config.n,))
        if self.grad is None:
            if self.table is None:
                raise ValueError("SlotContext needs a table or an explicit gradient")
            self.grad = self.table.gradient(self.Q)
        self.grad = np.asarray(self.grad, dtype=float)

    @property
    def gain(self) -> np.ndarray:
        return np.abs(np.diagonal(self.H, axis1=-2, axis2=-1)) ** 2


@dataclass
class IntermediateVars:
    x: np.ndarray
    x0: np.ndarray
    y: np.ndarray
    alpha: np.ndarray
    k: np.ndarray
    b: np.ndarray


def _user_cost(x, X, y, k, alpha):
    # per-user objective in units of gamma/ln2, up to the constant delay term
    with np.errstate(divide="ignore", invalid="ignore"):
        power = np.where(x > 0, x / k, 0.0)
        rate = np.where(y > 1, alpha * np.log(y * (X + 1.0) / (X + y)), 0.0)
    return np.log(y) + power - rate


def joint_rule(g, alpha, gamma, mu, L_diag, p0, sigma2, p_cap):
    """Closed-form joint (capacity, power) choice per user.

    ``g`` = |H_ii|^2, ``p_cap`` the largest allowed dynamic power. Returns
    IntermediateVars; C = log2 y, p_d = x sigma^2 / g.

    The stationary point from the quadratic first-order condition is a local
    minimum only, so it is compared against the no-extra-power choice and
    the cheaper of the two is kept.
    """
    alpha = np.asarray(alpha, float)
    x0 = p0 * g / sigma2
    am1 = np.maximum(alpha - 1.0, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        b = gamma * L_diag / (mu * sigma2 * LN2)
        k = b * g / L_diag
        sq = np.sqrt(np.maximum(alpha, 1.0)) - 1.0
        on = (alpha > 1.0) & (k * sq * sq >= 1.0)
        disc = k * k * am1 * am1 + 1.0 - 2.0 * k * (alpha + 1.0)
        XL = 0.5 * (k * am1 - 1.0 + np.sqrt(np.maximum(disc, 0.0)))
        XL = np.where(np.isinf(k), np.inf, XL)
    x_cap = p_cap * g / sigma2
    xA = np.where(on, np.clip(XL - x0, 0.0, x_cap), 0.0)
    XA = x0 + xA
    yA = np.maximum(am1 * XA, 1.0)
    yB = np.maximum(am1 * x0, 1.0)
    take_A = on & (xA > 0) & (_user_cost(xA, XA, yA, k, alpha)
                               < _user_cost(0.0, x0, yB, k, alpha))
    x = np.where(take_A, xA, 0.0)
    y = np.where(take_A, yA, yB)
    return IntermediateVars(x=x, x0=x0, y=y, alpha=alpha, k=k,
                            b=np.broadcast_to(b, np.shape(alpha)))


def _alpha_avg(ctx: SlotContext):
    return ctx.config.W * ctx.grad / (2.0 * np.asarray(ctx.gamma, float)[..., None]) \
        if np.ndim(ctx.gamma) else ctx.config.W * ctx.grad / (2.0 * ctx.gamma)


def allocate_joint(ctx: SlotContext, return_vars: bool = False):
    """Joint fronthaul/power allocation driven by the average-reward gradient."""
    cfg = ctx.config
    g = ctx.gain
    gamma = np.asarray(ctx.gamma, float)
    if gamma.ndim:
        gamma = gamma[..., None]
    v = joint_rule(g, _alpha_avg(ctx), gamma, ctx.mu_power, np.diag(cfg.L), cfg.p0,
                   cfg.sigma2, cfg.p_peak - cfg.p0)
    with np.errstate(divide="ignore"):
        C = np.where(v.y > 1.0, np.log2(v.y), 0.0)
        p_d = np.where(v.x > 0, v.x * cfg.sigma2 / g, 0.0)
    alloc = Allocation(C, np.minimum(p_d, cfg.p_peak - cfg.p0))
    return (alloc, v) if return_vars else alloc


def fixed_power_rule(g, alpha, p, sigma2):
    """C = (log2(p g / sigma^2 (alpha - 1)^+))^+."""
    y = p * g / sigma2 * np.maximum(np.asarray(alpha, float) - 1.0, 0.0)
    with np.errstate(divide="ignore"):
        return np.where(y > 1.0, np.log2(np.maximum(y, 1.0)), 0.0)


def allocate_fixed_power(ctx: SlotContext, mu: float = 1.0):
    """Capacity-only allocation at constant power; mu = 1 is the average-reward baseline."""
    cfg = ctx.config
    p = cfg.p0 if ctx.p_fixed is None else np.asarray(ctx.p_fixed, float)
    gamma = np.asarray(ctx.gamma, float)
    if gamma.ndim:
        gamma = gamma[..., None]
    alpha = mu * 0.5 * cfg.W * ctx.grad / gamma
    C = fixed_power_rule(ctx.gain, alpha, p, cfg.sigma2)
    return Allocation(C, np.broadcast_to(p - cfg.p0, C.shape).copy())


def slot_cost(Q, allocation: Allocation, gamma, mu_power, beta, lam):
    """sum_i beta_i Q_i / lam_i + gamma C_i + mu_i p_d,i (over the user axis)."""
    lam = np.asarray(lam, float)
    gamma = np.asarray(gamma, float)
    if gamma.ndim:
        gamma = gamma[..., None]
    per_user = np.asarray(beta) * np.asarray(Q, float) / lam + gamma * allocation.C \
        + np.asarray(mu_power) * allocation.p_d
    return per_user.sum(axis=-1)


def slot_objective(ctx: SlotContext, C, p_d):
    """Per-slot Lagrangian-plus-drift objective minimized by every rule."""
    cfg = ctx.config
    R = rates_arrays(ctx.H, ctx.S, C, cfg.p0 + p_d, cfg.sigma2, cfg.W)
    gamma = np.asarray(ctx.gamma, float)
    if gamma.ndim:
        gamma = gamma[..., None]
    per_user = cfg.beta * ctx.Q / cfg.lam + gamma * C + ctx.mu_power * p_d \
        + ctx.grad * (cfg.lam - R)
    return per_user.sum(axis=-1)


@dataclass
class NumericResult:
    allocation: Allocation
    objective: np.ndarray
    converged: np.ndarray


def _golden(f, lo, hi, iters):
    """Vectorized golden-section minimization of f over [lo, hi] elementwise."""
    a, b = lo.copy(), hi.copy()
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - GOLDEN * (b - a)
        new_d = a + GOLDEN * (b - a)
        # reuse the surviving interior point
        c, d = np.where(left, new_c, d), np.where(left, c, new_d)
        fc_keep, fd_keep = fc, fd
        fnew = f(np.where(left, c, d))
        fc = np.where(left, fnew, fd_keep)
        fd = np.where(left, fc_keep, fnew)
    return 0.5 * (a + b)


def allocate_numeric(ctx: SlotContext, C_max: float = 40.0, starts: int = 4,
                     max_sweeps: int = 400, tol: float = 1e-6, seed: int = 0,
                     golden_iters: int = 60) -> NumericResult:
    """Coordinate descent with golden-section line searches, best of several starts.

    Minimizes the slot objective over 0 <= C <= C_max and
    0 <= p_d <= p_peak - p0. Without a peak cap the power search box is
    twice gamma (alpha - 1) / (mu ln 2), beyond which the power price alone
    outweighs any rate gain. Stops when a full sweep improves the objective
    by less than ``tol`` (relative); ``converged`` is False where the sweep
    cap was hit first.
    """
    cfg = ctx.config
    n = cfg.n
    batch = ctx.Q.shape[:-1]
    gamma = np.asarray(ctx.gamma, float)
    if gamma.ndim:
        gamma = gamma[..., None]
    alpha = _alpha_avg(ctx)
    with np.errstate(divide="ignore"):
        p_box = 2.0 * gamma * np.maximum(alpha - 1.0, 0.0) / (ctx.mu_power * LN2)
    p_cap = np.minimum(np.broadcast_to(cfg.p_peak - cfg.p0, batch + (n,)),
                       np.maximum(p_box, 1e-12))
    rng = np.random.default_rng(seed)
    g = ctx.gain
    init_C = [np.zeros(batch + (n,)),
              np.log2(1.0 + cfg.p0 * g / cfg.sigma2),
              np.full(batch + (n,), 0.5 * C_max),
              rng.uniform(0, C_max / 2, batch + (n,))]
    init_p = [np.zeros(batch + (n,)), np.zeros(batch + (n,)), 0.5 * p_cap,
              rng.uniform(0, 1, batch + (n,)) * p_cap]
    best_obj = np.full(batch, np.inf)
    best_C = np.zeros(batch + (n,))
    best_p = np.zeros(batch + (n,))
    conv_all = np.zeros(batch, dtype=bool)
    for s in range(min(starts, len(init_C))):
        C, p = init_C[s].copy(), init_p[s].copy()
        obj = slot_objective(ctx, C, p)
        done = np.zeros(batch, dtype=bool)
        for _ in range(max_sweeps):
            prev = obj
            for i in range(n):
                for var in ("C", "p"):
                    def f(v, i=i, var=var):
                        Ct, pt = C.copy(), p.copy()
                        (Ct if var == "C" else pt)[..., i] = v
                        return slot_objective(ctx, Ct, pt)

                    hi = np.full(batch, C_max) if var == "C" else p_cap[..., i]
                    cand = _golden(f, np.zeros(batch), hi, golden_iters)
                    # the bounds themselves are often optimal
                    opts = [cand, np.zeros(batch), hi]
                    vals = [f(o) for o in opts]
                    cur = (C if var == "C" else p)[..., i].copy()
                    vals.append(f(cur))
                    opts.append(cur)
                    pick = np.argmin(np.stack(vals), axis=0)
                    chosen = np.choose(pick, opts)
                    (C if var == "C" else p)[..., i] = chosen
            obj = slot_objective(ctx, C, p)
            done = (prev - obj) <= tol * np.maximum(np.abs(obj), 1e-300)
            if np.all(done):
                break
        better = obj < best_obj
        best_obj = np.where(better, obj, best_obj)
        best_C = np.where(better[..., None], C, best_C)
        best_p = np.where(better[..., None], p, best_p)
        conv_all = np.where(better, done, conv_all)
    if not np.all(conv_all):
        log.warning("allocate_numeric: %d problems hit the sweep cap",
                    int(np.sum(~conv_all)))
    return NumericResult(Allocation(best_C, best_p), best_obj, conv_all)


def foc_residual(v: IntermediateVars):
    """Relative residual of the power first-order condition at interior points."""
    X = v.x0 + v.x
    lhs = (v.y - 1.0) / ((X + 1.0) * (X + v.y))
    rhs = 1.0 / (v.alpha * v.k)
    return np.abs(lhs - rhs) / rhs


def hessian_ok(v: IntermediateVars):
    """Second-order condition (x + x0)(y - 2) - 1 >= 0."""
    return (v.x0 + v.x) * (v.y - 2.0) - 1.0 >= 0
