"""Channel generation, quantization noise, zero-forcing and end-to-end rates.

Array conventions: per-user quantities have the user axis last, channel
matrices the (rrh, user) axes last; any leading axes are batch axes, so the
same functions serve a single slot or a stack of independent trials.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

COND_THRESHOLD = 1e6
MAX_RESAMPLES = 100


class DegenerateChannelError(RuntimeError):
    pass


def _per_user(value, n: int, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass
class ClusterConfig:
    """Physical and economic parameters of one cooperating cluster.

    ``p_max`` is the per-user *average* power budget (base plus dynamic);
    ``p_peak`` is an optional per-slot ceiling on p0 + p_d (default: none,
    the budget is enforced on average through the power price). Watts,
    ``lam`` in bits/sec and ``C_tot`` in bits/sec/Hz.
    """

    n: int = 2
    W: float = 2e6
    tau: float = 1e-3
    sigma2: float = 0.1
    C_tot: float = 10.0
    L: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0.1], [0.1, 1.0]]))
    p0: np.ndarray | float = 0.1
    p_max: np.ndarray | float = 0.2
    lam: np.ndarray | float = 5e5
    beta: np.ndarray | float = 1.0
    seed: int = 0
    p_peak: np.ndarray | float | None = None
    fading_scale: float = 1.0

    def __post_init__(self):
        n = int(self.n)
        if n < 1:
            raise ValueError("cluster size n must be >= 1")
        self.n = n
        for name in ("W", "tau", "sigma2", "C_tot", "fading_scale"):
            v = float(getattr(self, name))
            if not (v > 0 and np.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v}")
            setattr(self, name, v)
        L = np.asarray(self.L, dtype=float)
        if L.shape != (n, n):
            raise ValueError(f"L must be {n}x{n}, got shape {L.shape}")
        if np.any(L < 0) or np.any(np.diag(L) <= 0):
            raise ValueError("L needs nonnegative entries and a positive diagonal")
        off = L[~np.eye(n, dtype=bool)]
        if off.size and np.any(off > np.repeat(np.diag(L), n - 1)):
            raise ValueError("off-diagonal path loss L_ij must not exceed L_ii")
        self.L = L
        self.p0 = _per_user(self.p0, n, "p0")
        if np.any(self.p0 <= 0):
            raise ValueError("p0 must be positive")
        self.p_max = _per_user(self.p_max, n, "p_max")
        if np.any(self.p_max < self.p0):
            raise ValueError("p_max must be at least p0")
        peak = np.inf if self.p_peak is None else self.p_peak
        self.p_peak = np.broadcast_to(np.asarray(peak, dtype=float), (n,)).copy()
        if np.any(np.isnan(self.p_peak)) or np.any(self.p_peak < self.p0):
            raise ValueError("p_peak must be at least p0")
        self.lam = _per_user(self.lam, n, "lam")
        if np.any(self.lam < 0):
            raise ValueError("arrival rates must be nonnegative")
        self.beta = _per_user(self.beta, n, "beta")
        if np.any(self.beta < 0) or self.beta.sum() <= 0:
            raise ValueError("beta must be nonnegative with a positive sum")
        self.seed = int(self.seed)

    @property
    def delta(self) -> float:
        """Largest cross-link gain."""
        if self.n == 1:
            return 0.0
        return float(self.L[~np.eye(self.n, dtype=bool)].max())

    def replace(self, **changes) -> "ClusterConfig":
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(changes)
        return ClusterConfig(**kw)


@dataclass(frozen=True)
class ChannelRealization:
    h_tilde: np.ndarray
    H: np.ndarray
    S: np.ndarray
    cond: np.ndarray | float
    resamples: int = 0


@dataclass(frozen=True)
class Allocation:
    C: np.ndarray
    p_d: np.ndarray

    def __post_init__(self):
        if np.any(~np.isfinite(self.C)) or np.any(self.C < 0):
            raise ValueError("fronthaul capacities must be finite and >= 0")
        if np.any(~np.isfinite(self.p_d)) or np.any(self.p_d < 0):
            raise ValueError("dynamic powers must be finite and >= 0")


def _draw_h_tilde(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    # CN(0, scale): real and imaginary parts each carry half the variance
    std = np.sqrt(scale / 2.0)
    return std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def make_channel(config: ClusterConfig, h_tilde: np.ndarray) -> ChannelRealization:
    """Build H = h~ o sqrt(L) and its zero-forcing inverse from given small-scale gains."""
    h_tilde = np.asarray(h_tilde, dtype=complex)
    H = h_tilde * np.sqrt(config.L)
    S = np.linalg.inv(H)
    return ChannelRealization(h_tilde, H, S, np.linalg.cond(H))


def sample_channel(config: ClusterConfig, rng: np.random.Generator) -> ChannelRealization:
    """Draw one slot's channel, resampling while H is ill-conditioned."""
    n = config.n
    for attempt in range(MAX_RESAMPLES + 1):
        h_tilde = _draw_h_tilde(rng, (n, n), config.fading_scale)
        H = h_tilde * np.sqrt(config.L)
        cond = np.linalg.cond(H)
        if np.isfinite(cond) and cond <= COND_THRESHOLD:
            return ChannelRealization(h_tilde, H, np.linalg.inv(H), cond, attempt)
    raise DegenerateChannelError(
        f"channel ill-conditioned after {MAX_RESAMPLES} resamples; check L"
    )


def sample_channel_block(config: ClusterConfig, rng: np.random.Generator, T: int):
    """Draw T slots at once. Returns (H, S, resample_count) with H, S of shape (T, n, n)."""
    n = config.n
    sqrtL = np.sqrt(config.L)
    h_tilde = _draw_h_tilde(rng, (T, n, n), config.fading_scale)
    H = h_tilde * sqrtL
    resamples = 0
    bad = ~(np.linalg.cond(H) <= COND_THRESHOLD)
    tries = 0
    while np.any(bad):
        tries += 1
        if tries > MAX_RESAMPLES:
            raise DegenerateChannelError(
                f"channel ill-conditioned after {MAX_RESAMPLES} resamples; check L"
            )
        k = int(bad.sum())
        resamples += k
        H[bad] = _draw_h_tilde(rng, (k, n, n), config.fading_scale) * sqrtL
        bad = ~(np.linalg.cond(H) <= COND_THRESHOLD)
    if resamples:
        log.debug("resampled %d ill-conditioned channel draws", resamples)
    return H, np.linalg.inv(H), resamples


def quantization_noise(H, p, C, sigma2: float):
    """Per-RRH quantization noise variance; infinite where C_i = 0."""
    C = np.asarray(C, dtype=float)
    if np.any(C < 0):
        raise ValueError("fronthaul capacity must be nonnegative")
    received = np.einsum("...ij,...j->...i", np.abs(H) ** 2, np.asarray(p, dtype=float))
    with np.errstate(divide="ignore", over="ignore"):
        return (received + sigma2) / np.expm1(C * np.log(2.0))


def rates_from_squares(H2, S2, C, p, sigma2: float, W: float):
    """Rates from precomputed |H|^2 and |S|^2; the simulator's hot path.

    Channel arrays may carry fewer leading axes than C and p (they broadcast).
    """
    p = np.asarray(p, dtype=float)
    received = np.einsum("...ij,...j->...i", H2, p)
    with np.errstate(divide="ignore", over="ignore"):
        N = (received + sigma2) / np.expm1(np.asarray(C, float) * np.log(2.0))
    noise = N[..., None, :] + sigma2
    with np.errstate(invalid="ignore"):
        terms = np.where(S2 > 0, S2 * noise, 0.0)
    denom = terms.sum(axis=-1)
    with np.errstate(divide="ignore"):
        snr = np.where(np.isinf(denom), 0.0, p / denom)
    return 0.5 * W * np.log2(1.0 + snr)


def _rates_from(S, N, p, sigma2, W):
    S2 = np.abs(S) ** 2
    noise = np.asarray(N, dtype=float)[..., None, :] + sigma2
    with np.errstate(invalid="ignore"):
        terms = np.where(S2 > 0, S2 * noise, 0.0)
    denom = terms.sum(axis=-1)
    with np.errstate(divide="ignore"):
        snr = np.where(np.isinf(denom), 0.0, np.asarray(p, dtype=float) / denom)
    return 0.5 * W * np.log2(1.0 + snr)


def rates(channel: ChannelRealization, allocation: Allocation, config: ClusterConfig):
    """End-to-end zero-forcing rates in bits/sec.

    The effective noise for user i sums |S_ij|^2 (N_j + sigma^2) over all RRHs j.
    """
    p = config.p0 + allocation.p_d
    N = quantization_noise(channel.H, p, allocation.C, config.sigma2)
    return _rates_from(channel.S, N, p, config.sigma2, config.W)


def rates_arrays(H, S, C, p, sigma2: float, W: float):
    """Array form of :func:`rates` for the batched simulator (p is total power)."""
    N = quantization_noise(H, p, C, sigma2)
    return _rates_from(S, N, p, sigma2, W)


def rate_single_user(h_ii, C_i, p_i, sigma2: float, W: float):
    """Rate of a user decoded without cross-links (S_ii = 1/h_ii)."""
    g = np.abs(np.asarray(h_ii)) ** 2
    C_i = np.asarray(C_i, dtype=float)
    if np.any(C_i < 0):
        raise ValueError("fronthaul capacity must be nonnegative")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        N = (np.asarray(p_i) * g + sigma2) / np.expm1(C_i * np.log(2.0))
        snr = np.asarray(p_i) * g / (N + sigma2)
    out = 0.5 * W * np.log2(1.0 + np.where(C_i > 0, snr, 0.0))
    return out if np.ndim(out) else float(out)
