"""Queue dynamics, Poisson arrivals and delay/constraint accounting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def queue_step(Q, R, A, tau: float):
    """One slot of backlog evolution: drain R*tau bits, then add the arrivals."""
    return np.maximum(np.asarray(Q, float) - np.asarray(R, float) * tau, 0.0) + A


def sample_arrivals(lam, tau: float, rng: np.random.Generator, size=None):
    """Poisson arrivals in bits with per-slot mean lam*tau (lam in bits/sec)."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("arrival rates must be nonnegative")
    return rng.poisson(lam * tau, size=size).astype(float)


@dataclass
class Trace:
    """Per-slot records for one trial; arrays have shape (T, n).

    ``Q[t]`` is the backlog seen by the allocator in slot t (before service).
    """

    Q: np.ndarray
    R: np.ndarray
    C: np.ndarray
    p_d: np.ndarray
    A: np.ndarray
    tau: float

    def __post_init__(self):
        shapes = {a.shape for a in (self.Q, self.R, self.C, self.p_d, self.A)}
        if len(shapes) != 1:
            raise ValueError(f"trace arrays disagree in shape: {shapes}")

    @property
    def T(self) -> int:
        return self.Q.shape[0]

    @property
    def n(self) -> int:
        return self.Q.shape[1]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "user", "Q_bits", "R_bps", "C_bpshz", "p_d_watts", "A_bits"])
            for t in range(self.T):
                for i in range(self.n):
                    w.writerow([t, i, repr(float(self.Q[t, i])), repr(float(self.R[t, i])),
                                repr(float(self.C[t, i])), repr(float(self.p_d[t, i])),
                                repr(float(self.A[t, i]))])
        return path


def _check_lam(lam):
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("delay is undefined for a user with zero arrival rate")
    return lam


def _discount_weights(T: int, mu: float):
    if not 0 < mu < 1:
        raise ValueError("discount mu must lie in (0, 1)")
    return mu ** np.arange(T)


def average_delay(trace: Trace, lam):
    """Little's-law delay per user: mean backlog over lam, in seconds."""
    return trace.Q.mean(axis=0) / _check_lam(lam)


def discounted_delay(trace: Trace, lam, mu: float):
    """Discounted total delay sum_t mu^(t-1) Q(t)/lam per user."""
    w = _discount_weights(trace.T, mu)
    return (w @ trace.Q) / _check_lam(lam)


def constraint_usage(trace: Trace, mu: float | None = None):
    """(capacity, dynamic power) per user: time averages, or discounted sums if mu is given."""
    if mu is None:
        return trace.C.mean(axis=0), trace.p_d.mean(axis=0)
    w = _discount_weights(trace.T, mu)
    return w @ trace.C, w @ trace.p_d


@dataclass
class Metrics:
    """Summary of one trial. Discounted fields are None for average-reward runs."""

    delay: np.ndarray
    capacity: np.ndarray
    power: np.ndarray
    T: int
    unstable: bool = False
    drift_slope: float = 0.0
    discounted_delay: np.ndarray | None = None
    discounted_capacity: np.ndarray | None = None

    @property
    def sum_delay(self) -> float:
        return float(np.sum(self.delay))
