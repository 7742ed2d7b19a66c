"""Probability primitives for absorbing-state (masking) discrete diffusion.

Everything here is a pure function of its inputs.  Categorical distributions
are plain 1-D float64 arrays; the MASK symbol is never part of a token
distribution unless a function says otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Returned by `kl` when q has a zero where p is positive.  It is produced by an
# explicit branch, never by floating overflow.
INF_KL = math.inf

DEFAULT_KL_SMOOTHING = 1e-10

# Cumulative sums like 0.6 + 0.3 land a hair under 0.9.
_NUCLEUS_TOL = 1e-12


@dataclass(frozen=True)
class PosteriorBelief:
    """Reverse-step belief for a masked position: mass on x0 vs. staying MASK."""

    p_x0: float
    p_mask: float
    x0_token: int


@dataclass(frozen=True)
class NoiseSchedule:
    """Survival probabilities ``alphas[t]`` for t = 0..T, with ``alphas[0] == 1``."""

    alphas: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        if a.ndim != 1 or a.size < 1:
            raise ValueError("alphas must be a non-empty vector")
        if a[0] != 1.0:
            raise ValueError("alphas[0] must equal 1")
        if np.any(np.diff(a) > 0):
            raise ValueError("alphas must be non-increasing")
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("alphas must lie in [0, 1]")
        object.__setattr__(self, "alphas", a)

    @property
    def T(self) -> int:
        return self.alphas.size - 1

    def __getitem__(self, t: int) -> float:
        return float(self.alphas[t])

    def betas(self) -> np.ndarray:
        """Per-step masking probabilities recovered from the running product."""
        prev, cur = self.alphas[:-1], self.alphas[1:]
        out = np.ones_like(cur)
        alive = prev > 0
        out[alive] = 1.0 - cur[alive] / prev[alive]
        return out


@dataclass(frozen=True)
class NucleusResult:
    support: np.ndarray  # token ids, probability-descending
    renorm_probs: np.ndarray  # aligned with `support`, sums to 1


def schedule_from_betas(betas, T: int | None = None) -> NoiseSchedule:
    """Build the cumulative survival schedule ``alpha*_t = prod_{s<=t} (1 - beta_s)``."""
    b = np.asarray(betas, dtype=np.float64).reshape(-1)
    if T is not None and T != b.size:
        raise ValueError(f"expected {T} betas, got {b.size}")
    if np.any(~np.isfinite(b)) or np.any(b < 0) or np.any(b > 1):
        raise ValueError("every beta must lie in [0, 1]")
    alphas = np.empty(b.size + 1)
    alphas[0] = 1.0
    alphas[1:] = np.cumprod(1.0 - b)
    return NoiseSchedule(alphas)


def linear_schedule(T: int) -> NoiseSchedule:
    """alpha*_t = 1 - t/T, the usual masked-diffusion training schedule."""
    if T < 1:
        raise ValueError("T must be >= 1")
    return NoiseSchedule(1.0 - np.arange(T + 1) / T)


def forward_mask(x0, t: int, schedule: NoiseSchedule, rng: np.random.Generator,
                 mask_id: int, maskable=None) -> np.ndarray:
    """Corrupt ``x0`` to timestep ``t``: each position survives w.p. alpha*_t.

    ``maskable`` optionally restricts corruption to a boolean subset of
    positions (e.g. never mask the prompt).  Works on any array shape.
    """
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [0, {schedule.T}]")
    x0 = np.asarray(x0)
    keep = rng.random(x0.shape) < schedule[t]
    if maskable is not None:
        keep |= ~np.asarray(maskable, dtype=bool)
    return np.where(keep, x0, mask_id)


def forward_step(x_prev, beta: float, rng: np.random.Generator, mask_id: int) -> np.ndarray:
    """One transition of the absorbing chain: unmasked tokens mask w.p. ``beta``."""
    x_prev = np.asarray(x_prev)
    hit = rng.random(x_prev.shape) < beta
    return np.where(hit, mask_id, x_prev)


def true_posterior(alpha_prev: float, alpha_cur: float, x0_token: int) -> PosteriorBelief:
    """q*(x_{t-1} | x_t = MASK, x0) for the absorbing process, by Bayes' rule."""
    if not (0.0 <= alpha_cur <= 1.0 and 0.0 <= alpha_prev <= 1.0):
        raise ValueError("survival probabilities must lie in [0, 1]")
    if alpha_cur >= 1.0:
        raise ValueError("alpha_cur = 1: the position cannot be masked at t")
    if alpha_prev < alpha_cur:
        raise ValueError("non-monotone schedule: alpha_prev < alpha_cur")
    denom = 1.0 - alpha_cur
    p_mask = (1.0 - alpha_prev) / denom
    # Derive p_x0 as the complement so the pair sums to 1 exactly.
    return PosteriorBelief(p_x0=1.0 - p_mask, p_mask=p_mask, x0_token=int(x0_token))


def entropy(p) -> float:
    """Shannon entropy in nats with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(max(-np.sum(nz * np.log(nz)), 0.0))


def entropy_rows(P) -> np.ndarray:
    """Row-wise entropy of a stack of categoricals."""
    P = np.asarray(P, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=-1), 0.0)


def normalized_entropy(nucleus: NucleusResult) -> float:
    """Entropy of the renormalised nucleus divided by log of its size, in [0, 1]."""
    n = nucleus.support.size
    if n == 0:
        raise ValueError("empty nucleus")
    if n == 1:
        return 0.0
    h = entropy(nucleus.renorm_probs) / math.log(n)
    return float(min(max(h, 0.0), 1.0))


def vocab_normalized_entropy(p) -> float:
    """Full-vocabulary entropy divided by log V (the alternative normalisation)."""
    p = np.asarray(p, dtype=np.float64)
    if p.size <= 1:
        return 0.0
    return float(min(max(entropy(p) / math.log(p.size), 0.0), 1.0))


def kl(p, q, smoothing: float = 0.0) -> float:
    """KL(p || q) in nats.

    With ``smoothing == 0`` the result is exact and `INF_KL` is returned when q
    is zero somewhere p is positive.  With ``smoothing > 0`` both vectors get
    ``smoothing`` added and are renormalised first.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    if smoothing > 0:
        p = (p + smoothing) / (p + smoothing).sum()
        q = (q + smoothing) / (q + smoothing).sum()
    pos = p > 0
    if np.any(q[pos] <= 0):
        return INF_KL
    val = float(np.sum(p[pos] * (np.log(p[pos]) - np.log(q[pos]))))
    return max(val, 0.0)


def kl_rows(P, Q, smoothing: float = DEFAULT_KL_SMOOTHING) -> np.ndarray:
    """Row-wise smoothed KL(P[i] || Q[i]); smoothing must be positive."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError(f"dimension mismatch: {P.shape} vs {Q.shape}")
    if smoothing <= 0:
        return np.array([kl(p, q, 0.0) for p, q in zip(P, Q)])
    P = (P + smoothing) / (P + smoothing).sum(axis=-1, keepdims=True)
    Q = (Q + smoothing) / (Q + smoothing).sum(axis=-1, keepdims=True)
    return np.maximum(np.sum(P * (np.log(P) - np.log(Q)), axis=-1), 0.0)


def top_p_nucleus(p, p_thresh: float) -> NucleusResult:
    """Smallest probability-descending prefix whose mass reaches ``p_thresh``.

    Ties on probability are broken by ascending token id.  Mass is measured
    on ``p`` as given, so a sub-stochastic vector (a distribution restricted
    to an earlier nucleus) truncates to the same prefix again.
    """
    if not 0.0 < p_thresh <= 1.0:
        raise ValueError("p_thresh must lie in (0, 1]")
    p = np.asarray(p, dtype=np.float64)
    n_pos = int(np.count_nonzero(p > 0))
    if n_pos == 0:
        raise ValueError("distribution has no positive mass")
    order = np.lexsort((np.arange(p.size), -p))
    if p_thresh >= 1.0:
        n = n_pos
    else:
        csum = np.cumsum(p[order])
        hit = np.nonzero(csum >= p_thresh - _NUCLEUS_TOL)[0]
        n = int(hit[0]) + 1 if hit.size else n_pos
        n = min(n, n_pos)
    support = order[:n]
    kept = p[support]
    return NucleusResult(support=support, renorm_probs=kept / kept.sum())
