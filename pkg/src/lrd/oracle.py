"""Brute-force ground truth on enumerable instances.

The data distribution is an explicit list of (sequence, probability) pairs,
small enough to enumerate.  Everything is exact; Monte-Carlo only appears in
`validate_reverse_posterior`, which cross-checks the closed-form reverse
posterior by simulating the forward chain.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .denoiser import DenoiserOutput
from .probcore import PosteriorBelief, kl, schedule_from_betas, true_posterior

MAX_SUPPORT = 4096


class InconsistentEvidence(ValueError):
    """The observed tokens have zero probability under the distribution."""


@dataclass(frozen=True)
class EnumerableDistribution:
    sequences: tuple[tuple[int, ...], ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if not self.sequences:
            raise ValueError("empty support")
        if len(self.sequences) > MAX_SUPPORT:
            raise ValueError(f"support of {len(self.sequences)} exceeds the {MAX_SUPPORT} limit")
        if len(self.sequences) != len(self.probs):
            raise ValueError("sequences and probs differ in length")
        if len({len(s) for s in self.sequences}) != 1:
            raise ValueError("all sequences must have the same length")
        if len(set(self.sequences)) != len(self.sequences):
            raise ValueError("sequences must be distinct")
        if any(p <= 0 for p in self.probs):
            raise ValueError("probabilities must be positive")
        if abs(math.fsum(self.probs) - 1.0) > 1e-12:
            raise ValueError("probabilities must sum to 1")

    @classmethod
    def from_pairs(cls, pairs) -> "EnumerableDistribution":
        seqs, probs = zip(*[(tuple(int(t) for t in s), float(p)) for s, p in pairs])
        return cls(tuple(seqs), tuple(probs))

    @property
    def L(self) -> int:
        return len(self.sequences[0])

    def array(self) -> np.ndarray:
        return np.array(self.sequences, dtype=np.int64)

    def to_text(self) -> str:
        return "".join(f"{p!r}\t{' '.join(map(str, s))}\n"
                       for s, p in zip(self.sequences, self.probs))


def load_distribution(path) -> EnumerableDistribution:
    """Read ``probability<TAB>token ids`` lines; blank lines and ``#`` comments skipped."""
    pairs = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                p, toks = line.split("\t")
                pairs.append((toks.split(), float(p)))
            except ValueError as exc:
                raise ValueError(f"{path}:{n}: malformed line {line!r}") from exc
    return EnumerableDistribution.from_pairs(pairs)


def conditioned_support(x_t, dist: EnumerableDistribution, mask_id: int):
    """Support sequences consistent with the unmasked tokens, and their renormalised weights."""
    x_t = np.asarray(x_t)
    seqs = dist.array()
    seen = x_t != mask_id
    ok = np.all(seqs[:, seen] == x_t[seen], axis=1)
    w = np.asarray(dist.probs)[ok]
    if w.sum() <= 0:
        raise InconsistentEvidence(f"no support sequence matches {x_t.tolist()}")
    return seqs[ok], w / w.sum()


def exact_x0_posterior(x_t, dist: EnumerableDistribution, V: int, mask_id: int | None = None) -> np.ndarray:
    """p(x0[i] = v | x_t) for every position, shape (L, V).

    Unmasked positions come out as point masses on the observed token.
    """
    mask_id = V if mask_id is None else mask_id
    seqs, w = conditioned_support(x_t, dist, mask_id)
    out = np.zeros((seqs.shape[1], V))
    for i in range(seqs.shape[1]):
        np.add.at(out[i], seqs[:, i], w)
    return out


@dataclass(frozen=True)
class ApproxPosterior:
    """A point mass (``token``) or a categorical over V tokens plus MASK (last entry)."""

    token: int | None = None
    probs: np.ndarray | None = None

    def __post_init__(self):
        if (self.token is None) == (self.probs is None):
            raise ValueError("give exactly one of token / probs")
        if self.probs is not None:
            p = np.asarray(self.probs, dtype=np.float64)
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError("soft posterior must be a categorical")
            object.__setattr__(self, "probs", p)

    @classmethod
    def hard(cls, token: int) -> "ApproxPosterior":
        return cls(token=int(token))

    @classmethod
    def soft(cls, probs) -> "ApproxPosterior":
        return cls(probs=probs)

    def partition(self, x0_token: int, mask_id: int) -> np.ndarray:
        """Collapse to masses on (x0, MASK, everything else)."""
        if self.token is not None:
            if self.token == x0_token:
                return np.array([1.0, 0.0, 0.0])
            if self.token == mask_id:
                return np.array([0.0, 1.0, 0.0])
            return np.array([0.0, 0.0, 1.0])
        p = self.probs
        on_x0, on_mask = p[x0_token], p[mask_id]
        return np.array([on_x0, on_mask, max(1.0 - on_x0 - on_mask, 0.0)])


def kl_hard_vs_soft(q_star: PosteriorBelief, hard: ApproxPosterior, soft: ApproxPosterior,
                    mask_id: int) -> tuple[float, float]:
    """Unsmoothed KL(q* || hard) and KL(q* || soft) over the {x0, MASK, other} partition.

    A hard guess that puts zero mass where q* is positive returns `INF_KL`.
    """
    q = np.array([q_star.p_x0, q_star.p_mask, 0.0])
    return (kl(q, hard.partition(q_star.x0_token, mask_id), 0.0),
            kl(q, soft.partition(q_star.x0_token, mask_id), 0.0))


def exact_reverse_posterior(alpha_prev: float, alpha_cur: float, x0_token: int) -> PosteriorBelief:
    return true_posterior(alpha_prev, alpha_cur, x0_token)


def validate_reverse_posterior(alpha_prev: float, alpha_cur: float, n_chains: int = 100_000,
                               seed: int = 0) -> dict:
    """Simulate two-step forward chains and compare P(x_{t-1} = x0 | x_t = MASK) to the formula.

    Returns the empirical frequency, the closed form, the binomial standard
    error and whether they agree within 3 of them.
    """
    belief = true_posterior(alpha_prev, alpha_cur, 0)
    rng = np.random.default_rng(seed)
    alive_prev = rng.random(n_chains) < alpha_prev
    # step t masks a surviving token w.p. 1 - alpha_cur / alpha_prev
    keep = alpha_cur / alpha_prev if alpha_prev > 0 else 0.0
    alive_cur = alive_prev & (rng.random(n_chains) < keep)
    masked = ~alive_cur
    n_cond = int(masked.sum())
    freq = float(alive_prev[masked].mean()) if n_cond else float("nan")
    sigma = math.sqrt(belief.p_x0 * belief.p_mask / n_cond) if n_cond else float("nan")
    ok = abs(freq - belief.p_x0) <= 3 * sigma if sigma > 0 else freq == belief.p_x0
    return {"freq": freq, "expected": belief.p_x0, "sigma": sigma, "n_cond": n_cond, "ok": bool(ok)}


# ------------------------------------------------------- full enumeration


def step_matrix(beta: float, V: int) -> np.ndarray:
    """Single-token absorbing transition over V tokens + MASK; rows are from-states."""
    Q = (1.0 - beta) * np.eye(V + 1)
    Q[:, V] += beta
    Q[V, V] = 1.0
    return Q


def _reach_matrices(betas, V: int) -> list[np.ndarray]:
    """R[t] = Q_1 Q_2 ... Q_t as explicit products, R[0] = I."""
    R = [np.eye(V + 1)]
    for b in betas:
        R.append(R[-1] @ step_matrix(b, V))
    return R


def enumerate_reverse_kernel(dist: EnumerableDistribution, betas, V: int, t: int, x_t) -> dict:
    """q(x_{t-1} | x_t) by brute force over x0 and every x_{t-1} in (V + MASK)^L.

    Uses only per-step transition matrices (no closed-form survival
    probabilities); the joint over x_{t-1} is the full outer product of the
    per-position factors.  Returns {x_{t-1} tuple: probability}.
    """
    if not 1 <= t <= len(betas):
        raise ValueError("t must lie in [1, T]")
    R = _reach_matrices(betas, V)
    Qt = step_matrix(betas[t - 1], V)
    x_t = [int(v) for v in x_t]
    joint = np.zeros((V + 1,) * len(x_t))
    for x0, p0 in zip(dist.sequences, dist.probs):
        term = np.array(p0)
        for i, v in enumerate(x_t):
            term = np.multiply.outer(term, R[t - 1][x0[i], :] * Qt[:, v])
        joint += term
    z = joint.sum()
    if z <= 0:
        raise InconsistentEvidence(f"x_t={x_t} has zero probability at t={t}")
    joint /= z
    return {tuple(int(i) for i in idx): float(joint[idx]) for idx in zip(*np.nonzero(joint))}


def formula_reverse_kernel(dist: EnumerableDistribution, betas, V: int, t: int, x_t) -> dict:
    """The same kernel from the x0 posterior and the closed-form per-position reverse step."""
    sched = schedule_from_betas(betas)
    x_t = np.asarray(x_t)
    seqs, w = conditioned_support(x_t, dist, V)
    masked = np.nonzero(x_t == V)[0]
    if (masked.size and sched[t] >= 1.0) or (masked.size < x_t.size and sched[t] <= 0.0):
        raise InconsistentEvidence(f"mask pattern of {x_t.tolist()} impossible at t={t}")
    out: dict = {}
    if masked.size:
        b = true_posterior(sched[t - 1], sched[t], 0)
    for x0, wx in zip(seqs, w):
        # each masked position independently reverts to x0[i] or stays MASK
        for choice in itertools.product((0, 1), repeat=masked.size):
            prev = x_t.copy()
            p = wx
            for i, c in zip(masked, choice):
                if c:
                    prev[i] = x0[i]
                    p *= b.p_x0
                else:
                    p *= b.p_mask
            if p > 0:
                key = tuple(int(v) for v in prev)
                out[key] = out.get(key, 0.0) + p
    return out


def formula_reverse_marginals(dist: EnumerableDistribution, betas, V: int, t: int, x_t) -> np.ndarray:
    """Per-position marginals of q(x_{t-1} | x_t), shape (L, V + 1), MASK last."""
    sched = schedule_from_betas(betas)
    x_t = np.asarray(x_t)
    post = exact_x0_posterior(x_t, dist, V)
    out = np.zeros((x_t.size, V + 1))
    for i, v in enumerate(x_t):
        if v != V:
            out[i, v] = 1.0
        else:
            b = true_posterior(sched[t - 1], sched[t], 0)
            out[i, :V] = b.p_x0 * post[i]
            out[i, V] = b.p_mask
    return out


def kernel_marginals(kernel: dict, L: int, V: int) -> np.ndarray:
    out = np.zeros((L, V + 1))
    for seq, p in kernel.items():
        for i, v in enumerate(seq):
            out[i, v] += p
    return out


# ---------------------------------------------------- tabular denoiser


class TabularDenoiser:
    """Exact denoiser for an enumerable distribution, usable by the sampler.

    Embeddings are one-hot rows over V + 1 symbols and positional vectors are
    zero, so a position reads as a token only if its input equals that row
    exactly; anything else (MASK or a soft mixture) counts as masked.
    """

    def __init__(self, dist: EnumerableDistribution, V: int):
        self.dist = dist
        self.V = V
        self.mask_id = V
        self.table = np.eye(V + 1)
        self.positional = np.zeros((dist.L, V + 1))

    def read_tokens(self, embeddings) -> np.ndarray:
        e = np.asarray(embeddings, dtype=np.float64)
        hits = np.all(e[:, None, :] == self.table[None, :self.V, :], axis=-1)
        return np.where(hits.any(axis=1), hits.argmax(axis=1), self.mask_id)

    def forward(self, embeddings):
        dists = exact_x0_posterior(self.read_tokens(embeddings), self.dist, self.V)
        with np.errstate(divide="ignore"):
            logits = np.log(dists)
        return DenoiserOutput(dists=dists, logits=logits)


def random_instances(seed: int = 0, V_max: int = 4, L_max: int = 3, T_max: int = 4,
                     max_support: int = 6):
    """Every (V, L, T) up to the limits with a random distribution and schedule.

    Schedules include the edge betas 0 and 1.  Yields (dist, betas, V).
    """
    rng = np.random.default_rng(seed)
    for V in range(1, V_max + 1):
        for L in range(1, L_max + 1):
            universe = list(itertools.product(range(V), repeat=L))
            for T in range(1, T_max + 1):
                n = int(rng.integers(1, min(max_support, len(universe)) + 1))
                pick = rng.choice(len(universe), size=n, replace=False)
                w = rng.random(n) + 0.05
                w /= w.sum()
                w[-1] = 1.0 - math.fsum(w[:-1])
                dist = EnumerableDistribution(tuple(universe[i] for i in pick), tuple(w))
                betas = rng.uniform(0.05, 0.95, size=T)
                if T >= 3:
                    betas[rng.integers(T)] = rng.choice([0.0, 1.0])
                yield dist, [float(b) for b in betas], V


def compare_kernels(dist: EnumerableDistribution, betas, V: int) -> list[dict]:
    """Brute-force vs. formula reverse kernels for every t and every x_t pattern."""
    rows = []
    L = dist.L
    for t in range(1, len(betas) + 1):
        for x_t in itertools.product(range(V + 1), repeat=L):
            try:
                brute = enumerate_reverse_kernel(dist, betas, V, t, x_t)
            except InconsistentEvidence:
                brute = None
            try:
                form = formula_reverse_kernel(dist, betas, V, t, x_t)
                marg = formula_reverse_marginals(dist, betas, V, t, x_t)
            except InconsistentEvidence:
                form = marg = None
            if brute is None or form is None:
                rows.append({"t": t, "x_t": x_t, "possible": brute is not None,
                             "agree": (brute is None) == (form is None),
                             "max_err_joint": 0.0, "max_err_marginal": 0.0})
                continue
            keys = set(brute) | set(form)
            ej = max(abs(brute.get(k, 0.0) - form.get(k, 0.0)) for k in keys)
            em = float(np.abs(kernel_marginals(brute, L, V) - marg).max())
            rows.append({"t": t, "x_t": x_t, "possible": True, "agree": True,
                         "max_err_joint": ej, "max_err_marginal": em})
    return rows
