"""Local stability probes for a single self-attention layer near the MASK embedding.

The bound scales as ``c * ||W_V||_2 * ||W_Q W_K^T||_2 * eps**2``; only its
shape in ``eps`` is meaningful, so `calibrate_c` pins ``c`` at the smallest
radius and the remaining radii are compared against the measured ratios.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

PROBE_HEADER = ["epsilon", "bound", "max_ratio", "median_ratio", "n_pairs"]
DEFAULT_EPSILONS = (0.01, 0.05, 0.1, 0.5, 1.0)


@dataclass(frozen=True)
class SpectralEstimate:
    sigma_max: float
    iterations: int
    residual: float


@dataclass(frozen=True)
class LipschitzProbe:
    epsilons: tuple[float, ...] = DEFAULT_EPSILONS
    n_samples: int = 200
    c: float = 1.0

    def __post_init__(self):
        eps = np.asarray(self.epsilons, dtype=float)
        if eps.size == 0 or np.any(eps <= 0) or np.any(np.diff(eps) <= 0):
            raise ValueError("epsilons must be positive and strictly increasing")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")


@dataclass(frozen=True)
class LipschitzMeasurement:
    max_ratio: float
    median_ratio: float
    n_pairs: int


def spectral_norm(M, max_iter: int = 100_000, tol: float = 1e-14, seed: int = 0) -> SpectralEstimate:
    """Largest singular value by power iteration on M^T M from a seeded start."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("expected a matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    if not M.any():
        return SpectralEstimate(0.0, 0, 0.0)
    x = np.random.default_rng(seed).standard_normal(M.shape[1])
    x /= np.linalg.norm(x)
    sigma, residual = 0.0, np.inf
    for it in range(1, max_iter + 1):
        y = M.T @ (M @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            # start vector in the null space; restart from a fresh direction
            x = np.random.default_rng(seed + it).standard_normal(M.shape[1])
            x /= np.linalg.norm(x)
            continue
        x = y / ny
        new = float(np.linalg.norm(M @ x))
        residual = abs(new - sigma)
        sigma = new
        if residual <= tol * max(sigma, 1.0):
            break
    if residual >= 1e-8:
        logger.warning("power iteration stopped at residual %.3g after %d iterations", residual, it)
    return SpectralEstimate(sigma, it, residual)


def lipschitz_bound(model, layer: int, head: int, epsilon: float, c: float = 1.0) -> float:
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    qk, wv = model.spectral_inputs(layer, head)
    return bound_from_norms(spectral_norm(wv).sigma_max, spectral_norm(qk).sigma_max, epsilon, c)


def bound_from_norms(sigma_v: float, sigma_qk: float, epsilon: float, c: float = 1.0) -> float:
    return c * sigma_v * sigma_qk * epsilon ** 2


def _ball(rng, shape, radius):
    """Uniform samples from the radius ball in the last dimension."""
    u = rng.standard_normal(shape)
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    r = rng.random(shape[:-1] + (1,)) ** (1.0 / shape[-1])
    return radius * r * u


def empirical_lipschitz(model, layer: int, epsilon: float, n_samples: int,
                        rng: np.random.Generator, seq_len: int | None = None,
                        center: str = "mask", attention_fn=None) -> LipschitzMeasurement:
    """Output/input difference ratios of one attention layer on pairs inside an eps-ball.

    Each position of both inputs is drawn uniformly from the ball of radius
    ``epsilon`` around the MASK row (or the origin with ``center="origin"``).
    ``attention_fn`` replaces the layer map (used by tests).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    table = model.table
    d = table.shape[1]
    L = seq_len or min(8, model.positional.shape[0])
    base = table[model.mask_id] if center == "mask" else np.zeros(d)
    fn = attention_fn or (lambda x: model.attention(x, layer))
    x = base + _ball(rng, (n_samples, L, d), epsilon)
    y = base + _ball(rng, (n_samples, L, d), epsilon)
    fx, fy = fn(x), fn(y)
    din = np.linalg.norm((x - y).reshape(n_samples, -1), axis=1)
    dout = np.linalg.norm((fx - fy).reshape(n_samples, -1), axis=1)
    keep = din > 0
    ratios = dout[keep] / din[keep]
    if ratios.size == 0:
        return LipschitzMeasurement(0.0, 0.0, 0)
    return LipschitzMeasurement(float(ratios.max()), float(np.median(ratios)), int(ratios.size))


def calibrate_c(max_ratio_at_smallest: float, sigma_v: float, sigma_qk: float,
                epsilon_smallest: float) -> float:
    """The c that makes the bound equal the measured max ratio at the smallest radius."""
    unit = bound_from_norms(sigma_v, sigma_qk, epsilon_smallest, 1.0)
    return max_ratio_at_smallest / unit if unit > 0 else 0.0


def run_probe(model, layer: int, head: int, probe: LipschitzProbe = LipschitzProbe(),
              seed: int = 0, calibrate: bool = True, center: str = "mask") -> list[dict]:
    """Bound and measured ratios over the probe's radius grid.

    Every radius reuses the same random stream, so the grid compares the
    same sample directions at different scales.
    """
    qk, wv = model.spectral_inputs(layer, head)
    s_v, s_qk = spectral_norm(wv).sigma_max, spectral_norm(qk).sigma_max
    meas = [empirical_lipschitz(model, layer, e, probe.n_samples,
                                np.random.default_rng([seed, layer]), center=center)
            for e in probe.epsilons]
    c = probe.c
    if calibrate:
        c = calibrate_c(meas[0].max_ratio, s_v, s_qk, probe.epsilons[0])
    return [{"epsilon": e, "bound": bound_from_norms(s_v, s_qk, e, c),
             "max_ratio": m.max_ratio, "median_ratio": m.median_ratio, "n_pairs": m.n_pairs}
            for e, m in zip(probe.epsilons, meas)]


def probe_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROBE_HEADER)
    for r in rows:
        w.writerow([repr(float(r["epsilon"])), repr(float(r["bound"])),
                    repr(float(r["max_ratio"])), repr(float(r["median_ratio"])), str(r["n_pairs"])])
    return buf.getvalue()


def embedding_norm_stats(table) -> tuple[float, float, float]:
    """(MASK row norm, mean token row norm, their ratio); MASK is the last row."""
    table = np.asarray(table, dtype=np.float64)
    mask_norm = float(np.linalg.norm(table[-1]))
    token_norm = float(np.linalg.norm(table[:-1], axis=1).mean())
    ratio = mask_norm / token_norm if token_norm > 0 else float("inf")
    return mask_norm, token_norm, ratio
