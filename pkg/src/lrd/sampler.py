"""Two-phase soft-embedding decoding for masked diffusion denoisers.

A decode runs in two phases over the generation positions:

* refine: repeated forward passes where every open position is fed a soft
  embedding (a MASK/token mixture weighted by prediction confidence) and
  nothing is committed, until the mean step KL drops under ``tau_refine`` or
  ``T_refine`` passes have run;
* decode: each pass commits the ``k`` lowest-entropy open positions to their
  argmax token and re-embeds the rest softly; it stops once everything is
  committed or, with early stopping, once the mean step KL falls under
  ``tau_decode`` (open positions are then resolved to their argmax).

Any model works that exposes ``table`` ((V + 1, d), MASK last), ``positional``,
``mask_id`` and ``forward(embeddings).dists``.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .probcore import (
    DEFAULT_KL_SMOOTHING,
    entropy_rows,
    kl_rows,
    normalized_entropy,
    top_p_nucleus,
    vocab_normalized_entropy,
)

REFINE, DECODE, DONE = "refine", "decode", "done"
TRACE_HEADER = ["step", "phase", "mean_kl", "n_committed", "min_open_entropy", "wallclock_ns"]


class NonConvergenceError(RuntimeError):
    """Raised when ``max_steps`` runs out with open positions and no early stop."""


@dataclass(frozen=True)
class SamplerConfig:
    r_f: float = 0.15
    top_p: float = 0.9
    tau_refine: float = 0.1
    tau_decode: float = 0.1
    T_refine: int = 20
    k: int = 1
    block_size: int | None = None  # None decodes the whole generation as one block
    kl_smoothing: float = DEFAULT_KL_SMOOTHING
    max_steps: int = 10_000
    early_stop: bool = True
    # "open": average the step KL over open positions; "all": over every generated position
    kl_average: str = "open"
    # "nucleus": entropy of the renormalised nucleus / log|nucleus|; "vocab": H(p) / log V
    entropy_norm: str = "nucleus"
    # refinement passes inserted before every commit: 0, a count, or "auto"
    refine_per_commit: int | str = 0
    record_time: bool = False

    def __post_init__(self):
        if not 0.0 <= self.r_f <= 1.0:
            raise ValueError("r_f must lie in [0, 1]")
        if not 0.0 <= self.top_p <= 1.0:
            raise ValueError("top_p must lie in [0, 1]")
        if self.tau_refine < 0 or self.tau_decode < 0:
            raise ValueError("thresholds must be >= 0")
        if self.T_refine < 0 or self.k < 1 or self.max_steps < 1:
            raise ValueError("T_refine >= 0, k >= 1 and max_steps >= 1 required")
        if self.block_size is not None and self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.kl_smoothing < 0:
            raise ValueError("kl_smoothing must be >= 0")
        if self.kl_average not in ("open", "all"):
            raise ValueError("kl_average must be 'open' or 'all'")
        if self.entropy_norm not in ("nucleus", "vocab"):
            raise ValueError("entropy_norm must be 'nucleus' or 'vocab'")
        rpc = self.refine_per_commit
        if not (rpc == "auto" or (isinstance(rpc, int) and rpc >= 0)):
            raise ValueError("refine_per_commit must be a count >= 0 or 'auto'")


@dataclass
class MixResult:
    embedding: np.ndarray
    alpha: float
    nucleus_size: int


def soft_embedding(dist, table: np.ndarray, r_f: float, top_p: float,
                   entropy_norm: str = "nucleus") -> MixResult:
    """Mix the MASK row with the nucleus-expected token row, weight r_f * (1 - H_norm)."""
    e_mask = table[-1]
    if top_p <= 0.0 or r_f <= 0.0:
        return MixResult(e_mask.copy(), 0.0, 0 if top_p <= 0.0 else -1)
    nuc = top_p_nucleus(dist, top_p)
    if entropy_norm == "vocab":
        h = vocab_normalized_entropy(dist)
    else:
        h = normalized_entropy(nuc)
    alpha = r_f * (1.0 - h)
    if alpha == 0.0:
        return MixResult(e_mask.copy(), 0.0, nuc.support.size)
    expected = nuc.renorm_probs @ table[nuc.support]
    return MixResult((1.0 - alpha) * e_mask + alpha * expected, alpha, nuc.support.size)


def mix_embedding(dist, table: np.ndarray, r_f: float, top_p: float,
                  entropy_norm: str = "nucleus") -> np.ndarray:
    return soft_embedding(dist, table, r_f, top_p, entropy_norm).embedding


def mean_step_kl(prev, cur, smoothing: float = DEFAULT_KL_SMOOTHING,
                 positions=None, denominator: int | None = None) -> float:
    """Mean of KL(cur[i] || prev[i]) over ``positions`` (all rows by default).

    ``denominator`` overrides the count used for averaging.  No positions
    gives 0.
    """
    prev = np.asarray(prev, dtype=np.float64)
    cur = np.asarray(cur, dtype=np.float64)
    if prev.shape != cur.shape:
        raise ValueError("prev and cur must have the same shape")
    if positions is None:
        positions = np.arange(cur.shape[0])
    positions = np.asarray(positions, dtype=int)
    n = positions.size if denominator is None else denominator
    if positions.size == 0 or n == 0:
        return 0.0
    return float(kl_rows(cur[positions], prev[positions], smoothing).sum() / n)


def select_commits(entropies, k: int, positions=None) -> np.ndarray:
    """The ``k`` positions of lowest entropy, ties broken by ascending position."""
    H = np.asarray(entropies, dtype=np.float64)
    if H.size == 0:
        raise ValueError("no open positions")
    if positions is None:
        positions = np.arange(H.size)
    positions = np.asarray(positions)
    order = np.lexsort((positions, H))
    return positions[order[:k]]


@dataclass
class TraceRecord:
    step: int
    phase: str
    mean_kl: float | None
    n_committed: int
    min_open_entropy: float | None
    wallclock_ns: int


@dataclass
class DecodeTrace:
    records: list[TraceRecord] = field(default_factory=list)
    argmaxes: list[np.ndarray] = field(default_factory=list)
    alphas: list[float] = field(default_factory=list)
    nucleus_fractions: list[float] = field(default_factory=list)
    support_fractions: list[float] = field(default_factory=list)
    commit_order: list[int] = field(default_factory=list)
    final_dists: np.ndarray | None = None
    final_beliefs: np.ndarray | None = None
    early_stopped: bool = False
    forward_passes: int = 0
    t_star: int | None = None

    def phase_kls(self, phase: str) -> list[float | None]:
        return [r.mean_kl for r in self.records if r.phase == phase]

    def csv_rows(self) -> list[list[str]]:
        rows = []
        for r in self.records:
            rows.append([
                str(r.step), r.phase,
                "" if r.mean_kl is None else repr(float(r.mean_kl)),
                str(r.n_committed),
                "" if r.min_open_entropy is None else repr(float(r.min_open_entropy)),
                str(r.wallclock_ns),
            ])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        w.writerows(self.csv_rows())
        return buf.getvalue()


@dataclass
class SamplerState:
    """Per-position decode state.

    ``tokens`` holds the committed id or MASK; ``soft`` holds the content
    embedding of each open position (positional vectors are added at forward
    time); ``active`` marks the positions this decode may commit.
    """

    tokens: np.ndarray
    soft: np.ndarray
    active: np.ndarray
    mask_id: int
    gen_start: int = 0
    last_dist: np.ndarray | None = None
    phase: str = REFINE
    step: int = 0
    t_star: int | None = None
    _t0: int = 0

    @classmethod
    def start(cls, model, prompt, gen_len: int) -> "SamplerState":
        prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
        L = prompt.size + gen_len
        tokens = np.concatenate([prompt, np.full(gen_len, model.mask_id, dtype=np.int64)])
        soft = np.tile(model.table[model.mask_id], (L, 1))
        active = np.zeros(L, dtype=bool)
        active[prompt.size:] = True
        return cls(tokens=tokens, soft=soft, active=active, mask_id=model.mask_id,
                   gen_start=prompt.size, _t0=time.perf_counter_ns())

    @property
    def open_positions(self) -> np.ndarray:
        return np.nonzero(self.active & (self.tokens == self.mask_id))[0]

    @property
    def n_committed(self) -> int:
        return int(np.count_nonzero(self.tokens[self.gen_start:] != self.mask_id))

    def inputs(self, model) -> np.ndarray:
        emb = model.table[self.tokens].copy()
        opn = self.open_positions
        emb[opn] = self.soft[opn]
        return emb + model.positional[: self.tokens.size]


# ------------------------------------------------------------------ engine


def _forward(model, state: SamplerState, trace: DecodeTrace) -> np.ndarray:
    dists = np.asarray(model.forward(state.inputs(model)).dists, dtype=np.float64)
    state.step += 1
    trace.forward_passes += 1
    trace.argmaxes.append(dists.argmax(axis=-1))
    return dists


def _step_kl(prev, cur, state: SamplerState, config: SamplerConfig) -> float | None:
    if prev is None:
        return None
    opn = state.open_positions
    denom = None
    if config.kl_average == "all":
        denom = int(np.count_nonzero(state.active))
    return mean_step_kl(prev, cur, config.kl_smoothing, opn, denom)


def _record(trace: DecodeTrace, state: SamplerState, config: SamplerConfig, phase: str,
            kl: float | None, dists: np.ndarray | None) -> None:
    opn = state.open_positions
    min_h = None
    if dists is not None and opn.size:
        min_h = float(entropy_rows(dists[opn]).min())
    wall = time.perf_counter_ns() - state._t0 if config.record_time else 0
    trace.records.append(TraceRecord(state.step, phase, kl, state.n_committed, min_h, wall))


def _rebuild(model, state: SamplerState, dists: np.ndarray, config: SamplerConfig,
             trace: DecodeTrace) -> None:
    table = model.table
    V = table.shape[0] - 1
    for i in state.open_positions:
        mix = soft_embedding(dists[i], table, config.r_f, config.top_p, config.entropy_norm)
        state.soft[i] = mix.embedding
        trace.alphas.append(mix.alpha)
        size = mix.nucleus_size
        if size < 0:  # r_f == 0 skipped the nucleus; measure it anyway for sweeps
            size = top_p_nucleus(dists[i], config.top_p).support.size
        trace.nucleus_fractions.append(size / V)
        trace.support_fractions.append(np.count_nonzero(dists[i] > 0) / V)
    state.last_dist = dists


def _beliefs(state: SamplerState, dists: np.ndarray) -> np.ndarray:
    """Model dists with committed positions clamped to a point mass on their token."""
    b = dists.copy()
    done = np.nonzero(state.tokens != state.mask_id)[0]
    b[done] = 0.0
    b[done, state.tokens[done]] = 1.0
    return b


def phase1_refine(model, state: SamplerState, config: SamplerConfig,
                  trace: DecodeTrace | None = None) -> tuple[SamplerState, DecodeTrace]:
    """Soft refinement without commits; stops on KL < tau_refine or after T_refine passes."""
    trace = DecodeTrace() if trace is None else trace
    state.phase = REFINE
    prev = None
    for _ in range(config.T_refine):
        if state.open_positions.size == 0:
            break
        dists = _forward(model, state, trace)
        kl = _step_kl(prev, dists, state, config)
        _record(trace, state, config, REFINE, kl, dists)
        _rebuild(model, state, dists, config, trace)
        prev = dists
        if kl is not None and kl < config.tau_refine:
            break
    state.t_star = state.step
    trace.t_star = state.step
    return state, trace


def _refine_before_commit(model, state, config, trace, prev):
    rpc = config.refine_per_commit
    n = config.T_refine if rpc == "auto" else rpc
    for _ in range(n):
        if state.step >= config.max_steps:
            break
        dists = _forward(model, state, trace)
        kl = _step_kl(prev, dists, state, config)
        _record(trace, state, config, DECODE, kl, dists)
        _rebuild(model, state, dists, config, trace)
        prev = dists
        if rpc == "auto" and kl is not None and kl < config.tau_refine:
            break
    return prev


def phase2_decode(model, state: SamplerState, config: SamplerConfig,
                  trace: DecodeTrace | None = None):
    """Commit-and-feed-back loop.  Returns (generated tokens, state, trace)."""
    trace = DecodeTrace() if trace is None else trace
    state.phase = DECODE
    prev = None
    dists = state.last_dist
    while state.open_positions.size:
        if config.refine_per_commit:
            prev = _refine_before_commit(model, state, config, trace, prev)
        if state.step >= config.max_steps:
            if not config.early_stop or dists is None:
                raise NonConvergenceError(
                    f"max_steps={config.max_steps} reached with "
                    f"{state.open_positions.size} open positions")
            _finalize(state, dists, trace)
            break
        dists = _forward(model, state, trace)
        kl = _step_kl(prev, dists, state, config)
        _record(trace, state, config, DECODE, kl, dists)
        if config.early_stop and kl is not None and kl < config.tau_decode:
            _finalize(state, dists, trace)
            break
        opn = state.open_positions
        picks = select_commits(entropy_rows(dists[opn]), config.k, opn)
        for j in picks:
            state.tokens[j] = int(dists[j].argmax())
            trace.commit_order.append(int(j))
        _rebuild(model, state, dists, config, trace)
        prev = dists
    state.phase = DONE
    if dists is not None:
        trace.final_dists = dists
        trace.final_beliefs = _beliefs(state, dists)
    _record(trace, state, config, DONE, None, None)
    return state.tokens[state.active].copy(), state, trace


def _finalize(state: SamplerState, dists: np.ndarray, trace: DecodeTrace) -> None:
    opn = state.open_positions
    state.tokens[opn] = dists[opn].argmax(axis=-1)
    trace.commit_order.extend(int(j) for j in opn)
    trace.early_stopped = True


def decode_lrd(model, prompt, gen_len: int, config: SamplerConfig = SamplerConfig()):
    """Two-phase latent refinement decode.  Returns (generated tokens, trace)."""
    if gen_len < 0:
        raise ValueError("gen_len must be >= 0")
    if config.block_size is not None and config.block_size < gen_len:
        tokens, traces = decode_semi_ar(model, prompt, gen_len, config)
        return tokens, _merge_traces(traces)
    state = SamplerState.start(model, prompt, gen_len)
    state, trace = phase1_refine(model, state, config)
    tokens, state, trace = phase2_decode(model, state, config, trace)
    return tokens, trace


def decode_baseline(model, prompt, gen_len: int, k: int = 1, record_time: bool = False):
    """Hard assignment: commit the k lowest-entropy positions, reset the rest to MASK."""
    if gen_len < 0:
        raise ValueError("gen_len must be >= 0")
    config = SamplerConfig(k=k, record_time=record_time)
    state = SamplerState.start(model, prompt, gen_len)
    state.phase = DECODE
    trace = DecodeTrace()
    e_mask = model.table[model.mask_id]
    dists = None
    while state.open_positions.size:
        dists = _forward(model, state, trace)
        _record(trace, state, config, DECODE, None, dists)
        opn = state.open_positions
        for j in select_commits(entropy_rows(dists[opn]), k, opn):
            state.tokens[j] = int(dists[j].argmax())
            trace.commit_order.append(int(j))
        state.soft[state.open_positions] = e_mask
    if dists is not None:
        trace.final_dists = dists
        trace.final_beliefs = _beliefs(state, dists)
    state.phase = DONE
    _record(trace, state, config, DONE, None, None)
    return state.tokens[state.active].copy(), trace


def decode_semi_ar(model, prompt, gen_len: int, config: SamplerConfig = SamplerConfig()):
    """Blockwise left-to-right decode; each block gets its own refine + decode phases.

    Later blocks stay pure MASK while an earlier block is decoded.  Returns
    (generated tokens, list of per-block traces).
    """
    if gen_len < 0:
        raise ValueError("gen_len must be >= 0")
    size = gen_len if config.block_size is None else config.block_size
    if size < 1:
        raise ValueError("block_size must be >= 1")
    state = SamplerState.start(model, prompt, gen_len)
    start = np.asarray(prompt).size
    traces = []
    for b0 in range(0, gen_len, size):
        state.active[:] = False
        state.active[start + b0:start + min(b0 + size, gen_len)] = True
        state.step = 0
        state.last_dist = None
        state._t0 = time.perf_counter_ns()
        state, trace = phase1_refine(model, state, config)
        _, state, trace = phase2_decode(model, state, config, trace)
        traces.append(trace)
    return state.tokens[start:].copy(), traces


def _merge_traces(traces: list[DecodeTrace]) -> DecodeTrace:
    out = DecodeTrace()
    offset = 0
    for t in traces:
        for r in t.records:
            out.records.append(TraceRecord(r.step + offset, r.phase, r.mean_kl,
                                           r.n_committed, r.min_open_entropy, r.wallclock_ns))
        out.argmaxes += t.argmaxes
        out.alphas += t.alphas
        out.nucleus_fractions += t.nucleus_fractions
        out.support_fractions += t.support_fractions
        out.commit_order += t.commit_order
        out.forward_passes += t.forward_passes
        out.early_stopped |= t.early_stopped
        offset += t.forward_passes
    if traces:
        out.final_dists = traces[-1].final_dists
        out.final_beliefs = traces[-1].final_beliefs
        out.t_star = traces[0].t_star
    return out


def min_passes_bound(config: SamplerConfig, gen_len: int) -> int:
    """Step budget that guarantees termination with early stopping off."""
    return config.T_refine + math.ceil(gen_len / config.k)
