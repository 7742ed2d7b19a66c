"""Training, benchmarking, ablations, sweeps and KL-dynamics exports.

Speed is reported as denoiser forward passes (the primary, platform-free
measure) and optionally wall-clock.  Decoding is temperature-0 and needs no
randomness; all randomness lives in corpus generation and training.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from ..denoiser import Denoiser, MomentumSGD, train_step
from ..probcore import linear_schedule, top_p_nucleus
from ..sampler import DecodeTrace, SamplerConfig, decode_baseline, decode_lrd, REFINE, DECODE
from .config import RunConfig
from .tasks import as_sequences, before_eos, generate_task

logger = logging.getLogger(__name__)

BENCH_HEADER = ["method", "exact_match", "mean_forward_passes", "mean_wallclock_ns",
                "e_token", "n_sequences"]
SWEEP_HEADER = ["param", "value", "exact_match", "mean_forward_passes",
                "nucleus_fraction", "support_fraction", "run_nucleus_fraction"]
R_F_GRID = (0.0, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 0.75, 1.0)
TOP_P_GRID = (0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1.0)

BASELINE = "baseline"


@dataclass
class BenchResult:
    method: str
    exact_match: float
    mean_forward_passes: float
    mean_wallclock: float
    e_token: float
    n_sequences: int


def derive_seed(master: int, *keys: int) -> int:
    """A stable child seed for (master, keys...)."""
    return int(np.random.SeedSequence([master, *keys]).generate_state(1)[0])


def train_model(cfg: RunConfig, seed: int, log_every: int = 0):
    """Train a fresh denoiser on ``cfg.task``; returns (model, per-step losses)."""
    task = cfg.task_spec(derive_seed(seed, 0))
    corpus = generate_task(task, cfg.n_train, cfg.L_max)
    data = as_sequences(corpus)
    maskable = np.zeros(data.shape[1], dtype=bool)
    maskable[task.L:] = True  # prompts are never corrupted
    model = Denoiser.init(cfg.denoiser_config(), seed=derive_seed(seed, 1))
    opt = MomentumSGD(lr=cfg.lr, momentum=cfg.momentum, clip=cfg.clip)
    sched = linear_schedule(cfg.T_train)
    rng = np.random.default_rng(derive_seed(seed, 2))
    losses = []
    for it in range(cfg.steps):
        batch = data[rng.integers(0, data.shape[0], size=cfg.batch_size)]
        loss, _ = train_step(model, batch, sched, rng, opt, maskable[None])
        losses.append(loss)
        if log_every and it % log_every == 0:
            logger.info("step %d loss %.5f", it, loss)
    return model, losses


def eval_corpus(cfg: RunConfig, seed: int, n: int | None = None):
    return generate_task(cfg.task_spec(derive_seed(seed, 3)), n or cfg.n_eval, cfg.L_max)


def exact_match(generated, target, eos: int) -> bool:
    return np.array_equal(before_eos(generated, eos), before_eos(target, eos))


def e_token(generated, eos: int) -> int:
    return int(before_eos(generated, eos).size)


def decode_one(model, prompt, gen_len: int, config: SamplerConfig | None, k: int = 1,
               record_time: bool = False):
    if config is None:
        return decode_baseline(model, prompt, gen_len, k, record_time)
    return decode_lrd(model, prompt, gen_len, config)


def run_method(model, corpus, label: str, config: SamplerConfig | None, eos: int, k: int = 1,
               record_time: bool = False):
    """Decode every (prompt, target) pair; returns (BenchResult, outputs, traces)."""
    outs, traces = [], []
    for prompt, target in corpus:
        toks, trace = decode_one(model, prompt, len(target), config, k, record_time)
        outs.append(toks)
        traces.append(trace)
    n = len(corpus)
    em = sum(exact_match(o, t, eos) for o, (_, t) in zip(outs, corpus)) / n
    passes = float(np.mean([t.forward_passes for t in traces]))
    wall = float(np.mean([t.records[-1].wallclock_ns for t in traces]))
    et = float(np.mean([e_token(o, eos) for o in outs]))
    return BenchResult(label, em, passes, wall, et, n), outs, traces


def run_benchmark(model, corpus, methods, eos: int, k: int = 1, record_time: bool = False):
    """Run each ``(label, SamplerConfig or None)`` on the same corpus.

    ``None`` selects the hard-assignment baseline.  Returns
    ``(results, {label: traces})``.
    """
    results, all_traces = [], {}
    for label, config in methods:
        res, _, traces = run_method(model, corpus, label, config, eos, k, record_time)
        results.append(res)
        all_traces[label] = traces
    return results, all_traces


def ablation_methods(base: SamplerConfig) -> list[tuple[str, SamplerConfig | None]]:
    methods = [
        (BASELINE, None),
        ("full", base),
        ("w/o latent refinement", replace(base, T_refine=0)),
        ("w/o mix embed", replace(base, r_f=0.0)),
        ("w/o early stop", replace(base, early_stop=False)),
    ]
    for n in range(1, 6):
        methods.append((f"LFx{n}", replace(base, T_refine=0, refine_per_commit=n)))
    methods.append(("Auto", replace(base, refine_per_commit="auto")))
    return methods


def run_ablations(model, corpus, base: SamplerConfig, eos: int, record_time: bool = False):
    return run_benchmark(model, corpus, ablation_methods(base), eos, base.k, record_time)


def _reference_dists(model, corpus):
    """First-pass (all-MASK) predictions at generation positions: shared by every config."""
    out = []
    for prompt, target in corpus:
        toks = np.concatenate([prompt, np.full(len(target), model.mask_id)])
        d = model.forward(model.embed_tokens(toks)).dists
        out.extend(d[len(prompt):])
    return np.array(out)


def nucleus_fraction(dists, top_p: float) -> float:
    V = dists.shape[-1]
    if top_p <= 0:
        return 0.0
    return float(np.mean([top_p_nucleus(p, top_p).support.size / V for p in dists]))


def run_sweeps(model, corpus, base: SamplerConfig, eos: int,
               r_f_grid=R_F_GRID, top_p_grid=TOP_P_GRID) -> list[dict]:
    """Accuracy and nucleus size over r_f and top_p grids.

    ``nucleus_fraction`` is measured on the shared first-pass predictions so
    grid points are comparable; ``run_nucleus_fraction`` averages over the
    mixtures actually built during each run.
    """
    ref = _reference_dists(model, corpus)
    support = float(np.mean(np.count_nonzero(ref > 0, axis=1) / ref.shape[1]))
    rows = []
    for param, grid in (("r_f", r_f_grid), ("top_p", top_p_grid)):
        for v in grid:
            cfg = replace(base, **{param: float(v)})
            res, _, traces = run_method(model, corpus, f"{param}={v}", cfg, eos, base.k)
            fracs = [f for t in traces for f in t.nucleus_fractions]
            rows.append({
                "param": param, "value": float(v), "exact_match": res.exact_match,
                "mean_forward_passes": res.mean_forward_passes,
                "nucleus_fraction": nucleus_fraction(ref, cfg.top_p),
                "support_fraction": support,
                "run_nucleus_fraction": float(np.mean(fracs)) if fracs else 0.0,
            })
    return rows


# ------------------------------------------------------------ KL dynamics


def _fixed_refine_len(traces: list[DecodeTrace]) -> int:
    lens = {sum(r.phase == REFINE for r in t.records) for t in traces}
    if len(lens) != 1:
        raise ValueError(f"traces mix refinement lengths {sorted(lens)}; "
                         "export needs a fixed T_refine (tau_refine = 0)")
    return lens.pop()


def kl_dynamics_rows(traces: list[DecodeTrace]) -> list[dict]:
    """Mean monitor KL per step across sequences, aligned at the refine/decode boundary."""
    n_refine = _fixed_refine_len(traces)
    by_step: dict[int, list] = {}
    phase_of: dict[int, str] = {}
    for t in traces:
        for r in t.records:
            if r.phase not in (REFINE, DECODE):
                continue
            by_step.setdefault(r.step, []).append(r.mean_kl)
            phase_of[r.step] = r.phase
    rows = []
    for step in sorted(by_step):
        vals = [v for v in by_step[step] if v is not None]
        rows.append({"step": step, "rel_step": step - n_refine, "phase": phase_of[step],
                     "mean_kl": float(np.mean(vals)) if vals else None,
                     "n_sequences": len(by_step[step])})
    return rows


def first_convergence(kls: list, tau: float) -> tuple[int | None, int | None]:
    """First 1-based refine iteration meeting the two-step (KL < tau) and
    three-step (|KL_s - KL_{s-1}| < tau) criteria."""
    two = three = None
    for s, v in enumerate(kls, 1):
        if v is None:
            continue
        if two is None and v < tau:
            two = s
        prev = kls[s - 2] if s >= 2 else None
        if three is None and prev is not None and abs(v - prev) < tau:
            three = s
    return two, three


def convergence_rows(traces: list[DecodeTrace], tau: float) -> list[dict]:
    """Fraction of sequences first meeting each criterion at each refine step (from step 2)."""
    n_refine = _fixed_refine_len(traces)
    firsts = [first_convergence(t.phase_kls(REFINE), tau) for t in traces]
    n = len(traces)
    rows, c2, c3 = [], 0.0, 0.0
    for s in range(2, n_refine + 1):
        f2 = sum(a == s for a, _ in firsts) / n
        f3 = sum(b == s for _, b in firsts) / n
        c2 += f2
        c3 += f3
        rows.append({"step": s, "frac_two_step": f2, "frac_three_step": f3,
                     "cum_two_step": c2, "cum_three_step": c3})
    return rows


def emit_kl_dynamics(traces: list[DecodeTrace], tau: float = 0.1) -> tuple[str, str]:
    """(KL-per-step CSV, convergence-fraction CSV)."""
    kl_rows = kl_dynamics_rows(traces)
    conv = convergence_rows(traces, tau)
    return (to_csv(["step", "rel_step", "phase", "mean_kl", "n_sequences"], kl_rows),
            to_csv(["step", "frac_two_step", "frac_three_step", "cum_two_step", "cum_three_step"],
                   conv))


# ------------------------------------------------------------------- CSV


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) for h in header])
    return buf.getvalue()


def results_csv(results: list[BenchResult]) -> str:
    rows = [{"method": r.method, "exact_match": r.exact_match,
             "mean_forward_passes": r.mean_forward_passes, "mean_wallclock_ns": r.mean_wallclock,
             "e_token": r.e_token, "n_sequences": r.n_sequences} for r in results]
    return to_csv(BENCH_HEADER, rows)


def sweep_csv(rows: list[dict], param: str) -> str:
    return to_csv(SWEEP_HEADER, [r for r in rows if r["param"] == param])
