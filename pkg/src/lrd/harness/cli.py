"""Command-line entry point: ``lrd <command> [--config PATH] [--seed N] [--out DIR] [--ckpt PATH]``.

Every output is a CSV (or the text checkpoint) under ``--out``, and all
randomness derives from ``--seed``, so repeated runs are byte-identical.
Wall-clock columns are 0 unless ``--wallclock`` is given.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from ..denoiser import load_checkpoint, save_checkpoint
from ..oracle import (
    ApproxPosterior,
    compare_kernels,
    kl_hard_vs_soft,
    load_distribution,
    random_instances,
    validate_reverse_posterior,
)
from ..probcore import true_posterior
from ..sampler import TRACE_HEADER
from ..stability import LipschitzProbe, embedding_norm_stats, probe_csv, run_probe
from .bench import (
    BASELINE,
    emit_kl_dynamics,
    eval_corpus,
    exact_match,
    results_csv,
    run_ablations,
    run_benchmark,
    run_method,
    run_sweeps,
    sweep_csv,
    to_csv,
    train_model,
)
from .config import RunConfig, dump_config, load_config

logger = logging.getLogger("lrd")

COMMANDS = ("train", "decode", "bench", "ablate", "sweep", "trace", "oracle-check", "lipschitz")


def _write(out_dir: str, name: str, text: str) -> str:
    path = os.path.join(out_dir, name)
    with open(path, "w") as f:
        f.write(text)
    logger.info("wrote %s", path)
    return path


def _traces_csv(traces) -> str:
    lines = [",".join(["seq"] + TRACE_HEADER)]
    for i, t in enumerate(traces):
        body = t.to_csv().splitlines()[1:]
        lines.extend(f"{i},{row}" for row in body)
    return "\n".join(lines) + "\n"


def _model(args, cfg: RunConfig):
    if args.ckpt and os.path.exists(args.ckpt):
        return load_checkpoint(args.ckpt)
    logger.info("no checkpoint given; training from --seed %d", args.seed)
    model, _ = train_model(cfg, args.seed)
    return model


def cmd_train(args, cfg):
    model, losses = train_model(cfg, args.seed, log_every=100)
    path = args.ckpt or os.path.join(args.out, "model.ckpt")
    save_checkpoint(model, path)
    logger.info("wrote %s", path)
    _write(args.out, "train_loss.csv",
           to_csv(["step", "loss"], [{"step": i, "loss": l} for i, l in enumerate(losses)]))
    _write(args.out, "config.txt", dump_config(cfg))


def cmd_decode(args, cfg):
    model = _model(args, cfg)
    corpus = eval_corpus(cfg, args.seed)
    scfg = None if args.baseline else cfg.sampler_config()
    label = BASELINE if args.baseline else "lrd"
    res, outs, traces = run_method(model, corpus, label, scfg, cfg.V - 1, cfg.k, cfg.record_time)
    rows = []
    for i, ((p, t), o, tr) in enumerate(zip(corpus, outs, traces)):
        rows.append({"index": i, "prompt": " ".join(map(str, p)), "target": " ".join(map(str, t)),
                     "output": " ".join(map(str, o)), "exact_match": exact_match(o, t, cfg.V - 1),
                     "forward_passes": tr.forward_passes})
    _write(args.out, "decode.csv", to_csv(list(rows[0]), rows))
    _write(args.out, "traces.csv", _traces_csv(traces))
    print(f"{label}: exact_match={res.exact_match:.4f} mean_forward_passes={res.mean_forward_passes:.3f}")


def cmd_bench(args, cfg):
    model = _model(args, cfg)
    corpus = eval_corpus(cfg, args.seed)
    methods = [(BASELINE, None), ("lrd", cfg.sampler_config())]
    results, traces = run_benchmark(model, corpus, methods, cfg.V - 1, cfg.k, cfg.record_time)
    _write(args.out, "bench.csv", results_csv(results))
    for label, tr in traces.items():
        _write(args.out, f"traces_{label}.csv", _traces_csv(tr))
    for r in results:
        print(f"{r.method}: exact_match={r.exact_match:.4f} mean_forward_passes={r.mean_forward_passes:.3f}")


def cmd_ablate(args, cfg):
    model = _model(args, cfg)
    corpus = eval_corpus(cfg, args.seed)
    results, _ = run_ablations(model, corpus, cfg.sampler_config(), cfg.V - 1, cfg.record_time)
    _write(args.out, "ablations.csv", results_csv(results))


def cmd_sweep(args, cfg):
    model = _model(args, cfg)
    corpus = eval_corpus(cfg, args.seed)
    rows = run_sweeps(model, corpus, cfg.sampler_config(), cfg.V - 1)
    _write(args.out, "sweep_r_f.csv", sweep_csv(rows, "r_f"))
    _write(args.out, "sweep_top_p.csv", sweep_csv(rows, "top_p"))


def cmd_trace(args, cfg):
    model = _model(args, cfg)
    corpus = eval_corpus(cfg, args.seed)
    # tau_refine = 0 pins Phase 1 to exactly T_refine passes
    scfg = cfg.sampler_config(tau_refine=0.0)
    _, _, traces = run_method(model, corpus, "lrd", scfg, cfg.V - 1, cfg.k, cfg.record_time)
    kl_csv, conv_csv = emit_kl_dynamics(traces, cfg.tau_refine)
    _write(args.out, "kl_dynamics.csv", kl_csv)
    _write(args.out, "convergence.csv", conv_csv)


def cmd_oracle_check(args, cfg):
    if args.dist:
        dist = load_distribution(args.dist)
        V = max(max(s) for s in dist.sequences) + 1
        rng = np.random.default_rng(args.seed)
        instances = [(dist, [float(b) for b in rng.uniform(0.05, 0.95, size=4)], V)]
    else:
        instances = random_instances(args.seed)
    rows, worst = [], 0.0
    for n, (dist, betas, V) in enumerate(instances):
        for r in compare_kernels(dist, betas, V):
            worst = max(worst, r["max_err_joint"], r["max_err_marginal"])
            rows.append({"instance": n, "V": V, "L": dist.L, "T": len(betas), "t": r["t"],
                         "x_t": " ".join(map(str, r["x_t"])), "possible": r["possible"],
                         "agree": r["agree"], "max_err_joint": r["max_err_joint"],
                         "max_err_marginal": r["max_err_marginal"]})
    _write(args.out, "oracle_kernels.csv", to_csv(list(rows[0]), rows))
    mc = []
    for i, (ap, ac) in enumerate([(0.8, 0.5), (1.0, 0.9), (0.5, 0.5), (0.9, 0.2), (0.3, 0.05)]):
        r = validate_reverse_posterior(ap, ac, 100_000, seed=args.seed + i)
        mc.append({"alpha_prev": ap, "alpha_cur": ac, **r})
    _write(args.out, "oracle_montecarlo.csv",
           to_csv(["alpha_prev", "alpha_cur", "freq", "expected", "sigma", "n_cond", "ok"], mc))
    kls = []
    V = 4
    for ap, ac in [(0.8, 0.5), (0.9, 0.1), (0.6, 0.59)]:
        q = true_posterior(ap, ac, 0)
        soft = ApproxPosterior.soft(np.full(V + 1, 1.0 / (V + 1)))
        kh, ks = kl_hard_vs_soft(q, ApproxPosterior.hard(1), soft, V)
        kls.append({"alpha_prev": ap, "alpha_cur": ac, "kl_hard_wrong": kh, "kl_soft_uniform": ks})
    _write(args.out, "oracle_kl.csv",
           to_csv(["alpha_prev", "alpha_cur", "kl_hard_wrong", "kl_soft_uniform"], kls))
    print(f"max kernel deviation {worst:.3e}; monte-carlo ok: {all(r['ok'] for r in mc)}")


def cmd_lipschitz(args, cfg):
    model = _model(args, cfg)
    probe = LipschitzProbe()
    for layer in range(model.config.n_layers):
        for head in range(model.config.n_heads):
            rows = run_probe(model, layer, head, probe, seed=args.seed)
            _write(args.out, f"lipschitz_l{layer}_h{head}.csv", probe_csv(rows))
    m, t, r = embedding_norm_stats(model.table)
    _write(args.out, "embedding_norms.csv",
           to_csv(["mask_norm", "mean_token_norm", "ratio"],
                  [{"mask_norm": m, "mean_token_norm": t, "ratio": r}]))


HANDLERS = {
    "train": cmd_train, "decode": cmd_decode, "bench": cmd_bench, "ablate": cmd_ablate,
    "sweep": cmd_sweep, "trace": cmd_trace, "oracle-check": cmd_oracle_check,
    "lipschitz": cmd_lipschitz,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrd", description="Soft-embedding refinement decoding for masked diffusion denoisers.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--out", default="out", help="output directory (default ./out)")
    common.add_argument("--ckpt", help="checkpoint to read (or, for train, to write)")
    common.add_argument("--wallclock", action="store_true",
                        help="record wall-clock times (outputs become non-reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "decode":
            p.add_argument("--baseline", action="store_true", help="hard-assignment decoding")
        if name == "oracle-check":
            p.add_argument("--dist", help="distribution file: probability<TAB>token ids per line")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.wallclock:
        cfg = replace(cfg, record_time=True)
    os.makedirs(args.out, exist_ok=True)
    HANDLERS[args.command](args, cfg)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
