"""
Decoding a copy task with and without soft refinement
=====================================================

Trains the small numpy denoiser on the copy task (about 15 s on one CPU),
then decodes the same prompts with the hard baseline and the two-phase
soft-refinement sampler and compares accuracy and forward passes.
"""

import numpy as np

from lrd.harness.bench import BASELINE, eval_corpus, run_benchmark, train_model
from lrd.harness.config import RunConfig
from lrd.sampler import decode_baseline, decode_lrd

cfg = RunConfig()
model, losses = train_model(cfg, seed=0)
print(f"loss: first {np.mean(losses[:20]):.3f}, last {np.mean(losses[-20:]):.3f}")

corpus = eval_corpus(cfg, seed=0, n=50)
eos = cfg.V - 1

# one prompt, decoded both ways
prompt, target = corpus[0]
base, btrace = decode_baseline(model, prompt, len(target))
toks, trace = decode_lrd(model, prompt, len(target), cfg.sampler_config())
print("prompt  ", prompt)
print("baseline", base, f"({btrace.forward_passes} passes)")
print("refined ", toks, f"({trace.forward_passes} passes, early stop {trace.early_stopped})")

# per-step monitor: phase, mean KL between consecutive predictions, commits so far
for r in trace.records:
    kl = "-" if r.mean_kl is None else f"{r.mean_kl:.2e}"
    print(f"  step {r.step:2d} {r.phase:7s} kl={kl:>9s} committed={r.n_committed}")

# the whole eval set
results, _ = run_benchmark(model, corpus, [(BASELINE, None), ("lrd", cfg.sampler_config())], eos)
for r in results:
    print(f"{r.method:8s} exact={r.exact_match:.3f} passes={r.mean_forward_passes:.2f}")
