import csv
import io
import os
import subprocess
import sys

import numpy as np
import pytest

from lrd.harness.bench import (
    BASELINE,
    BENCH_HEADER,
    R_F_GRID,
    TOP_P_GRID,
    ablation_methods,
    convergence_rows,
    derive_seed,
    e_token,
    emit_kl_dynamics,
    exact_match,
    first_convergence,
    kl_dynamics_rows,
    nucleus_fraction,
    results_csv,
    run_ablations,
    run_benchmark,
    run_method,
    run_sweeps,
)
from lrd.harness.config import RunConfig, dump_config, parse_config
from lrd.harness.tasks import (
    KINDS,
    SyntheticTask,
    as_sequences,
    before_eos,
    generate_task,
    is_valid,
)
from lrd.sampler import DecodeTrace, SamplerConfig, TraceRecord

# ------------------------------------------------------------------ tasks


def test_copy_and_sorted_targets():
    for prompt, target in generate_task(SyntheticTask("copy", V=7, L=4, seed=1), 20):
        assert target.tolist() == prompt.tolist() + [6]
    for prompt, target in generate_task(SyntheticTask("sorted", V=7, L=4, seed=1), 20):
        assert target.tolist() == sorted(prompt.tolist()) + [6]


@pytest.mark.parametrize("kind", KINDS)
def test_generated_pairs_are_valid_and_deterministic(kind):
    task = SyntheticTask(kind, V=9, L=6, seed=4)
    a = generate_task(task, 30)
    b = generate_task(task, 30)
    for (p1, t1), (p2, t2) in zip(a, b):
        assert np.array_equal(p1, p2) and np.array_equal(t1, t2)
    for p, t in a:
        assert t[-1] == task.eos and task.eos not in p and task.eos not in t[:-1]
        assert is_valid(task, p, t)
        assert len(p) + len(t) == task.total_len


def test_invalid_outputs_detected():
    task = SyntheticTask("copy", V=5, L=3)
    assert not is_valid(task, [0, 1, 2], [0, 1, 1, 4])
    assert is_valid(task, [0, 1, 2], [0, 1, 2, 4, 0])  # content after EOS is ignored
    br = SyntheticTask("brackets", V=5, L=2)
    assert is_valid(br, [0, 0], [1, 1, 4])
    assert not is_valid(br, [0, 1], [1, 0, 4])


def test_task_validation():
    with pytest.raises(ValueError):
        SyntheticTask("reverse")
    with pytest.raises(ValueError):
        SyntheticTask(V=2)
    with pytest.raises(ValueError):
        generate_task(SyntheticTask(L=8), 1, L_max=16)


def test_eos_helpers():
    assert before_eos([3, 1, 9, 2], 9).tolist() == [3, 1]
    assert before_eos([3, 1], 9).tolist() == [3, 1]
    assert e_token([9, 1], 9) == 0
    # exact match compares only what precedes EOS
    assert exact_match([1, 2, 9, 5], [1, 2, 9, 0], 9)
    assert not exact_match([1, 2, 2, 9], [1, 2, 9, 0], 9)
    seqs = as_sequences([(np.array([1]), np.array([1, 9]))])
    assert seqs.tolist() == [[1, 1, 9]]


def test_derive_seed_stable():
    assert derive_seed(0, 1) == derive_seed(0, 1)
    assert len({derive_seed(0, k) for k in range(4)}) == 4


# ----------------------------------------------------------------- config


def test_parse_config():
    cfg = parse_config("# toy run\nsteps = 10  # short\nblock_size = whole\nearly_stop = off\n"
                       "r_f = 0.3\ntask = sorted\n")
    assert cfg.steps == 10 and cfg.block_size is None and cfg.early_stop is False
    assert cfg.r_f == 0.3 and cfg.task == "sorted"
    assert parse_config("block_size = 4").block_size == 4


@pytest.mark.parametrize("text", ["bogus = 1", "steps 10", "early_stop = maybe", "steps = x"])
def test_parse_config_errors(text):
    with pytest.raises(ValueError):
        parse_config(text)


def test_config_dump_round_trip():
    cfg = RunConfig().replace(steps=7, block_size=3, early_stop=False, kl_average="all")
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config(dump_config(RunConfig())) == RunConfig()


def test_sampler_config_projection():
    s = RunConfig(r_f=0.4).sampler_config(T_refine=3)
    assert isinstance(s, SamplerConfig) and s.r_f == 0.4 and s.T_refine == 3


# ------------------------------------------------------------------ bench


@pytest.fixture(scope="module")
def small_eval(trained_model, corpus):
    return trained_model, corpus[:25]


def test_benchmark_baseline_metrics(small_eval, run_config):
    model, corp = small_eval
    gen_len = run_config.L + 1
    results, traces = run_benchmark(model, corp, [(BASELINE, None)], run_config.V - 1)
    res = results[0]
    assert res.mean_forward_passes == gen_len
    assert 0.0 <= res.exact_match <= 1.0 and 0.0 <= res.e_token <= gen_len
    assert res.n_sequences == len(corp) and len(traces[BASELINE]) == len(corp)
    assert res.mean_wallclock == 0.0


def test_results_csv_header(small_eval, run_config):
    model, corp = small_eval
    results, _ = run_benchmark(model, corp[:3], [(BASELINE, None)], run_config.V - 1)
    rows = list(csv.DictReader(io.StringIO(results_csv(results))))
    assert list(rows[0]) == BENCH_HEADER
    assert rows[0]["method"] == BASELINE


def test_ablation_rows(small_eval, run_config):
    model, corp = small_eval
    labels = [m for m, _ in ablation_methods(SamplerConfig())]
    assert labels == [BASELINE, "full", "w/o latent refinement", "w/o mix embed",
                      "w/o early stop", "LFx1", "LFx2", "LFx3", "LFx4", "LFx5", "Auto"]
    results, _ = run_ablations(model, corp[:10], run_config.sampler_config(), run_config.V - 1)
    assert [r.method for r in results] == labels
    for r in results:
        assert np.isfinite(r.mean_forward_passes) and 0 <= r.exact_match <= 1


def test_sweeps(small_eval, run_config):
    model, corp = small_eval
    corp = corp[:10]
    rows = run_sweeps(model, corp, run_config.sampler_config(), run_config.V - 1)
    assert [r["value"] for r in rows if r["param"] == "r_f"] == list(R_F_GRID)
    assert [r["value"] for r in rows if r["param"] == "top_p"] == list(TOP_P_GRID)
    base, _ = run_benchmark(model, corp, [(BASELINE, None)], run_config.V - 1)
    r0 = next(r for r in rows if r["param"] == "r_f" and r["value"] == 0.0)
    assert r0["exact_match"] == base[0].exact_match
    tp = [r for r in rows if r["param"] == "top_p"]
    fr = [r["nucleus_fraction"] for r in tp]
    assert fr[0] == 0.0 and np.all(np.diff(fr) >= 0)
    assert fr[-1] == pytest.approx(tp[-1]["support_fraction"])


def test_nucleus_fraction():
    d = np.array([[0.5, 0.3, 0.2, 0.0], [1.0, 0.0, 0.0, 0.0]])
    assert nucleus_fraction(d, 0.0) == 0.0
    assert nucleus_fraction(d, 1.0) == pytest.approx((3 / 4 + 1 / 4) / 2)


# ------------------------------------------------------------ KL dynamics


def fake_trace(refine_kls, decode_kls=()):
    t = DecodeTrace()
    step = 0
    for phase, kls in (("refine", refine_kls), ("decode", decode_kls)):
        for v in kls:
            step += 1
            t.records.append(TraceRecord(step, phase, v, 0, None, 0))
    return t


def test_first_convergence():
    assert first_convergence([None, 0.5, 0.05, 0.04], 0.1) == (3, 4)
    assert first_convergence([None, 0.5, 0.45], 0.1) == (None, 3)
    assert first_convergence([None], 0.1) == (None, None)


def test_kl_dynamics_export():
    traces = [fake_trace([None, 0.4, 0.05], [0.01]), fake_trace([None, 0.2, 0.3], [0.0])]
    rows = kl_dynamics_rows(traces)
    assert rows[0]["mean_kl"] is None
    assert rows[1]["mean_kl"] == pytest.approx(0.3)
    assert [r["rel_step"] for r in rows] == [-2, -1, 0, 1]
    assert rows[3]["phase"] == "decode"
    conv = convergence_rows(traces, 0.1)
    assert [r["step"] for r in conv] == [2, 3]
    for r in conv:
        for key in ("frac_two_step", "frac_three_step", "cum_two_step", "cum_three_step"):
            assert 0.0 <= r[key] <= 1.0
    assert conv[-1]["cum_two_step"] == 0.5
    kl_csv, conv_csv = emit_kl_dynamics(traces)
    assert kl_csv.splitlines()[1] == "1,-2,refine,,2"


def test_kl_export_rejects_mixed_lengths():
    with pytest.raises(ValueError, match="tau_refine"):
        kl_dynamics_rows([fake_trace([None, 0.1]), fake_trace([None])])


def test_trace_export_on_trained_model(small_eval, run_config):
    model, corp = small_eval
    scfg = run_config.sampler_config(tau_refine=0.0)
    _, _, traces = run_method(model, corp[:5], "lrd", scfg, run_config.V - 1)
    rows = convergence_rows(traces, 0.1)
    assert len(rows) == scfg.T_refine - 1
    assert rows[-1]["cum_two_step"] <= 1.0 + 1e-12


# -------------------------------------------------------------------- CLI

SMALL_CONFIG = """\
# small run for CLI tests
steps = 60
n_train = 300
n_eval = 12
batch_size = 16
d = 16
"""


def run_cli(args, cwd):
    env = dict(os.environ)
    src = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src")
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    proc = subprocess.run([sys.executable, "-m", "lrd", *args], cwd=cwd, env=env,
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc



@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.cfg").write_text(SMALL_CONFIG)
    run_cli(["train", "--config", "run.cfg", "--out", "train", "--ckpt", "model.ckpt"], root)
    return root


def test_cli_train_outputs(cli_env):
    assert (cli_env / "model.ckpt").exists()
    names = set(os.listdir(cli_env / "train"))
    assert {"train_loss.csv", "config.txt"} <= names
    assert parse_config((cli_env / "train" / "config.txt").read_text()).steps == 60


def test_cli_help():
    proc = subprocess.run([sys.executable, "-m", "lrd", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("train", "decode", "bench", "ablate", "sweep", "trace", "oracle-check", "lipschitz"):
        assert cmd in proc.stdout


def test_cli_decode_outputs(cli_env):
    run_cli(["decode", "--config", "run.cfg", "--ckpt", "model.ckpt", "--out", "dec"], cli_env)
    rows = list(csv.DictReader(open(cli_env / "dec" / "decode.csv")))
    assert len(rows) == 12
    assert set(rows[0]) == {"index", "prompt", "target", "output", "exact_match", "forward_passes"}
    run_cli(["decode", "--baseline", "--config", "run.cfg", "--ckpt", "model.ckpt",
             "--out", "decb"], cli_env)
    rows = list(csv.DictReader(open(cli_env / "decb" / "decode.csv")))
    assert all(r["forward_passes"] == "7" for r in rows)


def test_cli_oracle_check_with_distribution_file(cli_env):
    (cli_env / "d.tsv").write_text("0.5\t0 1\n0.5\t1 0\n")
    run_cli(["oracle-check", "--dist", "d.tsv", "--out", "orc"], cli_env)
    rows = list(csv.DictReader(open(cli_env / "orc" / "oracle_kernels.csv")))
    assert rows and all(r["agree"] == "true" for r in rows)
