import numpy as np
import pytest

from lrd.denoiser import Denoiser, DenoiserConfig
from lrd.harness.bench import eval_corpus, train_model
from lrd.harness.config import RunConfig

RUN = RunConfig()
SEED = 0


@pytest.fixture(scope="session")
def run_config():
    return RUN


@pytest.fixture(scope="session")
def trained():
    """Copy-task denoiser trained with the default run config (about 15 s)."""
    model, losses = train_model(RUN, SEED)
    return model, losses


@pytest.fixture(scope="session")
def trained_model(trained):
    return trained[0]


@pytest.fixture(scope="session")
def corpus():
    return eval_corpus(RUN, SEED)


@pytest.fixture
def tiny_model():
    cfg = DenoiserConfig(V=5, d=8, n_layers=1, n_heads=2, d_ff=16, L_max=8)
    return Denoiser.init(cfg, seed=3, zero_head=False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance(request):
    """``report(n, ok, detail)`` prints and records one PASS/FAIL line per criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    def report(n: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        print(line)
        lines[n] = line
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
