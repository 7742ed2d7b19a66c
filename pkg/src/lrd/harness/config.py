"""Run configuration: a flat ``key = value`` text file with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from ..denoiser import DenoiserConfig
from ..sampler import SamplerConfig
from .tasks import SyntheticTask


@dataclass(frozen=True)
class RunConfig:
    # task
    task: str = "copy"
    V: int = 11
    L: int = 6
    # denoiser
    d: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    L_max: int = 16
    # training
    n_train: int = 4000
    steps: int = 600
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    clip: float = 1.0
    T_train: int = 100
    # evaluation
    n_eval: int = 200
    # sampler
    r_f: float = 0.15
    top_p: float = 0.9
    tau_refine: float = 0.1
    tau_decode: float = 0.1
    T_refine: int = 20
    k: int = 1
    block_size: int | None = None
    kl_smoothing: float = 1e-10
    max_steps: int = 10_000
    early_stop: bool = True
    kl_average: str = "open"
    entropy_norm: str = "nucleus"
    record_time: bool = False

    def task_spec(self, seed: int) -> SyntheticTask:
        return SyntheticTask(kind=self.task, V=self.V, L=self.L, seed=seed)

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(V=self.V, d=self.d, n_layers=self.n_layers, n_heads=self.n_heads,
                              d_ff=self.d_ff, L_max=self.L_max)

    def sampler_config(self, **overrides) -> SamplerConfig:
        names = {f.name for f in fields(SamplerConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        kw.update(overrides)
        return SamplerConfig(**kw)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _coerce(name: str, raw: str, typ: str):
    raw = raw.strip()
    if "bool" in typ:
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if "None" in typ and raw.lower() in ("whole", "none", ""):
        return None
    if "int" in typ:
        return int(raw)
    if "float" in typ:
        return float(raw)
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; unknown keys and malformed lines are errors."""
    types = {f.name: str(f.type) for f in fields(RunConfig)}
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {n}: unknown key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'whole' if v is None else v}")
    return "\n".join(lines) + "\n"
