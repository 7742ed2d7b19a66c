"""Synthetic prompt/target tasks for desk-scale training and evaluation.

Token ids ``0 .. V-2`` are content symbols and ``V-1`` is EOS (unless
``eos_token`` says otherwise); MASK is ``V`` and never appears here.  Every
target ends in EOS, so a sequence is ``prompt (L) + target (L + 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("copy", "sorted", "modsum", "brackets")
OPEN, CLOSE = 0, 1


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = "copy"
    V: int = 11
    L: int = 6
    eos_token: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.V < 3:
            raise ValueError("V must be >= 3")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if not 0 <= self.eos <= self.V - 1:
            raise ValueError("eos_token must be a vocabulary id")

    @property
    def eos(self) -> int:
        return self.V - 1 if self.eos_token is None else self.eos_token

    @property
    def symbols(self) -> np.ndarray:
        return np.array([v for v in range(self.V) if v != self.eos])

    @property
    def gen_len(self) -> int:
        return self.L + 1

    @property
    def total_len(self) -> int:
        return 2 * self.L + 1


def _dyck(rng: np.random.Generator, n_pairs: int) -> list[int]:
    """Random balanced bracket string with ``n_pairs`` pairs (0 opens, 1 closes)."""
    out, depth, left = [], 0, n_pairs
    for _ in range(2 * n_pairs):
        if left and (depth == 0 or rng.random() < 0.5):
            out.append(OPEN)
            depth += 1
            left -= 1
        else:
            out.append(CLOSE)
            depth -= 1
    return out


def generate_task(task: SyntheticTask, n: int, L_max: int | None = None):
    """``n`` (prompt, target) pairs, deterministic in ``task.seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if L_max is not None and task.total_len > L_max:
        raise ValueError(f"task needs {task.total_len} positions, L_max={L_max}")
    rng = np.random.default_rng(task.seed)
    syms = task.symbols
    m = syms.size
    out = []
    for _ in range(n):
        if task.kind == "brackets":
            word = _dyck(rng, task.L)
            o, c = syms[OPEN], syms[CLOSE]
            word = [o if w == OPEN else c for w in word]
            prompt, body = np.array(word[:task.L]), np.array(word[task.L:])
        else:
            idx = rng.integers(0, m, size=task.L)
            prompt = syms[idx]
            if task.kind == "copy":
                body = prompt.copy()
            elif task.kind == "sorted":
                body = np.sort(prompt)
            else:  # running sum of symbol indices, mod the symbol count
                body = syms[np.cumsum(idx) % m]
        target = np.concatenate([body, [task.eos]]).astype(np.int64)
        out.append((prompt.astype(np.int64), target))
    return out


def is_valid(task: SyntheticTask, prompt, generated) -> bool:
    """Grammar check of a generated target (up to its first EOS)."""
    gen = list(before_eos(generated, task.eos))
    prompt = list(prompt)
    if task.kind == "copy":
        return gen == prompt
    if task.kind == "sorted":
        return gen == sorted(prompt)
    if task.kind == "modsum":
        syms = list(task.symbols)
        idx = np.cumsum([syms.index(p) for p in prompt]) % len(syms)
        return gen == [syms[i] for i in idx]
    o, c = task.symbols[OPEN], task.symbols[CLOSE]
    depth = 0
    for tok in prompt + gen:
        depth += 1 if tok == o else -1 if tok == c else 10 ** 9
        if depth < 0:
            return False
    return depth == 0


def before_eos(tokens, eos: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    hits = np.nonzero(tokens == eos)[0]
    return tokens[: hits[0]] if hits.size else tokens


def as_sequences(corpus) -> np.ndarray:
    return np.array([np.concatenate([p, t]) for p, t in corpus])
