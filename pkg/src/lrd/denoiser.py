"""Tiny bidirectional transformer denoiser in NumPy with manual backprop.

Shapes: (B, L, d) batch/sequence/model dim; heads are split as (B, H, L, dh).
The embedding table has V + 1 rows, the last one being MASK.  The output
head predicts the V content tokens only, never MASK.

Architecture per layer (pre-LN)::

    h = h + MHA(LN1(h))
    h = h + W2 gelu(W1 LN2(h) + b1) + b2

followed by a final LN and a linear head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .probcore import NoiseSchedule, forward_mask

# MASK row init scale relative to the token rows (0.3340 / 0.8721, measured on a 7B masked diffusion model).
MASK_NORM_RATIO = 0.3340 / 0.8721

_LN_EPS = 1e-5
_GELU_K = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class DenoiserConfig:
    V: int
    d: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    L_max: int = 16

    def __post_init__(self):
        for name in ("V", "d", "n_layers", "n_heads", "d_ff", "L_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d % self.n_heads:
            raise ValueError("d must be divisible by n_heads")

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    @property
    def mask_id(self) -> int:
        return self.V


@dataclass
class DenoiserOutput:
    dists: np.ndarray  # (..., L, V), rows on the simplex
    logits: np.ndarray  # (..., L, V)


# ---------------------------------------------------------------- primitives


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    gh = dy * g
    dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    u = _GELU_K * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    du = _GELU_K * (1.0 + 3 * 0.044715 * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def _split_heads(x, H):
    B, L, d = x.shape
    return x.reshape(B, L, H, d // H).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)


# --------------------------------------------------------------------- model


def init_params(config: DenoiserConfig, rng: np.random.Generator,
                zero_head: bool = True, token_scale: float = 1.0) -> dict[str, np.ndarray]:
    """Random initial parameters.

    Token rows have per-dimension std ``token_scale / sqrt(d)`` so their norm
    is about ``token_scale``; the MASK row is shrunk by `MASK_NORM_RATIO`.
    """
    c = config
    d, V = c.d, c.V
    p: dict[str, np.ndarray] = {}
    emb = rng.normal(0.0, token_scale / math.sqrt(d), size=(V + 1, d))
    emb[V] *= MASK_NORM_RATIO
    p["tok_emb"] = emb
    p["pos_emb"] = rng.normal(0.0, 0.5 / math.sqrt(d), size=(c.L_max, d))
    for i in range(c.n_layers):
        pre = f"layers.{i}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for w in ("Wq", "Wk", "Wv", "Wo"):
            p[pre + w] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "W1"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, c.d_ff))
        p[pre + "b1"] = np.zeros(c.d_ff)
        p[pre + "W2"] = rng.normal(0.0, 1.0 / math.sqrt(c.d_ff), size=(c.d_ff, d))
        p[pre + "b2"] = np.zeros(d)
    p["lnf.g"] = np.ones(d)
    p["lnf.b"] = np.zeros(d)
    if zero_head:
        p["W_head"] = np.zeros((d, V))
    else:
        p["W_head"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, V))
    p["b_head"] = np.zeros(V)
    return p


class Denoiser:
    """Embedding table + bidirectional transformer mapping embeddings to token dists."""

    def __init__(self, config: DenoiserConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self._check_shapes()

    @classmethod
    def init(cls, config: DenoiserConfig, seed: int = 0, **kwargs) -> "Denoiser":
        return cls(config, init_params(config, np.random.default_rng(seed), **kwargs))

    def _check_shapes(self):
        ref = init_params(self.config, np.random.default_rng(0))
        if set(ref) != set(self.params):
            missing = set(ref) ^ set(self.params)
            raise ValueError(f"parameter names do not match config: {sorted(missing)}")
        for k, v in ref.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"{k}: shape {self.params[k].shape} != {v.shape}")

    @property
    def table(self) -> np.ndarray:
        """Embedding rows, shape (V + 1, d); row V is MASK."""
        return self.params["tok_emb"]

    @property
    def positional(self) -> np.ndarray:
        return self.params["pos_emb"]

    @property
    def mask_id(self) -> int:
        return self.config.V

    def copy(self) -> "Denoiser":
        return Denoiser(self.config, {k: v.copy() for k, v in self.params.items()})

    # -------------------------------------------------------------- forward

    def embed_tokens(self, tokens) -> np.ndarray:
        """Row lookup plus positional vectors; accepts (L,) or (B, L) ids."""
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() > self.config.V):
            raise ValueError(f"token ids must lie in [0, {self.config.V}]")
        L = tokens.shape[-1]
        if L > self.config.L_max:
            raise ValueError(f"sequence length {L} exceeds L_max={self.config.L_max}")
        return self.table[tokens] + self.positional[:L]

    def forward(self, embeddings) -> DenoiserOutput:
        """Per-position token distributions for (L, d) or (B, L, d) inputs."""
        x = np.asarray(embeddings, dtype=np.float64)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.shape[1] > self.config.L_max:
            raise ValueError(f"sequence length {x.shape[1]} exceeds L_max={self.config.L_max}")
        logits, _ = _forward(self.params, self.config, x)
        dists = softmax(logits)
        if squeeze:
            logits, dists = logits[0], dists[0]
        return DenoiserOutput(dists=dists, logits=logits)

    def attention(self, x, layer: int, weights=None) -> np.ndarray:
        """The bare multi-head self-attention map of one layer (no LN, no residual).

        ``weights`` optionally freezes the (B, H, L, L) attention pattern, which
        makes the map linear in ``x``.
        """
        self._check_layer(layer)
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        pre = f"layers.{layer}."
        out, _ = _attention(self.params, pre, x, self.config.n_heads, weights)
        return out[0] if squeeze else out

    def attention_weights(self, x, layer: int) -> np.ndarray:
        self._check_layer(layer)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        pre = f"layers.{layer}."
        _, cache = _attention(self.params, pre, x, self.config.n_heads)
        return cache[3]

    def spectral_inputs(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray]:
        """(W_Q W_K^T, W_V) for one head: shapes (d, d) and (d, d_head)."""
        self._check_layer(layer)
        if not 0 <= head < self.config.n_heads:
            raise IndexError(f"head {head} out of range")
        dh = self.config.d_head
        sl = slice(head * dh, (head + 1) * dh)
        pre = f"layers.{layer}."
        wq = self.params[pre + "Wq"][:, sl]
        wk = self.params[pre + "Wk"][:, sl]
        wv = self.params[pre + "Wv"][:, sl]
        return wq @ wk.T, wv

    def _check_layer(self, layer):
        if not 0 <= layer < self.config.n_layers:
            raise IndexError(f"layer {layer} out of range")


def _attention(params, pre, x, H, weights=None):
    q = _split_heads(x @ params[pre + "Wq"], H)
    k = _split_heads(x @ params[pre + "Wk"], H)
    v = _split_heads(x @ params[pre + "Wv"], H)
    dh = q.shape[-1]
    if weights is None:
        s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
        a = softmax(s)
    else:
        a = np.broadcast_to(weights, q.shape[:2] + (x.shape[1], x.shape[1]))
    o = _merge_heads(a @ v)
    out = o @ params[pre + "Wo"]
    return out, (x, q, k, a, v, o)


def _attention_backward(params, grads, pre, dout, cache, H):
    x, q, k, a, v, o = cache
    dh = q.shape[-1]
    grads[pre + "Wo"] += o.reshape(-1, o.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
    do = _split_heads(dout @ params[pre + "Wo"].T, H)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    x2 = x.reshape(-1, x.shape[-1])
    dx = np.zeros_like(x)
    for name, g in (("Wq", dq), ("Wk", dk), ("Wv", dv)):
        g = _merge_heads(g)
        grads[pre + name] += x2.T @ g.reshape(-1, g.shape[-1])
        dx += g @ params[pre + name].T
    return dx


def _forward(params, config, x):
    caches = []
    h = x
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        a_in, ln1 = _ln_forward(h, params[pre + "ln1.g"], params[pre + "ln1.b"])
        att, att_cache = _attention(params, pre, a_in, config.n_heads)
        h = h + att
        c_in, ln2 = _ln_forward(h, params[pre + "ln2.g"], params[pre + "ln2.b"])
        u = c_in @ params[pre + "W1"] + params[pre + "b1"]
        g, t = _gelu(u)
        h = h + g @ params[pre + "W2"] + params[pre + "b2"]
        caches.append((ln1, att_cache, ln2, c_in, u, t, g))
    z, lnf = _ln_forward(h, params["lnf.g"], params["lnf.b"])
    logits = z @ params["W_head"] + params["b_head"]
    return logits, (caches, lnf, z)


def _backward(params, config, dlogits, cache):
    """Gradients of a scalar loss given dL/dlogits; returns (param grads, dL/dx)."""
    caches, lnf, z = cache
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    d = z.shape[-1]
    grads["W_head"] = z.reshape(-1, d).T @ dlogits.reshape(-1, dlogits.shape[-1])
    grads["b_head"] = dlogits.reshape(-1, dlogits.shape[-1]).sum(axis=0)
    dz = dlogits @ params["W_head"].T
    dh, grads["lnf.g"], grads["lnf.b"] = _ln_backward(dz, params["lnf.g"], lnf)
    for i in reversed(range(config.n_layers)):
        pre = f"layers.{i}."
        ln1, att_cache, ln2, c_in, u, t, g = caches[i]
        # feed-forward branch
        grads[pre + "W2"] += g.reshape(-1, g.shape[-1]).T @ dh.reshape(-1, d)
        grads[pre + "b2"] += dh.reshape(-1, d).sum(axis=0)
        du = (dh @ params[pre + "W2"].T) * _gelu_grad(u, t)
        grads[pre + "W1"] += c_in.reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
        grads[pre + "b1"] += du.reshape(-1, du.shape[-1]).sum(axis=0)
        dc = du @ params[pre + "W1"].T
        dx, dg, db = _ln_backward(dc, params[pre + "ln2.g"], ln2)
        grads[pre + "ln2.g"] += dg
        grads[pre + "ln2.b"] += db
        dh = dh + dx
        # attention branch
        da_in = _attention_backward(params, grads, pre, dh, att_cache, config.n_heads)
        dx, dg, db = _ln_backward(da_in, params[pre + "ln1.g"], ln1)
        grads[pre + "ln1.g"] += dg
        grads[pre + "ln1.b"] += db
        dh = dh + dx
    return grads, dh


# ------------------------------------------------------------------ training


def masked_ce_loss(model: Denoiser, inputs, targets, loss_mask, scale: float = 1.0,
                   need_grad: bool = True):
    """Mean cross-entropy over positions where ``loss_mask`` is set.

    ``inputs`` are token ids (B, L) including MASK; gradients flow into the
    embedding table and positional rows as well as the transformer.
    Returns ``(loss, grads)``; grads is None when ``need_grad`` is False.
    """
    inputs = np.atleast_2d(inputs)
    targets = np.atleast_2d(targets)
    w = np.atleast_2d(loss_mask).astype(np.float64)
    n = w.sum()
    x = model.embed_tokens(inputs)
    logits, cache = _forward(model.params, model.config, x)
    z = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    B, L = targets.shape
    picked = logp[np.arange(B)[:, None], np.arange(L)[None, :], targets]
    if n == 0:
        loss = 0.0
        if not need_grad:
            return loss, None
        return loss, {k: np.zeros_like(v) for k, v in model.params.items()}
    loss = scale * float(-(picked * w).sum() / n)
    if not need_grad:
        return loss, None
    dlogits = np.exp(logp)
    dlogits[np.arange(B)[:, None], np.arange(L)[None, :], targets] -= 1.0
    dlogits *= (scale * w / n)[..., None]
    grads, dx = _backward(model.params, model.config, dlogits, cache)
    np.add.at(grads["tok_emb"], inputs.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    grads["pos_emb"][:L] += dx.sum(axis=0)
    return loss, grads


class MomentumSGD:
    """Heavy-ball SGD with a fixed step size and optional global-norm clipping."""

    def __init__(self, lr: float = 0.05, momentum: float = 0.9, clip: float | None = 1.0):
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if self.clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip:
                grads = {k: g * (self.clip / norm) for k, g in grads.items()}
        for k, g in grads.items():
            v = self.velocity.get(k)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[k] = v
            params[k] -= self.lr * v


def corrupt_batch(batch, schedule: NoiseSchedule, rng: np.random.Generator,
                  mask_id: int, maskable=None):
    """Draw t ~ U{1..T} per sequence and mask accordingly; returns (inputs, masked)."""
    batch = np.atleast_2d(np.asarray(batch))
    ts = rng.integers(1, schedule.T + 1, size=batch.shape[0])
    inputs = np.empty_like(batch)
    for b, t in enumerate(ts):
        m = None if maskable is None else np.atleast_2d(maskable)[b % np.atleast_2d(maskable).shape[0]]
        inputs[b] = forward_mask(batch[b], int(t), schedule, rng, mask_id, m)
    return inputs, inputs == mask_id


def train_step(model: Denoiser, batch, schedule: NoiseSchedule, rng: np.random.Generator,
               optimizer: MomentumSGD, maskable=None) -> tuple[float, Denoiser]:
    """One optimizer step on the masked-token cross-entropy; mutates ``model``."""
    batch = np.atleast_2d(np.asarray(batch))
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    inputs, masked = corrupt_batch(batch, schedule, rng, model.mask_id, maskable)
    loss, grads = masked_ce_loss(model, inputs, batch, masked)
    optimizer.step(model.params, grads)
    return loss, model


def grad_check(model: Denoiser, inputs, targets, loss_mask, h: float = 1e-4,
               max_entries: int | None = None, seed: int = 0,
               guard: float = 1e-8) -> dict[str, float]:
    """Max relative error of analytic vs. central-difference gradients per tensor.

    ``max_entries`` subsamples entries of large tensors (deterministically).
    Relative error is ``|a - n| / max(|a|, |n|, guard)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    _, grads = masked_ce_loss(model, inputs, targets, loss_mask)
    rng = np.random.default_rng(seed)
    out = {}
    for name, p in model.params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        g = grads[name].reshape(-1)
        for j in idx:
            old = flat[j]
            flat[j] = old + h
            fp, _ = masked_ce_loss(model, inputs, targets, loss_mask, need_grad=False)
            flat[j] = old - h
            fm, _ = masked_ce_loss(model, inputs, targets, loss_mask, need_grad=False)
            flat[j] = old
            num = (fp - fm) / (2 * h)
            err = abs(g[j] - num) / max(abs(g[j]), abs(num), guard)
            worst = max(worst, err)
        out[name] = worst
    return out


# --------------------------------------------------------------- checkpoints

CKPT_MAGIC = "lrd-ckpt v1"
_CONFIG_KEYS = ("V", "d", "n_layers", "n_heads", "d_ff", "L_max")


def _format_rows(arr: np.ndarray) -> list[str]:
    if arr.ndim == 0:
        arr = arr.reshape(1)
    rows = arr.reshape(-1, arr.shape[-1]) if arr.ndim > 1 else arr.reshape(1, -1)
    return [" ".join(repr(float(x)) if arr.dtype.kind == "f" else str(int(x)) for x in r)
            for r in rows]


def save_checkpoint(model: Denoiser, path) -> None:
    """Write the plain-text checkpoint: magic line, then per tensor a header and rows."""
    lines = [CKPT_MAGIC]
    cfg = np.array([getattr(model.config, k) for k in _CONFIG_KEYS], dtype=np.int64)
    tensors = [("config", cfg)] + sorted(model.params.items())
    for name, arr in tensors:
        lines.append(" ".join([name, str(arr.dtype), *map(str, arr.shape)]))
        lines.extend(_format_rows(arr))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> Denoiser:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != CKPT_MAGIC:
        raise ValueError(f"unsupported checkpoint version: {lines[0] if lines else ''!r}")
    tensors = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        name, dtype, *dims = lines[i].split()
        shape = tuple(int(x) for x in dims)
        n_rows = 1 if len(shape) <= 1 else int(np.prod(shape[:-1]))
        vals = " ".join(lines[i + 1:i + 1 + n_rows]).split()
        arr = np.array([float(v) for v in vals], dtype=np.dtype(dtype)).reshape(shape)
        tensors[name] = arr
        i += 1 + n_rows
    cfg = tensors.pop("config")
    config = DenoiserConfig(**dict(zip(_CONFIG_KEYS, (int(x) for x in cfg))))
    return Denoiser(config, tensors)


def config_dict(config: DenoiserConfig) -> dict:
    return asdict(config)
