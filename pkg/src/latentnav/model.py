"""Tiny decoder-only autoregressive token model with exact manual gradients.

numpy is the only substrate: forward caches every intermediate and backward
applies the reverse-mode chain rule by hand, so the finite-difference oracle
in the tests checks this module's own math. float32 for training runs,
float64 wherever gradients are being verified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContextOverflowError, EmptyMaskError
from .serialization import load_container, pack_arrays, sha256_bytes
from .vocab import ResponseGrammar, Vocabulary

MODEL_FORMAT_VERSION = 1

_DTYPES = {"f4": np.float32, "f8": np.float64}
_NEG = -1e30
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    context: int = 512
    dtype: str = "f4"
    init_std: float = 0.02
    ln_eps: float = 1e-5
    seed: int = 0

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    @property
    def head_dim(self) -> int:
        assert self.d_model % self.n_heads == 0
        return self.d_model // self.n_heads


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    dt = config.np_dtype

    def w(*shape):
        return (rng.standard_normal(shape) * config.init_std).astype(dt)

    def zeros(*shape):
        return np.zeros(shape, dtype=dt)

    def ones(*shape):
        return np.ones(shape, dtype=dt)

    p: dict[str, np.ndarray] = {
        "tok_emb": w(config.vocab_size, config.d_model),
        "pos_emb": w(config.context, config.d_model),
        "ln_f.g": ones(config.d_model),
        "ln_f.b": zeros(config.d_model),
        "head.w": w(config.d_model, config.vocab_size),
        "head.b": zeros(config.vocab_size),
    }
    for i in range(config.n_layers):
        p[f"l{i}.ln1.g"] = ones(config.d_model)
        p[f"l{i}.ln1.b"] = zeros(config.d_model)
        p[f"l{i}.attn.w_qkv"] = w(config.d_model, 3 * config.d_model)
        p[f"l{i}.attn.b_qkv"] = zeros(3 * config.d_model)
        p[f"l{i}.attn.w_o"] = w(config.d_model, config.d_model)
        p[f"l{i}.attn.b_o"] = zeros(config.d_model)
        p[f"l{i}.ln2.g"] = ones(config.d_model)
        p[f"l{i}.ln2.b"] = zeros(config.d_model)
        p[f"l{i}.ff.w1"] = w(config.d_model, config.d_ff)
        p[f"l{i}.ff.b1"] = zeros(config.d_ff)
        p[f"l{i}.ff.w2"] = w(config.d_ff, config.d_model)
        p[f"l{i}.ff.b2"] = zeros(config.d_model)
    return p


def param_count(params: dict[str, np.ndarray]) -> int:
    return sum(int(v.size) for v in params.values())


def _layernorm_fwd(x, g, b, eps):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    return xhat * g + b, xhat, inv


def _layernorm_bwd(dout, xhat, inv, g):
    dg = (dout * xhat).sum(axis=(0, 1))
    db = dout.sum(axis=(0, 1))
    dxhat = dout * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _gelu_fwd(x):
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(dout, x, t):
    dinner = _GELU_C * (1.0 + 0.134145 * x * x)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def _softmax_last(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def forward(
    params: dict[str, np.ndarray],
    tokens: np.ndarray,
    config: ModelConfig,
    want_cache: bool = False,
):
    """Causal forward pass. tokens: (B, T) ints. Returns logits (B, T, V),
    plus the intermediate cache when requested."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    B, T = tokens.shape
    if T > config.context:
        raise ContextOverflowError(f"sequence length {T} exceeds context {config.context}")
    D, H, hd = config.d_model, config.n_heads, config.head_dim
    scale = 1.0 / math.sqrt(hd)
    dt = config.np_dtype

    x = params["tok_emb"][tokens] + params["pos_emb"][:T]
    x = x.astype(dt)
    bias = np.triu(np.full((T, T), _NEG, dtype=dt), k=1)

    cache = {"tokens": tokens, "T": T, "B": B, "layers": []} if want_cache else None

    for i in range(config.n_layers):
        lc = {}
        x_in = x
        a1, xhat1, inv1 = _layernorm_fwd(x_in, params[f"l{i}.ln1.g"], params[f"l{i}.ln1.b"], config.ln_eps)
        qkv = a1 @ params[f"l{i}.attn.w_qkv"] + params[f"l{i}.attn.b_qkv"]
        q, k, v = np.split(qkv, 3, axis=-1)
        # (B, H, T, hd)
        q = q.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        k = k.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        v = v.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2)
        scores *= scale
        scores += bias
        # softmax in place; `scores` becomes the probabilities
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        p = scores
        ctx = p @ v  # (B, H, T, hd)
        merged = ctx.transpose(0, 2, 1, 3).reshape(B, T, D)
        attn_out = merged @ params[f"l{i}.attn.w_o"] + params[f"l{i}.attn.b_o"]
        x_mid = x_in + attn_out
        a2, xhat2, inv2 = _layernorm_fwd(x_mid, params[f"l{i}.ln2.g"], params[f"l{i}.ln2.b"], config.ln_eps)
        h_pre = a2 @ params[f"l{i}.ff.w1"] + params[f"l{i}.ff.b1"]
        h_act, tanh_c = _gelu_fwd(h_pre)
        f_out = h_act @ params[f"l{i}.ff.w2"] + params[f"l{i}.ff.b2"]
        x = x_mid + f_out
        if want_cache:
            lc.update(
                a1=a1, xhat1=xhat1, inv1=inv1, q=q, k=k, v=v, p=p, merged=merged,
                a2=a2, xhat2=xhat2, inv2=inv2, h_pre=h_pre, h_act=h_act, tanh_c=tanh_c,
            )
            cache["layers"].append(lc)

    af, xhatf, invf = _layernorm_fwd(x, params["ln_f.g"], params["ln_f.b"], config.ln_eps)
    logits = af @ params["head.w"] + params["head.b"]
    if want_cache:
        cache["af"] = af
        cache["xhatf"] = xhatf
        cache["invf"] = invf
        return logits, cache
    return logits


def backward_from_dlogits(
    params: dict[str, np.ndarray],
    cache: dict,
    dlogits: np.ndarray,
    config: ModelConfig,
) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients for every parameter given dL/dlogits."""
    B, T = cache["B"], cache["T"]
    D, H, hd = config.d_model, config.n_heads, config.head_dim
    scale = 1.0 / math.sqrt(hd)
    tokens = cache["tokens"]
    grads: dict[str, np.ndarray] = {}

    af = cache["af"]
    grads["head.w"] = af.reshape(-1, D).T @ dlogits.reshape(-1, dlogits.shape[-1])
    grads["head.b"] = dlogits.sum(axis=(0, 1))
    daf = dlogits @ params["head.w"].T
    dx, grads["ln_f.g"], grads["ln_f.b"] = _layernorm_bwd(daf, cache["xhatf"], cache["invf"], params["ln_f.g"])

    for i in reversed(range(config.n_layers)):
        lc = cache["layers"][i]
        # feed-forward
        df_out = dx
        grads[f"l{i}.ff.w2"] = lc["h_act"].reshape(-1, config.d_ff).T @ df_out.reshape(-1, D)
        grads[f"l{i}.ff.b2"] = df_out.sum(axis=(0, 1))
        dh_act = df_out @ params[f"l{i}.ff.w2"].T
        dh_pre = _gelu_bwd(dh_act, lc["h_pre"], lc["tanh_c"])
        grads[f"l{i}.ff.w1"] = lc["a2"].reshape(-1, D).T @ dh_pre.reshape(-1, config.d_ff)
        grads[f"l{i}.ff.b1"] = dh_pre.sum(axis=(0, 1))
        da2 = dh_pre @ params[f"l{i}.ff.w1"].T
        dx_mid, grads[f"l{i}.ln2.g"], grads[f"l{i}.ln2.b"] = _layernorm_bwd(
            da2, lc["xhat2"], lc["inv2"], params[f"l{i}.ln2.g"]
        )
        dx_mid = dx_mid + dx  # residual

        # attention
        dattn_out = dx_mid
        grads[f"l{i}.attn.w_o"] = lc["merged"].reshape(-1, D).T @ dattn_out.reshape(-1, D)
        grads[f"l{i}.attn.b_o"] = dattn_out.sum(axis=(0, 1))
        dmerged = dattn_out @ params[f"l{i}.attn.w_o"].T
        dctx = dmerged.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        p, q, k, v = lc["p"], lc["q"], lc["k"], lc["v"]
        dp = dctx @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ dctx
        row = np.einsum("bhij,bhij->bhi", dp, p)[..., None]
        dp -= row
        dp *= p
        dscores = dp
        dq = dscores @ k * scale
        dk = dscores.transpose(0, 1, 3, 2) @ q * scale
        dqkv = np.concatenate(
            [
                dq.transpose(0, 2, 1, 3).reshape(B, T, D),
                dk.transpose(0, 2, 1, 3).reshape(B, T, D),
                dv.transpose(0, 2, 1, 3).reshape(B, T, D),
            ],
            axis=-1,
        )
        grads[f"l{i}.attn.w_qkv"] = lc["a1"].reshape(-1, D).T @ dqkv.reshape(-1, 3 * D)
        grads[f"l{i}.attn.b_qkv"] = dqkv.sum(axis=(0, 1))
        da1 = dqkv @ params[f"l{i}.attn.w_qkv"].T
        dx_in, grads[f"l{i}.ln1.g"], grads[f"l{i}.ln1.b"] = _layernorm_bwd(
            da1, lc["xhat1"], lc["inv1"], params[f"l{i}.ln1.g"]
        )
        dx = dx_in + dx_mid  # residual

    grads["pos_emb"] = np.zeros_like(params["pos_emb"])
    grads["pos_emb"][:T] = dx.sum(axis=0)
    grads["tok_emb"] = np.zeros_like(params["tok_emb"])
    np.add.at(grads["tok_emb"], tokens.reshape(-1), dx.reshape(-1, D))
    return grads


# ---------------------------------------------------------------------------
# Loss


def _flatten_for_loss(logits, mask):
    logits = np.asarray(logits)
    if logits.ndim == 2:
        logits = logits[None]
    if mask is None:
        mask = np.ones(logits.shape[:2], dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 1:
        mask = mask[None]
    return logits, mask


def loss_ce(logits, targets, mask=None) -> float:
    """Mean negative log-likelihood over masked positions.

    Hard targets: integer ids with logits' leading shape. Soft targets: a
    distribution per position with logits' full shape (loss is the
    cross-entropy -sum p_tilde log p_hat).
    """
    logits, mask = _flatten_for_loss(logits, mask)
    n = mask.sum()
    if n == 0:
        raise EmptyMaskError("loss mask selects no positions")
    x = logits.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(x - m).sum(axis=-1, keepdims=True)) + m
    logp = x - logz
    targets = np.asarray(targets)
    if targets.dtype.kind in "iu":
        if targets.ndim == 1:
            targets = targets[None]
        picked = np.take_along_axis(logp, targets[..., None].astype(np.int64), axis=-1)[..., 0]
        nll = -picked
    else:
        if targets.ndim == 2:
            targets = targets[None]
        nll = -(targets * logp).sum(axis=-1)
    return float((nll * mask).sum() / n)


def dlogits_ce(logits, targets, mask=None) -> tuple[float, np.ndarray]:
    """Loss plus dLoss/dlogits for the mean-over-masked-positions CE."""
    logits, mask = _flatten_for_loss(logits, mask)
    n = mask.sum()
    if n == 0:
        raise EmptyMaskError("loss mask selects no positions")
    x = logits.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    probs = e / z
    logp = x - (np.log(z) + m)
    targets = np.asarray(targets)
    if targets.dtype.kind in "iu":
        if targets.ndim == 1:
            targets = targets[None]
        target_dist = np.zeros_like(probs)
        b_idx, t_idx = np.indices(targets.shape)
        target_dist[b_idx, t_idx, targets.astype(np.int64)] = 1.0
    else:
        if targets.ndim == 2:
            targets = targets[None]
        target_dist = targets.astype(np.float64)
    nll = -(target_dist * logp).sum(axis=-1)
    loss = float((nll * mask).sum() / n)
    d = (probs - target_dist) * mask[..., None] / n
    return loss, d


def loss_and_grads(
    params: dict[str, np.ndarray],
    tokens: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray,
    config: ModelConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    """Forward + CE + full backward. targets/mask are aligned with logits
    positions (the caller handles any next-token shift)."""
    logits, cache = forward(params, tokens, config, want_cache=True)
    loss, dlogits = dlogits_ce(logits, targets, mask)
    grads = backward_from_dlogits(params, cache, dlogits.astype(config.np_dtype), config)
    return loss, grads


# ---------------------------------------------------------------------------
# Optimizer


class SGDMomentum:
    """SGD with classical momentum, cosine learning-rate decay and
    global-norm gradient clipping."""

    def __init__(
        self,
        params,
        lr: float,
        momentum: float = 0.9,
        total_steps: int = 1000,
        min_lr_frac: float = 0.05,
        clip_norm: float = 1.0,
    ):
        self.base_lr = lr
        self.momentum = momentum
        self.total_steps = max(1, total_steps)
        self.min_lr_frac = min_lr_frac
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def current_lr(self) -> float:
        frac = min(1.0, self.t / self.total_steps)
        lo = self.base_lr * self.min_lr_frac
        return lo + 0.5 * (self.base_lr - lo) * (1.0 + math.cos(math.pi * frac))

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        lr = self.current_lr()
        scale = 1.0
        if self.clip_norm:
            total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
        for key, g in grads.items():
            v = self.velocity[key]
            v *= self.momentum
            v -= (lr * scale) * g.astype(v.dtype)
            params[key] += v
        self.t += 1


# ---------------------------------------------------------------------------
# Greedy decoding with a per-call key/value cache


@dataclass
class DecodeResult:
    tokens: list[int]
    generated: int
    grammar_ok: bool
    truncated: bool


class _KVCache:
    def __init__(self, config: ModelConfig, capacity: int):
        self.k = [
            np.zeros((config.n_heads, capacity, config.head_dim), dtype=config.np_dtype)
            for _ in range(config.n_layers)
        ]
        self.v = [
            np.zeros((config.n_heads, capacity, config.head_dim), dtype=config.np_dtype)
            for _ in range(config.n_layers)
        ]
        self.length = 0


def _prefill(params, tokens, config: ModelConfig, capacity: int):
    logits, cache = forward(params, np.asarray(tokens)[None, :], config, want_cache=True)
    kv = _KVCache(config, capacity)
    T = len(tokens)
    for i, lc in enumerate(cache["layers"]):
        kv.k[i][:, :T] = lc["k"][0]
        kv.v[i][:, :T] = lc["v"][0]
    kv.length = T
    return logits[0, -1], kv


def _decode_step(params, config: ModelConfig, kv: _KVCache, token: int, pos: int) -> np.ndarray:
    D, H, hd = config.d_model, config.n_heads, config.head_dim
    scale = 1.0 / math.sqrt(hd)
    eps = config.ln_eps
    x = (params["tok_emb"][token] + params["pos_emb"][pos]).astype(config.np_dtype)

    def ln(vec, g, b):
        mean = vec.mean()
        inv = 1.0 / math.sqrt(vec.var() + eps)
        return (vec - mean) * inv * g + b

    for i in range(config.n_layers):
        a1 = ln(x, params[f"l{i}.ln1.g"], params[f"l{i}.ln1.b"])
        qkv = a1 @ params[f"l{i}.attn.w_qkv"] + params[f"l{i}.attn.b_qkv"]
        q, k, v = np.split(qkv, 3)
        q = q.reshape(H, hd)
        kv.k[i][:, pos] = k.reshape(H, hd)
        kv.v[i][:, pos] = v.reshape(H, hd)
        keys = kv.k[i][:, : pos + 1]
        vals = kv.v[i][:, : pos + 1]
        scores = np.einsum("hd,htd->ht", q, keys) * scale
        scores -= scores.max(axis=1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=1, keepdims=True)
        ctx = np.einsum("ht,htd->hd", w, vals).reshape(D)
        x = x + ctx @ params[f"l{i}.attn.w_o"] + params[f"l{i}.attn.b_o"]
        a2 = ln(x, params[f"l{i}.ln2.g"], params[f"l{i}.ln2.b"])
        h_act, _ = _gelu_fwd(a2 @ params[f"l{i}.ff.w1"] + params[f"l{i}.ff.b1"])
        x = x + h_act @ params[f"l{i}.ff.w2"] + params[f"l{i}.ff.b2"]
    af = ln(x, params["ln_f.g"], params["ln_f.b"])
    return af @ params["head.w"] + params["head.b"]


def decode_greedy(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    vocab: Vocabulary,
    query: list[int],
    mode: tuple[int, int],
    k: int,
    constrained: bool = True,
    trace_budget: int = 48,
    latent_tokens: int = 30,
    max_new: int | None = None,
) -> DecodeResult:
    """Greedy argmax decoding of one response; ties go to the lowest id.

    Constrained decoding masks logits to the mode grammar, so responses are
    grammar-valid by construction. Unconstrained decoding reports validity.
    """
    grammar = ResponseGrammar(vocab, mode, k, trace_budget, latent_tokens)
    g_t, g_v = mode
    worst = (2 + trace_budget if g_t else 0) + (latent_tokens if g_v else 0) + k + 1
    budget = worst + 4 if max_new is None else max_new
    if len(query) + budget > config.context:
        budget = config.context - len(query)
        if budget <= 0:
            raise ContextOverflowError("query leaves no room to decode")
    logits, kv = _prefill(params, query, config, len(query) + budget)

    state = grammar.initial()
    out: list[int] = []
    generated = 0
    truncated = True
    for step_i in range(budget):
        if constrained:
            allowed = grammar.allowed(state)
            masked = np.full(logits.shape, -np.inf)
            masked[allowed] = logits[allowed]
            token = int(np.argmax(masked))
        else:
            token = int(np.argmax(logits))
        out.append(token)
        generated += 1
        if token == vocab.eos:
            truncated = False
            break
        if constrained:
            state = grammar.advance(state, token)
            if state.phase == "done":
                truncated = False
                break
        if step_i < budget - 1:
            logits = _decode_step(params, config, kv, token, len(query) + step_i)
    grammar_ok = grammar.validate(out)
    return DecodeResult(tokens=out, generated=generated, grammar_ok=grammar_ok, truncated=truncated)


# ---------------------------------------------------------------------------
# Checkpoints


def model_to_bytes(params: dict[str, np.ndarray], config: ModelConfig, vocab: Vocabulary) -> bytes:
    meta = {
        "kind": "model",
        "format_version": MODEL_FORMAT_VERSION,
        "config": {
            "vocab_size": config.vocab_size,
            "n_layers": config.n_layers,
            "n_heads": config.n_heads,
            "d_model": config.d_model,
            "d_ff": config.d_ff,
            "context": config.context,
            "dtype": config.dtype,
            "init_std": config.init_std,
            "ln_eps": config.ln_eps,
            "seed": config.seed,
        },
        "vocab_manifest": vocab.manifest(),
    }
    return pack_arrays(meta, params)


def save_model(params, config: ModelConfig, vocab: Vocabulary, path: str | Path) -> str:
    data = model_to_bytes(params, config, vocab)
    Path(path).write_bytes(data)
    return sha256_bytes(data)


def model_hash(params, config: ModelConfig, vocab: Vocabulary) -> str:
    return sha256_bytes(model_to_bytes(params, config, vocab))


def load_model(path: str | Path) -> tuple[dict[str, np.ndarray], ModelConfig, Vocabulary]:
    meta, arrays = load_container(path)
    if meta.get("kind") != "model" or meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError("not a model checkpoint of a supported version")
    config = ModelConfig(**meta["config"])
    manifest = meta["vocab_manifest"]
    vocab = Vocabulary(manifest["latent_count"])
    if list(vocab.id_to_token) != manifest["tokens"]:
        raise ValueError("vocabulary manifest does not match this build's token tables")
    params = {k: v.astype(config.np_dtype) for k, v in arrays.items()}
    return params, config, vocab
