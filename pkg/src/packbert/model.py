"""Transformer encoder/decoder stack with hand-written gradients.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by dotted names
("layers.3.attn.wq", "final_norm.scale", ...).  ``forward`` runs over a
PackedBatch and can retain per-layer caches; ``backward`` consumes those
caches and returns a gradient dict with the same keys.  A separate padded
path (``forward_padded``) executes conventional dense attention over
(batch, max_len) tensors for the throughput benchmark and equivalence tests.

Architecture per ArchConfig: pre- or post-norm residual blocks, gated
feed-forward (up-projection to 2x intermediate, split into gate/value,
activation(gate) * value, down-projection), rotary positions with per-layer
theta, alternating global/sliding-window attention, optional causal masking.
Linear layers carry no biases unless bias tensors were created at init.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .config import ArchConfig
from .packing import MaskSpec, PackedBatch
from .rope import apply_rope, build_rope_table
from . import kernels
from .attention import attention_padded

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_PHILOX_STREAM = 0xD1B54A32D192ED03


# --- parameter construction -------------------------------------------------


def param_shapes(cfg: ArchConfig, tied: bool = True, linear_bias: bool = False) -> dict[str, tuple]:
    h, f, v = cfg.hidden, cfg.intermediate, cfg.vocab_size
    shapes: dict[str, tuple] = {"tok_emb": (v, h)}
    ln = cfg.norm == "layer_norm"
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{w}"] = (h, h)
            if linear_bias:
                shapes[f"{p}.attn.{w}_b"] = (h,)
        shapes[f"{p}.ffn.wu"] = (h, 2 * f)
        shapes[f"{p}.ffn.wd"] = (f, h)
        if linear_bias:
            shapes[f"{p}.ffn.wu_b"] = (2 * f,)
            shapes[f"{p}.ffn.wd_b"] = (h,)
        for n in ("norm1", "norm2"):
            shapes[f"{p}.{n}.scale"] = (h,)
            if ln:
                shapes[f"{p}.{n}.offset"] = (h,)
    shapes["final_norm.scale"] = (h,)
    if ln:
        shapes["final_norm.offset"] = (h,)
    if not tied:
        shapes["mlm_head.w"] = (h, v)
    shapes["span_head.w"] = (h, 2)
    return shapes


def init_params(
    cfg: ArchConfig,
    seed: int = 0,
    tied: bool = True,
    dtype=np.float32,
    linear_bias: bool = False,
) -> dict[str, np.ndarray]:
    """Scaled normal init: std 0.02, output projections shrunk by 1/sqrt(2L)."""
    rng = np.random.default_rng(seed)
    out_std = 0.02 / math.sqrt(2.0 * cfg.n_layers)
    params: dict[str, np.ndarray] = {}
    for name, shape in sorted(param_shapes(cfg, tied, linear_bias).items()):
        if name.endswith(".scale"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith((".offset", "_b")):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            std = out_std if name.endswith((".wo", ".wd")) else 0.02
            params[name] = rng.normal(0.0, std, size=shape).astype(dtype)
    return params


def is_tied(params: dict[str, np.ndarray]) -> bool:
    return "mlm_head.w" not in params


def zeros_like_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def validate_params(params: dict[str, np.ndarray], cfg: ArchConfig) -> list[str]:
    """Shape/finiteness check against the config; returns violations."""
    v: list[str] = []
    tied = is_tied(params)
    bias = any(k.endswith("_b") for k in params)
    expected = param_shapes(cfg, tied=tied, linear_bias=bias)
    for name, shape in expected.items():
        if name not in params:
            v.append(f"missing tensor {name}")
        elif tuple(params[name].shape) != shape:
            v.append(f"{name}: shape {params[name].shape}, expected {shape}")
        elif not np.all(np.isfinite(params[name])):
            v.append(f"{name}: non-finite values")
    for name in params:
        if name not in expected:
            v.append(f"unexpected tensor {name}")
    return v


# --- primitive ops with backward --------------------------------------------


def act_forward(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "gelu":
        return 0.5 * x * (1.0 + erf(x / _SQRT2))
    if kind == "silu":
        return x / (1.0 + np.exp(-x))
    raise ValueError(f"unknown activation {kind!r}")


def act_grad(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "gelu":
        return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    if kind == "silu":
        sig = 1.0 / (1.0 + np.exp(-x))
        return sig * (1.0 + x * (1.0 - sig))
    raise ValueError(f"unknown activation {kind!r}")


def _norm_forward(x, params, prefix, cfg):
    scale = params[f"{prefix}.scale"]
    if cfg.norm == "layer_norm":
        mean = x.mean(axis=-1, keepdims=True)
        xc = x - mean
        var = (xc * xc).mean(axis=-1, keepdims=True)
        invstd = 1.0 / np.sqrt(var + cfg.norm_eps)
        xhat = xc * invstd
        y = xhat * scale + params[f"{prefix}.offset"]
        return y, (xhat, invstd)
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + cfg.norm_eps)
    return x * r * scale, (x, r)


def _norm_backward(dy, cache, params, prefix, cfg, grads):
    scale = params[f"{prefix}.scale"]
    if cfg.norm == "layer_norm":
        xhat, invstd = cache
        grads[f"{prefix}.scale"] += (dy * xhat).sum(axis=0)
        grads[f"{prefix}.offset"] += dy.sum(axis=0)
        dxhat = dy * scale
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return invstd * (dxhat - m1 - xhat * m2)
    x, r = cache
    grads[f"{prefix}.scale"] += (dy * x * r).sum(axis=0)
    g = dy * scale
    m = (g * x).mean(axis=-1, keepdims=True)
    return r * g - x * (r ** 3) * m


def _linear(x, params, name, extra):
    y = x @ params[name]
    b = params.get(name + "_b")
    if b is not None:
        y = y + b
    if extra is not None and name in extra:
        a_mat, b_mat, s = extra[name]
        y = y + ((x @ a_mat) @ b_mat) * s
    return y


def _linear_backward(dy, x, params, name, grads):
    grads[name] += x.T @ dy
    if name + "_b" in params:
        grads[name + "_b"] += dy.sum(axis=0)
    return dy @ params[name].T


# --- attention / ffn blocks --------------------------------------------------


def _layer_spec(cfg: ArchConfig, layer: int) -> MaskSpec:
    if cfg.attention_mode == "causal":
        return MaskSpec("causal")
    if cfg.layer_is_global(layer):
        return MaskSpec("global_bidirectional")
    return MaskSpec("sliding_window", window=cfg.local_window)


def _split_heads(x, n_heads, head_dim):
    t = x.shape[0]
    return np.ascontiguousarray(x.reshape(t, n_heads, head_dim).transpose(1, 0, 2))


def _merge_heads(x):
    h, t, d = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(t, h * d)


def _attn_forward(x, layer, params, cfg, positions, boundaries, backend, extra):
    p = f"layers.{layer}.attn"
    q = _split_heads(_linear(x, params, f"{p}.wq", extra), cfg.n_heads, cfg.head_dim)
    k = _split_heads(_linear(x, params, f"{p}.wk", extra), cfg.n_heads, cfg.head_dim)
    v = _split_heads(_linear(x, params, f"{p}.wv", extra), cfg.n_heads, cfg.head_dim)
    table = build_rope_table(cfg.rope_theta_for_layer(layer), cfg.head_dim, cfg.max_seq_len)
    qr = apply_rope(q, positions, table)
    kr = apply_rope(k, positions, table)
    spec = _layer_spec(cfg, layer)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    ctx = kernels.attn_forward(qr, kr, v, boundaries, spec.code, spec.window, scale, override=backend)
    merged = _merge_heads(ctx)
    out = _linear(merged, params, f"{p}.wo", extra)
    cache = (x, qr, kr, v, merged, spec, table, scale)
    return out, cache


def _attn_backward(d_out, cache, layer, params, cfg, positions, boundaries, backend, grads):
    x, qr, kr, v, merged, spec, table, scale = cache
    p = f"layers.{layer}.attn"
    d_merged = _linear_backward(d_out, merged, params, f"{p}.wo", grads)
    d_ctx = _split_heads(d_merged, cfg.n_heads, cfg.head_dim)
    dqr, dkr, dv = kernels.attn_backward(
        qr, kr, v, d_ctx, boundaries, spec.code, spec.window, scale, override=backend
    )
    dq = apply_rope(dqr, positions, table, inverse=True)
    dk = apply_rope(dkr, positions, table, inverse=True)
    dx = _linear_backward(_merge_heads(dq), x, params, f"{p}.wq", grads)
    dx += _linear_backward(_merge_heads(dk), x, params, f"{p}.wk", grads)
    dx += _linear_backward(_merge_heads(dv), x, params, f"{p}.wv", grads)
    return dx


def _ffn_forward(x, layer, params, cfg, extra):
    p = f"layers.{layer}.ffn"
    z = _linear(x, params, f"{p}.wu", extra)
    gate, value = z[:, : cfg.intermediate], z[:, cfg.intermediate:]
    inner = act_forward(gate, cfg.activation) * value
    out = _linear(inner, params, f"{p}.wd", extra)
    return out, (x, gate, value, inner)


def _ffn_backward(d_out, cache, layer, params, cfg, grads):
    x, gate, value, inner = cache
    p = f"layers.{layer}.ffn"
    d_inner = _linear_backward(d_out, inner, params, f"{p}.wd", grads)
    act = act_forward(gate, cfg.activation)
    d_gate = d_inner * value * act_grad(gate, cfg.activation)
    d_value = d_inner * act
    dz = np.concatenate([d_gate, d_value], axis=1)
    return _linear_backward(dz, x, params, f"{p}.wu", grads)


# --- full forward / backward --------------------------------------------------


@dataclass
class ForwardOutput:
    hidden: np.ndarray  # (total, hidden) for packed input
    cache: object | None = None


def _dropout_masks(batch: PackedBatch, cfg, n_layers, rate, seq_seeds, dtype):
    """Per-layer inverted-dropout masks, drawn per member sequence.

    Each member owns an independent Philox stream keyed by its seed, consumed
    layer by layer, so masks do not depend on how sequences are grouped into
    microbatches.
    """
    gens = [
        np.random.Generator(np.random.Philox(key=np.array([int(s) & 0xFFFFFFFFFFFFFFFF, _PHILOX_STREAM], dtype=np.uint64)))
        for s in seq_seeds
    ]
    total = batch.total_tokens
    keep = 1.0 - rate
    masks = []
    for _ in range(n_layers):
        m = np.empty((total, cfg.hidden), dtype=dtype)
        for s, g in enumerate(gens):
            lo, hi = int(batch.boundaries[s]), int(batch.boundaries[s + 1])
            m[lo:hi] = (g.random((hi - lo, cfg.hidden)) >= rate) / keep
        masks.append(m)
    return masks


def _validate_batch(batch: PackedBatch, cfg: ArchConfig):
    ids = batch.tokens
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range for vocab_size {cfg.vocab_size}")
    if batch.max_member_len > cfg.max_seq_len:
        raise ValueError(
            f"member length {batch.max_member_len} exceeds max_seq_len {cfg.max_seq_len}"
        )


def forward(
    params: dict[str, np.ndarray],
    cfg: ArchConfig,
    batch: PackedBatch,
    *,
    train: bool = False,
    dropout_rate: float = 0.0,
    seq_seeds=None,
    extra_linear=None,
    backend: str | None = None,
    want_cache: bool = False,
) -> ForwardOutput:
    """Run the stack over a packed batch; returns final hidden states.

    ``want_cache`` retains everything ``backward`` needs.  Attention-output
    dropout is applied only when ``train`` is true, the rate is positive and
    per-sequence seeds are provided.
    """
    _validate_batch(batch, cfg)
    boundaries = batch.boundaries
    positions = batch.positions
    dtype = params["tok_emb"].dtype
    h = params["tok_emb"][batch.tokens]

    use_dropout = train and dropout_rate > 0.0 and seq_seeds is not None
    masks = (
        _dropout_masks(batch, cfg, cfg.n_layers, dropout_rate, seq_seeds, dtype)
        if use_dropout
        else [None] * cfg.n_layers
    )

    layer_caches = []
    pre = cfg.block_style == "pre_norm"
    for i in range(cfg.n_layers):
        if pre:
            y1, n1c = _norm_forward(h, params, f"layers.{i}.norm1", cfg)
            a, ac = _attn_forward(y1, i, params, cfg, positions, boundaries, backend, extra_linear)
            if masks[i] is not None:
                a = a * masks[i]
            h = h + a
            y2, n2c = _norm_forward(h, params, f"layers.{i}.norm2", cfg)
            f, fc = _ffn_forward(y2, i, params, cfg, extra_linear)
            h = h + f
        else:
            a, ac = _attn_forward(h, i, params, cfg, positions, boundaries, backend, extra_linear)
            if masks[i] is not None:
                a = a * masks[i]
            h, n1c = _norm_forward(h + a, params, f"layers.{i}.norm1", cfg)
            f, fc = _ffn_forward(h, i, params, cfg, extra_linear)
            h, n2c = _norm_forward(h + f, params, f"layers.{i}.norm2", cfg)
        if want_cache:
            layer_caches.append((n1c, ac, n2c, fc, masks[i]))
    out, fn_cache = _norm_forward(h, params, "final_norm", cfg)
    cache = None
    if want_cache:
        cache = {
            "batch": batch,
            "positions": positions,
            "layers": layer_caches,
            "final_norm": fn_cache,
            "backend": backend,
        }
    return ForwardOutput(hidden=out, cache=cache)


def backward(
    params: dict[str, np.ndarray],
    cfg: ArchConfig,
    cache: dict,
    d_hidden: np.ndarray,
    grads: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Accumulate gradients of a scalar loss given d(loss)/d(final hidden)."""
    if grads is None:
        grads = zeros_like_params(params)
    batch: PackedBatch = cache["batch"]
    positions = cache["positions"]
    boundaries = batch.boundaries
    backend = cache["backend"]
    dh = _norm_backward(d_hidden, cache["final_norm"], params, "final_norm", cfg, grads)
    pre = cfg.block_style == "pre_norm"
    for i in reversed(range(cfg.n_layers)):
        n1c, ac, n2c, fc, mask = cache["layers"][i]
        if pre:
            d_f = _ffn_backward(dh, fc, i, params, cfg, grads)
            dh = dh + _norm_backward(d_f, n2c, params, f"layers.{i}.norm2", cfg, grads)
            d_a = dh if mask is None else dh * mask
            d_y1 = _attn_backward(
                d_a, ac, i, params, cfg, positions, boundaries, backend, grads
            )
            dh = dh + _norm_backward(d_y1, n1c, params, f"layers.{i}.norm1", cfg, grads)
        else:
            d_t2 = _norm_backward(dh, n2c, params, f"layers.{i}.norm2", cfg, grads)
            d_f = _ffn_backward(d_t2, fc, i, params, cfg, grads)
            dh = d_t2 + d_f
            d_t1 = _norm_backward(dh, n1c, params, f"layers.{i}.norm1", cfg, grads)
            d_a = d_t1 if mask is None else d_t1 * mask
            dh = d_t1 + _attn_backward(
                d_a, ac, i, params, cfg, positions, boundaries, backend, grads
            )
    np.add.at(grads["tok_emb"], batch.tokens, dh)
    return grads


def forward_padded(
    params: dict[str, np.ndarray],
    cfg: ArchConfig,
    ids: np.ndarray,
    lengths: np.ndarray,
) -> np.ndarray:
    """Dense padded forward: ids (batch, max_len), PAD slots cost compute.

    Eval-only; returns hidden states (batch, max_len, hidden).  Outputs at
    PAD slots are garbage by design and must be ignored by the caller.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError(f"expected (batch, max_len) ids, got {ids.shape}")
    bsz, max_len = ids.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (bsz,) or lengths.min() <= 0 or lengths.max() > max_len:
        raise ValueError("lengths must be positive and bounded by max_len")
    if max_len > cfg.max_seq_len:
        raise ValueError(f"max_len {max_len} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range for vocab_size {cfg.vocab_size}")

    positions = np.arange(max_len, dtype=np.int64)
    flat = ids.reshape(-1)
    h = params["tok_emb"][flat]  # (B*L, hidden)

    def to_heads(x):
        return np.ascontiguousarray(
            x.reshape(bsz, max_len, cfg.n_heads, cfg.head_dim).transpose(0, 2, 1, 3)
        )

    scale = 1.0 / math.sqrt(cfg.head_dim)
    pre = cfg.block_style == "pre_norm"
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        if pre:
            y1, _ = _norm_forward(h, params, f"{p}.norm1", cfg)
        else:
            y1 = h
        q = to_heads(_linear(y1, params, f"{p}.attn.wq", None))
        k = to_heads(_linear(y1, params, f"{p}.attn.wk", None))
        v = to_heads(_linear(y1, params, f"{p}.attn.wv", None))
        table = build_rope_table(cfg.rope_theta_for_layer(i), cfg.head_dim, cfg.max_seq_len)
        q = apply_rope(q, positions, table)
        k = apply_rope(k, positions, table)
        spec = _layer_spec(cfg, i)
        ctx = attention_padded(q, k, v, lengths, spec, scale=scale)
        merged = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(bsz * max_len, cfg.hidden)
        a = _linear(merged, params, f"{p}.attn.wo", None)
        if pre:
            h = h + a
            y2, _ = _norm_forward(h, params, f"{p}.norm2", cfg)
            f, _ = _ffn_forward(y2, i, params, cfg, None)
            h = h + f
        else:
            h, _ = _norm_forward(h + a, params, f"{p}.norm1", cfg)
            f, _ = _ffn_forward(h, i, params, cfg, None)
            h, _ = _norm_forward(h + f, params, f"{p}.norm2", cfg)
    out, _ = _norm_forward(h, params, "final_norm", cfg)
    return out.reshape(bsz, max_len, cfg.hidden)


# --- output heads --------------------------------------------------------------


def mlm_logits(hidden: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    if is_tied(params):
        return hidden @ params["tok_emb"].T
    return hidden @ params["mlm_head.w"]


def mlm_logits_vjp(d_logits, hidden, params, grads):
    """Backward of mlm_logits; returns d_hidden, accumulates weight grads."""
    if is_tied(params):
        grads["tok_emb"] += d_logits.T @ hidden
        return d_logits @ params["tok_emb"]
    grads["mlm_head.w"] += hidden.T @ d_logits
    return d_logits @ params["mlm_head.w"].T


def span_logits(hidden: np.ndarray, params: dict[str, np.ndarray]):
    scores = hidden @ params["span_head.w"]
    return scores[:, 0], scores[:, 1]


def span_logits_vjp(d_start, d_end, hidden, params, grads):
    d_scores = np.stack([d_start, d_end], axis=1).astype(hidden.dtype)
    grads["span_head.w"] += hidden.T @ d_scores
    return d_scores @ params["span_head.w"].T


def pool_mean(hidden: np.ndarray, valid_positions) -> np.ndarray:
    """Mean of hidden rows at the given positions (boolean mask or indices)."""
    valid = np.asarray(valid_positions)
    rows = hidden[valid]
    if rows.shape[0] == 0:
        raise ValueError("pool_mean requires at least one valid position")
    return rows.mean(axis=0)


def pool_mean_packed(hidden: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
    """Per-member mean over a packed batch; returns (n_members, hidden)."""
    sums = np.add.reduceat(hidden, boundaries[:-1].astype(np.int64), axis=0)
    lens = np.diff(boundaries).astype(hidden.dtype)
    return sums / lens[:, None]


def pool_mean_packed_vjp(d_pooled: np.ndarray, boundaries: np.ndarray, total: int) -> np.ndarray:
    lens = np.diff(boundaries)
    d_hidden = np.repeat(d_pooled / lens[:, None].astype(d_pooled.dtype), lens, axis=0)
    assert d_hidden.shape[0] == total
    return d_hidden


def predict_span(start_scores: np.ndarray, end_scores: np.ndarray, max_answer_len: int):
    """Best (s, e): s <= e, span length <= max_answer_len, max start[s]+end[e].

    Ties resolve to the shortest span, then the smallest start index.
    """
    if max_answer_len < 1:
        raise ValueError("max_answer_len must be >= 1")
    n = len(start_scores)
    if n == 0 or len(end_scores) != n:
        raise ValueError("score vectors must be non-empty and equally long")
    best_val = -np.inf
    best = (0, 0)
    for d in range(min(max_answer_len, n)):
        vals = start_scores[: n - d] + end_scores[d:]
        i = int(np.argmax(vals))
        if vals[i] > best_val:
            best_val = float(vals[i])
            best = (i, i + d)
    return best
