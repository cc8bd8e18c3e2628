"""Pure-numpy attention kernels over packed batches.

Reference semantics for the compiled extension: per-segment dense score
matrices with explicit masking.  Works for any float dtype; this is also the
path used for 64-bit gradient checking.
"""

from __future__ import annotations

import numpy as np

from ..packing import KIND_CAUSAL, KIND_GLOBAL, KIND_WINDOW


def _segment_mask(length: int, kind: int, window: int) -> np.ndarray | None:
    """Boolean (length, length) allowed matrix, or None when everything is allowed."""
    if kind == KIND_GLOBAL:
        return None
    idx = np.arange(length)
    if kind == KIND_WINDOW:
        return np.abs(idx[:, None] - idx[None, :]) <= window // 2
    if kind == KIND_CAUSAL:
        return idx[None, :] <= idx[:, None]
    raise ValueError(f"unknown mask kind code {kind}")


def _probs(q_seg, k_seg, mask, scale):
    scores = (q_seg @ k_seg.transpose(0, 2, 1)) * scale
    if mask is not None:
        scores = np.where(mask[None, :, :], scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs


def attn_forward(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    boundaries: np.ndarray,
    kind: int,
    window: int,
    scale: float,
) -> np.ndarray:
    """q, k, v: (heads, total, head_dim); returns the attention output, same shape."""
    out = np.empty_like(q)
    for s in range(len(boundaries) - 1):
        lo, hi = int(boundaries[s]), int(boundaries[s + 1])
        mask = _segment_mask(hi - lo, kind, window)
        probs = _probs(q[:, lo:hi], k[:, lo:hi], mask, scale)
        out[:, lo:hi] = probs @ v[:, lo:hi]
    return out


def attn_backward(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    d_out: np.ndarray,
    boundaries: np.ndarray,
    kind: int,
    window: int,
    scale: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Recompute-based backward pass; returns (dq, dk, dv)."""
    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    for s in range(len(boundaries) - 1):
        lo, hi = int(boundaries[s]), int(boundaries[s + 1])
        q_seg = q[:, lo:hi]
        k_seg = k[:, lo:hi]
        v_seg = v[:, lo:hi]
        g_seg = d_out[:, lo:hi]
        mask = _segment_mask(hi - lo, kind, window)
        probs = _probs(q_seg, k_seg, mask, scale)
        dv[:, lo:hi] = probs.transpose(0, 2, 1) @ g_seg
        d_probs = g_seg @ v_seg.transpose(0, 2, 1)
        row = (d_probs * probs).sum(axis=-1, keepdims=True)
        d_scores = probs * (d_probs - row)  # zero wherever masked: probs == 0 there
        dq[:, lo:hi] = (d_scores @ k_seg) * scale
        dk[:, lo:hi] = (d_scores.transpose(0, 2, 1) @ q_seg) * scale
    return dq, dk, dv
