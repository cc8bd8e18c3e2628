"""Rotary position embeddings with a configurable base (theta).

Dimension pairs are interleaved: pair k rotates components (2k, 2k+1) by
angle(p, k) = p * theta^(-2k/head_dim).  Position 0 is the exact identity.
Tables are pure functions of (theta, head_dim, max_positions), so cached
tables and regenerated tables are bit-identical.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RopeTable:
    theta: float
    head_dim: int
    max_positions: int
    cos: np.ndarray  # (max_positions, head_dim/2) float64
    sin: np.ndarray


@functools.lru_cache(maxsize=64)
def _build(theta: float, head_dim: int, max_positions: int) -> RopeTable:
    if head_dim <= 0 or head_dim % 2 != 0:
        raise ValueError(f"head_dim must be positive and even, got {head_dim}")
    if max_positions <= 0:
        raise ValueError(f"max_positions must be positive, got {max_positions}")
    if not theta > 0.0:
        raise ValueError(f"theta must be positive, got {theta}")
    k = np.arange(head_dim // 2, dtype=np.float64)
    inv_freq = theta ** (-2.0 * k / head_dim)
    angles = np.arange(max_positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles)
    sin = np.sin(angles)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return RopeTable(theta=theta, head_dim=head_dim, max_positions=max_positions, cos=cos, sin=sin)


def build_rope_table(theta: float, head_dim: int, max_positions: int) -> RopeTable:
    return _build(float(theta), int(head_dim), int(max_positions))


@functools.lru_cache(maxsize=128)
def _cast_table(theta: float, head_dim: int, max_positions: int, dtype_str: str):
    table = _build(theta, head_dim, max_positions)
    cos = table.cos.astype(dtype_str)
    sin = table.sin.astype(dtype_str)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def apply_rope(
    vectors: np.ndarray, positions: np.ndarray, table: RopeTable, inverse: bool = False
) -> np.ndarray:
    """Rotate head vectors by their position's angles.

    ``vectors`` is (..., T, head_dim); ``positions`` is (T,).  ``inverse``
    applies the transpose rotation (used by the backward pass: the rotation
    is orthogonal, so the gradient is rotated by the negative angle).
    """
    vectors = np.asarray(vectors)
    positions = np.asarray(positions, dtype=np.int64)
    if vectors.shape[-1] != table.head_dim:
        raise ValueError(
            f"vector width {vectors.shape[-1]} != table head_dim {table.head_dim}"
        )
    if positions.ndim != 1 or vectors.shape[-2] != len(positions):
        raise ValueError("positions must be 1-D and match the token axis")
    if len(positions) and (positions.min() < 0 or positions.max() >= table.max_positions):
        raise ValueError(
            f"position out of range: table covers [0, {table.max_positions})"
        )
    cos_full, sin_full = _cast_table(
        table.theta, table.head_dim, table.max_positions, vectors.dtype.str
    )
    cos = cos_full[positions]  # (T, head_dim/2)
    sin = sin_full[positions]
    if inverse:
        sin = -sin
    x = vectors[..., 0::2]
    y = vectors[..., 1::2]
    out = np.empty_like(vectors)
    out[..., 0::2] = x * cos - y * sin
    out[..., 1::2] = x * sin + y * cos
    return out
