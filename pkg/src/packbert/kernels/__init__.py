"""Attention kernel backend selection.

Two interchangeable implementations of the packed attention forward/backward
kernels exist: a compiled Cython extension (float32 only) and a pure-numpy
reference.  The compiled one is used when available; set PACKBERT_ATTN to
"reference" or "compiled" to force a choice.  float64 inputs always take the
reference path (the extension is single-precision by design).
"""

from __future__ import annotations

import os

import numpy as np

from . import reference

_FORCE = os.environ.get("PACKBERT_ATTN", "").strip().lower()
if _FORCE not in ("", "auto", "reference", "compiled"):
    raise RuntimeError(
        f"PACKBERT_ATTN must be 'reference' or 'compiled', got {_FORCE!r}"
    )

try:
    from . import _attnk  # type: ignore[attr-defined]

    _HAVE_COMPILED = True
except ImportError:
    _attnk = None
    _HAVE_COMPILED = False

if _FORCE == "compiled" and not _HAVE_COMPILED:
    raise RuntimeError(
        "PACKBERT_ATTN=compiled but the extension is not built; "
        "reinstall the package with a C toolchain available"
    )


def compiled_available() -> bool:
    return _HAVE_COMPILED


def backend_name(dtype=np.float32, override: str | None = None) -> str:
    """Which backend a call with this dtype would use."""
    choice = override or _FORCE
    if choice not in ("", "auto", "reference", "compiled"):
        raise ValueError(
            f"backend must be 'reference', 'compiled' or 'auto', got {choice!r}"
        )
    if choice in ("", "auto"):
        choice = "compiled" if _HAVE_COMPILED else "reference"
    if choice == "compiled" and np.dtype(dtype) != np.float32:
        choice = "reference"
    if choice == "compiled" and not _HAVE_COMPILED:
        raise RuntimeError("compiled attention backend requested but not built")
    return choice


def attn_forward(q, k, v, boundaries, kind, window, scale, override=None):
    if backend_name(q.dtype, override) == "compiled":
        return _attnk.attn_forward(q, k, v, boundaries, int(kind), int(window), float(scale))
    return reference.attn_forward(q, k, v, boundaries, kind, window, scale)


def attn_backward(q, k, v, d_out, boundaries, kind, window, scale, override=None):
    if backend_name(q.dtype, override) == "compiled":
        return _attnk.attn_backward(
            q, k, v, d_out, boundaries, int(kind), int(window), float(scale)
        )
    return reference.attn_backward(q, k, v, d_out, boundaries, kind, window, scale)
