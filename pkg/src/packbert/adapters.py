"""Low-rank additive adapters and decoder-to-encoder conversion.

An adapter holds a pair (A, B) per targeted weight matrix; the effective
weight is W + (alpha/rank) * A @ B. B starts at zero, so a fresh adapter
is an exact identity. Training moves only the pairs: gradients w.r.t. the
effective weight are projected onto A and B and the base stays frozen.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .config import ArchConfig
from .errors import ConfigError, DataError
from .tensor_store import read_tensors, write_tensors
from .trainer import Checkpoint, TrainResult, _copy_tensors, train_masked

logger = logging.getLogger("packbert.adapters")

# Per-layer matrix roles an adapter may attach to.
DEFAULT_TARGETS = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.wu", "ffn.wd")


@dataclass
class AdapterSet:
    rank: int
    alpha: float
    targets: tuple  # per-layer role suffixes, e.g. "attn.wq"
    phase_tag: str
    tensors: dict  # full param name -> (A (in, r), B (r, out))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def target_names(cfg: ArchConfig, targets=DEFAULT_TARGETS) -> list[str]:
    return [
        f"layers.{layer}.{role}" for layer in range(cfg.n_layers) for role in targets
    ]


def init_adapters(
    params: dict,
    cfg: ArchConfig,
    *,
    rank: int = 16,
    alpha: float = 32.0,
    targets=DEFAULT_TARGETS,
    phase_tag: str = "",
    seed: int = 0,
    init_std: float = 0.02,
) -> AdapterSet:
    """Fresh zero-delta adapter pairs for every targeted matrix."""
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    names = target_names(cfg, targets)
    missing = [n for n in names if n not in params]
    if missing:
        raise ConfigError(f"adapter targets missing from params: {missing[:3]}")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name in sorted(names):
        w = params[name]
        a = rng.normal(0.0, init_std, size=(w.shape[0], rank)).astype(w.dtype)
        b = np.zeros((rank, w.shape[1]), dtype=w.dtype)
        tensors[name] = (a, b)
    return AdapterSet(
        rank=rank,
        alpha=float(alpha),
        targets=tuple(targets),
        phase_tag=phase_tag,
        tensors=tensors,
    )


def adapter_delta(aset: AdapterSet, name: str) -> np.ndarray:
    a, b = aset.tensors[name]
    return (a @ b) * np.asarray(aset.scale, dtype=a.dtype)


def apply_adapters(params: dict, adapter_sets) -> dict:
    """Merge one or more adapters into copies of the base weights.

    Deltas add sequentially in the given order, so merging a list equals
    merging its members one at a time, bit for bit.
    """
    merged = _copy_tensors(params)
    for aset in adapter_sets:
        for name in aset.tensors:
            if name not in merged:
                raise ConfigError(f"adapter targets unknown tensor {name!r}")
            delta = adapter_delta(aset, name)
            if delta.shape != merged[name].shape:
                raise ConfigError(
                    f"adapter delta for {name} has shape {delta.shape}, "
                    f"weight is {merged[name].shape}"
                )
            merged[name] = merged[name] + delta
    return merged


def runtime_extras(aset: AdapterSet) -> dict:
    """Adapter terms for the forward pass without touching any weight."""
    return {
        name: (a, b, aset.scale) for name, (a, b) in aset.tensors.items()
    }


def enable_bidirectional(cfg: ArchConfig) -> ArchConfig:
    """Replace the causal mask with full attention; weights untouched."""
    if cfg.attention_mode == "bidirectional":
        logger.info("attention is already bidirectional; nothing to change")
        return cfg
    return dataclasses.replace(cfg, attention_mode="bidirectional")


class AdapterView:
    """Trainer view that optimizes adapter pairs against frozen base weights.

    The forward pass sees materialized effective weights; after each
    optimizer step the targeted weights are rebuilt from base + delta.
    """

    def __init__(self, base_params: dict, adapters: AdapterSet):
        self.base = base_params
        self.adapters = adapters
        self.eff = apply_adapters(base_params, [adapters])
        self.flat = {}
        for name, (a, b) in adapters.tensors.items():
            self.flat[f"adapter/{name}/A"] = a
            self.flat[f"adapter/{name}/B"] = b

    @property
    def model_params(self):
        return self.eff

    @property
    def opt_params(self):
        return self.flat

    def update_grads(self, grads: dict) -> dict:
        s = self.adapters.scale
        out = {}
        for name, (a, b) in self.adapters.tensors.items():
            dw = grads[name]
            out[f"adapter/{name}/A"] = (dw @ b.T) * np.asarray(s, dtype=dw.dtype)
            out[f"adapter/{name}/B"] = (a.T @ dw) * np.asarray(s, dtype=dw.dtype)
        return out

    def after_update(self):
        for name in self.adapters.tensors:
            self.eff[name] = self.base[name] + adapter_delta(self.adapters, name)

    def snapshot_params(self):
        return _copy_tensors(self.base)

    def extra_meta(self) -> dict:
        return {
            "adapter_rank": self.adapters.rank,
            "adapter_alpha": self.adapters.alpha,
            "adapter_phase": self.adapters.phase_tag,
            "adapter_targets": list(self.adapters.targets),
        }


def train_mntp_adapter(
    params: dict,
    cfg: ArchConfig,
    dataset,
    phase,
    *,
    mask_id: int,
    special_ids,
    rank: int = 16,
    alpha: float = 32.0,
    targets=DEFAULT_TARGETS,
    phase_tag: str = "ext1",
    adapter_seed: int = 0,
    **kwargs,
) -> tuple[AdapterSet, TrainResult]:
    """Adapt a converted decoder with shifted masked-token prediction.

    Only the adapter pairs move; train on top of a bidirectional config.
    """
    if cfg.attention_mode != "bidirectional":
        raise ConfigError(
            "adapter training expects a bidirectional model; "
            "call enable_bidirectional first"
        )
    adapters = init_adapters(
        params,
        cfg,
        rank=rank,
        alpha=alpha,
        targets=targets,
        phase_tag=phase_tag,
        seed=adapter_seed,
    )
    view = AdapterView(params, adapters)
    result = train_masked(
        params,
        cfg,
        dataset,
        phase,
        objective="mntp",
        mask_id=mask_id,
        special_ids=special_ids,
        phase_id=phase_tag,
        view=view,
        **kwargs,
    )
    return adapters, result


def save_adapters(aset: AdapterSet, path) -> None:
    tensors = {}
    for name, (a, b) in aset.tensors.items():
        tensors[f"adapter/{name}/A"] = a
        tensors[f"adapter/{name}/B"] = b
    meta = {
        "format": "packbert-adapters",
        "version": 1,
        "rank": aset.rank,
        "alpha": aset.alpha,
        "targets": list(aset.targets),
        "phase_tag": aset.phase_tag,
    }
    write_tensors(path, tensors, meta)


def load_adapters(path) -> AdapterSet:
    tensors, meta = read_tensors(path)
    if meta.get("format") != "packbert-adapters":
        raise DataError(f"{path} is not an adapter file")
    pairs: dict = {}
    for key, arr in tensors.items():
        parts = key.split("/")
        if len(parts) < 3 or parts[0] != "adapter" or parts[-1] not in ("A", "B"):
            raise DataError(f"{path} has unexpected adapter tensor {key!r}")
        name = "/".join(parts[1:-1])
        pairs.setdefault(name, {})[parts[-1]] = arr
    tensors_out = {}
    for name, ab in pairs.items():
        if set(ab) != {"A", "B"}:
            raise DataError(f"{path} is missing half of the pair for {name}")
        tensors_out[name] = (ab["A"], ab["B"])
    return AdapterSet(
        rank=int(meta["rank"]),
        alpha=float(meta["alpha"]),
        targets=tuple(meta["targets"]),
        phase_tag=meta.get("phase_tag", ""),
        tensors=tensors_out,
    )


def merge_into_checkpoint(ckpt: Checkpoint, adapter_sets) -> Checkpoint:
    """New checkpoint with adapters folded into the weights.

    Absorbed phase tags accumulate in the metadata so a merged model
    remembers what went into it.
    """
    sets = list(adapter_sets)
    merged = apply_adapters(ckpt.params, sets)
    extra = dict(ckpt.extra)
    absorbed = list(extra.get("absorbed_phases", []))
    absorbed.extend(a.phase_tag for a in sets)
    extra["absorbed_phases"] = absorbed
    return dataclasses.replace(ckpt, params=merged, extra=extra)
