"""Long-context adaptation: swap the global rotation base, then keep training.

Extension touches no learned tensor. It only changes how positions are
rotated on global-attention layers and how long an input may be; the
follow-up training phases do the actual adaptation work.
"""

from __future__ import annotations

import dataclasses

from .config import ArchConfig, TrainPhaseConfig
from .errors import ConfigError
from .trainer import TrainResult, train_masked

EXTENSION_PHASES = ("ext1", "ext2")


def extend(
    params: dict,
    cfg: ArchConfig,
    new_theta: float = 160_000.0,
    new_max_len: int = 8_192,
) -> tuple[dict, ArchConfig]:
    """Raise the global-attention rotation base and the length ceiling.

    Local-attention layers keep their own base untouched. Idempotent:
    applying the same arguments twice equals applying them once.
    """
    if new_max_len < cfg.max_seq_len:
        raise ConfigError(
            f"cannot shrink max_seq_len from {cfg.max_seq_len} to {new_max_len}"
        )
    if new_theta <= 0:
        raise ConfigError(f"rotation base must be positive, got {new_theta}")
    new_cfg = dataclasses.replace(
        cfg, rope_theta_global=float(new_theta), max_seq_len=int(new_max_len)
    )
    return params, new_cfg


def run_phase(
    params: dict,
    cfg: ArchConfig,
    phase_id: str,
    dataset,
    phase: TrainPhaseConfig,
    *,
    mask_id: int,
    special_ids,
    **kwargs,
) -> TrainResult:
    """Continue masked-token training under an extension phase's settings.

    The phase config carries the schedule split: the first phase runs at a
    constant rate, the second decays by 1 - sqrt(fraction) over its final
    decay_tokens. Both are plain trainer runs tagged with the phase id.
    """
    if phase_id not in EXTENSION_PHASES:
        raise ConfigError(
            f"unknown extension phase {phase_id!r}; expected one of {EXTENSION_PHASES}"
        )
    return train_masked(
        params,
        cfg,
        dataset,
        phase,
        objective="mlm",
        mask_id=mask_id,
        special_ids=special_ids,
        phase_id=phase_id,
        **kwargs,
    )
