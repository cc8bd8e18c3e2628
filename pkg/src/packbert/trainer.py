"""Training loops with deterministic data order and auditable provenance.

One (seed, dataset) pair fixes the epoch shuffles, the batch membership,
every mask draw and every dropout mask, and therefore every parameter bit.
Each optimizer step appends a provenance record naming the sequences it
consumed, so a checkpoint can be audited or replayed exactly.

The same engine drives masked-token pretraining (MLM and its shifted
variant), span extraction fine-tuning, and contrastive embedding
fine-tuning; objectives differ only in how a batch turns into gradients.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import (
    ArchConfig,
    TrainPhaseConfig,
    arch_from_pairs,
    arch_to_pairs,
    format_pairs,
    parse_kv_text,
    phase_from_pairs,
    phase_to_pairs,
    validate_phase,
)
from .errors import ConfigError, DataError, TrainingError
from .model import (
    backward,
    forward,
    mlm_logits,
    mlm_logits_vjp,
    pool_mean_packed,
    pool_mean_packed_vjp,
    span_logits,
    span_logits_vjp,
    zeros_like_params,
)
from .objectives import info_nce, mlm_loss, mlm_mask, mntp_targets, _log_softmax
from .optim import OptState, lr_at, step as opt_step
from .packing import pack
from .tensor_store import read_tensors, write_tensors
from .util import (
    PURPOSE_DROP,
    PURPOSE_MASK,
    PURPOSE_ORDER,
    dataset_digest,
    derived_rng,
    derived_seed,
)

logger = logging.getLogger("packbert.trainer")

_U64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# Provenance


@dataclass(frozen=True)
class ProvenanceRecord:
    step: int
    token_count: int  # cumulative tokens consumed after this step
    sequence_ids: tuple[int, ...]  # dataset indices in consumption order
    digest: str  # 32 hex chars, replayable from (seed, step, ids)


def _record_digest(seed: int, step: int, ids) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed & _U64).to_bytes(8, "little"))
    h.update(int(step).to_bytes(8, "little"))
    for i in ids:
        h.update(int(i).to_bytes(8, "little"))
    return h.hexdigest()


class ProvenanceLog:
    """Append-only record of which sequences fed each optimizer step."""

    MAGIC = b"PBLOG001"

    def __init__(self, records=()):
        self.records: list[ProvenanceRecord] = list(records)

    def append(self, record: ProvenanceRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, ProvenanceLog) and self.records == other.records

    def verify(self, seed: int) -> None:
        """Recompute every record digest; mismatch means the log was edited."""
        for rec in self.records:
            want = _record_digest(seed, rec.step, rec.sequence_ids)
            if want != rec.digest:
                raise TrainingError(
                    f"provenance digest mismatch at step {rec.step}; log does not replay"
                )

    def save(self, path) -> None:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "wb") as f:
            f.write(self.MAGIC)
            for rec in self.records:
                ids = rec.sequence_ids
                payload = struct.pack("<QQI", rec.step, rec.token_count, len(ids))
                payload += struct.pack(f"<{len(ids)}Q", *ids) if ids else b""
                payload += bytes.fromhex(rec.digest)
                f.write(struct.pack("<I", len(payload)))
                f.write(payload)

    @classmethod
    def load(cls, path) -> "ProvenanceLog":
        try:
            raw = Path(path).read_bytes()
        except OSError as e:
            raise DataError(f"cannot read provenance log {path}: {e}") from e
        if raw[: len(cls.MAGIC)] != cls.MAGIC:
            raise DataError(f"{path} is not a provenance log (bad magic)")
        off = len(cls.MAGIC)
        records = []
        while off < len(raw):
            if off + 4 > len(raw):
                raise DataError(f"{path} is truncated at record boundary")
            (plen,) = struct.unpack_from("<I", raw, off)
            off += 4
            if off + plen > len(raw):
                raise DataError(f"{path} is truncated inside a record")
            step_no, token_count, n = struct.unpack_from("<QQI", raw, off)
            ids = struct.unpack_from(f"<{n}Q", raw, off + 20)
            digest = raw[off + 20 + 8 * n : off + plen].hex()
            if len(digest) != 32:
                raise DataError(f"{path} has a malformed digest at step {step_no}")
            records.append(
                ProvenanceRecord(
                    step=step_no,
                    token_count=token_count,
                    sequence_ids=tuple(int(i) for i in ids),
                    digest=digest,
                )
            )
            off += plen
        return cls(records)


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt: OptState
    cfg: ArchConfig
    phase: TrainPhaseConfig
    phase_id: str
    step: int
    tokens_seen: int
    epoch: int
    pos_in_epoch: int  # sequences already drawn from the current epoch order
    consumed: int  # sequence instances consumed across all epochs
    dataset_digest: str
    n_provenance: int
    extra: dict = field(default_factory=dict)


def _copy_tensors(d: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in d.items()}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, arr in ckpt.params.items():
        tensors[f"params/{name}"] = arr
    for name, arr in ckpt.opt.m.items():
        tensors[f"opt.m/{name}"] = arr
    for name, arr in ckpt.opt.v.items():
        tensors[f"opt.v/{name}"] = arr
    meta = {
        "format": "packbert-checkpoint",
        "version": 1,
        "phase_id": ckpt.phase_id,
        "arch": format_pairs(arch_to_pairs(ckpt.cfg)),
        "phase": format_pairs(phase_to_pairs(ckpt.phase)),
        "counters": {
            "step": ckpt.step,
            "tokens_seen": ckpt.tokens_seen,
            "epoch": ckpt.epoch,
            "pos_in_epoch": ckpt.pos_in_epoch,
            "consumed": ckpt.consumed,
            "n_provenance": ckpt.n_provenance,
        },
        "opt": {
            "t": ckpt.opt.t,
            "beta1": ckpt.opt.betas[0],
            "beta2": ckpt.opt.betas[1],
            "eps": ckpt.opt.eps,
            "weight_decay": ckpt.opt.weight_decay,
        },
        "dataset_digest": ckpt.dataset_digest,
        "extra": ckpt.extra,
    }
    write_tensors(path, tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = read_tensors(path)
    if meta.get("format") != "packbert-checkpoint":
        raise DataError(f"{path} is not a checkpoint (format {meta.get('format')!r})")
    params, m, v = {}, {}, {}
    for name, arr in tensors.items():
        group, _, rest = name.partition("/")
        if group == "params":
            params[rest] = arr
        elif group == "opt.m":
            m[rest] = arr
        elif group == "opt.v":
            v[rest] = arr
        else:
            raise DataError(f"{path} has unexpected tensor group {group!r}")
    counters = meta["counters"]
    opt_meta = meta["opt"]
    opt = OptState(
        m=m,
        v=v,
        t=int(opt_meta["t"]),
        betas=(float(opt_meta["beta1"]), float(opt_meta["beta2"])),
        eps=float(opt_meta["eps"]),
        weight_decay=float(opt_meta["weight_decay"]),
    )
    return Checkpoint(
        params=params,
        opt=opt,
        cfg=arch_from_pairs(parse_kv_text(meta["arch"])),
        phase=phase_from_pairs(parse_kv_text(meta["phase"])),
        phase_id=meta["phase_id"],
        step=int(counters["step"]),
        tokens_seen=int(counters["tokens_seen"]),
        epoch=int(counters["epoch"]),
        pos_in_epoch=int(counters["pos_in_epoch"]),
        consumed=int(counters["consumed"]),
        dataset_digest=meta["dataset_digest"],
        n_provenance=int(counters["n_provenance"]),
        extra=meta.get("extra", {}),
    )


# ---------------------------------------------------------------------------
# Trainable views: what the optimizer actually moves


class DirectView:
    """Full fine-tune: the model parameters are the optimized tensors."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params

    @property
    def model_params(self):
        return self.params

    @property
    def opt_params(self):
        return self.params

    def update_grads(self, grads):
        return grads

    def after_update(self):
        pass

    def snapshot_params(self):
        return _copy_tensors(self.params)

    def extra_meta(self) -> dict:
        return {}


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    checkpoints: list[Checkpoint]
    provenance: ProvenanceLog
    metrics: list[tuple[int, int, float, float]]  # (step, tokens, loss, lr)
    view: object = None


# ---------------------------------------------------------------------------
# Engine


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return derived_rng(seed, PURPOSE_ORDER, epoch).permutation(n)


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def _train_loop(
    view,
    cfg: ArchConfig,
    phase: TrainPhaseConfig,
    *,
    lengths,
    compute,
    phase_id: str,
    data_digest: str,
    checkpoint_interval_tokens: int = 0,
    max_epochs: int = 0,
    out_dir=None,
    resume_from: Checkpoint | None = None,
    extra_meta: dict | None = None,
) -> TrainResult:
    problems = validate_phase(phase)
    if problems:
        raise ConfigError("; ".join(problems))
    n_items = len(lengths)
    if n_items == 0:
        raise DataError("empty dataset")
    batch_size = phase.batch_tokens_or_sequences
    if batch_size > n_items:
        raise TrainingError(
            f"batch of {batch_size} sequences exceeds dataset size {n_items}"
        )

    if resume_from is not None:
        if resume_from.dataset_digest != data_digest:
            raise TrainingError(
                "dataset digest does not match the checkpoint; resume refused"
            )
        step_no = resume_from.step
        tokens_seen = resume_from.tokens_seen
        epoch = resume_from.epoch
        pos = resume_from.pos_in_epoch
        consumed = resume_from.consumed
        state = OptState(
            m=_copy_tensors(resume_from.opt.m),
            v=_copy_tensors(resume_from.opt.v),
            t=resume_from.opt.t,
            betas=resume_from.opt.betas,
            eps=resume_from.opt.eps,
            weight_decay=resume_from.opt.weight_decay,
        )
    else:
        step_no = tokens_seen = epoch = pos = consumed = 0
        state = OptState.init(view.opt_params, phase)

    interval = checkpoint_interval_tokens
    next_mark = (tokens_seen // interval + 1) * interval if interval else None
    budget = phase.token_budget
    order = _epoch_order(phase.seed, epoch, n_items)
    prov = ProvenanceLog()
    metrics: list[tuple[int, int, float, float]] = []
    snapshots: list[Checkpoint] = []
    out_path = Path(out_dir) if out_dir is not None else None
    base_extra = dict(extra_meta or {})

    def snapshot() -> Checkpoint:
        return Checkpoint(
            params=view.snapshot_params(),
            opt=OptState(
                m=_copy_tensors(state.m),
                v=_copy_tensors(state.v),
                t=state.t,
                betas=state.betas,
                eps=state.eps,
                weight_decay=state.weight_decay,
            ),
            cfg=cfg,
            phase=phase,
            phase_id=phase_id,
            step=step_no,
            tokens_seen=tokens_seen,
            epoch=epoch,
            pos_in_epoch=pos,
            consumed=consumed,
            dataset_digest=data_digest,
            n_provenance=(resume_from.n_provenance if resume_from else 0) + len(prov),
            extra={**base_extra, **view.extra_meta()},
        )

    def emit(ckpt: Checkpoint, name: str) -> None:
        if out_path is None:
            return
        save_checkpoint(ckpt, out_path / name)
        prov.save(out_path / "provenance.bin")

    metrics_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_path / "metrics.txt", "a", encoding="utf-8")

    try:
        while tokens_seen < budget:
            if pos + batch_size > n_items:
                dropped = n_items - pos
                if dropped:
                    logger.info(
                        "epoch %d: dropping final partial batch of %d sequences",
                        epoch,
                        dropped,
                    )
                epoch += 1
                pos = 0
                if max_epochs and epoch >= max_epochs:
                    logger.info("dataset exhausted after %d epochs", epoch)
                    break
                order = _epoch_order(phase.seed, epoch, n_items)
                continue
            chosen = order[pos : pos + batch_size]
            pos += batch_size
            members = sorted((int(g) for g in chosen), key=lambda g: (lengths[g], g))
            items = [(g, consumed + j) for j, g in enumerate(members)]

            grads = zeros_like_params(view.model_params)
            loss, batch_tokens = compute(items, grads)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss!r} at step {step_no + 1}")

            consumed += batch_size
            step_no += 1
            tokens_seen += batch_tokens
            lr = lr_at(tokens_seen, phase)
            opt_step(view.opt_params, view.update_grads(grads), state, lr)
            view.after_update()

            prov.append(
                ProvenanceRecord(
                    step=step_no,
                    token_count=tokens_seen,
                    sequence_ids=tuple(members),
                    digest=_record_digest(phase.seed, step_no, members),
                )
            )
            metrics.append((step_no, tokens_seen, float(loss), lr))
            if metrics_file is not None:
                metrics_file.write(
                    f"step={step_no} tokens={tokens_seen} loss={float(loss)!r} lr={lr!r}\n"
                )
                metrics_file.flush()

            if interval and tokens_seen >= next_mark:
                ckpt = snapshot()
                snapshots.append(ckpt)
                emit(ckpt, f"ckpt_step{step_no:08d}.pbt")
                next_mark = (tokens_seen // interval + 1) * interval
    finally:
        if metrics_file is not None:
            metrics_file.close()

    final = snapshot()
    if not (snapshots and snapshots[-1].step == final.step):
        snapshots.append(final)
    else:
        final = snapshots[-1]
    emit(final, "ckpt_final.pbt")
    return TrainResult(
        checkpoint=final,
        checkpoints=snapshots,
        provenance=prov,
        metrics=metrics,
        view=view,
    )


# ---------------------------------------------------------------------------
# Masked-token objectives (MLM and the shifted MNTP variant)

MASKED_OBJECTIVES = ("mlm", "mntp")


def _check_sequences(dataset, cfg: ArchConfig, phase: TrainPhaseConfig):
    if len(dataset) == 0:
        raise DataError("empty dataset")
    limit = min(cfg.max_seq_len, phase.max_seq_len)
    seqs = []
    for i, s in enumerate(dataset):
        arr = np.asarray(s, dtype=np.int32)
        if arr.ndim != 1 or arr.size == 0:
            raise DataError(f"sequence {i} is empty or not one-dimensional")
        if arr.size > limit:
            raise DataError(
                f"sequence {i} has {arr.size} tokens, over the {limit}-token limit"
            )
        seqs.append(arr)
    return seqs


def train_masked(
    params: dict[str, np.ndarray],
    cfg: ArchConfig,
    dataset,
    phase: TrainPhaseConfig,
    *,
    objective: str = "mlm",
    mask_id: int,
    special_ids,
    mask_policy: str = "all_mask",
    dropout_rate: float = 0.0,
    phase_id: str = "pretrain",
    checkpoint_interval_tokens: int = 0,
    max_epochs: int = 0,
    out_dir=None,
    backend: str | None = None,
    resume_from: Checkpoint | None = None,
    view=None,
) -> TrainResult:
    """Pretrain on masked-token prediction over packed variable-length batches.

    objective "mlm" trains each masked position against its own identity;
    "mntp" trains the position one to the left of each mask instead, which
    is the form a converted decoder is adapted with.
    """
    if objective not in MASKED_OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}")
    seqs = _check_sequences(dataset, cfg, phase)
    digest = dataset_digest(seqs)
    if view is None:
        view = DirectView(_copy_tensors(params))
    live = view.model_params
    micro = phase.microbatch or phase.batch_tokens_or_sequences

    def rows_and_targets(seq, masked):
        if objective == "mlm":
            return masked.mask_positions, seq[masked.mask_positions].astype(np.int64)
        return mntp_targets(seq, masked.mask_positions)

    def compute(items, grads):
        corrupted, all_rows, all_targets = [], [], []
        for g, inst in items:
            rng = derived_rng(phase.seed, PURPOSE_MASK, inst)
            masked = mlm_mask(
                seqs[g],
                phase.mask_rate,
                rng,
                special_ids,
                mask_policy,
                mask_id,
                cfg.vocab_size,
            )
            rows, targets = rows_and_targets(seqs[g], masked)
            corrupted.append(masked.corrupted_ids)
            all_rows.append(np.asarray(rows, dtype=np.int64))
            all_targets.append(np.asarray(targets, dtype=np.int64))
        total_active = int(sum(r.size for r in all_rows))
        if total_active == 0:
            raise TrainingError(
                "no trainable masked positions in this batch; "
                "raise mask_rate or batch size"
            )
        loss = 0.0
        batch_tokens = sum(int(seqs[g].size) for g, _ in items)
        for lo in range(0, len(items), micro):
            sl = slice(lo, lo + micro)
            packed = pack(corrupted[sl])
            seeds = [
                derived_seed(phase.seed, PURPOSE_DROP, inst)
                for _, inst in items[sl]
            ]
            rows_parts = [
                r + int(packed.boundaries[s]) for s, r in enumerate(all_rows[sl])
            ]
            rows = np.concatenate(rows_parts)
            targets = np.concatenate(all_targets[sl])
            if rows.size == 0:
                continue
            out = forward(
                live,
                cfg,
                packed,
                train=True,
                dropout_rate=dropout_rate,
                seq_seeds=seeds,
                backend=backend,
                want_cache=True,
            )
            logits = mlm_logits(out.hidden[rows], live)
            part_loss, d_logits = mlm_loss(logits, targets)
            weight = rows.size / total_active
            loss += part_loss * weight
            d_logits *= weight
            d_rows = mlm_logits_vjp(d_logits, out.hidden[rows], live, grads)
            d_hidden = np.zeros_like(out.hidden)
            d_hidden[rows] = d_rows
            backward(live, cfg, out.cache, d_hidden, grads)
        return loss, batch_tokens

    return _train_loop(
        view,
        cfg,
        phase,
        lengths=[s.size for s in seqs],
        compute=compute,
        phase_id=phase_id,
        data_digest=digest,
        checkpoint_interval_tokens=checkpoint_interval_tokens,
        max_epochs=max_epochs,
        out_dir=out_dir,
        resume_from=resume_from,
        extra_meta={"objective": objective},
    )


def train_mlm(params, cfg, dataset, phase, **kwargs) -> TrainResult:
    return train_masked(params, cfg, dataset, phase, objective="mlm", **kwargs)


def train_mntp(params, cfg, dataset, phase, **kwargs) -> TrainResult:
    return train_masked(params, cfg, dataset, phase, objective="mntp", **kwargs)


def resume_masked(
    checkpoint: Checkpoint,
    dataset,
    *,
    mask_id: int,
    special_ids,
    **kwargs,
) -> TrainResult:
    """Continue a masked-objective run from a checkpoint, bit-exactly.

    The dataset must be the one the checkpoint was trained on; any change
    of content or order is refused.
    """
    objective = checkpoint.extra.get("objective", "mlm")
    return train_masked(
        checkpoint.params,
        checkpoint.cfg,
        dataset,
        checkpoint.phase,
        objective=objective,
        mask_id=mask_id,
        special_ids=special_ids,
        phase_id=checkpoint.phase_id,
        resume_from=checkpoint,
        **kwargs,
    )


# ---------------------------------------------------------------------------
# Span-extraction fine-tuning


@dataclass(frozen=True)
class SpanExample:
    ids: np.ndarray  # token ids of the full document
    start: int  # gold span, inclusive token indices
    end: int

    def __post_init__(self):
        arr = np.asarray(self.ids, dtype=np.int32)
        if arr.ndim != 1 or arr.size == 0:
            raise DataError("span example document is empty")
        if not (0 <= self.start <= self.end < arr.size):
            raise DataError(
                f"gold span [{self.start}, {self.end}] outside document "
                f"of {arr.size} tokens"
            )
        object.__setattr__(self, "ids", arr)


def check_span_example(ids, start: int, end: int) -> SpanExample:
    return SpanExample(ids=ids, start=int(start), end=int(end))


def span_batch_loss(start_scores, end_scores, boundaries, golds):
    """Mean over members of the averaged start/end cross-entropies.

    Each member's distributions run over its own token positions only.
    Returns (loss, d_start, d_end) with gradients for the batch mean.
    """
    n = len(golds)
    d_start = np.zeros_like(start_scores, dtype=np.float64)
    d_end = np.zeros_like(end_scores, dtype=np.float64)
    loss = 0.0
    for s, (gs, ge) in enumerate(golds):
        lo, hi = int(boundaries[s]), int(boundaries[s + 1])
        for scores, gold, d_out in (
            (start_scores, gs, d_start),
            (end_scores, ge, d_end),
        ):
            logp = _log_softmax(np.asarray(scores[lo:hi], dtype=np.float64))
            loss += -float(logp[gold]) * 0.5 / n
            d = np.exp(logp)
            d[gold] -= 1.0
            d_out[lo:hi] = d * (0.5 / n)
    return loss, d_start, d_end


def train_span_qa(
    params: dict[str, np.ndarray],
    cfg: ArchConfig,
    examples,
    phase: TrainPhaseConfig,
    *,
    dropout_rate: float = 0.0,
    phase_id: str = "span_qa",
    checkpoint_interval_tokens: int = 0,
    max_epochs: int = 0,
    out_dir=None,
    backend: str | None = None,
    resume_from: Checkpoint | None = None,
) -> TrainResult:
    """Fine-tune start/end span extraction with per-document cross-entropy."""
    if len(examples) == 0:
        raise DataError("empty training set")
    exs = [check_span_example(e.ids, e.start, e.end) for e in examples]
    limit = min(cfg.max_seq_len, phase.max_seq_len)
    for i, e in enumerate(exs):
        if e.ids.size > limit:
            raise DataError(
                f"example {i} has {e.ids.size} tokens, over the {limit}-token limit"
            )
    digest = dataset_digest([e.ids for e in exs])
    view = DirectView(_copy_tensors(params))
    live = view.model_params
    micro = phase.microbatch or phase.batch_tokens_or_sequences

    def compute(items, grads):
        loss = 0.0
        total = len(items)
        batch_tokens = sum(int(exs[g].ids.size) for g, _ in items)
        for lo in range(0, len(items), micro):
            part = items[lo : lo + micro]
            packed = pack([exs[g].ids for g, _ in part])
            seeds = [derived_seed(phase.seed, PURPOSE_DROP, inst) for _, inst in part]
            out = forward(
                live,
                cfg,
                packed,
                train=True,
                dropout_rate=dropout_rate,
                seq_seeds=seeds,
                backend=backend,
                want_cache=True,
            )
            start_sc, end_sc = span_logits(out.hidden, live)
            golds = [(exs[g].start, exs[g].end) for g, _ in part]
            part_loss, d_start, d_end = span_batch_loss(
                start_sc, end_sc, packed.boundaries, golds
            )
            scale = len(part) / total
            loss += part_loss * scale
            d_hidden = span_logits_vjp(
                d_start * scale, d_end * scale, out.hidden, live, grads
            )
            backward(live, cfg, out.cache, d_hidden.astype(out.hidden.dtype), grads)
        return loss, batch_tokens

    return _train_loop(
        view,
        cfg,
        phase,
        lengths=[e.ids.size for e in exs],
        compute=compute,
        phase_id=phase_id,
        data_digest=digest,
        checkpoint_interval_tokens=checkpoint_interval_tokens,
        max_epochs=max_epochs,
        out_dir=out_dir,
        resume_from=resume_from,
        extra_meta={"objective": "span_qa"},
    )


# ---------------------------------------------------------------------------
# Contrastive embedding fine-tuning


@dataclass(frozen=True)
class Triplet:
    query: np.ndarray
    positive: np.ndarray
    negatives: tuple  # tuple of id arrays, possibly empty


def _check_triplets(triplets, cfg, phase):
    if len(triplets) == 0:
        raise DataError("empty triplet dataset")
    limit = min(cfg.max_seq_len, phase.max_seq_len)
    out = []
    for i, t in enumerate(triplets):
        q = np.asarray(t.query, dtype=np.int32)
        p = np.asarray(t.positive, dtype=np.int32)
        negs = tuple(np.asarray(n, dtype=np.int32) for n in t.negatives)
        for arr in (q, p, *negs):
            if arr.ndim != 1 or arr.size == 0:
                raise DataError(f"triplet {i} contains an empty sequence")
            if arr.size > limit:
                raise DataError(f"triplet {i} has a sequence over {limit} tokens")
        out.append(Triplet(query=q, positive=p, negatives=negs))
    return out


def _triplet_tokens(t: Triplet) -> int:
    return int(t.query.size + t.positive.size + sum(n.size for n in t.negatives))


def _triplet_digest(trips) -> str:
    # Negative counts are part of the structure, so flattening must not let
    # two datasets with shuffled negative ownership collide.
    h = hashlib.blake2b(digest_size=16)
    h.update(len(trips).to_bytes(8, "little"))
    for t in trips:
        h.update(len(t.negatives).to_bytes(4, "little"))
        for arr in (t.query, t.positive, *t.negatives):
            h.update(arr.size.to_bytes(8, "little"))
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def embed_triplet_batch(params, cfg, batch, *, backend=None):
    """Pack a triplet batch and mean-pool; returns (pooled, packed, group sizes).

    Member order is all queries, then all positives, then each triplet's
    negatives in triplet order.
    """
    members = [t.query for t in batch]
    members += [t.positive for t in batch]
    neg_counts = []
    for t in batch:
        members.extend(t.negatives)
        neg_counts.append(len(t.negatives))
    packed = pack(members)
    out = forward(params, cfg, packed, backend=backend, want_cache=True)
    pooled = pool_mean_packed(out.hidden, packed.boundaries)
    return pooled, packed, out, neg_counts


def train_embedder(
    params: dict[str, np.ndarray],
    cfg: ArchConfig,
    triplets,
    phase: TrainPhaseConfig,
    *,
    temperature: float = 0.05,
    phase_id: str = "embed",
    checkpoint_interval_tokens: int = 0,
    max_epochs: int = 0,
    out_dir=None,
    backend: str | None = None,
    resume_from: Checkpoint | None = None,
    view=None,
) -> TrainResult:
    """Contrastive fine-tune over mean-pooled embeddings.

    In-batch positives plus each triplet's explicit negatives form the
    candidate pool.  The whole batch runs as one forward pass; microbatch
    splitting would change the candidate set, so it is not applied here.
    """
    trips = _check_triplets(triplets, cfg, phase)
    if view is None:
        view = DirectView(_copy_tensors(params))
    live = view.model_params

    def compute(items, grads):
        batch = [trips[g] for g, _ in items]
        pooled, packed, out, neg_counts = embed_triplet_batch(
            live, cfg, batch, backend=backend
        )
        b = len(batch)
        q, p, negs = pooled[:b], pooled[b : 2 * b], pooled[2 * b :]
        loss, d_q, d_p, d_n = info_nce(
            q,
            p,
            negs if negs.shape[0] else None,
            temperature=temperature,
            in_batch_negatives=True,
            with_grads=True,
        )
        parts = [d_q, d_p]
        if negs.shape[0]:
            parts.append(d_n)
        d_pooled = np.concatenate(parts, axis=0)
        d_hidden = pool_mean_packed_vjp(
            d_pooled.astype(out.hidden.dtype), packed.boundaries, packed.total_tokens
        )
        backward(live, cfg, out.cache, d_hidden, grads)
        return loss, packed.total_tokens

    return _train_loop(
        view,
        cfg,
        phase,
        lengths=[_triplet_tokens(t) for t in trips],
        compute=compute,
        phase_id=phase_id,
        data_digest=_triplet_digest(trips),
        checkpoint_interval_tokens=checkpoint_interval_tokens,
        max_epochs=max_epochs,
        out_dir=out_dir,
        resume_from=resume_from,
        extra_meta={"objective": "embed", "temperature": temperature},
    )


def retrieval_accuracy(params, cfg, triplets, *, backend=None) -> float:
    """Fraction of triplets whose positive outranks every explicit negative."""
    trips = [
        Triplet(
            query=np.asarray(t.query, dtype=np.int32),
            positive=np.asarray(t.positive, dtype=np.int32),
            negatives=tuple(np.asarray(n, dtype=np.int32) for n in t.negatives),
        )
        for t in triplets
    ]
    if not trips:
        raise DataError("no triplets to evaluate")
    hits = 0
    for t in trips:
        members = [t.query, t.positive, *t.negatives]
        packed = pack(members)
        out = forward(params, cfg, packed, backend=backend)
        pooled = pool_mean_packed(out.hidden, packed.boundaries)
        unit = pooled / np.linalg.norm(pooled, axis=1, keepdims=True)
        sims = unit[1:] @ unit[0]
        if sims.size == 1 or sims[0] > sims[1:].max():
            hits += 1
    return hits / len(trips)
