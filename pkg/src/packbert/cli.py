"""Command-line front end: every pipeline stage as one subcommand.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric or training error. Heavy modules load inside handlers so that
--help stays instant.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, DataError, TrainingError


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage problems; the contract here is 1.
    def error(self, message):
        raise ConfigError(message)


def _doc_text(paragraphs) -> str:
    return "\n\n".join(paragraphs)


def _load_job(args):
    from .config import TrainPhaseConfig, read_job_config

    if getattr(args, "config", None):
        arch, phase = read_job_config(args.config)
    else:
        arch, phase = None, None
    return arch, phase if phase is not None else TrainPhaseConfig()


# ---------------------------------------------------------------------------
# Handlers


def cmd_tokenize(args) -> int:
    from .data_pipeline import read_documents, write_sequences
    from .tokenizer import encode, load_vocab

    vocab = load_vocab(args.vocab)
    docs = read_documents(args.input)
    seqs = [
        encode(_doc_text(d), vocab, add_specials=args.add_specials) for d in docs
    ]
    seqs = [s for s in seqs if s]
    write_sequences(args.out, seqs)
    print(f"tokenized {len(seqs)} documents -> {args.out}")
    return 0


def cmd_dedup(args) -> int:
    from .data_pipeline import (
        BloomFilter,
        dedup_documents,
        join_documents,
        read_documents,
    )

    docs = read_documents(args.input)
    n_paras = sum(len(d) for d in docs)
    expected = args.expected or max(n_paras, 1)
    bloom = BloomFilter.sized_for(expected, args.fp_rate, seed=args.seed)
    kept, stats = dedup_documents(docs, bloom)
    Path(args.out).write_text(join_documents(kept), encoding="utf-8")
    print(
        f"paragraphs seen={stats.seen} survivors={stats.survivors} "
        f"dropped={stats.dropped} (bloom m={bloom.m} k={bloom.k})"
    )
    return 0


def cmd_filter(args) -> int:
    from .data_pipeline import join_documents, ratio_filter, read_documents
    from .tokenizer import load_vocab

    vocab = load_vocab(args.vocab)
    docs = read_documents(args.input)
    kept = [d for d in docs if ratio_filter(_doc_text(d), vocab, args.threshold)]
    Path(args.out).write_text(join_documents(kept), encoding="utf-8")
    print(
        f"documents kept={len(kept)} dropped={len(docs) - len(kept)} "
        f"threshold={args.threshold}"
    )
    return 0


def cmd_split_long(args) -> int:
    from .data_pipeline import (
        compose_report,
        read_documents,
        split_long,
        write_sequences,
    )
    from .tokenizer import load_vocab

    vocab = load_vocab(args.vocab)
    docs = read_documents(args.input)
    pieces = []
    for d in docs:
        pieces.extend(split_long(_doc_text(d), vocab, args.target))
    write_sequences(args.out, pieces)
    rep = compose_report(pieces)
    print(
        f"tokens={rep['token_count']} sequences={rep['sequence_count']} "
        f"median_length={rep['median_length']}"
    )
    return 0


def cmd_pretrain(args) -> int:
    from .data_pipeline import read_sequences
    from .model import init_params
    from .tokenizer import load_vocab
    from .trainer import train_mlm

    arch, phase = _load_job(args)
    if arch is None:
        raise ConfigError("pretrain requires a config file naming a preset or arch.*")
    vocab = load_vocab(args.vocab)
    dataset = read_sequences(args.data)
    params = init_params(arch, seed=phase.seed)
    result = train_mlm(
        params,
        arch,
        dataset,
        phase,
        mask_id=vocab.mask_id,
        special_ids=vocab.special_ids,
        mask_policy=args.mask_policy,
        dropout_rate=args.dropout,
        checkpoint_interval_tokens=args.ckpt_interval,
        max_epochs=args.max_epochs,
        out_dir=args.out,
        backend=args.backend,
    )
    last = result.metrics[-1] if result.metrics else None
    if last:
        print(f"final step={last[0]} tokens={last[1]} loss={last[2]:.6f}")
    print(f"checkpoint -> {Path(args.out) / 'ckpt_final.pbt'}")
    return 0


def cmd_extend(args) -> int:
    import dataclasses

    from .context_ext import extend
    from .trainer import load_checkpoint, save_checkpoint
    from .util import params_digest

    ckpt = load_checkpoint(args.ckpt)
    before = params_digest(ckpt.params)
    _, new_cfg = extend(ckpt.params, ckpt.cfg, args.theta, args.max_len)
    out = dataclasses.replace(ckpt, cfg=new_cfg)
    save_checkpoint(out, args.out)
    print(f"params digest before={before} after={params_digest(out.params)}")
    print(
        f"global rotation base {ckpt.cfg.rope_theta_global:g} -> "
        f"{new_cfg.rope_theta_global:g}, max_seq_len {ckpt.cfg.max_seq_len} -> "
        f"{new_cfg.max_seq_len}"
    )
    return 0


def cmd_mntp(args) -> int:
    from .adapters import enable_bidirectional, save_adapters, train_mntp_adapter
    from .data_pipeline import read_sequences
    from .tokenizer import load_vocab
    from .trainer import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.cfg
    if args.bidirectional:
        cfg = enable_bidirectional(cfg)
    vocab = load_vocab(args.vocab)
    dataset = read_sequences(args.data)
    _, phase = _load_job(args)
    adapters, result = train_mntp_adapter(
        ckpt.params,
        cfg,
        dataset,
        phase,
        mask_id=vocab.mask_id,
        special_ids=vocab.special_ids,
        rank=args.rank,
        alpha=args.alpha,
        phase_tag=args.phase_tag,
        max_epochs=args.max_epochs,
        backend=args.backend,
    )
    save_adapters(adapters, args.out)
    first = result.metrics[0][2] if result.metrics else float("nan")
    last = result.metrics[-1][2] if result.metrics else float("nan")
    print(f"mntp loss first={first:.6f} last={last:.6f}")
    print(f"adapters -> {args.out}")
    return 0


def cmd_merge_adapters(args) -> int:
    from .adapters import load_adapters, merge_into_checkpoint
    from .trainer import load_checkpoint, save_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    sets = [load_adapters(p) for p in args.adapters]
    merged = merge_into_checkpoint(ckpt, sets)
    save_checkpoint(merged, args.out)
    print(
        f"absorbed phases: {merged.extra.get('absorbed_phases')} -> {args.out}"
    )
    return 0


def cmd_embed_train(args) -> int:
    from .tokenizer import encode, load_vocab
    from .trainer import Triplet, load_checkpoint, train_embedder

    ckpt = load_checkpoint(args.ckpt)
    vocab = load_vocab(args.vocab)
    triplets = []
    for lineno, line in enumerate(
        Path(args.data).read_text(encoding="utf-8").splitlines(), 1
    ):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            triplets.append(
                Triplet(
                    query=encode(rec["query"], vocab),
                    positive=encode(rec["positive"], vocab),
                    negatives=tuple(
                        encode(t, vocab) for t in rec.get("negatives", [])
                    ),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"{args.data}:{lineno}: malformed triplet: {e}") from e
    _, phase = _load_job(args)
    result = train_embedder(
        ckpt.params,
        ckpt.cfg,
        triplets,
        phase,
        temperature=args.temperature,
        max_epochs=args.max_epochs,
        out_dir=args.out,
        backend=args.backend,
    )
    if result.metrics:
        print(f"final contrastive loss {result.metrics[-1][2]:.6f}")
    print(f"checkpoint -> {Path(args.out) / 'ckpt_final.pbt'}")
    return 0


def cmd_niah_gen(args) -> int:
    from .niah import build_dataset, read_qa_pairs, write_examples
    from .tokenizer import load_vocab

    vocab = load_vocab(args.vocab)
    pairs = read_qa_pairs(args.pairs)
    examples = build_dataset(
        pairs,
        args.split,
        vocab=vocab,
        seed=args.seed,
        max_distractors=args.max_distractors,
        token_cap=args.token_cap,
    )
    write_examples(args.out, examples)
    print(f"built {len(examples)} examples ({args.split}) -> {args.out}")
    return 0


def cmd_niah_eval(args) -> int:
    from .niah import evaluate, predict_example, read_examples
    from .tokenizer import load_vocab
    from .trainer import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    vocab = load_vocab(args.vocab)
    examples = read_examples(args.examples)
    predictions = [
        predict_example(
            ckpt.params,
            ckpt.cfg,
            ex,
            vocab,
            max_answer_len=args.max_answer_len,
            backend=args.backend,
        )
        for ex in examples
    ]
    report = evaluate(predictions, examples, vocab)
    for line in report.lines():
        print(line)
    return 0


def cmd_qa_finetune(args) -> int:
    from .niah import doc_tokens, read_examples
    from .tokenizer import load_vocab
    from .trainer import SpanExample, load_checkpoint, train_span_qa

    ckpt = load_checkpoint(args.ckpt)
    vocab = load_vocab(args.vocab)
    _, phase = _load_job(args)
    limit = min(ckpt.cfg.max_seq_len, phase.max_seq_len)
    examples, skipped = [], 0
    for ex in read_examples(args.examples):
        ids = doc_tokens(ex, vocab)
        if ids.size > limit or ex.gold_end >= ids.size:
            skipped += 1
            continue
        examples.append(SpanExample(ids=ids, start=ex.gold_start, end=ex.gold_end))
    if skipped:
        print(f"skipped {skipped} examples over the {limit}-token limit")
    result = train_span_qa(
        ckpt.params,
        ckpt.cfg,
        examples,
        phase,
        max_epochs=args.max_epochs,
        out_dir=args.out,
        backend=args.backend,
    )
    if result.metrics:
        print(f"final span loss {result.metrics[-1][2]:.6f}")
    print(f"checkpoint -> {Path(args.out) / 'ckpt_final.pbt'}")
    return 0


def cmd_bench(args) -> int:
    from .bench import gen_synthetic, measure, parse_spec, render_table
    from .config import preset
    from .model import init_params
    from .tokenizer import SPECIAL_PIECES
    from .trainer import load_checkpoint

    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        params, cfg, model_id = ckpt.params, ckpt.cfg, Path(args.ckpt).name
    else:
        cfg = preset(args.preset)
        params = init_params(cfg, seed=args.seed)
        model_id = args.preset
    paths = ("padded", "packed") if args.path == "both" else (args.path,)
    reports = []
    for spec_text in args.spec:
        spec = parse_spec(
            spec_text,
            n_docs=args.n_docs,
            seed=args.seed,
            spread_is_std=not args.spread_as_variance,
        )
        dataset = gen_synthetic(
            spec,
            cfg.vocab_size,
            special_ids=range(len(SPECIAL_PIECES)),
            max_len=cfg.max_seq_len,
        )
        for path in paths:
            rep = measure(
                params,
                cfg,
                dataset,
                path,
                batch_budget=args.budget,
                reps=args.reps,
                backend=args.backend,
                model_id=model_id,
                spec_label=spec.describe(),
                spread_note="std" if spec.spread_is_std else "variance",
            )
            reports.append(rep)
            print(rep.to_line())
    print()
    print(render_table(reports))
    return 0


def cmd_inspect(args) -> int:
    from .config import arch_to_pairs, format_pairs
    from .trainer import ProvenanceLog, load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    print(f"phase_id={ckpt.phase_id} step={ckpt.step} tokens_seen={ckpt.tokens_seen}")
    print(
        f"epoch={ckpt.epoch} pos_in_epoch={ckpt.pos_in_epoch} "
        f"consumed={ckpt.consumed} provenance_records={ckpt.n_provenance}"
    )
    print(f"dataset_digest={ckpt.dataset_digest}")
    print(f"tensors={len(ckpt.params)} opt_t={ckpt.opt.t}")
    if ckpt.extra:
        print(f"extra={json.dumps(ckpt.extra, sort_keys=True)}")
    print(format_pairs(arch_to_pairs(ckpt.cfg)).rstrip())
    if args.provenance:
        log = ProvenanceLog.load(args.provenance)
        print(f"provenance: {len(log)} records")
        if len(log):
            first, last = log[0], log[len(log) - 1]
            print(
                f"  first: step={first.step} tokens={first.token_count} "
                f"ids={list(first.sequence_ids)}"
            )
            print(
                f"  last:  step={last.step} tokens={last.token_count} "
                f"ids={list(last.sequence_ids)}"
            )
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> _Parser:
    parser = _Parser(prog="packbert", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("tokenize", cmd_tokenize, "tokenize a text corpus into sequences")
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--add-specials", action="store_true")

    p = add("dedup", cmd_dedup, "drop exact-duplicate paragraphs")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--expected", type=int, default=0, help="expected distinct items")
    p.add_argument("--fp-rate", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)

    p = add("filter", cmd_filter, "drop documents with a poor token/word ratio")
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=2.5)

    p = add("split-long", cmd_split_long, "split documents into bounded sequences")
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target", type=int, default=8192)

    p = add("pretrain", cmd_pretrain, "masked-token pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-policy", default="all_mask")
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--ckpt-interval", type=int, default=0)
    p.add_argument("--max-epochs", type=int, default=0)
    p.add_argument("--backend", default=None)

    p = add("extend", cmd_extend, "raise the global rotation base and max length")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--theta", type=float, default=160_000.0)
    p.add_argument("--max-len", type=int, default=8192)
    p.add_argument("--out", required=True)

    p = add("mntp", cmd_mntp, "train low-rank adapters with shifted masking")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--alpha", type=float, default=32.0)
    p.add_argument("--phase-tag", default="ext1")
    p.add_argument("--bidirectional", action="store_true",
                   help="replace a causal mask with full attention first")
    p.add_argument("--max-epochs", type=int, default=0)
    p.add_argument("--backend", default=None)

    p = add("merge-adapters", cmd_merge_adapters, "fold adapters into the weights")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--adapters", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = add("embed-train", cmd_embed_train, "contrastive embedding fine-tune")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True, help="JSONL triplets")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--temperature", type=float, default=0.05)
    p.add_argument("--max-epochs", type=int, default=0)
    p.add_argument("--backend", default=None)

    p = add("niah-gen", cmd_niah_gen, "build haystack examples from QA pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--split", choices=("train", "test"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--max-distractors", type=int, default=None)
    p.add_argument("--token-cap", type=int, default=None)

    p = add("niah-eval", cmd_niah_eval, "exact-match evaluation with length buckets")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--examples", required=True)
    p.add_argument("--max-answer-len", type=int, default=30)
    p.add_argument("--backend", default=None)

    p = add("qa-finetune", cmd_qa_finetune, "span-extraction fine-tune on haystacks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--examples", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--max-epochs", type=int, default=0)
    p.add_argument("--backend", default=None)

    p = add("bench", cmd_bench, "padded vs packed throughput")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--preset", default="tiny_test")
    p.add_argument("--spec", action="append", required=True,
                   help="fixed:LEN or normal:MEAN:SPREAD, repeatable")
    p.add_argument("--path", choices=("padded", "packed", "both"), default="both")
    p.add_argument("--budget", type=int, default=16384)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--n-docs", type=int, default=8192)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spread-as-variance", action="store_true",
                   help="read the spread figure as a variance, not a std")
    p.add_argument("--backend", default=None)

    p = add("inspect", cmd_inspect, "print checkpoint and provenance metadata")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--provenance", default=None)

    return parser


def main(argv=None) -> int:
    import logging

    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return int(args.func(args) or 0)
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except TrainingError as e:
        print(f"training error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
