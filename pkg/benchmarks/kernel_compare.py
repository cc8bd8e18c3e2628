#!/usr/bin/env python3
"""Compare the compiled attention kernel against the numpy reference.

Two views of the same question. The raw-kernel section times just
``attn_forward`` / ``attn_backward`` on shared random tensors, per mask
kind, which isolates the extension from everything around it. The
full-model section times the packed forward pass end to end through
``bench.measure`` under each backend, which shows how much of that
advantage survives once embeddings, norms, FFNs and projections dilute it.

Usage:
    python benchmarks/kernel_compare.py
    python benchmarks/kernel_compare.py --tokens 8192 --reps 20 --spec normal:512:128
"""

import argparse
import dataclasses
import statistics
import sys
import time

import numpy as np

from packbert import config
from packbert.bench import SyntheticSpec, gen_synthetic, measure, parse_spec, render_table
from packbert.kernels import attn_backward, attn_forward, compiled_available
from packbert.model import init_params
from packbert.packing import KIND_CAUSAL, KIND_GLOBAL, KIND_WINDOW

SPECIAL_IDS = (0, 1, 2, 3, 4)
KIND_LABELS = {KIND_GLOBAL: "global", KIND_WINDOW: "window", KIND_CAUSAL: "causal"}


def time_raw_kernels(backend, *, tokens, heads, head_dim, n_seqs, window, reps, seed):
    """Median forward and backward seconds per kind for one backend."""
    rng = np.random.default_rng(seed)
    boundaries = np.linspace(0, tokens, n_seqs + 1).astype(np.int64)
    shape = (heads, tokens, head_dim)
    q = rng.standard_normal(shape).astype(np.float32)
    k = rng.standard_normal(shape).astype(np.float32)
    v = rng.standard_normal(shape).astype(np.float32)
    d_out = rng.standard_normal(shape).astype(np.float32)
    scale = 1.0 / float(np.sqrt(head_dim))

    rows = {}
    for kind, label in KIND_LABELS.items():
        win = window if kind == KIND_WINDOW else 0
        attn_forward(q, k, v, boundaries, kind, win, scale, override=backend)
        fwd, bwd = [], []
        for _ in range(reps):
            t0 = time.perf_counter()
            attn_forward(q, k, v, boundaries, kind, win, scale, override=backend)
            fwd.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            attn_backward(q, k, v, d_out, boundaries, kind, win, scale, override=backend)
            bwd.append(time.perf_counter() - t0)
        rows[label] = (statistics.median(fwd), statistics.median(bwd))
    return rows


def print_raw_section(args):
    print(f"raw kernels: {args.tokens} tokens, {args.heads} heads x "
          f"{args.head_dim} dim, {args.seqs} segments, window {args.window}, "
          f"median of {args.reps} reps")
    ref = time_raw_kernels("reference", tokens=args.tokens, heads=args.heads,
                           head_dim=args.head_dim, n_seqs=args.seqs,
                           window=args.window, reps=args.reps, seed=args.seed)
    comp = None
    if compiled_available():
        comp = time_raw_kernels("compiled", tokens=args.tokens, heads=args.heads,
                                head_dim=args.head_dim, n_seqs=args.seqs,
                                window=args.window, reps=args.reps, seed=args.seed)
    header = f"{'kind':<8} {'pass':<9} {'reference':>12} {'compiled':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for label in KIND_LABELS.values():
        for i, pass_name in enumerate(("forward", "backward")):
            r = ref[label][i]
            if comp is None:
                print(f"{label:<8} {pass_name:<9} {r:>11.4f}s {'n/a':>12} {'n/a':>9}")
            else:
                c = comp[label][i]
                print(f"{label:<8} {pass_name:<9} {r:>11.4f}s {c:>11.4f}s "
                      f"{r / c:>8.1f}x")
    print()


def print_model_section(args):
    cfg = dataclasses.replace(config.preset(args.preset), max_seq_len=args.max_seq_len)
    params = init_params(cfg, seed=args.seed)
    spec = parse_spec(args.spec) if args.spec else SyntheticSpec(
        kind="normal", mean=args.max_seq_len / 2, spread=args.max_seq_len / 8,
        n_docs=args.docs, seed=args.seed,
    )
    spec = dataclasses.replace(spec, n_docs=args.docs, seed=args.seed)
    docs = gen_synthetic(spec, cfg.vocab_size, special_ids=SPECIAL_IDS,
                         max_len=cfg.max_seq_len)
    print(f"full packed forward: preset {args.preset}, spec {spec.describe()}, "
          f"{args.reps} reps")
    backends = ["reference"] + (["compiled"] if compiled_available() else [])
    reports = [
        measure(params, cfg, docs, "packed", batch_budget=args.budget,
                reps=args.reps, backend=b, model_id=args.preset,
                spec_label=spec.describe(), spread_note=f"backend={b}")
        for b in backends
    ]
    print(render_table(reports))
    if len(reports) == 2:
        ratio = (reports[0].seconds_per_million_mean
                 / reports[1].seconds_per_million_mean)
        print(f"end-to-end speedup from the compiled kernel: {ratio:.2f}x")
    print()


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--preset", default="tiny_test")
    parser.add_argument("--spec", default="",
                        help="synthetic length spec, e.g. fixed:512 or normal:512:128")
    parser.add_argument("--docs", type=int, default=16)
    parser.add_argument("--max-seq-len", type=int, default=2048)
    parser.add_argument("--budget", type=int, default=8192,
                        help="batch budget in tokens for the full-model runs")
    parser.add_argument("--tokens", type=int, default=4096,
                        help="total packed tokens for the raw-kernel runs")
    parser.add_argument("--heads", type=int, default=4)
    parser.add_argument("--head-dim", type=int, default=64)
    parser.add_argument("--seqs", type=int, default=8)
    parser.add_argument("--window", type=int, default=128)
    parser.add_argument("--reps", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--skip-model", action="store_true",
                        help="only run the raw-kernel comparison")
    args = parser.parse_args(argv)

    if not compiled_available():
        print("note: compiled extension not built; reference timings only\n")
    print_raw_section(args)
    if not args.skip_model:
        print_model_section(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
