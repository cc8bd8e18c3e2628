"""Shared fixtures: small configs, toy vocabularies, random batches."""

import dataclasses

import numpy as np
import pytest

from packbert import config
from packbert.packing import pack
from packbert.tokenizer import toy_vocab


@pytest.fixture
def tiny_cfg():
    return config.preset("tiny_test")


@pytest.fixture
def micro_cfg(tiny_cfg):
    # Cheapest config that still exercises both attention flavours.
    return dataclasses.replace(tiny_cfg, max_seq_len=64)


@pytest.fixture
def letters_vocab():
    words = [f"w{i}" for i in range(20)]
    return toy_vocab(words)


def random_sequences(rng, n, lo=2, hi=24, vocab=256):
    return [
        rng.integers(0, vocab, size=rng.integers(lo, hi + 1), dtype=np.int32)
        for _ in range(n)
    ]


@pytest.fixture
def rand_batch():
    rng = np.random.default_rng(11)
    return pack(random_sequences(rng, 4, lo=3, hi=12))


def quick_phase(**kw):
    base = dict(
        token_budget=2048,
        batch_tokens_or_sequences=4,
        microbatch=2,
        peak_lr=1e-3,
        schedule="constant",
        warmup_tokens=0,
        decay_tokens=0,
        weight_decay=0.0,
        seed=7,
        max_seq_len=512,
    )
    base.update(kw)
    return config.TrainPhaseConfig(**base)
