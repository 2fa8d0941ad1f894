"""Shared fixtures: trained models reused across acceptance criteria.

Training runs are session-scoped and built lazily, so unit-test-only
invocations never pay for them. All corpora, seeds and schedules are
frozen; every fixture is deterministic end to end.
"""

import time

import numpy as np
import pytest

from emotts import dataset, decode, metrics, toyspeech, train, vocab
from emotts.model import ModelConfig, SpeechLm, Variant
from emotts.toyspeech import EmotionCategory

OVERFIT_SEED = 7
OVERFIT_STEPS = 800
GEN_SEED = 3
GEN_STEPS = 3000


def build_model(variant_name, d_model=64, n_layers=2, group_size=3, seed=OVERFIT_SEED,
                max_seq_len=200, dtype="float32"):
    variant = Variant.parse(variant_name)
    layout = vocab.default_layout(with_phonemes=variant.needs_phoneme_block)
    net = SpeechLm(
        ModelConfig(
            d_model=d_model,
            n_layers=n_layers,
            n_heads=4,
            feedforward_dim=2 * d_model,
            group_size=group_size,
            variant=variant,
            layout=layout,
            max_seq_len=max_seq_len,
            dtype=dtype,
            seed=seed,
        )
    )
    return net, layout


def train_on(net, entries, steps, seed, phase="finetune", batch_size=8, peak_lr=3e-3, warmup=50):
    examples = train.build_examples(entries, net.variant, net.layout, net.config.group_size, phase)
    config = train.TrainConfig(
        phase=phase,
        total_steps=steps,
        warmup_steps=warmup,
        batch_size=batch_size,
        peak_lr=peak_lr,
        seed=seed,
    )
    t0 = time.time()
    log = train.fit(net, examples, config)
    return examples, log, time.time() - t0


def overfit_corpus():
    return dataset.tiny_corpus(64, seed=42, words_per_text=(2, 2))


def generate_all(net, layout, entries, phase="finetune", max_steps=120, penalty=1.2):
    """Greedy generation for a batch; returns (results, eval items)."""
    results = []
    items = []
    for e in entries:
        prompt = train.prompt_token_ids(e.text, e.description, phase, layout)
        res = decode.generate(net, prompt, decode.DecodeConfig(max_steps=max_steps, repetition_penalty=penalty))
        rel = [layout.audio_rel(t) for t in res.audio_tokens]
        results.append(res)
        items.append(metrics.EvalItem(e.id, e.text, e.audio_tokens, rel, e.emotion))
    return results, items


@pytest.fixture(scope="session")
def overfit_audio():
    """AudioOnly model memorizing the 64-utterance toy corpus."""
    entries = overfit_corpus()
    net, layout = build_model("audio")
    examples, log, elapsed = train_on(net, entries, OVERFIT_STEPS, OVERFIT_SEED)
    return {
        "net": net, "layout": layout, "entries": entries,
        "examples": examples, "log": log, "train_seconds": elapsed,
    }


@pytest.fixture(scope="session")
def overfit_pp():
    """ParallelPhoneme model memorizing the same 64-utterance corpus."""
    entries = overfit_corpus()
    net, layout = build_model("pp")
    examples, log, elapsed = train_on(net, entries, OVERFIT_STEPS, OVERFIT_SEED)
    return {
        "net": net, "layout": layout, "entries": entries,
        "examples": examples, "log": log, "train_seconds": elapsed,
    }


@pytest.fixture(scope="session")
def stepcount_pair():
    """G=3 and G=1 AudioOnly models memorizing one 16-utterance corpus."""
    entries = dataset.tiny_corpus(16, seed=21, words_per_text=(1, 2), prefix="steps")
    g3, layout = build_model("audio", group_size=3, seed=5)
    train_on(g3, entries, 500, seed=5)
    g1, _ = build_model("audio", group_size=1, seed=5)
    train_on(g1, entries, 500, seed=5)
    return {"entries": entries, "g3": g3, "g1": g1, "layout": layout}


@pytest.fixture(scope="session")
def generalization_pair():
    """AudioOnly vs ParallelPhoneme trained on a compositional corpus.

    Texts are random letter strings, so word-level recall cannot solve
    the task and the models must learn the letter-level mapping; the
    hard-case set uses longer unseen pseudo-words with an adjacent
    repeated word and deliberately mismatched descriptions.
    """
    corpus = dataset.random_text_corpus(600, seed=20, words_per_text=(1, 3))
    hard = dataset.random_hard_cases(24, seed=20, words_per_text=(3, 4))
    ao, _ = build_model("audio", seed=GEN_SEED, max_seq_len=260)
    train_on(ao, corpus, GEN_STEPS, GEN_SEED, peak_lr=2.5e-3, warmup=100)
    pp, layout = build_model("pp", seed=GEN_SEED, max_seq_len=260)
    train_on(pp, corpus, GEN_STEPS, GEN_SEED, peak_lr=2.5e-3, warmup=100)
    return {"ao": ao, "pp": pp, "layout": layout, "hard": hard, "corpus": corpus}
