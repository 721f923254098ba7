"""Shared fixtures: synthetic corpora and pretrained models for the heavy tests.

The toy setup mirrors the intended use: a model pretrained on a mixed corpus
(mostly simple machine-log styles plus a minority of word-like prose), then
scored against a "domain" of fresh prose text. The domain is the hard,
under-trained slice of the mix, so domain gradients carry real signal.
"""

import warnings

import numpy as np
import pytest

from dualprune.corpus import CalibrationSpec, build_calibration
from dualprune.model import ModelConfig, init_model, pretrain

DEVICES = ["valve", "pump", "rotor", "sensor", "relay", "heater", "gauge", "filter"]
STATES = ["OK", "WARN", "FAIL", "IDLE"]


def make_words(rng, count, lo=3, hi=9):
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    return ["".join(rng.choice(letters, size=int(rng.integers(lo, hi)))) for _ in range(count)]


PROSE_WORDS = make_words(np.random.default_rng(12345), 200)


def prose_text(rng, n_bytes):
    parts, size = [], 0
    while size < n_bytes:
        words = rng.choice(PROSE_WORDS, size=int(rng.integers(5, 14)))
        s = " ".join(words) + ". "
        parts.append(s)
        size += len(s)
    return "".join(parts)[:n_bytes]


def telemetry_text(rng, n_bytes):
    parts, size = [], 0
    while size < n_bytes:
        s = (f"{rng.choice(DEVICES)}[{int(rng.integers(0, 100)):02d}] "
             f"p={int(rng.integers(0, 1000)) / 10:.1f} {rng.choice(STATES)};\n")
        parts.append(s)
        size += len(s)
    return "".join(parts)[:n_bytes]


def numeric_text(rng, n_bytes):
    parts, size = [], 0
    while size < n_bytes:
        s = " ".join(str(int(x)) for x in rng.integers(0, 10000, size=8)) + "\n"
        parts.append(s)
        size += len(s)
    return "".join(parts)[:n_bytes]


def mixed_text(rng, n_bytes, prose_share=0.15):
    parts, size = [], 0
    while size < n_bytes:
        r = rng.random()
        if r < prose_share:
            gen = prose_text
        elif r < prose_share + (1 - prose_share) * 0.55:
            gen = telemetry_text
        else:
            gen = numeric_text
        s = gen(rng, int(rng.integers(200, 600)))
        parts.append(s)
        size += len(s)
    return "".join(parts)[:n_bytes]


@pytest.fixture(scope="session")
def corpus_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpora")
    mixed = root / "mixed.txt"
    domain = root / "domain.txt"
    mixed.write_text(mixed_text(np.random.default_rng(1234), 500_000))
    domain.write_text(prose_text(np.random.default_rng(99), 200_000))
    return {"mixed": mixed, "domain": domain}


def build_standard_corpora(files, seed, domain_samples=128):
    """train/open from the mixed file, domain/test from disjoint regions of the domain file."""
    return {
        "train": build_calibration(CalibrationSpec(
            [str(files["mixed"])], 2048, 64, seed=seed + 11, name="train", region=(0.0, 0.8))),
        "open": build_calibration(CalibrationSpec(
            [str(files["mixed"])], 128, 64, seed=seed + 22, name="open", region=(0.8, 1.0))),
        "domain": build_calibration(CalibrationSpec(
            [str(files["domain"])], domain_samples, 64, seed=seed + 33, name="domain",
            region=(0.0, 0.7))),
        "test": build_calibration(CalibrationSpec(
            [str(files["domain"])], 64, 64, seed=seed + 44, name="test", region=(0.7, 1.0))),
    }


def pretrain_toy(files, seed, steps, batch_size=8, domain_samples=128):
    corpora = build_standard_corpora(files, seed, domain_samples)
    model = init_model(ModelConfig(seed=seed))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model, history = pretrain(model, corpora["train"], steps=steps,
                                  learning_rate=0.3, batch_size=batch_size)
    return model, corpora, history


@pytest.fixture(scope="session")
def trained_setup(corpus_files):
    """The default toy model pretrained for 2000 steps, with its corpora and loss history."""
    model, corpora, history = pretrain_toy(corpus_files, seed=0, steps=2000)
    return {"model": model, "corpora": corpora, "history": history}
