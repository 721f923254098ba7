"""Byte-level tokenization and calibration-corpus construction.

Calibration corpora are sampled as non-overlapping, grid-aligned windows of
a fixed token length, shuffled with a seed.  A `region` restricts sampling
to a fraction of the token stream, which is how calibration and held-out
test corpora built from the same file are kept disjoint.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactError, ValidationError

VOCAB_SIZE = 256


def tokenize(text: str | bytes) -> np.ndarray:
    """Byte-level tokenization: each byte is its own id (vocab 256)."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
        raise ValidationError(f"token id out of byte range [0, {VOCAB_SIZE})")
    return ids.astype(np.uint8).tobytes()


@dataclass
class Corpus:
    name: str
    sequences: list[np.ndarray]
    provenance: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        for seq in self.sequences:
            if np.asarray(seq).size == 0:
                raise ValidationError(f"corpus {self.name!r} contains an empty sequence")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def token_count(self) -> int:
        return int(sum(np.asarray(s).size for s in self.sequences))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for seq in self.sequences:
            arr = np.ascontiguousarray(np.asarray(seq), dtype="<i8")
            h.update(str(arr.size).encode())
            h.update(arr.tobytes())
        return h.hexdigest()


@dataclass
class CalibrationSpec:
    sources: list[str]
    sample_count: int
    sequence_length: int
    seed: int
    name: str = "calibration"
    region: tuple[float, float] = (0.0, 1.0)

    def validate(self) -> None:
        if self.sample_count < 1:
            raise ValidationError(f"sample_count must be >= 1, got {self.sample_count}")
        if self.sequence_length < 2:
            raise ValidationError(f"sequence_length must be >= 2, got {self.sequence_length}")
        lo, hi = self.region
        if not (0.0 <= lo < hi <= 1.0):
            raise ValidationError(f"region must satisfy 0 <= lo < hi <= 1, got {self.region}")
        if not self.sources:
            raise ValidationError("at least one source file is required")


def _read_tokens(paths: list[str]) -> tuple[np.ndarray, list[dict]]:
    chunks = []
    sources = []
    for p in paths:
        path = Path(p)
        if not path.is_file():
            raise ValidationError(f"corpus source not found: {path}")
        raw = path.read_bytes()
        sources.append({"path": str(path), "sha256": hashlib.sha256(raw).hexdigest()})
        chunks.append(tokenize(raw))
    return np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64), sources


def build_calibration(spec: CalibrationSpec, files: list[str] | None = None) -> Corpus:
    """Sample `sample_count` disjoint windows of `sequence_length` tokens.

    Windows are aligned to a fixed grid inside the spec's region and picked by
    a seeded shuffle, so two corpora with non-overlapping regions never share
    a window, and the same spec always rebuilds the same corpus.
    """
    spec.validate()
    paths = [str(p) for p in (files if files is not None else spec.sources)]
    tokens, sources = _read_tokens(paths)

    lo = int(len(tokens) * spec.region[0])
    hi = int(len(tokens) * spec.region[1])
    usable = hi - lo
    n_windows = usable // spec.sequence_length
    if n_windows < spec.sample_count:
        raise ValidationError(
            f"insufficient text for corpus {spec.name!r}: need {spec.sample_count} windows of "
            f"{spec.sequence_length} tokens ({spec.sample_count * spec.sequence_length} total), "
            f"region holds {usable} tokens ({n_windows} windows)"
        )
    rng = np.random.default_rng(spec.seed)
    picks = rng.permutation(n_windows)[: spec.sample_count]
    offsets = [lo + int(i) * spec.sequence_length for i in picks]
    sequences = [tokens[o : o + spec.sequence_length].copy() for o in offsets]
    provenance = {
        "name": spec.name,
        "sources": sources,
        "seed": spec.seed,
        "sequence_length": spec.sequence_length,
        "region": list(spec.region),
        "offsets": offsets,
    }
    return Corpus(name=spec.name, sequences=sequences, provenance=provenance)


def save_corpus_cache(corpus: Corpus, path) -> None:
    """Persist (source, seed, window offsets) so a run can be replayed exactly."""
    if corpus.provenance is None:
        raise ValidationError("corpus has no provenance; only built corpora can be cached")
    Path(path).write_text(json.dumps(corpus.provenance, indent=2, sort_keys=True) + "\n")


def load_corpus_cache(path) -> Corpus:
    try:
        info = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactError(f"cannot read corpus cache {path}: {e}") from None
    for key in ("name", "sources", "seed", "sequence_length", "offsets"):
        if key not in info:
            raise ArtifactError(f"corpus cache {path}: missing key {key!r}")
    tokens, sources = _read_tokens([s["path"] for s in info["sources"]])
    for want, have in zip(info["sources"], sources):
        if want["sha256"] != have["sha256"]:
            raise ArtifactError(
                f"corpus cache {path}: source {have['path']} changed since the cache was written"
            )
    length = int(info["sequence_length"])
    sequences = []
    for o in info["offsets"]:
        if o + length > len(tokens):
            raise ArtifactError(f"corpus cache {path}: window at {o} exceeds source size")
        sequences.append(tokens[o : o + length].copy())
    return Corpus(name=info["name"], sequences=sequences, provenance=info)
