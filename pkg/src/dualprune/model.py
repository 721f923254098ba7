"""Small decoder-only transformer with a fixed prunable-projection layout.

Each layer exposes exactly seven prunable matrices in the canonical order
q, k, v, o, gate, up, down.  Embeddings, norm scales and the (tied) output
head are never part of the prunable set.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .errors import ArtifactError, NumericError, ValidationError
from .tensor import GradientTape, Tensor

PROJECTIONS = ("q", "k", "v", "o", "gate", "up", "down")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    context_length: int = 64
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 128
    seed: int = 0

    def validate(self) -> None:
        for field in ("vocab_size", "num_layers", "d_model", "num_heads", "d_ff"):
            if getattr(self, field) < 1:
                raise ValidationError(f"ModelConfig.{field} must be >= 1, got {getattr(self, field)}")
        if self.context_length < 2:
            raise ValidationError(f"ModelConfig.context_length must be >= 2, got {self.context_length}")
        if self.d_model % self.num_heads != 0:
            raise ValidationError(
                f"d_model ({self.d_model}) must be divisible by num_heads ({self.num_heads})"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


def projection_shape(config: ModelConfig, name: str) -> tuple[int, int]:
    d, f = config.d_model, config.d_ff
    if name in ("q", "k", "v", "o"):
        return (d, d)
    if name in ("gate", "up"):
        return (d, f)
    if name == "down":
        return (f, d)
    raise ValidationError(f"unknown projection {name!r}")


def prunable_parameter_count(config: ModelConfig) -> int:
    d, f = config.d_model, config.d_ff
    return config.num_layers * (4 * d * d + 3 * d * f)


class TransformerModel:
    """Weights plus forward pass; mutated only by `pretrain` and mask application."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], step: int = 0,
                 meta: dict[str, str] | None = None):
        self.config = config
        self.params = params
        self.step = step
        self.meta = dict(meta or {})

    # -- parameter access ---------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def grads_by_name(self, grads_by_tid: dict[int, Tensor]) -> dict[str, np.ndarray]:
        """Re-key a backward() result by parameter name."""
        return {
            name: grads_by_tid[t.tid].data
            for name, t in self.params.items()
            if t.tid in grads_by_tid
        }

    def copy(self) -> "TransformerModel":
        return TransformerModel(
            self.config,
            {name: t.copy() for name, t in self.params.items()},
            step=self.step,
            meta=dict(self.meta),
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(sorted(asdict(self.config).items())).encode())
        h.update(str(self.step).encode())
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(repr(t.data.shape).encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    # -- forward ------------------------------------------------------------

    def forward(self, ids: np.ndarray) -> Tensor:
        """Logits for a (batch, length) int array of token ids."""
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValidationError(f"forward: ids must be 2-D (batch, length), got shape {ids.shape}")
        n_tok = ids.shape[1]
        if not 1 <= n_tok <= self.config.context_length:
            raise ValidationError(
                f"forward: length {n_tok} outside [1, {self.config.context_length}]"
            )
        p = self.params
        h = T.add(
            T.embedding_lookup(p["embed"], ids),
            T.embedding_lookup(p["pos"], np.arange(n_tok)),
        )
        for i in range(self.config.num_layers):
            pre = T.mul(T.rms_norm(h), p[f"layers.{i}.attn_norm"])
            h = T.add(h, self._attention(i, pre))
            pre = T.mul(T.rms_norm(h), p[f"layers.{i}.mlp_norm"])
            h = T.add(h, self._mlp(i, pre))
        h = T.mul(T.rms_norm(h), p["final_norm"])
        return T.matmul(h, T.transpose(p["embed"], 0, 1))  # tied output head

    def _attention(self, i: int, x: Tensor) -> Tensor:
        p = self.params
        n_batch, n_tok, d = x.shape
        heads, hd = self.config.num_heads, self.config.head_dim

        def split(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (n_batch, n_tok, heads, hd)), 1, 2)

        q = split(T.matmul(x, p[f"layers.{i}.q"]))
        k = split(T.matmul(x, p[f"layers.{i}.k"]))
        v = split(T.matmul(x, p[f"layers.{i}.v"]))
        scores = T.mul(T.matmul(q, T.transpose(k, 2, 3)), Tensor(1.0 / math.sqrt(hd)))
        attn = T.softmax_last(T.causal_mask_add(scores))
        ctx = T.reshape(T.transpose(T.matmul(attn, v), 1, 2), (n_batch, n_tok, d))
        return T.matmul(ctx, p[f"layers.{i}.o"])

    def _mlp(self, i: int, x: Tensor) -> Tensor:
        p = self.params
        gated = T.mul(T.silu(T.matmul(x, p[f"layers.{i}.gate"])), T.matmul(x, p[f"layers.{i}.up"]))
        return T.matmul(gated, p[f"layers.{i}.down"])


def init_model(config: ModelConfig) -> TransformerModel:
    """Seeded scaled-normal init (std 1/sqrt(fan_in)); bit-reproducible from the seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}

    def normal(name: str, shape: tuple[int, int], fan_in: int) -> None:
        params[name] = T.param(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape), name)

    def ones(name: str, n: int) -> None:
        params[name] = T.param(np.ones(n), name)

    normal("embed", (config.vocab_size, config.d_model), config.vocab_size)
    normal("pos", (config.context_length, config.d_model), config.context_length)
    for i in range(config.num_layers):
        ones(f"layers.{i}.attn_norm", config.d_model)
        for name in ("q", "k", "v", "o", "gate", "up"):
            shape = projection_shape(config, name)
            normal(f"layers.{i}.{name}", shape, shape[0])
        shape = projection_shape(config, "down")
        normal(f"layers.{i}.down", shape, shape[0])
        ones(f"layers.{i}.mlp_norm", config.d_model)
    ones("final_norm", config.d_model)
    return TransformerModel(config, params)


def prunable_matrices(model: TransformerModel) -> list[tuple[int, str, Tensor]]:
    """All prunable projections, ordered by layer then (q, k, v, o, gate, up, down)."""
    return [
        (i, name, model.params[f"layers.{i}.{name}"])
        for i in range(model.config.num_layers)
        for name in PROJECTIONS
    ]


def prunable_names(config: ModelConfig) -> list[str]:
    return [f"layers.{i}.{name}" for i in range(config.num_layers) for name in PROJECTIONS]


def _validate_sequence(model: TransformerModel, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ValidationError(f"token sequence must be 1-D, got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValidationError("token sequence must contain integer ids")
    if not 2 <= ids.size <= model.config.context_length:
        raise ValidationError(
            f"sequence length {ids.size} outside [2, {model.config.context_length}]"
        )
    if ids.min() < 0 or ids.max() >= model.config.vocab_size:
        raise ValidationError(f"token id out of range for vocab {model.config.vocab_size}")
    return ids


def next_token_loss(model: TransformerModel, token_sequence) -> tuple[Tensor, GradientTape]:
    """Mean cross-entropy of predicting token t+1 from the prefix up to t."""
    ids = _validate_sequence(model, token_sequence)
    tape = GradientTape()
    with tape:
        logits = model.forward(ids[None, :-1])
        loss = T.cross_entropy(logits, ids[None, 1:])
    return loss, tape


def batch_next_token_loss(model: TransformerModel, batch: np.ndarray) -> Tensor:
    """Mean cross-entropy over a (batch, length) array of same-length sequences."""
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] < 2:
        raise ValidationError(f"batch must be 2-D with length >= 2, got shape {batch.shape}")
    logits = model.forward(batch[:, :-1])
    return T.cross_entropy(logits, batch[:, 1:])


def mean_corpus_loss(model: TransformerModel, corpus, batch_size: int = 32) -> float:
    """Token-count-weighted mean next-token loss over all corpus sequences.

    Sequences are batched in corpus order (consecutive equal-length runs), so the
    reduction order is fixed and results are reproducible bit-for-bit.
    """
    sequences = corpus.sequences if hasattr(corpus, "sequences") else list(corpus)
    if not sequences:
        raise ValidationError("mean_corpus_loss: corpus is empty")
    nll_total = 0.0
    token_total = 0
    pending: list[np.ndarray] = []

    def flush() -> None:
        nonlocal nll_total, token_total
        if not pending:
            return
        stacked = np.stack(pending)
        n_predicted = stacked.shape[0] * (stacked.shape[1] - 1)
        nll_total += float(batch_next_token_loss(model, stacked).data) * n_predicted
        token_total += n_predicted
        pending.clear()

    for seq in sequences:
        seq = np.asarray(seq)
        if pending and (len(pending) >= batch_size or pending[0].size != seq.size):
            flush()
        pending.append(seq)
    flush()
    return nll_total / token_total


def pretrain(model: TransformerModel, corpus, steps: int, learning_rate: float, *,
             batch_size: int = 8, log_every: int = 50,
             verbose: bool = False) -> tuple[TransformerModel, list[tuple[int, float]]]:
    """Plain SGD on next-token loss; mutates `model` in place.

    Returns the model and a per-step loss history.  Batches are drawn with an
    rng seeded from the model config, so identical (seed, corpus, steps) runs
    produce bit-identical checkpoints.
    """
    if steps < 1:
        raise ValidationError(f"pretrain: steps must be >= 1, got {steps}")
    if learning_rate <= 0:
        raise ValidationError(f"pretrain: learning_rate must be > 0, got {learning_rate}")
    sequences = corpus.sequences if hasattr(corpus, "sequences") else list(corpus)
    if not sequences:
        raise ValidationError("pretrain: corpus is empty")
    lengths = {np.asarray(s).size for s in sequences}
    if len(lengths) != 1:
        raise ValidationError(f"pretrain: sequences must share one length, got {sorted(lengths)}")

    data = np.stack([np.asarray(s) for s in sequences])
    rng = np.random.default_rng([model.config.seed, 0x7261696E])
    history: list[tuple[int, float]] = []
    for step in range(1, steps + 1):
        batch = data[rng.integers(0, data.shape[0], size=batch_size)]
        tape = GradientTape()
        with tape:
            loss = batch_next_token_loss(model, batch)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise NumericError(f"pretrain: non-finite loss at step {step}")
        grads = model.grads_by_name(T.backward(tape, loss))
        for name, g in grads.items():
            model.params[name].data -= learning_rate * g
        history.append((step, loss_val))
        if verbose and (step % log_every == 0 or step == steps):
            print(f"step {step:>6d}  loss {loss_val:.4f}")

    model.step += steps
    model.meta["pretrained"] = "1"
    model.meta["converged"] = "0" if still_improving(history) else "1"
    return model, history


def still_improving(history: list[tuple[int, float]]) -> bool:
    """True when smoothed loss fell by more than 1% over the last 10% of steps."""
    if len(history) < 20:
        return False
    losses = np.array([loss for _, loss in history])
    window = max(1, len(losses) // 20)
    tail = max(2 * window, len(losses) // 10)
    smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
    head_val = smooth[-tail] if tail < len(smooth) else smooth[0]
    tail_val = smooth[-1]
    return head_val > 0 and (head_val - tail_val) / head_val > 0.01


# ---------------------------------------------------------------------------
# checkpoints

_CONFIG_FIELDS = ("vocab_size", "context_length", "num_layers", "d_model",
                  "num_heads", "d_ff", "seed")


def save_checkpoint(model: TransformerModel, path, extra_meta: dict[str, str] | None = None) -> None:
    meta = {f"config.{k}": str(getattr(model.config, k)) for k in _CONFIG_FIELDS}
    meta["step"] = str(model.step)
    for k, v in model.meta.items():
        meta[f"x.{k}"] = v
    for k, v in (extra_meta or {}).items():
        meta[f"x.{k}"] = v
    blocks = [(name, t.data) for name, t in model.params.items()]
    write_container(path, "checkpoint", meta, blocks)


def expected_param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = config.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "embed": (config.vocab_size, d),
        "pos": (config.context_length, d),
    }
    for i in range(config.num_layers):
        shapes[f"layers.{i}.attn_norm"] = (d,)
        for name in ("q", "k", "v", "o", "gate", "up", "down"):
            shapes[f"layers.{i}.{name}"] = projection_shape(config, name)
        shapes[f"layers.{i}.mlp_norm"] = (d,)
    shapes["final_norm"] = (d,)
    return shapes


def load_checkpoint(path) -> TransformerModel:
    c = read_container(path, expect_kind="checkpoint")
    try:
        config = ModelConfig(**{k: int(c.meta[f"config.{k}"]) for k in _CONFIG_FIELDS})
        step = int(c.meta["step"])
    except (KeyError, ValueError) as e:
        raise ArtifactError(f"checkpoint {path}: bad or missing config metadata ({e})") from None
    config.validate()

    expected = expected_param_shapes(config)
    if list(c.blocks) != list(expected):
        raise ArtifactError(f"checkpoint {path}: unexpected weight manifest")
    params: dict[str, Tensor] = {}
    for name, arr in c.blocks.items():
        if arr.shape != expected[name]:
            raise ArtifactError(
                f"checkpoint {path}: block {name} has shape {arr.shape}, expected {expected[name]}"
            )
        params[name] = T.param(arr, name)
    meta = {k[2:]: v for k, v in c.meta.items() if k.startswith("x.")}
    return TransformerModel(config, params, step=step, meta=meta)
