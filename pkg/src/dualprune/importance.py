"""Weight-importance scoring for the prunable projections.

Three score families:

* general importance: per-weight removal error 0.5 * W^2 / [H^-1]_mm, with the
  inverse Hessian diagonal approximated as 1 / (H_mm + damping) and H_mm from
  the empirical Fisher (mean squared per-sample gradient) on open-domain data;
* dual importance: |u + u^2/2| with u = g * W, where g is the next-token
  gradient on domain data plus a closed-form regularizer gradient
  2*lambda*alpha^2 * G * g_next * H_mm that penalizes moving weights the
  general scores marked important;
* brute force: the exact loss change from zeroing one weight at a time, used
  as the ranking oracle for the approximations above.

Model weights are never updated here; only gradients are read.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .errors import ArtifactError, NumericError, ShapeError, ValidationError
from .model import TransformerModel, mean_corpus_loss, next_token_loss, prunable_names

DEFAULT_DAMPING = 1e-4
DEFAULT_LAMBDA = 0.1
DEFAULT_ALPHA = 0.03


@dataclass
class FisherDiagonal:
    """Per-weight mean squared gradient; stands in for the Hessian diagonal."""
    values: dict[str, np.ndarray]
    sample_count: int
    corpus_fingerprint: str


@dataclass
class ImportanceMatrixG:
    """General (open-domain) importance scores, one matrix per prunable weight."""
    scores: dict[str, np.ndarray]
    damping: float
    sample_count: int
    corpus_fingerprint: str
    model_fingerprint: str
    normalized: bool = False


@dataclass
class DualScoreS:
    """Final dual importance scores combining generality and specificity."""
    scores: dict[str, np.ndarray]
    lam: float
    alpha: float
    sample_count: int
    domain_corpus_fingerprint: str
    general_corpus_fingerprint: str
    model_fingerprint: str
    fisher_source: str = "domain"


@dataclass
class GradientStats:
    """Mean gradient and mean squared gradient over a corpus, per prunable matrix."""
    mean: dict[str, np.ndarray]
    mean_square: dict[str, np.ndarray]
    sample_count: int
    corpus_fingerprint: str


class _PairwiseSum:
    """Streaming pairwise (binary-counter) summation over dict-of-array samples.

    The summation tree depends only on the sample count, so duplicating every
    sample doubles each partial sum exactly and the mean stays bit-identical
    under corpus duplication.
    """

    def __init__(self):
        self._levels: list[dict[str, np.ndarray] | None] = []
        self.count = 0

    def add(self, sample: dict[str, np.ndarray]) -> None:
        carry: dict[str, np.ndarray] | None = dict(sample)
        for i, slot in enumerate(self._levels):
            if carry is None:
                break
            if slot is None:
                self._levels[i] = carry
                carry = None
            else:
                carry = {k: slot[k] + carry[k] for k in carry}
                self._levels[i] = None
        if carry is not None:
            self._levels.append(carry)
        self.count += 1

    def mean(self) -> dict[str, np.ndarray]:
        if self.count == 0:
            raise ValidationError("mean of zero samples")
        total: dict[str, np.ndarray] | None = None
        for slot in self._levels:
            if slot is None:
                continue
            total = slot if total is None else {k: total[k] + slot[k] for k in slot}
        assert total is not None
        return {k: v / self.count for k, v in total.items()}


def next_token_gradients(model: TransformerModel, corpus) -> GradientStats:
    """Per-sample next-token gradients, reduced to mean and mean-of-squares.

    Samples are processed one sequence at a time in corpus order, so the
    squared-gradient accumulator is the empirical Fisher diagonal and the
    whole computation is reproducible bit-for-bit.
    """
    if len(corpus.sequences) == 0:
        raise ValidationError("next_token_gradients: corpus is empty")
    names = set(prunable_names(model.config))
    acc_g = _PairwiseSum()
    acc_g2 = _PairwiseSum()
    for j, seq in enumerate(corpus.sequences):
        loss, tape = next_token_loss(model, seq)
        grads = model.grads_by_name(T.backward(tape, loss))
        sample = {k: v for k, v in grads.items() if k in names}
        for k, g in sample.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {k} on sample {j}")
        acc_g.add(sample)
        acc_g2.add({k: g * g for k, g in sample.items()})
    return GradientStats(
        mean=acc_g.mean(),
        mean_square=acc_g2.mean(),
        sample_count=len(corpus.sequences),
        corpus_fingerprint=corpus.fingerprint(),
    )


def estimate_fisher_diagonal(model: TransformerModel, corpus) -> FisherDiagonal:
    """Empirical Fisher: mean of squared per-sample next-token gradients."""
    stats = next_token_gradients(model, corpus)
    return FisherDiagonal(
        values=stats.mean_square,
        sample_count=stats.sample_count,
        corpus_fingerprint=stats.corpus_fingerprint,
    )


def general_importance(model: TransformerModel, open_corpus, damping: float = DEFAULT_DAMPING,
                       *, normalize: bool = False,
                       fisher: FisherDiagonal | None = None) -> ImportanceMatrixG:
    """Removal-error scores 0.5 * W^2 * (H_mm + damping) on open-domain data.

    `fisher` may be passed to reuse a precomputed diagonal; by default it is
    estimated from `open_corpus`.  Assumes a model trained to a loss minimum;
    an untrained model only triggers a warning since the scores stay defined.
    """
    if damping <= 0:
        raise ValidationError(f"damping must be > 0, got {damping}")
    if model.step == 0 or model.meta.get("pretrained") != "1":
        warnings.warn("general_importance: model does not look pretrained; "
                      "removal-error scores assume a loss minimum", stacklevel=2)
    elif model.meta.get("converged") == "0":
        warnings.warn("general_importance: training loss was still falling; "
                      "removal-error scores assume a loss minimum", stacklevel=2)
    if fisher is None:
        fisher = estimate_fisher_diagonal(model, open_corpus)
    scores: dict[str, np.ndarray] = {}
    for name in prunable_names(model.config):
        w = model.params[name].data
        # [H^-1]_mm ~ 1/(H_mm + damping), so the OBS ratio W^2 / [H^-1]_mm
        # becomes a multiplication and stays defined where H_mm == 0.
        scores[name] = 0.5 * w * w * (fisher.values[name] + damping)
    if normalize:
        for name, s in scores.items():
            peak = s.max()
            if peak > 0:
                scores[name] = s / peak
    return ImportanceMatrixG(
        scores=scores,
        damping=damping,
        sample_count=fisher.sample_count,
        corpus_fingerprint=fisher.corpus_fingerprint,
        model_fingerprint=model.fingerprint(),
        normalized=normalize,
    )


def _check_same_shapes(op: str, *dicts: dict[str, np.ndarray]) -> None:
    first = dicts[0]
    for other in dicts[1:]:
        if set(other) != set(first):
            raise ShapeError(f"{op}: matrix sets differ")
        for k in first:
            if other[k].shape != first[k].shape:
                raise ShapeError(
                    f"{op}: shape mismatch for {k}: {first[k].shape} vs {other[k].shape}"
                )


def regularizer_gradient(G: ImportanceMatrixG, g_next: dict[str, np.ndarray],
                         H: FisherDiagonal, lam: float, alpha: float) -> dict[str, np.ndarray]:
    """Closed-form gradient of the importance-weighted penalty term.

    Elementwise 2*lam*alpha^2 * G * g_next * H_mm, computed directly rather
    than through a second differentiation pass.
    """
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    if alpha <= 0:
        raise ValidationError(f"alpha must be > 0, got {alpha}")
    _check_same_shapes("regularizer_gradient", G.scores, g_next, H.values)
    factor = 2.0 * lam * alpha * alpha
    return {k: factor * G.scores[k] * g_next[k] * H.values[k] for k in G.scores}


def _dual_gradient_parts(model: TransformerModel, domain_corpus, G: ImportanceMatrixG,
                         lam: float, alpha: float, fisher: FisherDiagonal | None
                         ) -> tuple[GradientStats, FisherDiagonal, dict[str, np.ndarray]]:
    stats = next_token_gradients(model, domain_corpus)
    if fisher is None:
        fisher = FisherDiagonal(
            values=stats.mean_square,
            sample_count=stats.sample_count,
            corpus_fingerprint=stats.corpus_fingerprint,
        )
    if lam == 0.0:
        # Degenerate regularizer: keep the plain gradient bit-identical.
        total = dict(stats.mean)
    else:
        reg = regularizer_gradient(G, stats.mean, fisher, lam, alpha)
        total = {k: stats.mean[k] + reg[k] for k in stats.mean}
    return stats, fisher, total


def dual_loss_gradient(model: TransformerModel, domain_corpus, G: ImportanceMatrixG,
                       lam: float = DEFAULT_LAMBDA, alpha: float = DEFAULT_ALPHA,
                       *, fisher: FisherDiagonal | None = None) -> dict[str, np.ndarray]:
    """Gradient of the regularized loss: next-token gradient over the domain
    corpus plus the closed-form regularizer gradient.  Weights are not updated.

    By default the Fisher diagonal inside the regularizer is estimated from
    the same domain pass; pass `fisher` to reuse e.g. the open-domain one.
    """
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    if alpha <= 0:
        raise ValidationError(f"alpha must be > 0, got {alpha}")
    _, _, total = _dual_gradient_parts(model, domain_corpus, G, lam, alpha, fisher)
    return total


def score_from_first_order(u: np.ndarray) -> np.ndarray:
    """|u + u^2/2| with u = gradient * weight; the cubic remainder is dropped."""
    return np.abs(u + 0.5 * u * u)


def dual_importance_scores(model: TransformerModel, domain_corpus, G: ImportanceMatrixG,
                           lam: float = DEFAULT_LAMBDA, alpha: float = DEFAULT_ALPHA,
                           *, fisher: FisherDiagonal | None = None) -> DualScoreS:
    """Final per-weight pruning scores from the regularized-loss gradient."""
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    if alpha <= 0:
        raise ValidationError(f"alpha must be > 0, got {alpha}")
    stats, used_fisher, total = _dual_gradient_parts(model, domain_corpus, G, lam, alpha, fisher)
    scores: dict[str, np.ndarray] = {}
    for name in prunable_names(model.config):
        u = total[name] * model.params[name].data
        scores[name] = score_from_first_order(u)
    return DualScoreS(
        scores=scores,
        lam=lam,
        alpha=alpha,
        sample_count=stats.sample_count,
        domain_corpus_fingerprint=stats.corpus_fingerprint,
        general_corpus_fingerprint=G.corpus_fingerprint,
        model_fingerprint=G.model_fingerprint,
        fisher_source="domain" if fisher is None else "provided",
    )


def brute_force_importance(model: TransformerModel, corpus, matrix_id: tuple[int, str],
                           weight_indices=None) -> np.ndarray:
    """Exact |loss(zeroed) - loss(base)| for single-weight removals.

    `matrix_id` is (layer_index, projection_name); `weight_indices` is a list
    of flat indices into that matrix (default: every weight).  Works on a
    copy, so the input model is untouched.
    """
    layer, proj = matrix_id
    key = f"layers.{layer}.{proj}"
    if key not in model.params:
        raise ValidationError(f"no prunable matrix {matrix_id!r}")
    if key not in prunable_names(model.config):
        raise ValidationError(f"{matrix_id!r} is not a prunable matrix")
    work = model.copy()
    weights = work.params[key].data.reshape(-1)
    if weight_indices is None:
        weight_indices = range(weights.size)
    indices = [int(i) for i in weight_indices]
    for i in indices:
        if not 0 <= i < weights.size:
            raise ValidationError(f"weight index {i} out of range for {key} with {weights.size} entries")

    base = mean_corpus_loss(work, corpus)
    deltas = np.empty(len(indices), dtype=np.float64)
    for n, i in enumerate(indices):
        original = weights[i]
        weights[i] = 0.0
        deltas[n] = abs(mean_corpus_loss(work, corpus) - base)
        weights[i] = original
    return deltas


# ---------------------------------------------------------------------------
# score persistence (same container format as checkpoints)

def save_general_scores(G: ImportanceMatrixG, path) -> None:
    meta = {
        "damping": repr(G.damping),
        "sample_count": str(G.sample_count),
        "corpus_fingerprint": G.corpus_fingerprint,
        "model_fingerprint": G.model_fingerprint,
        "normalized": "1" if G.normalized else "0",
    }
    write_container(path, "scores.general", meta, list(G.scores.items()))


def load_general_scores(path) -> ImportanceMatrixG:
    c = read_container(path, expect_kind="scores.general")
    try:
        return ImportanceMatrixG(
            scores=dict(c.blocks),
            damping=float(c.meta["damping"]),
            sample_count=int(c.meta["sample_count"]),
            corpus_fingerprint=c.meta["corpus_fingerprint"],
            model_fingerprint=c.meta["model_fingerprint"],
            normalized=c.meta.get("normalized") == "1",
        )
    except (KeyError, ValueError) as e:
        raise ArtifactError(f"general score file {path}: bad metadata ({e})") from None


def save_dual_scores(S: DualScoreS, path) -> None:
    meta = {
        "lambda": repr(S.lam),
        "alpha": repr(S.alpha),
        "sample_count": str(S.sample_count),
        "domain_corpus_fingerprint": S.domain_corpus_fingerprint,
        "general_corpus_fingerprint": S.general_corpus_fingerprint,
        "model_fingerprint": S.model_fingerprint,
        "fisher_source": S.fisher_source,
    }
    write_container(path, "scores.dual", meta, list(S.scores.items()))


def load_dual_scores(path) -> DualScoreS:
    c = read_container(path, expect_kind="scores.dual")
    try:
        return DualScoreS(
            scores=dict(c.blocks),
            lam=float(c.meta["lambda"]),
            alpha=float(c.meta["alpha"]),
            sample_count=int(c.meta["sample_count"]),
            domain_corpus_fingerprint=c.meta["domain_corpus_fingerprint"],
            general_corpus_fingerprint=c.meta["general_corpus_fingerprint"],
            model_fingerprint=c.meta["model_fingerprint"],
            fisher_source=c.meta.get("fisher_source", "domain"),
        )
    except (KeyError, ValueError) as e:
        raise ArtifactError(f"dual score file {path}: bad metadata ({e})") from None
