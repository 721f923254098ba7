"""Mask selection and application.

Selection always zeroes exactly floor(sparsity * pool_size) weights per pool,
where a pool is one prunable matrix (default), one column block of width B_s
(blocked mode), or all seven matrices of a layer (optional comparison mode).
Ties are broken toward the lowest flat index, so masks are reproducible.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .container import read_container, write_container
from .errors import ArtifactError, ValidationError
from .model import TransformerModel, prunable_matrices, prunable_names

MODE_PER_MATRIX = "per-matrix"
MODE_BLOCKED = "blocked"


@dataclass
class Mask:
    """Binary keep(1)/prune(0) indicators for every prunable matrix."""
    masks: dict[str, np.ndarray]
    sparsity: float
    mode: str
    block_size: int | None = None
    method: str = "dual"
    score_fingerprint: str | None = None
    model_fingerprint: str | None = None

    def zeros_per_matrix(self) -> dict[str, int]:
        return {k: int(m.size - m.sum()) for k, m in self.masks.items()}

    def kept_fraction(self) -> float:
        total = sum(m.size for m in self.masks.values())
        kept = sum(int(m.sum()) for m in self.masks.values())
        return kept / total

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.sparsity!r}|{self.mode}|{self.method}".encode())
        for name in sorted(self.masks):
            m = self.masks[name]
            h.update(name.encode())
            h.update(repr(m.shape).encode())
            h.update(np.packbits(m.astype(np.uint8)).tobytes())
        return h.hexdigest()


@dataclass
class PruneConfig:
    sparsity: float = 0.5
    mode: str = MODE_PER_MATRIX
    block_size: int = 16
    method: str = "dual"

    def validate(self) -> None:
        _check_sparsity(self.sparsity)
        if self.mode not in (MODE_PER_MATRIX, MODE_BLOCKED):
            raise ValidationError(f"unknown mask mode {self.mode!r}")
        if self.block_size < 1:
            raise ValidationError(f"block_size must be >= 1, got {self.block_size}")
        if self.method not in ("dual", "magnitude"):
            raise ValidationError(f"unknown pruning method {self.method!r}")


def _check_sparsity(sparsity: float) -> None:
    if not 0.0 <= sparsity < 1.0:
        raise ValidationError(f"sparsity must lie in [0, 1), got {sparsity}")


def _score_dict(scores) -> dict[str, np.ndarray]:
    if hasattr(scores, "scores"):
        return scores.scores
    return dict(scores)


def _prune_lowest(scores: np.ndarray, n_prune: int) -> np.ndarray:
    """Flat mask zeroing the n_prune lowest scores; ties go to the lowest index."""
    flat = scores.reshape(-1)
    mask = np.ones(flat.size, dtype=np.uint8)
    if n_prune > 0:
        order = np.argsort(flat, kind="stable")
        mask[order[:n_prune]] = 0
    return mask.reshape(scores.shape)


def select_mask_per_matrix(scores, sparsity: float, *, pool_layers: bool = False) -> Mask:
    """Zero the floor(sparsity * M) lowest-scored weights within each matrix.

    With `pool_layers`, the seven matrices of a layer compete in one pool
    instead (kept for comparison runs; the per-matrix rule is the default).
    """
    _check_sparsity(sparsity)
    per_matrix = _score_dict(scores)
    masks: dict[str, np.ndarray] = {}
    if not pool_layers:
        for name, s in per_matrix.items():
            masks[name] = _prune_lowest(s, int(math.floor(sparsity * s.size)))
    else:
        by_layer: dict[str, list[str]] = {}
        for name in per_matrix:
            by_layer.setdefault(name.rsplit(".", 1)[0], []).append(name)
        for names in by_layer.values():
            pooled = np.concatenate([per_matrix[n].reshape(-1) for n in names])
            flat = _prune_lowest(pooled, int(math.floor(sparsity * pooled.size)))
            start = 0
            for n in names:
                size = per_matrix[n].size
                masks[n] = flat[start : start + size].reshape(per_matrix[n].shape)
                start += size
    return Mask(
        masks=masks,
        sparsity=sparsity,
        mode=MODE_PER_MATRIX if not pool_layers else "per-layer",
        method="dual",
        score_fingerprint=_maybe_fingerprint(scores),
    )


def select_mask_blocked(scores, sparsity: float, block_size) -> Mask:
    """Independent sub-mask for every group of `block_size` consecutive columns.

    `block_size` may be a single int or a per-matrix mapping (see
    `scaled_block_sizes`).  The last block of a matrix may be narrower.
    """
    _check_sparsity(sparsity)
    per_matrix = _score_dict(scores)
    sizes: Mapping[str, int]
    if isinstance(block_size, Mapping):
        sizes = block_size
    else:
        if int(block_size) < 1:
            raise ValidationError(f"block size must be >= 1, got {block_size}")
        sizes = {name: int(block_size) for name in per_matrix}
    masks: dict[str, np.ndarray] = {}
    for name, s in per_matrix.items():
        width = sizes.get(name)
        if width is None or width < 1:
            raise ValidationError(f"missing or invalid block size for {name}")
        mask = np.empty_like(s, dtype=np.uint8)
        for j0 in range(0, s.shape[1], width):
            block = s[:, j0 : j0 + width]
            mask[:, j0 : j0 + width] = _prune_lowest(block, int(math.floor(sparsity * block.size)))
        masks[name] = mask
    base = None if isinstance(block_size, Mapping) else int(block_size)
    return Mask(
        masks=masks,
        sparsity=sparsity,
        mode=MODE_BLOCKED,
        block_size=base,
        method="dual",
        score_fingerprint=_maybe_fingerprint(scores),
    )


def scaled_block_sizes(shapes: Mapping[str, tuple[int, ...]], base: int) -> dict[str, int]:
    """Widen the block for matrices with more columns: base * round(cols/min_cols)."""
    if base < 1:
        raise ValidationError(f"base block size must be >= 1, got {base}")
    min_cols = min(shape[1] for shape in shapes.values())
    return {
        name: base * max(1, round(shape[1] / min_cols))
        for name, shape in shapes.items()
    }


def _maybe_fingerprint(scores) -> str:
    return score_content_fingerprint(_score_dict(scores))


def score_content_fingerprint(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return h.hexdigest()


def magnitude_mask(model: TransformerModel, sparsity: float) -> Mask:
    """Layer-wise magnitude baseline: per-matrix rule with |W| as the score."""
    _check_sparsity(sparsity)
    scores = {f"layers.{i}.{name}": np.abs(t.data) for i, name, t in prunable_matrices(model)}
    mask = select_mask_per_matrix(scores, sparsity)
    mask.method = "magnitude"
    mask.score_fingerprint = None
    mask.model_fingerprint = model.fingerprint()
    return mask


def apply_mask(model: TransformerModel, mask: Mask) -> TransformerModel:
    """Return a copy of the model with masked weights set to zero.

    Only the seven prunable projections per layer are touched; the mask's
    fingerprint is recorded on the copy for provenance.
    """
    expected = prunable_names(model.config)
    if set(mask.masks) != set(expected):
        raise ValidationError("mask does not cover exactly the model's prunable matrices")
    for name in expected:
        if mask.masks[name].shape != model.params[name].data.shape:
            raise ValidationError(
                f"mask shape {mask.masks[name].shape} does not match {name} "
                f"shape {model.params[name].data.shape}"
            )
    pruned = model.copy()
    for name in expected:
        pruned.params[name].data *= mask.masks[name]
    pruned.meta["mask_fingerprint"] = mask.fingerprint()
    pruned.meta["mask_method"] = mask.method
    pruned.meta["mask_sparsity"] = repr(mask.sparsity)
    return pruned


# ---------------------------------------------------------------------------
# persistence: bit-packed blocks in the shared container format

def save_mask(mask: Mask, path) -> None:
    meta = {
        "sparsity": repr(mask.sparsity),
        "mode": mask.mode,
        "block_size": "" if mask.block_size is None else str(mask.block_size),
        "method": mask.method,
        "score_fingerprint": mask.score_fingerprint or "",
        "model_fingerprint": mask.model_fingerprint or "",
    }
    blocks = [(name, m) for name, m in mask.masks.items()]
    write_container(path, "mask", meta, blocks, bitpack=frozenset(mask.masks))


def load_mask(path) -> Mask:
    c = read_container(path, expect_kind="mask")
    try:
        return Mask(
            masks={k: v.astype(np.uint8) for k, v in c.blocks.items()},
            sparsity=float(c.meta["sparsity"]),
            mode=c.meta["mode"],
            block_size=int(c.meta["block_size"]) if c.meta.get("block_size") else None,
            method=c.meta["method"],
            score_fingerprint=c.meta.get("score_fingerprint") or None,
            model_fingerprint=c.meta.get("model_fingerprint") or None,
        )
    except (KeyError, ValueError) as e:
        raise ArtifactError(f"mask file {path}: bad metadata ({e})") from None
