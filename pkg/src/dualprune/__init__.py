"""Dual-importance unstructured pruning for a small decoder-only transformer.

The pipeline: pretrain a toy byte-level transformer, score general weight
importance on open-domain calibration data, blend it with domain-specific
gradients into dual importance scores, select unstructured masks, and
evaluate the pruned model.

The numeric core is single-threaded by design (results must be reproducible
bit-for-bit), so BLAS pools are pinned to one thread on import.
"""

try:
    import threadpoolctl as _threadpoolctl

    _threadpoolctl.threadpool_limits(1, "blas")
except Exception:  # pragma: no cover - best effort; numpy still works
    pass

from .corpus import CalibrationSpec, Corpus, build_calibration, detokenize, tokenize
from .errors import (
    ArtifactError,
    DualPruneError,
    NumericError,
    ShapeError,
    ValidationError,
)
from .evaluation import (
    EvalReport,
    SimilarityReport,
    SweepResult,
    mask_similarity,
    perplexity,
    sparsity_sweep,
)
from .importance import (
    DualScoreS,
    FisherDiagonal,
    GradientStats,
    ImportanceMatrixG,
    brute_force_importance,
    dual_importance_scores,
    dual_loss_gradient,
    estimate_fisher_diagonal,
    general_importance,
    next_token_gradients,
    regularizer_gradient,
)
from .model import (
    ModelConfig,
    TransformerModel,
    init_model,
    load_checkpoint,
    mean_corpus_loss,
    next_token_loss,
    pretrain,
    prunable_matrices,
    save_checkpoint,
)
from .pruning import (
    Mask,
    PruneConfig,
    apply_mask,
    magnitude_mask,
    select_mask_blocked,
    select_mask_per_matrix,
)
from .tensor import (
    GradientTape,
    Tensor,
    backward,
    finite_difference_gradient,
    forward_primitive,
)

__version__ = "0.1.0"
