"""Pipeline CLI: pretrain -> general-importance -> prune -> eval/masksim/sweep.

Configuration is a flat key=value text file; every key can be overridden on
the command line with a flag of the same name (dashes for underscores).  The
DUALPRUNE_OUTPUT_DIR environment variable overrides output_dir from the file;
an explicit --output-dir flag overrides both.

Exit codes: 0 success, 2 input/validation error, 3 artifact-format error,
4 numeric failure (NaN/Inf).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import evaluation, importance, pruning
from .container import file_fingerprint
from .corpus import CalibrationSpec, build_calibration, load_corpus_cache, save_corpus_cache
from .errors import ArtifactError, DualPruneError, NumericError, ValidationError
from .model import (
    ModelConfig,
    init_model,
    load_checkpoint,
    prunable_matrices,
    pretrain,
    save_checkpoint,
)

ENV_OUTPUT_DIR = "DUALPRUNE_OUTPUT_DIR"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ARTIFACT = 3
EXIT_NUMERIC = 4


@dataclass
class RunConfig:
    # model
    vocab_size: int = 256
    context_length: int = 64
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 128
    seed: int = 0
    # corpora (comma-separated paths; regions are "lo:hi" fractions)
    train_corpus: str = ""
    open_corpus: str = ""
    domain_corpus: str = ""
    test_corpus: str = ""
    train_samples: int = 512
    open_samples: int = 128
    domain_samples: int = 128
    test_samples: int = 64
    sequence_length: int = 64
    train_region: str = "0:1"
    open_region: str = "0:1"
    domain_region: str = "0:1"
    test_region: str = "0:1"
    # pretraining
    steps: int = 2000
    learning_rate: float = 0.3
    batch_size: int = 8
    log_every: int = 50
    # scoring
    lam: float = importance.DEFAULT_LAMBDA
    alpha: float = importance.DEFAULT_ALPHA
    damping: float = importance.DEFAULT_DAMPING
    fisher_source: str = "domain"  # domain | general
    normalize_general: int = 0
    # pruning
    sparsity: float = 0.5
    mode: str = pruning.MODE_PER_MATRIX
    block_size: int = 16
    method: str = "dual"
    # io
    output_dir: str = "runs/default"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size,
            context_length=self.context_length,
            num_layers=self.num_layers,
            d_model=self.d_model,
            num_heads=self.num_heads,
            d_ff=self.d_ff,
            seed=self.seed,
        )

    def prune_config(self) -> pruning.PruneConfig:
        return pruning.PruneConfig(
            sparsity=self.sparsity, mode=self.mode,
            block_size=self.block_size, method=self.method,
        )

    def validate(self) -> None:
        self.model_config().validate()
        self.prune_config().validate()
        if self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if self.alpha <= 0:
            raise ValidationError(f"alpha must be > 0, got {self.alpha}")
        if self.damping <= 0:
            raise ValidationError(f"damping must be > 0, got {self.damping}")
        if self.fisher_source not in ("domain", "general"):
            raise ValidationError(f"fisher_source must be domain or general, got {self.fisher_source!r}")


# config file keys use "lambda"; the dataclass field is `lam`
_KEY_ALIASES = {"lambda": "lam"}
_FIELD_TO_KEY = {"lam": "lambda"}


def parse_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(field_name: str, field_type, raw: str):
    try:
        if field_type is int:
            return int(raw)
        if field_type is float:
            return float(raw)
        return raw
    except ValueError:
        raise ValidationError(f"config key {field_name}: cannot parse {raw!r}") from None


def make_run_config(file_values: dict[str, str], overrides: dict[str, object]) -> RunConfig:
    config = RunConfig()
    typed = {f.name: f.type for f in fields(RunConfig)}
    type_map = {"int": int, "float": float, "str": str}
    for key, raw in file_values.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in typed:
            raise ValidationError(f"unknown config key {key!r}")
        ftype = type_map.get(typed[name], typed[name])
        setattr(config, name, _coerce(key, ftype, raw))
    env_out = os.environ.get(ENV_OUTPUT_DIR)
    if env_out:
        config.output_dir = env_out
    for name, value in overrides.items():
        if value is not None:
            setattr(config, name, value)
    return config


def _parse_region(text: str) -> tuple[float, float]:
    try:
        lo, _, hi = text.partition(":")
        return (float(lo), float(hi))
    except ValueError:
        raise ValidationError(f"region must look like '0:0.7', got {text!r}") from None


def _corpus_spec(config: RunConfig, role: str) -> CalibrationSpec:
    paths_raw = getattr(config, f"{role}_corpus")
    if not paths_raw:
        raise ValidationError(f"no {role}_corpus configured")
    paths = [p.strip() for p in paths_raw.split(",") if p.strip()]
    for p in paths:
        if not Path(p).is_file():
            raise ValidationError(f"{role}_corpus file not found: {p}")
    role_offsets = {"train": 11, "open": 22, "domain": 33, "test": 44}
    return CalibrationSpec(
        sources=paths,
        sample_count=getattr(config, f"{role}_samples"),
        sequence_length=config.sequence_length,
        seed=config.seed + role_offsets[role],
        name=role,
        region=_parse_region(getattr(config, f"{role}_region")),
    )


def _build_corpus(config: RunConfig, role: str):
    return build_calibration(_corpus_spec(config, role))


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_calibrate(config: RunConfig, args) -> int:
    out = _out_dir(config)
    built = []
    for role in ("train", "open", "domain", "test"):
        if not getattr(config, f"{role}_corpus"):
            continue
        corpus = _build_corpus(config, role)
        cache = out / f"{role}.corpus.json"
        save_corpus_cache(corpus, cache)
        built.append(role)
        print(f"{role}: {len(corpus)} sequences x {config.sequence_length} tokens -> {cache}")
    if not built:
        raise ValidationError("no corpus paths configured; nothing to calibrate")
    return EXIT_OK


def cmd_pretrain(config: RunConfig, args) -> int:
    out = _out_dir(config)
    corpus = _build_corpus(config, "train")
    model = init_model(config.model_config())
    model, history = pretrain(
        model, corpus, config.steps, config.learning_rate,
        batch_size=config.batch_size, log_every=config.log_every, verbose=True,
    )
    ckpt = out / "model.ckpt"
    save_checkpoint(model, ckpt)
    log_path = out / "pretrain_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in history:
            writer.writerow([step, repr(loss)])
    print(f"checkpoint -> {ckpt}")
    print(f"loss log   -> {log_path}")
    return EXIT_OK


def cmd_general_importance(config: RunConfig, args) -> int:
    out = _out_dir(config)
    model = load_checkpoint(args.checkpoint)
    corpus = _build_corpus(config, "open")
    G = importance.general_importance(
        model, corpus, config.damping, normalize=bool(config.normalize_general),
    )
    path = out / "general_scores.bin"
    importance.save_general_scores(G, path)
    print(f"general importance over {G.sample_count} samples -> {path}")
    return EXIT_OK


def cmd_prune(config: RunConfig, args) -> int:
    out = _out_dir(config)
    prune_cfg = config.prune_config()
    model = load_checkpoint(args.checkpoint)
    model_fp = model.fingerprint()

    if prune_cfg.method == "dual":
        if not args.general_scores:
            raise ValidationError("--general-scores is required for method=dual")
        G = importance.load_general_scores(args.general_scores)
        if G.model_fingerprint != model_fp:
            raise ValidationError(
                "general scores were computed for a different checkpoint "
                f"(scores: {G.model_fingerprint[:12]}..., checkpoint: {model_fp[:12]}...)"
            )
        domain = _build_corpus(config, "domain")
        fisher = None
        if config.fisher_source == "general":
            fisher = importance.estimate_fisher_diagonal(model, _build_corpus(config, "open"))
        scores = importance.dual_importance_scores(
            model, domain, G, config.lam, config.alpha, fisher=fisher,
        )
        scores_path = out / "dual_scores.bin"
        importance.save_dual_scores(scores, scores_path)
        print(f"dual scores (lambda={config.lam}, alpha={config.alpha}) -> {scores_path}")
        if prune_cfg.mode == pruning.MODE_BLOCKED:
            sizes = pruning.scaled_block_sizes(
                {k: v.shape for k, v in scores.scores.items()}, prune_cfg.block_size,
            )
            mask = pruning.select_mask_blocked(scores, prune_cfg.sparsity, sizes)
            mask.block_size = prune_cfg.block_size
        else:
            mask = pruning.select_mask_per_matrix(scores, prune_cfg.sparsity)
    else:
        mask = pruning.magnitude_mask(model, prune_cfg.sparsity)
    mask.model_fingerprint = model_fp

    mask_path = out / "mask.bin"
    pruning.save_mask(mask, mask_path)
    pruned = pruning.apply_mask(model, mask)
    pruned_path = out / "pruned.ckpt"
    save_checkpoint(pruned, pruned_path)

    for name, zeros in mask.zeros_per_matrix().items():
        size = mask.masks[name].size
        print(f"{name}: pruned {zeros}/{size}")
    prunable_frac, total_frac = evaluation.zero_fractions(pruned)
    print(f"mask ({mask.method}, {mask.mode}) -> {mask_path}")
    print(f"pruned checkpoint -> {pruned_path}")
    print(f"zero fraction: {prunable_frac:.4f} of prunable weights, {total_frac:.4f} of all parameters")
    return EXIT_OK


def _load_eval_corpus(config: RunConfig, args):
    if getattr(args, "corpus_cache", None):
        return load_corpus_cache(args.corpus_cache)
    return _build_corpus(config, args.corpus)


def cmd_eval(config: RunConfig, args) -> int:
    out = _out_dir(config)
    model = load_checkpoint(args.checkpoint)
    corpus = _load_eval_corpus(config, args)
    report = evaluation.perplexity(model, corpus)
    prunable_frac, total_frac = evaluation.zero_fractions(model)
    stem = args.tag or f"eval_{corpus.name}"
    extra = [
        f"zero fraction (prunable weights): {prunable_frac:.6f}",
        f"zero fraction (all parameters): {total_frac:.6f}",
    ]
    evaluation.write_eval_report(report, out / f"{stem}.csv", out / f"{stem}.txt", extra)
    print(f"perplexity on {corpus.name}: {report.perplexity:.4f} "
          f"(mean loss {report.mean_loss:.6f}, {report.token_count} tokens)")
    print(f"report -> {out / (stem + '.csv')}")
    return EXIT_OK


def cmd_masksim(config: RunConfig, args) -> int:
    out = _out_dir(config)
    mask_a = pruning.load_mask(args.mask_a)
    mask_b = pruning.load_mask(args.mask_b)
    report = evaluation.mask_similarity(mask_a, mask_b)
    evaluation.write_similarity_grid(report, out / "masksim.csv", out / "masksim.txt")
    for kind, value in report.by_kind.items():
        print(f"{kind}: {value:.4f}")
    print(f"grid -> {out / 'masksim.csv'}")
    return EXIT_OK


def cmd_sweep(config: RunConfig, args) -> int:
    out = _out_dir(config)
    model = load_checkpoint(args.checkpoint)
    scores = importance.load_dual_scores(args.scores)
    corpus = _load_eval_corpus(config, args)
    sparsities = [float(s) for s in args.sparsities.split(",") if s.strip()]
    block = None
    if config.mode == pruning.MODE_BLOCKED:
        block = pruning.scaled_block_sizes(
            {k: v.shape for k, v in scores.scores.items()}, config.block_size,
        )
    result = evaluation.sparsity_sweep(model, scores, corpus, sparsities,
                                       mode=config.mode, block_size=block)
    evaluation.write_sweep_csv(result, out / "sweep.csv")
    for sparsity, ppl in result.rows:
        print(f"sparsity {sparsity:.2f}: perplexity {ppl:.4f}")
    print(f"perplexity trend monotone non-decreasing: {'yes' if result.monotone else 'no'}")
    print(f"table -> {out / 'sweep.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    for f in fields(RunConfig):
        key = _FIELD_TO_KEY.get(f.name, f.name)
        type_map = {"int": int, "float": float, "str": str}
        ftype = type_map.get(f.type, f.type) if isinstance(f.type, str) else f.type
        parser.add_argument(f"--{key.replace('_', '-')}", dest=f.name, type=ftype, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualprune",
        description="dual-importance unstructured pruning for a toy decoder-only transformer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        return p

    command("calibrate", "build calibration/test corpora and write replayable caches")
    command("pretrain", "train the toy model and write a checkpoint plus loss log")

    p = command("general-importance", "score general weight importance on open-domain data")
    p.add_argument("--checkpoint", required=True)

    p = command("prune", "compute dual scores, select a mask, write the pruned checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--general-scores", default=None)

    p = command("eval", "perplexity of a checkpoint on a configured corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", default="test", choices=["train", "open", "domain", "test"])
    p.add_argument("--corpus-cache", default=None, help="corpus cache JSON (overrides --corpus)")
    p.add_argument("--tag", default=None, help="basename for the report files")

    p = command("masksim", "similarity analysis of two mask files")
    p.add_argument("mask_a")
    p.add_argument("mask_b")

    p = command("sweep", "mask + evaluate across a list of sparsities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scores", required=True, help="dual score file")
    p.add_argument("--corpus", default="test", choices=["train", "open", "domain", "test"])
    p.add_argument("--corpus-cache", default=None)
    p.add_argument("--sparsities", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7")
    return parser


_COMMANDS = {
    "calibrate": cmd_calibrate,
    "pretrain": cmd_pretrain,
    "general-importance": cmd_general_importance,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "masksim": cmd_masksim,
    "sweep": cmd_sweep,
}


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    config = make_run_config(file_values, overrides)
    config.validate()
    return _COMMANDS[args.command](config, args)


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ArtifactError as e:
        print(f"artifact error: {e}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DualPruneError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
