"""CLI pipeline: stages, artifacts, exit codes, overrides."""

import csv
import os

import numpy as np
import pytest

from dualprune.cli import main
from dualprune.container import read_container
from dualprune.corpus import load_corpus_cache
from dualprune.importance import load_dual_scores, load_general_scores
from dualprune.model import load_checkpoint
from dualprune.pruning import load_mask


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny end-to-end run: corpora, config file, pretrained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    letters = "abcdefgh ijklmnop"
    mixed = "".join(rng.choice(list(letters), size=40_000))
    domain = "".join(rng.choice(list("0123456789=; "), size=20_000))
    (root / "mixed.txt").write_text(mixed)
    (root / "domain.txt").write_text(domain)
    out = root / "run"
    config = root / "run.cfg"
    config.write_text(
        "\n".join(
            [
                "# tiny pipeline config",
                "vocab_size=256",
                "context_length=32",
                "num_layers=1",
                "d_model=32",
                "num_heads=2",
                "d_ff=48",
                "seed=5",
                f"train_corpus={root / 'mixed.txt'}",
                f"open_corpus={root / 'mixed.txt'}",
                f"domain_corpus={root / 'domain.txt'}",
                f"test_corpus={root / 'domain.txt'}",
                "train_region=0:0.8",
                "open_region=0.8:1",
                "domain_region=0:0.7",
                "test_region=0.7:1",
                "train_samples=64",
                "open_samples=8",
                "domain_samples=8",
                "test_samples=8",
                "sequence_length=32",
                "steps=30",
                "learning_rate=0.2",
                "batch_size=4",
                "lambda=0.1",
                "alpha=0.03",
                "damping=1e-4",
                "sparsity=0.5",
                f"output_dir={out}",
            ]
        )
        + "\n"
    )
    assert main(["pretrain", "--config", str(config)]) == 0
    assert main(["general-importance", "--config", str(config),
                 "--checkpoint", str(out / "model.ckpt")]) == 0
    assert main(["prune", "--config", str(config),
                 "--checkpoint", str(out / "model.ckpt"),
                 "--general-scores", str(out / "general_scores.bin")]) == 0
    return {"root": root, "config": config, "out": out}


class TestPretrain:
    def test_artifacts_exist(self, workspace):
        assert (workspace["out"] / "model.ckpt").is_file()
        assert (workspace["out"] / "pretrain_log.csv").is_file()

    def test_loss_log_has_steps_rows(self, workspace):
        rows = list(csv.reader((workspace["out"] / "pretrain_log.csv").open()))
        assert rows[0] == ["step", "loss"]
        assert len(rows) == 1 + 30

    def test_rerun_byte_identical(self, workspace, tmp_path):
        first = (workspace["out"] / "model.ckpt").read_bytes()
        assert main(["pretrain", "--config", str(workspace["config"]),
                     "--output-dir", str(tmp_path)]) == 0
        assert (tmp_path / "model.ckpt").read_bytes() == first

    def test_missing_corpus_exit_2(self, workspace, tmp_path, capsys):
        assert main(["pretrain", "--config", str(workspace["config"]),
                     "--train-corpus", "/nope/missing.txt",
                     "--output-dir", str(tmp_path)]) == 2
        assert "/nope/missing.txt" in capsys.readouterr().err

    def test_invalid_config_exit_2(self, workspace, tmp_path):
        assert main(["pretrain", "--config", str(workspace["config"]),
                     "--num-heads", "3", "--output-dir", str(tmp_path)]) == 2


class TestCalibrate:
    def test_writes_caches(self, workspace):
        assert main(["calibrate", "--config", str(workspace["config"])]) == 0
        for role in ("train", "open", "domain", "test"):
            cache = workspace["out"] / f"{role}.corpus.json"
            assert cache.is_file()
            corpus = load_corpus_cache(cache)
            assert len(corpus) > 0

    def test_cache_is_replayable_deterministically(self, workspace):
        cache = workspace["out"] / "domain.corpus.json"
        a = load_corpus_cache(cache)
        b = load_corpus_cache(cache)
        assert a.fingerprint() == b.fingerprint()


class TestGeneralImportance:
    def test_writes_scores_with_manifest(self, workspace):
        ckpt = workspace["out"] / "model.ckpt"
        path = workspace["out"] / "general_scores.bin"
        c = read_container(path, expect_kind="scores.general")
        assert len(c.blocks) == 1 * 7  # num_layers x 7
        G = load_general_scores(path)
        assert G.model_fingerprint == load_checkpoint(ckpt).fingerprint()

    def test_rerun_byte_identical(self, workspace):
        path = workspace["out"] / "general_scores.bin"
        first = path.read_bytes()
        assert main(["general-importance", "--config", str(workspace["config"]),
                     "--checkpoint", str(workspace["out"] / "model.ckpt")]) == 0
        assert path.read_bytes() == first

    def test_corrupted_checkpoint_exit_3(self, workspace, tmp_path):
        bad = tmp_path / "bad.ckpt"
        raw = bytearray((workspace["out"] / "model.ckpt").read_bytes())
        raw[0] ^= 0xFF
        bad.write_bytes(bytes(raw))
        assert main(["general-importance", "--config", str(workspace["config"]),
                     "--checkpoint", str(bad)]) == 3


class TestPrune:
    def test_dual_pipeline_artifacts(self, workspace):
        mask = load_mask(workspace["out"] / "mask.bin")
        assert mask.method == "dual"
        for name, m in mask.masks.items():
            assert m.size - m.sum() == int(0.5 * m.size), name
        pruned = load_checkpoint(workspace["out"] / "pruned.ckpt")
        assert pruned.meta["mask_fingerprint"] == mask.fingerprint()
        dual = load_dual_scores(workspace["out"] / "dual_scores.bin")
        assert dual.lam == 0.1

    def test_magnitude_skips_scores(self, workspace, tmp_path):
        ckpt = workspace["out"] / "model.ckpt"
        assert main(["prune", "--config", str(workspace["config"]),
                     "--checkpoint", str(ckpt), "--method", "magnitude",
                     "--output-dir", str(tmp_path)]) == 0
        assert not (tmp_path / "dual_scores.bin").exists()
        mask = load_mask(tmp_path / "mask.bin")
        assert mask.method == "magnitude"

    def test_fingerprint_mismatch_refused(self, workspace, tmp_path):
        other = tmp_path / "other"
        assert main(["pretrain", "--config", str(workspace["config"]),
                     "--seed", "99", "--output-dir", str(other)]) == 0
        assert main(["prune", "--config", str(workspace["config"]),
                     "--checkpoint", str(other / "model.ckpt"),
                     "--general-scores", str(workspace["out"] / "general_scores.bin"),
                     "--output-dir", str(tmp_path)]) == 2

    def test_lambda_zero_matches_manual_no_reg_mask(self, workspace, tmp_path):
        ckpt = workspace["out"] / "model.ckpt"
        scores = workspace["out"] / "general_scores.bin"
        assert main(["prune", "--config", str(workspace["config"]),
                     "--checkpoint", str(ckpt), "--general-scores", str(scores),
                     "--lambda", "0", "--output-dir", str(tmp_path)]) == 0
        mask_a = load_mask(tmp_path / "mask.bin")

        # no-regularization oracle: plain next-token gradients -> |u + u^2/2|
        import dualprune.importance as imp
        from dualprune.cli import RunConfig, _build_corpus, make_run_config, parse_config_file
        from dualprune.pruning import select_mask_per_matrix

        config = make_run_config(parse_config_file(workspace["config"]), {})
        model = load_checkpoint(ckpt)
        domain = _build_corpus(config, "domain")
        stats = imp.next_token_gradients(model, domain)
        u = {k: stats.mean[k] * model.params[k].data for k in stats.mean}
        s_noreg = {k: imp.score_from_first_order(v) for k, v in u.items()}
        mask_b = select_mask_per_matrix(s_noreg, 0.5)
        for name in mask_a.masks:
            assert np.array_equal(mask_a.masks[name], mask_b.masks[name]), name


class TestEvalMasksimSweep:
    def test_eval_reports(self, workspace):
        ckpt = workspace["out"] / "model.ckpt"
        assert main(["eval", "--config", str(workspace["config"]),
                     "--checkpoint", str(ckpt), "--corpus", "test", "--tag", "dense"]) == 0
        rows = list(csv.reader((workspace["out"] / "dense.csv").open()))
        assert rows[0][0] == "model_fingerprint"
        assert float(rows[1][3]) >= 1.0

    def test_eval_dense_vs_pruned(self, workspace):
        # compare on the training distribution, where the dense model is near-optimal
        dense_ckpt = workspace["out"] / "model.ckpt"
        pruned_ckpt = workspace["out"] / "pruned.ckpt"
        assert main(["eval", "--config", str(workspace["config"]),
                     "--checkpoint", str(dense_ckpt), "--corpus", "open",
                     "--tag", "e_dense"]) == 0
        assert main(["eval", "--config", str(workspace["config"]),
                     "--checkpoint", str(pruned_ckpt), "--corpus", "open",
                     "--tag", "e_pruned"]) == 0
        dense_ppl = float(list(csv.reader((workspace["out"] / "e_dense.csv").open()))[1][3])
        pruned_ppl = float(list(csv.reader((workspace["out"] / "e_pruned.csv").open()))[1][3])
        assert pruned_ppl >= dense_ppl * 0.9

    def test_masksim_self_is_half(self, workspace):
        mask = workspace["out"] / "mask.bin"
        assert main(["masksim", "--config", str(workspace["config"]),
                     str(mask), str(mask)]) == 0
        rows = list(csv.reader((workspace["out"] / "masksim.csv").open()))
        assert rows[0][0] == "layer"
        assert all(float(x) == 0.5 for x in rows[1][1:])

    def test_sweep_csv_rows(self, workspace):
        assert main(["sweep", "--config", str(workspace["config"]),
                     "--checkpoint", str(workspace["out"] / "model.ckpt"),
                     "--scores", str(workspace["out"] / "dual_scores.bin"),
                     "--corpus", "test",
                     "--sparsities", "0.1,0.2,0.3,0.4,0.5,0.6,0.7"]) == 0
        rows = list(csv.reader((workspace["out"] / "sweep.csv").open()))
        assert rows[0] == ["sparsity", "perplexity"]
        assert len(rows) == 8

    def test_sweep_identical_reruns(self, workspace):
        path = workspace["out"] / "sweep.csv"
        first = path.read_bytes()
        assert main(["sweep", "--config", str(workspace["config"]),
                     "--checkpoint", str(workspace["out"] / "model.ckpt"),
                     "--scores", str(workspace["out"] / "dual_scores.bin"),
                     "--corpus", "test",
                     "--sparsities", "0.1,0.2,0.3,0.4,0.5,0.6,0.7"]) == 0
        assert path.read_bytes() == first


class TestConfigHandling:
    def test_env_var_overrides_file(self, workspace, tmp_path, monkeypatch):
        env_dir = tmp_path / "env_out"
        monkeypatch.setenv("DUALPRUNE_OUTPUT_DIR", str(env_dir))
        assert main(["calibrate", "--config", str(workspace["config"])]) == 0
        assert (env_dir / "train.corpus.json").is_file()

    def test_flag_overrides_env(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("DUALPRUNE_OUTPUT_DIR", str(tmp_path / "env_out"))
        flag_dir = tmp_path / "flag_out"
        assert main(["calibrate", "--config", str(workspace["config"]),
                     "--output-dir", str(flag_dir)]) == 0
        assert (flag_dir / "train.corpus.json").is_file()

    def test_unknown_config_key_exit_2(self, tmp_path):
        config = tmp_path / "bad.cfg"
        config.write_text("not_a_key=1\n")
        assert main(["calibrate", "--config", str(config)]) == 2

    def test_malformed_line_exit_2(self, tmp_path):
        config = tmp_path / "bad.cfg"
        config.write_text("jibberish\n")
        assert main(["calibrate", "--config", str(config)]) == 2

    def test_missing_config_file_exit_2(self):
        assert main(["calibrate", "--config", "/does/not/exist.cfg"]) == 2

    def test_lambda_validation_exit_2(self, workspace, tmp_path):
        assert main(["pretrain", "--config", str(workspace["config"]),
                     "--lambda", "-1", "--output-dir", str(tmp_path)]) == 2
