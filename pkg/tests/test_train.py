import math

import numpy as np
import pytest

from persona_ar.checkpoint import load_checkpoint
from persona_ar.config import TOGGLES, RunConfig, format_config, load_run_config, parse_config_text
from persona_ar.data import dedup_sessions
from persona_ar.metrics import MetricsReport
from persona_ar.model import count_parameters
from persona_ar.synthetic import make_sessions
from persona_ar.train import (
    NumericFailure, Trainer, epoch_permutation, evaluate, format_ablation_table, prepare_trainer, run_ablation,
    run_eval, run_generate, run_lr_find, run_train,
)

from _helpers import tiny_run


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.batch_size, cfg.epochs, cfg.lr, cfg.weight_decay, cfg.lm_weight) == (64, 3, 2e-3, 0.05, 0.5)

    def test_flat_round_trip(self, tmp_path):
        cfg = tiny_run(lr=0.01, use_rezero=False)
        path = tmp_path / "c.txt"
        path.write_text(format_config(cfg), encoding="utf-8")
        assert load_run_config(path) == cfg

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            RunConfig.from_flat({"learning_rate": 1})

    def test_flags_win(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("# comment\nlr = 0.5\nseed = 3\n", encoding="utf-8")
        cfg = load_run_config(path, {"lr": "0.25"})
        assert (cfg.lr, cfg.seed) == (0.25, 3)
        assert parse_config_text("a = b = c\n") == {"a": "b = c"}

    def test_bad_boolean(self):
        with pytest.raises(ValueError):
            RunConfig.from_flat({"use_albert": "maybe"})


class TestTraining:
    def test_step_count_is_epochs_times_batches(self, sample_sessions):
        trainer = prepare_trainer(tiny_run(epochs=3, batch_size=64, valid_every=0), sample_sessions[:130])
        trainer.fit(sample_sessions[:130])
        assert len(trainer.history) == 3 * math.ceil(130 / 64) == 9

    def test_epoch_order(self):
        a = epoch_permutation(0, 0, 10)
        assert sorted(a) == list(range(10))
        assert a.tolist() == epoch_permutation(0, 0, 10).tolist()
        assert a.tolist() != epoch_permutation(0, 1, 10).tolist()

    def test_seeded_runs_are_bitwise_equal(self, sample_sessions):
        logs = []
        for _ in range(2):
            trainer = prepare_trainer(tiny_run(max_steps=6), sample_sessions)
            logs.append([tuple(r.values()) for r in trainer.fit(sample_sessions)])
        assert logs[0] == logs[1]

    def test_resume_continues_trajectory(self, tmp_path, sample_sessions):
        cfg = tiny_run(max_steps=8)
        full = prepare_trainer(cfg, sample_sessions)
        full.fit(sample_sessions)
        part = prepare_trainer(cfg, sample_sessions)
        part.fit(sample_sessions, until=3)
        part.save(tmp_path / "ck.bin")
        resumed = Trainer.from_checkpoint(tmp_path / "ck.bin")
        resumed.fit(sample_sessions)
        assert resumed.history == full.history[3:]

    def test_plateau_uses_validation_cadence(self, sample_sessions):
        cfg = tiny_run(max_steps=4, valid_every=1, plateau_patience=1, lr=0.01, min_lr=1e-3)
        trainer = prepare_trainer(cfg, sample_sessions)
        trainer.fit(sample_sessions, valid=sample_sessions[:1])
        assert trainer.optimizer.lr >= 1e-3
        assert trainer.scheduler.lr == trainer.optimizer.lr

    def test_non_finite_loss_aborts(self, sample_sessions):
        trainer = prepare_trainer(tiny_run(max_steps=1), sample_sessions)
        trainer.model.head.bias.data[:] = np.nan
        with pytest.raises(NumericFailure, match="step 1"):
            trainer.fit(sample_sessions)

    def test_outputs_written(self, tmp_path, sample_sessions):
        trainer = run_train(tiny_run(max_steps=3), sample_sessions, output_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["char_vocab.txt", "checkpoint.bin", "train_log.tsv", "word_vocab.txt"]
        log = (tmp_path / "train_log.tsv").read_text().splitlines()
        assert log[0].split("\t") == ["step", "L_D", "L_LM", "total", "lr"] and len(log) == 4
        assert trainer.step == 3


class TestEvaluation:
    def test_untrained_ppl_near_vocab(self, sample_sessions):
        trainer = prepare_trainer(tiny_run(), sample_sessions)
        assert trainer.cfg.model.vocab_size == 50
        ppl = trainer.perplexity(sample_sessions[:64])
        assert 40 <= ppl <= 60

    def test_injected_generations(self, sample_sessions):
        trainer = prepare_trainer(tiny_run(), sample_sessions)
        test = sample_sessions[:10]
        report = evaluate(trainer, test, generations=[s.response for s in test])
        assert report.bleu == 1.0 and report.f1 == 1.0
        assert set(vars(report)) == {"bleu", "f1", "ppl", "dist1", "dist2", "params", "peak_memory_estimate",
                                     "train_time"}

    def test_mismatch_rejected(self, tmp_path, sample_sessions):
        run_train(tiny_run(max_steps=1), sample_sessions, output_dir=tmp_path)
        with pytest.raises(ValueError, match="use_rezero"):
            run_eval(tmp_path / "checkpoint.bin", sample_sessions[:4], tiny_run(use_rezero=False))
        report = run_eval(tmp_path / "checkpoint.bin", sample_sessions[:4], tiny_run())
        assert isinstance(report, MetricsReport)

    def test_generation_is_seeded_and_short(self, tmp_path, sample_sessions):
        run_train(tiny_run(max_steps=1), sample_sessions, output_dir=tmp_path)
        a = run_generate(tmp_path / "checkpoint.bin", sample_sessions[:20], seed=4)
        b = run_generate(tmp_path / "checkpoint.bin", sample_sessions[:20], seed=4)
        assert a == b and len(a) == 20 and all(len(r) <= 15 for r in a)
        assert run_generate(tmp_path / "checkpoint.bin", []) == []


class TestAblation:
    def test_directions_at_full_size(self):
        base = count_parameters(RunConfig().model)["total"]
        assert count_parameters(RunConfig().model.without("albert"))["total"] > base
        assert count_parameters(RunConfig().model.without("memn2n"))["total"] < base

    def test_table(self, sample_sessions):
        cfg = tiny_run(max_steps=2)
        reports = run_ablation(cfg, ["memn2n", "bart_mlm"], sample_sessions[:32], sample_sessions[32:40])
        assert list(reports) == ["AR+", "-memn2n", "-bart_mlm"]
        assert reports["-memn2n"].params < reports["AR+"].params
        table = format_ablation_table(reports).splitlines()
        assert len(table) == 4 and table[0].startswith("model\tbleu")

    def test_unknown_toggle(self, sample_sessions):
        with pytest.raises(ValueError, match="unknown toggle"):
            run_ablation(tiny_run(), ["dropout"], sample_sessions, sample_sessions)


class TestLRFind:
    def test_curve(self, sample_sessions):
        curve = run_lr_find(tiny_run(), sample_sessions, 1e-5, 10.0, 25)
        assert 1e-5 <= curve.suggestion <= 10.0
        assert len(curve.lrs) <= 25
        if curve.diverged_at is not None:
            assert curve.suggestion < curve.diverged_at


def test_synthetic_corpus_is_persona_dependent():
    sessions = dedup_sessions(make_sessions(60, seed=1))
    assert len(sessions) > 40
    assert all(len(s.response) <= 15 for s in sessions)
