"""Training loop, evaluation, ablations, generation and LR finding."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TOGGLES, RunConfig
from .data import (
    Batch, Session, apply_mlm_corruption, build_vocabs, collate_batch, iterate_batches,
    steps_per_epoch, truncate_session,
)
from .decoding import SamplerConfig, generate_ids
from .metrics import (
    MetricsReport, bleu_corpus, corpus_f1, distinct_n, perplexity, resource_report,
)
from .model import PersonaDialogueModel, count_parameters, parameter_total
from .objectives import compute_loss
from .optim import AdamW, LRCurve, ReduceLROnPlateau, clip_global_norm, lr_range_test
from .tensor import RNGStreams
from .vocab import CHAR_SPECIALS, WORD_SPECIALS, Vocab, decode_ids

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "L_D", "L_LM", "total", "lr")


class NumericFailure(FloatingPointError):
    pass


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Data order for one epoch; a pure function of (seed, epoch) so resumes line up."""
    ss = np.random.SeedSequence(seed, spawn_key=(3, epoch))
    return np.random.Generator(np.random.PCG64(ss)).permutation(n)


class Trainer:
    def __init__(self, cfg: RunConfig, char_vocab: Vocab, word_vocab: Vocab):
        model_cfg = cfg.model.replace(vocab_size=len(char_vocab), persona_vocab_size=len(word_vocab))
        self.cfg = dataclasses.replace(cfg, model=model_cfg)
        self.char_vocab = char_vocab
        self.word_vocab = word_vocab
        self.streams = RNGStreams(cfg.seed)
        self.model = PersonaDialogueModel(model_cfg, self.streams["init"])
        self.names = [n for n, _ in self.model.named_parameters()]
        self.optimizer = AdamW(self.model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                               eps=cfg.eps, weight_decay=cfg.weight_decay)
        self.scheduler = ReduceLROnPlateau(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr)
        self.step = 0
        self.train_time = 0.0
        self.history: list[dict] = []

    # -- batches ------------------------------------------------------------

    def make_batch(self, sessions: Sequence[Session], corrupt: bool = True) -> Batch:
        m = self.cfg.model
        batch = collate_batch([truncate_session(s) for s in sessions], self.char_vocab, self.word_vocab,
                              m.max_context_len, m.max_target_len)
        if corrupt and m.use_bart_mlm and self.cfg.lm_weight:
            batch = apply_mlm_corruption(batch, self.cfg.mlm_rate, self.streams["mlm"], m.vocab_size)
        return batch

    def total_steps(self, n_sessions: int) -> int:
        if self.cfg.max_steps > 0:
            return self.cfg.max_steps
        return self.cfg.epochs * steps_per_epoch(n_sessions, self.cfg.batch_size)

    def batch_for_step(self, sessions: Sequence[Session], step: int) -> list[Session]:
        spe = steps_per_epoch(len(sessions), self.cfg.batch_size)
        epoch, pos = divmod(step, spe)
        order = epoch_permutation(self.cfg.seed, epoch, len(sessions))
        bs = self.cfg.batch_size
        return [sessions[i] for i in order[pos * bs:(pos + 1) * bs]]

    # -- steps --------------------------------------------------------------

    def train_step(self, sessions: Sequence[Session]) -> dict:
        batch = self.make_batch(sessions)
        self.optimizer.zero_grad()
        losses = compute_loss(self.model, batch, self.cfg.lm_weight, train=True, rng=self.streams["dropout"])
        values = losses.as_floats()
        if not all(math.isfinite(v) for v in values.values()):
            raise NumericFailure(f"non-finite loss at step {self.step + 1}: {values}")
        T.backward(losses.total)
        clip_global_norm(self.optimizer.params, self.cfg.clip_norm)
        self.optimizer.step()
        self.step += 1
        record = {"step": self.step, **values, "lr": self.optimizer.lr}
        self.history.append(record)
        return record

    def validation_loss(self, sessions: Sequence[Session]) -> float:
        return math.log(self.perplexity(sessions))

    def perplexity(self, sessions: Sequence[Session]) -> float:
        batches = (self.make_batch(chunk, corrupt=False)
                   for chunk in iterate_batches(sessions, self.cfg.batch_size))
        return perplexity(self.model, batches)

    def fit(self, train: Sequence[Session], valid: Sequence[Session] | None = None,
            until: int | None = None) -> list[dict]:
        if not train:
            raise ValueError("no training sessions")
        until = self.total_steps(len(train)) if until is None else until
        start = time.perf_counter()
        while self.step < until:
            record = self.train_step(self.batch_for_step(train, self.step))
            log.info("step %d  L_D %.4f  L_LM %.4f  total %.4f  lr %.3g",
                     record["step"], record["L_D"], record["L_LM"], record["total"], record["lr"])
            if self.cfg.valid_every and self.step % self.cfg.valid_every == 0:
                metric = self.validation_loss(valid) if valid else record["L_D"]
                self.optimizer.lr = self.scheduler.step(metric)
        self.train_time += time.perf_counter() - start
        return self.history

    # -- persistence --------------------------------------------------------

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        header = {
            "config": self.cfg.to_flat(),
            "char_vocab": self.char_vocab.tokens,
            "word_vocab": self.word_vocab.tokens,
            "step": self.step,
            "optimizer": {"lr": self.optimizer.lr, "step": self.optimizer.step_count},
            "scheduler": self.scheduler.state_dict(),
            "rng": self.streams.get_state(),
            "train_time": self.train_time,
            "param_count": parameter_total(self.model),
        }
        tensors = {f"param/{n}": p.data for n, p in self.model.named_parameters()}
        for n, m, v in zip(self.names, self.optimizer.m, self.optimizer.v):
            tensors[f"adam_m/{n}"] = m
            tensors[f"adam_v/{n}"] = v
        return header, tensors

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, *self.state())

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str | Path) -> "Trainer":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        h = ckpt.header
        cfg = RunConfig.from_flat(h["config"])
        trainer = cls(cfg, Vocab(h["char_vocab"], CHAR_SPECIALS), Vocab(h["word_vocab"], WORD_SPECIALS))
        trainer.model.load_state_dict({n[len("param/"):]: a for n, a in ckpt.tensors.items()
                                       if n.startswith("param/")})
        trainer.optimizer.load_state_dict({
            "lr": h["optimizer"]["lr"], "step": h["optimizer"]["step"],
            "m": [ckpt.tensors[f"adam_m/{n}"] for n in trainer.names],
            "v": [ckpt.tensors[f"adam_v/{n}"] for n in trainer.names],
        })
        trainer.scheduler.load_state_dict(h["scheduler"])
        trainer.streams.set_state(h["rng"])
        trainer.step = h["step"]
        trainer.train_time = h["train_time"]
        return trainer


def format_log(history: Sequence[dict]) -> str:
    lines = ["\t".join(LOG_FIELDS)]
    lines += ["\t".join(repr(r[k]) for k in LOG_FIELDS) for r in history]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def prepare_trainer(cfg: RunConfig, train: Sequence[Session]) -> Trainer:
    char_vocab, word_vocab = build_vocabs([truncate_session(s) for s in train],
                                          cfg.model.vocab_size, cfg.model.persona_vocab_size)
    return Trainer(cfg, char_vocab, word_vocab)


def run_train(cfg: RunConfig, train: Sequence[Session], valid: Sequence[Session] | None = None,
              output_dir: str | Path | None = None, trainer: Trainer | None = None) -> Trainer:
    trainer = trainer or prepare_trainer(cfg, train)
    log.info("parameters: %s", count_parameters(trainer.cfg.model))
    trainer.fit(train, valid)
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer.save(out / "checkpoint.bin")
    (out / "train_log.tsv").write_text(format_log(trainer.history), encoding="utf-8")
    trainer.char_vocab.save(out / "char_vocab.txt")
    trainer.word_vocab.save(out / "word_vocab.txt")
    return trainer


def sampler_from(cfg: RunConfig) -> SamplerConfig:
    return SamplerConfig(cfg.temperature, cfg.top_k, cfg.top_p, cfg.max_generate)


def generate(trainer: Trainer, sessions: Sequence[Session], rng: np.random.Generator | None = None) -> list[str]:
    rng = rng if rng is not None else trainer.streams["sampling"]
    sampler = sampler_from(trainer.cfg)
    out = []
    for chunk in iterate_batches(sessions, trainer.cfg.batch_size):
        batch = trainer.make_batch(chunk, corrupt=False)
        out += [decode_ids(ids, trainer.char_vocab) for ids in generate_ids(trainer.model, batch, sampler, rng)]
    return out


def evaluate(trainer: Trainer, sessions: Sequence[Session], generations: Sequence[str] | None = None) -> MetricsReport:
    if not sessions:
        raise ValueError("no evaluation sessions")
    refs = [truncate_session(s).response for s in sessions]
    if generations is None:
        generations = generate(trainer, sessions, np.random.default_rng(
            np.random.SeedSequence(trainer.cfg.seed, spawn_key=(2,))))
    m = trainer.cfg.model
    resources = resource_report(m, trainer.cfg.batch_size, m.max_context_len, m.max_target_len)
    return MetricsReport(
        bleu=bleu_corpus(generations, refs),
        f1=corpus_f1(generations, refs),
        ppl=trainer.perplexity(sessions),
        dist1=distinct_n(generations, 1),
        dist2=distinct_n(generations, 2),
        params=count_parameters(m)["total"],
        peak_memory_estimate=resources["peak_memory_estimate"],
        train_time=trainer.train_time,
    )


def config_mismatch(cfg: RunConfig, ckpt: Checkpoint) -> list[str]:
    stored = ckpt.header["config"]
    ignore = {"vocab_size", "persona_vocab_size"}
    model_keys = set(dataclasses.asdict(cfg.model)) - ignore
    flat = cfg.to_flat()
    return sorted(k for k in model_keys if flat[k] != stored.get(k))


def run_eval(checkpoint: str | Path | Checkpoint, test: Sequence[Session], cfg: RunConfig | None = None,
             generations: Sequence[str] | None = None) -> MetricsReport:
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if cfg is not None:
        diff = config_mismatch(cfg, ckpt)
        if diff:
            raise ValueError(f"config does not match checkpoint: {diff}")
    return evaluate(Trainer.from_checkpoint(ckpt), test, generations)


def run_ablation(cfg: RunConfig, toggles: Sequence[str], train: Sequence[Session],
                 test: Sequence[Session], valid: Sequence[Session] | None = None) -> dict[str, MetricsReport]:
    """Train and evaluate AR+ and each variant with exactly one toggle off."""
    for t in toggles:
        if t not in TOGGLES:
            raise ValueError(f"unknown toggle {t!r}; expected one of {TOGGLES}")
    variants = {"AR+": cfg}
    variants.update({f"-{t}": dataclasses.replace(cfg, model=cfg.model.without(t)) for t in toggles})
    reports = {}
    for name, vcfg in variants.items():
        trainer = prepare_trainer(vcfg, train)
        trainer.fit(train, valid)
        reports[name] = evaluate(trainer, test)
    return reports


def format_ablation_table(reports: dict[str, MetricsReport]) -> str:
    cols = ("bleu", "f1", "ppl", "dist1", "dist2", "params", "peak_memory_estimate", "train_time")
    lines = ["model\t" + "\t".join(cols)]
    for name, r in reports.items():
        lines.append(name + "\t" + "\t".join(f"{getattr(r, c):.6g}" for c in cols))
    return "\n".join(lines) + "\n"


def run_generate(checkpoint: str | Path, sessions: Sequence[Session], seed: int | None = None) -> list[str]:
    trainer = Trainer.from_checkpoint(checkpoint)
    seed = trainer.cfg.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    return generate(trainer, sessions, rng) if sessions else []


def run_lr_find(cfg: RunConfig, train: Sequence[Session], lr_min: float = 1e-7, lr_max: float = 1.0,
                steps: int = 100) -> LRCurve:
    base = prepare_trainer(cfg, train)

    def build():
        trainer = Trainer(cfg, base.char_vocab, base.word_vocab)
        params = trainer.model.parameters()

        def loss_fn(step):
            batch = trainer.make_batch(trainer.batch_for_step(train, step))
            return compute_loss(trainer.model, batch, cfg.lm_weight, True, trainer.streams["dropout"]).total

        return params, loss_fn

    return lr_range_test(build, iter(range(steps)), lr_min, lr_max, steps, clip=cfg.clip_norm,
                         weight_decay=cfg.weight_decay)
