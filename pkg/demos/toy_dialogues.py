"""
Training on the bundled toy dialogues
=====================================

The sample file holds 200 synthetic sessions whose answers depend on the
responder's persona.  A small model memorizes 32 of them in a few hundred
steps; we then sample replies with nucleus sampling.
"""

import dataclasses
import time
from importlib import resources

from persona_ar.config import RunConfig, tiny_config
from persona_ar.data import load_sessions
from persona_ar.train import evaluate, generate, prepare_trainer

sessions = load_sessions(resources.files("persona_ar") / "data" / "sample_sessions.jsonl")[:32]
print(len(sessions), "sessions; first one:")
print(" ", [t.text for t in sessions[0].turns], "->", sessions[0].response)

model = tiny_config(vocab_size=9489, persona_vocab_size=10004, embed_size=32, hidden_size=64,
                    num_heads=4, ff_size=128, ff_rank=16, dropout=0.1)
cfg = RunConfig(model=model, batch_size=32, max_steps=300, seed=0)
trainer = prepare_trainer(cfg, sessions)
print("vocab sizes", trainer.cfg.model.vocab_size, trainer.cfg.model.persona_vocab_size)

start = time.perf_counter()
for stop in (50, 150, 300):
    trainer.fit(sessions, until=stop)
    print(f"step {trainer.step:3d}  train PPL {trainer.perplexity(sessions):7.3f}"
          f"  ({time.perf_counter() - start:.0f}s)")

cold = dataclasses.replace(trainer.cfg, temperature=0.3)
trainer.cfg = cold
for s, reply in list(zip(sessions, generate(trainer, sessions)))[:5]:
    print(f"  {s.turns[-1].text:12s} gold {s.response:8s} sampled {reply}")

print(evaluate(trainer, sessions).to_text())
