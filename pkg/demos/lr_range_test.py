"""
Choosing a learning rate with a range test
==========================================

The learning rate grows exponentially while the model trains; the smoothed
loss falls, flattens, then blows up.  The suggestion is the lr at the lowest
point divided by ten.
"""

from importlib import resources

from persona_ar.config import RunConfig, tiny_config
from persona_ar.data import load_sessions
from persona_ar.train import run_lr_find

sessions = load_sessions(resources.files("persona_ar") / "data" / "sample_sessions.jsonl")
cfg = RunConfig(model=tiny_config(vocab_size=9489, persona_vocab_size=10004), batch_size=16)
curve = run_lr_find(cfg, sessions, lr_min=1e-5, lr_max=10.0, steps=60)

for lr, loss in list(zip(curve.lrs, curve.losses))[::5]:
    bar = "#" * int(max(0.0, 40 - 8 * loss))
    print(f"{lr:10.2e}  {loss:7.3f}  {bar}")
print("stopped at", curve.diverged_at)
print(f"suggested lr {curve.suggestion:.2e}, steepest descent at {curve.steepest:.2e}")
