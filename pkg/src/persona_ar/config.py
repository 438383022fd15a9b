"""Model and run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

TOGGLES = ("rezero", "albert", "factor_ff", "memn2n", "bart_mlm")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 9489
    embed_size: int = 200
    hidden_size: int = 512
    num_layers: int = 6
    num_heads: int = 8
    ff_size: int = 2048
    dropout: float = 0.1
    use_rezero: bool = True
    use_albert: bool = True
    use_factor_ff: bool = True
    use_memn2n: bool = True
    use_bart_mlm: bool = True
    routing_weight: float = 1.0
    fix_attention: float = 0.1
    ff_rank: int = 128
    persona_vocab_size: int = 10004
    hops: int = 3
    max_context_len: int = 111
    max_target_len: int = 16
    tie_head: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "embed_size", "hidden_size", "num_layers", "num_heads",
                     "ff_size", "ff_rank", "persona_vocab_size", "hops",
                     "max_context_len", "max_target_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.embed_size > self.hidden_size:
            raise ValueError("embed_size must not exceed hidden_size")
        if self.ff_rank > min(self.hidden_size, self.ff_size):
            raise ValueError("ff_rank must not exceed min(hidden_size, ff_size)")
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def without(self, toggle: str) -> "ModelConfig":
        """Copy with one improvement switched off."""
        if toggle not in TOGGLES:
            raise ValueError(f"unknown toggle {toggle!r}; expected one of {TOGGLES}")
        return dataclasses.replace(self, **{f"use_{toggle}": False})

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def tiny_config(**overrides) -> ModelConfig:
    """Small configuration used by gradient checks and quick experiments."""
    base = dict(vocab_size=50, embed_size=8, hidden_size=16, num_layers=2, num_heads=2,
                ff_size=32, ff_rank=4, persona_vocab_size=30, hops=3, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


AR_BASELINE = ModelConfig(use_rezero=False, use_albert=False, use_factor_ff=False,
                          use_memn2n=False, use_bart_mlm=False)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 0.2e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    lm_weight: float = 0.5
    mlm_rate: float = 0.15
    plateau_factor: float = 0.5
    plateau_patience: int = 60
    min_lr: float = 1.5e-4
    batch_size: int = 64
    epochs: int = 3
    max_steps: int = 0
    valid_every: int = 50
    seed: int = 0
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    output_dir: str = "runs/default"
    temperature: float = 0.7
    top_k: int = 0
    top_p: float = 0.9
    max_generate: int = 15

    # flat key <-> value mapping; model fields live at top level

    def to_flat(self) -> dict:
        flat = dataclasses.asdict(self.model)
        for f in fields(self):
            if f.name != "model":
                flat[f.name] = getattr(self, f.name)
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        model_keys = {f.name: f for f in fields(ModelConfig)}
        run_keys = {f.name: f for f in fields(cls) if f.name != "model"}
        unknown = set(flat) - set(model_keys) - set(run_keys)
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        model = {k: _coerce(model_keys[k], v) for k, v in flat.items() if k in model_keys}
        run = {k: _coerce(run_keys[k], v) for k, v in flat.items() if k in run_keys}
        return cls(model=ModelConfig(**model), **run)

    def updated(self, **changes) -> "RunConfig":
        flat = self.to_flat()
        flat.update(changes)
        return RunConfig.from_flat(flat)


_DEFAULTS = {f.name: f.default for f in fields(ModelConfig)}
_DEFAULTS.update({f.name: f.default for f in fields(RunConfig) if f.name != "model"})


def _coerce(f, value):
    if not isinstance(value, str):
        return value
    kind = type(_DEFAULTS[f.name])
    if kind is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{f.name}: not a boolean: {value!r}")
    return kind(value.strip())


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_run_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    flat = {}
    if path is not None:
        flat.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    flat.update(overrides or {})
    return RunConfig.from_flat(flat)


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_flat().items())
