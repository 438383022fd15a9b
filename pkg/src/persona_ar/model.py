"""AR / AR+ persona-aware encoder-decoder.

One stack of blocks serves as both encoder and decoder.  The decoder's
only attention sublayer is the routing sublayer: the target attends to
itself, to the context encoding and to the persona representation with a
shared query projection, and the three outputs are merged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import Batch
from .memory import PersonaMemory, memory_parameter_count
from .nn import LayerNorm, Linear, Module, normal, parameter
from .tensor import Tensor
from .vocab import PAD

NEG_INF = -np.inf


def sinusoidal_positions(length: int, size: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(size)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / size)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


def causal_mask(length: int) -> np.ndarray:
    """True where query t may NOT see key s (s > t)."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


@dataclass
class RoutingOutputs:
    o_prev: Tensor
    o_context: Tensor
    o_persona: Tensor
    o_merge: Tensor


def merge_routing(o_persona: Tensor, o_context: Tensor, o_prev: Tensor, weight: float) -> Tensor:
    """a*O_T + (1 - a)*O_C + O_C + O_prev."""
    return T.scale(o_persona, weight) + T.scale(o_context, 1.0 - weight) + o_context + o_prev


def rezero_residual(prev: Tensor, sublayer: Tensor, gate: Tensor, fix: float = 0.0,
                    o_persona: Tensor | None = None, o_context: Tensor | None = None,
                    dropout: float = 0.0, rng=None, train: bool = False) -> Tensor:
    """prev + b*O_T + b*O_C + dropout(sublayer) * r.

    Without routing terms this is prev + dropout(sublayer) * r.
    """
    out = prev
    if o_persona is not None:
        out = out + T.scale(o_persona, fix)
    if o_context is not None:
        out = out + T.scale(o_context, fix)
    return out + T.mul(T.dropout(sublayer, dropout, rng, train), gate)


class Attention(Module):
    """Multi-head attention with one query projection and per-source keys/values."""

    def __init__(self, rng, hidden: int, heads: int, sources=("self", "context", "persona")):
        self.heads = heads
        self.query = Linear(rng, hidden, hidden)
        self.keys = {s: Linear(rng, hidden, hidden) for s in sources}
        self.values = {s: Linear(rng, hidden, hidden) for s in sources}
        self.out = Linear(rng, hidden, hidden, bias=False)

    def _split(self, x: Tensor) -> Tensor:
        b, n, h = x.shape
        return x.reshape(b, n, self.heads, h // self.heads).transpose(0, 2, 1, 3)

    def project_query(self, x: Tensor) -> Tensor:
        return self._split(self.query(x))

    def attend(self, q: Tensor, source: str, memory: Tensor, blocked: np.ndarray | None) -> Tensor:
        """``blocked`` broadcasts to (B, heads, Lq, Lk); True entries get zero weight."""
        k = self._split(self.keys[source](memory))
        v = self._split(self.values[source](memory))
        d = q.shape[-1]
        scores = T.scale(T.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / np.sqrt(d))
        if blocked is not None:
            scores = T.masked_fill(scores, np.broadcast_to(blocked, scores.shape), NEG_INF)
        ctx = T.matmul(T.softmax(scores), v)
        b, _, n, _ = ctx.shape
        return self.out(ctx.transpose(0, 2, 1, 3).reshape(b, n, -1))


class FeedForward(Module):
    def __init__(self, rng, hidden: int, inner: int):
        self.inner = Linear(rng, hidden, inner)
        self.outer = Linear(rng, inner, hidden)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.gelu(self.inner(x)))


class FactoredFeedForward(Module):
    """H -> R -> F, GELU, F -> R -> H."""

    def __init__(self, rng, hidden: int, inner: int, rank: int):
        self.inner_a = Linear(rng, hidden, rank, bias=False)
        self.inner_b = Linear(rng, rank, inner)
        self.outer_a = Linear(rng, inner, rank, bias=False)
        self.outer_b = Linear(rng, rank, hidden)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer_b(self.outer_a(T.gelu(self.inner_b(self.inner_a(x)))))


def factored_ff(x: Tensor, ff: Module) -> Tensor:
    return ff(x)


class Block(Module):
    def __init__(self, rng, cfg: ModelConfig):
        h = cfg.hidden_size
        self.pre_attn = LayerNorm(h)
        self.attn = Attention(rng, h, cfg.num_heads)
        self.pre_ff = LayerNorm(h)
        if cfg.use_factor_ff:
            self.ff = FactoredFeedForward(rng, h, cfg.ff_size, cfg.ff_rank)
        else:
            self.ff = FeedForward(rng, h, cfg.ff_size)
        if cfg.use_rezero:
            self.gate_attn = parameter(np.zeros(()))
            self.gate_ff = parameter(np.zeros(()))
        else:
            self.post_attn = LayerNorm(h)
            self.post_ff = LayerNorm(h)
        self._cfg = cfg

    def _residual(self, which: str, prev: Tensor, out: Tensor, train, rng, **routing) -> Tensor:
        cfg = self._cfg
        if cfg.use_rezero:
            gate = self.gate_attn if which == "attn" else self.gate_ff
            return rezero_residual(prev, out, gate, cfg.fix_attention, dropout=cfg.dropout,
                                   rng=rng, train=train, **routing)
        post = self.post_attn if which == "attn" else self.post_ff
        return post(prev + T.dropout(out, cfg.dropout, rng, train))

    def _ff(self, x: Tensor, train, rng) -> Tensor:
        return self._residual("ff", x, factored_ff(self.pre_ff(x), self.ff), train, rng)

    def encode(self, x: Tensor, blocked: np.ndarray | None, train=False, rng=None) -> Tensor:
        h = self.pre_attn(x)
        a = self.attn.attend(self.attn.project_query(h), "self", h, blocked)
        x = self._residual("attn", x, a, train, rng)
        return self._ff(x, train, rng)

    def decode(self, y: Tensor, context: Tensor, context_blocked, persona: Tensor, persona_blocked,
               train=False, rng=None) -> tuple[Tensor, RoutingOutputs]:
        cfg = self._cfg
        h = self.pre_attn(y)
        q = self.attn.project_query(h)
        o_prev = self.attn.attend(q, "self", h, causal_mask(y.shape[1]))
        o_ctx = self.attn.attend(q, "context", context, context_blocked)
        o_per = self.attn.attend(q, "persona", persona, persona_blocked)
        merged = merge_routing(o_per, o_ctx, o_prev, cfg.routing_weight)
        y = self._residual("attn", y, merged, train, rng, o_persona=o_per, o_context=o_ctx)
        return self._ff(y, train, rng), RoutingOutputs(o_prev, o_ctx, o_per, merged)


def attention_routing(block: Block, target_hidden: Tensor, context: Tensor, persona: Tensor,
                      context_pad=None, persona_pad=None) -> RoutingOutputs:
    """The routing sublayer of ``block`` alone (no norm, no residual)."""
    q = block.attn.project_query(target_hidden)
    o_prev = block.attn.attend(q, "self", target_hidden, causal_mask(target_hidden.shape[1]))
    o_ctx = block.attn.attend(q, "context", context, _key_block(context_pad))
    o_per = block.attn.attend(q, "persona", persona, _key_block(persona_pad))
    return RoutingOutputs(o_prev, o_ctx, o_per, merge_routing(o_per, o_ctx, o_prev, block._cfg.routing_weight))


def _key_block(pad):
    return None if pad is None else np.asarray(pad, dtype=bool)[:, None, None, :]


@dataclass
class Encoded:
    context: Tensor
    context_pad: np.ndarray
    persona: Tensor
    persona_pad: np.ndarray | None
    speaker_embeddings: Tensor


class PersonaDialogueModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0, dtype=np.float32):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        h = cfg.hidden_size
        if cfg.use_albert:
            self.char_embedding = normal(rng, (cfg.vocab_size, cfg.embed_size))
            self.embed_projection = Linear(rng, cfg.embed_size, h, bias=False)
        else:
            self.char_embedding = normal(rng, (cfg.vocab_size, h))
        self.null_persona = normal(rng, (h,))
        if cfg.use_albert:
            block = Block(rng, cfg)
            self.blocks = [block] * cfg.num_layers
        else:
            self.blocks = [Block(rng, cfg) for _ in range(cfg.num_layers)]
        self.final_norm = LayerNorm(h)
        if cfg.tie_head:
            self.head_bias = parameter(np.zeros(cfg.vocab_size))
        else:
            self.head = Linear(rng, h, cfg.vocab_size)
            self.head.weight = normal(rng, (h, cfg.vocab_size))
        if cfg.use_memn2n:
            self.memory = PersonaMemory(rng, cfg.persona_vocab_size, h, cfg.hops)
        if dtype != np.float32:
            self.astype(dtype)

    @property
    def dtype(self):
        return self.char_embedding.dtype

    # -- embeddings ---------------------------------------------------------

    def embed_chars(self, ids: np.ndarray) -> Tensor:
        e = T.embedding(self.char_embedding, np.asarray(ids))
        if self.cfg.use_albert:
            e = self.embed_projection(e)
        return e

    def _positions(self, length: int) -> Tensor:
        return Tensor(sinusoidal_positions(length, self.cfg.hidden_size, self.dtype))

    def _masked_mean(self, vectors: Tensor, present: np.ndarray) -> Tensor:
        counts = present.sum(-1, keepdims=True)
        w = np.divide(present, counts, out=np.zeros(present.shape), where=counts > 0)
        return T.mul(vectors, w[..., None].astype(self.dtype)).sum(axis=-2)

    def speaker_embeddings(self, batch: Batch) -> Tensor:
        """(B, S, H) persona embedding per speaker slot; slots without persona get the null vector."""
        if self.cfg.use_memn2n:
            ids = batch.speaker_words
            vectors = T.embedding(self.memory.tables[0], ids)
        else:
            ids = batch.speaker_chars
            vectors = self.embed_chars(ids)
        present = ids != PAD
        empty = ~present.any(-1)
        mean = self._masked_mean(vectors, present)
        return mean + T.mul(self.null_persona, empty[..., None].astype(self.dtype))

    def embed_and_project(self, ids: np.ndarray, speakers: np.ndarray, speaker_emb: Tensor,
                          train=False, rng=None) -> Tensor:
        ids = np.asarray(ids)
        x = self.embed_chars(ids) + self._positions(ids.shape[1])
        n_slots = speaker_emb.shape[1]
        onehot = (np.asarray(speakers)[..., None] == np.arange(n_slots)).astype(self.dtype)
        x = x + T.matmul(Tensor(onehot), speaker_emb)
        return T.dropout(x, self.cfg.dropout, rng, train)

    def embed_target(self, ids: np.ndarray, train=False, rng=None) -> Tensor:
        ids = np.asarray(ids)
        x = self.embed_chars(ids) + self._positions(ids.shape[1])
        return T.dropout(x, self.cfg.dropout, rng, train)

    # -- stacks -------------------------------------------------------------

    def run_encoder(self, x: Tensor, pad: np.ndarray, causal: bool = False, train=False, rng=None,
                    trace: list | None = None) -> Tensor:
        blocked = _key_block(pad)
        if causal:
            blocked = blocked | causal_mask(x.shape[1])[None, None]
        for block in self.blocks:
            x = block.encode(x, blocked, train, rng)
            if trace is not None:
                trace.append(x)
        return x

    def encode(self, batch: Batch, train=False, rng=None, trace: list | None = None) -> Encoded:
        spk = self.speaker_embeddings(batch)
        x = self.embed_and_project(batch.context_ids, batch.context_speaker, spk, train, rng)
        ctx = self.run_encoder(x, batch.context_pad, train=train, rng=rng, trace=trace)
        if self.cfg.use_memn2n:
            present = ~batch.context_pad
            query = self._masked_mean(ctx, present)
            persona = self.memory.read(query, batch.persona_words, batch.persona_item_pad)
            persona_pad = None
        else:
            p = self.embed_target(batch.persona_chars, train, rng)
            persona = self.run_encoder(p, batch.persona_pad, train=train, rng=rng)
            persona_pad = batch.persona_pad
        return Encoded(ctx, batch.context_pad, persona, persona_pad, spk)

    def decode(self, enc: Encoded, decoder_input: np.ndarray, train=False, rng=None,
               trace: list | None = None) -> Tensor:
        y = self.embed_target(decoder_input, train, rng)
        if trace is not None:
            trace.append(y)
        ctx_blocked = _key_block(enc.context_pad)
        per_blocked = _key_block(enc.persona_pad)
        for block in self.blocks:
            y, routing = block.decode(y, enc.context, ctx_blocked, enc.persona, per_blocked, train, rng)
            if trace is not None:
                trace.append((y, routing))
        return self.logits(y)

    def logits(self, hidden: Tensor) -> Tensor:
        h = self.final_norm(hidden)
        if self.cfg.tie_head:
            table = self.char_embedding
            if self.cfg.use_albert:
                table = T.matmul(table, self.embed_projection.weight)
            return T.matmul(h, table.transpose(1, 0)) + self.head_bias
        return self.head(h)

    def forward(self, batch: Batch, train=False, rng=None) -> Tensor:
        return self.decode(self.encode(batch, train, rng), batch.decoder_input, train, rng)

    __call__ = forward

    def lm_logits(self, batch: Batch, enc: Encoded, train=False, rng=None) -> tuple[Tensor, np.ndarray]:
        """Encoder-side LM predictions and their target ids.

        Masked LM (AR+): logits at the corrupted positions of ``mlm_ids``.
        Left-to-right LM (ablation): causal encoder pass, position i predicts i+1.
        """
        if self.cfg.use_bart_mlm:
            if batch.mlm_ids is None or len(batch.mlm_labels) == 0:
                return None, np.zeros(0, dtype=np.int64)
            x = self.embed_and_project(batch.mlm_ids, batch.context_speaker, enc.speaker_embeddings, train, rng)
            hid = self.run_encoder(x, batch.context_pad, train=train, rng=rng)
            rows, cols = batch.mlm_positions[:, 0], batch.mlm_positions[:, 1]
            return self.logits(hid[rows, cols]), batch.mlm_labels
        ids = batch.context_ids
        x = self.embed_and_project(ids, batch.context_speaker, enc.speaker_embeddings, train, rng)
        hid = self.run_encoder(x, batch.context_pad, causal=True, train=train, rng=rng)
        valid = ~batch.context_pad[:, 1:]
        rows, cols = np.nonzero(valid)
        if len(rows) == 0:
            return None, np.zeros(0, dtype=np.int64)
        return self.logits(hid[rows, cols]), ids[:, 1:][rows, cols]


# ---------------------------------------------------------------------------
# parameter accounting


def _linear(n_in, n_out, bias=True):
    return n_in * n_out + (n_out if bias else 0)


def block_parameter_count(cfg: ModelConfig) -> dict[str, int]:
    h, f, r = cfg.hidden_size, cfg.ff_size, cfg.ff_rank
    attn = _linear(h, h) + 3 * 2 * _linear(h, h) + _linear(h, h, bias=False)
    if cfg.use_factor_ff:
        ff = _linear(h, r, False) + _linear(r, f) + _linear(f, r, False) + _linear(r, h)
    else:
        ff = _linear(h, f) + _linear(f, h)
    norms = 2 * 2 * h
    residual = 2 if cfg.use_rezero else 2 * 2 * h
    return {"attention": attn, "feed_forward": ff, "norms": norms, "residual": residual}


def count_parameters(cfg: ModelConfig) -> dict[str, int]:
    """Analytic parameter counts per component (no instantiation)."""
    h, v = cfg.hidden_size, cfg.vocab_size
    counts = {}
    if cfg.use_albert:
        counts["char_embedding"] = v * cfg.embed_size
        counts["embed_projection"] = cfg.embed_size * h
    else:
        counts["char_embedding"] = v * h
        counts["embed_projection"] = 0
    counts["null_persona"] = h
    n_blocks = 1 if cfg.use_albert else cfg.num_layers
    counts["layers"] = n_blocks * sum(block_parameter_count(cfg).values())
    counts["final_norm"] = 2 * h
    counts["head"] = v if cfg.tie_head else _linear(h, v)
    counts["persona_memory"] = (
        memory_parameter_count(cfg.persona_vocab_size, h, cfg.hops) if cfg.use_memn2n else 0)
    counts["total"] = sum(counts.values())
    return counts


def parameter_total(model: Module) -> int:
    return sum(p.data.size for p in model.parameters())
