"""End-to-end memory network over the target speaker's persona items.

Items are unordered key-value tags, so slots carry no position signal and
the read is invariant to item order.  With adjacent sharing the output
matrix of hop k is the input matrix of hop k+1, giving K+1 tables.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Module, normal
from .tensor import Tensor
from .vocab import PAD


def build_memory_slots(word_ids: np.ndarray, table: Tensor) -> Tensor:
    """Mean word embedding per item.

    ``word_ids`` is (..., items, words) padded with PAD; an item without
    words yields a zero slot.
    """
    word_ids = np.asarray(word_ids)
    present = word_ids != PAD
    counts = present.sum(-1, keepdims=True)
    weights = np.divide(present, counts, out=np.zeros(present.shape), where=counts > 0)
    emb = T.embedding(table, word_ids)
    return T.mul(emb, weights[..., None].astype(table.dtype)).sum(axis=-2)


def canonical_item_order(word_ids: np.ndarray, item_pad: np.ndarray) -> np.ndarray:
    """Per-row permutation sorting items by their word ids, padding last.

    Summing slots in this order makes the read bitwise order-invariant.
    """
    b, n, w = word_ids.shape
    order = np.empty((b, n), dtype=np.int64)
    for i in range(b):
        keys = [word_ids[i, :, j] for j in range(w - 1, -1, -1)] + [item_pad[i].astype(np.int64)]
        order[i] = np.lexsort(keys)
    return order


class PersonaMemory(Module):
    def __init__(self, rng: np.random.Generator, vocab_size: int, hidden_size: int,
                 hops: int = 3, adjacent: bool = True):
        self.hops = hops
        self.adjacent = adjacent
        n_tables = hops + 1 if adjacent else 2 * hops
        self.tables = [normal(rng, (vocab_size, hidden_size)) for _ in range(n_tables)]
        self._last_attention: list[np.ndarray] = []

    def input_table(self, hop: int) -> Tensor:
        """A^hop, hops counted from 1."""
        return self.tables[hop - 1] if self.adjacent else self.tables[2 * (hop - 1)]

    def output_table(self, hop: int) -> Tensor:
        """C^hop; equals A^(hop+1) under adjacent sharing."""
        return self.tables[hop] if self.adjacent else self.tables[2 * (hop - 1) + 1]

    def read(self, query: Tensor, word_ids: np.ndarray, item_pad: np.ndarray) -> Tensor:
        """K-hop read for a (B, H) query; returns the updated query as (B, 1, H)."""
        word_ids = np.asarray(word_ids)
        item_pad = np.asarray(item_pad, dtype=bool).copy()
        empty = item_pad.all(axis=1)
        item_pad[empty, 0] = False  # one null slot
        order = canonical_item_order(word_ids, item_pad)
        rows = np.arange(word_ids.shape[0])[:, None]
        word_ids = word_ids[rows, order]
        item_pad = item_pad[rows, order]
        b, h = query.shape
        u = query
        self._last_attention = []
        for hop in range(1, self.hops + 1):
            keys = build_memory_slots(word_ids, self.input_table(hop))       # (B, I, H)
            values = build_memory_slots(word_ids, self.output_table(hop))    # (B, I, H)
            scores = T.matmul(keys, u.reshape(b, h, 1)).reshape(b, -1)       # (B, I)
            p = T.softmax(T.masked_fill(scores, item_pad, -np.inf))
            self._last_attention.append(p.data)
            o = T.matmul(p.reshape(b, 1, -1), values).reshape(b, h)
            u = u + o
        return u.reshape(b, 1, h)


def memn2n_read(query: Tensor, word_ids, item_pad, memory: PersonaMemory) -> Tensor:
    return memory.read(query, word_ids, item_pad)


def memory_parameter_count(vocab_size: int, hidden_size: int, hops: int, adjacent: bool = True) -> int:
    return (hops + 1 if adjacent else 2 * hops) * vocab_size * hidden_size
