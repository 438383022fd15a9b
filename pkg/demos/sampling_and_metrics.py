"""
Nucleus sampling and the evaluation metrics
===========================================
"""

import numpy as np

from persona_ar.decoding import SamplerConfig, nucleus_filter, sample_next
from persona_ar.metrics import bleu_corpus, distinct_n, overlap_f1

probs = np.array([0.5, 0.3, 0.15, 0.05])
print("filtered at p=0.9:", nucleus_filter(probs, 0.9))      # 10/19, 6/19, 3/19, 0
print("filtered at p=0.5:", nucleus_filter(probs, 0.5))      # the argmax alone
print("top_k=2 cap:     ", nucleus_filter(probs, 0.9, 2))

rng = np.random.default_rng(0)
cfg = SamplerConfig(temperature=1.0, top_p=0.9)
draws = [sample_next(np.log(probs), cfg, rng) for _ in range(10_000)]
print("empirical:       ", np.bincount(draws, minlength=4) / len(draws))

# metrics work on characters
hyps = ["我喜欢旅游", "你好呀", "今天不错"]
refs = ["我喜欢美食", "你好呀", "今天天气不错"]
print("BLEU", round(bleu_corpus(hyps, refs), 4))
print("F1  ", [round(overlap_f1(h, r), 3) for h, r in zip(hyps, refs)])
print("dist-1", round(distinct_n(hyps, 1), 3), "dist-2", round(distinct_n(hyps, 2), 3))
