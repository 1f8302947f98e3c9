"""
Choosing utterances
===================

Positional baselines, BM25, turning points and a small supervised
selector, scored against the salience planted by the generator.
"""

import numpy as np

from mmsumm.alignment import HashedBagOfWords, corpus_features
from mmsumm.corpus import synthesize_corpus
from mmsumm.selection import (SelectorConfig, bm25_select, planted_labels, positional_select,
                              selection_prf, selector_select, tp_select, train_selector)

corpus = synthesize_corpus(dict(episodes=120, split=(0.75, 0.125, 0.125)), seed=2)
feats = corpus_features(corpus, HashedBagOfWords(64))
train, test = corpus.split("train"), corpus.split("test")
K = 6


def mean_f1(select):
    return np.mean([selection_prf(select(i, ep), planted_labels(ep))["f1"]
                    for i, ep in enumerate(test)])


scores = {
    "lead": mean_f1(lambda i, ep: positional_select(ep, "lead", K)),
    "middle": mean_f1(lambda i, ep: positional_select(ep, "middle", K)),
    "random": mean_f1(lambda i, ep: positional_select(ep, "random", K, seed=i)),
    "bm25": mean_f1(lambda i, ep: bm25_select(ep, K)),
    "tp": mean_f1(lambda i, ep: tp_select(ep, K)),
}

# the selector sees fused utterance vectors; modes zero out modalities
labels = {ep.id: planted_labels(ep) for ep in train}
for mode in ("multimodal", "text", "vision", "audio"):
    sp = train_selector(feats, labels, SelectorConfig(mode=mode), epochs=2, seed=0)
    scores[f"selector:{mode}"] = mean_f1(lambda i, ep: selector_select(feats[ep.id], sp, K))

for name, f1 in scores.items():
    print(f"{name:<20}{100 * f1:6.1f}")
