"""
Adapters, the interaction matrix and parameter accounting
=========================================================

Adapters start as the identity, so a freshly attached model reproduces
the pretrained encoder exactly. The hierarchical adapter mixes global
positions through a temperature softmax over the interaction matrix H.
"""

import numpy as np

from mmsumm import diffcore as dc
from mmsumm.adapters import AdapterConfig, context_weights
from mmsumm.alignment import HashedBagOfWords, corpus_features
from mmsumm.backbone import (BackboneConfig, FeatureDims, Summarizer, count_params,
                             encoder_forward, multimodal_vectors, solve_bottleneck)
from mmsumm.config import BART_LARGE
from mmsumm.corpus import synthesize_corpus
from mmsumm.fusion import assemble_input, interaction_matrix

corpus = synthesize_corpus(dict(episodes=4), seed=1)
feats = corpus_features(corpus, HashedBagOfWords(64))
ep = corpus.episodes[0]

cfg = BackboneConfig(vocab_size=len(corpus.vocab), L_max=256, dropout=0.0)
dims = FeatureDims(d_x=64, d_v=corpus.d_v, d_a=corpus.d_a, d_i=16)
model = Summarizer(cfg, AdapterConfig(d_B=32, tau=0.1), dims, seed=0, dtype=np.float64)

# layout: a global slot (EOS placeholder) before every utterance
inp = assemble_input(range(ep.n_utterances), ep, corpus.vocab, cfg.L_max)
print(f"{len(inp.token_ids)} encoder positions, globals at {inp.global_positions[:5]} ...")

m = multimodal_vectors(model, feats[ep.id], inp.utterances)
H = interaction_matrix(m, model.interaction_params())
W = context_weights(H, 0.1).data
print(f"H is {H.shape[0]}x{H.shape[1]}; rows of softmax(H/tau) sum to {W.sum(axis=1).min():.6f}")
print("largest weight per row:", np.round(W.max(axis=1), 2))

# with zeroed m-vectors, both adapter kinds give the plain encoder bit for bit
plain = encoder_forward(model, inp).data
zero = dc.Tensor(np.zeros_like(m.data))
for kind in ("vanilla", "hierarchical"):
    out = encoder_forward(model, inp, zero, H, kind).data
    print(f"{kind:>12} adapter at init equals plain encoder: {np.array_equal(out, plain)}")

# accounting on the BART-large shape; d_B is solved for 15.6M tunable parameters
big = FeatureDims(d_x=768, d_v=2816, d_a=1024, d_i=512)
d_B = solve_bottleneck(BART_LARGE, big, 15_600_000)
c = count_params(BART_LARGE, AdapterConfig(d_B=d_B), big)
print(f"backbone {c['backbone']:,}; with adapters {c['total']:,}; tunable {c['tunable']:,} "
      f"(d_B={d_B}, {100 * c['fraction']:.2f}% of total, "
      f"{100 * c['tunable'] / c['backbone']:.2f}% of the backbone)")
