"""
A synthetic multimodal episode
==============================

Generate a handful of episodes, look at one of them, align captions to
utterances with DTW and pool shot features per utterance.
"""

import numpy as np

from mmsumm.alignment import HashedBagOfWords, align_episode, corpus_features
from mmsumm.corpus import synthesize_corpus

# half of the planted events are stated in words, the other half only
# show up in the shot features
corpus = synthesize_corpus(dict(episodes=8, multimodal_fraction=0.5), seed=0)
ep = corpus.episodes[0]
print(f"{len(corpus.episodes)} episodes, vocabulary of {len(corpus.vocab)} tokens")
print(f"episode {ep.id}: {ep.n_utterances} utterances, {len(ep.shots)} shots")

for i, u in enumerate(ep.utterances[:4]):
    print(f"  u{i} {u.speaker:>8}: {' '.join(u.tokens)}")

# the reference summary lists the planted events in transcript order
print("summary:", " ".join(ep.summaries[0].tokens))
for ev in ep.planted["events"]:
    print(f"  event in utterances {ev['start']}..{ev['end'] - 1} via {ev['channel']}")

# captions are aligned to utterances by DTW over a cosine cost
emb = HashedBagOfWords(64)
path = align_episode(ep, emb)
print("alignment path (caption, utterance):", path.pairs[:6], "...")
print(f"alignment cost {path.cost:.3f}")

# utterance-level features: text embedding, pooled visual and audio vectors
X, V, A = corpus_features(corpus, emb)[ep.id]
print("feature shapes:", X.shape, V.shape, A.shape)

# utterances of a visual event carry a prototype on top of the noise
vis = [u for ev in ep.planted["events"] if ev["channel"] == "visual"
       for u in range(ev["start"], ev["end"])]
rest = [u for u in range(ep.n_utterances) if u not in vis]
if vis:
    print(f"mean |v| on visual-event utterances {np.linalg.norm(V[vis], axis=1).mean():.2f}, "
          f"elsewhere {np.linalg.norm(V[rest], axis=1).mean():.2f}")
