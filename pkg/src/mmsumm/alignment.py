"""Caption-to-utterance DTW alignment, shot mapping and utterance feature pooling."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Caption, Corpus, Episode, Shot


class HashedBagOfWords:
    """Deterministic signed feature-hashing embedder, L2-normalised."""

    def __init__(self, dim: int = 64):
        self.dim = dim
        self._cache: dict[str, tuple[int, float]] = {}

    def _slot(self, token: str) -> tuple[int, float]:
        hit = self._cache.get(token)
        if hit is None:
            h = zlib.crc32(token.encode("utf-8"))
            hit = (h % self.dim, 1.0 if (h >> 16) & 1 else -1.0)
            self._cache[token] = hit
        return hit

    def __call__(self, tokens: Sequence[str]) -> np.ndarray:
        v = np.zeros(self.dim)
        for t in tokens:
            k, s = self._slot(t.lower())
            v[k] += s
        n = np.linalg.norm(v)
        return v / n if n > 0 else v


def cosine_cost(embedder: Callable[[Sequence[str]], np.ndarray]):
    """Local DTW cost ``1 - cos(embed(caption), embed(utterance))``."""
    def cost(c_tokens, u_tokens) -> float:
        a, b = embedder(c_tokens), embedder(u_tokens)
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            return 1.0
        return max(0.0, 1.0 - float(a @ b) / (na * nb))
    return cost


@dataclass
class AlignmentPath:
    pairs: list[tuple[int, int]]
    cost: float


def dtw_align(captions: Sequence, utterances: Sequence, cost_fn) -> AlignmentPath:
    """Minimum-cost monotone alignment under the standard DTW recurrence.

    ``cost_fn(c, u)`` receives the raw sequence items. Backtracking prefers the
    diagonal predecessor on ties, then (i-1, j), then (i, j-1).
    """
    n, m = len(captions), len(utterances)
    if n == 0 or m == 0:
        raise ValueError("dtw_align needs two non-empty sequences")
    C = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            C[i, j] = cost_fn(captions[i], utterances[j])
    return dtw_from_costs(C)


def dtw_from_costs(C: np.ndarray) -> AlignmentPath:
    n, m = C.shape
    if n == 0 or m == 0:
        raise ValueError("dtw_align needs two non-empty sequences")
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i, j] = C[i - 1, j - 1] + min(D[i - 1, j - 1], D[i - 1, j], D[i, j - 1])
    i, j = n, m
    path = [(n - 1, m - 1)]
    while (i, j) != (1, 1):
        cands = ((D[i - 1, j - 1], i - 1, j - 1), (D[i - 1, j], i - 1, j), (D[i, j - 1], i, j - 1))
        best = min(c[0] for c in cands)
        _, i, j = next(c for c in cands if c[0] == best)
        path.append((i - 1, j - 1))
    path.reverse()
    return AlignmentPath(path, float(D[n, m]))


def align_episode(ep: Episode, embedder) -> AlignmentPath:
    """DTW over the cosine cost, with embeddings computed once per item."""
    ec = np.stack([embedder(c.tokens) for c in ep.captions])
    eu = np.stack([embedder(u.tokens) for u in ep.utterances])
    nc = np.linalg.norm(ec, axis=1, keepdims=True)
    nu = np.linalg.norm(eu, axis=1, keepdims=True)
    sim = (ec @ eu.T) / np.maximum(nc * nu.T, 1e-300)
    sim[(nc == 0).ravel(), :] = 0.0
    sim[:, (nu == 0).ravel()] = 0.0
    return dtw_from_costs(np.maximum(0.0, 1.0 - sim))


def caption_segments(captions: Sequence[Caption], path: AlignmentPath):
    """Split each caption's interval equally among the utterances it aligns to.

    Returns ``(start, end, utterance)`` triples in caption order.
    """
    by_caption: dict[int, list[int]] = {}
    for c, u in path.pairs:
        by_caption.setdefault(c, []).append(u)
    segs = []
    for c, utts in sorted(by_caption.items()):
        cap = captions[c]
        width = (cap.end_s - cap.start_s) / len(utts)
        for k, u in enumerate(utts):
            segs.append((cap.start_s + k * width, cap.start_s + (k + 1) * width, u))
    return segs


def map_shots_to_utterances(shots: Sequence[Shot], captions: Sequence[Caption],
                            path: AlignmentPath) -> list[int]:
    """One utterance index per shot: maximal temporal overlap with a caption
    segment; shots in caption gaps take the nearest segment's utterance."""
    segs = caption_segments(captions, path)
    out = []
    for s in shots:
        best_ov, best_u = 0.0, None
        for a, b, u in segs:
            ov = min(s.end_s, b) - max(s.start_s, a)
            if ov > best_ov:
                best_ov, best_u = ov, u
        if best_u is None:
            best_d = np.inf
            for a, b, u in segs:
                d = max(a - s.end_s, s.start_s - b, 0.0)
                if d < best_d:
                    best_d, best_u = d, u
        out.append(best_u)
    return out


@dataclass
class UtteranceFeatures:
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray


def pool_utterance_features(ep: Episode, shot_map: Sequence[int], embedder,
                            d_v: int | None = None, d_a: int | None = None
                            ) -> list[UtteranceFeatures]:
    """Mean-pool shot vectors per owning utterance (zeros when it owns none)."""
    if d_v is None:
        d_v = len(ep.shots[0].visual) if ep.shots else 0
    if d_a is None:
        d_a = len(ep.shots[0].audio) if ep.shots else 0
    owned: list[list[Shot]] = [[] for _ in ep.utterances]
    for s, u in zip(ep.shots, shot_map):
        owned[u].append(s)
    feats = []
    for u, shots in zip(ep.utterances, owned):
        if shots:
            v = np.mean([s.visual for s in shots], axis=0)
            a = np.mean([s.audio for s in shots], axis=0)
        else:
            v, a = np.zeros(d_v), np.zeros(d_a)
        feats.append(UtteranceFeatures(embedder(u.tokens), v, a))
    return feats


def episode_features(ep: Episode, embedder, d_v: int, d_a: int):
    """Align, map shots and pool: ``(shot_map, features)`` for one episode."""
    path = align_episode(ep, embedder)
    shot_map = map_shots_to_utterances(ep.shots, ep.captions, path)
    return shot_map, pool_utterance_features(ep, shot_map, embedder, d_v, d_a)


def stack_features(feats: Sequence[UtteranceFeatures]):
    return (np.stack([f.x for f in feats]), np.stack([f.v for f in feats]),
            np.stack([f.a for f in feats]))


def corpus_features(corpus: Corpus, embedder) -> dict[str, tuple]:
    """``{episode_id: (X, V, A)}`` arrays, one row per utterance."""
    out = {}
    for ep in corpus.episodes:
        _, feats = episode_features(ep, embedder, corpus.d_v, corpus.d_a)
        out[ep.id] = stack_features(feats)
    return out


def align_corpus(corpus: Corpus, embedder, path: str | Path | None = None):
    """Shot maps and pooled features for every episode; optionally writes
    ``alignment.jsonl`` rows ``{episode_id, shot_to_utterance}``."""
    maps, feats = {}, {}
    for ep in corpus.episodes:
        maps[ep.id], f = episode_features(ep, embedder, corpus.d_v, corpus.d_a)
        feats[ep.id] = stack_features(f)
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            for eid, m in maps.items():
                fh.write(json.dumps({"episode_id": eid, "shot_to_utterance": m}) + "\n")
    return maps, feats


def save_features(features: dict[str, tuple], path: str | Path) -> None:
    arrays = {}
    for eid, (X, V, A) in features.items():
        arrays[f"{eid}/x"], arrays[f"{eid}/v"], arrays[f"{eid}/a"] = X, V, A
    np.savez_compressed(path, **arrays)


def load_features(path: str | Path, dtype=None) -> dict[str, tuple]:
    out: dict[str, dict] = {}
    with np.load(path) as z:
        for key in z.files:
            eid, part = key.rsplit("/", 1)
            arr = z[key]
            out.setdefault(eid, {})[part] = arr if dtype is None else arr.astype(dtype)
    return {eid: (d["x"], d["v"], d["a"]) for eid, d in out.items()}
