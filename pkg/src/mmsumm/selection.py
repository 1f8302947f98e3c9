"""Content selection: positional baselines, BM25, turning points and a learned selector."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .backbone import encoder_layer
from .corpus import N_TP, Episode
from .fusion import MODALITIES, FusionParams, fusion_shapes, project_multimodal

METHODS = ("lead", "last", "middle", "random", "bm25", "selector", "tp", "oracle")


@dataclass
class SelectionResult:
    method: str
    indices: list[int]
    scores: list[float] | None = None

    def __post_init__(self):
        if self.method.split(":")[0] not in METHODS:
            raise ValueError(f"unknown selection method {self.method!r}")
        self.indices = [int(i) for i in self.indices]
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("selection indices must be strictly increasing")

    def to_dict(self, episode_id: str) -> dict:
        return {"episode_id": episode_id, "method": self.method, "indices": self.indices,
                "scores": self.scores}


def _top_k(scores: np.ndarray, K: int) -> list[int]:
    """Indices of the K largest scores (earlier index wins ties), in transcript order."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores, dtype=np.float64)))
    return sorted(order[:K].tolist())


# ---------------------------------------------------------------- unsupervised

def positional_select(episode: Episode | int, kind: str, K: int, seed: int = 0) -> SelectionResult:
    if K < 1:
        raise ValueError("K must be >= 1")
    n = episode if isinstance(episode, int) else episode.n_utterances
    k = min(K, n)
    if kind == "lead":
        idx = range(k)
    elif kind == "last":
        idx = range(n - k, n)
    elif kind == "middle":
        start = min(max(n // 2 - (k - 1) // 2, 0), n - k)
        idx = range(start, start + k)
    elif kind == "random":
        idx = sorted(np.random.default_rng(seed).choice(n, size=k, replace=False).tolist())
    else:
        raise ValueError(f"unknown positional kind {kind!r}")
    return SelectionResult(kind, list(idx))


def bm25_scores(docs: Sequence[Sequence[str]], k1: float = 1.2, b: float = 0.75) -> np.ndarray:
    """Each document used as a query against all the others (self excluded)."""
    D = len(docs)
    if D == 0:
        return np.zeros(0)
    lens = np.array([len(d) for d in docs], dtype=np.float64)
    avgdl = lens.mean() if lens.mean() > 0 else 1.0
    tfs = [Counter(d) for d in docs]
    df = Counter(t for tf in tfs for t in tf)
    idf = {t: math.log(1.0 + (D - n + 0.5) / (n + 0.5)) for t, n in df.items()}
    norm = k1 * (1.0 - b + b * lens / avgdl)
    out = np.zeros(D)
    for u, query in enumerate(docs):
        s = 0.0
        for term in query:          # repeated query terms count repeatedly
            w = idf[term]
            for d in range(D):
                if d == u:
                    continue
                tf = tfs[d].get(term, 0)
                if tf:
                    s += w * (tf * (k1 + 1.0)) / (tf + norm[d])
        out[u] = s
    return out


def bm25_select(episode: Episode, K: int, k1: float = 1.2, b: float = 0.75) -> SelectionResult:
    if K < 1:
        raise ValueError("K must be >= 1")
    scores = bm25_scores([u.tokens for u in episode.utterances], k1, b)
    return SelectionResult("bm25", _top_k(scores, K), scores.tolist())


def tp_select(episode: Episode, K: int) -> SelectionResult:
    """Top ``K/5`` utterances per turning-point column, merged."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if episode.tp_scores is None:
        raise ValueError(f"episode {episode.id} has no turning-point scores")
    tp = np.asarray(episode.tp_scores, dtype=np.float64)
    if tp.ndim != 2 or tp.shape[1] != N_TP:
        raise ValueError(f"tp_scores must be N x {N_TP}")
    per = [K // N_TP + (1 if j < K % N_TP else 0) for j in range(N_TP)]
    chosen: set[int] = set()
    for j in range(N_TP):
        chosen.update(_top_k(tp[:, j], per[j]))
    return SelectionResult("tp", sorted(chosen))


# ---------------------------------------------------------------- labels & scoring

def reference_sentences(tokens: Sequence[str]) -> list[list[str]]:
    sents, cur = [], []
    for t in tokens:
        if t == ".":
            if cur:
                sents.append(cur)
            cur = []
        else:
            cur.append(t)
    if cur:
        sents.append(cur)
    return sents


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def make_pseudo_labels(episode: Episode, reference: Sequence[str], embedder) -> np.ndarray:
    """One positive per reference sentence: its most cosine-similar utterance."""
    U = np.stack([_unit(embedder(u.tokens)) for u in episode.utterances])
    sents = reference_sentences(reference) or [list(reference)]
    labels = np.zeros(len(U), dtype=bool)
    for s in sents:
        sims = U @ _unit(embedder(s))
        labels[int(np.argmax(sims))] = True
    return labels


def planted_labels(episode: Episode) -> np.ndarray:
    """Generator ground truth: utterances covered by a planted event."""
    if not episode.planted:
        raise ValueError(f"episode {episode.id} carries no planted salience")
    labels = np.zeros(episode.n_utterances, dtype=bool)
    labels[list(episode.planted["salient"])] = True
    return labels


def selection_prf(predicted: SelectionResult | Iterable[int], oracle) -> dict:
    pred = set(predicted.indices if isinstance(predicted, SelectionResult) else predicted)
    oracle = np.asarray(oracle)
    gold = set(np.flatnonzero(oracle).tolist()) if oracle.dtype == bool else set(oracle.tolist())
    hit = len(pred & gold)
    p = hit / len(pred) if pred else 0.0
    r = hit / len(gold) if gold else 0.0
    f = 2 * hit / (len(pred) + len(gold)) if hit else 0.0
    return {"precision": p, "recall": r, "f1": f}


# ---------------------------------------------------------------- supervised selector

@dataclass
class SelectorConfig:
    d_m: int = 32
    n_heads: int = 4
    d_ffn: int = 64
    layers: int = 2
    d_i: int = 16
    max_len: int = 256
    mode: str = "multimodal"

    def __post_init__(self):
        if self.mode not in MODALITIES:
            raise ValueError(f"unknown modality mode {self.mode!r}")
        if self.d_m % self.n_heads:
            raise ValueError("d_m must be divisible by n_heads")


@dataclass
class SelectorParams:
    config: SelectorConfig
    dims: tuple[int, int, int]                       # (d_x, d_v, d_a)
    params: dict[str, dc.Tensor] = field(default_factory=dict)

    def fusion(self) -> FusionParams:
        p = self.params
        return FusionParams(p["fusion.W_x"], p["fusion.W_v"], p["fusion.W_a"], p["fusion.W_m"])

    def leaves(self) -> list[dc.Tensor]:
        return [self.params[k] for k in sorted(self.params)]


def selector_shapes(cfg: SelectorConfig, d_x: int, d_v: int, d_a: int) -> dict[str, tuple]:
    d, f = cfg.d_m, cfg.d_ffn
    shapes = {f"fusion.{k}": s for k, s in fusion_shapes(d_x, d_v, d_a, cfg.d_i, d).items()}
    shapes["pos"] = (cfg.max_len, d)
    for l in range(cfg.layers):
        pre = f"enc.{l}"
        for w in ("q", "k", "v", "o"):
            shapes[f"{pre}.self.w{w}"] = (d, d)
            shapes[f"{pre}.self.b{w}"] = (d,)
        shapes.update({f"{pre}.ffn.w1": (d, f), f"{pre}.ffn.b1": (f,),
                       f"{pre}.ffn.w2": (f, d), f"{pre}.ffn.b2": (d,)})
        for n in ("ln1", "ln2"):
            shapes[f"{pre}.{n}.g"] = (d,)
            shapes[f"{pre}.{n}.b"] = (d,)
    shapes["head.w"] = (d,)
    shapes["head.b"] = ()
    return shapes


def init_selector(cfg: SelectorConfig, d_x: int, d_v: int, d_a: int, seed: int = 0,
                  dtype=np.float64) -> SelectorParams:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in sorted(selector_shapes(cfg, d_x, d_v, d_a).items()):
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif len(shape) <= 1 and name != "head.w":
            arr = np.zeros(shape)
        elif name == "pos":
            arr = rng.standard_normal(shape) * 0.1
        elif name == "head.w":
            arr = rng.uniform(-1, 1, shape) / math.sqrt(shape[0])
        else:
            bound = math.sqrt(6.0 / shape[0]) if name.startswith("fusion.") else 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, shape)
        params[name] = dc.Tensor(np.asarray(arr, dtype=dtype), name=name, tunable=True)
    return SelectorParams(cfg, (d_x, d_v, d_a), params)


def selector_logits(sp: SelectorParams, feats, mode: str | None = None) -> dc.Tensor:
    """One logit per utterance from fused ``(X, V, A)`` rows."""
    cfg = sp.config
    X, V, A = feats
    n = len(X)
    if n > cfg.max_len:
        raise ValueError(f"{n} utterances exceed the selector cap of {cfg.max_len}")
    p = sp.params
    m = project_multimodal(X, V, A, sp.fusion(), mode or cfg.mode)
    h = dc.add(m, dc.take(p["pos"], np.arange(n), axis=0))
    for l in range(cfg.layers):
        h = encoder_layer(h, p, f"enc.{l}", cfg.n_heads)
    return dc.add(dc.matmul(h, p["head.w"]), p["head.b"])


def selector_scores(sp: SelectorParams, feats, mode: str | None = None) -> np.ndarray:
    z = selector_logits(sp, feats, mode).data
    return 1.0 / (1.0 + np.exp(-z))


def train_selector(features: dict, labels: dict, config: SelectorConfig | None = None,
                   epochs: int = 5, lr: float = 3e-3, seed: int = 0,
                   on_epoch=None) -> SelectorParams:
    """Fit the selector with mean binary cross-entropy.

    ``features`` maps episode id to ``(X, V, A)``; ``labels`` maps the
    training episode ids to boolean arrays. Episodes are visited in a seeded
    shuffled order each epoch.
    """
    from .training import Adam

    config = config or SelectorConfig()
    ids = sorted(labels)
    if not ids:
        raise ValueError("no labelled episodes")
    X, V, A = features[ids[0]]
    sp = init_selector(config, X.shape[1], V.shape[1], A.shape[1], seed)
    opt = Adam(sp.leaves(), clip_norm=1.0)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    for epoch in range(epochs):
        total = 0.0
        for i in rng.permutation(len(ids)):
            eid = ids[i]
            y = np.asarray(labels[eid], dtype=np.float64)
            g = dc.Graph()
            with g:
                loss = dc.bce_with_logits(selector_logits(sp, features[eid]), y)
            val = float(loss.data)
            if not math.isfinite(val):
                raise FloatingPointError(f"selector loss is {val} on episode {eid}")
            total += val
            opt.step(g.backward(loss), lr)
        if on_epoch is not None:
            on_epoch(epoch, total / len(ids))
    return sp


def selector_select(features, sp: SelectorParams, K: int) -> SelectionResult:
    if K < 1:
        raise ValueError("K must be >= 1")
    s = selector_scores(sp, features)
    return SelectionResult("selector", _top_k(s, K), s.tolist())


# ---------------------------------------------------------------- io

def write_selections(rows: Iterable[tuple[str, SelectionResult]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for eid, res in rows:
            f.write(json.dumps(res.to_dict(eid)) + "\n")


def read_selections(path: str | Path) -> list[tuple[str, SelectionResult]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out.append((d["episode_id"], SelectionResult(d["method"], d["indices"], d.get("scores"))))
    return out
