"""Episode data model, corpus directory I/O, vocabulary and synthetic corpora."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, BOS, EOS, UNK, MASK = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<s>", "</s>", "<unk>", "<mask>")
SPLITS = ("train", "valid", "test")
N_TP = 5


class CorpusError(ValueError):
    pass


@dataclass
class Utterance:
    speaker: str
    tokens: list[str]
    content_word: list[bool]


@dataclass
class Shot:
    index: int
    start_s: float
    end_s: float
    visual: np.ndarray
    audio: np.ndarray


@dataclass
class Caption:
    start_s: float
    end_s: float
    tokens: list[str]


@dataclass
class Summary:
    source: str
    tokens: list[str]


@dataclass
class Episode:
    id: str
    show: str
    utterances: list[Utterance]
    shots: list[Shot]
    captions: list[Caption]
    summaries: list[Summary]
    characters: list[str]
    tp_scores: np.ndarray | None = None
    # ground truth planted by the synthetic generator; absent for real data
    planted: dict | None = None

    @property
    def n_utterances(self) -> int:
        return len(self.utterances)


@dataclass
class Corpus:
    episodes: list[Episode]
    d_v: int
    d_a: int
    splits: dict[str, list[str]] = field(default_factory=dict)
    vocab: "Vocab | None" = None

    def __post_init__(self):
        self._by_id = {ep.id: ep for ep in self.episodes}

    def __len__(self):
        return len(self.episodes)

    def __getitem__(self, episode_id: str) -> Episode:
        return self._by_id[episode_id]

    def split(self, name: str) -> list[Episode]:
        return [self._by_id[i] for i in self.splits.get(name, [])]


class Vocab:
    """Token/id map with reserved ids PAD=0, BOS=1, EOS=2, UNK=3, MASK=4."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            if t in self.stoi:
                raise CorpusError(f"duplicate vocabulary entry {t!r}")
            self.stoi[t] = len(self.itos)
            self.itos.append(t)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i])
        return out

    @property
    def entries(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos


def build_vocab(corpus: Corpus | Iterable[Episode], max_size: int) -> Vocab:
    """Most frequent utterance/summary tokens, ties broken lexicographically."""
    if max_size <= len(RESERVED):
        raise ValueError("max_size must exceed the 5 reserved ids")
    episodes = corpus.episodes if isinstance(corpus, Corpus) else corpus
    counts: Counter[str] = Counter()
    for ep in episodes:
        for u in ep.utterances:
            counts.update(u.tokens)
        for s in ep.summaries:
            counts.update(s.tokens)
    for r in RESERVED:
        counts.pop(r, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(t for t, _ in ranked[: max_size - len(RESERVED)])


# ---------------------------------------------------------------- validation

def validate_episode(ep: Episode, d_v: int | None = None, d_a: int | None = None,
                     need_characters: bool = False) -> list[str]:
    """Every invariant violation of ``ep`` (empty list means valid)."""
    bad = []
    if not ep.utterances:
        bad.append("episode has no utterances")
    for i, u in enumerate(ep.utterances):
        if not u.tokens:
            bad.append(f"utterance {i} has no tokens")
        if len(u.tokens) != len(u.content_word):
            bad.append(f"utterance {i}: {len(u.tokens)} tokens but "
                       f"{len(u.content_word)} content_word flags")
    for i, s in enumerate(ep.shots):
        if not s.start_s < s.end_s:
            bad.append(f"shot {i} has start_s >= end_s")
        if d_v is not None and len(s.visual) != d_v:
            bad.append(f"shot {i} visual dim {len(s.visual)} != {d_v}")
        if d_a is not None and len(s.audio) != d_a:
            bad.append(f"shot {i} audio dim {len(s.audio)} != {d_a}")
        if not (np.isfinite(s.visual).all() and np.isfinite(s.audio).all()):
            bad.append(f"shot {i} has non-finite features")
    for i in range(1, len(ep.shots)):
        prev, cur = ep.shots[i - 1], ep.shots[i]
        if cur.start_s < prev.start_s:
            bad.append(f"shots not sorted at index {i}")
        elif cur.start_s < prev.end_s:
            bad.append(f"shots overlap at index {i}")
    for i, c in enumerate(ep.captions):
        if not c.start_s < c.end_s:
            bad.append(f"caption {i} has start_s >= end_s")
        if i and c.start_s < ep.captions[i - 1].start_s:
            bad.append(f"captions not sorted at index {i}")
    if not ep.summaries:
        bad.append("episode has no reference summary")
    if need_characters and not ep.characters:
        bad.append("episode has no characters")
    if ep.tp_scores is not None:
        tp = np.asarray(ep.tp_scores)
        if tp.ndim != 2 or tp.shape[1] != N_TP:
            bad.append(f"tp_scores must have {N_TP} columns, got shape {tp.shape}")
        elif tp.shape[0] != len(ep.utterances):
            bad.append(f"tp_scores has {tp.shape[0]} rows for {len(ep.utterances)} utterances")
    return bad


# ---------------------------------------------------------------- JSON I/O

def episode_to_dict(ep: Episode) -> dict:
    d = {
        "id": ep.id,
        "show": ep.show,
        "utterances": [{"speaker": u.speaker, "tokens": u.tokens,
                        "content_word": u.content_word} for u in ep.utterances],
        "shots": [{"index": s.index, "start_s": s.start_s, "end_s": s.end_s,
                   "visual": np.asarray(s.visual).tolist(),
                   "audio": np.asarray(s.audio).tolist()} for s in ep.shots],
        "captions": [{"start_s": c.start_s, "end_s": c.end_s, "tokens": c.tokens}
                     for c in ep.captions],
        "summaries": [{"source": s.source, "tokens": s.tokens} for s in ep.summaries],
        "characters": ep.characters,
    }
    if ep.tp_scores is not None:
        d["tp_scores"] = np.asarray(ep.tp_scores).tolist()
    if ep.planted is not None:
        d["planted"] = ep.planted
    return d


def episode_from_dict(d: dict) -> Episode:
    tp = d.get("tp_scores")
    return Episode(
        id=str(d["id"]),
        show=d.get("show", ""),
        utterances=[Utterance(u["speaker"], list(u["tokens"]),
                              [bool(f) for f in u["content_word"]]) for u in d["utterances"]],
        shots=[Shot(int(s["index"]), float(s["start_s"]), float(s["end_s"]),
                    np.asarray(s["visual"], dtype=np.float64),
                    np.asarray(s["audio"], dtype=np.float64)) for s in d["shots"]],
        captions=[Caption(float(c["start_s"]), float(c["end_s"]), list(c["tokens"]))
                  for c in d["captions"]],
        summaries=[Summary(s.get("source", ""), list(s["tokens"])) for s in d["summaries"]],
        characters=list(d.get("characters", [])),
        tp_scores=None if tp is None else np.asarray(tp, dtype=np.float64),
        planted=d.get("planted"),
    )


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {"d_v": corpus.d_v, "d_a": corpus.d_a, "vocab": "vocab.txt",
              "splits": {s: f"{s}.ids" for s in SPLITS}}
    (path / "header.json").write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    with open(path / "episodes.jsonl", "w", encoding="utf-8") as f:
        for ep in corpus.episodes:
            f.write(json.dumps(episode_to_dict(ep), ensure_ascii=False) + "\n")
    vocab = corpus.vocab if corpus.vocab is not None else Vocab()
    (path / "vocab.txt").write_text("".join(t + "\n" for t in vocab.entries), encoding="utf-8")
    for s in SPLITS:
        ids = corpus.splits.get(s, [])
        (path / f"{s}.ids").write_text("".join(i + "\n" for i in ids), encoding="utf-8")


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    try:
        header = json.loads((path / "header.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CorpusError(f"{path}: missing header.json") from None
    d_v, d_a = int(header["d_v"]), int(header["d_a"])
    episodes = []
    with open(path / "episodes.jsonl", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                ep = episode_from_dict(json.loads(line))
            except (KeyError, TypeError, ValueError) as e:
                raise CorpusError(f"episodes.jsonl line {lineno}: malformed record ({e})") from e
            bad = validate_episode(ep, d_v, d_a)
            if bad:
                raise CorpusError(f"episodes.jsonl line {lineno} ({ep.id}): " + "; ".join(bad))
            episodes.append(ep)
    vocab = None
    vpath = path / header.get("vocab", "vocab.txt")
    if vpath.exists():
        vocab = Vocab(line.rstrip("\n") for line in vpath.read_text(encoding="utf-8").splitlines(True))
    splits = {}
    for s, fname in header.get("splits", {s: f"{s}.ids" for s in SPLITS}).items():
        fp = path / fname
        if not fp.exists():
            raise CorpusError(f"missing split file {fname}")
        splits[s] = [ln.strip() for ln in fp.read_text(encoding="utf-8").splitlines() if ln.strip()]
    known = {ep.id for ep in episodes}
    for s, ids in splits.items():
        missing = [i for i in ids if i not in known]
        if missing:
            raise CorpusError(f"split {s} names unknown episode {missing[0]!r}")
    return Corpus(episodes, d_v, d_a, splits, vocab)


# ---------------------------------------------------------------- synthesis

CHARACTER_NAMES = (
    "lucy", "victor", "meg", "dusty", "rafe", "caleb", "nora", "ethan", "grace",
    "simon", "alison", "frank", "jamie", "kelly", "marcus", "olivia",
)
ACTION_WORDS = (
    "cries", "leaves", "returns", "lies", "confesses", "marries", "fights",
    "hides", "escapes", "proposes", "resigns", "collapses", "steals", "forgives",
    "threatens", "vanishes",
)


@dataclass
class SynthSpec:
    episodes: int = 200
    N_range: tuple[int, int] = (12, 16)
    vocab_size: int = 96
    d_v: int = 12
    d_a: int = 8
    event_count: int = 4
    multimodal_fraction: float = 0.5
    n_characters: int = 6
    n_actions: int = 6
    event_span: int = 2
    tokens_range: tuple[int, int] = (3, 6)
    visual_share: float = 0.6
    signal: float = 1.0
    noise: float = 0.35
    content_filler_rate: float = 0.3
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    show: str = "synthetic"

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        for k in ("N_range", "tokens_range", "split"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def synthesize_corpus(spec: SynthSpec | dict, seed: int) -> Corpus:
    """Generate episodes whose summaries list latent events.

    Text events are stated verbatim (character + action) in each utterance of
    their span. Multimodal events leave no lexical trace: they exist only as a
    character+action prototype added to the visual (or audio) vectors of the
    shots under their span. Token streams come from their own random stream,
    so with ``multimodal_fraction=1`` tokens are independent of events.
    """
    if isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    if not 0.0 <= spec.multimodal_fraction <= 1.0:
        raise ValueError("multimodal_fraction must lie in [0, 1]")
    n_c, n_a = spec.n_characters, spec.n_actions
    if n_c > len(CHARACTER_NAMES) or n_a > len(ACTION_WORDS):
        raise ValueError("not enough built-in character/action names")
    n_filler = spec.vocab_size - n_c - n_a - 1
    if n_filler < 8 or n_c * n_a < spec.event_count:
        raise ValueError(f"vocab_size={spec.vocab_size} too small to encode "
                         f"{spec.event_count} distinct events")
    lo, hi = spec.N_range
    if lo < spec.event_count * spec.event_span:
        raise ValueError("N_range too small for event_count * event_span utterances")

    root = np.random.SeedSequence(seed)
    s_struct, s_events, s_tokens, s_time, s_feat, s_proto = (
        np.random.default_rng(s) for s in root.spawn(6))

    chars = list(CHARACTER_NAMES[:n_c])
    actions = list(ACTION_WORDS[:n_a])
    fillers = [f"w{k:03d}" for k in range(n_filler)]
    filler_content = dict(zip(fillers, (s_proto.random(n_filler) < spec.content_filler_rate).tolist()))
    cast = [c.capitalize() for c in chars]
    proto = {
        "char_v": _unit_rows(s_proto, n_c, spec.d_v), "act_v": _unit_rows(s_proto, n_a, spec.d_v),
        "char_a": _unit_rows(s_proto, n_c, spec.d_a), "act_a": _unit_rows(s_proto, n_a, spec.d_a),
    }
    n_mm = int(round(spec.multimodal_fraction * spec.event_count))

    episodes = []
    for e_idx in range(spec.episodes):
        N = int(s_struct.integers(lo, hi + 1))
        lengths = s_tokens.integers(spec.tokens_range[0], spec.tokens_range[1] + 1, size=N)
        toks = [[fillers[k] for k in s_tokens.integers(0, n_filler, size=L)] for L in lengths]
        flags = [[filler_content[t] for t in u] for u in toks]
        speakers = [cast[k] for k in s_tokens.integers(0, n_c, size=N)]

        # event placement: E non-overlapping spans in transcript order
        E, span = spec.event_count, spec.event_span
        slack = N - E * span
        cuts = np.sort(s_events.integers(0, slack + 1, size=E))
        starts = [int(cuts[j] + j * span) for j in range(E)]
        pairs = s_events.choice(n_c * n_a, size=E, replace=False)
        mm_set = set(s_events.choice(E, size=n_mm, replace=False).tolist()) if n_mm else set()
        events = []
        for j in range(E):
            c, a = divmod(int(pairs[j]), n_a)
            if j in mm_set:
                channel = "visual" if s_events.random() < spec.visual_share else "audio"
            else:
                channel = "text"
            events.append({"start": starts[j], "end": starts[j] + span, "channel": channel,
                           "character": chars[c], "action": actions[a],
                           "phrase": [chars[c], actions[a], "."]})
            if channel == "text":
                for i in range(starts[j], starts[j] + span):
                    pos = int(s_events.integers(0, len(toks[i]) + 1))
                    toks[i][pos:pos] = [chars[c], actions[a]]
                    flags[i][pos:pos] = [True, True]
        utts = [Utterance(speakers[i], toks[i], flags[i]) for i in range(N)]

        # timeline: utterance intervals with gaps, shots tile it, captions jitter
        t = 0.0
        u_span = []
        shots_t = []
        for i in range(N):
            gap = float(s_time.uniform(0.0, 0.5))
            start = t + gap
            end = start + 0.4 * len(toks[i]) + float(s_time.uniform(0.5, 1.5))
            u_span.append((start, end))
            cut_pts = [t, end]
            if s_time.random() < 0.5:
                cut_pts.insert(1, float(s_time.uniform(start + 0.2, end - 0.2)))
            for a_, b_ in zip(cut_pts[:-1], cut_pts[1:]):
                shots_t.append((a_, b_, i))
            t = end
        captions = []
        for i, (a_, b_) in enumerate(u_span):
            ja, jb = s_time.uniform(-0.2, 0.2, size=2)
            cs, ce = max(0.0, a_ + float(ja)), b_ + float(jb)
            captions.append(Caption(round(cs, 3), round(max(ce, cs + 0.1), 3), list(toks[i])))
        captions.sort(key=lambda c: c.start_s)

        owner_event = {}
        for ev in events:
            for i in range(ev["start"], ev["end"]):
                owner_event[i] = ev
        shots = []
        for k, (a_, b_, i) in enumerate(shots_t):
            vis = spec.noise * s_feat.standard_normal(spec.d_v)
            aud = spec.noise * s_feat.standard_normal(spec.d_a)
            ev = owner_event.get(i)
            if ev is not None:
                c, a = chars.index(ev["character"]), actions.index(ev["action"])
                if ev["channel"] == "visual":
                    vis += spec.signal * (proto["char_v"][c] + proto["act_v"][a])
                elif ev["channel"] == "audio":
                    aud += spec.signal * (proto["char_a"][c] + proto["act_a"][a])
            shots.append(Shot(k, round(a_, 3), round(b_, 3), vis, aud))

        tp = 0.1 * s_struct.standard_normal((N, N_TP))
        for j, ev in enumerate(events):
            tp[ev["start"]:ev["end"], j % N_TP] += 1.0
        summary = [tok for ev in events for tok in ev["phrase"]]
        salient = sorted(owner_event)
        episodes.append(Episode(
            id=f"ep{e_idx:05d}", show=spec.show, utterances=utts, shots=shots,
            captions=captions, summaries=[Summary("synthetic", summary)],
            characters=cast, tp_scores=tp,
            planted={"salient": salient, "events": events},
        ))

    n = len(episodes)
    n_train = int(round(spec.split[0] * n))
    n_valid = int(round(spec.split[1] * n))
    ids = [ep.id for ep in episodes]
    splits = {"train": ids[:n_train], "valid": ids[n_train:n_train + n_valid],
              "test": ids[n_train + n_valid:]}
    corpus = Corpus(episodes, spec.d_v, spec.d_a, splits)
    corpus.vocab = build_vocab(corpus, spec.vocab_size + len(RESERVED))
    return corpus
