"""Beam search with target-side n-gram blocking."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import BOS, EOS

# next-token scores for a prefix (1-d array over the vocabulary)
StepFn = Callable[[Sequence[int]], np.ndarray]


@dataclass
class Hypothesis:
    tokens: list[int]      # starts with BOS
    score: float
    finished: bool = False

    @property
    def output(self) -> list[int]:
        toks = self.tokens[1:]
        return toks[:-1] if self.finished else toks


def has_repeated_ngram(tokens: Sequence, n: int) -> bool:
    if n < 1:
        raise ValueError("n must be >= 1")
    seen = set()
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i:i + n])
        if g in seen:
            return True
        seen.add(g)
    return False


def blocked_tokens(tokens: Sequence[int], n: int) -> set[int]:
    """Tokens whose append would repeat an n-gram already in ``tokens``."""
    if n < 2 or len(tokens) < n - 1:
        return set()
    ctx = tuple(tokens[len(tokens) - (n - 1):])
    return {tokens[i + n - 1] for i in range(len(tokens) - n + 1)
            if tuple(tokens[i:i + n - 1]) == ctx}


def log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max()
    return z - np.log(np.exp(z).sum())


def _scored(step_fn: StepFn, prefix: list[int], block_n: int) -> np.ndarray:
    logp = log_softmax(step_fn(prefix))
    if block_n:
        for tok in blocked_tokens(prefix[1:], block_n):
            logp[tok] = -np.inf
    return logp


def beam_search(step_fn: StepFn, B: int = 5, max_len: int = 128, block_n: int = 3,
                bos: int = BOS, eos: int = EOS, length_penalty: float = 0.0) -> Hypothesis:
    """Best hypothesis by cumulative log-probability.

    EOS-terminated hypotheses are set aside and compete at the end. If none
    finishes within ``max_len`` the best live hypothesis is returned with
    ``finished=False``. Equal scores are ordered by lower token id, then
    earlier beam.
    """
    if B < 1:
        raise ValueError("beam width must be >= 1")
    if block_n != 0 and block_n < 2:
        raise ValueError("block_n must be 0 (disabled) or >= 2")

    def final(h: Hypothesis) -> float:
        if length_penalty <= 0:
            return h.score
        return h.score / (len(h.tokens) - 1) ** length_penalty

    beams = [Hypothesis([bos], 0.0)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        cands = []
        for b_idx, h in enumerate(beams):
            logp = _scored(step_fn, h.tokens, block_n)
            for tok in np.argsort(-logp, kind="stable")[: B + 1]:
                if np.isfinite(logp[tok]):
                    cands.append((h.score + float(logp[tok]), int(tok), b_idx))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        live = []
        for score, tok, b_idx in cands:
            hyp = Hypothesis(beams[b_idx].tokens + [tok], score)
            if tok == eos:
                hyp.finished = True
                finished.append(hyp)
            else:
                live.append(hyp)
            if len(live) == B:
                break
        beams = live
        if not beams:
            break
        if finished and length_penalty <= 0:
            # scores only decrease, so no live beam can overtake this one
            if max(h.score for h in finished) >= beams[0].score:
                break
    if finished:
        return max(finished, key=lambda h: (final(h), [-t for t in h.tokens]))
    return max(beams, key=lambda h: final(h))


def greedy_decode(step_fn: StepFn, max_len: int = 128, block_n: int = 3,
                  bos: int = BOS, eos: int = EOS) -> Hypothesis:
    """Argmax decoding under the same blocking rule (lowest id wins ties)."""
    h = Hypothesis([bos], 0.0)
    for _ in range(max_len):
        logp = _scored(step_fn, h.tokens, block_n)
        tok = int(np.argmax(logp))
        h.tokens.append(tok)
        h.score += float(logp[tok])
        if tok == eos:
            h.finished = True
            break
    return h


def write_generations(rows: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps({"episode_id": r["episode_id"], "method": r["method"],
                                "tokens": list(r["tokens"])}) + "\n")


def read_generations(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def model_step_fn(model, enc, use_adapters: bool) -> StepFn:
    from .backbone import decoder_forward

    def step(prefix: Sequence[int]) -> np.ndarray:
        return decoder_forward(model, prefix, enc, use_adapters).data[-1]
    return step


def summarize(model, inp, feats, variant, B: int = 5, max_len: int = 128,
              block_n: int = 3) -> Hypothesis:
    """Encode one assembled input and beam-decode a summary (token ids)."""
    from .backbone import encode

    enc = encode(model, inp, feats, variant)
    return beam_search(model_step_fn(model, enc, variant.decoder_adapter), B, max_len, block_n)
