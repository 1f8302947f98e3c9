"""Multimodal projection, the episode interaction matrix and encoder input layout."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .corpus import EOS, Episode, Vocab

log = logging.getLogger(__name__)

MODALITIES = ("multimodal", "text", "vision", "audio")


@dataclass
class FusionParams:
    W_x: dc.Tensor  # d_x x d_i
    W_v: dc.Tensor  # d_v x d_i
    W_a: dc.Tensor  # d_a x d_i
    W_m: dc.Tensor  # 3 d_i x d_m


@dataclass
class InteractionParams:
    W_i: dc.Tensor
    W_j: dc.Tensor
    b_i: dc.Tensor
    b_j: dc.Tensor


def fusion_shapes(d_x: int, d_v: int, d_a: int, d_i: int, d_m: int) -> dict[str, tuple]:
    if not d_i < d_m:
        raise ValueError(f"fusion input dim d_i={d_i} must be smaller than d_m={d_m}")
    return {"W_x": (d_x, d_i), "W_v": (d_v, d_i), "W_a": (d_a, d_i), "W_m": (3 * d_i, d_m)}


def interaction_shapes(d_m: int) -> dict[str, tuple]:
    return {"W_i": (d_m, d_m), "W_j": (d_m, d_m), "b_i": (d_m,), "b_j": (d_m,)}


def _modality_mask(mode: str) -> tuple[bool, bool, bool]:
    if mode not in MODALITIES:
        raise ValueError(f"unknown modality mode {mode!r}")
    return {"multimodal": (True, True, True), "text": (True, False, False),
            "vision": (False, True, False), "audio": (False, False, True)}[mode]


def project_multimodal(x, v, a, params: FusionParams, mode: str = "multimodal") -> dc.Tensor:
    """``m = ReLU(W_m [ReLU(W_x x); ReLU(W_v v); ReLU(W_a a)])``, no biases.

    Accepts single vectors or row-stacked matrices (one row per utterance).
    Modalities switched off by ``mode`` are fed as zeros.
    """
    use = _modality_mask(mode)
    parts = []
    for feat, W, on in zip((x, v, a), (params.W_x, params.W_v, params.W_a), use):
        feat = np.asarray(feat, dtype=W.dtype)
        if feat.shape[-1] != W.shape[0]:
            raise ValueError(f"feature dim {feat.shape[-1]} does not match weight {W.shape}")
        if not on:
            feat = np.zeros_like(feat)
        parts.append(dc.relu(dc.matmul(dc.Tensor(feat), W)))
    return dc.relu(dc.matmul(dc.concat(parts, axis=-1), params.W_m))


def interaction_matrix(m: dc.Tensor, params: InteractionParams) -> dc.Tensor:
    """``H[i, j] = (W_i m_i + b_i) . (W_j m_j + b_j) / sqrt(d_m)`` for N x d_m ``m``."""
    d_m = m.shape[-1]
    left = dc.add(dc.matmul(m, params.W_i), params.b_i)
    right = dc.add(dc.matmul(m, params.W_j), params.b_j)
    return dc.scale(dc.matmul(left, dc.transpose(right, (1, 0))), 1.0 / math.sqrt(d_m))


@dataclass
class EncoderInput:
    token_ids: np.ndarray                 # T ids; global slots hold EOS
    global_positions: list[int]           # one per kept utterance
    utterances: list[int]                 # kept utterance index per global slot
    utterance_of_position: np.ndarray     # T entries, owning utterance
    token_index: np.ndarray               # T entries, index within utterance, -1 at globals
    truncated: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.token_ids)

    @property
    def text_positions(self) -> np.ndarray:
        return np.flatnonzero(self.token_index >= 0)


def assemble_input(selected: Sequence[int], episode: Episode, vocab: Vocab,
                   L_max: int = 1024) -> EncoderInput:
    """Lay out ``[G, u1 tokens, G, u2 tokens, ...]`` for utterances in ``selected``.

    Trailing whole utterances are dropped to respect ``L_max``; only when the
    first utterance alone is too long is its tail cut.
    """
    selected = list(selected)
    if not selected:
        raise ValueError("assemble_input needs a non-empty selection")
    if any(b <= a for a, b in zip(selected, selected[1:])):
        raise ValueError("selected utterances must be in transcript order")
    ids, gpos, kept, owner, tok_idx = [], [], [], [], []
    notes = []
    truncated = False
    for u in selected:
        toks = episode.utterances[u].tokens
        need = 1 + len(toks)
        if len(ids) + need > L_max:
            truncated = True
            if not kept:
                toks = toks[: L_max - 1]
                notes.append(f"utterance {u} alone exceeds L_max={L_max}; tail truncated")
                log.warning(notes[-1])
            else:
                break
        gpos.append(len(ids))
        kept.append(u)
        ids.append(EOS)
        owner.append(u)
        tok_idx.append(-1)
        ids.extend(vocab.encode(toks))
        owner.extend([u] * len(toks))
        tok_idx.extend(range(len(toks)))
        if truncated:
            break
    return EncoderInput(np.asarray(ids, dtype=np.int64), gpos, kept,
                        np.asarray(owner, dtype=np.int64), np.asarray(tok_idx, dtype=np.int64),
                        truncated, notes)
