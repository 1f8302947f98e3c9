"""Losses, input corruption, LR schedule, Adam and the two training stages."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .backbone import (Summarizer, Variant, decoder_forward, encode, freeze_partition,
                       lm_head, save_checkpoint)
from .corpus import BOS, EOS, MASK, PAD, Corpus, Episode, Vocab
from .fusion import EncoderInput, assemble_input

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr", "lm_loss", "emlm_loss", "total_loss")


@dataclass
class TrainConfig:
    total_steps: int = 12000
    emlm_cutoff: int = 1500
    base_lr: float = 3e-5
    warmup_steps: int = 500
    label_smoothing: float = 0.1
    emlm_weight: float = 1.0
    utterance_mask_rate: float = 0.10
    K: int = 60
    seed: int = 0
    corrupt: bool = True
    clip_norm: float = 1.0
    checkpoint_every: int = 0
    L_max: int = 1024

    def __post_init__(self):
        if not 0 < self.emlm_cutoff <= self.total_steps:
            raise ValueError("emlm_cutoff must lie in (0, total_steps]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.emlm_weight < 0:
            raise ValueError("emlm_weight must be non-negative")
        if self.warmup_steps < 1 or self.K < 1:
            raise ValueError("warmup_steps and K must be positive")


# ---------------------------------------------------------------- corruption

@dataclass
class CorruptionResult:
    corrupted_ids: np.ndarray
    masked: np.ndarray                  # sorted positions in the masked set
    masked_utterances: list[int] = field(default_factory=list)


def masked_utterance_count(n_selected: int, rate: float) -> int:
    return max(1, int(math.floor(rate * n_selected + 0.5)))


def corrupt_input(inp: EncoderInput, episode: Episode, rng: np.random.Generator,
                  rate: float = 0.10) -> CorruptionResult:
    """Mask every content word plus ``max(1, round(rate * N))`` whole utterances."""
    ids = inp.token_ids.copy()
    text = inp.text_positions
    content = np.array([episode.utterances[inp.utterance_of_position[p]]
                        .content_word[inp.token_index[p]] for p in text], dtype=bool)
    hit = set(text[content].tolist())
    n_full = masked_utterance_count(len(inp.utterances), rate)
    chosen = sorted(rng.choice(inp.utterances, size=n_full, replace=False).tolist())
    chosen_set = set(chosen)
    hit.update(p for p in text.tolist() if inp.utterance_of_position[p] in chosen_set)
    masked = np.array(sorted(hit), dtype=np.int64)
    ids[masked] = MASK
    return CorruptionResult(ids, masked, chosen)


# ---------------------------------------------------------------- losses

def lm_loss(logits: dc.Tensor, targets: Sequence[int], smoothing: float = 0.1) -> dc.Tensor:
    """Mean label-smoothed next-token NLL; trailing PAD targets are ignored."""
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) == 0:
        raise ValueError("empty target summary")
    is_pad = targets == PAD
    if is_pad.any():
        first = int(np.argmax(is_pad))
        if not is_pad[first:].all():
            raise ValueError("PAD may only appear as a suffix of the target")
        if first == 0:
            raise ValueError("target has no non-PAD tokens")
    return dc.cross_entropy(logits, targets, smoothing, weights=(~is_pad).astype(np.float64))


def emlm_loss(encoder_states: dc.Tensor, masked: Sequence[int], originals: Sequence[int],
              model: Summarizer) -> dc.Tensor:
    """Mean NLL of the original tokens at masked encoder positions via the LM head."""
    masked = np.asarray(masked, dtype=np.int64)
    if masked.size == 0:
        raise ValueError("eMLM loss needs a non-empty masked set")
    logits = lm_head(model, dc.take(encoder_states, masked, axis=0))
    return dc.cross_entropy(logits, np.asarray(originals, dtype=np.int64)[masked])


# ---------------------------------------------------------------- schedule & optimiser

def lr_at_step(t: int, config: TrainConfig) -> float:
    """Linear warm-up, then inverse-square-root decay."""
    if t < 1:
        raise ValueError("steps are 1-based")
    w = config.warmup_steps
    if t <= w:
        return config.base_lr * t / w
    return config.base_lr * math.sqrt(w / t)


class Adam:
    def __init__(self, leaves: Sequence[dc.Tensor], beta1=0.9, beta2=0.999, eps=1e-8,
                 clip_norm: float = 0.0):
        self.leaves = {t.name: t for t in leaves if t.tunable}
        self.m = {k: np.zeros_like(t.data) for k, t in self.leaves.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.leaves.items()}
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        if self.clip_norm > 0:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                 for k, g in grads.items() if k in self.leaves))
            if norm > self.clip_norm:
                grads = {k: g * (self.clip_norm / norm) for k, g in grads.items()}
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            t = self.leaves.get(k)
            if t is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            t.data -= upd.astype(t.data.dtype)


# ---------------------------------------------------------------- training loop

@dataclass
class StepRecord:
    step: int
    lr: float
    lm_loss: float
    emlm_loss: float | None
    total_loss: float

    def row(self) -> list:
        return [self.step, f"{self.lr:.6e}", f"{self.lm_loss:.6f}",
                "" if self.emlm_loss is None else f"{self.emlm_loss:.6f}",
                f"{self.total_loss:.6f}"]


def random_selection(n: int, K: int, rng: np.random.Generator) -> list[int]:
    if K >= n:
        return list(range(n))
    return sorted(rng.choice(n, size=K, replace=False).tolist())


def summary_targets(tokens: Sequence[str], vocab: Vocab, max_len: int) -> np.ndarray:
    ids = vocab.encode(tokens)[: max_len - 1] + [EOS]
    return np.asarray(ids, dtype=np.int64)


class StepFailed(FloatingPointError):
    pass


def train(corpus: Corpus, model: Summarizer, features: dict, config: TrainConfig,
          stage: str = "adapter_tune", variant: Variant | str = "h3d",
          log_path: str | Path | None = None, checkpoint_dir: str | Path | None = None,
          on_step: Callable[[StepRecord], None] | None = None,
          episodes: Sequence[Episode] | None = None) -> list[StepRecord]:
    """Train ``model`` in place and return the per-step log.

    ``pretrain_backbone`` fine-tunes every backbone leaf on text-only
    summarisation with adapters bypassed. ``adapter_tune`` freezes the
    backbone, trains fusion/interaction/adapter leaves, samples K random
    utterances per step and adds the eMLM term for the first ``emlm_cutoff``
    steps while corrupting the input.
    """
    if stage not in ("pretrain_backbone", "adapter_tune"):
        raise ValueError(f"unknown stage {stage!r}")
    if isinstance(variant, str):
        variant = Variant.named(variant)
    if stage == "pretrain_backbone":
        variant = Variant.named("plain")
        freeze_partition(model, "full_finetune")
    else:
        freeze_partition(model, "adapter_tune")
    vocab = corpus.vocab
    if vocab is None:
        raise ValueError("corpus has no vocabulary; build one first")
    pool = list(episodes) if episodes is not None else corpus.split("train")
    if not pool:
        raise ValueError("no training episodes")

    seeds = np.random.SeedSequence(config.seed).spawn(4)
    data_rng, sel_rng, corrupt_rng, drop_rng = (np.random.default_rng(s) for s in seeds)
    leaves = [t for t in model.params.values() if t.tunable]
    opt = Adam(leaves, clip_norm=config.clip_norm)
    use_emlm = stage == "adapter_tune" and config.corrupt
    L = min(config.L_max, model.config.L_max)

    records: list[StepRecord] = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    try:
        for t in range(1, config.total_steps + 1):
            ep = pool[int(data_rng.integers(len(pool)))]
            ref = ep.summaries[int(data_rng.integers(len(ep.summaries)))]
            sel = random_selection(ep.n_utterances, config.K, sel_rng)
            inp = assemble_input(sel, ep, vocab, L)
            token_ids = None
            corr = None
            if use_emlm and t <= config.emlm_cutoff:
                corr = corrupt_input(inp, ep, corrupt_rng, config.utterance_mask_rate)
                token_ids = corr.corrupted_ids
            target = summary_targets(ref.tokens, vocab, L)
            prefix = np.concatenate([[BOS], target[:-1]])
            rng = drop_rng if model.config.dropout > 0 else None
            g = dc.Graph()
            with g:
                feats = features[ep.id] if variant.multimodal else None
                enc = encode(model, inp, feats, variant, token_ids, rng)
                logits = decoder_forward(model, prefix, enc, variant.decoder_adapter, rng)
                l_lm = lm_loss(logits, target, config.label_smoothing)
                total = l_lm
                l_em = None
                if corr is not None:
                    l_em = emlm_loss(enc, corr.masked, inp.token_ids, model)
                    total = dc.add(l_lm, dc.scale(l_em, config.emlm_weight))
            loss_val = float(total.data)
            if not math.isfinite(loss_val):
                raise StepFailed(f"non-finite loss at step {t}")
            grads = g.backward(total)
            lr = lr_at_step(t, config)
            opt.step(grads, lr)
            rec = StepRecord(t, lr, float(l_lm.data), None if l_em is None else float(l_em.data),
                             loss_val)
            records.append(rec)
            if writer is not None:
                writer.writerow(rec.row())
            if on_step is not None:
                on_step(rec)
            if checkpoint_dir is not None and config.checkpoint_every and t % config.checkpoint_every == 0:
                save_checkpoint(model, Path(checkpoint_dir) / f"step{t:06d}.ckpt")
    except dc.NonFiniteError as e:
        raise StepFailed(f"non-finite value at step {t}: {e}") from e
    finally:
        if fh is not None:
            fh.close()
    return records


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")
