"""ROUGE, character (BoC) and relation (BoR) overlap, QA scoring and report tables."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.feature_extraction.text import ENGLISH_STOP_WORDS

log = logging.getLogger(__name__)


def _prf(overlap: float, n_pred: int, n_gold: int) -> dict:
    p = overlap / n_pred if n_pred else 0.0
    r = overlap / n_gold if n_gold else 0.0
    # count form of the harmonic mean: one rounding, so f1 <= max(p, r) holds exactly
    f = 2 * overlap / (n_pred + n_gold) if overlap else 0.0
    return {"p": p, "r": r, "f1": f}


def _best(scores: list[dict], aggregate: str = "max") -> dict:
    if aggregate == "mean":
        return {k: float(np.mean([s[k] for s in scores])) for k in ("p", "r", "f1")}
    if aggregate != "max":
        raise ValueError(f"unknown multi-reference aggregate {aggregate!r}")
    # first reference wins ties on F1
    best = scores[0]
    for s in scores[1:]:
        if s["f1"] > best["f1"]:
            best = s
    return best


def _as_refs(reference_set) -> list[list[str]]:
    refs = list(reference_set)
    if refs and isinstance(refs[0], str):
        return [refs]
    return [list(r) for r in refs]


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference_set, n: int = 1, aggregate: str = "max") -> dict:
    """Clipped n-gram overlap; max-F1 over the references."""
    if n not in (1, 2):
        raise ValueError("ROUGE-N is defined here for n in {1, 2}")
    refs = _as_refs(reference_set)
    if not refs:
        raise ValueError("no reference summaries")
    cand = ngrams(list(candidate), n)
    out = []
    for ref in refs:
        rg = ngrams(ref, n)
        out.append(_prf(sum((cand & rg).values()), sum(cand.values()), sum(rg.values())))
    return _best(out, aggregate)


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference_set, aggregate: str = "max") -> dict:
    refs = _as_refs(reference_set)
    if not refs:
        raise ValueError("no reference summaries")
    cand = list(candidate)
    return _best([_prf(lcs_length(cand, r), len(cand), len(r)) for r in refs], aggregate)


# ---------------------------------------------------------------- entities

def _first_names(characters: Iterable[str]) -> dict[str, str]:
    out = {}
    for c in characters:
        parts = c.split()
        if parts:
            out[parts[0].lower()] = c
    if not out:
        raise ValueError("character list is empty")
    return out


def mentioned(tokens: Sequence[str], characters: Iterable[str]) -> set[str]:
    names = _first_names(characters)
    return {names[t.lower()] for t in tokens if t.lower() in names}


def split_sentences(tokens: Sequence[str]) -> list[list[str]]:
    sents, cur = [], []
    for t in tokens:
        if t == ".":
            sents.append(cur)
            cur = []
        else:
            cur.append(t)
    if cur:
        sents.append(cur)
    return sents


def relations(tokens: Sequence[str], characters: Iterable[str]) -> set[frozenset]:
    characters = list(characters)
    out = set()
    for s in split_sentences(tokens):
        for a, b in combinations(sorted(mentioned(s, characters)), 2):
            out.add(frozenset((a, b)))
    return out


def boc_metrics(generated: Sequence[str], reference: Sequence[str], characters) -> dict:
    characters = list(characters)
    g, r = mentioned(generated, characters), mentioned(reference, characters)
    return _prf(len(g & r), len(g), len(r))


def bor_metrics(generated: Sequence[str], reference: Sequence[str], characters) -> dict:
    characters = list(characters)
    g, r = relations(generated, characters), relations(reference, characters)
    return _prf(len(g & r), len(g), len(r))


# ---------------------------------------------------------------- QA scoring

ANSWER_TYPES = ("named_entity", "noun")


@dataclass
class QAPair:
    episode_id: str
    question: list[str]
    gold_answer: list[str]
    answer_type: str

    def __post_init__(self):
        if isinstance(self.question, str):
            self.question = self.question.split()
        if isinstance(self.gold_answer, str):
            self.gold_answer = self.gold_answer.split()
        if not self.gold_answer:
            raise ValueError("gold answer must be non-empty")
        if self.answer_type not in ANSWER_TYPES:
            raise ValueError(f"unknown answer type {self.answer_type!r}")

    @property
    def key(self) -> tuple[str, str]:
        return self.episode_id, " ".join(self.question)


@dataclass
class QAPrediction:
    episode_id: str
    question: list[str]
    predicted_answer: list[str]
    entailment_score: float | None = None

    def __post_init__(self):
        if isinstance(self.question, str):
            self.question = self.question.split()
        if isinstance(self.predicted_answer, str):
            self.predicted_answer = self.predicted_answer.split()

    @property
    def key(self) -> tuple[str, str]:
        return self.episode_id, " ".join(self.question)


def _content_tokens(tokens: Sequence[str]) -> set[str]:
    words = {t.lower().strip(".,?!;:'\"") for t in tokens}
    return {w for w in words if w and w not in ENGLISH_STOP_WORDS}


def answer_matches(predicted: Sequence[str], gold: Sequence[str]) -> bool:
    """Partial overlap after lower-casing and stopword removal."""
    return bool(_content_tokens(predicted) & _content_tokens(gold))


def qa_accuracy(pairs: Sequence[QAPair], predictions: Sequence[QAPrediction], mode: str) -> float:
    if mode not in ANSWER_TYPES:
        raise ValueError(f"unknown QA mode {mode!r}")
    pairs = [q for q in pairs if q.answer_type == mode]
    if not pairs:
        return 0.0
    by_key = {p.key: p for p in predictions}
    correct = 0
    for q in pairs:
        pred = by_key.get(q.key)
        if pred is None:
            log.warning("no prediction for question %r of episode %s", " ".join(q.question), q.episode_id)
            continue
        if mode == "named_entity":
            correct += answer_matches(pred.predicted_answer, q.gold_answer)
        else:
            score = pred.entailment_score
            if score is None:
                log.warning("missing entailment score for %s", q.key)
                continue
            correct += score > 0.5
    return correct / len(pairs)


def read_qa_pairs(path: str | Path) -> list[QAPair]:
    return [QAPair(**d) for d in _read_jsonl(path)]


def read_qa_predictions(path: str | Path) -> list[QAPrediction]:
    return [QAPrediction(**d) for d in _read_jsonl(path)]


def _read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------- reporting

METRIC_ORDER = ("rouge1", "rouge2", "rougeL", "boc", "bor")


@dataclass
class EvalReport:
    methods: dict[str, dict] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"methods": self.methods, "skipped": self.skipped}

    def render(self) -> str:
        cols = ["R-1", "R-2", "R-L", "BoC-p", "BoC-r", "BoR-p", "BoR-r", "QA-NE", "QA-NN",
                "Sel-F1", "n"]
        name_w = max([len("method")] + [len(m) for m in self.methods])
        lines = ["method".ljust(name_w) + "".join(c.rjust(8) for c in cols)]
        for name, m in self.methods.items():
            def get(k, f):
                return (m.get(k) or {}).get(f)

            vals = [get("rouge1", "f1"), get("rouge2", "f1"), get("rougeL", "f1"),
                    get("boc", "p"), get("boc", "r"), get("bor", "p"), get("bor", "r"),
                    m.get("qa_acc_ne"), m.get("qa_acc_nn"),
                    (m.get("selector") or {}).get("f1")]
            cells = ["-" if v is None else f"{100 * v:.2f}" for v in vals]
            cells.append(str(m["episodes"]))
            lines.append(name.ljust(name_w) + "".join(c.rjust(8) for c in cells))
        for name, n in self.skipped.items():
            if n:
                lines.append(f"# {name}: {n} test episode(s) had no generation and were skipped")
        return "\n".join(lines) + "\n"


def _mean_prf(rows: list[dict]) -> dict:
    return {k: float(np.mean([r[k] for r in rows])) for k in ("p", "r", "f1")}


def build_report(corpus, generations: Sequence[dict], selections=None,
                 qa_pairs: Sequence[QAPair] | None = None,
                 qa_predictions: dict[str, Sequence[QAPrediction]] | None = None,
                 split: str = "test", multi_reference: str = "max") -> EvalReport:
    """Unweighted per-episode means for every method found in ``generations``.

    ``generations`` rows carry ``episode_id``, ``method`` and string ``tokens``.
    ``selections`` optionally maps a method name to ``{episode_id: indices}``
    scored against the planted salience of each episode. ``qa_predictions``
    maps method name to predictions read from an external QA system.
    """
    episodes = corpus.split(split)
    if not episodes:
        raise ValueError(f"the {split} split is empty")
    by_method: dict[str, dict[str, list[str]]] = {}
    for row in generations:
        by_method.setdefault(row["method"], {})[row["episode_id"]] = list(row["tokens"])
    report = EvalReport()
    for method in sorted(by_method):
        gens = by_method[method]
        per = {k: [] for k in METRIC_ORDER}
        missing = 0
        for ep in episodes:
            if ep.id not in gens:
                missing += 1
                continue
            cand = gens[ep.id]
            refs = [s.tokens for s in ep.summaries]
            agg = multi_reference
            per["rouge1"].append(rouge_n(cand, refs, 1, agg))
            per["rouge2"].append(rouge_n(cand, refs, 2, agg))
            per["rougeL"].append(rouge_l(cand, refs, agg))
            if ep.characters:
                per["boc"].append(_best([boc_metrics(cand, r, ep.characters) for r in refs], agg))
                per["bor"].append(_best([bor_metrics(cand, r, ep.characters) for r in refs], agg))
        if missing:
            log.warning("%s: %d test episodes without a generation", method, missing)
        n = len(per["rouge1"])
        if n == 0:
            report.skipped[method] = missing
            continue
        entry = {k: (_mean_prf(v) if v else {"p": 0.0, "r": 0.0, "f1": 0.0}) for k, v in per.items()}
        entry["episodes"] = n
        if qa_pairs is not None and qa_predictions and method in qa_predictions:
            entry["qa_acc_ne"] = qa_accuracy(qa_pairs, qa_predictions[method], "named_entity")
            entry["qa_acc_nn"] = qa_accuracy(qa_pairs, qa_predictions[method], "noun")
        report.methods[method] = entry
        report.skipped[method] = missing
    if selections:
        from .selection import planted_labels, selection_prf

        for method, chosen in sorted(selections.items()):
            rows = [selection_prf(chosen[ep.id], planted_labels(ep))
                    for ep in episodes if ep.id in chosen and ep.planted]
            if not rows:
                continue
            prf = {"p": float(np.mean([r["precision"] for r in rows])),
                   "r": float(np.mean([r["recall"] for r in rows])),
                   "f1": float(np.mean([r["f1"] for r in rows]))}
            # selection-only methods have no summary metrics
            report.methods.setdefault(method, {"episodes": len(rows)})
            report.methods[method]["selector"] = prf
    return report


def write_report(report: EvalReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(report.render())
