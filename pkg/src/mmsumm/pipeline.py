"""End-to-end steps over a work directory, shared by the command line and tutorials.

Layout of ``work_dir``::

    corpus/              header.json, episodes.jsonl, vocab.txt, *.ids
    alignment.jsonl      shot -> utterance maps
    features.npz         pooled (X, V, A) per episode
    backbone.ckpt        text-only pretrained backbone
    model_<variant>.ckpt adapter-tuned models, with train_log_<variant>.csv
    selections.jsonl     content selections on the test split
    generations.jsonl    decoded test summaries
    eval.json            metrics; report.json / report.txt rendered from it
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .adapters import AdapterConfig
from .alignment import HashedBagOfWords, align_corpus, load_features, save_features
from .backbone import (BackboneConfig, FeatureDims, Summarizer, Variant, attach_adapters,
                       count_params, decoder_forward, encode, freeze_partition, load_checkpoint,
                       save_checkpoint, solve_bottleneck)
from .config import BART_LARGE, RunConfig
from .corpus import BOS, Corpus, SynthSpec, load_corpus, synthesize_corpus, write_corpus
from .decode import summarize, write_generations, read_generations
from .evaluation import build_report, read_qa_pairs, read_qa_predictions, write_report
from .fusion import assemble_input
from .selection import (SelectionResult, SelectorConfig, bm25_select, init_selector,
                        make_pseudo_labels, planted_labels, positional_select, read_selections,
                        selector_logits, selector_select, tp_select, train_selector,
                        write_selections)
from .training import TrainConfig, corrupt_input, emlm_loss, lm_loss, summary_targets, train

log = logging.getLogger(__name__)


class MissingArtifact(FileNotFoundError):
    pass


def _need(path: Path, what: str, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path} (run `{producer}` first)")
    return path


def embedder_for(cfg: RunConfig) -> HashedBagOfWords:
    return HashedBagOfWords(int(cfg.raw["align"]["embed_dim"]))


# ---------------------------------------------------------------- data

def run_synth(cfg: RunConfig) -> Corpus:
    corpus = synthesize_corpus(cfg.synth, cfg.seed_for("corpus"))
    write_corpus(corpus, cfg.path("corpus"))
    return corpus


def load_run_corpus(cfg: RunConfig) -> Corpus:
    return load_corpus(_need(cfg.path("corpus"), "corpus", "synth"))


def run_align(cfg: RunConfig) -> dict:
    corpus = load_run_corpus(cfg)
    _, feats = align_corpus(corpus, embedder_for(cfg), cfg.path("alignment.jsonl"))
    save_features(feats, cfg.path("features.npz"))
    return feats


def load_run_features(cfg: RunConfig) -> dict:
    return load_features(_need(cfg.path("features.npz"), "features", "align"), np.float32)


# ---------------------------------------------------------------- training

def pretrain_corpus(cfg: RunConfig, vocab) -> Corpus:
    """A text-only companion corpus (every event stated in words) for the backbone."""
    spec = SynthSpec.from_dict(cfg.raw["synth"] | {"episodes": cfg.raw["pretrain"]["episodes"],
                                                    "multimodal_fraction": 0.0,
                                                    "split": [1.0, 0.0, 0.0]})
    pc = synthesize_corpus(spec, cfg.seed_for("pretrain-corpus"))
    unknown = set(pc.vocab.itos) - set(vocab.itos)
    if unknown:
        raise ValueError(f"pretraining corpus has tokens outside the run vocabulary: {sorted(unknown)[:5]}")
    pc.vocab = vocab
    return pc


def run_pretrain(cfg: RunConfig) -> Summarizer:
    corpus = load_run_corpus(cfg)
    bcfg = BackboneConfig(**(cfg.raw["backbone"] | {"vocab_size": len(corpus.vocab)}))
    model = Summarizer(bcfg, None, seed=cfg.seed_for("init"))
    pc = pretrain_corpus(cfg, corpus.vocab)
    tc = TrainConfig(**(vars(cfg.pretrain) | {"seed": cfg.seed_for("pretrain")}))
    train(pc, model, {}, tc, stage="pretrain_backbone", log_path=cfg.path("pretrain_log.csv"))
    save_checkpoint(model, cfg.path("backbone.ckpt"))
    return model


def run_train(cfg: RunConfig, variants=None) -> dict[str, Summarizer]:
    corpus = load_run_corpus(cfg)
    feats = load_run_features(cfg)
    backbone, _ = load_checkpoint(_need(cfg.path("backbone.ckpt"), "backbone checkpoint", "pretrain"))
    tc = TrainConfig(**(vars(cfg.train) | {"seed": cfg.seed_for("training")}))
    dims = cfg.feature_dims()
    out = {}
    for name in variants or cfg.raw["variants"]:
        model = attach_adapters(backbone, cfg.adapter, dims, seed=cfg.seed_for("init"))
        train(corpus, model, feats, tc, stage="adapter_tune", variant=name,
              log_path=cfg.path(f"train_log_{name}.csv"))
        save_checkpoint(model, cfg.path(f"model_{name}.ckpt"), extra={"variant": name})
        out[name] = model
    return out


# ---------------------------------------------------------------- selection

def selector_labels(cfg: RunConfig, corpus: Corpus, episodes) -> dict:
    if cfg.raw["selection"]["labels"] == "planted":
        return {ep.id: planted_labels(ep) for ep in episodes}
    emb = embedder_for(cfg)
    return {ep.id: make_pseudo_labels(ep, ep.summaries[0].tokens, emb) for ep in episodes}


def fit_selector(cfg: RunConfig, corpus: Corpus, feats: dict, mode: str = "multimodal"):
    sel = cfg.raw["selection"]
    labels = selector_labels(cfg, corpus, corpus.split("train"))
    scfg = SelectorConfig(**(sel["selector"] | {"mode": mode}))
    return train_selector(feats, labels, scfg, epochs=int(sel["epochs"]), lr=float(sel["lr"]),
                          seed=cfg.seed_for("selection"))


def run_select(cfg: RunConfig) -> list[tuple[str, SelectionResult]]:
    corpus = load_run_corpus(cfg)
    sel = cfg.raw["selection"]
    K = int(sel["K"])
    rows = []
    feats = None
    selectors = {}
    for method in sel["methods"]:
        base, _, mode = method.partition(":")
        if base == "selector":
            feats = feats if feats is not None else load_run_features(cfg)
            mode = mode or "multimodal"
            selectors[mode] = fit_selector(cfg, corpus, feats, mode)
    sel_seed = cfg.seed_for("selection")
    for i, ep in enumerate(corpus.split("test")):
        for method in sel["methods"]:
            base, _, mode = method.partition(":")
            if base in ("lead", "last", "middle", "random"):
                res = positional_select(ep, base, K, seed=sel_seed + i)
            elif base == "bm25":
                res = bm25_select(ep, K, float(sel["bm25_k1"]), float(sel["bm25_b"]))
            elif base == "tp":
                res = tp_select(ep, K)
            elif base == "oracle":
                res = SelectionResult("oracle", np.flatnonzero(planted_labels(ep)).tolist()[:K])
            elif base == "selector":
                res = selector_select(feats[ep.id], selectors[mode or "multimodal"], K)
            else:
                raise ValueError(f"unknown selection method {method!r}")
            if base == "selector" and mode:
                res = SelectionResult(method, res.indices, res.scores)
            rows.append((ep.id, res))
    write_selections(rows, cfg.path("selections.jsonl"))
    return rows


# ---------------------------------------------------------------- decoding & evaluation

def decode_episode(model: Summarizer, ep, vocab, feats, variant: Variant, selected,
                   beam: int, max_len: int, block_n: int, L_max: int) -> list[str]:
    inp = assemble_input(selected, ep, vocab, L_max)
    hyp = summarize(model, inp, feats if variant.multimodal else None, variant,
                    B=beam, max_len=max_len, block_n=block_n)
    return vocab.decode(hyp.output)


def run_decode(cfg: RunConfig, variants=None) -> list[dict]:
    corpus = load_run_corpus(cfg)
    feats = load_run_features(cfg)
    dec = cfg.raw["decode"]
    chosen = None
    if dec["selection"] != "all":
        picks = read_selections(_need(cfg.path("selections.jsonl"), "selections", "select"))
        chosen = {eid: r.indices for eid, r in picks if r.method == dec["selection"]}
    rows = []
    for name in variants or cfg.raw["variants"]:
        model, _ = load_checkpoint(_need(cfg.path(f"model_{name}.ckpt"), f"{name} model", "train"))
        variant = Variant.named(name)
        for ep in corpus.split("test"):
            selected = chosen[ep.id] if chosen is not None else range(ep.n_utterances)
            toks = decode_episode(model, ep, corpus.vocab, feats[ep.id], variant, selected,
                                  int(dec["beam"]), int(dec["max_len"]), int(dec["block_n"]),
                                  cfg.train.L_max)
            rows.append({"episode_id": ep.id, "method": name, "tokens": toks})
    write_generations(rows, cfg.path("generations.jsonl"))
    return rows


def run_eval(cfg: RunConfig) -> dict:
    corpus = load_run_corpus(cfg)
    gens = read_generations(_need(cfg.path("generations.jsonl"), "generations", "decode"))
    selections = None
    if cfg.path("selections.jsonl").exists():
        selections = {}
        for eid, r in read_selections(cfg.path("selections.jsonl")):
            selections.setdefault(r.method, {})[eid] = r.indices
    ev = cfg.raw["eval"]
    qa_pairs = read_qa_pairs(ev["qa_pairs"]) if ev["qa_pairs"] else None
    qa_preds = {m: read_qa_predictions(p) for m, p in (ev["qa_predictions"] or {}).items()}
    report = build_report(corpus, gens, selections, qa_pairs, qa_preds,
                          multi_reference=ev["multi_reference"])
    out = report.to_dict()
    cfg.path("eval.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out


def run_report(cfg: RunConfig) -> str:
    from .evaluation import EvalReport

    data = json.loads(_need(cfg.path("eval.json"), "evaluation", "eval").read_text())
    report = EvalReport(data["methods"], data.get("skipped", {}))
    write_report(report, cfg.work_dir)
    return report.render()


# ---------------------------------------------------------------- checks

def parameter_table(cfg: RunConfig) -> dict:
    """Closed-form accounting plus a brute-force tally when the model is small."""
    cp = cfg.raw["count_params"]
    if cp["preset"] == "bart-large":
        bcfg = BART_LARGE
        feats = FeatureDims(d_x=cp["d_x"], d_v=cp["d_v"], d_a=cp["d_a"], d_i=cp["d_i"])
    else:
        bcfg = cfg.backbone
        feats = cfg.feature_dims()
    d_B = cp["d_B"]
    if d_B is None:
        d_B = solve_bottleneck(bcfg, feats, int(cp["target_tunable"]))
    counts = count_params(bcfg, AdapterConfig(d_B=d_B, tau=cfg.adapter.tau), feats)
    counts["d_B"] = d_B
    return counts


def render_parameter_table(counts: dict) -> str:
    rows = [("embeddings", "embeddings"), ("encoder", "encoder layers"),
            ("decoder", "decoder layers"), ("backbone", "backbone total"),
            ("adapters", "adapters"), ("fusion", "multimodal projection"),
            ("interaction", "interaction matrix"), ("total", "total"), ("tunable", "tunable")]
    lines = [f"{label:<24}{counts[k]:>14,d}" for k, label in rows]
    lines.append(f"{'bottleneck d_B':<24}{counts['d_B']:>14d}")
    lines.append(f"{'tunable fraction':<24}{100 * counts['fraction']:>13.3f}%")
    lines.append(f"{'tunable / backbone':<24}{100 * counts['tunable'] / counts['backbone']:>13.3f}%")
    return "\n".join(lines)


GRADCHECK_BACKBONE = BackboneConfig(d_m=16, n_heads=2, d_ffn=24, enc_layers=2, dec_layers=2,
                                    vocab_size=40, L_max=64, dropout=0.0)


def gradient_check(seed: int = 0, eps: float = 1e-4, tol: float = 1e-4) -> dict:
    """Finite differences over every tunable leaf of a toy multimodal model
    (fusion, interaction, encoder/decoder adapters) and of the selector."""
    rng = np.random.default_rng(seed)
    spec = SynthSpec(episodes=1, N_range=(4, 4), vocab_size=35, d_v=6, d_a=5, event_count=2,
                     n_characters=3, n_actions=3, tokens_range=(2, 3))
    corpus = synthesize_corpus(spec, seed)
    ep = corpus.episodes[0]
    emb = HashedBagOfWords(8)
    _, feats = align_corpus(corpus, emb)
    X, V, A = feats[ep.id]
    feats = (X, V, A)
    dims = FeatureDims(d_x=8, d_v=6, d_a=5, d_i=6)
    bcfg = BackboneConfig(**(vars(GRADCHECK_BACKBONE) | {"vocab_size": len(corpus.vocab)}))
    model = Summarizer(bcfg, AdapterConfig(d_B=4, tau=0.5), dims, seed=seed, dtype=np.float64)
    freeze_partition(model, "adapter_tune")
    # move adapters off their identity initialisation so every path carries gradient
    for t in model.leaves(tunable=True):
        if t.name.endswith((".W_u", ".b_u", ".ln_b")):
            t.data = rng.normal(0.0, 0.3, t.shape)
        elif t.name.endswith(".ln_g"):
            t.data = 1.0 + rng.normal(0.0, 0.1, t.shape)
    variant = Variant.named("h3d")
    inp = assemble_input(range(ep.n_utterances), ep, corpus.vocab, bcfg.L_max)
    corr = corrupt_input(inp, ep, np.random.default_rng(seed), 0.25)
    target = summary_targets(ep.summaries[0].tokens, corpus.vocab, bcfg.L_max)
    prefix = np.concatenate([[BOS], target[:-1]])

    def model_loss():
        enc = encode(model, inp, feats, variant, corr.corrupted_ids)
        logits = decoder_forward(model, prefix, enc, True)
        return dc.add(lm_loss(logits, target, 0.1), emlm_loss(enc, corr.masked, inp.token_ids, model))

    sp = init_selector(SelectorConfig(d_m=8, n_heads=2, d_ffn=12, layers=2, d_i=4, max_len=16),
                       8, 6, 5, seed=seed)
    y = planted_labels(ep).astype(np.float64)

    def selector_loss():
        return dc.bce_with_logits(selector_logits(sp, feats), y)

    rep_model = dc.finite_diff_check(model_loss, model.leaves(tunable=True), eps, tol)
    rep_sel = dc.finite_diff_check(selector_loss, sp.leaves(), eps, tol)
    per_leaf = rep_model["per_leaf"] | {f"selector.{k}": v for k, v in rep_sel["per_leaf"].items()}
    worst = max(per_leaf, key=per_leaf.get)
    return {"max_rel_error": per_leaf[worst], "worst_leaf": worst,
            "n_checked": rep_model["n_checked"] + rep_sel["n_checked"],
            "per_leaf": per_leaf, "ok": per_leaf[worst] < tol}
