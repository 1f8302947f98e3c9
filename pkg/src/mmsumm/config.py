"""Run configuration: one JSON file with nested sections and dotted overrides."""

from __future__ import annotations

import copy
import dataclasses
import json
import zlib
from pathlib import Path
from typing import Any

import numpy as np

from .adapters import AdapterConfig
from .backbone import BackboneConfig, FeatureDims
from .corpus import SynthSpec
from .selection import SelectorConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "work_dir": "run",
    "synth": dataclasses.asdict(SynthSpec()) | {"episodes": 3400, "split": [0.8824, 0.0588, 0.0588],
                                                 "multimodal_fraction": 0.5},
    "align": {"embed_dim": 64},
    "backbone": dataclasses.asdict(BackboneConfig()) | {"L_max": 256, "dropout": 0.0},
    "features": {"d_i": 16},
    "adapter": dataclasses.asdict(AdapterConfig()) | {"d_B": 32},
    "pretrain": {"episodes": 1000, "total_steps": 3000, "base_lr": 1e-3, "warmup_steps": 200,
                 "label_smoothing": 0.0},
    "train": dataclasses.asdict(TrainConfig()) | {"total_steps": 8000, "emlm_cutoff": 1000,
                                                  "base_lr": 3e-3, "warmup_steps": 200,
                                                  "L_max": 256},
    "variants": ["text", "vanilla", "h3d"],
    "selection": {"K": 6, "methods": ["lead", "last", "middle", "random", "bm25", "tp", "selector"],
                  "bm25_k1": 1.2, "bm25_b": 0.75, "epochs": 4, "lr": 3e-3, "labels": "planted",
                  "selector": dataclasses.asdict(SelectorConfig())},
    "decode": {"beam": 5, "max_len": 40, "block_n": 3, "selection": "all"},
    "eval": {"multi_reference": "max", "qa_pairs": None, "qa_predictions": {}},
    "count_params": {"preset": "bart-large", "d_x": 768, "d_v": 2816, "d_a": 1024, "d_i": 512,
                     "d_B": None, "target_tunable": 15_600_000},
    "check_grads": {"eps": 1e-4, "tol": 1e-4, "seed": 0},
}

# BART-large shape: 12+12 layers, width 1024, 16 heads, FFN 4096, 50265 tokens
BART_LARGE = BackboneConfig(d_m=1024, n_heads=16, d_ffn=4096, enc_layers=12, dec_layers=12,
                            vocab_size=50265, L_max=1024, dropout=0.1)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k.startswith("_"):
            continue  # inline documentation keys
        where = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"{where}: unknown configuration key")
        if isinstance(out[k], dict) and isinstance(v, dict) and k not in ("qa_predictions",):
            out[k] = _merge(out[k], v, where + ".")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_override(cfg: dict, text: str) -> None:
    keys, value = parse_override(text)
    node = cfg
    for i, k in enumerate(keys[:-1]):
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"{'.'.join(keys[:i + 1])}: not a configuration section")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"{'.'.join(keys)}: unknown configuration key")
    node[keys[-1]] = value


class RunConfig:
    """Validated view over the raw configuration tree."""

    def __init__(self, raw: dict):
        self.raw = raw
        self.seed = int(raw["seed"])
        self.work_dir = Path(raw["work_dir"])
        self.synth = self._build("synth", SynthSpec.from_dict)
        self.backbone = self._build("backbone", lambda d: BackboneConfig(**d))
        self.adapter = self._build("adapter", lambda d: AdapterConfig(**d))
        self.train = self._build("train", lambda d: TrainConfig(**d))
        self.pretrain = self._build("pretrain", lambda d: TrainConfig(
            **{k: v for k, v in d.items() if k != "episodes"},
            emlm_cutoff=1, corrupt=False, L_max=self.train.L_max))
        self.selector = self._build("selection.selector", lambda d: SelectorConfig(**d))
        for v in raw["variants"]:
            if v not in ("plain", "text", "vanilla", "h3d"):
                raise ConfigError(f"variants: unknown variant {v!r}")
        sel = raw["selection"]
        if int(sel["K"]) < 1:
            raise ConfigError("selection.K: must be >= 1")
        if sel["labels"] not in ("planted", "pseudo"):
            raise ConfigError("selection.labels: must be 'planted' or 'pseudo'")
        dec = raw["decode"]
        if int(dec["beam"]) < 1:
            raise ConfigError("decode.beam: must be >= 1")
        if dec["block_n"] not in (0,) and int(dec["block_n"]) < 2:
            raise ConfigError("decode.block_n: must be 0 or >= 2")
        if raw["eval"]["multi_reference"] not in ("max", "mean"):
            raise ConfigError("eval.multi_reference: must be 'max' or 'mean'")
        if self.backbone.d_m <= raw["features"]["d_i"]:
            raise ConfigError("features.d_i: must be smaller than backbone.d_m")

    def _build(self, dotted: str, make):
        node = self.raw
        for k in dotted.split("."):
            node = node[k]
        try:
            return make(dict(node))
        except TypeError as e:
            raise ConfigError(f"{dotted}: {e}") from e
        except ValueError as e:
            raise ConfigError(f"{dotted}: {e}") from e

    def feature_dims(self, d_x: int | None = None) -> FeatureDims:
        return FeatureDims(d_x=d_x or self.raw["align"]["embed_dim"], d_v=self.synth.d_v,
                           d_a=self.synth.d_a, d_i=self.raw["features"]["d_i"])

    def seed_for(self, stream: str) -> int:
        """Seed of a named sub-stream (corpus, init, training, selection, ...)."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(stream.encode()),))
        return int(ss.generate_state(1)[0])

    def path(self, *parts: str) -> Path:
        return self.work_dir.joinpath(*parts)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    raw = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        raw = _merge(raw, user)
    for o in overrides or []:
        apply_override(raw, o)
    return RunConfig(raw)
