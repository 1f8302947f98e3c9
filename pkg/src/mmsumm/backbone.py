"""Toy encoder-decoder transformer with tied LM head, adapters and multimodal input.

All parameters live in one flat ``{name: Tensor}`` map. Names are grouped by
prefix: ``fusion.``, ``interaction.`` and ``adapter.`` leaves form the tunable
partition under adapter tuning; everything else is the frozen backbone.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import adapters as ad
from . import diffcore as dc
from .fusion import (EncoderInput, FusionParams, InteractionParams, fusion_shapes,
                     interaction_shapes, interaction_matrix, project_multimodal)

NEG = -1e9
TUNABLE_GROUPS = ("fusion", "interaction", "adapter")


@dataclass
class BackboneConfig:
    d_m: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    vocab_size: int = 128
    L_max: int = 1024
    dropout: float = 0.1

    def __post_init__(self):
        for k in ("d_m", "n_heads", "d_ffn", "enc_layers", "dec_layers", "vocab_size", "L_max"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.d_m % self.n_heads:
            raise ValueError("d_m must be divisible by n_heads")


@dataclass
class FeatureDims:
    d_x: int = 64
    d_v: int = 12
    d_a: int = 8
    d_i: int = 16


# ---------------------------------------------------------------- shapes & counts

def _attn_shapes(d: int) -> dict[str, tuple]:
    return {"wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
            "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,)}


def _ffn_shapes(d: int, f: int) -> dict[str, tuple]:
    return {"w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,)}


def _ln_shapes(d: int) -> dict[str, tuple]:
    return {"g": (d,), "b": (d,)}


def _prefixed(prefix: str, shapes: dict) -> dict[str, tuple]:
    return {f"{prefix}.{k}": v for k, v in shapes.items()}


def param_shapes(config: BackboneConfig, adapter: ad.AdapterConfig | None = None,
                 feats: FeatureDims | None = None) -> dict[str, tuple]:
    """Every parameter leaf and its shape; the single source for init and counts."""
    d, f = config.d_m, config.d_ffn
    s: dict[str, tuple] = {
        "tok_emb": (config.vocab_size, d),
        "enc_pos": (config.L_max, d),
        "dec_pos": (config.L_max, d),
        **_prefixed("enc_emb_ln", _ln_shapes(d)),
        **_prefixed("dec_emb_ln", _ln_shapes(d)),
    }
    for l in range(config.enc_layers):
        s.update(_prefixed(f"enc.{l}.self", _attn_shapes(d)))
        s.update(_prefixed(f"enc.{l}.ln1", _ln_shapes(d)))
        s.update(_prefixed(f"enc.{l}.ffn", _ffn_shapes(d, f)))
        s.update(_prefixed(f"enc.{l}.ln2", _ln_shapes(d)))
    for l in range(config.dec_layers):
        s.update(_prefixed(f"dec.{l}.self", _attn_shapes(d)))
        s.update(_prefixed(f"dec.{l}.ln1", _ln_shapes(d)))
        s.update(_prefixed(f"dec.{l}.cross", _attn_shapes(d)))
        s.update(_prefixed(f"dec.{l}.ln2", _ln_shapes(d)))
        s.update(_prefixed(f"dec.{l}.ffn", _ffn_shapes(d, f)))
        s.update(_prefixed(f"dec.{l}.ln3", _ln_shapes(d)))
    if adapter is not None:
        for side, n in (("enc", config.enc_layers), ("dec", config.dec_layers)):
            for l in range(n):
                s.update(_prefixed(f"adapter.{side}.{l}", ad.adapter_shapes(d, adapter.d_B)))
        feats = feats or FeatureDims()
        s.update(_prefixed("fusion", fusion_shapes(feats.d_x, feats.d_v, feats.d_a, feats.d_i, d)))
        s.update(_prefixed("interaction", interaction_shapes(d)))
    return s


def group_of(name: str) -> str:
    head = name.split(".", 1)[0]
    return head if head in TUNABLE_GROUPS else "backbone"


def count_params(config: BackboneConfig, adapter: ad.AdapterConfig | None = None,
                 feats: FeatureDims | None = None, mode: str = "adapter_tune") -> dict:
    """Closed-form parameter counts per component and the tunable fraction."""
    d, f, V, L = config.d_m, config.d_ffn, config.vocab_size, config.L_max
    attn = 4 * d * d + 4 * d
    ffn = 2 * d * f + f + d
    ln = 2 * d
    enc_layer = attn + ffn + 2 * ln
    dec_layer = 2 * attn + ffn + 3 * ln
    counts = {
        "embeddings": V * d + 2 * L * d + 2 * ln,
        "encoder": config.enc_layers * enc_layer,
        "decoder": config.dec_layers * dec_layer,
        "adapters": 0, "fusion": 0, "interaction": 0,
    }
    if adapter is not None:
        b = adapter.d_B
        feats = feats or FeatureDims()
        counts["adapters"] = (config.enc_layers + config.dec_layers) * (2 * d * b + b + d + 2 * b)
        counts["fusion"] = (feats.d_x + feats.d_v + feats.d_a) * feats.d_i + 3 * feats.d_i * d
        counts["interaction"] = 2 * d * d + 2 * d
    backbone = counts["embeddings"] + counts["encoder"] + counts["decoder"]
    added = counts["adapters"] + counts["fusion"] + counts["interaction"]
    total = backbone + added
    tunable = added if (mode == "adapter_tune" and adapter is not None) else total
    return {**counts, "backbone": backbone, "total": total, "tunable": tunable,
            "fraction": tunable / total}


def solve_bottleneck(config: BackboneConfig, feats: FeatureDims, target_tunable: int) -> int:
    """Smallest d_B whose adapter-tuning count reaches ``target_tunable``."""
    lo, hi = 1, config.d_m - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if count_params(config, ad.AdapterConfig(d_B=mid), feats)["tunable"] < target_tunable:
            lo = mid + 1
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------- model container

class Summarizer:
    """Parameters plus configuration for the adapter-augmented seq2seq model."""

    def __init__(self, config: BackboneConfig, adapter: ad.AdapterConfig | None = None,
                 feats: FeatureDims | None = None, seed: int = 0, dtype=np.float32):
        self.config = config
        self.adapter = adapter
        self.feats = feats or FeatureDims()
        self.dtype = np.dtype(dtype)
        self.params: dict[str, dc.Tensor] = {}
        rng = np.random.default_rng(seed)
        shapes = param_shapes(config, adapter, self.feats)
        for name in sorted(shapes):
            self.params[name] = dc.Tensor(self._init(name, shapes[name], rng), name=name)
        self.mode = "full_finetune"
        freeze_partition(self, "full_finetune")

    def _init(self, name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
        dt = self.dtype
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("adapter."):
            # per-leaf init so the adapter starts as identity
            if leaf in ("W_u", "b_u", "ln_b"):
                return np.zeros(shape, dt)
            if leaf == "ln_g":
                return np.ones(shape, dt)
            bound = 1.0 / math.sqrt(self.config.d_m)
            return rng.uniform(-bound, bound, shape).astype(dt)
        if leaf == "g":
            return np.ones(shape, dt)
        if len(shape) == 1:
            return np.zeros(shape, dt)
        if name in ("tok_emb", "enc_pos", "dec_pos"):
            return (rng.standard_normal(shape) / math.sqrt(shape[1])).astype(dt)
        bound = 1.0 / math.sqrt(shape[0])
        if name.startswith("fusion."):
            bound = math.sqrt(6.0 / shape[0])
        return rng.uniform(-bound, bound, shape).astype(dt)

    # convenience views
    def __getitem__(self, name: str) -> dc.Tensor:
        return self.params[name]

    def fusion_params(self) -> FusionParams:
        p = self.params
        return FusionParams(p["fusion.W_x"], p["fusion.W_v"], p["fusion.W_a"], p["fusion.W_m"])

    def interaction_params(self) -> InteractionParams:
        p = self.params
        return InteractionParams(p["interaction.W_i"], p["interaction.W_j"],
                                 p["interaction.b_i"], p["interaction.b_j"])

    def adapter_params(self, side: str, layer: int) -> ad.AdapterParams:
        p = self.params
        pre = f"adapter.{side}.{layer}."
        return ad.AdapterParams(*(p[pre + k] for k in ("W_d", "b_d", "W_u", "b_u", "ln_g", "ln_b")))

    def leaves(self, group: str | None = None, tunable: bool | None = None) -> list[dc.Tensor]:
        out = []
        for name in sorted(self.params):
            t = self.params[name]
            if group is not None and group_of(name) != group:
                continue
            if tunable is not None and t.tunable != tunable:
                continue
            out.append(t)
        return out

    def tally(self) -> dict:
        """Brute-force leaf-by-leaf count of total and tunable scalars."""
        total = sum(t.data.size for t in self.params.values())
        tunable = sum(t.data.size for t in self.params.values() if t.tunable)
        return {"total": total, "tunable": tunable, "fraction": tunable / total}

    def checksum(self, group: str | None = None, tunable: bool | None = None) -> str:
        h = hashlib.sha256()
        for t in self.leaves(group, tunable):
            h.update(t.name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "Summarizer":
        dtype = np.dtype(dtype)
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        self.dtype = dtype
        return self


def freeze_partition(model: Summarizer, mode: str) -> Summarizer:
    """Label leaves: ``adapter_tune`` -> only fusion/interaction/adapter tunable."""
    if mode not in ("full_finetune", "adapter_tune"):
        raise ValueError(f"unknown partition mode {mode!r}")
    for name, t in model.params.items():
        t.tunable = mode == "full_finetune" or group_of(name) != "backbone"
        t.requires_grad = t.tunable
    model.mode = mode
    return model


# ---------------------------------------------------------------- layers

def attention(x: dc.Tensor, mem: dc.Tensor, p: dict, prefix: str, n_heads: int,
              mask: np.ndarray | None = None) -> dc.Tensor:
    """Multi-head attention of queries ``x`` (T x d) over ``mem`` (S x d)."""
    T, d = x.shape
    S = mem.shape[0]
    dh = d // n_heads

    def heads(t, n):
        return dc.transpose(dc.reshape(t, (n, n_heads, dh)), (1, 0, 2))

    q = heads(dc.add(dc.matmul(x, p[prefix + ".wq"]), p[prefix + ".bq"]), T)
    k = heads(dc.add(dc.matmul(mem, p[prefix + ".wk"]), p[prefix + ".bk"]), S)
    v = heads(dc.add(dc.matmul(mem, p[prefix + ".wv"]), p[prefix + ".bv"]), S)
    scores = dc.scale(dc.matmul(q, dc.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = dc.add(scores, dc.Tensor(mask.astype(scores.dtype)))
    att = dc.softmax(scores, axis=-1)
    out = dc.reshape(dc.transpose(dc.matmul(att, v), (1, 0, 2)), (T, d))
    return dc.add(dc.matmul(out, p[prefix + ".wo"]), p[prefix + ".bo"])


def ffn(x: dc.Tensor, p: dict, prefix: str) -> dc.Tensor:
    h = dc.relu(dc.add(dc.matmul(x, p[prefix + ".w1"]), p[prefix + ".b1"]))
    return dc.add(dc.matmul(h, p[prefix + ".w2"]), p[prefix + ".b2"])


def ln(x: dc.Tensor, p: dict, prefix: str) -> dc.Tensor:
    return dc.layer_norm(x, p[prefix + ".g"], p[prefix + ".b"])


def encoder_layer(x: dc.Tensor, p: dict, prefix: str, n_heads: int,
                  rate: float = 0.0, rng=None) -> dc.Tensor:
    """Post-norm block: self-attention, add&norm, FFN, add&norm."""
    x = ln(dc.add(x, dc.dropout(attention(x, x, p, prefix + ".self", n_heads), rate, rng)),
           p, prefix + ".ln1")
    return ln(dc.add(x, dc.dropout(ffn(x, p, prefix + ".ffn"), rate, rng)), p, prefix + ".ln2")


def _causal_mask(T: int) -> np.ndarray:
    return np.triu(np.full((T, T), NEG), k=1)


# ---------------------------------------------------------------- forward passes

def multimodal_vectors(model: Summarizer, feats, utterances, modality: str = "multimodal"):
    """Fused ``m`` rows for the given utterance indices of ``(X, V, A)`` arrays."""
    X, V, A = feats
    idx = np.asarray(utterances, dtype=np.int64)
    return project_multimodal(X[idx], V[idx], A[idx], model.fusion_params(), modality)


def input_embeddings(model: Summarizer, inp: EncoderInput, token_ids: np.ndarray,
                     m: dc.Tensor | None) -> dc.Tensor:
    """Token + position embeddings; global slots (EOS placeholders) also get ``m_i``."""
    p = model.params
    T = len(token_ids)
    emb = dc.embedding(p["tok_emb"], token_ids)
    if m is not None:
        emb = dc.scatter_add_rows(emb, m, np.asarray(inp.global_positions, dtype=np.int64))
    emb = dc.add(emb, dc.take(p["enc_pos"], np.arange(T), axis=0))
    return ln(emb, p, "enc_emb_ln")


def encoder_forward(model: Summarizer, inp: EncoderInput, m: dc.Tensor | None = None,
                    H: dc.Tensor | None = None, adapter_kind: str = "none",
                    token_ids: np.ndarray | None = None, rng=None) -> dc.Tensor:
    """Encoder hidden states (T x d_m).

    ``m`` (N x d_m) switches on multimodal mode, adding ``m_i`` to the EOS
    placeholder embedding at each global slot. ``adapter_kind`` is ``none``, ``vanilla`` or
    ``hierarchical`` (the latter needs ``H``). ``token_ids`` overrides the
    input ids, e.g. with a corrupted copy.
    """
    cfg = model.config
    ids = inp.token_ids if token_ids is None else np.asarray(token_ids)
    if len(ids) > cfg.L_max:
        raise ValueError(f"input length {len(ids)} exceeds L_max={cfg.L_max}")
    if adapter_kind not in ("none", "vanilla", "hierarchical"):
        raise ValueError(f"unknown adapter kind {adapter_kind!r}")
    if adapter_kind != "none" and model.adapter is None:
        raise ValueError("model was built without adapters")
    weights = None
    if adapter_kind == "hierarchical":
        if H is None:
            raise ValueError("hierarchical adapters need the interaction matrix H")
        weights = ad.context_weights(H, model.adapter.tau)
    rate = cfg.dropout if rng is not None else 0.0
    p = model.params
    x = dc.dropout(input_embeddings(model, inp, ids, m), rate, rng)
    for l in range(cfg.enc_layers):
        x = encoder_layer(x, p, f"enc.{l}", cfg.n_heads, rate, rng)
        if adapter_kind == "vanilla":
            x = ad.vanilla_forward(x, model.adapter_params("enc", l))
        elif adapter_kind == "hierarchical":
            x = ad.hierarchical_forward(x, inp.global_positions, H,
                                        model.adapter_params("enc", l), model.adapter.tau,
                                        weights=weights)
    return x


def decoder_forward(model: Summarizer, prefix_ids, enc: dc.Tensor,
                    use_adapters: bool = False, rng=None, return_hidden: bool = False):
    """Logits (t x V) for every prefix position; causal in the prefix."""
    cfg = model.config
    p = model.params
    ids = np.asarray(prefix_ids, dtype=np.int64)
    t = len(ids)
    if t > cfg.L_max:
        raise ValueError(f"prefix length {t} exceeds L_max={cfg.L_max}")
    rate = cfg.dropout if rng is not None else 0.0
    x = dc.add(dc.embedding(p["tok_emb"], ids), dc.take(p["dec_pos"], np.arange(t), axis=0))
    x = dc.dropout(ln(x, p, "dec_emb_ln"), rate, rng)
    mask = _causal_mask(t)
    for l in range(cfg.dec_layers):
        pre = f"dec.{l}"
        x = ln(dc.add(x, dc.dropout(attention(x, x, p, pre + ".self", cfg.n_heads, mask), rate, rng)),
               p, pre + ".ln1")
        x = ln(dc.add(x, dc.dropout(attention(x, enc, p, pre + ".cross", cfg.n_heads), rate, rng)),
               p, pre + ".ln2")
        x = ln(dc.add(x, dc.dropout(ffn(x, p, pre + ".ffn"), rate, rng)), p, pre + ".ln3")
        if use_adapters:
            x = ad.vanilla_forward(x, model.adapter_params("dec", l))
    logits = lm_head(model, x)
    return (logits, x) if return_hidden else logits


def lm_head(model: Summarizer, h: dc.Tensor) -> dc.Tensor:
    """Projection onto the vocabulary with the tied token-embedding matrix."""
    return dc.matmul(h, dc.transpose(model.params["tok_emb"], (1, 0)))


@dataclass
class Variant:
    """How a model consumes an episode: modality feed and adapter placement."""
    name: str = "h3d"
    multimodal: bool = True
    encoder_adapter: str = "hierarchical"   # none | vanilla | hierarchical
    decoder_adapter: bool = True
    modality: str = "multimodal"

    @classmethod
    def named(cls, name: str) -> "Variant":
        presets = {
            "plain": cls("plain", False, "none", False, "multimodal"),
            "text": cls("text", False, "vanilla", True, "multimodal"),
            "vanilla": cls("vanilla", True, "vanilla", True, "multimodal"),
            "h3d": cls("h3d", True, "hierarchical", True, "multimodal"),
        }
        if name not in presets:
            raise ValueError(f"unknown model variant {name!r}; choose from {sorted(presets)}")
        return presets[name]


def encode(model: Summarizer, inp: EncoderInput, feats, variant: Variant,
           token_ids=None, rng=None) -> dc.Tensor:
    """Full encoder pass for a variant, computing ``m`` and ``H`` as needed."""
    m = H = None
    if variant.multimodal:
        m = multimodal_vectors(model, feats, inp.utterances, variant.modality)
        if variant.encoder_adapter == "hierarchical":
            H = interaction_matrix(m, model.interaction_params())
    return encoder_forward(model, inp, m, H, variant.encoder_adapter, token_ids, rng)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MMSM"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Summarizer, path: str | Path, extra: dict | None = None) -> None:
    meta = {"backbone": asdict(model.config),
            "adapter": None if model.adapter is None else asdict(model.adapter),
            "feats": asdict(model.feats), "mode": model.mode, "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in sorted(model.params):
            arr = model.params[name].data
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path: str | Path) -> tuple[Summarizer, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", data, 8)
    meta = json.loads(data[12:12 + n].decode("utf-8"))
    off = 12 + n
    arrays = {}
    while off < len(data):
        (ln_,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + ln_].decode("utf-8")
        off += ln_
        tag, rank = struct.unpack_from("<BI", data, off)
        off += 5
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        dt = _TAG_DTYPES[tag]
        size = int(np.prod(shape)) * dt.itemsize
        arrays[name] = np.frombuffer(data[off:off + size], dtype=dt).reshape(shape).copy()
        off += size
    cfg = BackboneConfig(**meta["backbone"])
    adapter = None if meta["adapter"] is None else ad.AdapterConfig(**meta["adapter"])
    first = next(iter(arrays.values()))
    model = Summarizer(cfg, adapter, FeatureDims(**meta["feats"]), dtype=first.dtype)
    if set(arrays) != set(model.params):
        raise CheckpointError(f"{path}: parameter names do not match the stored config")
    for name, arr in arrays.items():
        model.params[name].data = arr
    freeze_partition(model, meta.get("mode", "full_finetune"))
    return model, meta.get("extra", {})


def attach_adapters(model: Summarizer, adapter: ad.AdapterConfig, feats: FeatureDims,
                    seed: int = 0) -> Summarizer:
    """A new model that shares the backbone values of ``model`` with freshly
    initialised adapters, fusion and interaction leaves."""
    out = Summarizer(model.config, adapter, feats, seed=seed, dtype=model.dtype)
    for name, t in model.params.items():
        if group_of(name) == "backbone":
            out.params[name].data = t.data.copy()
    return out
