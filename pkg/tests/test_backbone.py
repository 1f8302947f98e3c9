import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmsumm import diffcore as dc
from mmsumm.adapters import AdapterConfig
from mmsumm.backbone import (BackboneConfig, CheckpointError, FeatureDims, Summarizer, Variant,
                             count_params, decoder_forward, encode, encoder_forward,
                             freeze_partition, load_checkpoint, multimodal_vectors,
                             param_shapes, save_checkpoint, solve_bottleneck)
from mmsumm.config import BART_LARGE
from mmsumm.corpus import BOS
from mmsumm.fusion import assemble_input, interaction_matrix

from helpers import tiny_corpus, tiny_features, tiny_model


@pytest.fixture(scope="module")
def setup():
    c = tiny_corpus()
    ep = c.episodes[0]
    inp = assemble_input(range(ep.n_utterances), ep, c.vocab, 64)
    return c, ep, inp, tiny_features(c)


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(d_m=10, n_heads=4)
    with pytest.raises(ValueError):
        BackboneConfig(enc_layers=0)


def test_encoder_shape_and_determinism(setup):
    c, ep, inp, _ = setup
    m = tiny_model(c, adapter=False)
    a = encoder_forward(m, inp).data
    b = encoder_forward(m, inp).data
    assert a.shape == (len(inp.token_ids), 16)
    assert np.array_equal(a, b)
    one = assemble_input([0], ep, c.vocab, 1)
    assert encoder_forward(m, one).shape == (1, 16)


def test_encoder_length_errors(setup):
    c, ep, inp, _ = setup
    m = tiny_model(c)
    with pytest.raises(ValueError):
        encoder_forward(m, inp, token_ids=np.zeros(65, dtype=np.int64))
    with pytest.raises(ValueError):
        encoder_forward(m, inp, adapter_kind="hierarchical")
    with pytest.raises(ValueError):
        encoder_forward(tiny_model(c, adapter=False), inp, adapter_kind="vanilla")


def test_identity_at_init_bit_for_bit(setup):
    c, ep, inp, F = setup
    model = tiny_model(c)
    plain = encoder_forward(model, inp).data
    N = len(inp.global_positions)
    zero_m = dc.Tensor(np.zeros((N, 16)))
    H = interaction_matrix(multimodal_vectors(model, F[ep.id], inp.utterances),
                           model.interaction_params())
    for kind in ("vanilla", "hierarchical"):
        out = encoder_forward(model, inp, zero_m, H, kind).data
        assert out.dtype == np.float64
        assert np.array_equal(out, plain), kind


def test_multimodal_changes_only_through_m(setup):
    c, ep, inp, F = setup
    model = tiny_model(c)
    plain = encoder_forward(model, inp).data
    mm = encode(model, inp, F[ep.id], Variant.named("vanilla")).data
    assert not np.allclose(mm, plain)


def test_decoder_causal_and_normalised(setup):
    c, ep, inp, _ = setup
    model = tiny_model(c)
    enc = encoder_forward(model, inp)
    prefix = [BOS, 7, 9, 11, 13]
    a = decoder_forward(model, prefix, enc, use_adapters=True).data
    b = decoder_forward(model, prefix[:3] + [20, 21], enc, use_adapters=True).data
    assert a.shape == (5, len(c.vocab))
    assert np.array_equal(a[:3], b[:3])
    assert not np.allclose(a[3:], b[3:])
    p = np.exp(a - a.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        decoder_forward(model, [BOS] * 65, enc)


def test_lm_head_tied(setup):
    c, ep, inp, _ = setup
    model = tiny_model(c)
    assert not any(k.startswith("lm_head") for k in model.params)
    enc = encoder_forward(model, inp)
    _, h = decoder_forward(model, [BOS, 5], enc, return_hidden=True)
    logits = decoder_forward(model, [BOS, 5], enc).data
    assert np.allclose(logits, h.data @ model.params["tok_emb"].data.T)


def test_partition_labels_and_idempotence(setup):
    model = tiny_model(setup[0])
    freeze_partition(model, "adapter_tune")
    labels = {k: t.tunable for k, t in model.params.items()}
    assert all(v == (k.split(".")[0] in ("fusion", "interaction", "adapter")) for k, v in labels.items())
    freeze_partition(model, "adapter_tune")
    assert labels == {k: t.tunable for k, t in model.params.items()}
    freeze_partition(model, "full_finetune")
    assert all(t.tunable for t in model.params.values())
    with pytest.raises(ValueError):
        freeze_partition(model, "partial")


def test_bart_large_total_near_406m():
    counts = count_params(BART_LARGE)
    assert abs(counts["total"] - 406e6) / 406e6 < 0.03
    assert counts["fraction"] == 1.0


def test_solved_bottleneck_fraction():
    feats = FeatureDims(d_x=768, d_v=2816, d_a=1024, d_i=512)
    d_B = solve_bottleneck(BART_LARGE, feats, 15_600_000)
    counts = count_params(BART_LARGE, AdapterConfig(d_B=d_B), feats)
    assert counts["tunable"] >= 15_600_000
    assert count_params(BART_LARGE, AdapterConfig(d_B=d_B - 1), feats)["tunable"] < 15_600_000
    assert 0.030 <= counts["fraction"] <= 0.045
    assert counts["fraction"] == counts["tunable"] / counts["total"]


def shape_tally(config, adapter, feats):
    shapes = param_shapes(config, adapter, feats)
    total = sum(int(np.prod(s)) for s in shapes.values())
    tunable = sum(int(np.prod(s)) for k, s in shapes.items()
                  if k.split(".")[0] in ("fusion", "interaction", "adapter"))
    return total, tunable


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(1, 48),
       st.integers(2, 40), st.integers(1, 30), st.integers(1, 7))
def test_count_params_matches_tally(heads, enc, dec, ffn, vocab, L, d_B):
    d_m = 8 * heads
    cfg = BackboneConfig(d_m=d_m, n_heads=heads, d_ffn=ffn, enc_layers=enc, dec_layers=dec,
                         vocab_size=vocab, L_max=L)
    feats = FeatureDims(d_x=3, d_v=5, d_a=2, d_i=4)
    counts = count_params(cfg, AdapterConfig(d_B=d_B), feats)
    assert (counts["total"], counts["tunable"]) == shape_tally(cfg, AdapterConfig(d_B=d_B), feats)
    assert count_params(cfg)["total"] == shape_tally(cfg, None, None)[0]


def test_count_params_matches_instantiated_model(setup):
    model = tiny_model(setup[0])
    freeze_partition(model, "adapter_tune")
    counts = count_params(model.config, model.adapter, model.feats)
    assert model.tally() == {k: counts[k] for k in ("total", "tunable", "fraction")}


def test_checkpoint_round_trip(tmp_path, setup):
    c, ep, inp, _ = setup
    model = tiny_model(c)
    freeze_partition(model, "adapter_tune")
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, {"step": 3})
    back, extra = load_checkpoint(path)
    assert extra == {"step": 3}
    assert back.mode == "adapter_tune"
    assert back.checksum() == model.checksum()
    assert np.array_equal(encoder_forward(back, inp).data, encoder_forward(model, inp).data)
    raw = path.read_bytes()
    assert raw[:4] == b"MMSM"
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "v9.ckpt").write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v9.ckpt")


def test_tunable_leaves_receive_gradient(setup):
    c, ep, inp, F = setup
    model = tiny_model(c)
    freeze_partition(model, "adapter_tune")
    rng = np.random.default_rng(0)
    for k, t in model.params.items():
        if k.startswith("adapter.") and k.rsplit(".", 1)[1] in ("W_u", "b_u"):
            t.data = rng.normal(size=t.shape) * 0.1
    with dc.Graph() as g:
        enc = encode(model, inp, F[ep.id], Variant.named("h3d"))
        logits = decoder_forward(model, [BOS, 5, 6], enc, use_adapters=True)
        loss = dc.sum_(dc.mul(logits, dc.Tensor(rng.normal(size=logits.shape))))
    grads = dc.backward(g, loss)
    norms = {k: np.abs(grads[k]).max() for k, t in model.params.items() if t.tunable}
    # b_j only shifts each row of H by a constant, which the row softmax cancels
    assert norms.pop("interaction.b_j") < 1e-12
    assert min(norms.values()) > 1e-8
