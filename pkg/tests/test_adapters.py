import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmsumm import adapters as ad
from mmsumm import diffcore as dc


def rand_params(rng, d_m=6, d_B=3, zero_up=False):
    arrs = ad.init_adapter_arrays(d_m, d_B, rng, np.float64)
    if not zero_up:
        arrs["W_u"] = rng.normal(size=(d_B, d_m))
        arrs["b_u"] = rng.normal(size=d_m)
        arrs["ln_g"] = rng.normal(size=d_B)
        arrs["ln_b"] = rng.normal(size=d_B)
    return ad.AdapterParams(**{k: dc.Tensor(v) for k, v in arrs.items()})


def down_loop(h_row, P):
    """Bottleneck of one row with explicit loops."""
    W, b = P.W_d.data, P.b_d.data
    z = [sum(h_row[r] * W[r][c] for r in range(len(h_row))) + b[c] for c in range(W.shape[1])]
    mu = sum(z) / len(z)
    var = sum((x - mu) ** 2 for x in z) / len(z)
    normed = [(x - mu) / np.sqrt(var + 1e-5) * P.ln_g.data[c] + P.ln_b.data[c]
              for c, x in enumerate(z)]
    return [max(x, 0.0) for x in normed]


def up_loop(h_row, u, P):
    W, b = P.W_u.data, P.b_u.data
    return [h_row[c] + sum(u[r] * W[r][c] for r in range(len(u))) + b[c] for c in range(W.shape[1])]


def test_config_validation():
    with pytest.raises(ValueError):
        ad.AdapterConfig(tau=0.0)
    with pytest.raises(ValueError):
        ad.AdapterConfig(tau=1.0)
    with pytest.raises(ValueError):
        ad.AdapterConfig(d_B=0)
    with pytest.raises(ValueError):
        ad.adapter_shapes(8, 8)


def test_vanilla_identity_at_init():
    rng = np.random.default_rng(0)
    P = rand_params(rng, zero_up=True)
    h = dc.Tensor(rng.normal(size=(5, 6)))
    assert np.array_equal(ad.vanilla_forward(h, P).data, h.data)


def test_hierarchical_identity_at_init():
    rng = np.random.default_rng(1)
    P = rand_params(rng, zero_up=True)
    h = dc.Tensor(rng.normal(size=(7, 6)))
    H = dc.Tensor(rng.normal(size=(3, 3)))
    assert np.array_equal(ad.hierarchical_forward(h, [0, 3, 5], H, P).data, h.data)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_vanilla_matches_straight_line(seed):
    rng = np.random.default_rng(seed)
    P = rand_params(rng)
    h = rng.normal(size=(3, 6))
    got = ad.vanilla_forward(dc.Tensor(h), P).data
    want = [up_loop(row, down_loop(row, P), P) for row in h]
    assert np.allclose(got, want, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.05, 0.95))
def test_hierarchical_matches_straight_line(seed, tau):
    rng = np.random.default_rng(seed)
    P = rand_params(rng)
    h = rng.normal(size=(6, 6))
    gpos = [0, 2, 4]
    H = rng.normal(size=(3, 3))
    got = ad.hierarchical_forward(dc.Tensor(h), gpos, dc.Tensor(H), P, tau).data
    u = [down_loop(row, P) for row in h]
    want = []
    for t, row in enumerate(h):
        ut = list(u[t])
        if t in gpos:
            i = gpos.index(t)
            w = np.exp(H[i] / tau - np.max(H[i] / tau))
            w = w / w.sum()
            for k, g in enumerate(gpos):
                ut = [ut[c] + w[k] * u[g][c] for c in range(len(ut))]
        want.append(up_loop(row, ut, P))
    assert np.allclose(got, want, atol=1e-9)


def test_single_utterance_doubles_bottleneck():
    # N=1: softmax weight is 1, so u'_g = u_g + u_g
    rng = np.random.default_rng(3)
    P = rand_params(rng)
    P.b_u.data[:] = 0.0
    h = rng.normal(size=(4, 6))
    out = ad.hierarchical_forward(dc.Tensor(h), [0], dc.Tensor(np.array([[0.7]])), P).data
    u0 = np.array(down_loop(h[0], P))
    assert np.allclose(out[0] - h[0], 2 * u0 @ P.W_u.data, atol=1e-12)


def test_text_positions_match_vanilla():
    rng = np.random.default_rng(4)
    P = rand_params(rng)
    h = dc.Tensor(rng.normal(size=(8, 6)))
    gpos = [0, 3, 6]
    hier = ad.hierarchical_forward(h, gpos, dc.Tensor(rng.normal(size=(3, 3))), P).data
    van = ad.vanilla_forward(h, P).data
    text = [t for t in range(8) if t not in gpos]
    assert np.array_equal(hier[text], van[text])
    assert not np.allclose(hier[gpos], van[gpos])


def test_small_tau_approaches_argmax():
    rng = np.random.default_rng(5)
    P = rand_params(rng)
    h = rng.normal(size=(6, 6))
    gpos = [0, 2, 4]
    H = np.array([[0.0, 1.0, 0.2], [0.5, 0.1, 0.0], [0.3, 0.9, 1.4]])
    got = ad.hierarchical_forward(dc.Tensor(h), gpos, dc.Tensor(H), P, tau=1e-3).data
    u = np.array([down_loop(row, P) for row in h])
    want = u.copy()
    for i, g in enumerate(gpos):
        want[g] += u[gpos[int(np.argmax(H[i]))]]
    want = h + want @ P.W_u.data + P.b_u.data
    assert np.allclose(got, want, atol=1e-4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 7), st.floats(0.01, 0.99))
def test_context_weights_rows_sum_to_one(seed, n, tau):
    H = dc.Tensor(np.random.default_rng(seed).normal(size=(n, n)) * 5)
    w = ad.context_weights(H, tau).data
    assert np.all(w >= 0)
    assert np.allclose(w.sum(axis=1), 1.0)


def test_hierarchical_shape_errors():
    rng = np.random.default_rng(6)
    P = rand_params(rng)
    h = dc.Tensor(rng.normal(size=(5, 6)))
    with pytest.raises(ValueError):
        ad.hierarchical_forward(h, [0, 2], None, P)
    with pytest.raises(ValueError):
        ad.hierarchical_forward(h, [0, 2], dc.Tensor(np.zeros((3, 3))), P)


def test_init_is_deterministic():
    a = ad.init_adapters(ad.AdapterConfig(d_B=3), 6, 2, np.random.default_rng(9))
    b = ad.init_adapters(ad.AdapterConfig(d_B=3), 6, 2, np.random.default_rng(9))
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.W_d.data, pb.W_d.data)
        assert not pa.W_u.data.any() and not pa.b_u.data.any()
        assert pa.W_d.tunable
