import numpy as np
import pytest
from hypothesis import given, strategies as st

from c2srt.diffcore import ConfigurationError, ParamStore, ShapeError, finite_diff_check
from c2srt.istgat import (Flags, GraphIndex, ModelConfig, attention_coefficients, attention_logits,
                          attention_normalize, backward, cosine, cosine_backward, dynamic_attention_witness,
                          elu, forward, gat_layer_backward, gat_layer_forward, init_nodes, init_params,
                          layer_forward, layer_params, leaky_relu)
from c2srt.isr import IsrConfig
from c2srt.relgraph import RelationGraph


def random_graph(rng, C, n_seen, max_deg):
    nbrs = []
    for c in range(C):
        cand = [j for j in range(n_seen) if j != c]
        k = int(rng.integers(0, min(max_deg, len(cand)) + 1))
        nbrs.append(sorted(rng.choice(cand, size=k, replace=False).tolist()) if k else [])
    return RelationGraph([f"c{i}" for i in range(C)], n_seen, nbrs, max_deg)


def random_layer(rng, d_in, dh, M):
    lp = {k: rng.standard_normal((M, dh, d_in)) for k in ("W_left", "W_right", "W_out")}
    lp["a"] = rng.standard_normal((M, dh))
    if M > 1:
        lp["head_W"] = rng.standard_normal((M * d_in, d_in))
        lp["head_b"] = rng.standard_normal(M * d_in)
    return lp


def naive_layer(H, lp, graph, slope, final):
    """Per-node, per-head loops straight from the layer definition."""
    M, dh, d_in = lp["W_left"].shape
    C = H.shape[0]
    out = np.zeros((C, M * dh))
    for m in range(M):
        Hm = H @ lp["head_W"][m * d_in:(m + 1) * d_in].T + lp["head_b"][m * d_in:(m + 1) * d_in] if M > 1 else H
        for i in range(C):
            hood = graph.in_neighborhood(i)
            e = [attention_logits(Hm[i], Hm[j], lp["W_left"][m], lp["W_right"][m], lp["a"][m], slope)
                 for j in hood]
            alpha = attention_normalize(e)
            agg = sum(a * (lp["W_out"][m] @ Hm[j]) for a, j in zip(alpha, hood))
            out[i, m * dh:(m + 1) * dh] = agg if final else elu(agg)
    return out


@pytest.mark.parametrize("M,final", [(1, True), (2, False), (3, True)])
def test_layer_matches_naive(rng, M, final):
    for _ in range(5):
        g = random_graph(rng, 7, 5, 3)
        lp = random_layer(rng, 4, 2, M)
        H = rng.standard_normal((7, 4))
        np.testing.assert_allclose(layer_forward(H, g, lp, 0.2, final), naive_layer(H, lp, g, 0.2, final),
                                   rtol=1e-10, atol=1e-12)


def test_attention_invariants_random(rng):
    for _ in range(200):
        C = int(rng.integers(2, 8))
        g = random_graph(rng, C, int(rng.integers(1, C + 1)), 4)
        gi = GraphIndex(g)
        lp = random_layer(rng, 3, 2, 2)
        alpha = attention_coefficients(rng.standard_normal((2, C, 3)), lp, gi, 0.2)
        assert np.all(alpha[..., gi.mask] > 0) and np.all(alpha[..., ~gi.mask] == 0)
        np.testing.assert_allclose(alpha.sum(-1), 1.0, atol=1e-6)


def test_isolated_node_attends_to_itself(rng):
    g = RelationGraph(["a", "b"], 2, [[], []], 0)
    lp = random_layer(rng, 3, 3, 1)
    H = rng.standard_normal((2, 3))
    out = layer_forward(H, g, lp, final=True)
    np.testing.assert_allclose(out, H @ lp["W_out"][0].T)


def test_dynamic_attention_witness_found_and_controls(rng):
    w = dynamic_attention_witness(rng, trials=1000)
    assert w is not None
    (i, k), (j1, j2) = w.queries, w.pair
    assert (w.logits[i, j1] - w.logits[i, j2]) * (w.logits[k, j1] - w.logits[k, j2]) < 0
    # an all-zero attention vector scores everything equally: no witness
    assert dynamic_attention_witness(rng, trials=50, zero_attention=True) is None
    assert dynamic_attention_witness(rng, trials=50, common_neighbors=1) is None


def test_layer_gradients_on_irregular_graph(rng):
    g = random_graph(rng, 6, 4, 3)
    gi = GraphIndex(g)
    lp0 = random_layer(rng, 3, 2, 2)
    H0 = rng.standard_normal((2, 6, 3))
    R = rng.standard_normal((2, 6, 4))
    store = ParamStore()
    store.add("H", H0.reshape(-1, 3))
    for k, v in lp0.items():
        store.add(k, v.reshape(v.shape[0], -1) if v.ndim > 1 else v)

    def loss(st_, backward_):
        lp = {k: st_[k].reshape(lp0[k].shape) for k in lp0}
        H = st_["H"].reshape(H0.shape)
        out, cache = gat_layer_forward(H, lp, gi, 0.2, final=False)
        if backward_:
            dH, grads = gat_layer_backward(R, lp, gi, cache)
            st_.accumulate("H", dH.reshape(-1, 3))
            for k, v in grads.items():
                st_.accumulate(k, v.reshape(st_[k].shape))
        return float((out * R).sum())
    rep = finite_diff_check(loss, store)
    assert rep.passed, rep.max_rel_err


@given(st.integers(1, 5), st.integers(0, 2**31))
def test_cosine_backward_matches_fd(D, seed):
    r = np.random.default_rng(seed)
    h, t, dy = r.standard_normal((3, D)), r.standard_normal((3, D)), r.standard_normal(3)
    y, cache = cosine(h, t)
    assert np.all(np.abs(y) <= 1 + 1e-12)
    g = cosine_backward(dy, cache)
    eps = 1e-6
    for i in range(3):
        for d in range(D):
            hp, hm = h.copy(), h.copy()
            hp[i, d] += eps
            hm[i, d] -= eps
            fd = ((cosine(hp, t)[0] - cosine(hm, t)[0]) @ dy) / (2 * eps)
            assert g[i, d] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_cosine_zero_row():
    y, cache = cosine(np.zeros((1, 3)), np.ones((1, 3)))
    assert y[0] == 0.0 and np.all(cosine_backward(np.ones(1), cache) == 0)


def test_activations():
    x = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_allclose(leaky_relu(x, 0.2), [-0.4, 0.0, 3.0])
    np.testing.assert_allclose(elu(x), [np.expm1(-2.0), 0.0, 3.0])


def test_init_nodes_and_errors(rng):
    D = 4
    fL, fG, t = rng.standard_normal((3, D)), rng.standard_normal(D), rng.standard_normal((3, D))
    W, b = rng.standard_normal((D, 2 * D)), rng.standard_normal(D)
    h = init_nodes(fL, fG, t, W, b)
    np.testing.assert_allclose(h[1], W @ np.concatenate([(fL[1] + fG) / 2, t[1]]) + b)
    with pytest.raises(ShapeError):
        init_nodes(fL[:2], fG, t, W, b)
    with pytest.raises(ShapeError):
        init_nodes(fL, fG, t, W[:, :D], b)


def test_model_config():
    assert ModelConfig(dim=8, layers=3, hidden=6).widths() == [(8, 6), (6, 6), (6, 8)]
    with pytest.raises(ConfigurationError):
        ModelConfig(dim=9, heads=2).check()
    with pytest.raises(ConfigurationError):
        ModelConfig(dim=8, layers=0).check()


def test_initial_adapter_is_identity(rng):
    cfg = ModelConfig(dim=4)
    store = init_params(cfg, rng)
    patches, glob, text = rng.standard_normal((2, 5, 4)), rng.standard_normal((2, 4)), rng.standard_normal((3, 4))
    g = RelationGraph(["a", "b", "c"], 3, [[1], [0, 2], []], 2)
    scores, G, _ = forward(store, cfg, IsrConfig(), patches, glob, text, GraphIndex(g), Flags())
    assert np.array_equal(G, glob) and scores.shape == (2, 3)
    lp = layer_params(store, 0, 2)
    assert lp["W_left"].shape == (2, 2, 4) and lp["head_W"].shape == (8, 4)


def test_ist_off_predicts_from_initial_nodes(rng):
    cfg = ModelConfig(dim=4)
    store = init_params(cfg, rng)
    patches, glob, text = rng.standard_normal((2, 5, 4)), rng.standard_normal((2, 4)), rng.standard_normal((3, 4))
    scores, _, _ = forward(store, cfg, None, patches, glob, text, None, Flags(isr=False, ist=False))
    h0 = np.stack([init_nodes(np.tile(glob[b], (3, 1)), glob[b], text, store["ffn_in.W"], store["ffn_in.b"])
                   for b in range(2)])
    np.testing.assert_allclose(scores, cosine(h0, text)[0])
    with pytest.raises(ShapeError):
        forward(store, cfg, None, patches, glob, text, None, Flags(isr=False, ist=True))


def test_backward_accumulates_every_parameter(rng):
    cfg = ModelConfig(dim=4)
    store = init_params(cfg, rng)
    g = RelationGraph(["a", "b", "c"], 3, [[1], [0, 2], []], 2)
    patches, glob, text = rng.standard_normal((2, 5, 4)), rng.standard_normal((2, 4)), rng.standard_normal((3, 4))
    _, _, cache = forward(store, cfg, IsrConfig(), patches, glob, text, GraphIndex(g), Flags())
    backward(store, cache, rng.standard_normal((2, 3)), rng.standard_normal((2, 4)))
    assert all(np.any(store.grads[n] != 0) for n in store.names())
