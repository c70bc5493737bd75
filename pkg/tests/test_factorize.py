"""Factorization construction, absorption identities, latent-path equivalence."""

import numpy as np
import pytest

from conftest import make_spec
from rapkit.budget import allocate, uniform_plan
from rapkit.factorize import (build_compressed, rap_prune,
                              reconstructed_reference, svd_factor, top_pairs)
from rapkit.rope import PairingScheme, RetainedIndex, rotate, rotate_indexed
from rapkit.scoring import PairScoreTable, estimate_fisher, magnitude_scores, pair_scores
from rapkit.toymodel import (AttentionModel, forward_decode, forward_prefill,
                             load_model, markov_calibration, save_model)


def fisher_table(model, seed=3, count=6, window=24):
    calib = markov_calibration(model.spec.vocab, count=count, window=window,
                               seed=seed)
    return pair_scores(estimate_fisher(model, calib), model.spec.rope.scheme)


def uniform_scores(spec) -> PairScoreTable:
    table = PairScoreTable(head_dim=spec.head_dim, pairing=spec.rope.scheme.kind)
    for layer in range(spec.layers):
        for side in ("k", "v"):
            for h in range(spec.kv_heads):
                table.set(layer, side, h, np.arange(1, spec.head_dim // 2 + 1,
                                                    dtype=float))
    return table


# -- rap_prune -----------------------------------------------------------------


def test_full_retention_reproduces_weights():
    spec = make_spec(seed=1)
    model = AttentionModel.build(spec)
    plan = uniform_plan(spec.head_dim // 2, spec.layers, 0.0)
    rap = rap_prune(model, uniform_scores(spec), plan)
    for i, layer in enumerate(model.layers):
        np.testing.assert_array_equal(
            np.concatenate([f.columns for f in rap.heads[i]], axis=1),
            layer.k_map.weight)
        np.testing.assert_array_equal(rap.absorbed_q[i], layer.proj_q.weight)
        for f in rap.heads[i]:
            np.testing.assert_array_equal(f.retained.expansion_matrix(),
                                          np.eye(spec.head_dim))


def test_hand_constructed_half_split_expansion():
    # D=4 half-split pairs {(0,2),(1,3)}; retaining pair 0 keeps columns 0 and 2
    scheme = PairingScheme("half_split", 4)
    retained = RetainedIndex((0,), scheme)
    assert retained.rap_index == [0, 2]
    np.testing.assert_array_equal(retained.expansion_matrix(),
                                  [[1.0, 0.0, 0.0, 0.0],
                                   [0.0, 0.0, 1.0, 0.0]])


def test_retained_set_matches_argmax_oracle(rng):
    for trial in range(30):
        sigma = rng.random(8)
        m = int(rng.integers(1, 9))
        got = top_pairs(sigma, m)
        ranked = sorted(range(8), key=lambda i: (-sigma[i], i))  # oracle
        assert got == tuple(sorted(ranked[:m]))


def test_ties_keep_lower_pair_index():
    sigma = np.array([1.0, 2.0, 2.0, 0.5])
    assert top_pairs(sigma, 2) == (1, 2)
    sigma = np.array([3.0, 3.0, 3.0, 3.0])
    assert top_pairs(sigma, 2) == (0, 1)


def test_pruned_product_places_columns_at_rap_index(rng):
    spec = make_spec(seed=6, pairing="half_split")
    model = AttentionModel.build(spec)
    table = fisher_table(model)
    plan = uniform_plan(spec.head_dim // 2, spec.layers, 0.5)
    rap = rap_prune(model, table, plan)
    d = spec.head_dim
    for i, layer in enumerate(model.layers):
        for g, fact in enumerate(rap.heads[i]):
            dense = fact.columns @ fact.retained.expansion_matrix()
            block = layer.k_map.weight[:, g * d:(g + 1) * d]
            idx = fact.rap_index
            np.testing.assert_array_equal(dense[:, idx], block[:, idx])
            pruned_cols = [c for c in range(d) if c not in idx]
            assert np.all(dense[:, pruned_cols] == 0.0)
            # heads of one group share the retained count
            assert len(fact.retained) == plan.retained_pairs(i, "k")


def test_absorption_equals_dense_product(rng):
    spec = make_spec(seed=14)
    model = AttentionModel.build(spec)
    plan = uniform_plan(spec.head_dim // 2, spec.layers, 0.3)
    rap = rap_prune(model, fisher_table(model), plan)
    d = spec.head_dim
    for i, layer in enumerate(model.layers):
        w_q = layer.proj_q.weight
        m = plan.retained_pairs(i, "k")
        parts = []
        for h in range(spec.query_heads):
            fact = rap.heads[i][h // spec.group_size]
            b = fact.retained.expansion_matrix()
            parts.append(w_q[:, h * d:(h + 1) * d] @ b.T)  # dense oracle
        np.testing.assert_array_equal(np.concatenate(parts, axis=1),
                                      rap.absorbed_q[i])
        assert rap.absorbed_q[i].shape == (spec.model_dim,
                                           spec.query_heads * 2 * m)


# -- svd_factor ---------------------------------------------------------------


def test_svd_full_rank_is_exact(rng):
    w = rng.normal(size=(8, 4))
    fact = svd_factor(w, 4)
    np.testing.assert_allclose(fact.a @ fact.b, w, atol=1e-9)


def test_svd_rank_one_outer_product_exact(rng):
    w = np.outer(rng.normal(size=6), rng.normal(size=4))
    fact = svd_factor(w, 1)
    np.testing.assert_allclose(fact.a @ fact.b, w, atol=1e-10)


def test_svd_error_matches_gram_matrix_oracle(rng):
    w = rng.normal(size=(8, 4))
    fact = svd_factor(w, 2)
    err = np.linalg.norm(w - fact.a @ fact.b, "fro") ** 2
    # independent oracle: eigenvalues of W^T W are squared singular values
    eigvals = np.sort(np.linalg.eigvalsh(w.T @ w))[::-1]
    expected = eigvals[2] + eigvals[3]
    assert err == pytest.approx(expected, abs=1e-8)
    assert fact.tail_energy == pytest.approx(expected, abs=1e-8)


def test_svd_error_non_increasing_in_rank(rng):
    w = rng.normal(size=(10, 6))
    errors = [np.linalg.norm(w - (f := svd_factor(w, r)).a @ f.b, "fro")
              for r in range(1, 7)]
    assert all(a >= b - 1e-12 for a, b in zip(errors, errors[1:]))


def test_svd_rank_bounds():
    with pytest.raises(ValueError):
        svd_factor(np.ones((4, 3)), 0)
    with pytest.raises(ValueError):
        svd_factor(np.ones((4, 3)), 4)


# -- structural invariants -------------------------------------------------------


@pytest.mark.parametrize("pairing", ["adjacent", "half_split"])
def test_commutativity_with_dense_expansion(pairing, rng):
    """rotate_indexed(X A) B == rotate(X A B) for every produced head."""
    spec = make_spec(seed=3, pairing=pairing)
    model = AttentionModel.build(spec)
    plan = uniform_plan(spec.head_dim // 2, spec.layers, 0.5)
    rap = rap_prune(model, fisher_table(model), plan)
    cfg = spec.rope
    for heads in rap.heads:
        for fact in heads:
            x = rng.normal(size=(5, spec.model_dim))
            positions = rng.integers(0, 1000, size=5).tolist()
            latent = x @ fact.columns
            b = fact.retained.expansion_matrix()
            lhs = rotate_indexed(latent, positions, cfg, fact.retained) @ b
            rhs = rotate(latent @ b, positions, cfg)
            assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_attention_scores_equal_pruned_reference(rng):
    """Latent-score attention equals full-width scores of the pruned weights."""
    spec = make_spec(seed=9)
    model = AttentionModel.build(spec)
    table = fisher_table(model)
    plan = uniform_plan(spec.head_dim // 2, spec.layers, 0.5)
    rap = rap_prune(model, table, plan)
    d = spec.head_dim
    layer = model.layers[0]
    x = rng.normal(size=(6, spec.model_dim))
    positions = list(range(6))
    for h in range(spec.query_heads):
        g = h // spec.group_size
        fact = rap.heads[0][g]
        b = fact.retained.expansion_matrix()
        m2 = 2 * len(fact.retained)
        q_tilde = x @ rap.absorbed_q[0][:, h * m2:(h + 1) * m2]
        k_latent = x @ fact.columns
        latent_scores = (rotate_indexed(q_tilde, positions, spec.rope, fact.retained)
                         @ rotate_indexed(k_latent, positions, spec.rope,
                                          fact.retained).T)
        w_q_h = layer.proj_q.weight[:, h * d:(h + 1) * d]
        w_k_pruned = layer.k_map.weight[:, g * d:(g + 1) * d] @ b.T @ b
        full_scores = (rotate(x @ w_q_h, positions, spec.rope)
                       @ rotate(x @ w_k_pruned, positions, spec.rope).T)
        np.testing.assert_allclose(latent_scores, full_scores, rtol=0, atol=1e-10)


def test_value_absorption_associativity(rng):
    """softmax(P) (X A_v) (B_v W_o) == softmax(P) (X A_v B_v) W_o."""
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 16))
    w_v = rng.normal(size=(16, 8))
    w_o = rng.normal(size=(8, 16))
    fact = svd_factor(w_v, 4)
    scores = rng.normal(size=(5, 5))
    probs = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
    latent = probs @ (x @ fact.a) @ (fact.b @ w_o)
    dense = probs @ (x @ fact.a @ fact.b) @ w_o
    np.testing.assert_allclose(latent, dense, rtol=0, atol=1e-10)


# -- build_compressed -------------------------------------------------------------


@pytest.mark.parametrize("method", ["baseline", "svd", "palu", "rap-hybrid"])
def test_zero_compression_reproduces_baseline_logits(method, rng):
    spec = make_spec(seed=10)
    model = AttentionModel.build(spec)
    table = fisher_table(model)
    compressed = build_compressed(model, method, 0.0, scores=table)
    tokens = rng.integers(0, spec.vocab, size=12).tolist()
    base = forward_prefill(model, tokens).logits
    got = forward_prefill(compressed, tokens).logits
    np.testing.assert_allclose(got, base, rtol=0, atol=1e-9)


@pytest.mark.parametrize("method", ["svd", "palu", "rap-hybrid"])
@pytest.mark.parametrize("rho", [0.1, 0.25, 0.5])
def test_latent_forward_equals_reconstructed_reference(method, rho, rng):
    spec = make_spec(seed=30, pairing="half_split")
    model = AttentionModel.build(spec)
    table = fisher_table(model)
    plan = allocate(table, rho, "adaptive")
    compressed = build_compressed(model, method, rho, scores=table, plan=plan)
    reference = reconstructed_reference(model, method, rho, scores=table, plan=plan)
    tokens = rng.integers(0, spec.vocab, size=10).tolist()
    lat = forward_prefill(compressed, tokens).logits
    ref = forward_prefill(reference, tokens).logits
    np.testing.assert_allclose(lat, ref, rtol=0, atol=1e-9)


@pytest.mark.parametrize("method", ["svd", "palu", "rap-hybrid"])
def test_decode_matches_prefill_for_latent_caches(method):
    spec = make_spec(seed=33)
    model = AttentionModel.build(spec)
    table = fisher_table(model)
    compressed = build_compressed(model, method, 0.3, scores=table)
    tokens = [4, 40, 11, 2, 59, 23, 8]
    full = forward_prefill(compressed, tokens)
    partial = forward_prefill(compressed, tokens[:4])
    cache = partial.cache
    logits = None
    for tok in tokens[4:]:
        logits, cache = forward_decode(compressed, cache, tok)
    np.testing.assert_allclose(logits[0], full.logits[-1], rtol=0, atol=1e-10)
    assert cache.entries() == full.cache.entries()


def test_svd_forward_flops_exceed_rap_at_equal_ratio():
    spec = make_spec(seed=12)
    model = AttentionModel.build(spec)
    table = fisher_table(model)
    tokens = list(range(16))
    flops = {}
    for method in ("svd", "palu", "rap-hybrid"):
        compressed = build_compressed(model, method, 0.3, scores=table)
        flops[method] = forward_prefill(compressed, tokens).tape.flops_by_tag["kv_proj"]
    assert flops["rap-hybrid"] < flops["palu"] < flops["svd"]


def test_cache_stores_latent_widths():
    spec = make_spec(seed=12)
    model = AttentionModel.build(spec)
    table = fisher_table(model)
    compressed = build_compressed(model, "rap-hybrid", 0.5, scores=table)
    result = forward_prefill(compressed, list(range(8)))
    m = compressed.layers[0].k_retained[0]
    hc = result.cache.heads[0][0]
    assert hc.k.shape == (8, 2 * len(m))
    assert hc.v.shape[1] == compressed.layers[0].v_map.weight.shape[1] // spec.kv_heads


def test_unknown_method_rejected():
    model = AttentionModel.build(make_spec())
    with pytest.raises(ValueError):
        build_compressed(model, "whitened-svd", 0.3)
    with pytest.raises(ValueError):
        build_compressed(model, "svd", 1.0)


def test_compressed_checkpoint_roundtrip(tmp_path):
    spec = make_spec(seed=44, pairing="half_split")
    model = AttentionModel.build(spec)
    table = magnitude_scores(model, spec.rope.scheme)
    compressed = build_compressed(model, "rap-hybrid", 0.3, scores=table)
    path = tmp_path / "compressed.model"
    save_model(compressed, path)
    loaded = load_model(path)
    assert loaded.method == "rap-hybrid"
    for a, b in zip(compressed.layers, loaded.layers):
        assert [r.pairs for r in a.k_retained] == [r.pairs for r in b.k_retained]
    tokens = [1, 2, 3, 4, 5]
    np.testing.assert_array_equal(forward_prefill(compressed, tokens).logits,
                                  forward_prefill(loaded, tokens).logits)
