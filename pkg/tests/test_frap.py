import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from movelight.frap import (
    Batch,
    FrapConfig,
    ParamStore,
    PhaseStructure,
    backward,
    check_case,
    demand_embedding,
    forward,
    gradient_check,
    init_params,
    neighbor_attention,
    pair_scores,
    param_shapes,
    q_values,
)

# movement relabelings (0-based) that map the four-leg conflict matrix onto itself
ROTATION = {0: 2, 2: 4, 4: 6, 6: 0, 1: 3, 3: 5, 5: 7, 7: 1, 8: 9, 9: 10, 10: 11, 11: 8}
SWAP_AXES = {0: 2, 2: 0, 1: 3, 3: 1, 4: 6, 6: 4, 5: 7, 7: 5, 8: 9, 9: 8, 10: 11, 11: 10}
FLIP = {0: 1, 1: 0, 2: 3, 3: 2, 4: 5, 5: 4, 6: 7, 7: 6, 8: 8, 9: 9, 10: 10, 11: 11}


@pytest.fixture(scope="module")
def structure(single):
    return PhaseStructure.from_intersection(single[0].intersections[0])


def permute_features(x, perm):
    """x[..., i, :] moves to position perm[i] along the movement axis."""
    out = np.empty_like(x)
    for i, j in perm.items():
        out[..., j, :] = x[..., i, :]
    return out


def phase_map(structure, perm):
    sets = [frozenset(np.nonzero(row)[0]) for row in structure.membership]
    return [sets.index(frozenset(perm[i] for i in s)) for s in sets]


def random_obs(rng, M=12, K=4, n_neighbors=None):
    n = K if n_neighbors is None else n_neighbors
    x = rng.uniform(size=(M, 3))
    x[:, 2] = rng.uniform(size=M) < 0.5
    nbrs = [rng.uniform(size=(M, 3)) for _ in range(n)]
    return x, nbrs


# -- demand embedding ------------------------------------------------------


def test_identical_movements_identical_embeddings():
    params = init_params(FrapConfig(), 1)
    x = np.tile([[0.3, 0.1, 1.0]], (5, 1))
    e = demand_embedding(x, params)
    assert (e == e[0]).all()


def test_zero_weights_zero_embeddings(rng):
    params = init_params(FrapConfig(), 1)
    params.tensors["demand_w"][:] = 0.0
    assert (demand_embedding(rng.uniform(size=(12, 3)), params) == 0).all()


def test_embedding_matches_loop_oracle(rng):
    params = init_params(FrapConfig(), 2)
    params.tensors["demand_b"] = rng.normal(size=16)
    x = rng.uniform(size=(12, 3))
    W, b = params["demand_w"], params["demand_b"]
    oracle = [[max(0.0, sum(x[m, f] * W[f, d] for f in range(3)) + b[d]) for d in range(16)] for m in range(12)]
    np.testing.assert_allclose(demand_embedding(x, params), oracle, rtol=0, atol=1e-14)


# -- pair competition ------------------------------------------------------


def test_pair_scores_equal_for_symmetric_toy():
    st2 = PhaseStructure.from_phases([(0,), (1,)], [[2, 0], [0, 2]], n_movements=2)
    cfg = FrapConfig()
    params = init_params(cfg, 4)
    d = np.tile(np.linspace(0, 1, 2 * cfg.embed_dim), (1, 2, 1))
    q, _ = pair_scores(d, st2, params)
    assert q[0, 0] == q[0, 1]


def test_pair_scores_zero_demand_all_equal(structure):
    cfg = FrapConfig()
    params = init_params(cfg, 5)
    q, _ = pair_scores(np.zeros((1, 12, 2 * cfg.embed_dim)), structure, params)
    assert np.ptp(q) == 0


def test_pair_scores_unknown_movement(structure):
    cfg = FrapConfig()
    with pytest.raises(ValueError):
        pair_scores(np.zeros((1, 11, 2 * cfg.embed_dim)), structure, init_params(cfg, 0))


def test_pair_scores_permute_with_automorphism(structure, rng):
    cfg = FrapConfig()
    params = init_params(cfg, 6)
    d = rng.uniform(size=(1, 12, 2 * cfg.embed_dim))
    q, _ = pair_scores(d, structure, params)
    q2, _ = pair_scores(permute_features(d, SWAP_AXES), structure, params)
    sigma = phase_map(structure, SWAP_AXES)
    np.testing.assert_allclose(q2[0, sigma], q[0], atol=1e-12)


# -- attention -------------------------------------------------------------


def test_single_entity_context_is_projected_self_value(rng):
    params = init_params(FrapConfig(), 7)
    s0 = rng.uniform(size=(1, 16))
    out, parts = neighbor_attention(s0, np.zeros((1, 0, 16)), np.zeros((1, 0), bool), params)
    heads = [s0[0] @ params["attn_v"][h] for h in range(5)]
    expected = np.concatenate(heads) @ params["attn_out_w"] + params["attn_out_b"]
    np.testing.assert_allclose(out[0], expected, atol=1e-14)
    assert (parts["alpha"] == 1.0).all()


def test_identical_entities_uniform_weights(rng):
    params = init_params(FrapConfig(), 8)
    s = rng.uniform(size=(1, 16))
    for k in range(5):
        _, parts = neighbor_attention(s, np.repeat(s[:, None], k, axis=1), np.ones((1, k), bool), params)
        np.testing.assert_allclose(parts["alpha"], 1.0 / (k + 1), atol=1e-15)


def test_attention_matches_scalar_softmax_oracle(rng):
    params = init_params(FrapConfig(), 9)
    s0 = rng.uniform(size=(1, 16))
    nb = rng.uniform(size=(1, 2, 16))
    _, parts = neighbor_attention(s0, nb, np.ones((1, 2), bool), params)
    entities = [s0[0], nb[0, 0], nb[0, 1]]
    for h in range(5):
        Wq, Wk = params["attn_q"][h], params["attn_k"][h]
        q = [sum(s0[0][d] * Wq[d, e] for d in range(16)) for e in range(8)]
        logits = []
        for ent in entities:
            k = [sum(ent[d] * Wk[d, e] for d in range(16)) for e in range(8)]
            logits.append(sum(a * b for a, b in zip(q, k)) / math.sqrt(8))
        z = [math.exp(l) for l in logits]
        oracle = [v / sum(z) for v in z]
        np.testing.assert_allclose(parts["alpha"][0, h], oracle, rtol=0, atol=1e-9)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 4))
def test_attention_rows_sum_to_one(seed, n):
    rng = np.random.default_rng(seed)
    params = init_params(FrapConfig(), seed % 1000)
    mask = np.zeros((3, 4), bool)
    mask[:, :n] = True
    _, parts = neighbor_attention(rng.uniform(size=(3, 16)), rng.uniform(size=(3, 4, 16)), mask, params)
    alpha = parts["alpha"]
    assert alpha.shape == (3, 5, 5)
    np.testing.assert_allclose(alpha.sum(axis=-1), 1.0, atol=1e-12)
    assert (alpha[..., 1 + n:] == 0).all()
    assert (alpha[..., : 1 + n] > 0).all()


def test_masked_neighbors_do_not_leak(structure, rng):
    cfg = FrapConfig()
    params = init_params(cfg, 10)
    x, nbrs = random_obs(rng, n_neighbors=2)
    b1 = Batch.single(x, nbrs, max_neighbors=4)
    b2 = Batch.single(x, nbrs, max_neighbors=4)
    b2.nx[0, 2:] = rng.uniform(size=b2.nx[0, 2:].shape)
    assert (q_values(b1, structure, params, cfg) == q_values(b2, structure, params, cfg)).all()


# -- forward ---------------------------------------------------------------


def test_zero_observation_equal_q(structure):
    cfg = FrapConfig()
    q = q_values(Batch.single(np.zeros((12, 3))), structure, init_params(cfg, 11), cfg)
    assert q.shape == (1, 8)
    assert np.ptp(q) == 0


def test_forward_pure(structure, rng):
    cfg = FrapConfig()
    params = init_params(cfg, 12)
    x, nbrs = random_obs(rng)
    b = Batch.single(x, nbrs)
    assert q_values(b, structure, params, cfg).tobytes() == q_values(b, structure, params, cfg).tobytes()


def test_finite_for_large_weights(structure, rng):
    cfg = FrapConfig()
    params = ParamStore({k: rng.uniform(-10, 10, size=s) for k, s in param_shapes(cfg).items()})
    x, nbrs = random_obs(rng)
    assert np.isfinite(q_values(Batch.single(x, nbrs), structure, params, cfg)).all()


def test_phase_sensitivity_probe(structure):
    cfg = FrapConfig()
    hits = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        params = init_params(cfg, trial)
        params.tensors["demand_b"] = rng.uniform(-0.1, 0.1, size=16)
        x, nbrs = random_obs(rng)
        x[:, 0] *= 0.5
        p = int(rng.integers(8))
        bumped = x.copy()
        bumped[structure.membership[p] > 0, 0] += 0.3
        q0 = q_values(Batch.single(x, nbrs), structure, params, cfg)[0, p]
        q1 = q_values(Batch.single(bumped, nbrs), structure, params, cfg)[0, p]
        hits += abs(q1 - q0) > 1e-12
    assert hits >= 95


@pytest.mark.parametrize("perm_name", ["ROTATION", "SWAP_AXES", "FLIP"])
def test_equivariance(structure, perm_name):
    perm = globals()[perm_name]
    sigma = phase_map(structure, perm)
    cfg = FrapConfig()
    for trial in range(20):
        rng = np.random.default_rng(trial)
        params = ParamStore({k: rng.uniform(-1, 1, size=s) for k, s in param_shapes(cfg).items()})
        x, nbrs = random_obs(rng)
        q = q_values(Batch.single(x, nbrs), structure, params, cfg)[0]
        q2 = q_values(Batch.single(permute_features(x, perm), [permute_features(n, perm) for n in nbrs]),
                      structure, params, cfg)[0]
        np.testing.assert_allclose(q2[sigma], q, atol=1e-9)


# -- backward --------------------------------------------------------------


def test_missing_cache_rejected():
    with pytest.raises(ValueError):
        backward(np.zeros((1, 8)), None, init_params(FrapConfig(), 0))


def test_zero_upstream_gradient(structure, rng):
    cfg = FrapConfig()
    params = init_params(cfg, 13)
    x, nbrs = random_obs(rng)
    _, cache = forward(Batch.single(x, nbrs), structure, params, cfg, keep_cache=True)
    grads = backward(np.zeros((1, 8)), cache, params)
    assert set(grads) == set(params.tensors)
    for name, g in grads.items():
        assert g.shape == params[name].shape
        assert not g.any()


def test_score_layer_outer_product(structure, rng):
    cfg = FrapConfig()
    params = init_params(cfg, 14)
    x, nbrs = random_obs(rng)
    _, cache = forward(Batch.single(x, nbrs), structure, params, cfg, keep_cache=True)
    dq = rng.normal(size=(1, 8))
    grads = backward(dq, cache, params)
    hidden = cache.values["hidden"][0]
    pairs_p, _ = structure.pairs
    # s_n = hidden_n . w + b and Q_p sums s_n over pairs whose first phase is p
    expected = sum(dq[0, pairs_p[n]] * hidden[n] for n in range(len(pairs_p)))
    np.testing.assert_allclose(grads["score_w"], expected, atol=1e-12)
    assert grads["score_b"] == pytest.approx(dq.sum() * 7)


def test_gradient_check_linear_toy(structure):
    # identity activation and no neighbors (singleton softmax) make Q linear in
    # each parameter, so the central difference carries no truncation error and
    # a wide step only shrinks round-off
    cfg = FrapConfig(embed_dim=4, heads=1, head_dim=2, hidden_dim=4, relation_dim=2,
                     activation="identity", max_neighbors=0)
    for seed in range(5):
        params, batch = check_case(cfg, structure, seed)
        assert gradient_check(params, batch, structure, cfg, epsilon=0.1, seed=seed) < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_gradient_check_default(structure, seed):
    cfg = FrapConfig()
    params, batch = check_case(cfg, structure, seed)
    assert gradient_check(params, batch, structure, cfg, seed=seed) < 1e-4


def test_gradient_check_detects_fault(structure):
    cfg = FrapConfig()
    params, batch = check_case(cfg, structure, 0)

    def zero_one(grads):
        grads["pair_w_self"][:] = 0.0

    assert gradient_check(params, batch, structure, cfg, grad_hook=zero_one) > 1e-2
