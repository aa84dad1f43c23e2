import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lppa import data as D
from lppa import model as M
from lppa import protocol as P
from lppa.exceptions import InitError, ParameterError
from lppa.numerics import mat_pow, stream_id
from lppa.topology import Digraph, build_topology, sinkhorn_knopp

from .conftest import random_strong_digraph


def setup(ds, kind, beta=0.025, n=5, topo="full", batch_size=256, **kw):
    graph = build_topology(topo, n)
    weights = sinkhorn_knopp(graph)
    shards = D.partition(ds, D.PartitionSpec("iid", seed=0), n)
    cfg = P.SimulationConfig(
        P.AggregationRule.parse(kind, beta), M.ModelSpec("logreg", ds.dim, ds.n_classes),
        batch_size=batch_size, **kw,
    )
    return cfg, shards, weights


def test_rule_validation():
    assert P.AggregationRule.parse("dsgt", 0.5).beta is None
    assert P.AggregationRule.parse("lppa", 0.5).label == "lppa(0.5)"
    for bad in (("dp", None), ("lppa", 0.0), ("fedavg", 1.0)):
        with pytest.raises(ParameterError):
            P.AggregationRule(*bad)


def test_ring_ledger_entries():
    g = build_topology("ring", 3)
    ledger = P.exchange_noise(g, 0.1, 4, seed=0)
    # zero-based (receiver, sender): d_21, d_32, d_13
    assert sorted(ledger.delta) == [(0, 2), (1, 0), (2, 1)]
    assert all(v.shape == (4,) for v in ledger.delta.values())
    np.testing.assert_array_equal(
        P.noise_difference(ledger, 0), ledger.delta[(1, 0)] - ledger.delta[(0, 2)]
    )


def test_full_ledger_count_and_determinism():
    g = build_topology("full", 5)
    a = P.exchange_noise(g, 0.1, 3, seed=4)
    b = P.exchange_noise(g, 0.1, 3, seed=4)
    assert len(a.delta) == 20
    for key in a.delta:
        np.testing.assert_array_equal(a.delta[key], b.delta[key])
    c = P.exchange_noise(g, 0.1, 3, seed=5)
    assert not np.array_equal(a.delta[(1, 0)], c.delta[(1, 0)])


def test_isolated_client_has_zero_difference():
    g = Digraph.from_edges(1, [])
    ledger = P.exchange_noise(g, 0.1, 4, seed=0)
    np.testing.assert_array_equal(P.noise_differences(ledger, 4), np.zeros((1, 4)))


def test_per_sender_scales():
    g = build_topology("ring", 3)
    ledger = P.exchange_noise(g, [1e-6, 1.0, 1.0], 2000, seed=0)
    assert np.abs(ledger.delta[(1, 0)]).mean() < 1e-5
    assert np.abs(ledger.delta[(2, 1)]).mean() == pytest.approx(1.0, rel=0.1)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 16), st.floats(0.0, 0.7), st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_flow_conservation(n, p, seed, dim):
    g = random_strong_digraph(np.random.default_rng(seed), n, p)
    nd = P.noise_differences(P.exchange_noise(g, 0.5, dim, seed))
    assert np.all(np.abs(nd.sum(axis=0)) <= 1e-12 * dim)


def test_init_sums(blobs):
    for kind in ("dsgt", "lppa", "dp"):
        cfg, shards, w = setup(blobs, kind)
        s = P.init_clients(cfg, shards, w)
        diff = s.gammas().sum(axis=0) - s.cached_grads().sum(axis=0)
        if kind == "dsgt":
            assert np.array_equal(s.gammas(), s.cached_grads())
        elif kind == "lppa":
            assert np.max(np.abs(diff)) <= 1e-9
            assert not np.array_equal(s.gammas(), s.cached_grads())
        else:
            np.testing.assert_allclose(diff, s.dp_noise.sum(axis=0), atol=1e-15)
            assert np.linalg.norm(diff) > 0
            assert P.tracking_residual(s) == pytest.approx(np.linalg.norm(s.dp_noise.sum(axis=0)))


def test_init_errors(blobs):
    cfg, shards, w = setup(blobs, "lppa")
    with pytest.raises(InitError):
        P.init_clients(cfg, shards, np.asarray(w))
    with pytest.raises(InitError):
        P.init_clients(cfg, shards[:4], w)
    with pytest.raises(InitError):
        P.init_clients(cfg, shards[:4] + [None], w)


def test_init_theta_matches_model_init(blobs):
    cfg, shards, w = setup(blobs, "dsgt")
    s = P.init_clients(cfg, shards, w)
    np.testing.assert_array_equal(s.clients[2].theta, M.init_params(cfg.model, 0, stream_id("init", 2)))


def test_single_client_is_gradient_descent(blobs):
    spec = M.ModelSpec("logreg", blobs.dim, 2)
    cfg = P.SimulationConfig(P.AggregationRule("dsgt"), spec, lam=0.1, rounds=0, batch_size=1000)
    state = P.init_clients(cfg, [blobs], np.ones((1, 1)))
    theta = state.clients[0].theta.copy()
    for _ in range(10):
        state, _ = P.dsgt_round(state)
        theta = theta - 0.1 * M.grad_weights(spec, theta, blobs)
        np.testing.assert_allclose(state.clients[0].theta, theta, atol=1e-14)
        np.testing.assert_allclose(state.clients[0].gamma, M.grad_weights(spec, theta, blobs), atol=1e-14)


def test_local_epochs_single_client(blobs):
    spec = M.ModelSpec("logreg", blobs.dim, 2)
    cfg = P.SimulationConfig(P.AggregationRule("dsgt"), spec, lam=0.1, local_epochs=3, batch_size=1000)
    s0 = P.init_clients(cfg, [blobs], np.ones((1, 1)))
    s1, _ = P.dsgt_round(s0)
    theta = s0.clients[0].theta - 0.1 * s0.clients[0].gamma
    for _ in range(2):
        theta = theta - 0.1 * M.grad_weights(spec, theta, blobs)
    np.testing.assert_allclose(s1.clients[0].theta, theta, atol=1e-14)
    np.testing.assert_allclose(s1.clients[0].cached_grad, M.grad_weights(spec, theta, blobs), atol=1e-14)


def test_round_is_synchronous(blobs):
    cfg, shards, w = setup(blobs, "lppa", batch_size=8)
    s0 = P.init_clients(cfg, shards, w)
    s1, _ = P.dsgt_round(s0)
    expected = np.asarray(w) @ s0.thetas() - cfg.lam * s0.gammas()
    np.testing.assert_allclose(s1.thetas(), expected, atol=1e-15)
    grads = np.stack([
        M.grad_weights(cfg.model, s1.clients[i].theta, P._batch(shards[i], s1.clients[i].batch_indices))
        for i in range(5)
    ])
    np.testing.assert_allclose(s1.gammas(), np.asarray(w) @ s0.gammas() + grads - s0.cached_grads(), atol=1e-15)


@pytest.mark.parametrize("kind", ["dsgt", "lppa"])
def test_tracking_identity_with_minibatches(blobs, kind):
    cfg, shards, w = setup(blobs, kind, batch_size=5, topo="ring", rounds=30)
    state = P.init_clients(cfg, shards, w)
    for _ in range(30):
        state, m = P.dsgt_round(state)
        assert m.tracking_residual <= 1e-8
        assert np.max(np.abs(state.gammas().sum(0) - state.cached_grads().sum(0))) <= 1e-9


def test_first_round_theta_sum_unaffected(blobs):
    sums = {}
    for kind in ("dsgt", "lppa"):
        cfg, shards, w = setup(blobs, kind, topo="ring")
        s1, _ = P.dsgt_round(P.init_clients(cfg, shards, w))
        sums[kind] = s1.thetas().sum(axis=0)
    assert np.max(np.abs(sums["dsgt"] - sums["lppa"])) <= 1e-10


def test_frozen_gradient_closed_form(blobs):
    cfg, shards, w = setup(blobs, "lppa", topo="ring")
    state = P.init_clients(cfg, shards, w)
    g0, gamma0 = state.cached_grads(), state.gammas()
    for t in range(1, 16):
        state = P.frozen_gradient_round(state, g0)
        np.testing.assert_allclose(state.gammas(), mat_pow(np.asarray(w), t) @ gamma0, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", ["lppa", "dp"])
def test_frozen_perturbation_identity(blobs, kind):
    g = random_strong_digraph(np.random.default_rng(8), 5)
    w = sinkhorn_knopp(g)
    shards = D.partition(blobs, D.PartitionSpec("iid"), 5)
    spec = M.ModelSpec("logreg", blobs.dim, 2)
    base = P.init_clients(P.SimulationConfig(P.AggregationRule("dsgt"), spec), shards, w)
    noisy = P.init_clients(P.SimulationConfig(P.AggregationRule(kind, 0.3), spec), shards, w)
    fixed = np.random.default_rng(0).normal(size=(5, spec.n_params))
    pert = noisy.perturbation()
    np.testing.assert_allclose(noisy.gammas() - base.gammas(), pert, rtol=0, atol=1e-15)
    for t in range(1, 26):
        base = P.frozen_gradient_round(base, fixed)
        noisy = P.frozen_gradient_round(noisy, fixed)
        expected = mat_pow(np.asarray(w), t) @ pert
        assert np.max(np.abs(noisy.gammas() - base.gammas() - expected)) <= 1e-10


def test_frozen_shape_check(blobs):
    cfg, shards, w = setup(blobs, "dsgt")
    with pytest.raises(ParameterError):
        P.frozen_gradient_round(P.init_clients(cfg, shards, w), np.zeros((5, 2)))


def test_dsgt_trains_on_separable_blobs(blobs):
    cfg, shards, w = setup(blobs, "dsgt", rounds=50, lam=0.05)
    res = P.run_simulation(cfg, shards, w, eval_data=blobs)
    dist = [res.initial_metrics.consensus_distance] + [m.consensus_distance for m in res.history]
    assert dist[-1] < dist[0]
    assert np.mean(dist[-10:]) < np.mean(dist[:10])
    assert res.history[-1].consensus_accuracy > 0.95


def test_zero_rounds(blobs):
    cfg, shards, w = setup(blobs, "dsgt", rounds=0)
    res = P.run_simulation(cfg, shards, w)
    assert res.history == [] and res.state is res.initial and res.initial_metrics.round == 0


def test_consensus_distance_zero_when_equal(blobs):
    cfg, shards, w = setup(blobs, "dsgt")
    s = P.init_clients(cfg, shards, w)
    same = P._with_arrays(s, np.tile(s.thetas()[0], (5, 1)), s.gammas(), s.cached_grads(),
                          [c.batch_indices for c in s.clients])
    assert P.consensus_distance(same) == 0.0


def test_divergence_is_flagged_and_frozen(blobs):
    # noise of order 1e300 times a step of 1e10 overflows theta in the first round
    cfg, shards, w = setup(blobs, "dp", beta=1e300, rounds=6, lam=1e10)
    res = P.run_simulation(cfg, shards, w)
    assert res.diverged
    first = res.state.diverged_at
    assert first is not None and 1 <= first <= 6
    for m in res.history[first - 1:]:
        assert m.diverged and np.isnan(m.consensus_accuracy)
    assert all(not m.diverged for m in res.history[: first - 1])
    assert len(res.history) == 6 and res.state.t == 6


def test_sample_batch():
    shard = D.generate_synthetic(2, 2, 20, 1.0, 0)
    np.testing.assert_array_equal(P.sample_batch(shard, 50, 0, 0, 0), np.arange(20))
    idx = P.sample_batch(shard, 5, 0, 1, 3)
    assert len(idx) == 5 and np.all(np.diff(idx) > 0)
    np.testing.assert_array_equal(idx, P.sample_batch(shard, 5, 0, 1, 3))
    assert not np.array_equal(idx, P.sample_batch(shard, 5, 0, 1, 4))


def test_inject_each_round(blobs):
    cfg, shards, w = setup(blobs, "lppa", inject_each_round=True, rounds=5)
    plain = setup(blobs, "lppa", rounds=5)[0]
    a = P.run_simulation(cfg, shards, w)
    b = P.run_simulation(plain, shards, w)
    assert all(m.tracking_residual <= 1e-9 for m in a.history)
    assert not np.array_equal(a.state.gammas(), b.state.gammas())
    cfg, shards, w = setup(blobs, "dp", inject_each_round=True, rounds=3)
    res = P.run_simulation(cfg, shards, w)
    assert res.history[-1].tracking_residual > res.initial_metrics.tracking_residual * 0.1


def test_config_validation(blobs):
    spec = M.ModelSpec("logreg", 2, 2)
    with pytest.raises(ParameterError):
        P.SimulationConfig(P.AggregationRule("dsgt"), spec, lam=0.0)
    with pytest.raises(ParameterError):
        P.SimulationConfig(P.AggregationRule("dsgt"), spec, rounds=-1)
