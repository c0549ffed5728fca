import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from conformal_tpp import clnm, hawkes
from conformal_tpp.clnm import ClnmDims, ClnmParams, TrainConfig
from conformal_tpp.events import Dataset, Event, Sequence

SMALL = ClnmDims(n_marks=3, d_t=4, d_k=3, d_h=4, d_1=5, n_components=2)


def _random_params(dims, rng, scale=0.5):
    p = clnm.init_params(dims, seed=int(rng.integers(2**31)))
    return ClnmParams(dims, {k: v + scale * rng.standard_normal(v.shape) for k, v in p.weights.items()})


def _random_seq(rng, K, n=4):
    t = np.cumsum(rng.exponential(0.4, size=n))
    return Sequence(tuple(Event(float(a), int(k)) for a, k in zip(t, rng.integers(0, K, n))), float(t[-1] + 0.3))


@pytest.fixture(scope="module")
def hawkes_data():
    p = hawkes.default_params()
    return hawkes.simulate_dataset(p, 96, hawkes.horizon_for_mean_length(p, 10.0), seed=4)


def test_time_embedding_examples():
    np.testing.assert_allclose(clnm.time_embedding(0.0, 6), [0, 1, 0, 1, 0, 1])
    np.testing.assert_allclose(clnm.time_embedding(math.pi / 2, 2), [1, 0], atol=1e-15)
    assert clnm.time_frequencies(4)[1] == pytest.approx(0.031623, abs=1e-6)
    with pytest.raises(ValueError):
        clnm.time_embedding(1.0, 3)


def test_encode_empty_and_zero_weights():
    p = ClnmParams.zeros(SMALL)
    np.testing.assert_array_equal(clnm.encode(p, []), np.zeros(4))
    np.testing.assert_array_equal(clnm.encode(p, [Event(0.3, 1)]), np.zeros(4))
    with pytest.raises(ValueError):
        clnm.encode(p, [Event(0.3, 3)])


def test_encode_streaming_equals_batch():
    rng = np.random.default_rng(0)
    p = _random_params(SMALL, rng)
    seq = _random_seq(rng, 3, 6)
    h = clnm.encode(p, seq.events[:3])
    np.testing.assert_allclose(clnm.encode(p, seq.events[3:], h0=h), clnm.encode(p, seq.events), rtol=1e-14)


def test_standard_lognormal_density():
    dims = ClnmDims(n_marks=1, d_t=2, d_k=1, d_h=1, d_1=1, n_components=1)
    p = ClnmParams.zeros(dims)
    assert clnm.time_density(p, np.zeros(1), 1.0) == pytest.approx(1 / math.sqrt(2 * math.pi))
    with pytest.raises(ValueError):
        clnm.time_density(p, np.zeros(1), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_time_density_integrates_to_one(seed):
    rng = np.random.default_rng(seed)
    p = _random_params(SMALL, rng)
    h = np.tanh(rng.standard_normal(4))  # GRU states lie in (-1, 1)
    w, _, _ = clnm.mixture_params(p, h)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    # integrate in log-time, where each component is a Gaussian
    total, _ = integrate.quad(lambda u: math.exp(u) * float(clnm.time_density(p, h, math.exp(u))),
                              -60, 60, limit=400, epsabs=1e-12)
    assert total == pytest.approx(1.0, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-6, 1e3))
def test_mark_pmf_sums_to_one(seed, tau):
    rng = np.random.default_rng(seed)
    p = _random_params(SMALL, rng, scale=2.0)
    pmf = clnm.mark_pmf_given_time(p, rng.standard_normal(4), tau)
    assert np.all(pmf >= 0)
    assert abs(pmf.sum() - 1.0) < 1e-12


def test_mark_pmf_zero_weights_uniform():
    p = ClnmParams.zeros(SMALL)
    np.testing.assert_allclose(clnm.mark_pmf_given_time(p, np.ones(4), 0.7), np.full(3, 1 / 3))


def test_time_cdf_matches_quadrature():
    rng = np.random.default_rng(3)
    p = _random_params(SMALL, rng)
    h = np.tanh(rng.standard_normal(4))
    for tau in (0.05, 0.4, 2.0):
        ref, _ = integrate.quad(lambda u: math.exp(u) * float(clnm.time_density(p, h, math.exp(u))),
                                math.log(1e-12), math.log(tau), epsabs=1e-13, limit=400)
        assert float(clnm.time_cdf(p, h, tau)) == pytest.approx(ref, abs=1e-6)


def test_survival_term_zero_at_last_event():
    p = ClnmParams.zeros(SMALL)
    assert float(clnm.log_survival(p, np.zeros(4), 0.0)) == 0.0


def test_torch_loss_matches_numpy():
    rng = np.random.default_rng(1)
    p = _random_params(SMALL, rng)
    batch = [_random_seq(rng, 3, n) for n in (2, 5, 3)]
    loss, _ = clnm.nll_loss(p, batch)
    assert loss == pytest.approx(np.mean([clnm.sequence_nll(p, s) for s in batch]), rel=1e-12)


def test_gradients_match_finite_differences_small():
    # the full 20-draw check lives in the acceptance suite
    rng = np.random.default_rng(7)
    p = _random_params(SMALL, rng)
    batch = [_random_seq(rng, 3, 3)]
    _, grads = clnm.nll_loss(p, batch)
    h = 1e-5
    for name in ("gru_w_hh", "w_sigma", "w_1", "mark_embedding"):
        w = p.weights[name]
        for idx in list(np.ndindex(w.shape))[:6]:
            plus, minus = {k: v.copy() for k, v in p.weights.items()}, {k: v.copy() for k, v in p.weights.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            fd = (clnm.sequence_nll(ClnmParams(SMALL, plus), batch[0])
                  - clnm.sequence_nll(ClnmParams(SMALL, minus), batch[0])) / (2 * h)
            assert grads[name][idx] == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_loss_decreases_over_fifty_steps(hawkes_data):
    import torch
    seqs = list(hawkes_data.sequences[:64])
    module = clnm.ClnmModule.from_params(clnm.init_params(ClnmDims(5), seed=0))
    opt = torch.optim.Adam(module.parameters(), lr=1e-2)
    first = float(module(seqs).detach())
    for _ in range(50):
        opt.zero_grad()
        loss = module(seqs)
        loss.backward()
        opt.step()
    assert float(module(seqs).detach()) < first


def test_train_contracts(hawkes_data):
    train_d = Dataset(hawkes_data.sequences[:64], 5)
    val_d = Dataset(hawkes_data.sequences[64:], 5)
    dims = ClnmDims(5, d_h=8, d_1=8, n_components=2)
    init = clnm.init_params(dims, seed=1)
    cfg = TrainConfig(lr=1e-2, max_epochs=5, patience=2, batch_size=16, seed=3)
    a = clnm.train(init, train_d, val_d, cfg)
    b = clnm.train(init, train_d, val_d, cfg)
    for k in a.weights:
        np.testing.assert_array_equal(a.weights[k], b.weights[k])
    val = lambda q: np.mean([clnm.sequence_nll(q, s) for s in val_d.sequences])
    assert val(a) <= val(init) + 1e-12
    # patience 0 stops after one epoch
    one = clnm.train(init, train_d, val_d, TrainConfig(lr=1e-2, max_epochs=5, patience=0, batch_size=16, seed=3))
    one_epoch = clnm.train(init, train_d, val_d, TrainConfig(lr=1e-2, max_epochs=1, patience=0, batch_size=16, seed=3))
    for k in one.weights:
        np.testing.assert_array_equal(one.weights[k], one_epoch.weights[k])


def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.max_epochs, cfg.patience) == (1e-3, 500, 100)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=10, patience=11)


def test_checkpoint_roundtrip(tmp_path):
    p = clnm.init_params(SMALL, seed=2)
    path = tmp_path / "ck.json"
    p.save(path)
    q = ClnmParams.load(path)
    assert q.dims == p.dims
    for k in p.weights:
        np.testing.assert_array_equal(p.weights[k], q.weights[k])
    with pytest.raises(ValueError):
        ClnmParams.from_dict({"format": "other", "dims": {}, "weights": {}})
