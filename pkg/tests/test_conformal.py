import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conformal_tpp import conformal
from conformal_tpp.predictive import NextEvent
from conformal_tpp.conformal import (
    CalibrationResult, Instance, InstanceConfig, JointRegion, MarkSet, TimeRegion,
    conformal_quantile, hdr_threshold, hdr_time_region, mark_set, raps_scores, region_joint_hdr,
    region_joint_product, score_cqr, score_cqrl, score_prob,
)
from support import ExpNext, MixtureNext, calib_at, duality_holds, oracle_instances, random_calibration

REGISTRY = conformal.build_registry()


@pytest.fixture(scope="module")
def pool():
    insts, pairs = oracle_instances(60, seed=21)
    return insts, pairs


# -- calibration core -------------------------------------------------------

def test_conformal_quantile_examples():
    assert conformal_quantile([1, 2, 3], 0.5) == 2
    assert conformal_quantile([1, 2, 3], 0.1) == math.inf
    scores = np.random.default_rng(0).permutation(99).astype(float)
    assert conformal_quantile(scores, 0.2) == 79.0  # 80th smallest
    assert conformal_quantile([5, 5, 5, 1], 0.5) == 5  # ties kept
    with pytest.raises(ValueError):
        conformal_quantile([], 0.2)
    with pytest.raises(ValueError):
        conformal_quantile([1.0, math.nan], 0.2)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60), st.floats(0.01, 0.99))
def test_conformal_quantile_rank(scores, alpha):
    q = conformal_quantile(scores, alpha)
    n = len(scores)
    r = math.ceil((n + 1) * (1 - alpha) - 1e-9)
    if r > n:
        assert q == math.inf
    else:
        assert sum(s <= q for s in scores) >= r
        assert sum(s < q for s in scores) < r


def test_quantile_lemma_small():
    rng = np.random.default_rng(1)
    trials, n, alpha = 20_000, 19, 0.2
    cal = rng.uniform(size=(trials, n))
    q = np.sort(cal, axis=1)[:, math.ceil((n + 1) * (1 - alpha)) - 1]
    cov = np.mean(rng.uniform(size=trials) <= q)
    se = math.sqrt(0.8 * 0.2 / trials)
    assert 0.8 - 3 * se <= cov <= 0.8 + 1 / (n + 1) + 3 * se


def test_calibration_roundtrip():
    r = CalibrationResult("C-QR", 0.2, np.array([0.1, 0.5]), math.inf)
    back = CalibrationResult.from_dict(r.to_dict())
    assert back.qhat == math.inf and back.method == "C-QR"
    np.testing.assert_array_equal(back.scores, r.scores)


def test_calibrate_requires_data(pool):
    with pytest.raises(ValueError):
        REGISTRY["C-QR"].calibrate([], [], [], 0.2)
    assert REGISTRY["H-QRL"].calibrate(pool[0], [], [], 0.2) is None


# -- scores -----------------------------------------------------------------

def test_quantile_score_examples():
    assert score_cqr(1, 3, 4) == 1
    assert score_cqr(1, 3, 2) == -1
    assert score_cqr(1, 3, 1) == 0
    assert score_cqrl(5, 7) == 2
    assert score_cqrl(5, 5) == 0
    assert conformal.score_const(3.0) == 3.0


def test_prob_score_examples():
    assert score_prob(np.array([0.7, 0.3]), 0) == pytest.approx(0.3)
    assert all(score_prob(np.full(4, 0.25), k) == 0.75 for k in range(4))


def test_raps_score_examples():
    pmf = np.array([0.5, 0.3, 0.2])
    assert raps_scores(pmf, 0.5)[1] == pytest.approx(0.65)
    assert raps_scores(pmf, 0.5, 0.1, 1)[1] == pytest.approx(0.75)
    np.testing.assert_allclose(raps_scores(pmf, 0.0), [0.0, 0.5, 0.8])
    assert mark_set(raps_scores(pmf, 0.0), pmf, 0.6).marks == {0, 1}


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_raps_gamma_zero_is_aps(seed, K):
    rng = np.random.default_rng(seed)
    pmf = rng.dirichlet(np.ones(K))
    u = rng.uniform()
    a = raps_scores(pmf, u)
    b = raps_scores(pmf, u, 0.0, int(rng.integers(0, K + 1)))
    assert a.tobytes() == b.tobytes()


def test_hpd_time_exponential_closed_form():
    inst = Instance(ExpNext(1.0), np.random.default_rng(3), InstanceConfig(n_samples=2000))
    for tau in (0.1, 0.7, 2.0):
        s = conformal.score_hpd_time(inst, tau)
        ref = 1 - math.exp(-tau)
        assert abs(s - ref) < 3 * math.sqrt(ref * (1 - ref) / 2000)
    assert conformal.score_hpd_time(inst, 1e-12) <= 1 / 2000
    assert conformal.score_hpd_time(inst, 50.0) == 1.0


def test_hpd_joint_single_mark_equals_time():
    inst = Instance(ExpNext(2.0), np.random.default_rng(4))
    for tau in (0.05, 0.4, 1.5):
        assert conformal.score_hpd_joint(inst, tau, 0) == conformal.score_hpd_time(inst, tau)


def test_hpd_joint_grid_oracle():
    # two marks, uniform times on different supports
    class Toy(NextEvent):
        n_marks = 2
        embedding = np.zeros(1)

        def joint_pdfs(self, tau):
            tau = np.asarray(tau, dtype=float)
            a = np.where((tau > 0) & (tau < 1), 0.6, 0.0)   # mark 0: density 0.6 on (0,1)
            b = np.where((tau > 0) & (tau < 2), 0.2, 0.0)   # mark 1: density 0.2 on (0,2)
            return np.stack([a, b], axis=-1)

        def time_cdf(self, tau):
            tau = np.clip(np.asarray(tau, dtype=float), 0, None)
            return 0.6 * np.minimum(tau, 1) + 0.2 * np.minimum(tau, 2)

    n = 4000
    inst = Instance(Toy(), np.random.default_rng(8), InstanceConfig(n_samples=n))
    # P(f(T, K) >= 0.2) = 1 and P(f >= 0.6) = 0.6 by direct integration
    for tau, k, ref in ((0.5, 1, 1.0), (0.5, 0, 0.6)):
        s = conformal.score_hpd_joint(inst, tau, k)
        assert abs(s - ref) <= 3 * math.sqrt(ref * (1 - ref) / n) + 1e-12


# -- regions ----------------------------------------------------------------

def test_time_region_types():
    r = TimeRegion.interval(-1.0, 2.0)
    assert r.intervals == ((0.0, 2.0),) and r.length == 2.0
    assert TimeRegion.interval(3.0, 2.0).length == 0.0
    assert not TimeRegion(()).contains(0.5)
    with pytest.raises(ValueError):
        TimeRegion.interval(0.0, math.inf)


def test_product_region_examples():
    r = region_joint_product(TimeRegion.interval(1.0, 3.0), MarkSet(frozenset({0, 2, 4})))
    assert r.length == 6.0
    assert len({r.regions[k] for k in r.marks}) == 1
    empty = region_joint_product(TimeRegion(()), MarkSet(frozenset({0, 1})))
    assert empty.length == 0.0
    for tau in np.linspace(0, 4, 41):
        for k in range(5):
            assert r.contains(tau, k) == (1.0 <= tau <= 3.0 and k in {0, 2, 4})


def test_hdr_length_is_sum_over_marks():
    r = JointRegion({0: TimeRegion(((0.8, 2.6),)), 2: TimeRegion(((0.8, 1.2), (2.5, 2.9)))}, "hdr")
    assert r.length == pytest.approx(2.6)
    assert r.marks == {0, 2}


def test_heuristic_qrl_exponential():
    inst = Instance(ExpNext(1.0), np.random.default_rng(0))
    region = REGISTRY["H-QRL"].region(inst, 0.2, None)
    assert region.intervals[0][0] == 0.0
    assert region.intervals[0][1] == pytest.approx(-math.log(0.2), abs=1e-8)


def test_hdr_on_decreasing_density_matches_qrl():
    inst = Instance(ExpNext(1.0), np.random.default_rng(2), InstanceConfig(n_samples=5000))
    hdr = hdr_time_region(inst, 0.8)
    assert len(hdr.intervals) == 1
    a, b = hdr.intervals[0]
    cell = inst.tau_cap / inst.cfg.grid_size
    assert a == 0.0
    # the HDR edge is the empirical 80% point of the samples, within one cell
    assert abs(b - np.quantile(inst.taus, 0.8)) <= cell + 0.02
    qrl = REGISTRY["H-QRL"].region(inst, 0.2, None).intervals[0][1]
    # sampling error of the empirical quantile: sqrt(p (1 - p) / n) / f(q)
    assert abs(b - qrl) <= cell + 3 * math.sqrt(0.16 / 5000) / 0.2


def test_const_region_and_unbounded():
    inst = Instance(ExpNext(1.0), np.random.default_rng(0))
    m = REGISTRY["C-Const"]
    assert m.region(inst, 0.2, calib_at(m, 0.2, 1.5)).intervals == ((0.0, 1.5),)
    r = m.region(inst, 0.2, calib_at(m, 0.2, math.inf))
    assert r.unbounded and r.contains(1e9)
    assert r.length == pytest.approx(inst.tau_cap)


def test_cqr_region_is_heuristic_shifted():
    inst = Instance(ExpNext(1.0), np.random.default_rng(0))
    m = REGISTRY["C-QR"]
    q = 0.1
    r = m.region(inst, 0.2, calib_at(m, 0.2, q))
    lo, hi = inst.quantile(0.1), inst.quantile(0.9)
    assert r.intervals[0] == pytest.approx((lo - q, hi + q))
    # a large q-hat clamps the lower endpoint at zero
    assert m.region(inst, 0.2, calib_at(m, 0.2, 5.0)).intervals[0][0] == 0.0


def test_mark_set_guard():
    pmf = np.array([0.2, 0.5, 0.3])
    assert mark_set(raps_scores(pmf, 0.5), pmf, -1.0).marks == {1}
    assert mark_set(raps_scores(pmf, 0.5), pmf, 10.0).marks == {0, 1, 2}


def test_hdr_nesting():
    inst = Instance(MixtureNext([[(0.5, 1.0, 0.2), (0.2, 2.7, 0.2)], [(0.3, 1.8, 0.3)]]),
                    np.random.default_rng(1), InstanceConfig(n_samples=500))
    prev = None
    for level in (0.1, 0.3, 0.6, 0.9):
        r = region_joint_hdr(inst, level)
        mask = np.array([[r.contains(t, k) for k in range(2)] for t in inst.grid])
        if prev is not None:
            assert np.all(mask >= prev)
        prev = mask


def test_hdr_toy_structure():
    # mark 0: one wide bump; mark 1: low density everywhere; mark 2: two bumps
    dist = MixtureNext([
        [(0.35, 1.7, 0.5)],
        [(0.15, 2.0, 3.0)],
        [(0.25, 1.0, 0.12), (0.25, 2.7, 0.12)],
    ])
    inst = Instance(dist, np.random.default_rng(0), InstanceConfig(n_samples=2000))
    r = region_joint_hdr(inst, 0.7)
    assert r.marks == {0, 2}
    assert len(r.regions[2].intervals) == 2
    # grid thresholding oracle at the same z
    z = hdr_threshold(inst.joint_densities, 0.7)
    cell = inst.tau_cap / inst.cfg.grid_size
    expect = dist.joint_pdfs(inst.grid)[:, 2] > z
    assert r.regions[2].length == pytest.approx(expect.sum() * cell)


def test_oracle_hdr_coverage_by_sampling():
    dist = MixtureNext([[(0.6, 1.0, 0.3)], [(0.4, 2.0, 0.5)]])
    inst = Instance(dist, np.random.default_rng(5), InstanceConfig(n_samples=4000))
    r = region_joint_hdr(inst, 0.8)
    rng = np.random.default_rng(6)
    n = 4000
    fresh = Instance(dist, rng, InstanceConfig(n_samples=n))  # independent draws of (tau, k)
    cov = np.mean([r.contains(t, k) for t, k in zip(fresh.taus, fresh.sample_marks)])
    assert abs(cov - 0.8) < 3 * math.sqrt(0.16 / n) + 3 * math.sqrt(0.16 / 4000)


def test_single_mark_joint_hdr_equals_time_hdr():
    inst = Instance(ExpNext(1.5), np.random.default_rng(9))
    for level in (0.3, 0.8):
        assert region_joint_hdr(inst, level).regions[0] == hdr_time_region(inst, level)


# -- duality ----------------------------------------------------------------

@pytest.mark.parametrize("name", conformal.METHOD_NAMES)
def test_score_region_duality(pool, name):
    method = REGISTRY[name]
    insts, _ = pool
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for inst in insts:
        alpha = float(rng.choice([0.1, 0.2, 0.5]))
        cal = random_calibration(method, insts, alpha, rng)
        for tau in (*inst.taus[:5], float(rng.exponential(0.2))):
            k = int(rng.integers(inst.n_marks))
            assert duality_holds(method, inst, alpha, cal, float(tau), k)


def test_registry_contents():
    assert set(conformal.CONFORMAL_METHODS) == {
        "C-QR", "C-QRL", "C-Const", "C-HDR-T", "C-PROB", "C-APS", "C-RAPS", "C-QRL-RAPS", "C-HDR-RAPS", "C-HDR"}
    assert conformal.MethodParams() == conformal.MethodParams(gamma=0.01, k_reg=5)
    for name, m in REGISTRY.items():
        assert m.target in ("time", "mark", "joint")
