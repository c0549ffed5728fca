"""Shared helpers for the test-suite: toy distributions, instance builders and
the score/region duality check."""
from __future__ import annotations

import math

import numpy as np

from conformal_tpp import conformal, hawkes
from conformal_tpp.conformal import CalibrationResult, Instance, InstanceConfig
from conformal_tpp.events import make_pairs
from conformal_tpp.predictive import NextEvent, make_oracle


class ExpNext(NextEvent):
    """tau ~ Exp(rate), mark independent of tau with PMF `pmf`."""

    def __init__(self, rate=1.0, pmf=(1.0,)):
        self.rate = rate
        self.pmf = np.asarray(pmf, dtype=float)
        self.n_marks = self.pmf.size
        self.embedding = np.array([rate])

    def joint_pdfs(self, tau):
        tau = np.asarray(tau, dtype=float)
        return (self.rate * np.exp(-self.rate * tau))[..., None] * self.pmf

    def time_cdf(self, tau):
        return -np.expm1(-self.rate * np.maximum(np.asarray(tau, dtype=float), 0.0))


class MixtureNext(NextEvent):
    """Joint density sum_k w_k N_trunc(tau; m_k, s_k) style toy: per-mark
    mixtures of Gaussians in tau (truncated to tau > 0 by renormalization)."""

    def __init__(self, components):
        # components: list over marks of lists of (weight, mean, sd)
        from scipy.stats import norm
        self._norm = norm
        self.components = components
        self.n_marks = len(components)
        self.embedding = np.zeros(1)
        self._z = sum(w * norm.sf(0, m, s) for comps in components for w, m, s in comps)

    def joint_pdfs(self, tau):
        tau = np.asarray(tau, dtype=float)
        out = [sum(w * self._norm.pdf(tau, m, s) for w, m, s in comps) for comps in self.components]
        return np.where(tau[..., None] >= 0, np.stack(out, axis=-1) / self._z, 0.0)

    def time_cdf(self, tau):
        tau = np.maximum(np.asarray(tau, dtype=float), 0.0)
        c = sum(w * (self._norm.cdf(tau, m, s) - self._norm.cdf(0, m, s))
                for comps in self.components for w, m, s in comps)
        return c / self._z


def oracle_instances(n, seed, params=None, horizon=None, cfg=InstanceConfig()):
    """`n` oracle instances on simulated Hawkes histories, with their targets."""
    p = hawkes.default_params() if params is None else params
    T = horizon or hawkes.horizon_for_mean_length(p, 20.0)
    d = hawkes.simulate_dataset(p, n, T, seed=seed)
    pairs = make_pairs(d)
    model = make_oracle(p)
    insts = [Instance(model.condition(pr.history), np.random.default_rng([seed, 99, i]), cfg)
             for i, pr in enumerate(pairs)]
    return insts, pairs


def calib_at(method, alpha, q):
    """A CalibrationResult with a prescribed q-hat (a pair for product methods)."""
    if isinstance(method, conformal.ProductJoint):
        qt, qk = q
        return CalibrationResult(method.name, alpha, np.empty((0, 2)), math.nan,
                                 (CalibrationResult(method.time_method.name, alpha / 2, np.empty(0), qt),
                                  CalibrationResult(method.mark_method.name, alpha / 2, np.empty(0), qk)))
    return CalibrationResult(method.name, alpha, np.empty(0), q)


def _argmax(inst):
    return int(np.lexsort((np.arange(inst.n_marks), -inst.mark_pmf))[0])


def _threshold(method, alpha, cal):
    """Score threshold implied by a method's region at (alpha, cal)."""
    if method.conformal:
        return cal.qhat
    if isinstance(method, conformal.QuantileTime):
        return 0.0
    return 1 - alpha


def _near_grid_boundary(inst, dens_fn, tau, z):
    """True when tau is beyond the grid or within one cell of where the
    density crosses the threshold z."""
    if z is None:
        return False
    cell = inst.tau_cap / inst.cfg.grid_size
    if tau >= inst.tau_cap - cell:
        return True
    near = dens_fn(np.array([max(tau - cell, 1e-300), tau + cell]))
    return min(near) <= z <= max(near)


def expected_membership(method, inst, alpha, cal, tau, k):
    """(score-implied membership, tolerant) for a candidate (tau, k).

    `tolerant` is True when grid resolution may legitimately flip the answer.
    """
    if isinstance(method, conformal.ProductJoint):
        t_cal, k_cal = cal.parts if cal is not None else (None, None)
        a, ta = expected_membership(method.time_method, inst, alpha / 2, t_cal, tau, k)
        b, tb = expected_membership(method.mark_method, inst, alpha / 2, k_cal, tau, k)
        return a and b, ta or tb
    thr = _threshold(method, alpha, cal)
    if math.isinf(thr):
        return True, False
    s = method.score(inst, tau, k, alpha)
    inside = s <= thr
    if method.target == "mark":
        return inside or k == _argmax(inst), False
    if isinstance(method, conformal.HdrTime):
        z = conformal.hdr_threshold(inst.time_densities, thr)
        return inside, _near_grid_boundary(inst, inst.dist.time_pdf, tau, z)
    if isinstance(method, conformal.HdrJoint):
        z = conformal.hdr_threshold(inst.joint_densities, thr)
        return inside, _near_grid_boundary(inst, lambda t: inst.dist.joint_pdf(t, np.full(t.shape, k)), tau, z)
    return inside, False


def duality_holds(method, inst, alpha, cal, tau, k):
    region = method.region(inst, alpha, cal)
    expected, tolerant = expected_membership(method, inst, alpha, cal, tau, k)
    return tolerant or method.covers(region, tau, k) == expected


def random_calibration(method, inst_pool, alpha, rng):
    """q-hat drawn from the score distribution on a random pool instance."""
    if not method.conformal:
        return None
    if isinstance(method, conformal.ProductJoint):
        qt = random_calibration(method.time_method, inst_pool, alpha / 2, rng).qhat
        qk = random_calibration(method.mark_method, inst_pool, alpha / 2, rng).qhat
        return calib_at(method, alpha, (qt, qk))
    inst = inst_pool[int(rng.integers(len(inst_pool)))]
    tau = float(inst.taus[int(rng.integers(inst.taus.size))])
    k = int(rng.integers(inst.n_marks))
    q = method.score(inst, tau, k, alpha)
    if rng.uniform() < 0.05:
        q = math.inf
    return calib_at(method, alpha, q)
