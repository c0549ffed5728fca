"""Predictive distributions of the next event given a history.

A `PredictiveModel` maps a history to a `NextEvent` object exposing the joint
density f(tau, k | h), the time density/CDF and the conditional mark PMF.
Every conformal score is written against this surface only.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Sequence as Seq

import numpy as np

from . import clnm, hawkes
from .events import Event
from .hawkes import HawkesParams, HawkesState

MAX_DOUBLINGS = 60
MAX_BISECTIONS = 100


class NextEvent(ABC):
    """Conditional distribution of (tau, k) for the next event."""

    n_marks: int
    embedding: np.ndarray

    @abstractmethod
    def joint_pdfs(self, tau) -> np.ndarray:
        """f(tau, k | h) for all k; shape tau.shape + (K,)."""

    @abstractmethod
    def time_cdf(self, tau) -> np.ndarray:
        ...

    def time_pdf(self, tau) -> np.ndarray:
        return np.sum(self.joint_pdfs(tau), axis=-1)

    def joint_pdf(self, tau, k) -> np.ndarray:
        dens = self.joint_pdfs(tau)
        return np.take_along_axis(dens, np.asarray(k)[..., None], axis=-1)[..., 0]

    def mark_pmf_given_time(self, tau) -> np.ndarray:
        dens = self.joint_pdfs(tau)
        return dens / np.sum(dens, axis=-1, keepdims=True)


class PredictiveModel(ABC):
    n_marks: int

    @abstractmethod
    def condition(self, history: Seq[Event]) -> NextEvent:
        ...

    def embed(self, history: Seq[Event]) -> np.ndarray:
        return self.condition(history).embedding


# ---------------------------------------------------------------------------
# Hawkes-based models
# ---------------------------------------------------------------------------

class HawkesNext(NextEvent):
    def __init__(self, params: HawkesParams, state: HawkesState, embedding: np.ndarray | None = None):
        self.params = params
        self.state = state
        self.n_marks = params.n_marks
        self.embedding = state.embedding() if embedding is None else embedding

    def _cum(self, tau):
        return np.sum(hawkes.compensators(self.params, self.state, tau), axis=-1)

    def joint_pdfs(self, tau):
        tau = np.asarray(tau, dtype=float)
        lam = hawkes.intensities(self.params, self.state, tau)
        return lam * np.exp(-self._cum(tau))[..., None]

    def time_pdf(self, tau):
        tau = np.asarray(tau, dtype=float)
        lam = hawkes.intensities(self.params, self.state, tau)
        return np.sum(lam, axis=-1) * np.exp(-self._cum(tau))

    def time_cdf(self, tau):
        tau = np.maximum(np.asarray(tau, dtype=float), 0.0)
        return -np.expm1(-self._cum(tau))

    def mark_pmf_given_time(self, tau):
        lam = hawkes.intensities(self.params, self.state, np.asarray(tau, dtype=float))
        return lam / np.sum(lam, axis=-1, keepdims=True)


class HawkesModel(PredictiveModel):
    """Exact conditional distribution of a Hawkes process.

    `embed_params` selects the parameters used to build the embedding; by
    default the model's own.
    """

    def __init__(self, params: HawkesParams, embed_params: HawkesParams | None = None, name: str = "oracle"):
        self.params = params
        self.embed_params = embed_params
        self.n_marks = params.n_marks
        self.name = name

    def condition(self, history):
        state = hawkes.state_after(self.params, history)
        emb = None
        if self.embed_params is not None:
            emb = hawkes.state_after(self.embed_params, history).embedding()
        return HawkesNext(self.params, state, emb)


def make_oracle(p: HawkesParams) -> HawkesModel:
    return HawkesModel(p, name="oracle")


def make_misspecified(p: HawkesParams, kind: str, c: float = 1.0) -> HawkesModel:
    """`const-rate`: homogeneous Poisson at the stationary rates of p.
    `beta-scaled`: the true model with every decay rate multiplied by c.

    The const-rate model ignores history entirely, so its embedding is the
    true excitation state (otherwise conditional-coverage metrics would see
    identical inputs everywhere).
    """
    if kind == "const-rate":
        rates = hawkes.stationary_rates(p)
        poisson = HawkesParams(rates, np.zeros_like(p.alpha), np.ones_like(p.beta))
        return HawkesModel(poisson, embed_params=p, name="const-rate")
    if kind == "beta-scaled":
        if c <= 0:
            raise ValueError("c must be > 0")
        return HawkesModel(p.with_beta(p.beta * c), name=f"beta-scaled({c:g})")
    raise ValueError(f"unknown misspecification kind {kind!r}")


# ---------------------------------------------------------------------------
# CLNM
# ---------------------------------------------------------------------------

class ClnmNext(NextEvent):
    def __init__(self, params: clnm.ClnmParams, h: np.ndarray):
        self.params = params
        self.embedding = h
        self.n_marks = params.dims.n_marks

    def time_pdf(self, tau):
        return clnm.time_density(self.params, self.embedding, tau)

    def time_cdf(self, tau):
        return clnm.time_cdf(self.params, self.embedding, tau)

    def mark_pmf_given_time(self, tau):
        return clnm.mark_pmf_given_time(self.params, self.embedding, tau)

    def joint_pdfs(self, tau):
        return self.time_pdf(tau)[..., None] * self.mark_pmf_given_time(tau)


class ClnmModel(PredictiveModel):
    name = "clnm"

    def __init__(self, params: clnm.ClnmParams):
        self.params = params
        self.n_marks = params.dims.n_marks

    def condition(self, history):
        return ClnmNext(self.params, clnm.encode(self.params, history))


def make_clnm(params: clnm.ClnmParams) -> ClnmModel:
    return ClnmModel(params)


# ---------------------------------------------------------------------------
# quantiles, sampling, marginal mark PMF
# ---------------------------------------------------------------------------

def time_quantile(dist: NextEvent, level) -> np.ndarray:
    """Inverse of the time CDF by bracket doubling then bisection (vectorized)."""
    level = np.asarray(level, dtype=float)
    if np.any((level <= 0) | (level >= 1)):
        raise ValueError("quantile level must lie in (0, 1)")
    flat = level.ravel()
    hi = np.ones_like(flat)
    for _ in range(MAX_DOUBLINGS):
        low_side = dist.time_cdf(hi) < flat
        if not np.any(low_side):
            break
        hi = np.where(low_side, 2.0 * hi, hi)
    else:
        raise ArithmeticError("time CDF never reaches the requested level")
    lo = np.zeros_like(flat)
    for _ in range(MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        below = dist.time_cdf(mid) < flat
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * hi):
            break
    return (0.5 * (lo + hi)).reshape(level.shape)


def sample_time(dist: NextEvent, n: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-transform samples of the inter-arrival time."""
    if n < 1:
        raise ValueError("n must be >= 1")
    u = rng.uniform(size=n)
    # Generator.uniform can return exactly 0
    u = np.clip(u, np.finfo(float).tiny, 1 - np.finfo(float).epsneg)
    return time_quantile(dist, u)


def mark_pmf_marginal(dist: NextEvent, n_samples: int = 100, rng: np.random.Generator | None = None,
                      taus: np.ndarray | None = None) -> np.ndarray:
    """Monte Carlo estimate of p(k | h) = E_tau[p(k | tau, h)].

    Pass `taus` to reuse an existing sample set.
    """
    if taus is None:
        if rng is None:
            raise ValueError("need either rng or taus")
        taus = sample_time(dist, n_samples, rng)
    pmf = np.mean(dist.mark_pmf_given_time(taus), axis=0)
    return pmf / pmf.sum()
