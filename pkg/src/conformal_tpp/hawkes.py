"""Multivariate Hawkes process with exponential kernels.

The intensity of mark k is

    lambda_k(t) = mu_k + sum_{k'} sum_{t_j < t, k_j = k'} alpha[k', k] beta[k', k] exp(-beta[k', k] (t - t_j))

Everything here is exact: the K x K matrix of decayed excitations is a
sufficient statistic of the history, so intensities, compensators,
likelihoods and simulation never need numerical integration.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq

from .events import Dataset, Event, Sequence

_TINY = 1e-12


@dataclass(frozen=True)
class HawkesParams:
    mu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        alpha = np.asarray(self.alpha, dtype=float)
        beta = np.asarray(self.beta, dtype=float)
        K = mu.shape[0]
        if mu.ndim != 1 or alpha.shape != (K, K) or beta.shape != (K, K):
            raise ValueError("mu must be (K,), alpha and beta (K, K)")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
            raise ValueError("Hawkes parameters must be finite")
        if np.any(mu <= 0) or np.any(alpha < 0) or np.any(beta <= 0):
            raise ValueError("need mu > 0, alpha >= 0, beta > 0")
        for name, arr in (("mu", mu), ("alpha", alpha), ("beta", beta)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_marks(self) -> int:
        return self.mu.shape[0]

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.alpha))))

    @classmethod
    def from_dict(cls, obj: dict) -> "HawkesParams":
        return cls(np.array(obj["mu"]), np.array(obj["alpha"]), np.array(obj["beta"]))

    @classmethod
    def from_json(cls, path: str | Path) -> "HawkesParams":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "alpha": self.alpha.tolist(), "beta": self.beta.tolist()}

    def with_beta(self, beta: np.ndarray) -> "HawkesParams":
        return HawkesParams(self.mu, self.alpha, beta)


def default_params() -> HawkesParams:
    """The 5-mark configuration shipped as a package fixture."""
    text = resources.files("conformal_tpp.data").joinpath("hawkes_default.json").read_text()
    return HawkesParams.from_dict(json.loads(text))


@dataclass(frozen=True)
class HawkesState:
    """Excitation accumulators S[k', k] at reference time `time`.

    S[k', k] = sum over past mark-k' events of beta[k', k] exp(-beta[k', k] (time - t_j)).
    """

    S: np.ndarray
    time: float = 0.0

    @classmethod
    def empty(cls, n_marks: int) -> "HawkesState":
        return cls(np.zeros((n_marks, n_marks)), 0.0)

    def advance(self, p: HawkesParams, dt: float) -> "HawkesState":
        return HawkesState(self.S * np.exp(-p.beta * dt), self.time + dt)

    def add_event(self, p: HawkesParams, k: int) -> "HawkesState":
        S = self.S.copy()
        S[k] += p.beta[k]
        return HawkesState(S, self.time)

    def embedding(self) -> np.ndarray:
        return self.S.ravel().copy()


def state_after(p: HawkesParams, events: Iterable[Event]) -> HawkesState:
    """State at the time of the last event, that event included."""
    s = HawkesState.empty(p.n_marks)
    for e in events:
        if e.t < s.time:
            raise ValueError("events must be time-ordered")
        s = s.advance(p, e.t - s.time).add_event(p, e.k)
    return s


def intensities(p: HawkesParams, s: HawkesState, dt=0.0) -> np.ndarray:
    """Intensities of all marks at time s.time + dt; shape dt.shape + (K,)."""
    dt = np.asarray(dt, dtype=float)
    decay = np.exp(-p.beta * dt[..., None, None])
    return p.mu + np.sum(p.alpha * s.S * decay, axis=-2)


def intensity(p: HawkesParams, s: HawkesState, k: int, dt: float = 0.0) -> float:
    return float(intensities(p, s, dt)[k])


def compensators(p: HawkesParams, s: HawkesState, dt) -> np.ndarray:
    """Integrated intensities of all marks over [s.time, s.time + dt]."""
    dt = np.asarray(dt, dtype=float)
    growth = -np.expm1(-p.beta * dt[..., None, None]) / p.beta
    return p.mu * dt[..., None] + np.sum(p.alpha * s.S * growth, axis=-2)


def compensator(p: HawkesParams, s: HawkesState, dt: float, k: int) -> float:
    if dt < 0:
        raise ValueError("dt must be >= 0")
    return float(compensators(p, s, dt)[k])


def stationary_rates(p: HawkesParams) -> np.ndarray:
    """Mean event rates of the stationary process, (I - alpha^T)^{-1} mu."""
    if p.spectral_radius >= 1.0:
        raise ValueError(f"non-stationary parameters (spectral radius {p.spectral_radius:.4f} >= 1)")
    K = p.n_marks
    rates = np.linalg.solve(np.eye(K) - p.alpha.T, p.mu)
    if np.any(rates <= 0):
        raise ValueError("non-stationary parameters (non-positive stationary rate)")
    return rates


def expected_count(p: HawkesParams, horizon: float) -> float:
    """Expected number of events on [0, horizon] for a process started empty.

    The mean excitations x[k', k] = E[S[k', k]] obey the linear ODE
    dx/dt = -beta * x + beta * m[k'] with m = mu + sum_k' alpha[k', :] x[k', :],
    so the count follows from one matrix exponential of the augmented system.
    """
    K = p.n_marks
    n = K * K
    A = np.zeros((n + 2, n + 2))  # state: x (row-major), N, constant 1
    for kp in range(K):
        for k in range(K):
            i = kp * K + k
            b = p.beta[kp, k]
            A[i, i] -= b
            # m[kp] = mu[kp] + sum_j alpha[j, kp] x[j, kp]
            for j in range(K):
                A[i, j * K + kp] += b * p.alpha[j, kp]
            A[i, n + 1] += b * p.mu[kp]
    for k in range(K):
        for j in range(K):
            A[n, j * K + k] += p.alpha[j, k]
        A[n, n + 1] += p.mu[k]
    y0 = np.zeros(n + 2)
    y0[n + 1] = 1.0
    return float((expm(A * horizon) @ y0)[n])


def horizon_for_mean_length(p: HawkesParams, mean_length: float = 20.0) -> float:
    """Horizon whose expected event count, starting empty, is `mean_length`."""
    if mean_length <= 0:
        raise ValueError("mean_length must be > 0")
    hi = mean_length / float(np.sum(stationary_rates(p)))
    while expected_count(p, hi) < mean_length:
        hi *= 2.0
    return float(brentq(lambda T: expected_count(p, T) - mean_length, 0.0, hi, xtol=1e-12))


def simulate(p: HawkesParams, horizon: float, rng: np.random.Generator) -> Sequence:
    """Ogata thinning on [0, horizon].

    Between events every intensity is non-increasing, so the total intensity
    at the current time bounds it until the next proposal.
    """
    if horizon <= 0:
        raise ValueError("horizon must be > 0")
    s = HawkesState.empty(p.n_marks)
    t = 0.0
    events = []
    while True:
        lam_bar = float(np.sum(intensities(p, s)))
        t += rng.exponential(1.0 / lam_bar)
        if t > horizon:
            break
        s = s.advance(p, t - s.time)
        lam = intensities(p, s)
        lam_tot = float(np.sum(lam))
        if rng.uniform() * lam_bar <= lam_tot:
            k = int(rng.choice(p.n_marks, p=lam / lam_tot))
            events.append(Event(t, k))
            s = s.add_event(p, k)
    return Sequence(tuple(events), horizon)


def simulate_dataset(
    p: HawkesParams,
    n_sequences: int,
    horizon: float,
    seed: int = 0,
    min_length: int = 2,
) -> Dataset:
    """Simulate `n_sequences` sequences with at least `min_length` events.

    Sequence i uses its own stream derived from (seed, i); sequences that are
    too short are redrawn from the continuation of that stream.
    """
    seqs = []
    for i in range(n_sequences):
        rng = np.random.default_rng([seed, i])
        while True:
            seq = simulate(p, horizon, rng)
            if len(seq) >= min_length:
                break
        seqs.append(Sequence(seq.events, horizon, seq_id=str(i)))
    return Dataset(tuple(seqs), p.n_marks)


def nll(p: HawkesParams, seq: Sequence) -> float:
    """Exact negative log-likelihood of one sequence on [0, seq.horizon]."""
    seq.validate(n_marks=p.n_marks)
    s = HawkesState.empty(p.n_marks)
    total = 0.0
    for e in seq.events:
        dt = e.t - s.time
        lam = intensities(p, s, dt)[e.k]
        total += np.log(max(lam, _TINY)) - np.sum(compensators(p, s, dt))
        s = s.advance(p, dt).add_event(p, e.k)
    total -= np.sum(compensators(p, s, seq.horizon - s.time))
    return float(-total)


def time_rescale(p: HawkesParams, seq: Sequence) -> np.ndarray:
    """Gaps mapped through the total compensator; i.i.d. Exp(1) under p."""
    s = HawkesState.empty(p.n_marks)
    out = np.empty(len(seq))
    for j, e in enumerate(seq.events):
        dt = e.t - s.time
        out[j] = np.sum(compensators(p, s, dt))
        s = s.advance(p, dt).add_event(p, e.k)
    return out
