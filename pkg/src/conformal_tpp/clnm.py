"""Conditional log-normal mixture (CLNM) neural point process.

Event encoder: sinusoidal embedding of the absolute arrival time concatenated
with a learned mark embedding. History encoder: a GRU. Decoder: a mixture of
log-normals for the inter-arrival time and an MLP over [h, log tau] for the
mark PMF given the time.

Training runs through torch (float64, autograd, Adam). Frozen parameters are
exported to plain numpy arrays (`ClnmParams`) and evaluated by the numpy
functions below, which is what the predictive layer uses.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence as Seq

import numpy as np
import torch
from scipy.special import log_ndtr, logsumexp, softmax

from .events import Dataset, Event, Sequence

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "clnm-checkpoint/1"
LOG_TAU_MIN = math.log(1e-12)
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class ClnmDims:
    n_marks: int
    d_t: int = 8
    d_k: int = 8
    d_h: int = 32
    d_1: int = 32
    n_components: int = 8

    def __post_init__(self):
        if self.d_t < 2 or self.d_t % 2:
            raise ValueError("d_t must be even and >= 2")
        if min(self.n_marks, self.d_k, self.d_h, self.d_1, self.n_components) < 1:
            raise ValueError("all dimensions must be >= 1")


# weight name -> shape as a function of dims
def _shapes(d: ClnmDims) -> dict[str, tuple[int, ...]]:
    d_in = d.d_t + d.d_k
    return {
        "mark_embedding": (d.d_k, d.n_marks),
        "gru_w_ih": (3 * d.d_h, d_in),
        "gru_w_hh": (3 * d.d_h, d.d_h),
        "gru_b_ih": (3 * d.d_h,),
        "gru_b_hh": (3 * d.d_h,),
        "w_p": (d.n_components, d.d_h),
        "b_p": (d.n_components,),
        "w_mu": (d.n_components, d.d_h),
        "b_mu": (d.n_components,),
        "w_sigma": (d.n_components, d.d_h),
        "b_sigma": (d.n_components,),
        "w_1": (d.d_1, d.d_h + 1),
        "b_1": (d.d_1,),
        "w_2": (d.n_marks, d.d_1),
        "b_2": (d.n_marks,),
    }


@dataclass
class ClnmParams:
    """All CLNM weights as numpy arrays. GRU gate order is (reset, update, new)."""

    dims: ClnmDims
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = _shapes(self.dims)
        if set(self.weights) != set(shapes):
            raise ValueError(f"weights must have exactly the keys {sorted(shapes)}")
        for name, shape in shapes.items():
            w = np.asarray(self.weights[name], dtype=float)
            if w.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {w.shape}")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"{name}: non-finite entries")
            self.weights[name] = w

    def __getattr__(self, name):
        weights = self.__dict__.get("weights", {})
        if name in weights:
            return weights[name]
        raise AttributeError(name)

    @classmethod
    def zeros(cls, dims: ClnmDims) -> "ClnmParams":
        return cls(dims, {k: np.zeros(s) for k, s in _shapes(dims).items()})

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "dims": vars(self.dims),
            "weights": {k: v.tolist() for k, v in self.weights.items()},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ClnmParams":
        if obj.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {obj.get('format')!r}")
        dims = ClnmDims(**obj["dims"])
        return cls(dims, {k: np.array(v, dtype=float) for k, v in obj["weights"].items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "ClnmParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# numpy forward path
# ---------------------------------------------------------------------------

def time_frequencies(d_t: int) -> np.ndarray:
    if d_t < 2 or d_t % 2:
        raise ValueError("d_t must be even and >= 2")
    s = np.arange(d_t // 2)
    return 1000.0 ** (-2.0 * s / d_t)


def time_embedding(t, d_t: int) -> np.ndarray:
    """[sin(w_0 t), cos(w_0 t), sin(w_1 t), cos(w_1 t), ...] with w_s = 1000^(-2s/d_t)."""
    t = np.asarray(t, dtype=float)
    angles = t[..., None] * time_frequencies(d_t)
    out = np.empty(t.shape + (d_t,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_step(params: ClnmParams, h: np.ndarray, x: np.ndarray) -> np.ndarray:
    d_h = params.dims.d_h
    gi = params.gru_w_ih @ x + params.gru_b_ih
    gh = params.gru_w_hh @ h + params.gru_b_hh
    r = _sigmoid(gi[:d_h] + gh[:d_h])
    z = _sigmoid(gi[d_h:2 * d_h] + gh[d_h:2 * d_h])
    n = np.tanh(gi[2 * d_h:] + r * gh[2 * d_h:])
    return (1.0 - z) * n + z * h


def event_embedding(params: ClnmParams, e: Event) -> np.ndarray:
    if not 0 <= e.k < params.dims.n_marks:
        raise ValueError(f"mark {e.k} outside 0..{params.dims.n_marks - 1}")
    return np.concatenate([time_embedding(e.t, params.dims.d_t), params.mark_embedding[:, e.k]])


def encode(params: ClnmParams, history: Seq[Event], h0: Optional[np.ndarray] = None) -> np.ndarray:
    """GRU hidden state after consuming `history`; zeros for an empty history."""
    h = np.zeros(params.dims.d_h) if h0 is None else np.array(h0, dtype=float)
    for e in history:
        h = gru_step(params, h, event_embedding(params, e))
    return h


def mixture_params(params: ClnmParams, h: np.ndarray):
    """Mixture weights, log-means and log-scales (p_c, mu_c, sigma_c)."""
    p = softmax(params.w_p @ h + params.b_p)
    mu = params.w_mu @ h + params.b_mu
    sigma = np.exp(params.w_sigma @ h + params.b_sigma)
    return p, mu, sigma


def _check_tau(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise ValueError("tau must be > 0")
    return tau


def log_time_density(params: ClnmParams, h: np.ndarray, tau) -> np.ndarray:
    tau = _check_tau(tau)
    p, mu, sigma = mixture_params(params, h)
    # no clamp here so the density stays proper; callers floor degenerate gaps
    log_tau = np.log(tau)[..., None]
    z = (log_tau - mu) / sigma
    comp = np.log(p) - np.log(sigma) - _LOG_SQRT_2PI - 0.5 * z * z
    return logsumexp(comp, axis=-1) - log_tau[..., 0]


def time_density(params: ClnmParams, h: np.ndarray, tau) -> np.ndarray:
    return np.exp(log_time_density(params, h, tau))


def time_cdf(params: ClnmParams, h: np.ndarray, tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    p, mu, sigma = mixture_params(params, h)
    with np.errstate(divide="ignore"):
        log_tau = np.log(np.maximum(tau, 0.0))[..., None]
    z = (log_tau - mu) / sigma
    log_cdf = logsumexp(np.log(p) + log_ndtr(z), axis=-1)
    return np.exp(log_cdf)


def log_survival(params: ClnmParams, h: np.ndarray, tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    p, mu, sigma = mixture_params(params, h)
    log_tau = np.maximum(np.log(np.maximum(tau, 1e-300)), LOG_TAU_MIN)[..., None]
    z = (log_tau - mu) / sigma
    return logsumexp(np.log(p) + log_ndtr(-z), axis=-1)


def mark_pmf_given_time(params: ClnmParams, h: np.ndarray, tau) -> np.ndarray:
    """p(k | tau, h) = softmax(W_2 relu(W_1 [h, log tau] + b_1) + b_2); shape tau.shape + (K,)."""
    tau = _check_tau(tau)
    log_tau = np.maximum(np.log(tau), LOG_TAU_MIN)
    # W_1 [h, log tau] = W_1[:, :d_h] h + W_1[:, d_h] log tau
    pre = params.w_1[:, :-1] @ h + params.b_1 + log_tau[..., None] * params.w_1[:, -1]
    logits = np.maximum(pre, 0.0) @ params.w_2.T + params.b_2
    return softmax(logits, axis=-1)


def sequence_nll(params: ClnmParams, seq: Sequence) -> float:
    """Negative log-likelihood of one sequence (numpy reference path)."""
    h = np.zeros(params.dims.d_h)
    prev_t = 0.0
    total = 0.0
    for e in seq.events:
        tau = max(e.t - prev_t, 1e-12)
        total += float(log_time_density(params, h, tau))
        total += float(np.log(mark_pmf_given_time(params, h, tau)[e.k]))
        h = gru_step(params, h, event_embedding(params, e))
        prev_t = e.t
    total += float(log_survival(params, h, seq.horizon - prev_t))
    return -total


# ---------------------------------------------------------------------------
# torch training path
# ---------------------------------------------------------------------------

class ClnmModule(torch.nn.Module):
    def __init__(self, dims: ClnmDims):
        super().__init__()
        self.dims = dims
        d = dims
        self.mark_embedding = torch.nn.Parameter(torch.empty(d.d_k, d.n_marks, dtype=torch.float64))
        torch.nn.init.normal_(self.mark_embedding, std=1.0 / math.sqrt(d.d_k))
        self.gru = torch.nn.GRU(d.d_t + d.d_k, d.d_h, batch_first=True, dtype=torch.float64)
        self.time_p = torch.nn.Linear(d.d_h, d.n_components, dtype=torch.float64)
        self.time_mu = torch.nn.Linear(d.d_h, d.n_components, dtype=torch.float64)
        self.time_sigma = torch.nn.Linear(d.d_h, d.n_components, dtype=torch.float64)
        self.mark_1 = torch.nn.Linear(d.d_h + 1, d.d_1, dtype=torch.float64)
        self.mark_2 = torch.nn.Linear(d.d_1, d.n_marks, dtype=torch.float64)
        self.register_buffer("freqs", torch.as_tensor(time_frequencies(d.d_t)))

    _MAP = {
        "mark_embedding": "mark_embedding",
        "gru_w_ih": "gru.weight_ih_l0",
        "gru_w_hh": "gru.weight_hh_l0",
        "gru_b_ih": "gru.bias_ih_l0",
        "gru_b_hh": "gru.bias_hh_l0",
        "w_p": "time_p.weight",
        "b_p": "time_p.bias",
        "w_mu": "time_mu.weight",
        "b_mu": "time_mu.bias",
        "w_sigma": "time_sigma.weight",
        "b_sigma": "time_sigma.bias",
        "w_1": "mark_1.weight",
        "b_1": "mark_1.bias",
        "w_2": "mark_2.weight",
        "b_2": "mark_2.bias",
    }

    def to_params(self) -> ClnmParams:
        state = self.state_dict()
        return ClnmParams(self.dims, {k: state[v].detach().numpy().copy() for k, v in self._MAP.items()})

    @classmethod
    def from_params(cls, params: ClnmParams) -> "ClnmModule":
        module = cls(params.dims)
        state = {v: torch.as_tensor(params.weights[k]) for k, v in cls._MAP.items()}
        state["freqs"] = module.freqs
        module.load_state_dict(state)
        return module

    def _embed(self, times: torch.Tensor, marks: torch.Tensor) -> torch.Tensor:
        angles = times[..., None] * self.freqs
        te = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).flatten(-2)
        me = self.mark_embedding.T[marks]
        return torch.cat([te, me], dim=-1)

    def _log_density(self, h, log_tau):
        log_p = torch.log_softmax(self.time_p(h), dim=-1)
        mu = self.time_mu(h)
        log_sigma = self.time_sigma(h)
        z = (log_tau[..., None] - mu) * torch.exp(-log_sigma)
        comp = log_p - log_sigma - _LOG_SQRT_2PI - 0.5 * z * z
        return torch.logsumexp(comp, dim=-1) - log_tau

    def _log_survival(self, h, log_tau):
        log_p = torch.log_softmax(self.time_p(h), dim=-1)
        z = (log_tau[..., None] - self.time_mu(h)) * torch.exp(-self.time_sigma(h))
        return torch.logsumexp(log_p + torch.special.log_ndtr(-z), dim=-1)

    def _log_mark(self, h, log_tau, marks):
        hidden = torch.relu(self.mark_1(torch.cat([h, log_tau[..., None]], dim=-1)))
        log_pmf = torch.log_softmax(self.mark_2(hidden), dim=-1)
        return torch.gather(log_pmf, -1, marks[..., None])[..., 0]

    def forward(self, batch: Seq[Sequence]) -> torch.Tensor:
        """Mean negative log-likelihood over the sequences of `batch`."""
        B = len(batch)
        lengths = torch.tensor([len(s) for s in batch])
        L = max(int(lengths.max()), 1)
        times = torch.zeros(B, L, dtype=torch.float64)
        marks = torch.zeros(B, L, dtype=torch.long)
        horizons = torch.tensor([s.horizon for s in batch], dtype=torch.float64)
        for b, s in enumerate(batch):
            if len(s):
                times[b, :len(s)] = torch.as_tensor(s.times)
                marks[b, :len(s)] = torch.as_tensor(s.marks)
        mask = torch.arange(L)[None, :] < lengths[:, None]

        # the GRU is causal, so trailing padding never leaks into valid steps
        out, _ = self.gru(self._embed(times, marks))
        zeros = torch.zeros(B, 1, self.dims.d_h, dtype=torch.float64)
        hidden = torch.cat([zeros, out], dim=1)  # hidden[:, j] = state after j events

        prev = torch.cat([torch.zeros(B, 1, dtype=torch.float64), times[:, :-1]], dim=1)
        tau = torch.where(mask, times - prev, torch.ones_like(times))
        log_tau = torch.clamp(torch.log(torch.clamp(tau, min=1e-300)), min=LOG_TAU_MIN)
        h_ev = hidden[:, :L]
        ll = self._log_density(h_ev, log_tau) + self._log_mark(h_ev, log_tau, marks)
        ll = torch.where(mask, ll, torch.zeros_like(ll)).sum(dim=1)

        last_t = torch.where(lengths > 0, times[torch.arange(B), (lengths - 1).clamp(min=0)], torch.zeros(B, dtype=torch.float64))
        h_last = hidden[torch.arange(B), lengths]
        gap = torch.clamp(horizons - last_t, min=1e-300)
        log_gap = torch.clamp(torch.log(gap), min=LOG_TAU_MIN)
        ll = ll + self._log_survival(h_last, log_gap)
        return -ll.mean()


def init_params(dims: ClnmDims, seed: int = 0) -> ClnmParams:
    torch.manual_seed(seed)
    return ClnmModule(dims).to_params()


def nll_loss(params: ClnmParams, batch: Seq[Sequence]) -> tuple[float, dict[str, np.ndarray]]:
    """Mean NLL over `batch` and its gradient w.r.t. every weight."""
    module = ClnmModule.from_params(params)
    loss = module(batch)
    loss.backward()
    grads = {}
    named = dict(module.named_parameters())
    for k, v in ClnmModule._MAP.items():
        g = named[v].grad
        grads[k] = np.zeros(params.weights[k].shape) if g is None else g.detach().numpy().copy()
    return float(loss.detach()), grads


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    max_epochs: int = 500
    patience: int = 100
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ValueError("patience must lie in [0, max_epochs]")


class TrainingDiverged(RuntimeError):
    pass


def _dataset_nll(module: ClnmModule, seqs: Seq[Sequence], batch_size: int) -> float:
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(seqs), batch_size):
            chunk = seqs[i:i + batch_size]
            total += float(module(chunk)) * len(chunk)
    return total / len(seqs)


def train(
    init: ClnmParams,
    d_train: Dataset,
    d_val: Dataset,
    cfg: TrainConfig = TrainConfig(),
) -> ClnmParams:
    """Adam on the mean NLL with early stopping on validation NLL.

    Returns the parameters with the lowest validation NLL seen, the initial
    parameters included.
    """
    if len(d_train) == 0 or len(d_val) == 0:
        raise ValueError("train and validation sets must be non-empty")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    module = ClnmModule.from_params(init)
    opt = torch.optim.Adam(module.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    train_seqs = list(d_train.sequences)
    val_seqs = list(d_val.sequences)

    best = _dataset_nll(module, val_seqs, cfg.batch_size)
    best_state = copy.deepcopy(module.state_dict())
    since_best = 0
    for epoch in range(cfg.max_epochs):
        order = torch.randperm(len(train_seqs), generator=gen).tolist()
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_seqs[j] for j in order[i:i + cfg.batch_size]]
            opt.zero_grad()
            loss = module(batch)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, batch {i // cfg.batch_size}")
            loss.backward()
            opt.step()
        val = _dataset_nll(module, val_seqs, cfg.batch_size)
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        if val < best:
            best, since_best = val, 0
            best_state = copy.deepcopy(module.state_dict())
        else:
            since_best += 1
        logger.debug("epoch %d val_nll %.5f best %.5f", epoch, val, best)
        if since_best >= cfg.patience:
            break
    module.load_state_dict(best_state)
    return module.to_params()
