"""Split-conformal calibration, nonconformity scores and prediction regions.

Scores and regions are computed from an `Instance`: the predictive
distribution of one test/calibration input together with the Monte Carlo
material drawn for it once (time samples, mark samples, their densities,
the marginal mark PMF and the RAPS randomization u). Drawing that material
once per instance keeps every method's score and region consistent with each
other.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Optional, Sequence as Seq

import numpy as np

from .predictive import NextEvent, sample_time, time_quantile

# ---------------------------------------------------------------------------
# calibration core
# ---------------------------------------------------------------------------


def conformal_rank(n: int, alpha: float) -> int:
    """1-based rank of q-hat among n calibration scores (n + 1 means +inf)."""
    # the small offset keeps e.g. (99 + 1) * 0.8 from rounding up to 81
    return int(math.ceil((n + 1) * (1 - alpha) - 1e-9))


def conformal_quantile(scores, alpha: float) -> float:
    """The ceil((n+1)(1-alpha))-th smallest score, or +inf past the end."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    s = np.sort(np.asarray(scores, dtype=float).ravel())
    if s.size == 0:
        raise ValueError("empty calibration score list")
    if not np.all(np.isfinite(s)):
        raise ValueError("calibration scores must be finite")
    r = conformal_rank(s.size, alpha)
    return math.inf if r > s.size else float(s[max(r, 1) - 1])


@dataclass
class CalibrationResult:
    method: str
    alpha: float
    scores: np.ndarray
    qhat: float
    parts: tuple["CalibrationResult", ...] = ()

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "alpha": self.alpha,
            "qhat": _enc(self.qhat),
            "scores": [float(x) for x in np.asarray(self.scores).ravel()],
        }
        if self.parts:
            out["parts"] = [p.to_dict() for p in self.parts]
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "CalibrationResult":
        return cls(
            obj["method"],
            float(obj["alpha"]),
            np.asarray(obj["scores"], dtype=float),
            _dec(obj["qhat"]),
            tuple(cls.from_dict(p) for p in obj.get("parts", ())),
        )


def _enc(x: float):
    return "inf" if x == math.inf else x


def _dec(x) -> float:
    return math.inf if x == "inf" else float(x)


# ---------------------------------------------------------------------------
# region types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeRegion:
    """Disjoint sorted closed intervals on [0, inf).

    `unbounded` marks a region that is really [0, inf) but stored truncated.
    """

    intervals: tuple[tuple[float, float], ...] = ()
    unbounded: bool = False

    @classmethod
    def interval(cls, a: float, b: float) -> "TimeRegion":
        a = max(a, 0.0)
        if math.isinf(b):
            raise ValueError("use unbounded=True for infinite regions")
        return cls(((a, b),)) if b >= a else cls(())

    @property
    def length(self) -> float:
        return float(sum(b - a for a, b in self.intervals))

    def contains(self, tau: float) -> bool:
        if self.unbounded:
            return tau >= 0
        return any(a <= tau <= b for a, b in self.intervals)

    def to_json(self):
        return {"intervals": [list(iv) for iv in self.intervals], "unbounded": self.unbounded}


@dataclass(frozen=True)
class MarkSet:
    marks: frozenset[int]

    @property
    def length(self) -> int:
        return len(self.marks)

    def contains(self, k: int) -> bool:
        return k in self.marks

    def to_json(self):
        return sorted(self.marks)


@dataclass(frozen=True)
class JointRegion:
    """Mark -> time region; absent marks are empty."""

    regions: Mapping[int, TimeRegion]
    provenance: str  # "product" or "hdr"

    @property
    def marks(self) -> frozenset[int]:
        return frozenset(k for k, r in self.regions.items() if r.unbounded or r.intervals)

    @property
    def unbounded(self) -> bool:
        return any(r.unbounded for r in self.regions.values())

    @property
    def length(self) -> float:
        if self.provenance == "product":
            marks = self.marks
            if not marks:
                return 0.0
            return next(iter(self.regions[k] for k in marks)).length * len(marks)
        return float(sum(r.length for r in self.regions.values()))

    def contains(self, tau: float, k: int) -> bool:
        r = self.regions.get(k)
        return r is not None and r.contains(tau)

    def to_json(self):
        return {
            "provenance": self.provenance,
            "regions": {str(k): r.to_json() for k, r in sorted(self.regions.items())},
        }


def region_joint_product(r_tau: TimeRegion, r_k: MarkSet) -> JointRegion:
    return JointRegion({k: r_tau for k in sorted(r_k.marks)}, "product")


# ---------------------------------------------------------------------------
# per-instance Monte Carlo material
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InstanceConfig:
    n_samples: int = 100
    grid_size: int = 1024
    tail_mass: float = 1e-4


class Instance:
    """One input h with its predictive distribution and sampled material."""

    def __init__(self, dist: NextEvent, rng: np.random.Generator, cfg: InstanceConfig = InstanceConfig()):
        self.dist = dist
        self.cfg = cfg
        self.n_marks = dist.n_marks
        self.taus = sample_time(dist, cfg.n_samples, rng)
        pmfs = dist.mark_pmf_given_time(self.taus)
        cdf = np.cumsum(pmfs, axis=-1)
        v = rng.uniform(size=cfg.n_samples)[:, None] * cdf[:, -1:]
        self.sample_marks = np.minimum(np.sum(cdf < v, axis=-1), self.n_marks - 1)
        self.time_densities = dist.time_pdf(self.taus)
        self.joint_densities = dist.joint_pdf(self.taus, self.sample_marks)
        pmf = pmfs.mean(axis=0)
        self.mark_pmf = pmf / pmf.sum()
        self.u = float(rng.uniform())
        self._quantiles: dict[float, float] = {}

    @property
    def embedding(self) -> np.ndarray:
        return self.dist.embedding

    def quantile(self, level: float) -> float:
        q = self._quantiles.get(level)
        if q is None:
            q = float(time_quantile(self.dist, level))
            self._quantiles[level] = q
        return q

    @cached_property
    def tau_cap(self) -> float:
        return self.quantile(1.0 - self.cfg.tail_mass)

    @cached_property
    def grid(self) -> np.ndarray:
        """Cell centers of a uniform partition of [0, tau_cap]."""
        n = self.cfg.grid_size
        return (np.arange(n) + 0.5) * (self.tau_cap / n)

    @cached_property
    def grid_joint(self) -> np.ndarray:
        return self.dist.joint_pdfs(self.grid)

    @cached_property
    def grid_time(self) -> np.ndarray:
        return np.sum(self.grid_joint, axis=-1)

    @cached_property
    def log_z(self) -> np.ndarray:
        """Sorted log joint densities of the samples (clamped at log 1e-300)."""
        return np.sort(np.log(np.maximum(self.joint_densities, 1e-300)))


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------


def score_cqr(q_lo: float, q_hi: float, tau: float) -> float:
    return max(q_lo - tau, tau - q_hi)


def score_cqrl(q_hi: float, tau: float) -> float:
    return tau - q_hi


def score_const(tau: float) -> float:
    return tau


def hpd_value(sample_densities: np.ndarray, density: float) -> float:
    """Fraction of samples at least as dense as `density`."""
    return float(np.mean(sample_densities >= density))


def score_hpd_time(inst: Instance, tau: float) -> float:
    return hpd_value(inst.time_densities, float(inst.dist.time_pdf(tau)))


def score_hpd_joint(inst: Instance, tau: float, k: int) -> float:
    return hpd_value(inst.joint_densities, float(inst.dist.joint_pdf(tau, k)))


def score_prob(pmf: np.ndarray, k: int) -> float:
    return float(1.0 - pmf[k])


def mark_ranks(pmf: np.ndarray) -> np.ndarray:
    """1-based rank of each mark by decreasing probability, ties by id."""
    order = np.lexsort((np.arange(pmf.size), -pmf))
    ranks = np.empty(pmf.size, dtype=int)
    ranks[order] = np.arange(1, pmf.size + 1)
    return ranks


def raps_scores(pmf: np.ndarray, u: float, gamma: float = 0.0, k_reg: int = 0) -> np.ndarray:
    """RAPS score of every mark; gamma = 0 gives APS.

    s(k) = sum_{k': p(k') >= p(k)} p(k') - p(k) + u p(k) + gamma (o(k) - k_reg)^+
    """
    pmf = np.asarray(pmf, dtype=float)
    geq = pmf[None, :] >= pmf[:, None]
    mass = np.sum(np.where(geq, pmf[None, :], 0.0), axis=1)
    base = mass - pmf + u * pmf
    if gamma == 0:
        return base
    return base + gamma * np.maximum(mark_ranks(pmf) - k_reg, 0)


def score_raps(pmf: np.ndarray, k: int, u: float, gamma: float = 0.0, k_reg: int = 0) -> float:
    return float(raps_scores(pmf, u, gamma, k_reg)[k])


# ---------------------------------------------------------------------------
# regions
# ---------------------------------------------------------------------------


def hdr_threshold(sample_densities: np.ndarray, level: float) -> Optional[float]:
    """Density threshold z such that {f > z} = {y : hpd(y) <= level}.

    Returns None when the region is the whole space (level admits every point).
    """
    m = sample_densities.size
    j = int(math.floor(level * m + 1e-9)) if math.isfinite(level) else m
    if j >= m:
        return None
    if j < 0:
        return math.inf
    return float(np.sort(sample_densities)[::-1][j])


def _runs_to_region(mask: np.ndarray, cell: float) -> TimeRegion:
    if not mask.any():
        return TimeRegion(())
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    starts, stops = edges[0::2], edges[1::2]
    return TimeRegion(tuple((float(a * cell), float(b * cell)) for a, b in zip(starts, stops)))


def hdr_time_region(inst: Instance, level: float) -> TimeRegion:
    z = hdr_threshold(inst.time_densities, level)
    if z is None:
        return TimeRegion(((0.0, inst.tau_cap),), unbounded=True)
    return _runs_to_region(inst.grid_time > z, inst.tau_cap / inst.cfg.grid_size)


def region_joint_hdr(inst: Instance, level: float) -> JointRegion:
    z = hdr_threshold(inst.joint_densities, level)
    if z is None:
        full = TimeRegion(((0.0, inst.tau_cap),), unbounded=True)
        return JointRegion({k: full for k in range(inst.n_marks)}, "hdr")
    cell = inst.tau_cap / inst.cfg.grid_size
    regions = {}
    for k in range(inst.n_marks):
        r = _runs_to_region(inst.grid_joint[:, k] > z, cell)
        if r.intervals:
            regions[k] = r
    return JointRegion(regions, "hdr")


def _unbounded_time(inst: Instance) -> TimeRegion:
    return TimeRegion(((0.0, inst.tau_cap),), unbounded=True)


def mark_set(scores: np.ndarray, pmf: np.ndarray, threshold: float) -> MarkSet:
    """{k : score(k) <= threshold} plus the most probable mark."""
    keep = set(np.flatnonzero(scores <= threshold).tolist())
    keep.add(int(np.lexsort((np.arange(pmf.size), -pmf))[0]))
    return MarkSet(frozenset(keep))


# ---------------------------------------------------------------------------
# method registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodParams:
    gamma: float = 0.01
    k_reg: int = 5


class Method:
    """A named way of turning an instance into a prediction region."""

    name: str
    target: str  # "time", "mark" or "joint"
    conformal: bool

    def score(self, inst: Instance, tau: float, k: int, alpha: float):
        raise NotImplementedError

    def region(self, inst: Instance, alpha: float, cal: Optional[CalibrationResult]):
        raise NotImplementedError

    def calibrate(self, instances: Seq[Instance], taus, marks, alpha: float) -> Optional[CalibrationResult]:
        if not self.conformal:
            return None
        if len(instances) == 0:
            raise ValueError("calibration set is empty")
        scores = np.array([self.score(i, t, k, alpha) for i, t, k in zip(instances, taus, marks)])
        return CalibrationResult(self.name, alpha, scores, conformal_quantile(scores, alpha))

    def covers(self, region, tau: float, k: int) -> bool:
        if self.target == "time":
            return region.contains(tau)
        if self.target == "mark":
            return region.contains(k)
        return region.contains(tau, k)

    def __repr__(self):
        return f"<{type(self).__name__} {self.name}>"


class QuantileTime(Method):
    """H-QR, H-QRL, C-QR, C-QRL."""

    target = "time"

    def __init__(self, name: str, left: bool, conformal: bool):
        self.name, self.left, self.conformal = name, left, conformal

    def levels(self, alpha: float) -> tuple[float, float]:
        if self.left:
            return (0.0, 1 - alpha)
        # the heuristic follows the (alpha, 1 - alpha) definition used for H-QR
        return (alpha / 2, 1 - alpha / 2) if self.conformal else (alpha, 1 - alpha)

    def score(self, inst, tau, k, alpha):
        lo, hi = self.levels(alpha)
        if self.left:
            return score_cqrl(inst.quantile(hi), tau)
        return score_cqr(inst.quantile(lo), inst.quantile(hi), tau)

    def region(self, inst, alpha, cal):
        lo, hi = self.levels(alpha)
        q = cal.qhat if self.conformal else 0.0
        if math.isinf(q):
            return _unbounded_time(inst)
        upper = inst.quantile(hi) + q
        lower = 0.0 if self.left else inst.quantile(lo) - q
        return TimeRegion.interval(lower, upper)


class ConstTime(Method):
    name, target, conformal = "C-Const", "time", True

    def score(self, inst, tau, k, alpha):
        return score_const(tau)

    def region(self, inst, alpha, cal):
        if math.isinf(cal.qhat):
            return _unbounded_time(inst)
        return TimeRegion.interval(0.0, cal.qhat)


class HdrTime(Method):
    """H-HDR (time) and C-HDR-T."""

    target = "time"

    def __init__(self, name: str, conformal: bool):
        self.name, self.conformal = name, conformal

    def score(self, inst, tau, k, alpha):
        return score_hpd_time(inst, tau)

    def region(self, inst, alpha, cal):
        return hdr_time_region(inst, cal.qhat if self.conformal else 1 - alpha)


class RapsMark(Method):
    """H-APS, H-RAPS, C-APS, C-RAPS."""

    target = "mark"

    def __init__(self, name: str, regularized: bool, conformal: bool, params: MethodParams = MethodParams()):
        self.name, self.regularized, self.conformal = name, regularized, conformal
        self.params = params

    def _scores(self, inst):
        if self.regularized:
            return raps_scores(inst.mark_pmf, inst.u, self.params.gamma, self.params.k_reg)
        return raps_scores(inst.mark_pmf, inst.u)

    def score(self, inst, tau, k, alpha):
        return float(self._scores(inst)[k])

    def region(self, inst, alpha, cal):
        threshold = cal.qhat if self.conformal else 1 - alpha
        return mark_set(self._scores(inst), inst.mark_pmf, threshold)


class ProbMark(Method):
    name, target, conformal = "C-PROB", "mark", True

    def score(self, inst, tau, k, alpha):
        return score_prob(inst.mark_pmf, k)

    def region(self, inst, alpha, cal):
        # {k : p(k) >= 1 - q} is {k : 1 - p(k) <= q}
        return mark_set(1.0 - inst.mark_pmf, inst.mark_pmf, cal.qhat)


class HdrJoint(Method):
    """H-HDR (joint) and C-HDR."""

    target = "joint"

    def __init__(self, name: str, conformal: bool):
        self.name, self.conformal = name, conformal

    def score(self, inst, tau, k, alpha):
        return score_hpd_joint(inst, tau, k)

    def region(self, inst, alpha, cal):
        return region_joint_hdr(inst, cal.qhat if self.conformal else 1 - alpha)


class ProductJoint(Method):
    """Cartesian product of a time region and a mark set, each at level 1 - alpha/2."""

    target = "joint"

    def __init__(self, name: str, time_method: Method, mark_method: Method):
        self.name = name
        self.time_method, self.mark_method = time_method, mark_method
        self.conformal = time_method.conformal
        if time_method.conformal != mark_method.conformal:
            raise ValueError("components must be both heuristic or both conformal")

    def score(self, inst, tau, k, alpha):
        return (self.time_method.score(inst, tau, k, alpha / 2), self.mark_method.score(inst, tau, k, alpha / 2))

    def calibrate(self, instances, taus, marks, alpha):
        if not self.conformal:
            return None
        parts = (
            self.time_method.calibrate(instances, taus, marks, alpha / 2),
            self.mark_method.calibrate(instances, taus, marks, alpha / 2),
        )
        scores = np.stack([parts[0].scores, parts[1].scores], axis=1)
        return CalibrationResult(self.name, alpha, scores, math.nan, parts)

    def region(self, inst, alpha, cal):
        t_cal, k_cal = (cal.parts if cal is not None else (None, None))
        r_tau = self.time_method.region(inst, alpha / 2, t_cal)
        r_k = self.mark_method.region(inst, alpha / 2, k_cal)
        return region_joint_product(r_tau, r_k)


def build_registry(params: MethodParams = MethodParams()) -> dict[str, Method]:
    """All methods keyed by name; H-HDR is the joint heuristic, H-HDR-T the time one."""
    h_raps = RapsMark("H-RAPS", True, False, params)
    c_raps = RapsMark("C-RAPS", True, True, params)
    h_qrl = QuantileTime("H-QRL", True, False)
    c_qrl = QuantileTime("C-QRL", True, True)
    h_hdr_t = HdrTime("H-HDR-T", False)
    c_hdr_t = HdrTime("C-HDR-T", True)
    methods: list[Method] = [
        QuantileTime("H-QR", False, False),
        h_qrl,
        h_hdr_t,
        QuantileTime("C-QR", False, True),
        c_qrl,
        ConstTime(),
        c_hdr_t,
        RapsMark("H-APS", False, False, params),
        h_raps,
        ProbMark(),
        RapsMark("C-APS", False, True, params),
        c_raps,
        ProductJoint("H-QRL-RAPS", h_qrl, h_raps),
        ProductJoint("H-HDR-RAPS", h_hdr_t, h_raps),
        HdrJoint("H-HDR", False),
        ProductJoint("C-QRL-RAPS", c_qrl, c_raps),
        ProductJoint("C-HDR-RAPS", c_hdr_t, c_raps),
        HdrJoint("C-HDR", True),
    ]
    return {m.name: m for m in methods}


METHOD_NAMES = tuple(build_registry())
CONFORMAL_METHODS = tuple(n for n, m in build_registry().items() if m.conformal)
HEURISTIC_METHODS = tuple(n for n, m in build_registry().items() if not m.conformal)


def calibrate(method: Method, instances: Seq[Instance], taus, marks, alpha: float) -> Optional[CalibrationResult]:
    return method.calibrate(instances, taus, marks, alpha)
