"""End-to-end experiment: data -> model -> calibration -> evaluation -> report."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Sequence as Seq

import numpy as np

from . import clnm, conformal, hawkes, metrics
from .conformal import CalibrationResult, Instance, InstanceConfig, Method, MethodParams
from .events import Dataset, PredictionPair, SplitDataset, load_jsonl, make_pairs, preprocess, split
from .predictive import PredictiveModel, make_clnm, make_misspecified, make_oracle, time_quantile

logger = logging.getLogger(__name__)

# child stream ids derived from the master seed
STREAM_SIM, STREAM_SPLIT, STREAM_INIT, STREAM_TRAIN = 1, 2, 3, 4
STREAM_CAL, STREAM_TEST, STREAM_WSC, STREAM_KMEANS = 5, 6, 7, 8

REPORT_COLUMNS = ["dataset", "model", "method", "target", "alpha", "seed",
                  "MC", "Length", "GLength", "RLength", "WSC", "CCE", "Unbounded"]


class ConfigError(ValueError):
    pass


def child_seed(master: int, stream: int) -> int:
    return int(np.random.SeedSequence([master, stream]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _strict(cls, obj: Optional[dict], where: str):
    obj = {} if obj is None else obj
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class DataConfig:
    hawkes_params: Optional[str] = "default"  # path, or "default" for the bundled fixture
    n_sequences: int = 1000
    mean_length: float = 20.0
    horizon: Optional[float] = None
    jsonl: Optional[str] = None
    name: Optional[str] = None

    def __post_init__(self):
        if self.jsonl is None and self.hawkes_params is None:
            raise ValueError("need hawkes_params or jsonl")
        if self.n_sequences < 1 or self.mean_length <= 0 or (self.horizon is not None and self.horizon <= 0):
            raise ValueError("n_sequences, mean_length and horizon must be positive")
        if self.jsonl is not None and not Path(self.jsonl).exists():
            raise ValueError(f"file not found: {self.jsonl}")
        if self.hawkes_params not in (None, "default") and not Path(self.hawkes_params).exists():
            raise ValueError(f"file not found: {self.hawkes_params}")

    def params(self) -> hawkes.HawkesParams:
        if self.hawkes_params == "default":
            return hawkes.default_params()
        return hawkes.HawkesParams.from_json(self.hawkes_params)


@dataclass
class PreprocessConfig:
    enabled: bool = False
    max_marks: int = 50
    scale_upper: float = 10.0

    def __post_init__(self):
        if self.max_marks < 1 or self.scale_upper <= 0:
            raise ValueError("max_marks >= 1 and scale_upper > 0 required")


@dataclass
class SplitConfig:
    fracs: tuple[float, float, float, float] = (0.65, 0.10, 0.15, 0.10)

    def __post_init__(self):
        self.fracs = tuple(float(f) for f in self.fracs)
        if len(self.fracs) != 4 or any(f < 0 for f in self.fracs) or abs(sum(self.fracs) - 1) > 1e-9:
            raise ValueError("fracs must be 4 non-negative numbers summing to 1")


@dataclass
class ModelConfig:
    kind: str = "oracle"  # oracle | const-rate | beta-scaled | clnm
    c: float = 4.0
    dims: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("oracle", "const-rate", "beta-scaled", "clnm"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.c <= 0:
            raise ValueError("c must be > 0")
        known_dims = {"d_t", "d_k", "d_h", "d_1", "n_components"}
        if set(self.dims) - known_dims:
            raise ValueError(f"unknown dims keys {sorted(set(self.dims) - known_dims)}")
        _strict(clnm.TrainConfig, self.train, "model.train")

    def label(self) -> str:
        return f"beta-scaled({self.c:g})" if self.kind == "beta-scaled" else self.kind


@dataclass
class MethodConfig:
    gamma: float = 0.01
    k_reg: int = 5
    n_samples: int = 100
    grid_size: int = 1024
    tail_mass: float = 1e-4

    def __post_init__(self):
        if self.gamma < 0 or self.k_reg < 0:
            raise ValueError("gamma and k_reg must be >= 0")
        if self.n_samples < 1 or self.grid_size < 2 or not 0 < self.tail_mass < 1:
            raise ValueError("invalid sampling/grid settings")


@dataclass
class MetricConfig:
    eps: float = metrics.DEFAULT_EPS
    delta: float = metrics.DEFAULT_DELTA
    n_dirs: int = metrics.DEFAULT_N_DIRS
    J: int = metrics.DEFAULT_J
    cce_weighting: str = "literal"
    wsc_stride: int = 1

    def __post_init__(self):
        if self.eps <= 0 or not 0 < self.delta <= 1 or self.n_dirs < 1 or self.J < 1 or self.wsc_stride < 1:
            raise ValueError("invalid metric settings")
        if self.cce_weighting not in ("literal", "size"):
            raise ValueError("cce_weighting must be 'literal' or 'size'")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    methods: list[str] = field(default_factory=lambda: list(conformal.METHOD_NAMES))
    alphas: list[float] = field(default_factory=lambda: [0.2])
    method_params: MethodConfig = field(default_factory=MethodConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "out"
    dump_regions: bool = False
    threads: int = 1

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        top = {f.name for f in fields(cls)}
        unknown = set(obj) - top
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}")
        kw: dict[str, Any] = {k: v for k, v in obj.items() if k in ("methods", "alphas", "seeds", "output_dir", "dump_regions", "threads")}
        kw["data"] = _strict(DataConfig, obj.get("data"), "data")
        kw["preprocess"] = _strict(PreprocessConfig, obj.get("preprocess"), "preprocess")
        kw["split"] = _strict(SplitConfig, obj.get("split"), "split")
        kw["model"] = _strict(ModelConfig, obj.get("model"), "model")
        kw["method_params"] = _strict(MethodConfig, obj.get("method_params"), "method_params")
        kw["metrics"] = _strict(MetricConfig, obj.get("metrics"), "metrics")
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(obj)

    def validate(self) -> None:
        bad = [m for m in self.methods if m not in conformal.METHOD_NAMES]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {list(conformal.METHOD_NAMES)}")
        if not self.methods:
            raise ConfigError("methods must be non-empty")
        if not self.alphas or any(not 0 < a < 1 for a in self.alphas):
            raise ConfigError("alphas must be a non-empty list of values in (0, 1)")
        if not self.seeds or any(not isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def build_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    if cfg.data.jsonl is not None:
        d = load_jsonl(cfg.data.jsonl)
    else:
        p = cfg.data.params()
        T = cfg.data.horizon or hawkes.horizon_for_mean_length(p, cfg.data.mean_length)
        d = hawkes.simulate_dataset(p, cfg.data.n_sequences, T, seed=child_seed(seed, STREAM_SIM))
    if cfg.preprocess.enabled:
        d = preprocess(d, cfg.preprocess.max_marks, cfg.preprocess.scale_upper)
    return d


def split_dataset(cfg: ExperimentConfig, d: Dataset, seed: int) -> SplitDataset:
    return split(d, cfg.split.fracs, seed=child_seed(seed, STREAM_SPLIT))


def clnm_dims(cfg: ExperimentConfig, n_marks: int) -> clnm.ClnmDims:
    return clnm.ClnmDims(n_marks=n_marks, **cfg.model.dims)


def fit_clnm(cfg: ExperimentConfig, parts: SplitDataset, seed: int) -> clnm.ClnmParams:
    dims = clnm_dims(cfg, parts.train.n_marks)
    init = clnm.init_params(dims, seed=child_seed(seed, STREAM_INIT) % 2**31)
    train_cfg = clnm.TrainConfig(**{**cfg.model.train, "seed": child_seed(seed, STREAM_TRAIN) % 2**31})
    return clnm.train(init, parts.train, parts.val, train_cfg)


def build_model(cfg: ExperimentConfig, parts: SplitDataset, seed: int,
                params: Optional[clnm.ClnmParams] = None) -> PredictiveModel:
    kind = cfg.model.kind
    if kind == "clnm":
        if params is None:
            params = clnm.ClnmParams.load(cfg.model.checkpoint) if cfg.model.checkpoint else fit_clnm(cfg, parts, seed)
        return make_clnm(params)
    if cfg.data.hawkes_params is None:
        raise ConfigError(f"model kind {kind!r} needs data.hawkes_params")
    p = cfg.data.params()
    if kind == "oracle":
        return make_oracle(p)
    return make_misspecified(p, kind, cfg.model.c)


def instance_config(cfg: ExperimentConfig) -> InstanceConfig:
    mp = cfg.method_params
    return InstanceConfig(mp.n_samples, mp.grid_size, mp.tail_mass)


def build_instances(model: PredictiveModel, pairs: Seq[PredictionPair], seed: int, stream: int,
                    icfg: InstanceConfig, threads: int = 1) -> list[Instance]:
    """One Instance per pair; instance i draws from its own stream (seed, stream, i)."""
    base = child_seed(seed, stream)

    def one(i: int) -> Instance:
        rng = np.random.default_rng([base, i])
        return Instance(model.condition(pairs[i].history), rng, icfg)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, range(len(pairs))))
    return [one(i) for i in range(len(pairs))]


def prefetch_quantiles(instances: Seq[Instance], methods: Seq[Method], alphas: Seq[float]) -> None:
    """Compute every quantile the methods will ask for in one vectorized pass per instance."""
    levels = set()
    for a in alphas:
        for m in methods:
            for sub, aa in _quantile_users(m, a):
                lo, hi = sub.levels(aa)
                levels.update(l for l in (lo, hi) if 0 < l < 1)
    levels.add(1.0 - instances[0].cfg.tail_mass if instances else 0.5)
    levels = sorted(levels)
    for inst in instances:
        qs = time_quantile(inst.dist, np.array(levels))
        inst._quantiles.update(zip(levels, qs.tolist()))


def _quantile_users(m: Method, alpha: float):
    if isinstance(m, conformal.QuantileTime):
        yield m, alpha
    elif isinstance(m, conformal.ProductJoint):
        yield from _quantile_users(m.time_method, alpha / 2)


@dataclass
class MethodOutcome:
    method: str
    target: str
    alpha: float
    seed: int
    calibration: Optional[CalibrationResult]
    records: list[metrics.EvalRecord]
    regions: list[Any]


def evaluate_method(method: Method, alpha: float, seed: int,
                    cal: Seq[Instance], cal_pairs: Seq[PredictionPair],
                    test: Seq[Instance], test_pairs: Seq[PredictionPair],
                    calib: Optional[CalibrationResult] = None) -> MethodOutcome:
    """Calibrate (unless a stored result is given), then build and score test regions."""
    if calib is None:
        calib = method.calibrate(cal, [p.tau for p in cal_pairs], [p.k for p in cal_pairs], alpha)
    records, regions = [], []
    for inst, pair in zip(test, test_pairs):
        region = method.region(inst, alpha, calib)
        records.append(metrics.EvalRecord(
            covered=method.covers(region, pair.tau, pair.k),
            length=region.length,
            embedding=inst.embedding,
            log_z=inst.log_z,
            unbounded=bool(getattr(region, "unbounded", False)),
        ))
        regions.append(region)
    return MethodOutcome(method.name, method.target, alpha, seed, calib, records, regions)


@dataclass
class SeedRun:
    seed: int
    dataset: Dataset
    parts: SplitDataset
    model: PredictiveModel
    cal_pairs: list[PredictionPair]
    test_pairs: list[PredictionPair]
    cal: list[Instance]
    test: list[Instance]
    outcomes: list[MethodOutcome]


def run_seed(cfg: ExperimentConfig, seed: int, model: Optional[PredictiveModel] = None,
             methods: Optional[dict[str, Method]] = None) -> SeedRun:
    d = build_dataset(cfg, seed)
    parts = split_dataset(cfg, d, seed)
    if model is None:
        model = build_model(cfg, parts, seed)
    registry = methods or conformal.build_registry(MethodParams(cfg.method_params.gamma, cfg.method_params.k_reg))
    selected = [registry[m] for m in cfg.methods]
    cal_pairs, test_pairs = make_pairs(parts.cal), make_pairs(parts.test)
    icfg = instance_config(cfg)
    cal = build_instances(model, cal_pairs, seed, STREAM_CAL, icfg, cfg.threads)
    test = build_instances(model, test_pairs, seed, STREAM_TEST, icfg, cfg.threads)
    prefetch_quantiles(cal + test, selected, cfg.alphas)
    outcomes = [evaluate_method(m, a, seed, cal, cal_pairs, test, test_pairs)
                for a in cfg.alphas for m in selected]
    return SeedRun(seed, d, parts, model, cal_pairs, test_pairs, cal, test, outcomes)


def score_outcomes(cfg: ExperimentConfig, run: SeedRun, dataset_name: str, model_name: str) -> list[dict]:
    """One report row per (alpha, method)."""
    mc = cfg.metrics
    partition = None
    if run.cal and len(run.cal) >= mc.J:
        partition = metrics.fit_partition(np.stack([i.log_z for i in run.cal]), mc.J,
                                          seed=child_seed(run.seed, STREAM_KMEANS) % 2**31)
    registry = conformal.build_registry()
    rows = []
    by_alpha: dict[float, list[MethodOutcome]] = {}
    for o in run.outcomes:
        by_alpha.setdefault(o.alpha, []).append(o)
    for alpha, outs in by_alpha.items():
        lengths = {o.method: metrics.avg_length(o.records) for o in outs}
        rel = {}
        for target in ("time", "mark", "joint"):
            conf = {m: v for m, v in lengths.items() if registry[m].target == target and registry[m].conformal}
            if conf:
                best = min(conf.values())
                for m, v in lengths.items():
                    if registry[m].target == target:
                        rel[m] = v / best if best > 0 else math.nan
        for o in outs:
            try:
                w = metrics.wsc(o.records, mc.delta, mc.n_dirs,
                                np.random.default_rng(child_seed(run.seed, STREAM_WSC)), mc.wsc_stride)
            except ValueError:
                w = math.nan
            c = metrics.cce(o.records, alpha, partition=partition, weighting=mc.cce_weighting) if partition else math.nan
            rows.append({
                "dataset": dataset_name, "model": model_name, "method": o.method, "target": o.target,
                "alpha": alpha, "seed": run.seed,
                "MC": metrics.marginal_coverage(o.records),
                "Length": lengths[o.method],
                "GLength": metrics.geo_length(o.records, mc.eps),
                "RLength": rel.get(o.method, math.nan),
                "WSC": w, "CCE": c,
                "Unbounded": int(sum(r.unbounded for r in o.records)),
            })
    return rows


def dataset_name(cfg: ExperimentConfig) -> str:
    if cfg.data.name:
        return cfg.data.name
    if cfg.data.jsonl:
        return Path(cfg.data.jsonl).stem
    return "hawkes" if cfg.data.hawkes_params == "default" else Path(cfg.data.hawkes_params).stem


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(rows: Seq[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in REPORT_COLUMNS})


def read_csv(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("alpha", "MC", "Length", "GLength", "RLength", "WSC", "CCE"):
            r[k] = float(r[k])
        r["seed"] = int(r["seed"])
        r["Unbounded"] = int(r.get("Unbounded", 0) or 0)
    return rows


SUMMARY_METRICS = ("MC", "Length", "GLength", "RLength", "WSC", "CCE")


def summarize(rows: Seq[dict]) -> list[dict]:
    """Mean and std over seeds per (dataset, model, method, target, alpha)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        key = (r["dataset"], r["model"], r["method"], r["target"], float(r["alpha"]))
        groups.setdefault(key, []).append(r)
    out = []
    for key, rs in groups.items():
        row = dict(zip(("dataset", "model", "method", "target", "alpha"), key))
        row["n_seeds"] = len(rs)
        for m in SUMMARY_METRICS:
            vals = np.array([float(r[m]) for r in rs])
            row[f"{m}_mean"] = float(np.mean(vals))
            row[f"{m}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append(row)
    return out


def markdown_table(summary: Seq[dict]) -> str:
    lines = ["| dataset | model | target | method | alpha | " + " | ".join(SUMMARY_METRICS) + " |",
             "|" + "---|" * (5 + len(SUMMARY_METRICS))]
    for r in summary:
        cells = [f"{r[f'{m}_mean']:.4f} ± {r[f'{m}_std']:.4f}" for m in SUMMARY_METRICS]
        lines.append(f"| {r['dataset']} | {r['model']} | {r['target']} | {r['method']} | {r['alpha']:g} | "
                     + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_report(rows: Seq[dict], out_dir: Path) -> None:
    write_csv(rows, out_dir / "report.csv")
    (out_dir / "report.md").write_text(markdown_table(summarize(rows)), encoding="utf-8")


def run(cfg: ExperimentConfig) -> list[dict]:
    """Execute the whole pipeline for every seed and write the report files."""
    out = Path(cfg.output_dir)
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    stage = "setup"
    try:
        rows, calibrations = [], []
        for seed in cfg.seeds:
            stage = f"seed {seed}"
            run_ = run_seed(cfg, seed)
            if cfg.model.kind == "clnm" and len(cfg.seeds) == 1:
                run_.model.params.save(out / "checkpoint.json")
            rows.extend(score_outcomes(cfg, run_, dataset_name(cfg), cfg.model.label()))
            calibrations.extend(o.calibration.to_dict() | {"seed": seed}
                                for o in run_.outcomes if o.calibration is not None)
            if cfg.dump_regions:
                rdir = out / "regions"
                rdir.mkdir(exist_ok=True)
                for o in run_.outcomes:
                    path = rdir / f"seed{seed}_{o.method}_alpha{o.alpha:g}.json"
                    path.write_text(json.dumps([r.to_json() for r in o.regions]))
        stage = "report"
        (out / "calibration.json").write_text(json.dumps(calibrations))
        write_report(rows, out)
        return rows
    except Exception as exc:
        for name in ("report.csv", "report.md", "calibration.json", "checkpoint.json"):
            (out / name).unlink(missing_ok=True)
        shutil.rmtree(out / "regions", ignore_errors=True)
        if created:
            shutil.rmtree(out, ignore_errors=True)
        raise RuntimeError(f"stage '{stage}' failed: {exc}") from exc
