"""Experiment harness: run several filters on shared trajectories and record metrics.

An experiment simulates ``trials`` trajectories from one model, replays each
observation sequence through every configured algorithm and emits one
:class:`MetricsRecord` per (trial, slice, algorithm, metric). In time-budget
mode the particle counts are first tuned on a short warm-up run so that every
particle algorithm costs about as much per slice as the slowest baseline.

Experiment files are JSON::

    {
      "model": {"generator": "two-cluster", "params": {"nodes_per_cluster": 5}, "seed": 3},
      "algorithms": [
        {"name": "bk", "algorithm": "bk", "clusters": "contiguous:2"},
        {"name": "pf", "algorithm": "pf", "particles": 1000},
        {"name": "fp3", "algorithm": "fp3", "particles": 500, "clusters": "X0,X1;X2,X3"}
      ],
      "steps": 50, "trials": 50, "seed": 0, "mode": "time-budget"
    }

``model`` may instead be ``{"path": "model.json"}``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import zlib
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import exact
from .errors import InferenceError, ModelFormatError
from .filters import FP1, FP2, FP3, PF, Clustering, FilterConfig, init, step
from .generators import contiguous_clusters, generate_random_parent_model, generate_two_cluster_model
from .metrics import belief_to_joint, kl_divergence, kl_marginal_mean
from .model import DbnModel, simulate
from .seeding import make_rng
from .tables import DEFAULT_EPSILON, MULTINOMIAL

log = logging.getLogger(__name__)

FIXED = "fixed"
TIME_BUDGET = "time-budget"
MODES = (FIXED, TIME_BUDGET)
PARTICLE_ALGORITHMS = (PF, FP1, FP2, FP3)

KL_JOINT = "kl_joint"
KL_MARGINAL = "kl_marginal_mean"
NLL = "nll_increment"
WALL_MS = "wall_ms"
PARTICLE_COUNT = "particle_count"
JOIN_ROWS = "join_rows"
DISCARD_RATE = "discard_rate"
FAILURE = "failure"
METRICS = (KL_JOINT, KL_MARGINAL, NLL, WALL_MS, PARTICLE_COUNT, JOIN_ROWS, DISCARD_RATE, FAILURE)
TIMING_METRICS = (WALL_MS,)

GENERATORS = {
    "two-cluster": generate_two_cluster_model,
    "random-parents": generate_random_parent_model,
}

# stream keys for make_rng
_TRIAL_KEY, _FILTER_KEY, _WARMUP_KEY = 1, 2, 3


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class AlgorithmSpec:
    """One column of an experiment: an algorithm and its settings.

    ``clusters`` is either an explicit ``"A,B;C"`` clustering or
    ``"contiguous:k"`` (state variables split into k contiguous blocks).
    ``baseline`` marks the algorithms whose cost sets the time budget.
    """

    name: str
    algorithm: str
    particles: int = 1000
    cluster_particles: int | tuple[int, ...] | None = None
    clusters: str | None = None
    resample: str = MULTINOMIAL
    baseline: bool | None = None

    @classmethod
    def from_dict(cls, data: Mapping) -> AlgorithmSpec:
        data = dict(data)
        if "algorithm" not in data:
            raise ModelFormatError(f"algorithm entry {data} has no 'algorithm' field")
        data.setdefault("name", data["algorithm"])
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ModelFormatError(f"algorithm entry {data['name']!r}: unknown fields {sorted(unknown)}")
        if isinstance(data.get("cluster_particles"), list):
            data["cluster_particles"] = tuple(data["cluster_particles"])
        return cls(**data)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if isinstance(out["cluster_particles"], tuple):
            out["cluster_particles"] = list(out["cluster_particles"])
        return {k: v for k, v in out.items() if v is not None}

    @property
    def is_particle(self) -> bool:
        return self.algorithm in PARTICLE_ALGORITHMS

    def clustering(self, model: DbnModel) -> Clustering | None:
        if self.clusters is None:
            return None
        if self.clusters.startswith("contiguous:"):
            k = int(self.clusters.split(":", 1)[1])
            return Clustering(tuple(tuple(c) for c in contiguous_clusters(model.state_names, k)))
        return Clustering.parse(self.clusters)

    def filter_config(self, model: DbnModel, particles: int | None = None, epsilon: float = DEFAULT_EPSILON,
                      exact_cap: int = exact.DEFAULT_CAP) -> FilterConfig:
        n = self.particles if particles is None else particles
        nc = self.cluster_particles
        if particles is not None and nc is not None and particles != self.particles:
            # keep per-cluster proportions when the budget rescales the count
            scale = particles / self.particles
            nc = tuple(max(1, round(x * scale)) for x in nc) if isinstance(nc, tuple) else max(1, round(nc * scale))
        return FilterConfig(self.algorithm, particles=n, cluster_particles=nc, clustering=self.clustering(model),
                            resample=self.resample, epsilon=epsilon, exact_cap=exact_cap)


@dataclass(frozen=True)
class ModelSource:
    generator: str | None = None
    params: Mapping = field(default_factory=dict)
    seed: int = 0
    path: str | None = None

    def load(self, base: Path | None = None) -> DbnModel:
        from .io import load_model

        if self.path is not None:
            path = Path(self.path)
            return load_model(path if path.is_absolute() or base is None else base / path)
        if self.generator not in GENERATORS:
            raise ModelFormatError(f"unknown generator {self.generator!r}; choose from {sorted(GENERATORS)}")
        return GENERATORS[self.generator](**dict(self.params), rng=make_rng(self.seed))

    def to_dict(self) -> dict:
        if self.path is not None:
            return {"path": self.path}
        return {"generator": self.generator, "params": dict(self.params), "seed": self.seed}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSource
    algorithms: tuple[AlgorithmSpec, ...]
    steps: int = 50
    trials: int = 1
    seed: int = 0
    mode: str = FIXED
    tolerance: float = 0.15
    warmup_steps: int = 5
    epsilon: float = DEFAULT_EPSILON
    kl: bool | None = None  # None: whenever the exact filter is feasible
    exact_cap: int = exact.DEFAULT_CAP
    workers: int = 1
    output: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "algorithms", tuple(self.algorithms))

    def check(self) -> None:
        if self.trials < 1 or self.steps < 1:
            raise ValueError("trials and steps must be >= 1")
        if not self.algorithms:
            raise ValueError("an experiment needs at least one algorithm")
        names = [a.name for a in self.algorithms]
        if len(set(names)) != len(names):
            raise ValueError(f"algorithm names must be unique: {names}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if not 0 < self.tolerance < 1:
            raise ValueError("tolerance must be in (0, 1)")

    @classmethod
    def from_dict(cls, data: Mapping) -> ExperimentConfig:
        data = dict(data)
        try:
            model = ModelSource(**data.pop("model"))
            algorithms = tuple(AlgorithmSpec.from_dict(a) for a in data.pop("algorithms"))
        except (KeyError, TypeError) as exc:
            raise ModelFormatError(f"experiment config: {exc}") from None
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ModelFormatError(f"experiment config: unknown fields {sorted(unknown)}")
        config = cls(model, algorithms, **data)
        config.check()
        return config

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["model"] = self.model.to_dict()
        out["algorithms"] = [a.to_dict() for a in self.algorithms]
        return out


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return ExperimentConfig.from_dict(data)


# --------------------------------------------------------------------------
# records


@dataclass(frozen=True, order=True)
class MetricsRecord:
    trial: int
    t: int
    algorithm: str
    metric: str
    value: float


@dataclass(frozen=True)
class Failure:
    trial: int
    t: int
    algorithm: str
    error: str
    message: str


@dataclass
class ExperimentResult:
    records: list[MetricsRecord]
    failures: list[Failure]
    particles: dict[str, int]
    budget_ms: float | None = None
    calibration: dict[str, dict] = field(default_factory=dict)

    def values(self, algorithm: str, metric: str) -> dict[tuple[int, int], float]:
        return {(r.trial, r.t): r.value for r in self.records if r.algorithm == algorithm and r.metric == metric}


def _stream(seed: int, key: int, *more: int) -> np.random.Generator:
    return make_rng(seed, key, *more)


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode())


# --------------------------------------------------------------------------
# time budget


def measure_step_ms(config: FilterConfig, model: DbnModel, observations: Sequence[Mapping[str, int]],
                    rng: np.random.Generator) -> float:
    """Median wall time of one filter step over ``observations[1:]``, in milliseconds."""
    state = init(config, model, observations[0], rng)
    times = []
    for obs in observations[1:]:
        t0 = time.perf_counter()
        state, _ = step(state, config, model, obs, rng)
        times.append(time.perf_counter() - t0)
    return 1000.0 * float(np.median(times))


def calibrate_count(measure, start: int, target_ms: float, tolerance: float = 0.15,
                    max_evaluations: int = 16) -> tuple[int, float, bool]:
    """Find a count whose measured cost is within ``tolerance`` of ``target_ms``.

    ``measure(n)`` returns milliseconds (``inf`` if the run fails, which is
    treated as too expensive). Costs are assumed to grow with ``n``: the
    search scales ``n`` by the cost ratio until the target is bracketed, then
    bisects geometrically. Returns (n, measured ms, within tolerance); if the
    target is unreachable the closest count tried is returned.
    """
    n, lo, hi = max(1, int(start)), 0, None
    best = (math.inf, n, math.inf)
    for _ in range(max_evaluations):
        ms = measure(n)
        error = abs(ms / target_ms - 1.0) if math.isfinite(ms) else math.inf
        if error < best[0]:
            best = (error, n, ms)
        if error <= tolerance:
            break
        if ms < target_ms:
            lo = n
        else:
            hi = n
        if hi is not None and hi - lo <= 1:
            break
        if hi is None:
            nxt = int(n * min(target_ms / ms, 8.0)) if ms > 0 else 8 * n
            nxt = max(nxt, n + 1)
        elif lo == 0:
            nxt = int(n * max(target_ms / ms, 0.125)) if math.isfinite(ms) else n // 2
            nxt = min(max(nxt, 1), hi - 1)
        else:
            nxt = int(round(math.sqrt(lo * hi)))
            nxt = min(max(nxt, lo + 1), hi - 1)
        n = nxt
    error, n, ms = best
    return n, ms, error <= tolerance


def _baselines(config: ExperimentConfig) -> list[AlgorithmSpec]:
    marked = [a for a in config.algorithms if a.baseline]
    if marked:
        return marked
    fixed = [a for a in config.algorithms if not a.is_particle]
    return fixed or list(config.algorithms)


def equalize_particles(config: ExperimentConfig, model: DbnModel) -> tuple[dict[str, int], float, dict[str, dict]]:
    """Tune every non-baseline particle algorithm to the slowest baseline's per-step time."""
    warm = simulate(model, config.warmup_steps, _stream(config.seed, _WARMUP_KEY)).observations()
    baselines = _baselines(config)
    particles = {a.name: a.particles for a in config.algorithms}
    report: dict[str, dict] = {}

    def measure(spec: AlgorithmSpec, n: int | None) -> float:
        cfg = spec.filter_config(model, n, config.epsilon, config.exact_cap)
        try:
            return measure_step_ms(cfg, model, warm, _stream(config.seed, _WARMUP_KEY, _name_key(spec.name)))
        except InferenceError as exc:
            log.info("warm-up of %s at n=%s failed: %s", spec.name, n, exc)
            return math.inf

    costs = {}
    for spec in baselines:
        costs[spec.name] = measure(spec, None)
        report[spec.name] = {"role": "baseline", "particles": spec.particles, "ms": costs[spec.name]}
    finite = [c for c in costs.values() if math.isfinite(c)]
    if not finite:
        raise InferenceError("no baseline algorithm completed the warm-up run")
    target = max(finite)
    for spec in config.algorithms:
        if spec in baselines or not spec.is_particle:
            continue
        n, ms, ok = calibrate_count(lambda k, s=spec: measure(s, k), spec.particles, target, config.tolerance)
        particles[spec.name] = n
        report[spec.name] = {"role": "calibrated", "particles": n, "ms": ms, "within_tolerance": ok}
        level = logging.INFO if ok else logging.WARNING
        log.log(level, "%s: %d particles, %.3f ms/step (target %.3f ms)", spec.name, n, ms, target)
    return particles, target, report


# --------------------------------------------------------------------------
# running


def _run_trial(config: ExperimentConfig, model: DbnModel, particles: Mapping[str, int],
               trial: int) -> tuple[list[MetricsRecord], list[Failure]]:
    traj = simulate(model, config.steps, _stream(config.seed, _TRIAL_KEY, trial))
    observations = traj.observations()
    want_kl = config.kl
    if want_kl is None:
        want_kl = model.joint_size() <= config.exact_cap
    truth = [d for d, _ in exact.exact_filter(model, observations, config.exact_cap)] if want_kl else None
    records: list[MetricsRecord] = []
    failures: list[Failure] = []
    for spec in config.algorithms:
        name = spec.name
        cfg = spec.filter_config(model, particles.get(name), config.epsilon, config.exact_cap)
        rng = _stream(config.seed, _FILTER_KEY, trial, _name_key(name))
        t = 0
        try:
            state = init(cfg, model, observations[0], rng)
            for t in range(1, len(observations)):
                t0 = time.perf_counter()
                state, inc = step(state, cfg, model, observations[t], rng)
                elapsed = 1000.0 * (time.perf_counter() - t0)
                rec = [(NLL, -inc), (WALL_MS, elapsed)]
                if spec.is_particle:
                    rec.append((PARTICLE_COUNT, float(state.diagnostics.get("particle_count", cfg.particles))))
                for key in (JOIN_ROWS, DISCARD_RATE):
                    if key in state.diagnostics:
                        rec.append((key, float(state.diagnostics[key])))
                if truth is not None:
                    rec.append((KL_JOINT, kl_divergence(truth[t], belief_to_joint(state, model, config.epsilon))))
                    rec.append((KL_MARGINAL, kl_marginal_mean(truth[t], state, model, config.epsilon)))
                records.extend(MetricsRecord(trial, t, name, m, float(v)) for m, v in rec)
        except InferenceError as exc:
            failures.append(Failure(trial, t, name, type(exc).__name__, str(exc)))
            records.append(MetricsRecord(trial, t, name, FAILURE, 1.0))
            log.warning("trial %d, %s failed at t=%d: %s", trial, name, t, exc)
    return records, failures


def _trial_task(args):
    return _run_trial(*args)


def run_experiment(config: ExperimentConfig, model: DbnModel | None = None,
                   base_dir: Path | None = None) -> ExperimentResult:
    """Run every trial of ``config``; records come back sorted by (trial, t, algorithm, metric)."""
    config.check()
    model = config.model.load(base_dir) if model is None else model
    for spec in config.algorithms:
        spec.filter_config(model, epsilon=config.epsilon, exact_cap=config.exact_cap).check(model)
    budget, report = None, {}
    if config.mode == TIME_BUDGET:
        particles, budget, report = equalize_particles(config, model)
    else:
        particles = {a.name: a.particles for a in config.algorithms}
    tasks = [(config, model, particles, trial) for trial in range(config.trials)]
    if config.workers > 1 and config.trials > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outputs = list(pool.map(_trial_task, tasks))
    else:
        outputs = [_trial_task(task) for task in tasks]
    records = sorted(r for recs, _ in outputs for r in recs)
    failures = sorted((f for _, fs in outputs for f in fs), key=lambda f: (f.trial, f.t, f.algorithm))
    return ExperimentResult(records, failures, particles, budget, report)


# --------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class Stat:
    mean: float
    stderr: float
    n: int

    @classmethod
    def of(cls, values: Iterable[float]) -> Stat:
        v = np.asarray(list(values), dtype=float)
        if v.size == 0:
            return cls(math.nan, math.nan, 0)
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        return cls(float(v.mean()), se, int(v.size))

    def __str__(self):
        return f"{self.mean:.4g} ± {self.stderr:.2g}"


@dataclass
class Summary:
    """Aggregates of a record list.

    ``per_trial[(alg, metric)][trial]`` is the trial's mean over slices
    ``t >= t_min`` (for ``nll_total`` the sum of the NLL increments over all
    slices). ``table`` holds mean ± stderr across trials and ``series``
    the per-slice mean ± stderr across trials.
    """

    per_trial: dict[tuple[str, str], dict[int, float]]
    table: dict[tuple[str, str], Stat]
    series: dict[tuple[str, str], dict[int, Stat]]
    algorithms: list[str]

    def stat(self, algorithm: str, metric: str) -> Stat:
        return self.table[(algorithm, metric)]

    def trial_values(self, algorithm: str, metric: str) -> dict[int, float]:
        return self.per_trial[(algorithm, metric)]


NLL_TOTAL = "nll_total"


def summarize(records: Sequence[MetricsRecord], t_min: int = 0) -> Summary:
    if not records:
        raise ValueError("nothing to summarize")
    algorithms = list(dict.fromkeys(r.algorithm for r in records))
    by_trial: dict[tuple[str, str], dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    by_step: dict[tuple[str, str], dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    nll_sum: dict[str, dict[int, float]] = defaultdict(lambda: defaultdict(float))
    for r in records:
        by_step[(r.algorithm, r.metric)][r.t].append(r.value)
        if r.metric == NLL:
            nll_sum[r.algorithm][r.trial] += r.value
        if r.t >= t_min:
            by_trial[(r.algorithm, r.metric)][r.trial].append(r.value)
    per_trial = {key: {trial: float(np.mean(v)) for trial, v in sorted(trials.items())}
                 for key, trials in by_trial.items()}
    for alg, trials in nll_sum.items():
        per_trial[(alg, NLL_TOTAL)] = dict(sorted(trials.items()))
    table = {key: Stat.of(v.values()) for key, v in per_trial.items()}
    series = {key: {t: Stat.of(v) for t, v in sorted(steps.items())} for key, steps in by_step.items()}
    return Summary(per_trial, table, series, algorithms)


def paired_less(summary: Summary, a: str, b: str, metric: str) -> tuple[float, float, int]:
    """One-sided paired t-test that ``a`` has the smaller per-trial ``metric``.

    Returns (mean of a - b, p-value, number of paired trials). Trials where
    either algorithm has no value (e.g. it failed) are dropped.
    """
    va, vb = summary.trial_values(a, metric), summary.trial_values(b, metric)
    common = sorted(set(va) & set(vb))
    x = np.array([va[k] for k in common])
    y = np.array([vb[k] for k in common])
    diff = x - y
    if len(common) < 2:
        return float(diff.mean()) if len(common) else math.nan, math.nan, len(common)
    if np.all(diff == diff[0]):
        return float(diff[0]), 0.0 if diff[0] < 0 else 1.0, len(common)
    p = stats.ttest_rel(x, y, alternative="less").pvalue
    return float(diff.mean()), float(p), len(common)


def format_table(summary: Summary, config: ExperimentConfig, result: ExperimentResult | None = None,
                 model: DbnModel | None = None) -> str:
    """Plain-text table: algorithm, clusters, particles, -log lik., KL, time/iter."""
    specs = {a.name: a for a in config.algorithms}
    header = ["algorithm", "clusters", "particles", "-log lik.", "KL joint", "time/iter (ms)"]
    order = [a.name for a in config.algorithms if a.name in summary.algorithms]
    order += [name for name in summary.algorithms if name not in specs]
    lines = []
    for name in order:
        spec = specs.get(name)
        if spec is not None and spec.clusters is not None:
            clusters = spec.clusters.split(":", 1)[1] if spec.clusters.startswith("contiguous:") else \
                str(len(Clustering.parse(spec.clusters)))
        else:
            clusters = "-"
        n = result.particles.get(name) if result is not None else (spec.particles if spec else None)
        particles = str(n) if spec is not None and spec.is_particle else "-"

        def cell(metric):
            key = (name, metric)
            return str(summary.table[key]) if key in summary.table else "-"

        lines.append([name, clusters, particles, cell(NLL_TOTAL), cell(KL_JOINT), cell(WALL_MS)])
    widths = [max(len(h), *(len(row[i]) for row in lines)) for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return "\n".join([fmt.format(*header), fmt.format(*("-" * w for w in widths))] + [fmt.format(*r) for r in lines])


# --------------------------------------------------------------------------
# output


def dumps_records(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "t", "algorithm", "metric", "value"])
    for r in records:
        w.writerow([r.trial, r.t, r.algorithm, r.metric, repr(r.value)])
    return buf.getvalue()


def loads_records(text: str) -> list[MetricsRecord]:
    reader = csv.DictReader(io.StringIO(text))
    return [MetricsRecord(int(row["trial"]), int(row["t"]), row["algorithm"], row["metric"], float(row["value"]))
            for row in reader]


def summary_to_dict(summary: Summary, result: ExperimentResult, config: ExperimentConfig) -> dict:
    """JSON-ready summary. Timing-dependent values live under ``"timing"``."""
    metrics = []
    timing = []
    for (alg, metric), s in sorted(summary.table.items()):
        entry = {"algorithm": alg, "metric": metric, "mean": s.mean, "stderr": s.stderr, "n": s.n}
        (timing if metric in TIMING_METRICS else metrics).append(entry)
    series = {f"{alg}/{metric}": [[t, s.mean, s.stderr] for t, s in steps.items()]
              for (alg, metric), steps in sorted(summary.series.items())
              if metric in (KL_JOINT, KL_MARGINAL, NLL)}
    out = {
        "config": config.to_dict(),
        "metrics": metrics,
        "series": series,
        "failures": [f.__dict__ for f in result.failures],
        "timing": {"metrics": timing, "budget_ms": result.budget_ms, "calibration": result.calibration},
    }
    if config.mode == FIXED:
        out["particles"] = result.particles
    else:
        out["timing"]["particles"] = result.particles
    return out


def write_outputs(result: ExperimentResult, config: ExperimentConfig, out: Path | str,
                  summary_path: Path | str | None = None) -> Summary:
    Path(out).write_text(dumps_records(result.records))
    summary = summarize(result.records)
    if summary_path is not None:
        Path(summary_path).write_text(json.dumps(summary_to_dict(summary, result, config), indent=1,
                                                 default=_json_default) + "\n")
    return summary


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


__all__ = [
    "AlgorithmSpec",
    "ExperimentConfig",
    "ExperimentResult",
    "Failure",
    "MetricsRecord",
    "ModelSource",
    "Stat",
    "Summary",
    "calibrate_count",
    "dumps_records",
    "equalize_particles",
    "format_table",
    "load_config",
    "loads_records",
    "measure_step_ms",
    "paired_less",
    "run_experiment",
    "summarize",
    "summary_to_dict",
    "write_outputs",
]
