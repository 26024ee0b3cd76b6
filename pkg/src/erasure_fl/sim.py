"""Round-by-round federated training over erasure links.

One round: broadcast ``w(t-1)`` (downlink is error-free), every device runs
``tau`` local GD steps, the uplink erasure pattern is drawn, the central
node aggregates with the configured strategy, metrics are recorded.

Randomness comes from a single ``numpy.random.default_rng(seed)`` stream:
dataset generation consumes it first (training data, then any held-out
data), then each round draws exactly N uniforms for its erasure pattern, in
round order. Every strategy draws the pattern, even error-free, so runs
that differ only in strategy see the same erasure stream.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from erasure_fl import analysis
from erasure_fl.aggregate import (
    ERROR_FREE,
    MEMORYLESS,
    STALE_REUSE,
    UpdateCache,
    aggregate_error_free,
    aggregate_memoryless,
    aggregate_stale_reuse,
    check_strategy,
)
from erasure_fl.channel import ErasureChannelSet, ErasurePattern, sample_pattern
from erasure_fl.data import (
    CLASSIFICATION,
    REGRESSION,
    FederatedDataset,
    LocalDataset,
    gen_classification_blobs,
    gen_linear,
    gen_linear_devices,
    load_csv,
    partition_noniid_intervals,
    partition_uniform,
    spread,
)
from erasure_fl.errors import DivergenceError, InvalidConfigError, RankDeficiencyError
from erasure_fl.model import LINEAR_MSE, SOFTMAX_XENT, LossSpec, accuracy, local_loss, local_update

DATASETS = ("linear", "quadratic-noniid", "uniform", "blobs", "csv")
ETA_INVERSE_L = "1/L"
THREADS_ENV = "ERASURE_FL_THREADS"
CSV_COLUMNS = (
    "round",
    "strategy",
    "epsilon",
    "mse_train",
    "mse_test",
    "delta",
    "delta_bar",
    "received_count",
    "pattern_bits",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment description; field names double as config-file keys.

    ``eta`` may be the string ``"1/L"`` to use the inverse smoothness
    constant of the global loss.
    """

    devices: int = 3
    dataset: str = "linear"
    per_device: int = 1000
    noise_sigma: float = 0.5
    x_min: float = -3.0
    x_max: float = 3.0
    slope: float = 2.0
    slope_step: float = 1.0
    intercept: float = 1.0
    intercept_step: float = 1.0
    blob_dim: int = 2
    separation: float = 4.0
    test_per_device: int = 0
    csv_paths: tuple[str, ...] = ()
    strategy: str = STALE_REUSE
    epsilon: float | tuple[float, ...] = 0.0
    eta: float | str = 0.005
    tau: int = 1
    rounds: int = 100
    seed: int = 0
    force_first_round_error_free: bool = False
    model: str = LINEAR_MSE
    reg: float = 0.0
    init: str | tuple[float, ...] = "zeros"

    def __post_init__(self) -> None:
        if isinstance(self.epsilon, (list, tuple)):
            object.__setattr__(self, "epsilon", tuple(float(e) for e in self.epsilon))
        if isinstance(self.init, list):
            object.__setattr__(self, "init", tuple(float(v) for v in self.init))
        object.__setattr__(self, "csv_paths", tuple(self.csv_paths))
        if self.dataset not in DATASETS:
            raise InvalidConfigError(f"unknown dataset {self.dataset!r}; expected one of {', '.join(DATASETS)}")
        check_strategy(self.strategy)
        if self.rounds < 1:
            raise InvalidConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.tau < 0:
            raise InvalidConfigError(f"tau must be >= 0, got {self.tau}")
        if isinstance(self.eta, str):
            if self.eta != ETA_INVERSE_L:
                raise InvalidConfigError(f"eta must be a positive number or {ETA_INVERSE_L!r}")
        elif not self.eta > 0:
            raise InvalidConfigError(f"eta must be > 0, got {self.eta}")
        if self.dataset == "csv":
            if not self.csv_paths:
                raise InvalidConfigError("dataset 'csv' needs csv_paths")
        elif self.devices < 1 or self.per_device < 1:
            raise InvalidConfigError("devices and per_device must be >= 1")
        if self.dataset == "blobs" and self.model != SOFTMAX_XENT:
            raise InvalidConfigError("blobs data needs model softmax-xent")
        if self.model not in (LINEAR_MSE, SOFTMAX_XENT):
            raise InvalidConfigError(f"unknown model {self.model!r}")
        if isinstance(self.init, str) and self.init != "zeros":
            raise InvalidConfigError("init must be 'zeros' or a parameter vector")
        eps = self.epsilon if isinstance(self.epsilon, tuple) else (self.epsilon,)
        if any(not 0 <= e <= 1 for e in eps):
            raise InvalidConfigError(f"epsilon entries must lie in [0, 1], got {self.epsilon}")
        if isinstance(self.epsilon, tuple) and len(self.epsilon) != self.n_devices:
            raise InvalidConfigError(f"{len(self.epsilon)} erasure probabilities for {self.n_devices} devices")

    @property
    def n_devices(self) -> int:
        return len(self.csv_paths) if self.dataset == "csv" else self.devices

    def channels(self) -> ErasureChannelSet:
        if isinstance(self.epsilon, tuple):
            return ErasureChannelSet(np.array(self.epsilon))
        return ErasureChannelSet.uniform(self.n_devices, self.epsilon)

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        vals = dict(values)
        for k in ("csv_paths", "epsilon", "init"):
            if isinstance(vals.get(k), list):
                vals[k] = tuple(vals[k])
        return cls(**vals)


def epsilon_label(epsilon: float | tuple[float, ...]) -> str:
    if isinstance(epsilon, tuple):
        return ";".join(format(e, ".17g") for e in epsilon)
    return format(float(epsilon), ".17g")


def build_dataset(cfg: ExperimentConfig, rng: np.random.Generator) -> FederatedDataset:
    """Materialize the configured dataset, training data first then held-out."""
    n = cfg.n_devices
    x_range = (cfg.x_min, cfg.x_max)
    if cfg.dataset == "csv":
        task = CLASSIFICATION if cfg.model == SOFTMAX_XENT else REGRESSION
        parts = tuple(load_csv(p, task) for p in cfg.csv_paths)
        return FederatedDataset(parts, "per-device")
    if cfg.dataset == "blobs":
        return gen_classification_blobs(
            n, cfg.per_device, cfg.blob_dim, cfg.separation, cfg.noise_sigma, rng, cfg.test_per_device
        )

    def draw(per_device: int) -> FederatedDataset:
        if cfg.dataset == "linear":
            return gen_linear_devices(
                n,
                per_device,
                spread(cfg.slope, cfg.slope_step, n),
                spread(cfg.intercept, cfg.intercept_step, n),
                cfg.noise_sigma,
                x_range,
                rng,
            )
        if cfg.dataset == "quadratic-noniid":
            return partition_noniid_intervals(x_range, n, per_device, cfg.noise_sigma, rng)
        pool = gen_linear(n * per_device, cfg.slope, cfg.intercept, cfg.noise_sigma, x_range, rng)
        return partition_uniform(pool, n, rng)

    fed = draw(cfg.per_device)
    if cfg.test_per_device:
        fed = dataclasses.replace(fed, test=draw(cfg.test_per_device).pooled())
    return fed


def loss_spec(cfg: ExperimentConfig, fed: FederatedDataset) -> LossSpec:
    if cfg.model == SOFTMAX_XENT:
        return LossSpec(SOFTMAX_XENT, cfg.reg, n_classes=fed.n_classes)
    return LossSpec(LINEAR_MSE, cfg.reg)


def resolve_eta(cfg: ExperimentConfig, fed: FederatedDataset, spec: LossSpec) -> float:
    if cfg.eta == ETA_INVERSE_L:
        return 1.0 / analysis.curvature(fed, spec).L
    return float(cfg.eta)


def initial_params(cfg: ExperimentConfig, fed: FederatedDataset, spec: LossSpec) -> np.ndarray:
    size = spec.param_size(fed.width)
    if cfg.init == "zeros":
        return np.zeros(size)
    w0 = np.array(cfg.init, dtype=float)
    if w0.shape != (size,):
        raise InvalidConfigError(f"init vector has length {w0.size}, model needs {size}")
    return w0


@dataclass(frozen=True)
class RoundMetrics:
    """Metrics of the global parameter after one round.

    ``mse_train`` is ``2 F(w)`` at zero regularization: the pooled training
    MSE for linear-mse, and twice the pooled mean cross-entropy for
    softmax-xent. ``mse_test`` is the held-out MSE (linear-mse) or held-out
    accuracy (softmax-xent), None without a held-out set. ``delta_bar`` is
    the average of ``delta`` over rounds ``0..t-1``.
    """

    round: int
    mse_train: float
    mse_test: float | None
    delta: float
    delta_bar: float
    received_count: int
    pattern_bits: str


@dataclass(eq=False)
class ExperimentResult:
    """``trajectory[t]`` is the global parameter after round t (row 0 is the
    initialization). ``patterns`` are the reception patterns the aggregation
    used; ``drawn_patterns`` are the raw channel draws, which differ only
    where the strategy or the first-round override ignores erasures."""

    config: ExperimentConfig
    dataset: FederatedDataset
    spec: LossSpec
    eta: float
    trajectory: np.ndarray
    patterns: np.ndarray
    drawn_patterns: np.ndarray
    metrics: list[RoundMetrics]
    w_star: np.ndarray | None
    f_star: float | None
    delta: np.ndarray
    delta_bar: np.ndarray
    mse_initial: float = math.nan
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def strategy(self) -> str:
        return self.config.strategy

    def mse_series(self, include_initial: bool = False) -> np.ndarray:
        series = np.array([m.mse_train for m in self.metrics])
        return np.concatenate([[self.mse_initial], series]) if include_initial else series

    def test_series(self) -> np.ndarray:
        return np.array([math.nan if m.mse_test is None else m.mse_test for m in self.metrics])

    @property
    def final_mse(self) -> float:
        return self.metrics[-1].mse_train

    def f0_gap(self) -> float:
        F = analysis.global_objective(self.dataset, self.spec)
        return F.value(self.trajectory[0]) - float(self.f_star)


def _train_metric(w: np.ndarray, pooled: LocalDataset, spec: LossSpec) -> float:
    return 2.0 * local_loss(w, pooled, dataclasses.replace(spec, reg=0.0))


def _test_metric(w: np.ndarray, test: LocalDataset | None, spec: LossSpec) -> float | None:
    if test is None:
        return None
    if spec.kind == SOFTMAX_XENT:
        return accuracy(w, test, spec)
    return _train_metric(w, test, spec)


def _local_updates(w: np.ndarray, fed: FederatedDataset, spec: LossSpec, eta: float, tau: int, t: int) -> dict[int, np.ndarray]:
    updates = {}
    for i, part in enumerate(fed.parts):
        try:
            updates[i] = local_update(w, part, spec, eta, tau)
        except DivergenceError as exc:
            raise exc.with_context(t, i) from None
    return updates


def _aggregate(
    strategy: str,
    updates: dict[int, np.ndarray],
    pattern: ErasurePattern,
    sizes: np.ndarray,
    w_prev: np.ndarray,
    cache: UpdateCache,
    t: int,
) -> tuple[np.ndarray, UpdateCache]:
    if strategy == ERROR_FREE:
        return aggregate_error_free([updates[i] for i in range(len(sizes))], sizes), cache
    if strategy == MEMORYLESS:
        return aggregate_memoryless(updates, pattern, sizes, w_prev), cache
    return aggregate_stale_reuse(updates, pattern, sizes, cache, t)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    rng = np.random.default_rng(cfg.seed)
    fed = build_dataset(cfg, rng)
    spec = loss_spec(cfg, fed)
    eta = resolve_eta(cfg, fed, spec)
    channels = cfg.channels()
    if channels.n_devices != fed.n_devices:
        raise InvalidConfigError("erasure probabilities do not match the device count")
    sizes = fed.sizes
    pooled = fed.pooled()
    w = initial_params(cfg, fed, spec)
    cache = UpdateCache.initial(fed.n_devices, w)

    trajectory = [w]
    patterns = []
    drawn = []
    for t in range(1, cfg.rounds + 1):
        updates = _local_updates(w, fed, spec, eta, cfg.tau, t)
        pattern = sample_pattern(channels, rng)
        drawn.append(pattern.received)
        if cfg.strategy == ERROR_FREE or (t == 1 and cfg.force_first_round_error_free):
            pattern = ErasurePattern.all_received(fed.n_devices)
        w, cache = _aggregate(cfg.strategy, updates, pattern, sizes, w, cache, t)
        trajectory.append(w)
        patterns.append(pattern.received)

    traj = np.vstack(trajectory)
    try:
        w_star, f_star = analysis.optimal_params(fed, spec)
        delta, delta_bar = analysis.delta_metrics(traj, w_star)
    except RankDeficiencyError:
        w_star, f_star = None, None
        delta = delta_bar = np.full(traj.shape[0], math.nan)

    metrics = []
    for t in range(1, cfg.rounds + 1):
        bits = patterns[t - 1]
        metrics.append(
            RoundMetrics(
                round=t,
                mse_train=_train_metric(traj[t], pooled, spec),
                mse_test=_test_metric(traj[t], fed.test, spec),
                delta=float(delta[t]),
                delta_bar=float(delta_bar[t - 1]),
                received_count=int(bits.sum()),
                pattern_bits="".join("1" if b else "0" for b in bits),
            )
        )
    return ExperimentResult(
        config=cfg,
        dataset=fed,
        spec=spec,
        eta=eta,
        trajectory=traj,
        patterns=np.vstack(patterns),
        drawn_patterns=np.vstack(drawn),
        metrics=metrics,
        w_star=w_star,
        f_star=f_star,
        delta=delta,
        delta_bar=delta_bar,
        mse_initial=_train_metric(traj[0], pooled, spec),
    )


def replay(result: ExperimentResult) -> np.ndarray:
    """Rebuild the trajectory from the logged patterns.

    Local updates are recomputed from the recorded global parameters and fed
    through a fresh cache; the output must equal ``result.trajectory``
    bit-for-bit.
    """
    fed, spec, cfg = result.dataset, result.spec, result.config
    w = result.trajectory[0]
    cache = UpdateCache.initial(fed.n_devices, w)
    out = [w]
    for t in range(1, cfg.rounds + 1):
        updates = _local_updates(result.trajectory[t - 1], fed, spec, result.eta, cfg.tau, t)
        pattern = ErasurePattern(result.patterns[t - 1])
        w, cache = _aggregate(cfg.strategy, updates, pattern, fed.sizes, result.trajectory[t - 1], cache, t)
        out.append(w)
    return np.vstack(out)


def compare_strategies(cfg: ExperimentConfig, strategies: Sequence[str]) -> dict[str, ExperimentResult]:
    """Run each strategy on the same seed: identical dataset and identical
    erasure-pattern stream (common random numbers)."""
    if not strategies:
        raise InvalidConfigError("need at least one strategy")
    return {s: run_experiment(cfg.replace(strategy=check_strategy(s))) for s in strategies}


def rounds_to_threshold(mse: Sequence[float], reference_final: float, theta: float = 0.01) -> int | None:
    """First index ``t`` with ``mse[t] <= (1 + theta) * reference_final``.

    ``mse`` is indexed by round (pass the series including round 0 to allow
    ``t = 0``). None when the threshold is never reached.
    """
    limit = (1.0 + theta) * reference_final
    hits = np.flatnonzero(np.asarray(mse) <= limit)
    return int(hits[0]) if hits.size else None


# -- CSV output ------------------------------------------------------------------


def _fmt(v: float | None) -> str:
    if v is None:
        return ""
    return format(float(v), ".17g")


def metrics_csv(results: Sequence[ExperimentResult]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for res in results:
        eps = epsilon_label(res.config.epsilon)
        for m in res.metrics:
            row = [
                str(m.round),
                res.strategy,
                eps,
                _fmt(m.mse_train),
                _fmt(m.mse_test),
                _fmt(m.delta),
                _fmt(m.delta_bar),
                str(m.received_count),
                m.pattern_bits,
            ]
            buf.write(",".join(row) + "\n")
    return buf.getvalue()


def write_metrics_csv(results: Sequence[ExperimentResult], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_csv(results))


# -- sweeps ---------------------------------------------------------------------------

SWEEP_PARAMETERS = {"epsilon": "epsilon", "eta": "eta", "tau": "tau", "N": "devices"}


def trial_seed(base_seed: int, trial: int) -> int:
    """Seed of trial ``trial``: the first 64-bit word of
    ``SeedSequence(base_seed, spawn_key=(trial,))``. Trials share seeds
    across swept values (common random numbers)."""
    ss = np.random.SeedSequence(base_seed, spawn_key=(trial,))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class TrialOutcome:
    value: Any
    trial: int
    seed: int
    final_mse: float
    rounds_to_threshold: int | None


@dataclass(frozen=True)
class SweepPoint:
    value: Any
    trials: int
    final_mse_mean: float
    final_mse_std: float
    rounds_mean: float
    rounds_std: float
    unreached: int

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _run_trial(job: tuple[ExperimentConfig, Any, int, float]) -> TrialOutcome:
    cfg, value, trial, theta = job
    res = run_experiment(cfg)
    ref = res if cfg.strategy == ERROR_FREE else run_experiment(cfg.replace(strategy=ERROR_FREE))
    rtt = rounds_to_threshold(res.mse_series(include_initial=True), ref.final_mse, theta)
    return TrialOutcome(value, trial, cfg.seed, res.final_mse, rtt)


def worker_count() -> int:
    """Trial parallelism from ``ERASURE_FL_THREADS`` (0 or unset = all CPUs)."""
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise InvalidConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 0:
        raise InvalidConfigError(f"{THREADS_ENV} must be >= 0")
    return n or (os.cpu_count() or 1)


def sweep_outcomes(
    cfg: ExperimentConfig,
    parameter: str,
    values: Sequence[Any],
    trials: int,
    theta: float = 0.01,
    workers: int | None = None,
) -> list[TrialOutcome]:
    """Per-trial outcomes ordered by (value index, trial index)."""
    if parameter not in SWEEP_PARAMETERS:
        raise InvalidConfigError(f"cannot sweep {parameter!r}; expected one of {', '.join(SWEEP_PARAMETERS)}")
    if trials < 1 or not values:
        raise InvalidConfigError("need at least one value and one trial")
    field_name = SWEEP_PARAMETERS[parameter]
    jobs = []
    for value in values:
        for trial in range(trials):
            trial_cfg = cfg.replace(**{field_name: value, "seed": trial_seed(cfg.seed, trial)})
            jobs.append((trial_cfg, value, trial, theta))
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) == 1:
        return [_run_trial(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_trial, jobs))


def summarize(outcomes: Sequence[TrialOutcome], rounds: int) -> list[SweepPoint]:
    """Mean and standard deviation per swept value. Runs that never reach the
    threshold count as ``rounds + 1``."""
    points = []
    values: list[Any] = []
    for o in outcomes:
        if o.value not in values:
            values.append(o.value)
    for value in values:
        group = [o for o in outcomes if o.value == value]
        finals = np.array([o.final_mse for o in group])
        rtt = np.array([rounds + 1 if o.rounds_to_threshold is None else o.rounds_to_threshold for o in group], dtype=float)
        points.append(
            SweepPoint(
                value=value,
                trials=len(group),
                final_mse_mean=float(finals.mean()),
                final_mse_std=float(finals.std()),
                rounds_mean=float(rtt.mean()),
                rounds_std=float(rtt.std()),
                unreached=sum(o.rounds_to_threshold is None for o in group),
            )
        )
    return points


def sweep(
    cfg: ExperimentConfig,
    parameter: str,
    values: Sequence[Any],
    trials: int,
    theta: float = 0.01,
    workers: int | None = None,
) -> list[SweepPoint]:
    return summarize(sweep_outcomes(cfg, parameter, values, trials, theta, workers), cfg.rounds)


def config_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
