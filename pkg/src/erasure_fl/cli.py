"""Command-line front end.

    erasure-fl generate quadratic-noniid --devices 10 --per-device 100 --seed 7 --out data/
    erasure-fl run --strategy stale-reuse --epsilon 0.3 --rounds 300 --out run.csv
    erasure-fl compare --strategies error-free,memoryless,stale-reuse --epsilon 0.3 --out cmp.csv
    erasure-fl sweep --parameter epsilon --values 0.1,0.3,0.5 --trials 20 --out sweep.json
    erasure-fl analyze pmf|bound|inequalities ...

Exit codes: 0 success, 1 I/O error, 2 usage error, 3 divergence or numerical
failure, 4 convergence-bound preconditions not met.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from erasure_fl import __version__, analysis
from erasure_fl.aggregate import STALE_REUSE, STRATEGIES
from erasure_fl.channel import ErasureChannelSet
from erasure_fl.data import FederatedDataset, save_csv
from erasure_fl.errors import (
    DatasetParseError,
    DivergenceError,
    InvalidConfigError,
    NotApplicableError,
    NumericalError,
    RankDeficiencyError,
)
from erasure_fl.model import LINEAR_MSE, SOFTMAX_XENT
from erasure_fl.sim import (
    DATASETS,
    ETA_INVERSE_L,
    SWEEP_PARAMETERS,
    ExperimentConfig,
    build_dataset,
    compare_strategies,
    loss_spec,
    metrics_csv,
    run_experiment,
    sweep_outcomes,
    summarize,
)

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_DIVERGENCE, EXIT_NOT_APPLICABLE = 0, 1, 2, 3, 4
GENERATORS = ("linear", "quadratic-noniid", "uniform", "blobs")


class UsageError(Exception):
    pass


# -- argument parsing ----------------------------------------------------------------


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _epsilon(text: str) -> float | tuple[float, ...]:
    vals = _floats(text)
    if not vals:
        raise argparse.ArgumentTypeError("empty epsilon")
    return vals[0] if len(vals) == 1 and "," not in text else vals


def _eta(text: str) -> float | str:
    if text == ETA_INVERSE_L:
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"eta must be a number or {ETA_INVERSE_L!r}") from None


def _init(text: str) -> str | tuple[float, ...]:
    return text if text == "zeros" else _floats(text)


# (flag, config field, type)
_EXPERIMENT_FLAGS: list[tuple[str, str, Any]] = [
    ("--devices", "devices", int),
    ("--dataset", "dataset", str),
    ("--per-device", "per_device", int),
    ("--noise-sigma", "noise_sigma", float),
    ("--x-min", "x_min", float),
    ("--x-max", "x_max", float),
    ("--slope", "slope", float),
    ("--slope-step", "slope_step", float),
    ("--intercept", "intercept", float),
    ("--intercept-step", "intercept_step", float),
    ("--blob-dim", "blob_dim", int),
    ("--separation", "separation", float),
    ("--test-per-device", "test_per_device", int),
    ("--strategy", "strategy", str),
    ("--epsilon", "epsilon", _epsilon),
    ("--eta", "eta", _eta),
    ("--tau", "tau", int),
    ("--rounds", "rounds", int),
    ("--seed", "seed", int),
    ("--model", "model", str),
    ("--reg", "reg", float),
    ("--init", "init", _init),
]


def _add_experiment_flags(p: argparse.ArgumentParser, skip: Sequence[str] = ()) -> None:
    g = p.add_argument_group("experiment")
    g.add_argument("--config", help="flat JSON config file or a run manifest")
    for flag, dest, typ in _EXPERIMENT_FLAGS:
        if dest in skip:
            continue
        kwargs: dict[str, Any] = {"dest": dest, "type": typ, "default": None}
        if dest == "dataset":
            kwargs["choices"] = DATASETS
        elif dest == "strategy":
            kwargs["choices"] = STRATEGIES
        elif dest == "model":
            kwargs["choices"] = (LINEAR_MSE, SOFTMAX_XENT)
        g.add_argument(flag, **kwargs)
    g.add_argument("--csv-paths", dest="csv_paths", nargs="+", default=None)
    g.add_argument(
        "--force-first-round-error-free",
        dest="force_first_round_error_free",
        action=argparse.BooleanOptionalAction,
        default=None,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="erasure-fl", description="Federated learning over packet-erasure links")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write per-device dataset CSVs")
    gen.add_argument("generator", choices=GENERATORS)
    _add_experiment_flags(gen, skip=("dataset",))
    gen.add_argument("--out", required=True, help="output directory")

    for name, helptext in (("run", "run one experiment"), ("compare", "run several strategies on one seed")):
        p = sub.add_parser(name, help=helptext)
        _add_experiment_flags(p)
        if name == "compare":
            p.add_argument("--strategies", default=None, help="comma-separated strategy list")
        p.add_argument("--out", required=True, help="metrics CSV path")
        p.add_argument("--manifest", default=None, help="manifest path (default: <out>.manifest.json)")

    sw = sub.add_parser("sweep", help="summary statistics over a parameter sweep")
    _add_experiment_flags(sw)
    sw.add_argument("--parameter", required=True, choices=tuple(SWEEP_PARAMETERS))
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.add_argument("--trials", type=int, default=10)
    sw.add_argument("--theta", type=float, default=0.01)
    sw.add_argument("--out", default=None, help="JSON path (default: stdout)")

    an = sub.add_parser("analyze", help="distribution, bound and inequality reports")
    an_sub = an.add_subparsers(dest="analysis", required=True)
    pmf = an_sub.add_parser("pmf", help="exact distribution of the memoryless aggregate")
    _add_experiment_flags(pmf)
    pmf.add_argument(
        "--local-params",
        default=None,
        help="device parameters, devices separated by ';' and components by ',' "
        "(default: each device's own optimum on the configured data)",
    )
    pmf.add_argument("--all-atoms", action="store_true", help="include zero-probability patterns")
    pmf.add_argument("--out", default=None)

    bound = an_sub.add_parser("bound", help="averaged-gap bound vs. a stale-reuse run")
    _add_experiment_flags(bound)
    bound.add_argument("--epsilon-fraction", type=float, default=None, help="use epsilon = fraction * mu/(2L)")
    bound.add_argument("--out", default=None)

    ineq = an_sub.add_parser("inequalities", help="sample the smooth-convex inequalities")
    _add_experiment_flags(ineq)
    ineq.add_argument("--pairs", type=int, default=1000)
    ineq.add_argument("--pair-seed", type=int, default=0)
    ineq.add_argument("--pair-scale", type=float, default=3.0)
    ineq.add_argument("--out", default=None)
    return parser


# -- config resolution -------------------------------------------------------------


def _read_json(path: str) -> dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return doc


def resolve(args: argparse.Namespace, **overrides: Any) -> tuple[ExperimentConfig, dict[str, Any]]:
    """Defaults < config file < flags < ``overrides``.

    Returns the config and any command options stored in a manifest.
    """
    values: dict[str, Any] = {}
    options: dict[str, Any] = {}
    if getattr(args, "config", None):
        doc = _read_json(args.config)
        if "config" in doc and isinstance(doc["config"], dict):
            values.update(doc["config"])
            options = dict(doc.get("options", {}))
        else:
            values.update(doc)
    for _, dest, _ in _EXPERIMENT_FLAGS + [("", "csv_paths", None), ("", "force_first_round_error_free", None)]:
        v = getattr(args, dest, None)
        if v is not None:
            values[dest] = v
    values.update(overrides)
    return ExperimentConfig.from_dict(values), options


def _digest(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest(command: str, cfg: ExperimentConfig, outputs: Sequence[str], options: dict[str, Any] | None = None) -> dict:
    return {
        "tool": "erasure-fl",
        "version": __version__,
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "options": options or {},
        "input_digests": {p: _digest(p) for p in cfg.csv_paths},
        "outputs": list(outputs),
    }


def _dumps(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _write_text(path: str, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _emit(doc: Any, out: str | None) -> None:
    if out:
        _write_text(out, _dumps(doc))
    else:
        sys.stdout.write(_dumps(doc))


# -- commands ---------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    extra = {"model": SOFTMAX_XENT} if args.generator == "blobs" else {}
    cfg, _ = resolve(args, dataset=args.generator, **extra)
    fed = build_dataset(cfg, np.random.default_rng(cfg.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, part in enumerate(fed.parts):
        path = out / f"device_{i:03d}.csv"
        save_csv(part, path)
        written.append(str(path))
    if fed.test is not None:
        path = out / "test.csv"
        save_csv(fed.test, path)
        written.append(str(path))
    _write_text(str(out / "manifest.json"), _dumps(manifest("generate", cfg, written)))
    return EXIT_OK


def _run_like(args: argparse.Namespace, compare: bool) -> int:
    cfg, options = resolve(args)
    if compare:
        raw = args.strategies or options.get("strategies") or ",".join(STRATEGIES)
        strategies = raw.split(",") if isinstance(raw, str) else list(raw)
        bad = [s for s in strategies if s not in STRATEGIES]
        if bad:
            raise UsageError(f"unknown strategies: {', '.join(bad)}")
        results = list(compare_strategies(cfg, strategies).values())
        options = {"strategies": ",".join(strategies)}
    else:
        results = [run_experiment(cfg)]
        options = {}
    _write_text(args.out, metrics_csv(results))
    manifest_path = args.manifest or args.out + ".manifest.json"
    _write_text(manifest_path, _dumps(manifest(args.command, cfg, [args.out], options)))
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    return _run_like(args, compare=False)


def cmd_compare(args: argparse.Namespace) -> int:
    return _run_like(args, compare=True)


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg, _ = resolve(args)
    parse = {"epsilon": float, "eta": _eta, "tau": int, "N": int}[args.parameter]
    try:
        values = [parse(v) for v in args.values.split(",") if v.strip()]
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"bad --values: {exc}") from None
    outcomes = sweep_outcomes(cfg, args.parameter, values, args.trials, args.theta)
    doc = {
        "parameter": args.parameter,
        "config": cfg.to_dict(),
        "theta": args.theta,
        "points": [p.to_dict() for p in summarize(outcomes, cfg.rounds)],
        "trials": [
            {"value": o.value, "trial": o.trial, "seed": o.seed, "final_mse": o.final_mse, "rounds_to_threshold": o.rounds_to_threshold}
            for o in outcomes
        ],
    }
    _emit(doc, args.out)
    return EXIT_OK


def _device_optima(fed: FederatedDataset, spec) -> np.ndarray:
    rows = []
    for part in fed.parts:
        single = FederatedDataset((part,), "per-device", n_classes=fed.n_classes)
        rows.append(analysis.optimal_params(single, spec)[0])
    return np.vstack(rows)


def _parse_local_params(text: str) -> np.ndarray:
    try:
        rows = [[float(c) for c in dev.split(",")] for dev in text.split(";") if dev.strip()]
    except ValueError:
        raise UsageError(f"bad --local-params {text!r}") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise UsageError("--local-params needs one equal-length vector per device")
    return np.array(rows)


def cmd_analyze_pmf(args: argparse.Namespace) -> int:
    cfg, _ = resolve(args)
    if args.local_params:
        params = _parse_local_params(args.local_params)
    else:
        fed = build_dataset(cfg, np.random.default_rng(cfg.seed))
        params = _device_optima(fed, loss_spec(cfg, fed))
    eps = cfg.epsilon if isinstance(cfg.epsilon, tuple) else (cfg.epsilon,) * params.shape[0]
    pmf = analysis.memoryless_pmf(params, ErasureChannelSet(np.array(eps)))
    doc = pmf.to_dict(include_zero=args.all_atoms)
    doc["epsilons"] = list(eps)
    _emit(doc, args.out)
    return EXIT_OK


def cmd_analyze_bound(args: argparse.Namespace) -> int:
    cfg, _ = resolve(args, strategy=STALE_REUSE, eta=ETA_INVERSE_L, tau=1, force_first_round_error_free=True)
    if cfg.model != LINEAR_MSE:
        raise UsageError("bound analysis needs the linear-mse model")
    fed = build_dataset(cfg, np.random.default_rng(cfg.seed))
    constants = analysis.curvature(fed, loss_spec(cfg, fed))
    if args.epsilon_fraction is not None:
        cfg = cfg.replace(epsilon=args.epsilon_fraction * constants.epsilon_limit)
    try:
        epsilon = cfg.channels().common_epsilon()
    except InvalidConfigError as exc:
        raise NotApplicableError("common epsilon", str(exc)) from None
    pre = analysis.bound_parameters(constants, epsilon, 0.0)
    if not pre.applicable:
        raise NotApplicableError("epsilon <= mu/(2L)", pre.reason)
    res = run_experiment(cfg)
    gap = res.f0_gap()
    curve = analysis.bound_curve(res.delta_bar[: cfg.rounds], constants, epsilon, gap, eta=res.eta)
    doc = {
        "L": constants.L,
        "mu": constants.mu,
        "epsilon": epsilon,
        "epsilon_limit": constants.epsilon_limit,
        "beta_sq": analysis.beta_squared(constants, epsilon),
        "f0_gap": gap,
        "eta": res.eta,
        "holds": all(db <= b for _, db, b in curve),
        "curve": [list(row) for row in curve],
        "config": cfg.to_dict(),
    }
    _emit(doc, args.out)
    return EXIT_OK


def cmd_analyze_inequalities(args: argparse.Namespace) -> int:
    cfg, _ = resolve(args)
    if cfg.model != LINEAR_MSE:
        raise UsageError("inequality analysis needs the linear-mse model")
    fed = build_dataset(cfg, np.random.default_rng(cfg.seed))
    spec = loss_spec(cfg, fed)
    constants = analysis.curvature(fed, spec)
    F = analysis.global_objective(fed, spec)
    w_star, f_star = analysis.optimal_params(fed, spec)
    rng = np.random.default_rng(args.pair_seed)
    pairs = analysis.random_pairs(rng, F.dim, args.pairs, args.pair_scale, center=w_star)
    report = analysis.check_inequalities(F, pairs, constants, f_star)
    L_max = max(constants.per_device_L)
    n = fed.n_devices
    half = sorted(rng.choice(n, size=max(1, n // 2), replace=False).tolist())
    subsets = {"all": list(range(n)), "half": half, "empty": []}
    doc = {
        "L": constants.L,
        "mu": constants.mu,
        "per_device_L": list(constants.per_device_L),
        "global": report.to_dict(),
        "subsets": {
            name: {"members": members, **analysis.check_subset_smoothness(members, fed, spec, L_max, pairs).to_dict()}
            for name, members in subsets.items()
        },
    }
    doc["violations"] = len(report.violations) + sum(len(s["violations"]) for s in doc["subsets"].values())
    _emit(doc, args.out)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    ("analyze", "pmf"): cmd_analyze_pmf,
    ("analyze", "bound"): cmd_analyze_bound,
    ("analyze", "inequalities"): cmd_analyze_inequalities,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    key = (args.command, args.analysis) if args.command == "analyze" else args.command
    try:
        return COMMANDS[key](args)
    except NotApplicableError as exc:
        print(f"erasure-fl: bound not applicable: {exc}", file=sys.stderr)
        return EXIT_NOT_APPLICABLE
    except (DivergenceError, NumericalError) as exc:
        print(f"erasure-fl: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DatasetParseError, OSError) as exc:
        print(f"erasure-fl: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, InvalidConfigError, RankDeficiencyError) as exc:
        print(f"erasure-fl: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
