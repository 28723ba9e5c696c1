"""Experiment runner: single runs, parameter sweeps, and model validation."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .analytics import (
    CSV_COLUMNS,
    ModelParams,
    MetricsReport,
    aggregate,
    binomial_se,
    estimate_nondetection_mc,
    p_nd,
    p_nd_or_complement,
    read_events,
)
from .config import CACHE_CHOICES, ConfigError, RunConfig, load_config
from .network import ConcurrentNetwork, DeterministicNetwork
from .policy import Topology, parse_policy
from .safety import SafetyReport, check_run
from .workload import OpGenerator

log = logging.getLogger(__name__)

SWEEP_AXES = ("conflict_rate", "block_size", "zipf_s", "topology", "cache_variant")


@dataclass
class RunResult:
    report: MetricsReport
    events: list[str]
    block_log: list[str]
    safety: SafetyReport


def simulate(config: RunConfig) -> RunResult:
    """Build the network, drive the workload to completion, and check safety."""
    config.validate()
    engine_cls = DeterministicNetwork if config.mode == "deterministic" else ConcurrentNetwork
    kwargs = {}
    if config.mode == "concurrent":
        kwargs["workers"] = config.workload.workers
    network = engine_cls(
        config.topology,
        parse_policy(config.policy),
        cache_variant=config.cache,
        orderer_config=config.orderer,
        timing=config.timing,
        cache_options=config.cache_options,
        seed=config.seed,
        header=config.header(),
        **kwargs,
    )
    if config.workload.total_tx > 0:
        network.warmup(config.workload.key_universe)
    network.run_workload(OpGenerator(config.workload))
    lines = network.sink.lines()
    events = read_events(lines)
    safety = check_run(events, network.block_log, network.replica_bytes())
    report = aggregate(events)
    return RunResult(report, lines, list(network.block_log), safety)


def append_csv(path: Path, rows: Iterable[dict]) -> None:
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if new:
            writer.writeheader()
        writer.writerows(rows)


def run(config: RunConfig) -> RunResult:
    """Execute one run and write its artifacts when ``config.out`` is set."""
    result = simulate(config)
    if config.out:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(result.report.to_json() + "\n")
        (out / "events.jsonl").write_text("".join(line + "\n" for line in result.events))
        (out / "blocks.jsonl").write_text("".join(line + "\n" for line in result.block_log))
        append_csv(out / "runs.csv", [result.report.csv_row()])
    return result


def _axis_config(base: RunConfig, axis: str, value) -> RunConfig:
    if axis == "conflict_rate":
        return base.replace(**{"workload.conflict_rate": float(value)})
    if axis == "block_size":
        return base.replace(**{"orderer.batch_size": int(value)})
    if axis == "zipf_s":
        return base.replace(**{"workload.mode": "zipf", "workload.zipf_s": float(value)})
    if axis == "topology":
        return base.replace(peers=[int(m) for m in value])
    if axis == "cache_variant":
        return base.replace(cache=str(value))
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")


def sweep(
    base: RunConfig,
    axis: str,
    values: Sequence,
    variants: Sequence[str] | None = None,
    reps: int = 1,
) -> list[dict]:
    """One run per (value, variant, repetition); failures are recorded, not raised.

    Repetition ``r`` uses seed ``base.seed + r``. Each row is the run's CSV
    row plus ``axis``, ``value``, ``rep``, and ``error`` columns.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    if variants is None:
        variants = [base.cache] if axis != "cache_variant" else [None]
    rows = []
    for value in values:
        for variant in variants:
            for rep in range(reps):
                label = value if not isinstance(value, (list, tuple)) else "x".join(map(str, value))
                row = {"axis": axis, "value": label, "rep": rep, "error": ""}
                try:
                    cfg = _axis_config(base, axis, value)
                    if variant is not None:
                        cfg = cfg.replace(cache=variant)
                    cfg = cfg.replace(**{"workload.seed": base.seed + rep})
                    cfg.out = None
                    result = simulate(cfg)
                    row.update(result.report.csv_row())
                    if not result.safety.ok:
                        row["error"] = result.safety.summary()
                except Exception as exc:  # keep sweeping
                    log.warning("sweep %s=%s failed: %s", axis, label, exc)
                    row["error"] = f"{type(exc).__name__}: {exc}"
                rows.append(row)
    if base.out:
        out = Path(base.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "sweep.csv"
        new = not path.exists() or path.stat().st_size == 0
        with path.open("a", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["axis", "value", "rep", "error"] + CSV_COLUMNS, extrasaction="ignore"
            )
            if new:
                writer.writeheader()
            writer.writerows(rows)
    return rows


def summarize_sweep(rows: list[dict]) -> list[dict]:
    """Mean goodput / conflict rate per (value, cache) over repetitions."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        if row.get("error"):
            continue
        groups.setdefault((str(row["value"]), row["cache"]), []).append(row)
    summary = []
    for (value, cache), rs in groups.items():
        summary.append(
            {
                "value": value,
                "cache": cache,
                "runs": len(rs),
                "goodput": sum(float(r["goodput"]) for r in rs) / len(rs),
                "valid_fraction": sum(float(r["valid_fraction"] or 0) for r in rs) / len(rs),
                "conflict_rate": sum(float(r["conflict_rate"] or 0) for r in rs) / len(rs),
            }
        )
    return summary


@dataclass
class ModelCheck:
    policy: str
    peers: tuple[int, ...]
    closed_form: float
    monte_carlo: float
    std_error: float
    complement_form: float | None = None

    @property
    def abs_error(self) -> float:
        return abs(self.closed_form - self.monte_carlo)

    @property
    def tolerance(self) -> float:
        # a deterministic 0 or 1 has no sampling spread; allow one count of slack
        return max(3.0 * self.std_error, 1e-12)

    @property
    def passed(self) -> bool:
        return self.abs_error <= self.tolerance

    @property
    def diverges(self) -> bool:
        """The closed form disagrees with simulation beyond sampling noise."""
        return not self.passed


def validate_model(
    topologies: Sequence[Sequence[int]],
    kinds: Sequence[str] = ("And", "Or"),
    trials: int = 100_000,
    seed: int = 0,
) -> list[ModelCheck]:
    if trials < 10_000:
        raise ValueError("trials must be >= 10^4 for a meaningful comparison")
    checks = []
    for peers in topologies:
        topology = Topology.from_counts(list(peers))
        for kind in kinds:
            members = ",".join(f"'{org}.member'" for org in topology.org_ids)
            text = f"{kind.upper()}({members})"
            params = ModelParams(
                peers=tuple(peers), tx_per_block=1, conflict_rate=0.0, tx_rate=1.0,
                policy_kind=kind.capitalize(),
            )
            closed = p_nd(params)
            mc = estimate_nondetection_mc(parse_policy(text), topology, trials, seed)
            checks.append(
                ModelCheck(
                    policy=kind.capitalize(),
                    peers=tuple(peers),
                    closed_form=closed,
                    monte_carlo=mc,
                    std_error=binomial_se(mc, trials),
                    complement_form=p_nd_or_complement(params) if kind.lower() == "or" else None,
                )
            )
    return checks


def format_model_table(checks: list[ModelCheck]) -> str:
    lines = [
        f"{'policy':<6} {'peers':<10} {'closed':>9} {'mc':>9} {'|err|':>9} {'3se':>9}  result"
    ]
    for c in checks:
        verdict = "PASS" if c.passed else "FAIL"
        note = ""
        if c.diverges and c.policy == "Or" and len(set(c.peers)) > 1:
            note = f"  DIVERGES from closed form (complement form {c.complement_form:.4f})"
        lines.append(
            f"{c.policy:<6} {'x'.join(map(str, c.peers)):<10} {c.closed_form:>9.4f} "
            f"{c.monte_carlo:>9.4f} {c.abs_error:>9.4f} {3 * c.std_error:>9.4f}  {verdict}{note}"
        )
    return "\n".join(lines)


def format_report(report: MetricsReport) -> str:
    def fmt(v):
        return "-" if v is None else (f"{v:.3f}" if isinstance(v, float) else str(v))

    keys = [
        "total", "ordered", "committed", "mvcc_aborted", "emvcc_aborted", "policy_aborted",
        "stuck", "throughput", "goodput", "latency_mean_ms", "latency_p95_ms",
        "td_emvcc_ms", "td_mvcc_ms", "measured_nondetection", "false_positives",
        "model_p_nd",
    ]
    return "\n".join(f"{k:<22} {fmt(getattr(report, k))}" for k in keys)


# -- command line -------------------------------------------------------------


def _base_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["workload.seed"] = args.seed
    if args.mode is not None:
        changes["mode"] = args.mode
    if args.cache is not None:
        changes["cache"] = args.cache
    if args.out is not None:
        changes["out"] = args.out
    config = config.replace(**changes)
    config.validate()
    return config


def _parse_value(axis: str, text: str):
    if axis == "topology":
        return [int(m) for m in text.split("x")]
    if axis == "cache_variant":
        return text
    if axis == "block_size":
        return int(text)
    return float(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emvcc", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    mode = common.add_mutually_exclusive_group()
    mode.add_argument("--deterministic", dest="mode", action="store_const", const="deterministic")
    mode.add_argument("--concurrent", dest="mode", action="store_const", const="concurrent")
    common.add_argument("--cache", choices=CACHE_CHOICES)
    common.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common], help="execute one run")

    sw = sub.add_parser("sweep", parents=[common], help="vary one parameter")
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument(
        "--values", required=True,
        help="comma-separated; topologies as 2x2,3x3; variants by name",
    )
    sw.add_argument(
        "--variants", default=None,
        help="comma-separated cache variants to run per value (default: the configured one)",
    )
    sw.add_argument("--reps", type=int, default=1)

    vm = sub.add_parser("validate-model", help="closed-form vs Monte Carlo non-detection")
    vm.add_argument("--topologies", default="2x2,3x3,2x2x2,2x3x4,1x4")
    vm.add_argument("--policies", default="And,Or")
    vm.add_argument("--trials", type=int, default=100_000)
    vm.add_argument("--seed", type=int, default=0)

    rp = sub.add_parser("report", help="re-aggregate an event stream")
    rp.add_argument("events", help="events.jsonl")
    rp.add_argument("--json", action="store_true", help="print the full JSON report")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = _base_config(args)
            result = run(config)
            print(format_report(result.report))
            print(result.safety.summary())
            return 0 if result.safety.ok else 2
        if args.command == "sweep":
            config = _base_config(args)
            values = [_parse_value(args.axis, v) for v in args.values.split(",")]
            variants = args.variants.split(",") if args.variants else None
            rows = sweep(config, args.axis, values, variants, args.reps)
            print(f"{'value':<10} {'cache':<10} {'runs':>4} {'goodput':>10} {'valid':>7} {'conflict':>8}")
            for s in summarize_sweep(rows):
                print(
                    f"{s['value']:<10} {s['cache']:<10} {s['runs']:>4} {s['goodput']:>10.2f} "
                    f"{s['valid_fraction']:>7.3f} {s['conflict_rate']:>8.3f}"
                )
            failed = [r for r in rows if r["error"]]
            for r in failed:
                print(f"failed: {r['value']} {r.get('cache', '')}: {r['error']}", file=sys.stderr)
            return 2 if any("safety" in r["error"] for r in failed) else 0
        if args.command == "validate-model":
            topologies = [[int(m) for m in t.split("x")] for t in args.topologies.split(",")]
            checks = validate_model(
                topologies, [p.strip() for p in args.policies.split(",")], args.trials, args.seed
            )
            print(format_model_table(checks))
            return 0
        if args.command == "report":
            report = aggregate(read_events(Path(args.events).read_text().splitlines()))
            print(report.to_json() if args.json else format_report(report))
            return 0
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
