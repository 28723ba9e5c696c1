"""Closed-form non-detection model, Monte Carlo estimator, and run metrics.

Symbols used throughout:

* ``n_orgs`` organizations, organization i has ``peers[i]`` peers;
* ``tx_per_block`` transactions per block;
* ``conflict_rate`` fraction of transactions that conflict, in [0, 1];
* ``p_nd`` probability that a conflicting transaction gets past every
  endorser cache undetected.
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .policy import Policy, Topology, parse_policy, select_endorsers, simple_kind


@dataclass(frozen=True)
class ModelParams:
    peers: tuple[int, ...]
    tx_per_block: int = 500
    conflict_rate: float = 0.4
    tx_rate: float = 1000.0
    policy_kind: str = "And"

    def __post_init__(self) -> None:
        if not self.peers or min(self.peers) < 1:
            raise ValueError("need at least one org and one peer per org")
        if not 0.0 <= self.conflict_rate <= 1.0:
            raise ValueError("conflict_rate must be in [0, 1]")
        if self.policy_kind not in ("And", "Or"):
            raise ValueError("policy_kind must be 'And' or 'Or'")

    @property
    def n_orgs(self) -> int:
        return len(self.peers)


def p_nd_and(params: ModelParams) -> float:
    """Non-detection under AND: every org's endorser misses the earlier tx's endorser."""
    p = 1.0
    for m in params.peers:
        p *= (m - 1) / m
    return p


def _equal_peers(params: ModelParams) -> bool:
    return len(set(params.peers)) == 1


def p_nd_or(params: ModelParams) -> float:
    """Non-detection under OR, as the published two-branch formula.

    Equal peer counts give (NM - 1) / (NM); otherwise (1/N) * sum(1/M_i).
    The second branch disagrees with the first's own logic (it is 1 when
    every org has one peer); ``p_nd_or_complement`` is the consistent form.
    """
    n = params.n_orgs
    if _equal_peers(params):
        nm = n * params.peers[0]
        return (nm - 1) / nm
    return sum(1.0 / m for m in params.peers) / n


def p_nd_or_complement(params: ModelParams) -> float:
    """1 - (1/N) * sum(1 / (N * M_i)): both txs land on the same org and peer otherwise."""
    n = params.n_orgs
    return 1.0 - sum(1.0 / (n * m) for m in params.peers) / n


def p_nd(params: ModelParams) -> float:
    return p_nd_and(params) if params.policy_kind == "And" else p_nd_or(params)


def fp_estimate(params: ModelParams, p_nd_value: float | None = None) -> float:
    """Expected false positives per block."""
    p = p_nd(params) if p_nd_value is None else p_nd_value
    c = params.conflict_rate
    # same denominator, grouped so both terms are non-negative (no cancellation near c=1)
    denom = (1.0 - c) + c * p
    num = c * c * p * (1.0 - p)
    if denom == 0.0:
        # c == 1 and c*p == 0, so the numerator vanishes as well
        assert num == 0.0, (c, p)
        return 0.0
    return params.tx_per_block * num / denom


def fn_estimate(params: ModelParams, p_nd_value: float | None = None) -> float:
    """Expected false negatives per second (rate form)."""
    p = p_nd(params) if p_nd_value is None else p_nd_value
    return params.tx_rate * params.conflict_rate * p


def fn_estimate_per_block(params: ModelParams, p_nd_value: float | None = None) -> float:
    """Expected false negatives per block (the derivation's form)."""
    p = p_nd(params) if p_nd_value is None else p_nd_value
    return params.tx_per_block * params.conflict_rate * p


def goodput(nb_valid: int, nb_total: int, throughput: float) -> float:
    if nb_total <= 0:
        raise ZeroDivisionError("goodput needs at least one ordered transaction")
    return nb_valid / nb_total * throughput


def estimate_nondetection_mc(
    policy: Policy, topology: Topology, trials: int, seed: int = 0
) -> float:
    """Fraction of independent endorser-selection pairs that share no peer."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = random.Random(seed)
    misses = 0
    for _ in range(trials):
        first = select_endorsers(policy, topology, rng)
        second = select_endorsers(policy, topology, rng)
        if first.isdisjoint(second):
            misses += 1
    return misses / trials


def binomial_se(p: float, trials: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / trials)


# -- run metrics ------------------------------------------------------------

TERMINAL = {
    "committed",
    "mvcc_rejected",
    "policy_rejected",
    "emvcc_rejected",
    "client_aborted",
}

CSV_COLUMNS = [
    "cache",
    "policy",
    "peers",
    "batch_size",
    "conflict_rate_target",
    "mode",
    "zipf_s",
    "seed",
    "total",
    "ordered",
    "committed",
    "mvcc_aborted",
    "emvcc_aborted",
    "policy_aborted",
    "stuck",
    "duration_s",
    "throughput",
    "goodput",
    "valid_fraction",
    "conflict_rate",
    "latency_mean_ms",
    "latency_p50_ms",
    "latency_p95_ms",
    "td_emvcc_ms",
    "td_mvcc_ms",
    "measured_nondetection",
    "false_positives",
    "false_negatives",
    "model_p_nd",
    "model_fp_per_block",
    "model_fn_per_block",
]


@dataclass
class MetricsReport:
    total: int = 0
    ordered: int = 0
    committed: int = 0
    mvcc_aborted: int = 0
    emvcc_aborted: int = 0
    policy_aborted: int = 0
    stuck: int = 0
    duration_s: float = 0.0
    throughput: float = 0.0
    goodput: float = 0.0
    valid_fraction: float | None = None
    conflict_rate: float | None = None
    latency_mean_ms: float | None = None
    latency_p50_ms: float | None = None
    latency_p95_ms: float | None = None
    td_emvcc_ms: float | None = None
    td_mvcc_ms: float | None = None
    measured_nondetection: float | None = None
    false_positives: int = 0
    false_negatives: int = 0
    model_p_nd: float | None = None
    model_p_nd_or_complement: float | None = None
    model_fp_per_block: float | None = None
    model_fn_per_block: float | None = None
    model_fn_rate: float | None = None
    params: dict = field(default_factory=dict)
    cache_counters: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def csv_row(self) -> dict:
        p = self.params
        row = {
            "cache": p.get("cache"),
            "policy": p.get("policy"),
            "peers": "x".join(str(m) for m in p.get("peers", [])),
            "batch_size": p.get("batch_size"),
            "conflict_rate_target": p.get("conflict_rate"),
            "mode": p.get("workload_mode"),
            "zipf_s": p.get("zipf_s"),
            "seed": p.get("seed"),
        }
        d = self.to_dict()
        for col in CSV_COLUMNS:
            if col not in row:
                row[col] = d[col]
        return {c: ("" if row[c] is None else row[c]) for c in CSV_COLUMNS}


def _mean(xs: list[float]) -> float | None:
    return float(np.mean(xs)) if xs else None


def _pct(xs: list[float], q: float) -> float | None:
    return float(np.percentile(xs, q)) if xs else None


def _counterfactual_fp(events: list[dict], rejected: dict[str, dict]) -> int:
    """Count early-aborted txs whose reads would still have been current.

    Each rejected tx is placed in the first block cut at or after its abort
    time (or after the last block if none was). It counts as a false
    positive when no committed write in any block up to and including that
    one bumped a key it read past the version it saw.
    """
    cuts = sorted((e["t"], e["block"]) for e in events if e["type"] == "block_cut")
    writes_by_key: dict[str, list[tuple[int, int]]] = {}
    for e in events:
        if e["type"] == "committed":
            for key in e["writes"]:
                writes_by_key.setdefault(key, []).append((e["block"], e["index"]))
    count = 0
    for ev in rejected.values():
        target = next((b for t, b in cuts if t >= ev["t"]), None)
        stale = False
        for key, seen in ev.get("reads", []):
            seen_v = None if seen is None else tuple(seen)
            for ver in writes_by_key.get(key, ()):
                if target is not None and ver[0] > target:
                    continue
                if seen_v is None or ver > seen_v:
                    stale = True
                    break
            if stale:
                break
        if not stale:
            count += 1
    return count


def _model_fields(params: dict) -> dict:
    out: dict = {}
    try:
        policy = parse_policy(params["policy"])
        topology = Topology.from_counts(list(params["peers"]))
        counts = tuple(len(topology.peers_of(c.org_id)) for c in policy.children)
    except (KeyError, ValueError, AttributeError):
        return out
    kind = simple_kind(policy)
    if kind is None:
        return out
    mp = ModelParams(
        peers=counts,
        tx_per_block=int(params.get("batch_size", 500)),
        conflict_rate=float(params.get("conflict_rate", 0.0)),
        tx_rate=float(params.get("tx_rate", 1.0)),
        policy_kind=kind,
    )
    p = p_nd(mp)
    out["model_p_nd"] = p
    if kind == "Or":
        out["model_p_nd_or_complement"] = p_nd_or_complement(mp)
    out["model_fp_per_block"] = fp_estimate(mp, p)
    out["model_fn_per_block"] = fn_estimate_per_block(mp, p)
    out["model_fn_rate"] = fn_estimate(mp, p)
    return out


def aggregate(events: Iterable[dict]) -> MetricsReport:
    """Compute a MetricsReport from a drained event stream (pure function)."""
    events = list(events)
    report = MetricsReport()
    submitted: dict[str, float] = {}
    terminal: dict[str, dict] = {}
    ordered: set[str] = set()
    rejected_early: dict[str, dict] = {}
    for e in events:
        kind = e["type"]
        if kind == "run_started":
            report.params = dict(e.get("params", {}))
        elif kind == "run_finished":
            report.cache_counters = e.get("cache_counters", {})
        elif kind == "submitted":
            submitted[e["tx"]] = e["t"]
        elif kind == "ordered":
            ordered.add(e["tx"])
        elif kind in TERMINAL:
            terminal.setdefault(e["tx"], e)
            if kind == "emvcc_rejected":
                rejected_early[e["tx"]] = e

    report.total = len(submitted)
    report.ordered = len(ordered)
    report.stuck = sum(1 for tx in submitted if tx not in terminal)
    latencies, td_emvcc, td_mvcc = [], [], []
    for tx, e in terminal.items():
        dt = e["t"] - submitted.get(tx, e["t"])
        kind = e["type"]
        if kind == "committed":
            report.committed += 1
            latencies.append(dt)
        elif kind == "mvcc_rejected":
            report.mvcc_aborted += 1
            td_mvcc.append(dt)
        elif kind == "emvcc_rejected":
            report.emvcc_aborted += 1
            td_emvcc.append(dt)
        else:
            report.policy_aborted += 1

    if submitted and terminal:
        start = min(submitted.values())
        end = max(e["t"] for e in terminal.values())
        report.duration_s = (end - start) / 1000.0
    if report.duration_s > 0:
        report.throughput = report.ordered / report.duration_s
    if report.ordered:
        report.goodput = goodput(report.committed, report.ordered, report.throughput)
    n_terminal = len(terminal)
    if n_terminal:
        report.valid_fraction = report.committed / n_terminal
        report.conflict_rate = (report.mvcc_aborted + report.emvcc_aborted) / n_terminal
    report.latency_mean_ms = _mean(latencies)
    report.latency_p50_ms = _pct(latencies, 50)
    report.latency_p95_ms = _pct(latencies, 95)
    report.td_emvcc_ms = _mean(td_emvcc)
    report.td_mvcc_ms = _mean(td_mvcc)
    detected_or_not = report.mvcc_aborted + report.emvcc_aborted
    if detected_or_not and report.params.get("cache", "baseline") != "baseline":
        report.measured_nondetection = report.mvcc_aborted / detected_or_not
    if report.params.get("cache", "baseline") != "baseline":
        report.false_negatives = report.mvcc_aborted
    report.false_positives = _counterfactual_fp(events, rejected_early)
    for k, v in _model_fields(report.params).items():
        setattr(report, k, v)
    return report


def read_events(lines: Iterable[str]) -> list[dict]:
    return [json.loads(line) for line in lines if line.strip()]
