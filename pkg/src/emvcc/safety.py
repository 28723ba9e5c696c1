"""Post-run safety checks.

The replay here deliberately does not reuse :func:`emvcc.ledger.commit_block`:
it re-derives every MVCC verdict from a plain ``key -> [block, index]`` dict
so that a bug in the ledger cannot vouch for itself.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

TERMINAL = {
    "committed",
    "mvcc_rejected",
    "policy_rejected",
    "emvcc_rejected",
    "client_aborted",
}


@dataclass
class SafetyReport:
    stale_read_commits: list[str] = field(default_factory=list)
    flag_mismatches: list[str] = field(default_factory=list)
    divergent_replicas: list[str] = field(default_factory=list)
    not_terminal: list[str] = field(default_factory=list)
    multi_terminal: list[str] = field(default_factory=list)
    lost: list[str] = field(default_factory=list)
    duplicated: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(vars(self).values())

    def summary(self) -> str:
        if self.ok:
            return "safety: ok"
        parts = [f"{name}={len(v)}" for name, v in vars(self).items() if v]
        return "safety: VIOLATED " + " ".join(parts)


def replay_block_log(lines: Iterable[str]) -> tuple[dict, list[str], list[str]]:
    """Serially re-validate a JSON-lines block log from an empty state.

    Returns (final state, stale-read commits, flag mismatches). A
    PolicyFailure/SyntaxFailure flag is taken as given (nothing to replay);
    Valid and MvccConflict must agree with the version check.
    """
    state: dict[str, tuple[str, list[int]]] = {}
    stale: list[str] = []
    mismatched: list[str] = []
    expected_number = 0
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["number"] != expected_number:
            mismatched.append(f"block-{rec['number']}-out-of-order")
        expected_number = rec["number"] + 1
        for idx, (tx, flag) in enumerate(zip(rec["transactions"], rec["flags"])):
            current = all(
                (state[k][1] if k in state else None) == seen
                for k, seen in tx["reads"]
            )
            if flag == "Valid":
                if not current:
                    stale.append(tx["tx_id"])
                for k, value in tx["writes"]:
                    state[k] = (value, [rec["number"], idx])
            elif flag == "MvccConflict":
                if current:
                    mismatched.append(tx["tx_id"])
    return state, stale, mismatched


def replica_state_from_bytes(raw: bytes) -> dict:
    return json.loads(raw)["entries"]


def check_run(
    events: list[dict],
    block_log: list[str],
    replicas: Mapping[str, bytes],
) -> SafetyReport:
    report = SafetyReport()
    oracle_state, report.stale_read_commits, report.flag_mismatches = (
        replay_block_log(block_log)
    )
    expected = {k: [v, ver] for k, (v, ver) in oracle_state.items()}
    reference = None
    for pid, raw in sorted(replicas.items()):
        if reference is None:
            reference = raw
        if raw != reference or replica_state_from_bytes(raw) != expected:
            report.divergent_replicas.append(pid)

    submitted = [e["tx"] for e in events if e["type"] == "submitted"]
    terminal = Counter(e["tx"] for e in events if e["type"] in TERMINAL)
    report.not_terminal = [tx for tx in submitted if terminal[tx] == 0]
    report.multi_terminal = sorted(tx for tx, n in terminal.items() if n > 1)

    endorsed = {e["tx"] for e in events if e["type"] == "endorsed"}
    in_blocks: Counter = Counter()
    for line in block_log:
        rec = json.loads(line)
        in_blocks.update(rec["tx_ids"])
    report.lost = sorted(tx for tx in endorsed if in_blocks[tx] == 0)
    report.duplicated = sorted(tx for tx, n in in_blocks.items() if n > 1)
    return report
