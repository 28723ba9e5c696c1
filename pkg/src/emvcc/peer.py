"""Endorsing/committing peers and client-side endorsement assembly."""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .cache import ConflictDetected, PendingWriteCache
from .ledger import (
    Block,
    EndorsedTransaction,
    ReadEntry,
    ValidationFlags,
    WorldState,
    WriteEntry,
    commit_block,
    read_version,
)
from .policy import Policy, is_satisfied
from .workload import ChangeOwner, ChaincodeOp, Create, car_value


class ChaincodeError(ValueError):
    """The proposal names an operation the chaincode does not implement."""


@dataclass(frozen=True)
class TransactionProposal:
    tx_id: str
    op: ChaincodeOp
    client_id: str = "client0"
    submit_time: float = 0.0


class Outcome(str, enum.Enum):
    ENDORSED = "Endorsed"
    EMVCC_REJECTED = "EmvccRejected"


@dataclass(frozen=True)
class EndorsementResponse:
    tx_id: str
    peer_id: str
    org_id: str
    read_set: tuple[ReadEntry, ...]
    write_set: tuple[WriteEntry, ...]
    outcome: Outcome = Outcome.ENDORSED
    conflicting_key: str | None = None
    blocking_tx: str | None = None


class AbortReason(str, enum.Enum):
    EMVCC_DETECTED = "EmvccDetected"
    NON_DETERMINISM = "NonDeterminism"
    POLICY_UNSATISFIED = "PolicyUnsatisfied"


@dataclass(frozen=True)
class ClientAbort:
    tx_id: str
    reason: AbortReason
    conflicting_key: str | None = None
    blocking_tx: str | None = None
    rejected_by: tuple[str, ...] = ()


def execute_chaincode(
    state: WorldState, op: ChaincodeOp
) -> tuple[tuple[ReadEntry, ...], tuple[WriteEntry, ...]]:
    """Simulate ``op`` against ``state`` and return its read and write sets."""
    if isinstance(op, Create):
        return (), ((op.key, op.value),)
    if isinstance(op, ChangeOwner):
        return (
            ((op.key, read_version(state, op.key)),),
            ((op.key, car_value(op.new_owner)),),
        )
    raise ChaincodeError(f"unknown chaincode op {op!r}")


CommitListener = Callable[["Peer", Block, ValidationFlags], None]


@dataclass
class Peer:
    """One peer replica; endorses and commits.

    ``cache`` is None for the baseline (no early detection). The replica lock
    gives each endorsement a consistent snapshot against block commits.
    """

    peer_id: str
    org_id: str
    cache: PendingWriteCache | None = None
    replica: WorldState = field(default_factory=WorldState)
    endorser: bool = True
    committer: bool = True
    policy: Policy | None = None
    on_commit: CommitListener | None = None
    cache_ttl: float | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def endorse(self, proposal: TransactionProposal) -> EndorsementResponse:
        if not self.endorser:
            raise RuntimeError(f"{self.peer_id} is not an endorser")
        with self._lock:
            reads, writes = execute_chaincode(self.replica, proposal.op)
        response = EndorsementResponse(
            proposal.tx_id, self.peer_id, self.org_id, reads, writes
        )
        if self.cache is None:
            return response
        decision = self.cache.check_and_reserve(
            proposal.tx_id, [k for k, _ in reads], [k for k, _ in writes]
        )
        if isinstance(decision, ConflictDetected):
            return EndorsementResponse(
                proposal.tx_id,
                self.peer_id,
                self.org_id,
                reads,
                writes,
                Outcome.EMVCC_REJECTED,
                decision.conflicting_key,
                decision.blocking_tx,
            )
        return response

    def _policy_check(self, tx: EndorsedTransaction) -> bool:
        if self.policy is None:
            return True
        return is_satisfied(self.policy, tx.endorsing_orgs)

    def deliver_block(self, block: Block) -> ValidationFlags:
        """Validate and commit ``block``, then release every tx in it from the cache."""
        with self._lock:
            flags = commit_block(self.replica, block, self._policy_check)
        if self.cache is not None:
            for tx in block.transactions:
                self.cache.release(tx.tx_id)
            if self.cache_ttl:
                self.cache.evict_expired(self.cache_ttl)
        if self.on_commit is not None:
            self.on_commit(self, block, flags)
        return flags

    def replica_bytes(self) -> bytes:
        with self._lock:
            return self.replica.canonical_bytes()


def assemble_endorsed_tx(
    responses: Sequence[EndorsementResponse],
    policy: Policy,
    submit_time: float = 0.0,
) -> EndorsedTransaction | ClientAbort:
    """Client side of step 3: turn endorsement responses into an orderable tx."""
    if not responses:
        raise ValueError("no endorsement responses")
    tx_id = responses[0].tx_id
    if any(r.tx_id != tx_id for r in responses):
        raise ValueError("responses for different transactions")
    rejected = [r for r in responses if r.outcome is Outcome.EMVCC_REJECTED]
    if rejected:
        first = rejected[0]
        return ClientAbort(
            tx_id,
            AbortReason.EMVCC_DETECTED,
            first.conflicting_key,
            first.blocking_tx,
            tuple(r.peer_id for r in rejected),
        )
    if not is_satisfied(policy, [r.org_id for r in responses]):
        return ClientAbort(tx_id, AbortReason.POLICY_UNSATISFIED)
    ref = responses[0]
    if any(
        r.read_set != ref.read_set or r.write_set != ref.write_set
        for r in responses[1:]
    ):
        return ClientAbort(tx_id, AbortReason.NON_DETERMINISM)
    return EndorsedTransaction(
        tx_id=tx_id,
        read_set=ref.read_set,
        write_set=ref.write_set,
        endorsements=tuple((r.peer_id, r.org_id) for r in responses),
        submit_time=submit_time,
    )
