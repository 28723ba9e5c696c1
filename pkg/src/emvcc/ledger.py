"""Versioned world state, blocks, and commit-time MVCC validation."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence


class Version(NamedTuple):
    """Position of the committing transaction: (block height, index in block).

    Tuple ordering gives the lexicographic total order for free.
    """

    block_height: int
    tx_index: int


# Read-set marker for keys that had no committed value when read.
ABSENT = None

ReadEntry = tuple[str, "Version | None"]
WriteEntry = tuple[str, bytes]


class TxStatus(str, enum.Enum):
    VALID = "Valid"
    MVCC_CONFLICT = "MvccConflict"
    POLICY_FAILURE = "PolicyFailure"
    SYNTAX_FAILURE = "SyntaxFailure"


class CutReason(str, enum.Enum):
    SIZE_REACHED = "SizeReached"
    TIMEOUT_EXPIRED = "TimeoutExpired"


@dataclass(frozen=True)
class EndorsedTransaction:
    """A transaction carrying the read/write sets agreed by its endorsers."""

    tx_id: str
    read_set: tuple[ReadEntry, ...]
    write_set: tuple[WriteEntry, ...]
    endorsements: tuple[tuple[str, str], ...] = ()  # (peer_id, org_id)
    submit_time: float = 0.0

    @property
    def endorsing_orgs(self) -> list[str]:
        return [org for _, org in self.endorsements]


@dataclass(frozen=True)
class Block:
    number: int
    transactions: tuple[EndorsedTransaction, ...]
    cut_reason: CutReason = CutReason.SIZE_REACHED

    def __post_init__(self) -> None:
        if not self.transactions:
            raise ValueError("a block must carry at least one transaction")
        if self.number < 0:
            raise ValueError("block number must be non-negative")


ValidationFlags = list[TxStatus]
PolicyCheck = Callable[[EndorsedTransaction], bool]


class BlockOrderError(ValueError):
    """Block delivered out of sequence."""


@dataclass
class WorldState:
    entries: dict[str, tuple[bytes, Version]] = field(default_factory=dict)
    height: int = 0

    def snapshot(self) -> dict[str, tuple[bytes, Version]]:
        return dict(self.entries)

    def canonical_bytes(self) -> bytes:
        """Stable serialization used for cross-replica comparison."""
        payload = {
            "height": self.height,
            "entries": {
                k: [v.decode("latin-1"), list(ver)]
                for k, (v, ver) in sorted(self.entries.items())
            },
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def read(state: WorldState, key: str) -> tuple[bytes, Version] | None:
    """Current committed (value, version) for ``key``, or None if never written."""
    return state.entries.get(key)


def read_version(state: WorldState, key: str) -> Version | None:
    entry = state.entries.get(key)
    return None if entry is None else entry[1]


def is_well_formed(tx: EndorsedTransaction) -> bool:
    if not isinstance(tx.tx_id, str) or not tx.tx_id:
        return False
    seen = set()
    for item in tx.read_set:
        if len(item) != 2:
            return False
        key, ver = item
        if not isinstance(key, str) or key in seen:
            return False
        if ver is not None and not (
            isinstance(ver, tuple) and len(ver) == 2 and min(ver) >= 0
        ):
            return False
        seen.add(key)
    written = set()
    for item in tx.write_set:
        if len(item) != 2:
            return False
        key, value = item
        if not isinstance(key, str) or not isinstance(value, bytes) or key in written:
            return False
        written.add(key)
    return True


def commit_block(
    state: WorldState,
    block: Block,
    policy_check: PolicyCheck | None = None,
) -> ValidationFlags:
    """Validate and apply ``block`` in order, returning one flag per transaction.

    Valid transactions apply their writes immediately, so a later transaction
    in the same block that read one of those keys fails its version check.
    """
    if block.number != state.height:
        raise BlockOrderError(
            f"expected block {state.height}, got block {block.number}"
        )
    flags: ValidationFlags = []
    for idx, tx in enumerate(block.transactions):
        if not is_well_formed(tx):
            flags.append(TxStatus.SYNTAX_FAILURE)
            continue
        if policy_check is not None and not policy_check(tx):
            flags.append(TxStatus.POLICY_FAILURE)
            continue
        if any(read_version(state, key) != ver for key, ver in tx.read_set):
            flags.append(TxStatus.MVCC_CONFLICT)
            continue
        version = Version(block.number, idx)
        for key, value in tx.write_set:
            state.entries[key] = (value, version)
        flags.append(TxStatus.VALID)
    state.height += 1
    return flags


# -- block log (JSON lines) -------------------------------------------------


def _encode_version(ver: Version | None) -> list[int] | None:
    return None if ver is None else [ver[0], ver[1]]


def _decode_version(raw: list[int] | None) -> Version | None:
    return None if raw is None else Version(int(raw[0]), int(raw[1]))


def tx_to_json(tx: EndorsedTransaction) -> dict:
    return {
        "tx_id": tx.tx_id,
        "reads": [[k, _encode_version(v)] for k, v in tx.read_set],
        "writes": [[k, v.decode("latin-1")] for k, v in tx.write_set],
        "endorsements": [list(e) for e in tx.endorsements],
    }


def tx_from_json(raw: dict) -> EndorsedTransaction:
    return EndorsedTransaction(
        tx_id=raw["tx_id"],
        read_set=tuple((k, _decode_version(v)) for k, v in raw["reads"]),
        write_set=tuple((k, v.encode("latin-1")) for k, v in raw["writes"]),
        endorsements=tuple((p, o) for p, o in raw.get("endorsements", [])),
    )


def block_log_line(block: Block, flags: Sequence[TxStatus]) -> str:
    record = {
        "number": block.number,
        "cut_reason": block.cut_reason.value,
        "tx_ids": [tx.tx_id for tx in block.transactions],
        "flags": [f.value for f in flags],
        "transactions": [tx_to_json(tx) for tx in block.transactions],
    }
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def parse_block_log(lines: Iterable[str]) -> list[tuple[Block, list[TxStatus]]]:
    out = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        block = Block(
            number=rec["number"],
            transactions=tuple(tx_from_json(t) for t in rec["transactions"]),
            cut_reason=CutReason(rec["cut_reason"]),
        )
        out.append((block, [TxStatus(f) for f in rec["flags"]]))
    return out
