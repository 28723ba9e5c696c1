from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emvcc.ledger import (
    Block,
    BlockOrderError,
    CutReason,
    EndorsedTransaction,
    TxStatus,
    Version,
    WorldState,
    block_log_line,
    commit_block,
    parse_block_log,
    read,
    read_version,
)


def tx(tx_id, reads=(), writes=()):
    return EndorsedTransaction(
        tx_id,
        tuple(reads),
        tuple((k, v if isinstance(v, bytes) else v.encode()) for k, v in writes),
    )


def test_read_empty_state_is_absent():
    assert read(WorldState(), "CAR0") is None


def test_read_after_single_write():
    state = WorldState(height=1)
    commit_block(state, Block(1, (tx("t", writes=[("CAR0", "a")]),)))
    assert read(state, "CAR0") == (b"a", Version(1, 0))


def test_read_after_two_blocks_matches_replay():
    state = WorldState()
    script = [
        [tx("a", writes=[("K", "x")]), tx("b", writes=[("CAR0", "v1")])],
        [tx("c", writes=[("Z", "z")]), tx("d", writes=[("CAR0", "v2")])],
    ]
    # replay oracle: last writer wins, version = (block, index)
    expected = {}
    for n, txs in enumerate(script):
        commit_block(state, Block(n, tuple(txs)))
        for i, t in enumerate(txs):
            for k, v in t.write_set:
                expected[k] = (v, (n, i))
    assert read(state, "CAR0") == (b"v2", Version(1, 1))
    assert {k: (v, tuple(ver)) for k, (v, ver) in state.entries.items()} == expected


def test_read_write_conflict_in_one_block():
    state = WorldState()
    commit_block(state, Block(0, (tx("init", writes=[("Key1", "value0")]),)))
    v0 = read_version(state, "Key1")
    block = Block(
        1,
        (
            tx("TX1", reads=[("Key1", v0)], writes=[("Key1", "value1")]),
            tx("TX2", reads=[("Key1", v0)], writes=[("Key1", "value2")]),
        ),
    )
    flags = commit_block(state, block)
    assert flags == [TxStatus.VALID, TxStatus.MVCC_CONFLICT]
    assert read(state, "Key1") == (b"value1", Version(1, 0))


def test_blind_write_is_valid():
    state = WorldState()
    assert commit_block(state, Block(0, (tx("w", writes=[("K", "v")]),))) == [TxStatus.VALID]


def test_absent_read_matches_only_unwritten_key():
    state = WorldState()
    flags = commit_block(
        state,
        Block(
            0,
            (
                tx("a", reads=[("K", None)], writes=[("K", "1")]),
                tx("b", reads=[("K", None)], writes=[("K", "2")]),
            ),
        ),
    )
    assert flags == [TxStatus.VALID, TxStatus.MVCC_CONFLICT]


def test_out_of_order_block_rejected_without_change():
    state = WorldState()
    with pytest.raises(BlockOrderError):
        commit_block(state, Block(1, (tx("a", writes=[("K", "v")]),)))
    assert state.height == 0 and state.entries == {}


def test_policy_and_syntax_failures_apply_nothing():
    state = WorldState()
    bad = EndorsedTransaction("bad", (("K", None), ("K", None)), ())
    flags = commit_block(
        state,
        Block(0, (tx("p", writes=[("K", "v")]), bad)),
        policy_check=lambda t: t.tx_id != "p",
    )
    assert flags == [TxStatus.POLICY_FAILURE, TxStatus.SYNTAX_FAILURE]
    assert state.entries == {}
    assert state.height == 1


def test_empty_block_refused():
    with pytest.raises(ValueError):
        Block(0, ())


def _serial_oracle(blocks):
    """Re-execute every tx serially, re-reading versions from a plain dict."""
    versions: dict[str, tuple[int, int]] = {}
    all_flags = []
    for n, txs in enumerate(blocks):
        flags = []
        for i, t in enumerate(txs):
            if all(versions.get(k) == (None if v is None else tuple(v)) for k, v in t.read_set):
                for k, _ in t.write_set:
                    versions[k] = (n, i)
                flags.append("Valid")
            else:
                flags.append("MvccConflict")
        all_flags.append(flags)
    return all_flags


def _random_blocks(rng: random.Random, n_blocks: int, per_block: int, keys: list[str]):
    """Transactions read versions from a lagging snapshot, as endorsers would."""
    state = WorldState()
    blocks = []
    counter = 0
    for n in range(n_blocks):
        snapshot = dict(state.entries)
        txs = []
        for _ in range(per_block):
            key = rng.choice(keys)
            seen = snapshot.get(key)
            txs.append(
                tx(f"t{counter}", reads=[(key, None if seen is None else seen[1])], writes=[(key, f"v{counter}")])
            )
            counter += 1
        blocks.append(txs)
        commit_block(state, Block(n, tuple(txs)))
    return blocks


def test_random_block_matches_serial_oracle():
    blocks = _random_blocks(random.Random(7), 1, 10, ["A", "B", "C"])
    state = WorldState()
    flags = commit_block(state, Block(0, tuple(blocks[0])))
    assert [f.value for f in flags] == _serial_oracle(blocks)[0]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 12))
def test_commit_agrees_with_serial_oracle(seed, n_blocks, per_block):
    blocks = _random_blocks(random.Random(seed), n_blocks, per_block, ["A", "B", "C"])
    state = WorldState()
    got = [[f.value for f in commit_block(state, Block(n, tuple(txs)))] for n, txs in enumerate(blocks)]
    assert got == _serial_oracle(blocks)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_versions_strictly_increase_per_key(seed):
    blocks = _random_blocks(random.Random(seed), 4, 6, ["A", "B"])
    state = WorldState()
    last: dict[str, Version] = {}
    for n, txs in enumerate(blocks):
        commit_block(state, Block(n, tuple(txs)))
        for k, (_, ver) in state.entries.items():
            if k in last:
                assert ver >= last[k]
            assert ver.block_height < state.height
            last[k] = ver


def test_commit_is_deterministic():
    blocks = _random_blocks(random.Random(3), 3, 8, ["A", "B", "C"])
    runs = []
    for _ in range(2):
        state = WorldState()
        flags = [commit_block(state, Block(n, tuple(b))) for n, b in enumerate(blocks)]
        runs.append((flags, state.canonical_bytes()))
    assert runs[0] == runs[1]


def test_block_log_round_trip():
    block = Block(
        0,
        (tx("a", reads=[("K", Version(0, 1))], writes=[("K", "v")]), tx("b", writes=[("J", "w")])),
        CutReason.TIMEOUT_EXPIRED,
    )
    line = block_log_line(block, [TxStatus.MVCC_CONFLICT, TxStatus.VALID])
    [(parsed, flags)] = parse_block_log([line, ""])
    assert parsed == block
    assert flags == [TxStatus.MVCC_CONFLICT, TxStatus.VALID]
