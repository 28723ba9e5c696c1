from __future__ import annotations

import pytest

from emvcc.cache import RESERVED, MutexLockCache
from emvcc.ledger import Block, EndorsedTransaction, TxStatus, Version, WorldState, commit_block
from emvcc.peer import (
    AbortReason,
    ChaincodeError,
    ClientAbort,
    EndorsementResponse,
    Outcome,
    Peer,
    TransactionProposal,
    assemble_endorsed_tx,
    execute_chaincode,
)
from emvcc.policy import Topology, parse_policy
from emvcc.workload import ChangeOwner, Create

AND2 = parse_policy("AND('Org1.member','Org2.member')")
OR2 = parse_policy("OR('Org1.member','Org2.member')")


def make_peers(variant_cls=MutexLockCache, policy=AND2):
    topo = Topology.uniform(2, 2)
    return {
        pid: Peer(pid, org, cache=variant_cls(), policy=policy)
        for org, pids in topo.orgs
        for pid in pids
    }


def test_empty_ledger_endorsement_reads_absent():
    peer = Peer("p", "Org1")
    resp = peer.endorse(TransactionProposal("t", ChangeOwner("CAR7", "bob")))
    assert resp.outcome is Outcome.ENDORSED
    assert resp.read_set == (("CAR7", None),)
    assert resp.write_set == (("CAR7", b"owner=bob"),)


def test_create_is_a_blind_write():
    reads, writes = execute_chaincode(WorldState(), Create("CAR1", b"v"))
    assert reads == () and writes == (("CAR1", b"v"),)


def test_unknown_op_is_rejected():
    with pytest.raises(ChaincodeError):
        execute_chaincode(WorldState(), object())


def test_non_endorser_refuses():
    with pytest.raises(RuntimeError):
        Peer("p", "Org1", endorser=False).endorse(TransactionProposal("t", Create("K", b"")))


def _reserve_two_keys(peer: Peer, tx_id: str):
    # TX1 writes Key1 and Key2; modeled directly on the cache since the chaincode is single-key
    assert peer.cache.check_and_reserve(tx_id, [], ["Key1", "Key2"]) == RESERVED


def test_three_tx_flow():
    peers = make_peers()
    for pid in ("Peer0.ORG1", "Peer0.ORG2"):
        _reserve_two_keys(peers[pid], "TX1")

    # TX2 reads Key2 (and writes Key3) on a peer that endorsed TX1
    resp = peers["Peer0.ORG1"].endorse(TransactionProposal("TX2", ChangeOwner("Key2", "x")))
    assert resp.outcome is Outcome.EMVCC_REJECTED
    assert (resp.conflicting_key, resp.blocking_tx) == ("Key2", "TX1")

    # TX3 on the other two peers sees empty caches
    tx3 = [
        peers[pid].endorse(TransactionProposal("TX3", ChangeOwner("Key2", "y")))
        for pid in ("Peer1.ORG1", "Peer1.ORG2")
    ]
    assert all(r.outcome is Outcome.ENDORSED for r in tx3)
    assembled = assemble_endorsed_tx(tx3, AND2)
    assert isinstance(assembled, EndorsedTransaction)

    tx1 = EndorsedTransaction(
        "TX1",
        (),
        (("Key1", b"a"), ("Key2", b"b")),
        (("Peer0.ORG1", "Org1"), ("Peer0.ORG2", "Org2")),
    )
    # TX3 read Key2 as absent; TX1 committing first makes that stale
    block = Block(0, (tx1, assembled))
    flags = {pid: p.deliver_block(block) for pid, p in peers.items()}
    assert all(f == [TxStatus.VALID, TxStatus.MVCC_CONFLICT] for f in flags.values())
    for p in peers.values():
        assert len(p.cache) == 0
    assert len({p.replica_bytes() for p in peers.values()}) == 1


def test_release_on_delivery_frees_keys():
    peer = Peer("p", "Org1", cache=MutexLockCache())
    proposal = TransactionProposal("a", ChangeOwner("K", "x"))
    resp = peer.endorse(proposal)
    assert peer.endorse(TransactionProposal("b", ChangeOwner("K", "y"))).outcome is Outcome.EMVCC_REJECTED
    tx = assemble_endorsed_tx([resp], parse_policy("AND('Org1.member')"))
    peer.deliver_block(Block(0, (tx,)))
    assert peer.cache.check_and_reserve("c", ["K"], ["K"]) == RESERVED
    assert peer.replica.entries["K"][1] == Version(0, 0)


def test_deliver_runs_policy_check():
    peer = Peer("p", "Org1", policy=AND2)
    tx = EndorsedTransaction("t", (), (("K", b"v"),), (("Peer0.ORG1", "Org1"),))
    assert peer.deliver_block(Block(0, (tx,))) == [TxStatus.POLICY_FAILURE]


def test_on_commit_listener_sees_flags():
    seen = []
    peer = Peer("p", "Org1", on_commit=lambda p, b, f: seen.append((p.peer_id, b.number, f)))
    tx = EndorsedTransaction("t", (), (("K", b"v"),))
    peer.deliver_block(Block(0, (tx,)))
    assert seen == [("p", 0, [TxStatus.VALID])]


def _resp(pid, org, reads=(("K", None),), writes=(("K", b"v"),), outcome=Outcome.ENDORSED):
    return EndorsementResponse("t", pid, org, reads, writes, outcome,
                               "K" if outcome is Outcome.EMVCC_REJECTED else None,
                               "x" if outcome is Outcome.EMVCC_REJECTED else None)


def test_assemble_and_policy_satisfied():
    tx = assemble_endorsed_tx([_resp("a", "Org1"), _resp("b", "Org2")], AND2, 1.5)
    assert isinstance(tx, EndorsedTransaction)
    assert tx.endorsements == (("a", "Org1"), ("b", "Org2"))
    assert tx.submit_time == 1.5


def test_assemble_one_rejection_aborts():
    out = assemble_endorsed_tx(
        [_resp("a", "Org1"), _resp("b", "Org2", outcome=Outcome.EMVCC_REJECTED)], AND2
    )
    assert out == ClientAbort("t", AbortReason.EMVCC_DETECTED, "K", "x", ("b",))


def test_assemble_or_single_response():
    assert isinstance(assemble_endorsed_tx([_resp("a", "Org2")], OR2), EndorsedTransaction)


def test_assemble_policy_unsatisfied():
    out = assemble_endorsed_tx([_resp("a", "Org1")], AND2)
    assert isinstance(out, ClientAbort) and out.reason is AbortReason.POLICY_UNSATISFIED


def test_assemble_mismatched_sets():
    out = assemble_endorsed_tx(
        [_resp("a", "Org1"), _resp("b", "Org2", reads=(("K", Version(0, 0)),))], AND2
    )
    assert isinstance(out, ClientAbort) and out.reason is AbortReason.NON_DETERMINISM


def test_assemble_rejects_mixed_tx_ids():
    other = EndorsementResponse("u", "b", "Org2", (), ())
    with pytest.raises(ValueError):
        assemble_endorsed_tx([_resp("a", "Org1"), other], AND2)
    with pytest.raises(ValueError):
        assemble_endorsed_tx([], AND2)


def test_same_block_same_flags_on_every_replica():
    import random

    rng = random.Random(11)
    peers = make_peers()
    reference = WorldState()
    for n in range(5):
        txs = []
        for i in range(8):
            key = f"K{rng.randrange(3)}"
            ver = reference.entries.get(key, (None, None))[1] if rng.random() < 0.7 else Version(99, 0)
            txs.append(
                EndorsedTransaction(
                    f"b{n}t{i}", ((key, ver),), ((key, b"x"),),
                    (("Peer0.ORG1", "Org1"), ("Peer0.ORG2", "Org2")),
                )
            )
        block = Block(n, tuple(txs))
        oracle = commit_block(reference, block)
        for p in peers.values():
            assert p.deliver_block(block) == oracle
    assert {p.replica_bytes() for p in peers.values()} == {reference.canonical_bytes()}
