from __future__ import annotations

import json
import math
import random
from collections import Counter

import pytest

from emvcc.config import RunConfig
from emvcc.cli import simulate
from emvcc.ledger import Block, EndorsedTransaction, TxStatus, WorldState, commit_block
from emvcc.peer import execute_chaincode
from emvcc.workload import (
    ChangeOwner,
    OpGenerator,
    WorkloadConfig,
    ZipfSampler,
    car_key,
    followers_per_leader,
    warmup_ops,
)


@pytest.mark.parametrize(
    "c, cap", [(0.0, 1), (0.2, 1), (0.4, 1), (0.5, 1), (0.6, 2), (0.8, 4), (0.9, 9), (1.0, None)]
)
def test_followers_per_leader(c, cap):
    assert followers_per_leader(c) == cap


def test_config_validation_reports_key_paths():
    cfg = WorkloadConfig(tx_rate=0, conflict_rate=1.5, mode="other", zipf_s=-1, workers=0)
    errors = cfg.validate()
    assert {e.split(":")[0] for e in errors} == {
        "workload.tx_rate",
        "workload.conflict_rate",
        "workload.mode",
        "workload.zipf_s",
        "workload.workers",
    }


def test_ops_are_change_owner_on_universe():
    gen = OpGenerator(WorkloadConfig(key_universe=50, conflict_rate=0.0))
    rng = random.Random(0)
    for i in range(40):
        op = gen.next_op(f"t{i}", rng)
        assert isinstance(op, ChangeOwner)
        assert op.kind == "change_owner"
    # with no conflicts requested every in-flight tx holds a distinct key
    assert gen.in_flight() == 40
    assert len({gen._key_of[f"t{i}"] for i in range(40)}) == 40


def test_duplicate_in_flight_id_rejected():
    gen = OpGenerator(WorkloadConfig())
    rng = random.Random(0)
    gen.next_op("a", rng)
    with pytest.raises(ValueError):
        gen.next_op("a", rng)


def test_followers_target_leader_keys():
    gen = OpGenerator(WorkloadConfig(conflict_rate=0.8))
    rng = random.Random(4)
    keys = {}
    for i in range(200):
        keys[f"t{i}"] = gen.next_op(f"t{i}", rng).key
    leaders = {t for t, r in gen.roles.items() if r == "leader"}
    followers = [t for t, r in gen.roles.items() if r == "follower"]
    assert followers
    for f in followers:
        assert any(keys[f] == keys[l] for l in leaders)
    per_leader = Counter(keys[f] for f in followers)
    assert max(per_leader.values()) <= followers_per_leader(0.8)


def test_follower_fraction_tracks_target():
    gen = OpGenerator(WorkloadConfig(conflict_rate=0.4))
    rng = random.Random(9)
    n = 20_000
    for i in range(n):
        gen.next_op(f"t{i}", rng)
        if i >= 200:
            # pipeline depth of a loaded run; too few in flight starves followers of leaders
            gen.complete(f"t{i - 200}")
    share = sum(r == "follower" for r in gen.roles.values()) / n
    assert abs(share - 0.4) < 0.02


def test_complete_frees_key():
    gen = OpGenerator(WorkloadConfig(key_universe=1, conflict_rate=0.0))
    rng = random.Random(0)
    assert gen.next_op("a", rng).key == "CAR0"
    # universe exhausted: falls outside it rather than colliding
    assert gen.next_op("b", rng).key == "CAR1"
    gen.complete("a")
    gen.complete("b")
    gen.complete("unknown")
    assert gen.next_op("c", rng).key == "CAR0"


def test_full_conflict_pairs_abort_every_second_member():
    """Serialize (leader, follower) pairs into one block each, baseline MVCC only."""
    gen = OpGenerator(WorkloadConfig(conflict_rate=1.0, key_universe=20))
    rng = random.Random(1)
    state = WorldState()
    commit_block(state, Block(0, tuple(
        EndorsedTransaction(f"w{i}", (), ((op.key, op.value),)) for i, op in enumerate(warmup_ops(20))
    )))
    flags = []
    for n in range(1, 11):
        pair = []
        for j in range(2):
            tx_id = f"p{n}-{j}"
            reads, writes = execute_chaincode(state, gen.next_op(tx_id, rng))
            pair.append(EndorsedTransaction(tx_id, reads, writes))
        assert pair[0].read_set[0][0] == pair[1].read_set[0][0]
        flags += commit_block(state, Block(n, tuple(pair)))
        for t in pair:
            gen.complete(t.tx_id)
    # oracle: the first of each pair commits, the second read a now-stale version
    assert flags == [TxStatus.VALID, TxStatus.MVCC_CONFLICT] * 10


def test_zipf_zero_is_uniform():
    n_keys, draws = 1000, 100_000
    sampler = ZipfSampler(n_keys, 0.0)
    assert sampler.cdf == [float(i) for i in range(1, n_keys + 1)]
    rng = random.Random(12)
    counts = Counter(sampler.sample(rng) for _ in range(draws))
    expected = draws / n_keys
    chi2 = sum((counts.get(k, 0) - expected) ** 2 / expected for k in range(n_keys))
    dof = n_keys - 1
    # chi-square statistic within 3 standard deviations of its mean
    assert abs(chi2 - dof) <= 3 * math.sqrt(2 * dof)
    sigma = math.sqrt(draws * (1 / n_keys) * (1 - 1 / n_keys))
    outside = sum(abs(counts.get(k, 0) - expected) > 3 * sigma for k in range(n_keys))
    # about 0.27% of keys fall outside 3 sigma by chance
    assert outside <= 10


@pytest.mark.parametrize("s", [0.5, 1.0, 2.0])
def test_zipf_matches_exact_pmf(s):
    n, draws = 20, 100_000
    weights = [1 / k**s for k in range(1, n + 1)]
    total = sum(weights)
    rng = random.Random(3)
    sampler = ZipfSampler(n, s)
    counts = Counter(sampler.sample(rng) for _ in range(draws))
    for k in range(n):
        p = weights[k] / total
        assert abs(counts[k] / draws - p) <= 4 * math.sqrt(p * (1 - p) / draws)


def test_warmup_covers_universe():
    ops = warmup_ops(3)
    assert [o.key for o in ops] == [car_key(0), car_key(1), car_key(2)]


def _run(**changes):
    cfg = RunConfig().replace(**changes)
    return simulate(cfg)


def test_zero_conflict_run_has_no_aborts():
    for cache in ("baseline", "syncmap"):
        r = _run(**{"workload.conflict_rate": 0.0, "workload.total_tx": 1500, "cache": cache}).report
        assert r.mvcc_aborted == 0 and r.emvcc_aborted == 0
        assert r.committed == 1500


def test_hundred_tx_make_hundred_chains():
    res = _run(**{"workload.total_tx": 100})
    assert res.safety.ok
    events = [json.loads(line) for line in res.events]
    submitted = [e["tx"] for e in events if e["type"] == "submitted"]
    assert len(submitted) == len(set(submitted)) == 100
    terminal = Counter(
        e["tx"] for e in events
        if e["type"] in ("committed", "mvcc_rejected", "emvcc_rejected", "policy_rejected", "client_aborted")
    )
    assert set(terminal) == set(submitted) and set(terminal.values()) == {1}


def test_zero_tx_completes_immediately():
    res = _run(**{"workload.total_tx": 0})
    assert res.report.total == 0 and res.safety.ok


def test_baseline_conflict_tracks_target_at_defaults():
    r = _run(cache="baseline").report
    assert abs(r.conflict_rate - 0.40) <= 0.05


def test_zipf_conflict_non_decreasing_in_s():
    rates = [
        _run(**{"cache": "baseline", "workload.mode": "zipf", "workload.zipf_s": s, "workload.total_tx": 2000}).report.conflict_rate
        for s in (0.0, 0.5, 1.0, 1.5, 2.0)
    ]
    assert rates == sorted(rates), rates


def test_retry_resubmits_aborted():
    res = _run(**{"workload.total_tx": 600, "workload.retry_aborted": True, "workload.max_retries": 2, "cache": "syncmap"})
    assert res.safety.ok
    events = [json.loads(line) for line in res.events]
    retries = [e for e in events if e["type"] == "submitted" and e["attempt"] > 0]
    assert retries
    assert all(e["tx"].startswith(e["origin"] + "-r") for e in retries)
    assert max(e["attempt"] for e in retries) <= 2
