"""Pipeline engines wiring clients, peers, and the orderer together.

Two engines share one set of lifecycle rules and emit the same event schema:

* ``DeterministicNetwork`` runs a single client stream on virtual time with
  a priority queue; identical seeds give byte-identical event streams.
* ``ConcurrentNetwork`` runs real threads (client workers, an orderer timer,
  one delivery worker per peer) against wall-clock time, which is what
  exercises the caches under contention.

Cost model (both engines): a proposal's endorsements execute ``endorse_ms``
after submission; endorsed transactions reach the orderer ``order_ms``
later; each peer validates blocks one at a time, paying
``commit_ms_per_block + n * validate_ms_per_tx``. Peers are the bottleneck
resource, so transactions aborted before ordering free validation time.
"""
from __future__ import annotations

import heapq
import itertools
import json
import logging
import queue
import random
import threading
import time
from dataclasses import dataclass
from typing import Callable

from .cache import DEFAULT_LOCKFREE_THRESHOLD, DEFAULT_TTL, make_cache
from .ledger import (
    Block,
    CutReason,
    EndorsedTransaction,
    TxStatus,
    ValidationFlags,
    block_log_line,
)
from .ordering import Orderer, OrdererConfig
from .peer import (
    AbortReason,
    ClientAbort,
    Peer,
    TransactionProposal,
    assemble_endorsed_tx,
)
from .policy import Policy, Topology, select_endorsers
from .workload import ChaincodeOp, OpGenerator, warmup_ops

log = logging.getLogger(__name__)


@dataclass
class TimingConfig:
    endorse_ms: float = 5.0
    order_ms: float = 2.0
    deliver_ms: float = 2.0
    validate_ms_per_tx: float = 1.5
    commit_ms_per_block: float = 20.0

    def validate(self) -> list[str]:
        return [
            f"timing.{name}: must be >= 0"
            for name, value in vars(self).items()
            if value < 0
        ]


@dataclass
class CacheOptions:
    ttl: float = DEFAULT_TTL  # seconds
    lockfree_threshold: int = DEFAULT_LOCKFREE_THRESHOLD
    syncmap_promote_after: int | None = None


class EventSink:
    """Thread-safe, append-only list of lifecycle events (times in ms)."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.events: list[dict] = []

    def emit(self, kind: str, t: float, **fields) -> None:
        event = {"type": kind, "t": round(t * 1000.0, 3), **fields}
        with self._lock:
            self.events.append(event)

    def lines(self) -> list[str]:
        with self._lock:
            return [
                json.dumps(e, sort_keys=True, separators=(",", ":"))
                for e in self.events
            ]


def _reads_json(read_set) -> list:
    return [[k, None if v is None else list(v)] for k, v in read_set]


@dataclass
class _TxState:
    proposal: TransactionProposal
    origin: str
    attempt: int = 0
    terminal: bool = False


class _Engine:
    """Lifecycle bookkeeping shared by both engines."""

    def __init__(
        self,
        topology: Topology,
        policy: Policy,
        cache_variant: str = "baseline",
        orderer_config: OrdererConfig | None = None,
        timing: TimingConfig | None = None,
        cache_options: CacheOptions | None = None,
        seed: int = 0,
        header: dict | None = None,
    ) -> None:
        self.topology = topology
        self.policy = policy
        self.cache_variant = cache_variant
        self.orderer_config = orderer_config or OrdererConfig()
        self.timing = timing or TimingConfig()
        self.cache_options = cache_options or CacheOptions()
        self.seed = seed
        self.header = header or {}
        self.sink = EventSink()
        self.block_log: list[str] = []
        self.flag_divergence: list[int] = []
        self.peers: dict[str, Peer] = {}
        for org_id, peer_ids in topology.orgs:
            for pid in peer_ids:
                cache = make_cache(
                    cache_variant,
                    clock=self.now,
                    lockfree_threshold=self.cache_options.lockfree_threshold,
                    syncmap_promote_after=self.cache_options.syncmap_promote_after,
                )
                self.peers[pid] = Peer(
                    pid,
                    org_id,
                    cache=cache,
                    policy=policy,
                    on_commit=self._on_peer_commit,
                    cache_ttl=self.cache_options.ttl,
                )
        self.orderer = Orderer(self.orderer_config, self._on_block)
        self.gen: OpGenerator | None = None
        self._lock = threading.RLock()
        self._txs: dict[str, _TxState] = {}
        self._commit_counts: dict[int, int] = {}
        self._block_flags: dict[int, ValidationFlags] = {}
        self._warmup_blocks = 0
        self._issued = 0
        self._terminal = 0
        self._retry_enabled = False
        self._max_retries = 0

    # -- time -------------------------------------------------------------

    def now(self) -> float:
        raise NotImplementedError

    # -- setup ------------------------------------------------------------

    def warmup(self, key_universe: int) -> None:
        """Pre-create the key universe in blocks committed straight to every peer."""
        size = self.orderer_config.batch_size
        ops = warmup_ops(key_universe)
        for start in range(0, len(ops), size):
            chunk = ops[start:start + size]
            txs = tuple(
                EndorsedTransaction(
                    tx_id=f"warmup-{start + i}",
                    read_set=(),
                    write_set=((op.key, op.value),),
                    endorsements=tuple(
                        (peers[0], org) for org, peers in self.topology.orgs
                    ),
                )
                for i, op in enumerate(chunk)
            )
            block = Block(self.orderer.next_number, txs, CutReason.SIZE_REACHED)
            self.orderer.next_number += 1
            self._warmup_blocks += 1
            for peer in self.peers.values():
                peer.on_commit = None
                peer.deliver_block(block)
                peer.on_commit = self._on_peer_commit
            self.block_log.append(
                block_log_line(block, [TxStatus.VALID] * len(txs))
            )

    def start_header(self) -> None:
        self.sink.emit("run_started", 0.0, params=self.header)

    # -- client side --------------------------------------------------------

    def _new_proposal(
        self, tx_id: str, op: ChaincodeOp, client_id: str, origin: str, attempt: int
    ) -> TransactionProposal:
        t = self.now()
        proposal = TransactionProposal(tx_id, op, client_id, t)
        with self._lock:
            self._txs[tx_id] = _TxState(proposal, origin, attempt)
        self.sink.emit(
            "submitted",
            t,
            tx=tx_id,
            client=client_id,
            op=op.kind,
            key=op.key,
            attempt=attempt,
            origin=origin,
        )
        return proposal

    def _endorse_all(
        self, proposal: TransactionProposal, endorsers: list[str]
    ) -> EndorsedTransaction | ClientAbort:
        responses = [self.peers[p].endorse(proposal) for p in endorsers]
        result = assemble_endorsed_tx(responses, self.policy, proposal.submit_time)
        t = self.now()
        if isinstance(result, ClientAbort):
            if result.reason is AbortReason.EMVCC_DETECTED:
                self.sink.emit(
                    "emvcc_rejected",
                    t,
                    tx=proposal.tx_id,
                    peers=endorsers,
                    rejected_by=list(result.rejected_by),
                    key=result.conflicting_key,
                    blocking_tx=result.blocking_tx,
                    reads=_reads_json(responses[0].read_set),
                )
            else:
                self.sink.emit(
                    "client_aborted",
                    t,
                    tx=proposal.tx_id,
                    peers=endorsers,
                    reason=result.reason.value,
                )
            self._finish(proposal.tx_id, aborted=True)
        else:
            self.sink.emit(
                "endorsed",
                t,
                tx=proposal.tx_id,
                peers=endorsers,
                reads=_reads_json(result.read_set),
                writes=[k for k, _ in result.write_set],
            )
        return result

    # -- orderer / peers ----------------------------------------------------

    def _on_block(self, block: Block, now: float) -> None:
        self.sink.emit(
            "block_cut",
            now,
            block=block.number,
            size=len(block.transactions),
            reason=block.cut_reason.value,
        )
        for tx in block.transactions:
            self.sink.emit("ordered", now, tx=tx.tx_id, block=block.number)
        self._dispatch_block(block)

    def _dispatch_block(self, block: Block) -> None:
        raise NotImplementedError

    def _on_peer_commit(self, peer: Peer, block: Block, flags: ValidationFlags) -> None:
        with self._lock:
            ref = self._block_flags.setdefault(block.number, list(flags))
            if ref != list(flags):
                self.flag_divergence.append(block.number)
            count = self._commit_counts.get(block.number, 0) + 1
            self._commit_counts[block.number] = count
            if count < len(self.peers):
                return
            del self._commit_counts[block.number]
            self.block_log.append(block_log_line(block, ref))
        t = self.now()
        for idx, (tx, status) in enumerate(zip(block.transactions, ref)):
            if status is TxStatus.VALID:
                self.sink.emit(
                    "committed",
                    t,
                    tx=tx.tx_id,
                    block=block.number,
                    index=idx,
                    writes=[k for k, _ in tx.write_set],
                )
            elif status is TxStatus.MVCC_CONFLICT:
                self.sink.emit(
                    "mvcc_rejected", t, tx=tx.tx_id, block=block.number, index=idx
                )
            else:
                self.sink.emit(
                    "policy_rejected",
                    t,
                    tx=tx.tx_id,
                    block=block.number,
                    index=idx,
                    reason=status.value,
                )
            self._finish(tx.tx_id, aborted=status is not TxStatus.VALID)

    def _finish(self, tx_id: str, aborted: bool) -> None:
        with self._lock:
            state = self._txs[tx_id]
            if state.terminal:
                raise RuntimeError(f"tx {tx_id} reached a terminal state twice")
            state.terminal = True
            self._terminal += 1
        if self.gen is not None:
            self.gen.complete(tx_id)
        if aborted and self._retry_enabled and state.attempt < self._max_retries:
            self._schedule_retry(state)
        self._maybe_done()

    def _schedule_retry(self, state: _TxState) -> None:
        raise NotImplementedError

    def _maybe_done(self) -> None:
        pass

    # -- results ------------------------------------------------------------

    def cache_stats(self) -> dict[str, dict[str, int]]:
        return {
            pid: peer.cache.stats()
            for pid, peer in self.peers.items()
            if peer.cache is not None
        }

    def finish_events(self) -> None:
        with self._lock:
            stuck = [tx for tx, s in self._txs.items() if not s.terminal]
        self.sink.emit(
            "run_finished",
            self.now(),
            stuck=sorted(stuck),
            cache_counters=self.cache_stats(),
            flag_divergence=self.flag_divergence,
        )

    def replica_bytes(self) -> dict[str, bytes]:
        return {pid: peer.replica_bytes() for pid, peer in self.peers.items()}

    def stuck(self) -> list[str]:
        with self._lock:
            return [tx for tx, s in self._txs.items() if not s.terminal]


def worker_rng(seed: int, worker: int, stream: str) -> random.Random:
    """Independent per-worker stream split from the master seed."""
    return random.Random(f"{seed}:{worker}:{stream}")


# priorities for simultaneous events: commits settle before anyone reads
_COMMIT, _TIMEOUT, _DELIVER, _ORDER, _ENDORSE, _SUBMIT = range(6)


class DeterministicNetwork(_Engine):
    """Virtual-time engine with a single client worker."""

    def __init__(self, *args, **kwargs) -> None:
        self._now = 0.0
        super().__init__(*args, **kwargs)
        self._heap: list = []
        self._seq = itertools.count()
        self._busy_until = {pid: 0.0 for pid in self.peers}
        self._op_rng = worker_rng(self.seed, 0, "ops")
        self._sel_rng = worker_rng(self.seed, 0, "endorsers")
        self._tx_counter = itertools.count()

    def now(self) -> float:
        return self._now

    def _at(self, t: float, prio: int, fn: Callable, *args) -> None:
        heapq.heappush(self._heap, (t, prio, next(self._seq), fn, args))

    def run_workload(self, gen: OpGenerator) -> bool:
        cfg = gen.config
        self.gen = gen
        self._retry_enabled = cfg.retry_aborted
        self._max_retries = cfg.max_retries
        self.start_header()
        for i in range(cfg.total_tx):
            self._at(i / cfg.tx_rate, _SUBMIT, self._submit_new, i)
        while self._heap:
            t, _, _, fn, args = heapq.heappop(self._heap)
            self._now = t
            fn(*args)
        self.finish_events()
        return not self.stuck()

    def _submit_new(self, i: int) -> None:
        tx_id = f"tx-{i}"
        op = self.gen.next_op(tx_id, self._op_rng)
        self._start(tx_id, op, "client0", tx_id, 0)

    def _start(self, tx_id, op, client_id, origin, attempt) -> None:
        proposal = self._new_proposal(tx_id, op, client_id, origin, attempt)
        endorsers = sorted(select_endorsers(self.policy, self.topology, self._sel_rng))
        self._at(
            self._now + self.timing.endorse_ms / 1000.0,
            _ENDORSE,
            self._endorse,
            proposal,
            endorsers,
        )

    def _endorse(self, proposal, endorsers) -> None:
        result = self._endorse_all(proposal, endorsers)
        if isinstance(result, EndorsedTransaction):
            self._at(
                self._now + self.timing.order_ms / 1000.0, _ORDER, self._order, result
            )

    def _order(self, tx: EndorsedTransaction) -> None:
        self.orderer.submit(tx, self._now)
        if self.orderer.pending == 1:
            self._at(self.orderer.deadline(), _TIMEOUT, self._tick)

    def _tick(self) -> None:
        self.orderer.tick(self._now)

    def _dispatch_block(self, block: Block) -> None:
        arrive = self._now + self.timing.deliver_ms / 1000.0
        cost = (
            self.timing.commit_ms_per_block
            + self.timing.validate_ms_per_tx * len(block.transactions)
        ) / 1000.0
        for pid, peer in self.peers.items():
            start = max(arrive, self._busy_until[pid])
            done = start + cost
            self._busy_until[pid] = done
            self._at(done, _COMMIT, peer.deliver_block, block)

    def _schedule_retry(self, state: _TxState) -> None:
        attempt = state.attempt + 1
        tx_id = f"{state.origin}-r{attempt}"
        op = state.proposal.op
        self.gen.register(tx_id, op.key)
        self._at(self._now, _SUBMIT, self._start, tx_id, op, "client0", state.origin, attempt)


class ConcurrentNetwork(_Engine):
    """Threaded engine on wall-clock time."""

    def __init__(self, *args, workers: int = 8, drain_timeout: float = 600.0, **kwargs) -> None:
        self._t0 = time.monotonic()
        super().__init__(*args, **kwargs)
        self.workers = workers
        self.drain_timeout = drain_timeout
        self._queues = {pid: queue.Queue() for pid in self.peers}
        self._retries: queue.Queue = queue.Queue()
        self._done = threading.Event()
        self._stop = threading.Event()
        self._scheduled_left = 0
        self.errors: list[BaseException] = []

    def now(self) -> float:
        return time.monotonic() - self._t0

    def _dispatch_block(self, block: Block) -> None:
        for q in self._queues.values():
            q.put(block)

    def _delivery_loop(self, pid: str) -> None:
        peer = self.peers[pid]
        q = self._queues[pid]
        timing = self.timing
        while True:
            block = q.get()
            if block is None:
                return
            try:
                time.sleep(
                    (
                        timing.deliver_ms
                        + timing.commit_ms_per_block
                        + timing.validate_ms_per_tx * len(block.transactions)
                    )
                    / 1000.0
                )
                peer.deliver_block(block)
            except BaseException as exc:  # surface to the caller, keep draining
                log.exception("delivery to %s failed", pid)
                self.errors.append(exc)
                self._done.set()

    def _timer_loop(self) -> None:
        while not self._stop.is_set():
            deadline = self.orderer.deadline()
            if deadline is None:
                self.orderer.wait_for_change(0.05)
                continue
            delay = deadline - self.now()
            if delay > 0:
                self.orderer.wait_for_change(min(delay, 0.05))
                continue
            self.orderer.tick(self.now())

    def _client_loop(self, w: int, indices: list[int], rate: float) -> None:
        op_rng = worker_rng(self.seed, w, "ops")
        sel_rng = worker_rng(self.seed, w, "endorsers")
        try:
            for i in indices:
                delay = i / rate - self.now()
                if delay > 0:
                    time.sleep(delay)
                tx_id = f"tx-{i}"
                op = self.gen.next_op(tx_id, op_rng)
                self._run_proposal(tx_id, op, f"client{w}", tx_id, 0, sel_rng)
                with self._lock:
                    self._scheduled_left -= 1
                self._maybe_done()
            while not self._done.is_set():
                try:
                    item = self._retries.get(timeout=0.05)
                except queue.Empty:
                    continue
                self._run_proposal(*item, sel_rng)
        except BaseException as exc:
            log.exception("client worker %d failed", w)
            self.errors.append(exc)
            self._done.set()

    def _run_proposal(self, tx_id, op, client_id, origin, attempt, sel_rng) -> None:
        proposal = self._new_proposal(tx_id, op, client_id, origin, attempt)
        endorsers = sorted(select_endorsers(self.policy, self.topology, sel_rng))
        time.sleep(self.timing.endorse_ms / 1000.0)
        result = self._endorse_all(proposal, endorsers)
        if isinstance(result, EndorsedTransaction):
            self.orderer.submit(result, self.now())

    def _schedule_retry(self, state: _TxState) -> None:
        attempt = state.attempt + 1
        tx_id = f"{state.origin}-r{attempt}"
        op = state.proposal.op
        self.gen.register(tx_id, op.key)
        with self._lock:
            self._issued += 1
        self._retries.put((tx_id, op, state.proposal.client_id, state.origin, attempt))

    def _maybe_done(self) -> None:
        with self._lock:
            if (
                self._scheduled_left == 0
                and self._terminal >= len(self._txs)
                and self._retries.empty()
                and self._issued_all()
            ):
                self._done.set()

    def _issued_all(self) -> bool:
        # every queued retry has been turned into a tracked proposal
        return self._issued <= len(self._txs)

    def run_workload(self, gen: OpGenerator) -> bool:
        cfg = gen.config
        self.gen = gen
        self._retry_enabled = cfg.retry_aborted
        self._max_retries = cfg.max_retries
        self._scheduled_left = cfg.total_tx
        self._issued = cfg.total_tx
        self._t0 = time.monotonic()
        self.start_header()
        if cfg.total_tx == 0:
            self._done.set()
        threads = [
            threading.Thread(target=self._delivery_loop, args=(pid,), daemon=True)
            for pid in self.peers
        ]
        threads.append(threading.Thread(target=self._timer_loop, daemon=True))
        n_workers = max(1, min(self.workers, cfg.total_tx))
        clients = [
            threading.Thread(
                target=self._client_loop,
                args=(w, list(range(w, cfg.total_tx, n_workers)), cfg.tx_rate),
                daemon=True,
            )
            for w in range(n_workers)
        ]
        for t in threads + clients:
            t.start()
        finished = self._done.wait(self.drain_timeout)
        self._done.set()
        for t in clients:
            t.join()
        self._stop.set()
        for q in self._queues.values():
            q.put(None)
        for t in threads:
            t.join()
        self.finish_events()
        if self.errors:
            raise self.errors[0]
        return finished and not self.stuck()
