"""Transaction workloads over a Fabcar-like key space.

Two key-selection modes:

``hotset``
    Each proposal is, with probability ``conflict_rate``, paired with an
    in-flight *leader* (a proposal that touched a key nobody else had in
    flight) and targets that leader's key. Otherwise it becomes a leader
    itself on an idle key. With the leader committing first, every follower
    reads a version that is about to go stale, so the follower fraction is
    the baseline abort rate. Up to ``conflict_rate / (1 - conflict_rate)``
    followers (rounded up, at least one) may share a leader, which keeps
    rates above 0.5 reachable.

``zipf``
    The key index is drawn from a Zipf(s) law over the universe; s=0 is
    uniform.
"""
from __future__ import annotations

import bisect
import itertools
import math
import random
import threading
from dataclasses import dataclass

HOTSET = "hotset"
ZIPF = "zipf"


@dataclass(frozen=True)
class Create:
    key: str
    value: bytes

    @property
    def kind(self) -> str:
        return "create"


@dataclass(frozen=True)
class ChangeOwner:
    key: str
    new_owner: str

    @property
    def kind(self) -> str:
        return "change_owner"


ChaincodeOp = Create | ChangeOwner


def car_key(index: int) -> str:
    return f"CAR{index}"


def car_value(owner: str) -> bytes:
    return f"owner={owner}".encode()


@dataclass
class WorkloadConfig:
    tx_rate: float = 1000.0
    total_tx: int = 5000
    conflict_rate: float = 0.40
    key_universe: int = 10_000
    mode: str = HOTSET
    zipf_s: float = 1.0
    retry_aborted: bool = False
    max_retries: int = 3
    workers: int = 8
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.tx_rate <= 0:
            errors.append("workload.tx_rate: must be positive")
        if self.total_tx < 0:
            errors.append("workload.total_tx: must be non-negative")
        if not 0.0 <= self.conflict_rate <= 1.0:
            errors.append("workload.conflict_rate: must be in [0, 1]")
        if self.key_universe < 1:
            errors.append("workload.key_universe: must be positive")
        if self.mode not in (HOTSET, ZIPF):
            errors.append(f"workload.mode: must be '{HOTSET}' or '{ZIPF}'")
        if self.zipf_s < 0:
            errors.append("workload.zipf_s: must be >= 0")
        if self.max_retries < 0:
            errors.append("workload.max_retries: must be >= 0")
        if self.workers < 1:
            errors.append("workload.workers: must be >= 1")
        return errors


class ZipfSampler:
    """Inverse-CDF sampler for P(k) proportional to 1/k**s, k = 1..n."""

    def __init__(self, n: int, s: float) -> None:
        weights = [1.0 / (k**s) for k in range(1, n + 1)]
        self.cdf = list(itertools.accumulate(weights))
        self.total = self.cdf[-1]

    def sample(self, rng: random.Random) -> int:
        """Zero-based index of the drawn key."""
        i = bisect.bisect_right(self.cdf, rng.random() * self.total)
        return min(i, len(self.cdf) - 1)


def warmup_ops(key_universe: int) -> list[Create]:
    return [Create(car_key(i), car_value("genesis")) for i in range(key_universe)]


def followers_per_leader(conflict_rate: float) -> int | None:
    """Cap on followers per leader; None means unbounded."""
    if conflict_rate >= 1.0:
        return None
    return max(1, math.ceil(conflict_rate / (1.0 - conflict_rate) - 1e-12))


class OpGenerator:
    """Thread-safe op source that tracks which keys are in flight.

    Callers report completion through ``complete`` once a transaction is
    terminal; in hotset mode that is what frees its key and its leader slot.
    """

    def __init__(self, config: WorkloadConfig) -> None:
        self.config = config
        self._lock = threading.Lock()
        self._zipf = (
            ZipfSampler(config.key_universe, config.zipf_s)
            if config.mode == ZIPF
            else None
        )
        self._cap = followers_per_leader(config.conflict_rate)
        self._key_of: dict[str, str] = {}
        self._busy: dict[str, int] = {}  # key -> in-flight tx count
        self._open_leaders: dict[str, int] = {}  # leader tx -> followers so far
        self._fresh = itertools.count(config.key_universe)
        self.roles: dict[str, str] = {}

    def in_flight(self) -> int:
        with self._lock:
            return len(self._key_of)

    def next_op(self, tx_id: str, rng: random.Random) -> ChaincodeOp:
        """Draw the next op for ``tx_id`` and mark it in flight."""
        with self._lock:
            if tx_id in self._key_of:
                raise ValueError(f"tx {tx_id} already in flight")
            if self._zipf is not None:
                key = car_key(self._zipf.sample(rng))
                role = "zipf"
            else:
                key, role = self._hotset_key(tx_id, rng)
            self._key_of[tx_id] = key
            self._busy[key] = self._busy.get(key, 0) + 1
            self.roles[tx_id] = role
        return ChangeOwner(key, f"owner-{tx_id}")

    def _hotset_key(self, tx_id: str, rng: random.Random) -> tuple[str, str]:
        # Both draws happen every time so the random stream does not depend
        # on how many leaders happen to be open.
        want_follow = rng.random() < self.config.conflict_rate
        pick = rng.random()
        if want_follow and self._open_leaders:
            leaders = list(self._open_leaders)  # insertion = submission order
            leader = leaders[min(int(pick * len(leaders)), len(leaders) - 1)]
            self._open_leaders[leader] += 1
            if self._cap is not None and self._open_leaders[leader] >= self._cap:
                del self._open_leaders[leader]
            return self._key_of[leader], "follower"
        key = self._idle_key(rng)
        self._open_leaders[tx_id] = 0
        return key, "leader"

    def _idle_key(self, rng: random.Random) -> str:
        universe = self.config.key_universe
        if len(self._busy) < universe:
            for _ in range(64):
                key = car_key(rng.randrange(universe))
                if key not in self._busy:
                    return key
            for i in range(universe):
                if car_key(i) not in self._busy:
                    return car_key(i)
        # universe exhausted: fall back to a key outside it (read as absent)
        return car_key(next(self._fresh))

    def register(self, tx_id: str, key: str) -> None:
        """Track a resubmitted transaction on ``key`` without drawing a new op."""
        with self._lock:
            self._key_of[tx_id] = key
            self._busy[key] = self._busy.get(key, 0) + 1
            self.roles[tx_id] = "retry"

    def complete(self, tx_id: str) -> None:
        with self._lock:
            key = self._key_of.pop(tx_id, None)
            if key is None:
                return
            self._open_leaders.pop(tx_id, None)
            left = self._busy[key] - 1
            if left:
                self._busy[key] = left
            else:
                del self._busy[key]


def drive(gen: OpGenerator, network) -> bool:
    """Run the client loop against ``network`` until every proposal is terminal.

    ``network`` is a simulation engine from :mod:`emvcc.network`; the loop
    itself (pacing, worker streams, retries) lives there because it is tied
    to the engine's notion of time.
    """
    return network.run_workload(gen)
