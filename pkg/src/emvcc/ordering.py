"""Single logical orderer: batches endorsed transactions into blocks."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

from .ledger import Block, CutReason, EndorsedTransaction


@dataclass
class OrdererConfig:
    batch_size: int = 500
    batch_timeout: float = 2.0  # seconds

    def validate(self) -> list[str]:
        errors = []
        if self.batch_size < 1:
            errors.append("orderer.batch_size: must be >= 1")
        if self.batch_timeout <= 0:
            errors.append("orderer.batch_timeout_ms: must be positive")
        return errors


BlockSink = Callable[[Block, float], None]


class Orderer:
    """Cuts a block when the batch is full or its first tx has waited out the timeout.

    ``on_block`` runs while the orderer lock is held, so blocks reach it in
    number order even when clients and the timer thread race; keep it cheap
    (enqueue, don't process).
    """

    def __init__(
        self,
        config: OrdererConfig,
        on_block: BlockSink | None = None,
        first_block: int = 0,
    ) -> None:
        self.config = config
        self.on_block = on_block
        self.next_number = first_block
        self.blocks: list[Block] = []
        self._pending: list[EndorsedTransaction] = []
        self._first_arrival: float | None = None
        self._seen: set[str] = set()
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)

    @property
    def pending(self) -> int:
        with self._lock:
            return len(self._pending)

    def submit(self, tx: EndorsedTransaction, now: float) -> bool:
        with self._lock:
            if tx.tx_id in self._seen:
                return False
            self._seen.add(tx.tx_id)
            if not self._pending:
                self._first_arrival = now
            self._pending.append(tx)
            if len(self._pending) >= self.config.batch_size:
                self._cut_locked(CutReason.SIZE_REACHED, now)
            self._changed.notify_all()
            return True

    def deadline(self) -> float | None:
        """Time at which the current batch times out, if any."""
        with self._lock:
            if self._first_arrival is None:
                return None
            return self._first_arrival + self.config.batch_timeout

    def tick(self, now: float) -> Block | None:
        """Cut the pending batch if its timeout has expired."""
        with self._lock:
            if (
                self._pending
                and now >= self._first_arrival + self.config.batch_timeout
            ):
                return self._cut_locked(CutReason.TIMEOUT_EXPIRED, now)
        return None

    def cut_block(self, now: float = 0.0) -> Block:
        """Force a cut of the non-empty pending batch."""
        with self._lock:
            if not self._pending:
                raise ValueError("no pending transactions to cut")
            reason = (
                CutReason.SIZE_REACHED
                if len(self._pending) >= self.config.batch_size
                else CutReason.TIMEOUT_EXPIRED
            )
            return self._cut_locked(reason, now)

    def _cut_locked(self, reason: CutReason, now: float) -> Block:
        block = Block(self.next_number, tuple(self._pending), reason)
        self.next_number += 1
        self._pending = []
        self._first_arrival = None
        self.blocks.append(block)
        if self.on_block is not None:
            self.on_block(block, now)
        return block

    def wait_for_change(self, timeout: float | None) -> None:
        """Block the timer thread until a submit happens or ``timeout`` passes."""
        with self._changed:
            self._changed.wait(timeout)
