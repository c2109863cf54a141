"""Deterministic seeded discrete-event engine.

A single virtual-time queue drives one simulation run: message deliveries,
link-pair completions, timer pops and request arrivals are all plain
callbacks ordered by (time, insertion sequence).  Equal timestamps execute
in insertion order, which also gives every channel FIFO delivery for free.

Randomness is split into named streams derived from the master seed with
SHA-256, so distinct consumers never share a stream and traces are
bit-reproducible across processes regardless of hash randomization.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable


class SchedulingInPast(RuntimeError):
    """An event was scheduled before the current clock."""


class ChannelDown(RuntimeError):
    """Send attempted on a torn-down channel."""


@dataclass
class SimStats:
    events_processed: int
    clock: float


@dataclass(frozen=True)
class TraceEntry:
    time_ns: int
    node: str
    kind: str
    circuit: str
    detail: str

    def line(self) -> str:
        return f"{self.time_ns}\t{self.node}\t{self.kind}\t{self.circuit}\t{self.detail}"


class TimerHandle:
    """Cancellable one-shot timer.  Cancellation is idempotent."""

    __slots__ = ("owner", "key", "deadline", "_cancelled", "_fired")

    def __init__(self, owner: str, key: Any, deadline: float):
        self.owner = owner
        self.key = key
        self.deadline = deadline
        self._cancelled = False
        self._fired = False

    @property
    def active(self) -> bool:
        return not (self._cancelled or self._fired)

    def cancel(self) -> None:
        self._cancelled = True


@dataclass(order=True)
class _QueueItem:
    time: float
    seq: int
    action: Callable[[], None] = field(compare=False)
    kind: str = field(compare=False, default="event")
    node: str = field(compare=False, default="")
    circuit: str = field(compare=False, default="")
    detail: str = field(compare=False, default="")


def derive_stream_seed(seed: int, stream_id: str) -> int:
    digest = hashlib.sha256(f"{seed}\x1f{stream_id}".encode()).digest()
    return int.from_bytes(digest[:16], "big")


class Simulator:
    """Virtual-time event queue with named RNG streams and optional tracing."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.now = 0.0
        self._queue: list[_QueueItem] = []
        self._seq = 0
        self._events_processed = 0
        self._rngs: dict[str, random.Random] = {}
        self.trace: list[TraceEntry] | None = None

    # -- randomness ------------------------------------------------------

    def rng(self, stream_id: str) -> random.Random:
        """Stable per-consumer stream: same (seed, stream_id), same draws."""
        stream = self._rngs.get(stream_id)
        if stream is None:
            stream = random.Random(derive_stream_seed(self.seed, stream_id))
            self._rngs[stream_id] = stream
        return stream

    # -- scheduling ------------------------------------------------------

    def schedule(
        self,
        time: float,
        action: Callable[[], None],
        *,
        kind: str = "event",
        node: str = "",
        circuit: str = "",
        detail: str = "",
    ) -> None:
        if time < self.now:
            raise SchedulingInPast(f"event at t={time} scheduled at clock t={self.now}")
        item = _QueueItem(time, self._seq, action, kind, node, circuit, detail)
        self._seq += 1
        heapq.heappush(self._queue, item)

    def schedule_after(self, delay: float, action: Callable[[], None], **labels: str) -> None:
        self.schedule(self.now + delay, action, **labels)

    # -- timers ----------------------------------------------------------

    def start_timer(
        self,
        owner: str,
        key: Any,
        duration: float,
        action: Callable[[], None],
    ) -> TimerHandle:
        if duration <= 0:
            raise ValueError(f"timer duration must be positive: {duration}")
        handle = TimerHandle(owner, key, self.now + duration)

        def pop() -> None:
            if not handle.active:
                return
            handle._fired = True
            action()

        self.schedule(
            handle.deadline, pop, kind="timer", node=owner, detail=f"key={key}"
        )
        return handle

    def cancel_timer(self, handle: TimerHandle) -> None:
        handle.cancel()

    # -- execution -------------------------------------------------------

    def enable_trace(self) -> None:
        if self.trace is None:
            self.trace = []

    def _execute(self, item: _QueueItem) -> None:
        self.now = item.time
        if self.trace is not None:
            self.trace.append(
                TraceEntry(
                    int(round(item.time * 1e9)), item.node, item.kind, item.circuit, item.detail
                )
            )
        self._events_processed += 1
        item.action()

    def run_until(self, t_end: float) -> SimStats:
        """Execute every event with time <= t_end, then set the clock to t_end."""
        while self._queue and self._queue[0].time <= t_end:
            self._execute(heapq.heappop(self._queue))
        self.now = max(self.now, t_end)
        return SimStats(self._events_processed, self.now)

    def run(self, max_events: int | None = None) -> SimStats:
        """Drain the queue (optionally bounded), e.g. to let a workload settle."""
        executed = 0
        while self._queue:
            if max_events is not None and executed >= max_events:
                break
            self._execute(heapq.heappop(self._queue))
            executed += 1
        return SimStats(self._events_processed, self.now)

    @property
    def pending_events(self) -> int:
        return len(self._queue)

    def trace_lines(self) -> list[str]:
        return [entry.line() for entry in self.trace or []]


class Channel:
    """Reliable in-order bidirectional channel between two nodes.

    Delivery happens ``delay + processing_delay`` after the send; the
    processing share models the time between emission at one node and the
    handler actually running at the next.
    """

    def __init__(
        self,
        sim: Simulator,
        endpoint_a: str,
        endpoint_b: str,
        delay: float = 0.0,
        processing_delay: float = 0.0,
        circuit: str = "",
    ):
        self.sim = sim
        self.endpoint_a = endpoint_a
        self.endpoint_b = endpoint_b
        self.delay = delay
        self.processing_delay = processing_delay
        self.circuit = circuit
        self.down = False
        self._handlers: dict[str, Callable[[Any], None]] = {}

    def connect(self, node: str, handler: Callable[[Any], None]) -> None:
        if node not in (self.endpoint_a, self.endpoint_b):
            raise ValueError(f"{node} is not an endpoint of this channel")
        self._handlers[node] = handler

    def other_end(self, node: str) -> str:
        if node == self.endpoint_a:
            return self.endpoint_b
        if node == self.endpoint_b:
            return self.endpoint_a
        raise ValueError(f"{node} is not an endpoint of this channel")

    def send(self, sender: str, message: Any) -> None:
        if self.down:
            raise ChannelDown(f"channel {self.endpoint_a}-{self.endpoint_b} is down")
        receiver = self.other_end(sender)
        handler = self._handlers.get(receiver)
        if handler is None:
            raise RuntimeError(f"no handler connected at {receiver}")
        detail = getattr(message, "wire", None)
        self.sim.schedule_after(
            self.delay + self.processing_delay,
            lambda: handler(message),
            kind="msg",
            node=receiver,
            circuit=self.circuit,
            detail=detail() if callable(detail) else str(message),
        )

    def shut_down(self) -> None:
        self.down = True
