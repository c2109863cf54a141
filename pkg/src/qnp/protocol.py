"""The quantum data plane protocol: per-node rules over one virtual circuit.

Each installed circuit gives every node on the path one state machine:
head end, tail end, or intermediate.  Intermediate nodes swap the oldest
unexpired upstream/downstream pairs the moment both exist, log a swap
record per consumed qubit, and never wait for a classical message.  The
end nodes originate TRACK messages for every local link pair; a TRACK
folds swap outcomes hop by hop with the XOR rule, so whichever end it
reaches knows the final pair state without anyone tracking intermediate
pairs.

Expired qubits turn the eventually-arriving TRACK around as an EXPIRE
toward its origin end, which is the only place allowed to free an
end-node qubit: discarding at the ends directly would race the other
end's delivery.
"""

from __future__ import annotations

import hashlib
from collections import Counter, deque
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .bell import BASES, BellIndex, combine_bell, pauli_correction_for
from .physical import (
    Correlator,
    LinkProcess,
    Qubit,
    discard_qubit,
    entanglement_swap,
    measure_pair_end,
    release_qubit,
)
from .sim import Channel, Simulator, TimerHandle

if TYPE_CHECKING:  # pragma: no cover
    from .network import Network


class DuplicateRequestId(RuntimeError):
    pass


class NoCircuit(KeyError):
    pass


NORMAL = "NORMAL"
EARLY = "EARLY"
MEASURE = "MEASURE"
REQUEST_TYPES = (NORMAL, EARLY, MEASURE)


@dataclass(frozen=True)
class Address:
    locator: str
    identifier: int


@dataclass
class UserRequest:
    """One application request for entangled pairs over a circuit.

    Exactly one of ``pairs`` (count mode) and ``rate`` (measure-directly
    rate mode) must be set; ``window`` is the create-and-keep spacing
    bound and requires a pair count.  ``deadline`` of zero means none.
    """

    request_id: str
    head_end: Address
    tail_end: Address
    request_type: str = NORMAL
    pairs: int | None = None
    deadline: float = 0.0
    rate: float | None = None
    window: float | None = None
    min_fidelity: float = 0.5
    final_state: BellIndex | None = None

    def validate(self) -> None:
        if self.request_type not in REQUEST_TYPES:
            raise ValueError(f"unknown request type {self.request_type!r}")
        if (self.pairs is None) == (self.rate is None):
            raise ValueError("exactly one of pairs and rate must be set")
        if self.pairs is not None and self.pairs < 1:
            raise ValueError("pair count must be positive")
        if self.rate is not None and self.rate <= 0:
            raise ValueError("rate must be positive")
        if self.window is not None and self.pairs is None:
            raise ValueError("a delivery window requires a pair count")
        if self.window is not None and self.window <= 0:
            raise ValueError("window must be positive")
        if self.deadline < 0:
            raise ValueError("deadline must be nonnegative")
        if not 0.0 < self.min_fidelity <= 1.0:
            raise ValueError(f"min_fidelity out of range: {self.min_fidelity}")
        if self.request_type == MEASURE and self.final_state is not None:
            raise ValueError("measured pairs cannot request a delivery state")

    @property
    def is_rate_based(self) -> bool:
        return self.rate is not None


def min_eer(request: UserRequest) -> float:
    """Minimum end-to-end rate implied by a request's class of service."""
    if request.rate is not None:
        return request.rate
    assert request.pairs is not None
    if request.window is not None:
        return request.pairs / request.window
    if request.deadline > 0:
        return request.pairs / request.deadline
    return 0.0


def measure_basis(request_id: str) -> str:
    """Shared measurement basis for a MEASURE request.

    Derived from the request id so both ends agree without any extra
    message field.
    """
    digest = hashlib.sha256(request_id.encode()).digest()
    return BASES[digest[0] % 3]


# -- messages (field sets are part of the wire contract) ------------------


def _fmt_corr(correlator: Correlator | None) -> str:
    if correlator is None:
        return "null"
    return f"{correlator[0]}-{correlator[1]}-{correlator[2]}"


@dataclass
class ForwardMessage:
    circuit_id: str
    request_id: str
    head_end_identifier: int
    tail_end_identifier: int
    request_type: str
    number_of_pairs: int | None
    final_state: BellIndex | None
    rate: float

    def wire(self) -> str:
        state = "null" if self.final_state is None else str(self.final_state)
        pairs = "null" if self.number_of_pairs is None else self.number_of_pairs
        return (
            f"FORWARD circuit={self.circuit_id} request={self.request_id}"
            f" head={self.head_end_identifier} tail={self.tail_end_identifier}"
            f" type={self.request_type} pairs={pairs} final_state={state}"
            f" rate={self.rate:g}"
        )


@dataclass
class CompleteMessage:
    circuit_id: str
    request_id: str
    head_end_identifier: int
    tail_end_identifier: int
    rate: float

    def wire(self) -> str:
        return (
            f"COMPLETE circuit={self.circuit_id} request={self.request_id}"
            f" head={self.head_end_identifier} tail={self.tail_end_identifier}"
            f" rate={self.rate:g}"
        )


@dataclass
class TrackMessage:
    circuit_id: str
    request_id: str
    head_end_identifier: int
    tail_end_identifier: int
    origin_correlator: Correlator
    link_correlator: Correlator
    outcome_state: BellIndex
    epoch: int | None

    def wire(self) -> str:
        epoch = "null" if self.epoch is None else self.epoch
        return (
            f"TRACK circuit={self.circuit_id} request={self.request_id}"
            f" head={self.head_end_identifier} tail={self.tail_end_identifier}"
            f" origin={_fmt_corr(self.origin_correlator)}"
            f" link={_fmt_corr(self.link_correlator)}"
            f" state={self.outcome_state} epoch={epoch}"
        )


@dataclass
class ExpireMessage:
    circuit_id: str
    origin_correlator: Correlator

    def wire(self) -> str:
        return (
            f"EXPIRE circuit={self.circuit_id} origin={_fmt_corr(self.origin_correlator)}"
        )


@dataclass
class SubmitMessage:
    """Tail-submitted user request being forwarded to the head end."""

    circuit_id: str
    request: UserRequest

    def wire(self) -> str:
        return f"SUBMIT circuit={self.circuit_id} request={self.request.request_id}"


@dataclass
class RoutingTableEntry:
    """Per-circuit per-node state installed by signalling."""

    circuit_id: str
    next_downstream: str | None
    next_upstream: str | None
    downstream_label: str | None
    upstream_label: str | None
    downstream_min_fidelity: float | None
    downstream_max_lpr: float | None
    circuit_max_eer: float
    cutoff: float | None


@dataclass
class SwapRecord:
    """Consumed-qubit side of one completed swap, awaiting its TRACK."""

    partner_correlator: Correlator
    partner_state: BellIndex
    outcome: BellIndex


@dataclass
class RequestState:
    request: UserRequest
    accepted_at: float
    min_eer: float
    delivered: int = 0
    outstanding: int = 0
    completed: bool = False
    completed_at: float | None = None
    first_delivery_at: float | None = None
    last_delivery_at: float | None = None
    _sequence: int = 0

    def next_sequence(self) -> int:
        self._sequence += 1
        return self._sequence

    @property
    def wants_more(self) -> bool:
        if self.completed:
            return False
        if self.request.pairs is None:
            return True
        return self.delivered + self.outstanding < self.request.pairs


@dataclass(frozen=True)
class Epoch:
    epoch_id: int
    request_ids: tuple[str, ...]


class Demultiplexer:
    """Symmetric pair-to-request assignment.

    Both ends run the same function of (epoch, per-epoch pair ordinal):
    round robin over the epoch's still-wanting requests.  Inconsistent
    decisions are possible around discards and are repaired by the
    cross-check at delivery time.
    """

    def __init__(self):
        self._ordinals: dict[int, int] = {}

    def next_request(
        self, epoch: Epoch, states: dict[str, RequestState]
    ) -> RequestState | None:
        eligible = [
            states[rid]
            for rid in epoch.request_ids
            if rid in states and states[rid].wants_more
        ]
        if not eligible:
            return None
        ordinal = self._ordinals.get(epoch.epoch_id, 0)
        self._ordinals[epoch.epoch_id] = ordinal + 1
        return eligible[ordinal % len(eligible)]

    @staticmethod
    def cross_check(local: UserRequest, msg: TrackMessage) -> bool:
        return (
            msg.request_id == local.request_id
            and msg.head_end_identifier == local.head_end.identifier
            and msg.tail_end_identifier == local.tail_end.identifier
        )


@dataclass
class SubmitResult:
    status: str  # accepted | rejected | delayed
    reason: str = ""
    retry_at: float | None = None


@dataclass
class InTransit:
    request_id: str
    kind: str  # request type at claim time
    qubit: Qubit | None  # None once measured or handed off early
    epoch_id: int | None = None  # head only: epoch announced on the TRACK
    basis: str | None = None


# -- state machines --------------------------------------------------------


class _CircuitNodeBase:
    """Wiring shared by every role: channels, link handles, counters."""

    role = "?"

    def __init__(self, sim: Simulator, net: "Network", node_id: str, entry: RoutingTableEntry):
        self.sim = sim
        self.net = net
        self.node_id = node_id
        self.entry = entry
        self.circuit_id = entry.circuit_id
        self.up_channel: Channel | None = None
        self.down_channel: Channel | None = None
        self.downstream_link: LinkProcess | None = None
        self.upstream_link: LinkProcess | None = None
        self.counters: Counter = Counter()
        self.swaps = 0
        self.discards = 0

    def send_downstream(self, message) -> None:
        assert self.down_channel is not None
        self.down_channel.send(self.node_id, message)

    def send_upstream(self, message) -> None:
        assert self.up_channel is not None
        self.up_channel.send(self.node_id, message)

    def on_message(self, message, from_upstream: bool) -> None:
        if isinstance(message, TrackMessage):
            self.on_track(message, from_upstream)
        elif isinstance(message, ExpireMessage):
            self.on_expire(message, from_upstream)
        elif isinstance(message, ForwardMessage):
            self.on_forward(message)
        elif isinstance(message, CompleteMessage):
            self.on_complete(message)
        elif isinstance(message, SubmitMessage):
            self.on_submit(message)
        else:  # pragma: no cover
            raise TypeError(f"unexpected message {message!r}")

    # Role-specific handlers; intermediates forward, ends consume.
    def on_track(self, msg: TrackMessage, from_upstream: bool) -> None:
        raise NotImplementedError

    def on_expire(self, msg: ExpireMessage, from_upstream: bool) -> None:
        raise NotImplementedError

    def on_forward(self, msg: ForwardMessage) -> None:
        raise NotImplementedError

    def on_complete(self, msg: CompleteMessage) -> None:
        raise NotImplementedError

    def on_submit(self, msg: SubmitMessage) -> None:
        raise NotImplementedError

    def on_link_pair(self, qubit: Qubit, label: str) -> None:
        raise NotImplementedError

    def _update_downstream_link(self, aggregate_rate: float) -> None:
        """Scale the downstream link request to the circuit's needed share."""
        if self.downstream_link is None:
            return
        entry = self.entry
        assert entry.downstream_label and entry.downstream_max_lpr is not None
        share = min(1.0, aggregate_rate / entry.circuit_max_eer) if entry.circuit_max_eer else 0.0
        self.downstream_link.register_request(
            entry.downstream_label,
            self.circuit_id,
            entry.downstream_min_fidelity or 0.0,
            entry.downstream_max_lpr * share,
        )

    def teardown(self) -> None:
        pass


class IntermediateNode(_CircuitNodeBase):
    """Swap rules: LINK, TRACK and expiry handling at a repeater."""

    role = "intermediate"

    def __init__(self, sim, net, node_id, entry):
        super().__init__(sim, net, node_id, entry)
        self.up_queue: deque[Qubit] = deque()
        self.down_queue: deque[Qubit] = deque()
        self.up_track: dict[Correlator, TrackMessage] = {}
        self.down_track: dict[Correlator, TrackMessage] = {}
        self.up_swap_records: dict[Correlator, SwapRecord] = {}
        self.down_swap_records: dict[Correlator, SwapRecord] = {}
        self.up_expire_records: dict[Correlator, float] = {}
        self.down_expire_records: dict[Correlator, float] = {}
        self.timers: dict[Correlator, TimerHandle] = {}

    # -- LINK rule ------------------------------------------------------

    def on_link_pair(self, qubit: Qubit, label: str) -> None:
        from_upstream = label == self.entry.upstream_label
        queue = self.up_queue if from_upstream else self.down_queue
        queue.append(qubit)
        if self.entry.cutoff is not None and self.entry.cutoff > 0:
            self.timers[qubit.correlator] = self.sim.start_timer(
                self.node_id,
                qubit.correlator,
                self.entry.cutoff,
                lambda: self._on_cutoff(qubit, from_upstream),
            )
        self._try_swap()

    def _pop_oldest(self, queue: deque[Qubit]) -> Qubit | None:
        while queue:
            qubit = queue.popleft()
            if not qubit.released:
                return qubit
        return None

    def _try_swap(self) -> None:
        while self.up_queue and self.down_queue:
            q_up = self._pop_oldest(self.up_queue)
            q_down = self._pop_oldest(self.down_queue)
            if q_up is None or q_down is None:
                if q_up is not None:
                    self.up_queue.appendleft(q_up)
                if q_down is not None:
                    self.down_queue.appendleft(q_down)
                return
            self._cancel_timer(q_up.correlator)
            self._cancel_timer(q_down.correlator)
            outcome, _ = entanglement_swap(
                self.sim, self.node_id, q_up, q_down, self.net.oracle,
                self.net.hardware.gate_werner,
            )
            self.swaps += 1
            self.net.note_swap(self.circuit_id)
            # Each direction independently: a waiting TRACK moves on now,
            # otherwise a swap record waits for it.
            track = self.up_track.pop(q_up.correlator, None)
            if track is not None:
                track.link_correlator = q_down.correlator
                track.outcome_state = combine_bell(
                    track.outcome_state, q_down.pair.reported_state, outcome
                )
                self.send_downstream(track)
                # The listing clears expire records here; only the consumed
                # correlator could ever be stale, so clear exactly that one.
                self.up_expire_records.pop(q_up.correlator, None)
            else:
                self.up_swap_records[q_up.correlator] = SwapRecord(
                    q_down.correlator, q_down.pair.reported_state, outcome
                )
            track = self.down_track.pop(q_down.correlator, None)
            if track is not None:
                track.link_correlator = q_up.correlator
                track.outcome_state = combine_bell(
                    track.outcome_state, q_up.pair.reported_state, outcome
                )
                self.send_upstream(track)
                self.down_expire_records.pop(q_down.correlator, None)
            else:
                self.down_swap_records[q_down.correlator] = SwapRecord(
                    q_up.correlator, q_up.pair.reported_state, outcome
                )

    def _cancel_timer(self, correlator: Correlator) -> None:
        handle = self.timers.pop(correlator, None)
        if handle is not None:
            handle.cancel()

    # -- TRACK rule -----------------------------------------------------

    def on_track(self, msg: TrackMessage, from_upstream: bool) -> None:
        if from_upstream:
            records, expire_records, buffer = (
                self.up_swap_records, self.up_expire_records, self.up_track,
            )
        else:
            records, expire_records, buffer = (
                self.down_swap_records, self.down_expire_records, self.down_track,
            )
        record = records.pop(msg.link_correlator, None)
        if record is not None:
            msg.link_correlator = record.partner_correlator
            msg.outcome_state = combine_bell(
                msg.outcome_state, record.partner_state, record.outcome
            )
            if from_upstream:
                self.send_downstream(msg)
            else:
                self.send_upstream(msg)
        elif msg.link_correlator in expire_records:
            del expire_records[msg.link_correlator]
            expire = ExpireMessage(self.circuit_id, msg.origin_correlator)
            # Back toward the TRACK's origin end node: the head end for
            # downstream-travelling chains, the tail end otherwise.
            if from_upstream:
                self.send_upstream(expire)
            else:
                self.send_downstream(expire)
        else:
            buffer[msg.link_correlator] = msg

    # -- expiry rule -----------------------------------------------------

    def _on_cutoff(self, qubit: Qubit, from_upstream: bool) -> None:
        if qubit.released:
            return
        self.timers.pop(qubit.correlator, None)
        queue = self.up_queue if from_upstream else self.down_queue
        try:
            queue.remove(qubit)
        except ValueError:
            pass
        discard_qubit(self.sim, qubit, self.net.oracle)
        self.discards += 1
        self.net.note_discard(self.circuit_id)
        buffer = self.up_track if from_upstream else self.down_track
        track = buffer.pop(qubit.correlator, None)
        if track is not None:
            expire = ExpireMessage(self.circuit_id, track.origin_correlator)
            if from_upstream:
                self.send_upstream(expire)
            else:
                self.send_downstream(expire)
        else:
            records = self.up_expire_records if from_upstream else self.down_expire_records
            records[qubit.correlator] = self.sim.now

    # -- pass-through ----------------------------------------------------

    def on_expire(self, msg: ExpireMessage, from_upstream: bool) -> None:
        if from_upstream:
            self.send_downstream(msg)
        else:
            self.send_upstream(msg)

    def on_forward(self, msg: ForwardMessage) -> None:
        self._update_downstream_link(msg.rate)
        self.send_downstream(msg)

    def on_complete(self, msg: CompleteMessage) -> None:
        self._update_downstream_link(msg.rate)
        self.send_downstream(msg)

    def on_submit(self, msg: SubmitMessage) -> None:
        self.send_upstream(msg)

    def teardown(self) -> None:
        for handle in self.timers.values():
            handle.cancel()
        self.timers.clear()
        for queue in (self.up_queue, self.down_queue):
            for qubit in list(queue):
                if not qubit.released:
                    release_qubit(qubit)
            queue.clear()
        self.up_track.clear()
        self.down_track.clear()
        self.up_swap_records.clear()
        self.down_swap_records.clear()
        self.up_expire_records.clear()
        self.down_expire_records.clear()


class _EndpointBase(_CircuitNodeBase):
    """Shared head/tail machinery: demux, in-transit pairs, deliveries."""

    def __init__(self, sim, net, node_id, entry):
        super().__init__(sim, net, node_id, entry)
        self.requests: dict[str, RequestState] = {}
        self.epochs: dict[int, Epoch] = {0: Epoch(0, ())}
        self.newest_epoch_id = 0
        self.active_epoch_id = 0
        self.demux = Demultiplexer()
        self.in_transit: dict[Correlator, InTransit] = {}
        self.unassigned: dict[Correlator, Qubit] = {}

    # Both identifiers below are fixed per circuit in this artifact: one
    # communication end-point per circuit end.
    @property
    def local_identifier(self) -> int:
        raise NotImplementedError

    def _advance_epoch(self) -> None:
        active = tuple(
            rid for rid, rs in self.requests.items() if not rs.completed
        )
        self.newest_epoch_id += 1
        self.epochs[self.newest_epoch_id] = Epoch(self.newest_epoch_id, active)

    def _activate_epoch(self, epoch_id: int | None) -> None:
        if epoch_id is not None and epoch_id > self.active_epoch_id:
            self.active_epoch_id = epoch_id

    def _claim(self, qubit: Qubit) -> RequestState | None:
        claimed = self.demux.next_request(self.epochs[self.active_epoch_id], self.requests)
        # An exhausted or empty active epoch can never claim anything, so
        # fast-forwarding to the next usable one is safe at both ends and
        # bootstraps the very first request.
        while claimed is None and self.active_epoch_id < self.newest_epoch_id:
            self.active_epoch_id += 1
            claimed = self.demux.next_request(self.epochs[self.active_epoch_id], self.requests)
        if claimed is None:
            self.counters["no_active_request"] += 1
            self.unassigned[qubit.correlator] = qubit
            return None
        claimed.outstanding += 1
        return claimed

    def _build_track(self, request: UserRequest, qubit: Qubit, epoch: int | None) -> TrackMessage:
        return TrackMessage(
            circuit_id=self.circuit_id,
            request_id=request.request_id,
            head_end_identifier=request.head_end.identifier,
            tail_end_identifier=request.tail_end.identifier,
            origin_correlator=qubit.correlator,
            link_correlator=qubit.correlator,
            outcome_state=qubit.pair.reported_state,
            epoch=epoch,
        )

    def _claim_kind_actions(self, rs: RequestState, qubit: Qubit, transit: InTransit) -> None:
        if rs.request.request_type == MEASURE:
            transit.basis = measure_basis(rs.request.request_id)
            measure_pair_end(self.sim, qubit, transit.basis, self.net.oracle)
            transit.qubit = qubit  # consumed; kept for the outcome read
        elif rs.request.request_type == EARLY:
            release_qubit(qubit)
            self.net.deliver(
                node=self.node_id,
                identifier=self.local_identifier,
                circuit_id=self.circuit_id,
                request_id=rs.request.request_id,
                sequence=0,
                kind="early_qubit",
                state=None,
                qubit=qubit,
            )
            transit.qubit = qubit

    # -- TRACK delivery (Algorithms 2 and 5) ------------------------------

    def on_track(self, msg: TrackMessage, from_upstream: bool) -> None:
        transit = self.in_transit.pop(msg.link_correlator, None)
        if transit is None:
            self._refuse_unclaimed(msg, from_upstream)
            return
        local = self.requests[transit.request_id].request
        final_rid = transit.request_id
        if not self.demux.cross_check(local, msg):
            self.counters["cross_check_mismatch"] += 1
            final_rid = self._resolve_mismatch(transit, msg)
            if final_rid is None:
                return
        self.requests[transit.request_id].outstanding -= 1
        rs = self.requests[final_rid]
        self._deliver_confirmed(rs, transit, msg)

    def _refuse_unclaimed(self, msg: TrackMessage, from_upstream: bool) -> None:
        """No local claim for this pair: free it and expire the other end."""
        qubit = self.unassigned.pop(msg.link_correlator, None)
        if qubit is None:
            # EXPIRE or a cross-check already consumed it; duplicate TRACKs
            # would be a transport bug.
            self.counters["unknown_correlator"] += 1
            return
        release_qubit(qubit)
        self.counters["refused_unclaimed"] += 1
        expire = ExpireMessage(self.circuit_id, msg.origin_correlator)
        if from_upstream:
            self.send_upstream(expire)
        else:
            self.send_downstream(expire)

    def _resolve_mismatch(self, transit: InTransit, msg: TrackMessage) -> str | None:
        """Cross-check failed: repair or drop depending on request type."""
        raise NotImplementedError

    def _drop_pair(self, transit: InTransit) -> None:
        self.requests[transit.request_id].outstanding -= 1
        if transit.kind == NORMAL and transit.qubit is not None:
            release_qubit(transit.qubit)
        elif transit.kind == EARLY:
            self._notify_failure(transit)
        self.counters["cross_check_drop"] += 1

    def _notify_failure(self, transit: InTransit) -> None:
        self.net.deliver(
            node=self.node_id,
            identifier=self.local_identifier,
            circuit_id=self.circuit_id,
            request_id=transit.request_id,
            sequence=0,
            kind="early_failure",
            state=None,
            qubit=transit.qubit,
        )

    def _deliver_confirmed(self, rs: RequestState, transit: InTransit, msg: TrackMessage) -> None:
        state = msg.outcome_state
        qubit = transit.qubit
        assert qubit is not None
        if transit.kind == NORMAL and self.net.delivery_filter is not None:
            if not self.net.delivery_filter(qubit, self.sim.now):
                release_qubit(qubit)
                self.counters["filter_discard"] += 1
                self.net.note_discard(self.circuit_id)
                return
        if rs.request.final_state is not None:
            state = self._apply_final_state(rs.request, transit, msg)
        sequence = rs.next_sequence()
        kind = {NORMAL: "qubit", EARLY: "early_confirm", MEASURE: "outcome"}[transit.kind]
        outcome = None
        if transit.kind == NORMAL:
            release_qubit(qubit)
        elif transit.kind == MEASURE:
            outcome = self.net.oracle.measured_outcome(qubit)
        self.net.deliver(
            node=self.node_id,
            identifier=self.local_identifier,
            circuit_id=self.circuit_id,
            request_id=rs.request.request_id,
            sequence=sequence,
            kind=kind,
            state=state,
            qubit=qubit,
            outcome=outcome,
            basis=transit.basis,
        )
        rs.delivered += 1
        if rs.first_delivery_at is None:
            rs.first_delivery_at = self.sim.now
        rs.last_delivery_at = self.sim.now
        self._after_delivery(rs, transit, msg)

    def _apply_final_state(self, request: UserRequest, transit: InTransit, msg: TrackMessage) -> BellIndex:
        """Announce the requested state; the physics happens at the head.

        Pairs that already left custody (EARLY) are announced in their
        tracked state and the application corrects them itself.
        """
        if transit.kind == EARLY:
            return msg.outcome_state
        return request.final_state  # type: ignore[return-value]

    def _after_delivery(self, rs: RequestState, transit: InTransit, msg: TrackMessage) -> None:
        raise NotImplementedError

    # -- EXPIRE rule (Algorithms 3 and 6) ---------------------------------

    def on_expire(self, msg: ExpireMessage, from_upstream: bool) -> None:
        transit = self.in_transit.pop(msg.origin_correlator, None)
        if transit is not None:
            self.requests[transit.request_id].outstanding -= 1
            if transit.kind == NORMAL and transit.qubit is not None:
                release_qubit(transit.qubit)
            elif transit.kind == EARLY:
                self._notify_failure(transit)
            self.counters["expired_pairs"] += 1
            return
        qubit = self.unassigned.pop(msg.origin_correlator, None)
        if qubit is not None:
            release_qubit(qubit)
            return
        self.counters["expire_noop"] += 1

    def teardown(self) -> None:
        for transit in self.in_transit.values():
            if transit.kind == NORMAL and transit.qubit is not None:
                release_qubit(transit.qubit)
        self.in_transit.clear()
        for qubit in self.unassigned.values():
            release_qubit(qubit)
        self.unassigned.clear()


class HeadEndNode(_EndpointBase):
    """Head-end rules: policing, FORWARD/COMPLETE origination, epochs."""

    role = "head"

    def __init__(self, sim, net, node_id, entry, identifier: int = 0):
        super().__init__(sim, net, node_id, entry)
        self.identifier = identifier
        self.delayed: list[UserRequest] = []
        self.rejected: list[str] = []

    @property
    def local_identifier(self) -> int:
        return self.identifier

    # -- request lifecycle -------------------------------------------------

    def submit_request(self, request: UserRequest) -> SubmitResult:
        request.validate()
        if request.request_id in self.requests or any(
            r.request_id == request.request_id for r in self.delayed
        ):
            raise DuplicateRequestId(request.request_id)
        needed = min_eer(request)
        if needed > self.entry.circuit_max_eer:
            self.rejected.append(request.request_id)
            return SubmitResult("rejected", "minimum rate exceeds circuit capacity")
        if self._active_eer() + needed > self.entry.circuit_max_eer:
            self.delayed.append(request)
            return SubmitResult("delayed", "waiting for capacity", self._retry_estimate())
        self._accept(request)
        return SubmitResult("accepted")

    def cancel_request(self, request_id: str) -> None:
        rs = self.requests.get(request_id)
        if rs is not None and not rs.completed:
            self._complete_request(rs, "cancelled")

    def _active_eer(self) -> float:
        return sum(rs.min_eer for rs in self.requests.values() if not rs.completed)

    def _retry_estimate(self) -> float | None:
        remaining = 0.0
        for rs in self.requests.values():
            if rs.completed:
                continue
            if rs.request.pairs is None:
                return None  # blocked behind an open-ended rate request
            remaining += rs.request.pairs - rs.delivered
        if self.entry.circuit_max_eer <= 0:
            return None
        return self.sim.now + remaining / self.entry.circuit_max_eer

    def _accept(self, request: UserRequest) -> None:
        rs = RequestState(request, self.sim.now, min_eer(request))
        self.requests[request.request_id] = rs
        self._advance_epoch()
        self.counters["requests_accepted"] += 1
        if request.deadline > 0:
            self.sim.start_timer(
                self.node_id,
                f"deadline:{request.request_id}",
                request.deadline,
                lambda: self._on_deadline(request.request_id),
            )
        forward = ForwardMessage(
            circuit_id=self.circuit_id,
            request_id=request.request_id,
            head_end_identifier=request.head_end.identifier,
            tail_end_identifier=request.tail_end.identifier,
            request_type=request.request_type,
            number_of_pairs=request.pairs,
            final_state=request.final_state,
            rate=self._aggregate_rate(),
        )
        self._update_downstream_link(forward.rate)
        self.send_downstream(forward)

    def _aggregate_rate(self) -> float:
        """EER the set of active requests needs from the circuit.

        Any non-rate-based request pins the link at maximum LPR; when only
        rate-based requests are active the links run a matching fraction.
        """
        active = [rs for rs in self.requests.values() if not rs.completed]
        if not active:
            return 0.0
        if any(not rs.request.is_rate_based for rs in active):
            return self.entry.circuit_max_eer
        return sum(rs.request.rate or 0.0 for rs in active)

    def _on_deadline(self, request_id: str) -> None:
        rs = self.requests.get(request_id)
        if rs is not None and not rs.completed:
            self.counters["deadline_completions"] += 1
            self._complete_request(rs, "deadline")

    def _complete_request(self, rs: RequestState, reason: str) -> None:
        rs.completed = True
        rs.completed_at = self.sim.now
        self._advance_epoch()
        complete = CompleteMessage(
            circuit_id=self.circuit_id,
            request_id=rs.request.request_id,
            head_end_identifier=rs.request.head_end.identifier,
            tail_end_identifier=rs.request.tail_end.identifier,
            rate=self._aggregate_rate(),
        )
        self._update_downstream_link(complete.rate)
        self.send_downstream(complete)
        self._admit_delayed()

    def _admit_delayed(self) -> None:
        while self.delayed:
            request = self.delayed[0]
            if self._active_eer() + min_eer(request) > self.entry.circuit_max_eer:
                return
            self.delayed.pop(0)
            self._accept(request)

    # -- LINK rule (Algorithm 1) -------------------------------------------

    def on_link_pair(self, qubit: Qubit, label: str) -> None:
        rs = self._claim(qubit)
        if rs is None:
            return
        transit = InTransit(rs.request.request_id, rs.request.request_type, qubit,
                            epoch_id=self.newest_epoch_id)
        self._claim_kind_actions(rs, qubit, transit)
        track = self._build_track(rs.request, qubit, epoch=self.newest_epoch_id)
        self.send_downstream(track)
        self.in_transit[qubit.correlator] = transit

    # -- TRACK rule (Algorithm 2) --------------------------------------------

    def _resolve_mismatch(self, transit: InTransit, msg: TrackMessage) -> str | None:
        # The head end's assignment wins; the tail adopts it on its side.
        if transit.kind == NORMAL:
            return transit.request_id
        if transit.kind == MEASURE:
            if transit.basis == measure_basis(msg.request_id):
                return transit.request_id
            self._drop_pair(transit)
            return None
        self._drop_pair(transit)  # EARLY: only a failure notification works
        return None

    def _apply_final_state(self, request, transit, msg):
        target = request.final_state
        assert target is not None
        if transit.kind == NORMAL and transit.qubit is not None:
            label = pauli_correction_for(msg.outcome_state, target)
            if label != "I":
                self.counters[f"pauli_{label}"] += 1
            self.net.oracle.apply_pauli_correction(transit.qubit, target)
        # EARLY pairs already left custody: the application applies the
        # correction itself from the announced state.
        return target if transit.kind != EARLY else msg.outcome_state

    def _after_delivery(self, rs: RequestState, transit: InTransit, msg: TrackMessage) -> None:
        self._activate_epoch(transit.epoch_id)
        if rs.request.pairs is not None and rs.delivered >= rs.request.pairs and not rs.completed:
            self._complete_request(rs, "complete")

    # -- control messages ---------------------------------------------------

    def on_forward(self, msg: ForwardMessage) -> None:  # pragma: no cover
        raise AssertionError("head end originates FORWARD")

    def on_complete(self, msg: CompleteMessage) -> None:  # pragma: no cover
        raise AssertionError("head end originates COMPLETE")

    def on_submit(self, msg: SubmitMessage) -> None:
        try:
            self.submit_request(msg.request)
        except (DuplicateRequestId, ValueError):
            self.counters["forwarded_submit_rejected"] += 1


class TailEndNode(_EndpointBase):
    """Tail-end rules: bookkeeping from FORWARD, no epoch origination."""

    role = "tail"

    def __init__(self, sim, net, node_id, entry, identifier: int = 0):
        super().__init__(sim, net, node_id, entry)
        self.identifier = identifier

    @property
    def local_identifier(self) -> int:
        return self.identifier

    def submit_request(self, request: UserRequest) -> None:
        """Forward a tail-submitted request to the head end."""
        request.validate()
        self.send_upstream(SubmitMessage(self.circuit_id, request))

    def on_forward(self, msg: ForwardMessage) -> None:
        request = UserRequest(
            request_id=msg.request_id,
            head_end=Address(self.entry.next_upstream or "", msg.head_end_identifier),
            tail_end=Address(self.node_id, msg.tail_end_identifier),
            request_type=msg.request_type,
            pairs=msg.number_of_pairs,
            rate=None if msg.number_of_pairs is not None else msg.rate,
            final_state=msg.final_state,
        )
        self.requests[msg.request_id] = RequestState(request, self.sim.now, 0.0)
        self._advance_epoch()

    def on_complete(self, msg: CompleteMessage) -> None:
        rs = self.requests.get(msg.request_id)
        if rs is None:
            self.counters["complete_unknown_request"] += 1
            return
        rs.completed = True
        rs.completed_at = self.sim.now
        self._advance_epoch()

    def on_submit(self, msg: SubmitMessage) -> None:  # pragma: no cover
        raise AssertionError("tail end originates SUBMIT")

    # -- LINK rule (Algorithm 4) -------------------------------------------

    def on_link_pair(self, qubit: Qubit, label: str) -> None:
        rs = self._claim(qubit)
        if rs is None:
            return
        transit = InTransit(rs.request.request_id, rs.request.request_type, qubit)
        self._claim_kind_actions(rs, qubit, transit)
        track = self._build_track(rs.request, qubit, epoch=None)
        self.send_upstream(track)
        self.in_transit[qubit.correlator] = transit

    # -- TRACK rule (Algorithm 5) --------------------------------------------

    def _resolve_mismatch(self, transit: InTransit, msg: TrackMessage) -> str | None:
        # Adopt the head end's decision when it names a request we know.
        if transit.kind in (NORMAL, MEASURE) and msg.request_id in self.requests:
            if transit.kind == MEASURE and transit.basis != measure_basis(msg.request_id):
                self._drop_pair(transit)
                return None
            self.counters["adopted_head_assignment"] += 1
            return msg.request_id
        self._drop_pair(transit)
        return None

    def _after_delivery(self, rs: RequestState, transit: InTransit, msg: TrackMessage) -> None:
        # No Pauli correction and no COMPLETE at the tail; the epoch
        # announced by the head activates once its pair is delivered.
        self._activate_epoch(msg.epoch)
