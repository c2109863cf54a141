"""Stochastic link-pair generation, quantum memories and the state oracle.

The protocol above this layer only ever sees correlators, link labels and
reported Bell states.  The true chain state and its fidelity live in the
:class:`Oracle`, which merges chains on every swap and folds memory decay
whenever an end is consumed.  Tests and the simulation-only baseline
protocol may read the oracle; the protocol module must not.

Pair generation is calibrated as mean delay = base_time_coeff / (1 - F):
the fidelity knob trades directly against rate, and the delay itself is
exponential, so e.g. F = 0.95 with the 0.5 ms default coefficient gives a
10 ms mean with 95% of pairs inside 30 ms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

from .bell import (
    BellIndex,
    combine_bell,
    fidelity_from_werner,
    ideal_anticorrelation,
    measurement_error_rate,
    werner_from_fidelity,
)
from .sim import Simulator

Correlator = tuple[str, str, int]


class MemoryFull(RuntimeError):
    pass


class RequestUnknown(KeyError):
    pass


class QubitExpired(RuntimeError):
    pass


class CircuitMismatch(RuntimeError):
    pass


@dataclass
class HardwareParams:
    """Per-node hardware block shared by a scenario."""

    t_mem: float = 60.0
    gate_werner: float = 0.998
    capacity: int = 2
    processing_delay: float = 0.0
    near_term: bool = False
    move_duration: float = 0.0
    storage_dephasing_per_attempt: float = 1.0
    attempt_duration: float = 1e-3


@dataclass
class LinkConfig:
    endpoint_a: str
    endpoint_b: str
    length_m: float = 2.0
    base_time_coeff: float = 5e-4
    gate_werner: float = 0.998
    classical_delay: float = 1e-8
    max_lpr: float = 250.0
    attempt_model: str = "exponential"

    @property
    def name(self) -> str:
        return f"{self.endpoint_a}-{self.endpoint_b}"

    def mean_generation_time(self, fidelity: float) -> float:
        if not 0.0 <= fidelity < 1.0:
            raise ValueError(f"link fidelity must be in [0, 1): {fidelity}")
        return self.base_time_coeff / (1.0 - fidelity)


@dataclass(frozen=True)
class PairRecord:
    """Link-layer view of one entangled pair, identical at both ends."""

    correlator: Correlator
    link_label: str
    circuit_id: str
    created_at: float
    fidelity_at_creation: float
    reported_state: BellIndex


class Qubit:
    """One half of a link pair, resident in a node's memory until consumed."""

    __slots__ = ("pair", "node", "memory", "chain", "released")

    def __init__(self, pair: PairRecord, node: str, memory: "QuantumMemory"):
        self.pair = pair
        self.node = node
        self.memory = memory
        self.chain: OracleChain | None = None
        self.released = False

    @property
    def correlator(self) -> Correlator:
        return self.pair.correlator

    def __repr__(self) -> str:
        return f"Qubit({self.pair.correlator} at {self.node})"


class QuantumMemory:
    """Fixed-capacity qubit store for one link end at one node."""

    def __init__(self, node: str, link_name: str, capacity: int, t_mem: float):
        self.node = node
        self.link_name = link_name
        self.capacity = capacity
        self.t_mem = t_mem
        self._slots: dict[Correlator, Qubit] = {}
        self.on_free: list[Callable[[], None]] = []

    @property
    def used(self) -> int:
        return len(self._slots)

    @property
    def free_slots(self) -> int:
        return self.capacity - len(self._slots)

    def allocate(self, qubit: Qubit) -> None:
        if len(self._slots) >= self.capacity:
            raise MemoryFull(f"{self.node}/{self.link_name} is full")
        self._slots[qubit.correlator] = qubit

    def holds(self, correlator: Correlator) -> bool:
        return correlator in self._slots

    def get(self, correlator: Correlator) -> Qubit | None:
        return self._slots.get(correlator)

    def free(self, correlator: Correlator) -> bool:
        qubit = self._slots.pop(correlator, None)
        if qubit is None:
            return False
        qubit.released = True
        for callback in list(self.on_free):
            callback()
        return True

    def qubits(self) -> list[Qubit]:
        return list(self._slots.values())


# -- oracle -------------------------------------------------------------


@dataclass
class DeliveryRecord:
    node: str
    time: float
    request_id: str
    sequence: int
    announced_state: BellIndex | None
    kind: str  # qubit | early_qubit | early_confirm | outcome


@dataclass
class MeasurementRecord:
    node: str
    time: float
    basis: str
    # Outcomes materialize lazily: both ends may be measured before the
    # swaps that connect them have happened, so the joint statistics only
    # exist once the chain is complete.
    outcome: int | None = None


#: Delivery kinds that count as a successful end-to-end delivery.
SUCCESS_KINDS = frozenset({"qubit", "early_confirm", "outcome"})


class OracleChain:
    """Hidden ground truth for one logical pair (possibly spanning swaps)."""

    _next_id = 0

    def __init__(self, true_state: BellIndex, w: float, created_at: float):
        OracleChain._next_id += 1
        self.chain_id = OracleChain._next_id
        self.true_state = true_state
        self.w = w
        self.created_at = created_at
        self.endpoints: dict[str, tuple[Qubit, float]] = {}
        self.broken = False
        self.broken_reason = ""
        self.swap_count = 0
        self.link_pairs = 1
        self.deliveries: list[DeliveryRecord] = []
        self.measurements: dict[str, MeasurementRecord] = {}
        self.merged_into: "OracleChain | None" = None

    @property
    def merged_away(self) -> bool:
        return self.merged_into is not None

    @property
    def fidelity(self) -> float:
        return fidelity_from_werner(self.w)

    def success_deliveries(self) -> list[DeliveryRecord]:
        return [d for d in self.deliveries if d.kind in SUCCESS_KINDS]


class Oracle:
    """Tracks true states and fidelities; invisible to the protocol."""

    def __init__(self, sim: Simulator):
        self.sim = sim
        self.node_t_mem: dict[str, float] = {}
        self.chains: list[OracleChain] = []

    def register_node(self, node: str, t_mem: float) -> None:
        self.node_t_mem[node] = t_mem

    def _decay(self, node: str, dt: float) -> float:
        return math.exp(-dt / self.node_t_mem[node])

    @staticmethod
    def _resolve(chain: OracleChain | None) -> OracleChain:
        assert chain is not None
        while chain.merged_into is not None:
            chain = chain.merged_into
        return chain

    def new_link_pair(
        self, qubit_a: Qubit, qubit_b: Qubit, fidelity: float, true_state: BellIndex, now: float
    ) -> OracleChain:
        chain = OracleChain(true_state, werner_from_fidelity(fidelity), now)
        chain.endpoints[qubit_a.node] = (qubit_a, now)
        chain.endpoints[qubit_b.node] = (qubit_b, now)
        qubit_a.chain = chain
        qubit_b.chain = chain
        self.chains.append(chain)
        return chain

    def _fold_endpoint(self, chain: OracleChain, qubit: Qubit, now: float) -> None:
        entry = chain.endpoints.get(qubit.node)
        if entry is None or entry[0] is not qubit:
            return
        _, since = chain.endpoints.pop(qubit.node)
        chain.w *= self._decay(qubit.node, now - since)

    def swap(
        self, q_first: Qubit, q_second: Qubit, outcome: BellIndex, now: float, gate_werner: float
    ) -> OracleChain:
        a = self._resolve(q_first.chain)
        b = self._resolve(q_second.chain)
        self._fold_endpoint(a, q_first, now)
        self._fold_endpoint(b, q_second, now)
        merged = OracleChain(
            combine_bell(a.true_state, b.true_state, outcome),
            a.w * b.w * gate_werner,
            min(a.created_at, b.created_at),
        )
        merged.endpoints.update(a.endpoints)
        merged.endpoints.update(b.endpoints)
        merged.broken = a.broken or b.broken
        merged.broken_reason = a.broken_reason or b.broken_reason
        merged.swap_count = a.swap_count + b.swap_count + 1
        merged.link_pairs = a.link_pairs + b.link_pairs
        merged.deliveries = a.deliveries + b.deliveries
        merged.measurements = {**a.measurements, **b.measurements}
        for qubit, _ in merged.endpoints.values():
            qubit.chain = merged
        a.merged_into = merged
        b.merged_into = merged
        self.chains.append(merged)
        return merged

    def mark_broken(self, qubit: Qubit, now: float, reason: str) -> None:
        chain = self._resolve(qubit.chain)
        self._fold_endpoint(chain, qubit, now)
        chain.broken = True
        chain.broken_reason = chain.broken_reason or reason

    def fidelity_if_consumed_now(self, qubit: Qubit, now: float) -> float:
        """Simulation-only peek used by the baseline comparison protocol."""
        chain = self._resolve(qubit.chain)
        w = chain.w
        for node, (_, since) in chain.endpoints.items():
            w *= self._decay(node, now - since)
        return fidelity_from_werner(w)

    def apply_pauli_correction(self, qubit: Qubit, target: BellIndex) -> None:
        self._resolve(qubit.chain).true_state = target

    def record_delivery(
        self,
        qubit: Qubit,
        now: float,
        request_id: str,
        sequence: int,
        announced_state: BellIndex | None,
        kind: str,
    ) -> OracleChain:
        chain = self._resolve(qubit.chain)
        self._fold_endpoint(chain, qubit, now)
        chain.deliveries.append(
            DeliveryRecord(qubit.node, now, request_id, sequence, announced_state, kind)
        )
        return chain

    def record_measurement(self, qubit: Qubit, basis: str, now: float) -> None:
        """Consume one end in ``basis``; the outcome bit stays latent."""
        chain = self._resolve(qubit.chain)
        self._fold_endpoint(chain, qubit, now)
        chain.measurements[qubit.node] = MeasurementRecord(qubit.node, now, basis)

    def measured_outcome(self, qubit: Qubit) -> int:
        """Outcome bit for a previously measured end.

        Materializes the joint statistics on first read: the first end is
        a uniform bit (Werner marginals are maximally mixed), the second
        correlates through the chain's true state and is flipped with
        probability QBER(fidelity).  Reads happen only after the tracking
        message arrived, i.e. after every swap on the chain completed.
        """
        chain = self._resolve(qubit.chain)
        record = chain.measurements[qubit.node]
        if record.outcome is None:
            records = sorted(chain.measurements.values(), key=lambda r: (r.time, r.node))
            rng = self.sim.rng(f"measout:{records[0].node}")
            records[0].outcome = rng.randrange(2)
            if len(records) == 2:
                second = records[1]
                if second.basis != records[0].basis:
                    second.outcome = rng.randrange(2)
                else:
                    qber = measurement_error_rate(fidelity_from_werner(chain.w))
                    flip = 1 if rng.random() < qber else 0
                    second.outcome = (
                        records[0].outcome
                        ^ ideal_anticorrelation(chain.true_state, second.basis)
                        ^ flip
                    )
        assert record.outcome is not None
        return record.outcome

    def chain_of(self, qubit: Qubit) -> OracleChain:
        return self._resolve(qubit.chain)

    def dephase_stored(self, qubits: list[Qubit], factor: float) -> None:
        for qubit in qubits:
            if qubit.chain is not None and not qubit.released:
                self._resolve(qubit.chain).w *= factor

    # -- audits (test harness) ------------------------------------------

    def completed_chains(self) -> list[OracleChain]:
        return [c for c in self.chains if not c.merged_away and c.success_deliveries()]

    def half_delivered_chains(self) -> list[OracleChain]:
        bad = []
        for chain in self.chains:
            if chain.merged_away:
                continue
            successes = chain.success_deliveries()
            if len(successes) == 1 and not chain.endpoints:
                bad.append(chain)
            elif len(successes) > 2:
                bad.append(chain)
        return bad

    def broken_chain_deliveries(self) -> list[OracleChain]:
        return [c for c in self.chains if c.broken and c.success_deliveries()]


# -- physical operations -------------------------------------------------


def entanglement_swap(
    sim: Simulator, node: str, q_up: Qubit, q_down: Qubit, oracle: Oracle, gate_werner: float
) -> tuple[BellIndex, OracleChain]:
    """Consume two local qubits; returns the announced two-bit outcome.

    The outcome is uniform over the four Bell labels, the swap itself is
    instantaneous, and gate noise enters as a single Werner multiplier.
    """
    if q_up.released:
        raise QubitExpired(f"upstream qubit {q_up.correlator} already discarded")
    if q_down.released:
        raise QubitExpired(f"downstream qubit {q_down.correlator} already discarded")
    if q_up.pair.circuit_id != q_down.pair.circuit_id:
        raise CircuitMismatch(
            f"{q_up.pair.link_label} and {q_down.pair.link_label} belong to different circuits"
        )
    outcome = BellIndex(sim.rng(f"swap:{node}").randrange(4))
    q_up.memory.free(q_up.correlator)
    q_down.memory.free(q_down.correlator)
    chain = oracle.swap(q_up, q_down, outcome, sim.now, gate_werner)
    return outcome, chain


def measure_pair_end(sim: Simulator, qubit: Qubit, basis: str, oracle: Oracle) -> None:
    """Consume a resident pair end in ``basis``.

    The outcome bit is read later through ``oracle.measured_outcome``;
    protocol-wise results are withheld until tracking confirms the pair,
    and by then the joint statistics are fully determined.
    """
    if qubit.released:
        raise QubitExpired(f"qubit {qubit.correlator} already discarded")
    qubit.memory.free(qubit.correlator)
    oracle.record_measurement(qubit, basis, sim.now)


def discard_qubit(sim: Simulator, qubit: Qubit, oracle: Oracle, reason: str = "cutoff") -> None:
    if qubit.released:
        return
    qubit.memory.free(qubit.correlator)
    oracle.mark_broken(qubit, sim.now, reason)


def release_qubit(qubit: Qubit) -> None:
    """Hand a qubit out of network custody without breaking its chain."""
    if qubit.released:
        return
    qubit.memory.free(qubit.correlator)


# -- link-pair generation ------------------------------------------------


@dataclass
class LinkRequest:
    label: str
    circuit_id: str
    min_fidelity: float
    lpr: float

    @property
    def active(self) -> bool:
        return self.lpr > 0.0


class NearTermCoordinator:
    """Single-communication-qubit constraints for near-future hardware.

    At most one link may generate per node at a time, a fresh pair must be
    moved into storage before the node is usable again, and every
    generation attempt dephases the qubits already stored at the two link
    ends.
    """

    def __init__(self, sim: Simulator, hardware: HardwareParams):
        self.sim = sim
        self.hardware = hardware
        self._busy: dict[str, bool] = {}
        self._waiters: list[Callable[[], None]] = []

    def add_waiter(self, kick: Callable[[], None]) -> None:
        self._waiters.append(kick)

    def nodes_free(self, *nodes: str) -> bool:
        return not any(self._busy.get(n, False) for n in nodes)

    def acquire(self, *nodes: str) -> None:
        for n in nodes:
            self._busy[n] = True

    def release_after_move(self, *nodes: str) -> None:
        def release() -> None:
            for n in nodes:
                self._busy[n] = False
            for kick in self._waiters:
                kick()

        if self.hardware.move_duration > 0:
            self.sim.schedule_after(
                self.hardware.move_duration, release, kind="timer", detail="move-to-storage"
            )
        else:
            release()

    def attempts_for(self, duration: float) -> int:
        return max(1, math.ceil(duration / self.hardware.attempt_duration))


class LinkProcess:
    """Serial pair generator for one physical link.

    Active circuit labels share the link through an externally supplied
    scheduler (deficit round robin in time units); each granted attempt
    draws an exponential generation time whose mean is the larger of the
    physical limit base_time_coeff/(1 - F) and the pacing 1/LPR.
    """

    def __init__(
        self,
        sim: Simulator,
        config: LinkConfig,
        memory_a: QuantumMemory,
        memory_b: QuantumMemory,
        oracle: Oracle,
        scheduler: Any,
        near_term: NearTermCoordinator | None = None,
    ):
        self.sim = sim
        self.config = config
        self.memory_a = memory_a
        self.memory_b = memory_b
        self.oracle = oracle
        self.scheduler = scheduler
        self.near_term = near_term
        self.requests: dict[str, LinkRequest] = {}
        self.busy = False
        self._sequence = 0
        self._rng_time = sim.rng(f"linkgen:{config.name}")
        self._rng_state = sim.rng(f"linkstate:{config.name}")
        self.deliver_handlers: dict[str, Callable[[Qubit, str], None]] = {}
        self.pairs_generated = 0
        self.pairs_dropped = 0
        self.time_generating: dict[str, float] = {}
        memory_a.on_free.append(self.kick)
        memory_b.on_free.append(self.kick)
        if near_term is not None:
            near_term.add_waiter(self.kick)

    # -- request management ---------------------------------------------

    def register_request(
        self, label: str, circuit_id: str, min_fidelity: float, lpr: float
    ) -> None:
        request = self.requests.get(label)
        if request is None:
            request = LinkRequest(label, circuit_id, min_fidelity, lpr)
            self.requests[label] = request
            self.scheduler.add(label, max(lpr, 0.0))
        else:
            request.min_fidelity = min_fidelity
            request.lpr = lpr
            self.scheduler.set_weight(label, max(lpr, 0.0))
        self.kick()

    def update_rate(self, label: str, lpr: float) -> None:
        request = self.requests.get(label)
        if request is None:
            raise RequestUnknown(label)
        request.lpr = lpr
        self.scheduler.set_weight(label, max(lpr, 0.0))
        self.kick()

    def remove_request(self, label: str) -> None:
        if self.requests.pop(label, None) is not None:
            self.scheduler.remove(label)

    # -- generation loop --------------------------------------------------

    def _memory_available(self) -> bool:
        return self.memory_a.free_slots > 0 and self.memory_b.free_slots > 0

    def _eligible_labels(self) -> list[str]:
        if not self._memory_available():
            return []
        if self.near_term is not None and not self.near_term.nodes_free(
            self.config.endpoint_a, self.config.endpoint_b
        ):
            return []
        return [label for label, req in self.requests.items() if req.active]

    def kick(self) -> None:
        if self.busy:
            return
        labels = self._eligible_labels()
        if not labels:
            return
        label = self.scheduler.next(labels)
        if label is None:
            return
        self._begin(label)

    def _begin(self, label: str) -> None:
        request = self.requests[label]
        mean = self.config.mean_generation_time(request.min_fidelity)
        if request.lpr > 0:
            mean = max(mean, 1.0 / request.lpr)
        duration = self._rng_time.expovariate(1.0 / mean)
        self.busy = True
        if self.near_term is not None:
            self.near_term.acquire(self.config.endpoint_a, self.config.endpoint_b)
        self.scheduler.charge(label, duration)
        self.time_generating[label] = self.time_generating.get(label, 0.0) + duration
        self.sim.schedule_after(
            duration,
            lambda: self._complete(label, duration),
            kind="pair",
            node=self.config.name,
            circuit=request.circuit_id,
            detail=f"label={label}",
        )

    def _complete(self, label: str, duration: float) -> None:
        self.busy = False
        if self.near_term is not None:
            factor = self.near_term.hardware.storage_dephasing_per_attempt
            if factor != 1.0:
                attempts = self.near_term.attempts_for(duration)
                stored = self.memory_a.qubits() + self.memory_b.qubits()
                self.oracle.dephase_stored(stored, factor**attempts)
        request = self.requests.get(label)
        if request is None or not request.active or not self._memory_available():
            self.pairs_dropped += 1
            if self.near_term is not None:
                self.near_term.release_after_move(self.config.endpoint_a, self.config.endpoint_b)
            self.kick()
            return
        reported = BellIndex(self._rng_state.randrange(4))
        self._emit_pair(request, reported, request.min_fidelity)
        if self.near_term is not None:
            self.near_term.release_after_move(self.config.endpoint_a, self.config.endpoint_b)
        self.kick()

    def _emit_pair(self, request: LinkRequest, reported: BellIndex, fidelity: float) -> None:
        self._sequence += 1
        pair = PairRecord(
            correlator=(self.config.endpoint_a, self.config.endpoint_b, self._sequence),
            link_label=request.label,
            circuit_id=request.circuit_id,
            created_at=self.sim.now,
            fidelity_at_creation=fidelity,
            reported_state=reported,
        )
        qubit_a = Qubit(pair, self.config.endpoint_a, self.memory_a)
        qubit_b = Qubit(pair, self.config.endpoint_b, self.memory_b)
        self.memory_a.allocate(qubit_a)
        self.memory_b.allocate(qubit_b)
        self.oracle.new_link_pair(qubit_a, qubit_b, fidelity, reported, self.sim.now)
        self.pairs_generated += 1
        # Both ends learn of the pair at the same instant with the same
        # correlator and label.
        for qubit in (qubit_a, qubit_b):
            handler = self.deliver_handlers.get(qubit.node)
            if handler is not None:
                handler(qubit, request.label)

    # -- test hook ---------------------------------------------------------

    def inject_pair(
        self,
        label: str,
        at_time: float,
        reported_state: BellIndex | None = None,
        fidelity: float | None = None,
    ) -> None:
        """Deliver one pair at an exact time, bypassing the scheduler.

        The label is resolved at emission time so pairs can be staged
        before the FORWARD that registers the link request has propagated.
        """

        def emit() -> None:
            request = self.requests.get(label)
            if request is None:
                raise RequestUnknown(label)
            state = (
                reported_state
                if reported_state is not None
                else BellIndex(self._rng_state.randrange(4))
            )
            self._emit_pair(request, state, fidelity or request.min_fidelity)

        self.sim.schedule(
            at_time,
            emit,
            kind="pair",
            node=self.config.name,
            detail=f"label={label} injected",
        )
