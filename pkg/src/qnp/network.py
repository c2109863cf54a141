"""Runtime assembly: nodes, memories, link processes and installed circuits.

The :class:`Network` owns one simulation's physical state and dispatches
link-pair deliveries and circuit messages to the per-node state machines.
Circuit installation and teardown mechanics live here; the controller in
:mod:`qnp.control` decides what to install.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .bell import BellIndex
from .control import CircuitSpec, LabelCollision, DeficitRoundRobin, Topology
from .physical import (
    HardwareParams,
    LinkProcess,
    NearTermCoordinator,
    Oracle,
    OracleChain,
    QuantumMemory,
    Qubit,
)
from .protocol import (
    HeadEndNode,
    IntermediateNode,
    NoCircuit,
    RoutingTableEntry,
    SubmitResult,
    TailEndNode,
    UserRequest,
)
from .sim import Channel, Simulator


@dataclass
class DeliveryEvent:
    time: float
    node: str
    identifier: int
    circuit_id: str
    request_id: str
    sequence: int
    kind: str
    state: BellIndex | None
    outcome: int | None
    basis: str | None
    chain: OracleChain | None


@dataclass
class CircuitRuntime:
    spec: CircuitSpec
    machines: dict[str, object]
    channels: list[Channel]

    @property
    def head(self) -> HeadEndNode:
        machine = self.machines[self.spec.head]
        assert isinstance(machine, HeadEndNode)
        return machine

    @property
    def tail(self) -> TailEndNode:
        machine = self.machines[self.spec.tail]
        assert isinstance(machine, TailEndNode)
        return machine


class Network:
    """All per-run state: one engine, one topology, installed circuits."""

    def __init__(self, sim: Simulator, topology: Topology, hardware: HardwareParams):
        self.sim = sim
        self.topology = topology
        self.hardware = hardware
        self.oracle = Oracle(sim)
        self.near_term = NearTermCoordinator(sim, hardware) if hardware.near_term else None
        self.memories: dict[tuple[str, str], QuantumMemory] = {}
        self.links: dict[str, LinkProcess] = {}
        self.label_registry: dict[str, dict[str, str]] = {}
        self.circuits: dict[str, CircuitRuntime] = {}
        self.delivery_log: list[DeliveryEvent] = []
        self.delivery_filter: Callable[[Qubit, float], bool] | None = None
        self.swap_counts: dict[str, int] = {}
        self.discard_counts: dict[str, int] = {}
        self.unknown_circuit_drops = 0

        for node in sorted(topology.nodes):
            self.oracle.register_node(node, hardware.t_mem)
        for config in topology.links():
            mem_a = QuantumMemory(config.endpoint_a, config.name, hardware.capacity, hardware.t_mem)
            mem_b = QuantumMemory(config.endpoint_b, config.name, hardware.capacity, hardware.t_mem)
            self.memories[(config.endpoint_a, config.name)] = mem_a
            self.memories[(config.endpoint_b, config.name)] = mem_b
            link = LinkProcess(
                sim, config, mem_a, mem_b, self.oracle, DeficitRoundRobin(), self.near_term
            )
            self.links[config.name] = link
            self.label_registry[config.name] = {}
            for node in (config.endpoint_a, config.endpoint_b):
                link.deliver_handlers[node] = self._link_dispatcher(config.name, node)

    def _link_dispatcher(self, link_name: str, node: str) -> Callable[[Qubit, str], None]:
        def dispatch(qubit: Qubit, label: str) -> None:
            circuit_id = self.label_registry[link_name].get(label)
            runtime = self.circuits.get(circuit_id or "")
            if runtime is None:
                self.unknown_circuit_drops += 1
                return
            runtime.machines[node].on_link_pair(qubit, label)

        return dispatch

    # -- circuit installation -------------------------------------------

    def install_circuit(self, spec: CircuitSpec) -> CircuitRuntime:
        if spec.circuit_id in self.circuits:
            raise ValueError(f"circuit {spec.circuit_id} already installed")
        hops = len(spec.path) - 1
        hop_links = [
            self.topology.link_between(spec.path[i], spec.path[i + 1]) for i in range(hops)
        ]
        for link, label in zip(hop_links, spec.link_labels):
            if label in self.label_registry[link.name]:
                raise LabelCollision(f"label {label} already in use on {link.name}")
        for link, label in zip(hop_links, spec.link_labels):
            self.label_registry[link.name][label] = spec.circuit_id

        machines: dict[str, object] = {}
        for idx, node in enumerate(spec.path):
            entry = RoutingTableEntry(
                circuit_id=spec.circuit_id,
                next_downstream=spec.path[idx + 1] if idx < hops else None,
                next_upstream=spec.path[idx - 1] if idx > 0 else None,
                downstream_label=spec.link_labels[idx] if idx < hops else None,
                upstream_label=spec.link_labels[idx - 1] if idx > 0 else None,
                downstream_min_fidelity=spec.link_fidelities[idx] if idx < hops else None,
                downstream_max_lpr=spec.link_max_lprs[idx] if idx < hops else None,
                circuit_max_eer=spec.circuit_max_eer,
                cutoff=spec.cutoff,
            )
            if idx == 0:
                machines[node] = HeadEndNode(self.sim, self, node, entry)
            elif idx == hops:
                machines[node] = TailEndNode(self.sim, self, node, entry)
            else:
                machines[node] = IntermediateNode(self.sim, self, node, entry)

        # One reliable transport connection per hop for this circuit.
        channels: list[Channel] = []
        for i, link in enumerate(hop_links):
            upstream_node, downstream_node = spec.path[i], spec.path[i + 1]
            channel = Channel(
                self.sim,
                upstream_node,
                downstream_node,
                delay=link.classical_delay,
                processing_delay=self.hardware.processing_delay,
                circuit=spec.circuit_id,
            )
            channel.connect(
                upstream_node,
                lambda m, n=upstream_node: self._dispatch_message(spec.circuit_id, n, m, False),
            )
            channel.connect(
                downstream_node,
                lambda m, n=downstream_node: self._dispatch_message(spec.circuit_id, n, m, True),
            )
            machines[upstream_node].down_channel = channel
            machines[downstream_node].up_channel = channel
            machines[upstream_node].downstream_link = self.links[link.name]
            machines[downstream_node].upstream_link = self.links[link.name]
            channels.append(channel)

        runtime = CircuitRuntime(spec, machines, channels)
        self.circuits[spec.circuit_id] = runtime
        self.swap_counts.setdefault(spec.circuit_id, 0)
        self.discard_counts.setdefault(spec.circuit_id, 0)
        return runtime

    def _dispatch_message(self, circuit_id: str, node: str, message, from_upstream: bool) -> None:
        runtime = self.circuits.get(circuit_id)
        if runtime is None:
            self.unknown_circuit_drops += 1
            return
        runtime.machines[node].on_message(message, from_upstream)

    def teardown_circuit(self, circuit_id: str) -> None:
        runtime = self.circuits.pop(circuit_id, None)
        if runtime is None:
            raise NoCircuit(circuit_id)
        for machine in runtime.machines.values():
            machine.teardown()
        for channel in runtime.channels:
            channel.shut_down()
        spec = runtime.spec
        for i, label in enumerate(spec.link_labels):
            link = self.topology.link_between(spec.path[i], spec.path[i + 1])
            self.links[link.name].remove_request(label)
            self.label_registry[link.name].pop(label, None)

    # -- request entry points ----------------------------------------------

    def circuit(self, circuit_id: str) -> CircuitRuntime:
        runtime = self.circuits.get(circuit_id)
        if runtime is None:
            raise NoCircuit(circuit_id)
        return runtime

    def submit(self, circuit_id: str, request: UserRequest, at_end: str = "head") -> SubmitResult | None:
        runtime = self.circuit(circuit_id)
        if at_end == "head":
            return runtime.head.submit_request(request)
        if at_end == "tail":
            runtime.tail.submit_request(request)
            return None
        raise ValueError(f"at_end must be head or tail, got {at_end!r}")

    # -- bookkeeping ---------------------------------------------------------

    def note_swap(self, circuit_id: str) -> None:
        self.swap_counts[circuit_id] = self.swap_counts.get(circuit_id, 0) + 1

    def note_discard(self, circuit_id: str) -> None:
        self.discard_counts[circuit_id] = self.discard_counts.get(circuit_id, 0) + 1

    def deliver(
        self,
        *,
        node: str,
        identifier: int,
        circuit_id: str,
        request_id: str,
        sequence: int,
        kind: str,
        state: BellIndex | None,
        qubit: Qubit | None,
        outcome: int | None = None,
        basis: str | None = None,
    ) -> None:
        chain: OracleChain | None = None
        if qubit is not None:
            if kind in ("qubit", "early_confirm", "outcome", "early_qubit"):
                chain = self.oracle.record_delivery(
                    qubit, self.sim.now, request_id, sequence, state, kind
                )
            else:
                chain = self.oracle.chain_of(qubit)
        self.delivery_log.append(
            DeliveryEvent(
                self.sim.now, node, identifier, circuit_id, request_id, sequence,
                kind, state, outcome, basis, chain,
            )
        )

    # -- audits ---------------------------------------------------------------

    def occupied_slots(self) -> dict[tuple[str, str], int]:
        return {key: mem.used for key, mem in self.memories.items() if mem.used}

    def successful_deliveries(self) -> list[DeliveryEvent]:
        return [e for e in self.delivery_log if e.kind in ("qubit", "early_confirm", "outcome")]
