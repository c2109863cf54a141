"""Minimal routing and signalling: paths, fidelity budgets, circuit specs.

Routing is deliberately rudimentary: shortest hop count with a
deterministic lexicographic tiebreak, and a worst-case fidelity budget
that assumes every link pair idles exactly one cutoff interval before its
swap.  All of it runs up front in a central controller object; the data
plane only ever sees the routing-table entries it installs.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from .bell import fidelity_from_werner, werner_from_fidelity
from .physical import LinkConfig


class NoPath(RuntimeError):
    pass


class Infeasible(RuntimeError):
    pass


class LabelCollision(RuntimeError):
    pass


class Topology:
    """Undirected node/link graph with end-node flags."""

    def __init__(self):
        self.nodes: dict[str, bool] = {}
        self._links: dict[tuple[str, str], LinkConfig] = {}

    def add_node(self, name: str, end_node: bool = False) -> None:
        self.nodes[name] = end_node

    def add_link(self, config: LinkConfig) -> None:
        for endpoint in (config.endpoint_a, config.endpoint_b):
            if endpoint not in self.nodes:
                raise ValueError(f"link endpoint {endpoint} is not a node")
        self._links[self._key(config.endpoint_a, config.endpoint_b)] = config

    @staticmethod
    def _key(a: str, b: str) -> tuple[str, str]:
        return (a, b) if a <= b else (b, a)

    def link_between(self, a: str, b: str) -> LinkConfig:
        return self._links[self._key(a, b)]

    def links(self) -> list[LinkConfig]:
        return [self._links[key] for key in sorted(self._links)]

    def is_end_node(self, name: str) -> bool:
        return self.nodes.get(name, False)

    def neighbors(self, name: str) -> list[str]:
        out = set()
        for a, b in self._links:
            if a == name:
                out.add(b)
            elif b == name:
                out.add(a)
        return sorted(out)


def compute_path(topology: Topology, src: str, dst: str) -> list[str]:
    """Minimum-hop path, lexicographic node order as the tiebreak."""
    if src == dst:
        raise ValueError("source and destination must differ")
    for name in (src, dst):
        if name not in topology.nodes:
            raise NoPath(f"unknown node {name}")
        if not topology.is_end_node(name):
            raise ValueError(f"{name} is not an end node")
    parents: dict[str, str] = {src: src}
    frontier = deque([src])
    while frontier:
        current = frontier.popleft()
        if current == dst:
            break
        for neighbor in topology.neighbors(current):
            if neighbor not in parents:
                parents[neighbor] = current
                frontier.append(neighbor)
    if dst not in parents:
        raise NoPath(f"no path from {src} to {dst}")
    path = [dst]
    while path[-1] != src:
        path.append(parents[path[-1]])
    path.reverse()
    return path


def budget_fidelities(
    n_links: int, f_e2e: float, cutoff: float, t_mem: float, gate_werner: float
) -> float:
    """Uniform per-link fidelity so the worst case still meets ``f_e2e``.

    Worst case: every link pair is swapped just before its cutoff pops, so
    each of the n link Werner parameters shrinks by exp(-cutoff/t_mem) and
    the n-1 swap gates each cost one ``gate_werner`` factor.
    """
    if n_links < 1:
        raise ValueError("need at least one link")
    w_target = werner_from_fidelity(f_e2e)
    if w_target <= 0.0:
        raise Infeasible(f"end-to-end fidelity {f_e2e} has no usable Werner parameter")
    w_link = (w_target / gate_werner ** (n_links - 1)) ** (1.0 / n_links)
    w_link *= math.exp(cutoff / t_mem)
    if w_link > 1.0 + 1e-12:
        raise Infeasible(
            f"{n_links} links with cutoff {cutoff}s cannot reach fidelity {f_e2e}"
        )
    return fidelity_from_werner(min(w_link, 1.0))


@dataclass(frozen=True)
class CutoffPolicy:
    """How a circuit's cutoff timeout is chosen.

    kind "fidelity_loss": time for a fresh link pair to lose the given
    fraction of its initial fidelity.  kind "generation_window": time by
    which a link generates a pair with the given probability.  kind
    "fixed": explicit seconds.  kind "none": no in-network cutoff at all
    (used by the simulation-only baseline).
    """

    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fidelity_loss", "generation_window", "fixed", "none"):
            raise ValueError(f"unknown cutoff policy {self.kind!r}")


def cutoff_from_policy(
    policy: CutoffPolicy,
    link_fidelity: float,
    mean_pair_time: float,
    t_mem: float,
) -> float | None:
    if policy.kind == "none":
        return None
    if policy.kind == "fixed":
        return policy.value
    if policy.kind == "fidelity_loss":
        fraction = policy.value
        if fraction <= 0.0:
            return 0.0
        w0 = werner_from_fidelity(link_fidelity)
        w_target = werner_from_fidelity(link_fidelity * (1.0 - fraction))
        if w_target <= 0.0:
            raise ValueError("fidelity-loss target below the Werner floor")
        return t_mem * math.log(w0 / w_target)
    # generation_window: exponential quantile of the link delay model
    probability = policy.value
    if not 0.0 < probability < 1.0:
        raise ValueError(f"window probability out of range: {probability}")
    return -mean_pair_time * math.log(1.0 - probability)


@dataclass
class CircuitSpec:
    """Everything signalling installs for one virtual circuit."""

    circuit_id: str
    path: list[str]
    link_labels: list[str]
    link_fidelities: list[float]
    link_max_lprs: list[float]
    circuit_max_eer: float
    cutoff: float | None
    f_e2e: float

    def __post_init__(self):
        hops = len(self.path) - 1
        if hops < 1:
            raise ValueError("path needs at least one link")
        if len(set(self.path)) != len(self.path):
            raise ValueError("path must be simple")
        for name, values in (
            ("link_labels", self.link_labels),
            ("link_fidelities", self.link_fidelities),
            ("link_max_lprs", self.link_max_lprs),
        ):
            if len(values) != hops:
                raise ValueError(f"{name} must have one entry per hop")

    @property
    def head(self) -> str:
        return self.path[0]

    @property
    def tail(self) -> str:
        return self.path[-1]


class DeficitRoundRobin:
    """Deficit round robin in time units.

    Weights are the per-circuit LPRs; ``charge`` debits the actual
    generation time after the fact, so long-run link time per label is
    proportional to its weight: equal-LPR circuits get equal time no
    matter how slow their pairs are, and surplus or shortage is shared
    proportionally.
    """

    def __init__(self, quantum: float = 2e-3):
        self.quantum = quantum
        self._weights: dict[str, float] = {}
        self._deficit: dict[str, float] = {}
        self._order: list[str] = []
        self._cursor = 0

    def add(self, label: str, weight: float) -> None:
        if label in self._weights:
            self.set_weight(label, weight)
            return
        self._weights[label] = weight
        self._deficit[label] = 0.0
        self._order.append(label)

    def set_weight(self, label: str, weight: float) -> None:
        self._weights[label] = weight

    def remove(self, label: str) -> None:
        if label in self._weights:
            del self._weights[label]
            del self._deficit[label]
            self._order.remove(label)

    def charge(self, label: str, cost: float) -> None:
        if label in self._deficit:
            self._deficit[label] -= cost

    def next(self, eligible: list[str]) -> str | None:
        candidates = [l for l in eligible if self._weights.get(l, 0.0) > 0.0]
        if not candidates:
            return None
        max_weight = max(self._weights[l] for l in candidates)
        guard = 0
        while all(self._deficit[l] <= 0.0 for l in candidates):
            for label in candidates:
                self._deficit[label] += self.quantum * self._weights[label] / max_weight
            guard += 1
            if guard > 10_000_000:  # pragma: no cover
                raise RuntimeError("scheduler failed to replenish")
        order = self._order[self._cursor :] + self._order[: self._cursor]
        for label in order:
            if label in candidates and self._deficit[label] > 0.0:
                self._cursor = (self._order.index(label) + 1) % len(self._order)
                return label
        return None  # pragma: no cover


@dataclass
class CircuitPlan:
    spec: CircuitSpec
    mean_pair_times: list[float] = field(default_factory=list)


class Controller:
    """Central path computation plus circuit build/install/teardown."""

    def __init__(self, topology: Topology, t_mem: float, gate_werner: float):
        self.topology = topology
        self.t_mem = t_mem
        self.gate_werner = gate_werner
        self._circuit_count = 0

    def build_circuit(
        self,
        src: str,
        dst: str,
        f_e2e: float,
        cutoff_policy: CutoffPolicy,
        circuit_id: str | None = None,
        max_eer: float | None = None,
    ) -> CircuitSpec:
        """Budget link fidelities and the cutoff as a small fixed point.

        The cutoff policy depends on the link fidelity and the budget
        depends on the cutoff, so iterate the pair until they settle.
        """
        path = compute_path(self.topology, src, dst)
        hops = len(path) - 1
        links = [self.topology.link_between(path[i], path[i + 1]) for i in range(hops)]
        base = max(link.base_time_coeff for link in links)
        cutoff: float | None = 0.0
        f_link = budget_fidelities(hops, f_e2e, 0.0, self.t_mem, self.gate_werner)
        for _ in range(12):
            mean_time = base / (1.0 - f_link)
            cutoff = cutoff_from_policy(cutoff_policy, f_link, mean_time, self.t_mem)
            new_f_link = budget_fidelities(
                hops, f_e2e, cutoff or 0.0, self.t_mem, self.gate_werner
            )
            if abs(new_f_link - f_link) < 1e-12:
                f_link = new_f_link
                break
            f_link = new_f_link
        self._circuit_count += 1
        circuit_id = circuit_id or f"vc{self._circuit_count}"
        labels = [f"{circuit_id}@{link.name}" for link in links]
        if max_eer is None:
            max_eer = min(
                min(link.max_lpr, 1.0 / link.mean_generation_time(f_link)) for link in links
            )
        return CircuitSpec(
            circuit_id=circuit_id,
            path=path,
            link_labels=labels,
            link_fidelities=[f_link] * hops,
            link_max_lprs=[link.max_lpr for link in links],
            circuit_max_eer=max_eer,
            cutoff=cutoff,
            f_e2e=f_e2e,
        )

    def install(self, network, spec: CircuitSpec) -> None:
        network.install_circuit(spec)

    def teardown(self, network, circuit_id: str) -> None:
        network.teardown_circuit(circuit_id)
