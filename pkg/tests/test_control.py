import math
import random

import pytest

from qnp.bell import decay_fidelity, swap_fidelity, werner_from_fidelity
from qnp.control import (
    CircuitSpec,
    Controller,
    CutoffPolicy,
    DeficitRoundRobin,
    Infeasible,
    LabelCollision,
    NoPath,
    Topology,
    budget_fidelities,
    compute_path,
    cutoff_from_policy,
)
from qnp.physical import HardwareParams, LinkConfig
from qnp.network import Network
from qnp.sim import Simulator


def dumbbell() -> Topology:
    topo = Topology()
    for name in ("A0", "A1", "B0", "B1"):
        topo.add_node(name, end_node=True)
    topo.add_node("MA")
    topo.add_node("MB")
    for a, b in (("A0", "MA"), ("A1", "MA"), ("MA", "MB"), ("MB", "B0"), ("MB", "B1")):
        topo.add_link(LinkConfig(a, b))
    return topo


class TestComputePath:
    def test_dumbbell_path(self):
        assert compute_path(dumbbell(), "A0", "B0") == ["A0", "MA", "MB", "B0"]

    def test_src_equals_dst(self):
        with pytest.raises(ValueError):
            compute_path(dumbbell(), "A0", "A0")

    def test_disconnected(self):
        topo = dumbbell()
        topo.add_node("Z0", end_node=True)
        with pytest.raises(NoPath):
            compute_path(topo, "A0", "Z0")

    def test_lexicographic_tiebreak(self):
        # Two equal-length routes; the lexicographically smaller interior
        # node wins deterministically.
        topo = Topology()
        for name in ("S", "T"):
            topo.add_node(name, end_node=True)
        topo.add_node("M1")
        topo.add_node("M2")
        for mid in ("M1", "M2"):
            topo.add_link(LinkConfig("S", mid))
            topo.add_link(LinkConfig(mid, "T"))
        assert compute_path(topo, "S", "T") == ["S", "M1", "T"]

    def test_non_end_node_rejected(self):
        with pytest.raises(ValueError):
            compute_path(dumbbell(), "A0", "MA")


class TestBudget:
    def test_single_link_no_cutoff(self):
        assert budget_fidelities(1, 0.8, 0.0, 60.0, 1.0) == pytest.approx(0.8, abs=1e-12)

    def test_two_links_closed_form(self):
        f_link = budget_fidelities(2, 0.8, 0.0, 60.0, 1.0)
        w_link = math.sqrt(werner_from_fidelity(0.8))
        assert w_link == pytest.approx(0.85635, abs=1e-5)
        assert f_link == pytest.approx(0.89226, abs=1e-5)

    def test_infeasible_when_too_long(self):
        with pytest.raises(Infeasible):
            budget_fidelities(40, 0.95, 0.0, 60.0, 0.99)

    def test_infeasible_when_cutoff_too_generous(self):
        with pytest.raises(Infeasible):
            budget_fidelities(2, 0.9, 120.0, 60.0, 1.0)

    @pytest.mark.parametrize("n_links", [1, 2, 3, 5])
    @pytest.mark.parametrize("f_e2e", [0.6, 0.8, 0.9])
    def test_forward_simulation_meets_target(self, n_links, f_e2e):
        # Independent route: chain the per-pair swap/decay primitives for
        # the worst case (each pair idles exactly one cutoff before use).
        cutoff, t_mem, gate_werner = 0.8, 60.0, 0.998
        f_link = budget_fidelities(n_links, f_e2e, cutoff, t_mem, gate_werner)
        current = decay_fidelity(f_link, cutoff, t_mem)
        for _ in range(n_links - 1):
            incoming = decay_fidelity(f_link, cutoff, t_mem)
            swapped = swap_fidelity(current, incoming)
            w = werner_from_fidelity(swapped) * gate_werner
            current = (1.0 + 3.0 * w) / 4.0
        assert current >= f_e2e - 1e-9


class TestCutoffPolicy:
    def test_fidelity_loss_value(self):
        cutoff = cutoff_from_policy(
            CutoffPolicy("fidelity_loss", 0.015), link_fidelity=0.95,
            mean_pair_time=0.010, t_mem=60.0,
        )
        assert cutoff == pytest.approx(1.234, abs=0.001)

    def test_generation_window_value(self):
        cutoff = cutoff_from_policy(
            CutoffPolicy("generation_window", 0.85), link_fidelity=0.95,
            mean_pair_time=0.010, t_mem=60.0,
        )
        assert cutoff == pytest.approx(0.018971, abs=1e-5)

    def test_zero_loss_gives_zero(self):
        cutoff = cutoff_from_policy(
            CutoffPolicy("fidelity_loss", 0.0), 0.95, 0.010, 60.0
        )
        assert cutoff == 0.0

    def test_none_policy(self):
        assert cutoff_from_policy(CutoffPolicy("none"), 0.95, 0.01, 60.0) is None

    def test_unknown_policy_rejected(self):
        with pytest.raises(ValueError):
            CutoffPolicy("whenever")


class TestDeficitRoundRobin:
    def test_single_label_always_selected(self):
        drr = DeficitRoundRobin()
        drr.add("a", 10.0)
        for _ in range(5):
            assert drr.next(["a"]) == "a"
            drr.charge("a", 0.01)

    def test_equal_weights_unequal_costs_share_time(self):
        # Equal LPR, mean pair times t and 2t: counts 2:1, time 1:1.
        drr = DeficitRoundRobin()
        drr.add("fast", 10.0)
        drr.add("slow", 10.0)
        rng = random.Random(4)
        time_used = {"fast": 0.0, "slow": 0.0}
        counts = {"fast": 0, "slow": 0}
        for _ in range(10_000):
            label = drr.next(["fast", "slow"])
            cost = rng.expovariate(1 / 0.01) if label == "fast" else rng.expovariate(1 / 0.02)
            drr.charge(label, cost)
            time_used[label] += cost
            counts[label] += 1
        total = time_used["fast"] + time_used["slow"]
        assert abs(time_used["fast"] - time_used["slow"]) / total < 0.02
        assert counts["fast"] / counts["slow"] == pytest.approx(2.0, rel=0.1)

    def test_oversubscribed_shares_proportional_to_weight(self):
        drr = DeficitRoundRobin()
        drr.add("a", 30.0)
        drr.add("b", 10.0)
        drr.add("c", 10.0)
        rng = random.Random(9)
        time_used = {"a": 0.0, "b": 0.0, "c": 0.0}
        for _ in range(20_000):
            label = drr.next(["a", "b", "c"])
            cost = rng.expovariate(1 / 0.01)
            drr.charge(label, cost)
            time_used[label] += cost
        total = sum(time_used.values())
        assert time_used["a"] / total == pytest.approx(0.6, abs=0.02)
        assert time_used["b"] / total == pytest.approx(0.2, abs=0.02)

    def test_ineligible_labels_skipped(self):
        drr = DeficitRoundRobin()
        drr.add("a", 10.0)
        drr.add("b", 10.0)
        assert drr.next(["b"]) == "b"

    def test_zero_weight_never_selected(self):
        drr = DeficitRoundRobin()
        drr.add("a", 0.0)
        assert drr.next(["a"]) is None


class TestInstallTeardown:
    def _network(self):
        sim = Simulator(seed=1)
        topo = dumbbell()
        hardware = HardwareParams()
        return sim, topo, Network(sim, topo, hardware)

    def test_install_writes_entries_and_labels(self):
        sim, topo, net = self._network()
        controller = Controller(topo, t_mem=60.0, gate_werner=0.998)
        spec = controller.build_circuit("A0", "B0", 0.8, CutoffPolicy("fidelity_loss", 0.015))
        assert spec.path == ["A0", "MA", "MB", "B0"]
        controller.install(net, spec)
        runtime = net.circuit(spec.circuit_id)
        assert len(runtime.machines) == 4
        assert len(spec.link_labels) == 3
        assert runtime.machines["MA"].role == "intermediate"
        assert runtime.machines["A0"].role == "head"
        assert runtime.machines["B0"].role == "tail"
        for i, label in enumerate(spec.link_labels):
            link = topo.link_between(spec.path[i], spec.path[i + 1])
            assert net.label_registry[link.name][label] == spec.circuit_id

    def test_shared_link_gets_distinct_labels(self):
        sim, topo, net = self._network()
        controller = Controller(topo, 60.0, 0.998)
        s1 = controller.build_circuit("A0", "B0", 0.8, CutoffPolicy("fixed", 0.05))
        s2 = controller.build_circuit("A1", "B1", 0.8, CutoffPolicy("fixed", 0.05))
        controller.install(net, s1)
        controller.install(net, s2)
        assert len(net.label_registry["MA-MB"]) == 2

    def test_label_collision_rejected(self):
        sim, topo, net = self._network()
        controller = Controller(topo, 60.0, 0.998)
        s1 = controller.build_circuit("A0", "B0", 0.8, CutoffPolicy("fixed", 0.05))
        controller.install(net, s1)
        s2 = CircuitSpec(
            circuit_id="dup",
            path=["A0", "MA", "MB", "B0"],
            link_labels=list(s1.link_labels),
            link_fidelities=list(s1.link_fidelities),
            link_max_lprs=list(s1.link_max_lprs),
            circuit_max_eer=s1.circuit_max_eer,
            cutoff=s1.cutoff,
            f_e2e=0.8,
        )
        with pytest.raises(LabelCollision):
            controller.install(net, s2)

    def test_teardown_round_trip_empties_registries(self):
        sim, topo, net = self._network()
        controller = Controller(topo, 60.0, 0.998)
        spec = controller.build_circuit("A0", "B0", 0.8, CutoffPolicy("fixed", 0.05))
        controller.install(net, spec)
        controller.teardown(net, spec.circuit_id)
        assert net.circuits == {}
        assert all(not labels for labels in net.label_registry.values())
        assert all(not link.requests for link in net.links.values())
        assert net.occupied_slots() == {}

    def test_budget_fixed_point_consistent(self):
        controller = Controller(dumbbell(), 60.0, 0.998)
        spec = controller.build_circuit("A0", "B0", 0.8, CutoffPolicy("fidelity_loss", 0.015))
        f_link = spec.link_fidelities[0]
        recomputed = budget_fidelities(3, 0.8, spec.cutoff, 60.0, 0.998)
        assert f_link == pytest.approx(recomputed, abs=1e-9)
        assert spec.cutoff == pytest.approx(
            cutoff_from_policy(
                CutoffPolicy("fidelity_loss", 0.015), f_link, 5e-4 / (1 - f_link), 60.0
            ),
            rel=1e-9,
        )
