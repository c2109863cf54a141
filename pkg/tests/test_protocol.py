import pytest

from qnp.bell import BellIndex
from qnp.control import CircuitSpec, Topology
from qnp.network import Network
from qnp.physical import HardwareParams, LinkConfig
from qnp.protocol import (
    Address,
    DuplicateRequestId,
    ForwardMessage,
    IntermediateNode,
    UserRequest,
    measure_basis,
    min_eer,
)
from qnp.sim import Simulator


def chain_topology(names, classical_delay=1e-6, max_lpr=250.0, base_time_coeff=5e-4):
    topo = Topology()
    for i, name in enumerate(names):
        topo.add_node(name, end_node=i in (0, len(names) - 1))
    for a, b in zip(names, names[1:]):
        topo.add_link(
            LinkConfig(a, b, classical_delay=classical_delay,
                       max_lpr=max_lpr, base_time_coeff=base_time_coeff)
        )
    return topo


def build_chain(
    names,
    *,
    cutoff=0.05,
    f_link=0.95,
    seed=1,
    processing_delay=0.0,
    classical_delay=1e-6,
    capacity=2,
    t_mem=60.0,
    max_lpr=0.0,
    max_eer=1000.0,
):
    """Installed chain circuit; max_lpr=0 keeps generation inject-only."""
    sim = Simulator(seed=seed)
    topo = chain_topology(names, classical_delay=classical_delay)
    hardware = HardwareParams(
        t_mem=t_mem, capacity=capacity, processing_delay=processing_delay
    )
    net = Network(sim, topo, hardware)
    hops = len(names) - 1
    spec = CircuitSpec(
        circuit_id="vc1",
        path=list(names),
        link_labels=[f"vc1@{a}-{b}" for a, b in zip(names, names[1:])],
        link_fidelities=[f_link] * hops,
        link_max_lprs=[max_lpr] * hops,
        circuit_max_eer=max_eer,
        cutoff=cutoff,
        f_e2e=0.8,
    )
    net.install_circuit(spec)
    return sim, net, spec


def normal_request(request_id="r1", pairs=1, head="A", tail="B", **kwargs):
    return UserRequest(
        request_id=request_id,
        head_end=Address(head, 1),
        tail_end=Address(tail, 2),
        pairs=pairs,
        **kwargs,
    )


def inject(net, spec, hop_index, at, state=None, fidelity=None):
    label = spec.link_labels[hop_index]
    link_name = f"{spec.path[hop_index]}-{spec.path[hop_index + 1]}"
    net.links[link_name].inject_pair(label, at, state, fidelity)


def deliveries_by_kind(net, kind):
    return [e for e in net.delivery_log if e.kind == kind]


def assert_tracking_correct(net, expect_min=1):
    """Every completed chain: one delivery per end, same id, oracle state."""
    by_chain = {}
    for event in net.successful_deliveries():
        by_chain.setdefault(event.chain.chain_id, []).append(event)
    assert len(by_chain) >= expect_min
    for events in by_chain.values():
        assert len(events) == 2, events
        first, second = events
        assert first.node != second.node
        assert first.request_id == second.request_id
        assert first.sequence == second.sequence
        assert not first.chain.broken
        assert first.state == second.state == first.chain.true_state
    return by_chain


class TestSinglePairEndToEnd:
    def test_three_node_chain_delivers_matching_pair(self):
        sim, net, spec = build_chain(["A", "M", "B"])
        net.submit("vc1", normal_request())
        inject(net, spec, 0, at=0.001, state=BellIndex.PSI_PLUS)
        inject(net, spec, 1, at=0.002, state=BellIndex.PHI_MINUS)
        sim.run(max_events=10_000)
        chains = assert_tracking_correct(net)
        assert len(chains) == 1
        assert net.swap_counts["vc1"] == 1
        head = net.circuit("vc1").head
        assert head.requests["r1"].completed
        assert net.occupied_slots() == {}

    def test_two_node_circuit_single_link(self):
        sim, net, spec = build_chain(["A", "B"])
        net.submit("vc1", normal_request())
        inject(net, spec, 0, at=0.001, state=BellIndex.PSI_MINUS)
        sim.run(max_events=10_000)
        chains = assert_tracking_correct(net)
        (events,) = chains.values()
        assert {e.state for e in events} == {BellIndex.PSI_MINUS}

    def test_six_node_chain(self):
        names = ["A", "M1", "M2", "M3", "M4", "B"]
        sim, net, spec = build_chain(names, seed=5)
        net.submit("vc1", normal_request())
        for hop in range(5):
            inject(net, spec, hop, at=0.001 + 0.0005 * hop)
        sim.run(max_events=50_000)
        assert_tracking_correct(net)
        assert net.swap_counts["vc1"] == 4

    def test_final_state_correction_at_head(self):
        for seed in range(6):
            sim, net, spec = build_chain(["A", "M", "B"], seed=seed)
            net.submit("vc1", normal_request(final_state=BellIndex.PHI_PLUS))
            inject(net, spec, 0, at=0.001)
            inject(net, spec, 1, at=0.002)
            sim.run(max_events=10_000)
            chains = assert_tracking_correct(net)
            (events,) = chains.values()
            for event in events:
                assert event.state == BellIndex.PHI_PLUS
            # Oracle agrees after the head-end correction.
            assert events[0].chain.true_state == BellIndex.PHI_PLUS


class TestTrackRules:
    def test_head_track_fields_per_link_rule(self):
        sim, net, spec = build_chain(["A", "M", "B"])
        net.submit("vc1", normal_request())
        inject(net, spec, 0, at=0.001, state=BellIndex.PHI_MINUS)
        sim.run_until(0.01)
        middle = net.circuit("vc1").machines["M"]
        assert isinstance(middle, IntermediateNode)
        (corr, track), = middle.up_track.items()
        assert track.origin_correlator == corr
        assert track.link_correlator == corr
        assert track.outcome_state == BellIndex.PHI_MINUS
        assert track.request_id == "r1"
        assert track.epoch == 1

    def test_tail_track_has_null_epoch(self):
        sim, net, spec = build_chain(["A", "M", "B"])
        net.submit("vc1", normal_request())
        inject(net, spec, 1, at=0.001, state=BellIndex.PHI_PLUS)
        sim.run_until(0.01)
        middle = net.circuit("vc1").machines["M"]
        (track,) = middle.down_track.values()
        assert track.epoch is None

    def test_swap_before_track_and_after_track_agree(self):
        # Same pairs and reported states; only message/pair order differs.
        def run(order):
            sim, net, spec = build_chain(["A", "M", "B"], seed=42, classical_delay=0.004)
            net.submit("vc1", normal_request())
            if order == "swap-first":
                inject(net, spec, 0, at=0.010, state=BellIndex.PSI_PLUS)
                inject(net, spec, 1, at=0.011, state=BellIndex.PHI_MINUS)
            else:
                # Head pair early: its TRACK reaches M before the second
                # pair exists, so it must buffer and be released by the swap.
                inject(net, spec, 0, at=0.001, state=BellIndex.PSI_PLUS)
                inject(net, spec, 1, at=0.030, state=BellIndex.PHI_MINUS)
            sim.run(max_events=10_000)
            chains = assert_tracking_correct(net)
            (events,) = chains.values()
            return {(e.node, e.request_id, e.sequence, e.state) for e in events}

        assert run("swap-first") == run("track-first")


class TestCutoffAndExpire:
    def test_expire_record_turns_track_around(self):
        # M's upstream qubit expires before its TRACK arrives; the TRACK
        # must come back to the head as an EXPIRE and free the head slot.
        sim, net, spec = build_chain(["A", "M", "B"], cutoff=0.005, classical_delay=0.02)
        net.submit("vc1", normal_request())
        inject(net, spec, 0, at=0.001)
        sim.run_until(0.1)
        head = net.circuit("vc1").head
        middle = net.circuit("vc1").machines["M"]
        assert head.counters["expired_pairs"] == 1
        assert head.in_transit == {}
        assert middle.up_expire_records == {}
        assert net.occupied_slots() == {}
        assert net.discard_counts["vc1"] == 1

    def test_buffered_track_expires_immediately_on_cutoff(self):
        # TRACK arrives first and buffers; when the cutoff pops the EXPIRE
        # goes straight back without waiting for another message.
        sim, net, spec = build_chain(["A", "M", "B"], cutoff=0.03, classical_delay=0.001)
        net.submit("vc1", normal_request())
        inject(net, spec, 0, at=0.001)
        sim.run_until(0.01)
        middle = net.circuit("vc1").machines["M"]
        assert len(middle.up_track) == 1
        sim.run_until(0.1)
        assert middle.up_track == {}
        head = net.circuit("vc1").head
        assert head.counters["expired_pairs"] == 1
        assert net.occupied_slots() == {}

    def test_downstream_expiry_notifies_tail(self):
        # M discards its downstream-link qubit; the tail-originated TRACK
        # meets the expire record and the EXPIRE must travel downstream.
        sim, net, spec = build_chain(["A", "M", "B"], cutoff=0.005, classical_delay=0.02)
        net.submit("vc1", normal_request())
        inject(net, spec, 1, at=0.05)  # after the FORWARD has propagated
        sim.run_until(0.2)
        tail = net.circuit("vc1").tail
        assert tail.counters["expired_pairs"] == 1
        assert net.occupied_slots() == {}

    def test_swap_cancels_cutoff_timer(self):
        sim, net, spec = build_chain(["A", "M", "B"], cutoff=0.02)
        net.submit("vc1", normal_request())
        inject(net, spec, 0, at=0.001)
        inject(net, spec, 1, at=0.002)
        sim.run(max_events=10_000)
        assert net.discard_counts["vc1"] == 0
        assert_tracking_correct(net)

    def test_broken_chain_is_retried_and_request_completes(self):
        # First upstream pair dies; continuous generation replaces it.
        sim, net, spec = build_chain(["A", "M", "B"], cutoff=0.004, classical_delay=0.0005)
        net.submit("vc1", normal_request())
        inject(net, spec, 0, at=0.001)  # will expire at M
        inject(net, spec, 1, at=0.020)
        inject(net, spec, 0, at=0.021)  # retry pair
        sim.run(max_events=20_000)
        chains = assert_tracking_correct(net)
        assert len(chains) == 1
        head = net.circuit("vc1").head
        assert head.requests["r1"].completed
        assert head.counters["expired_pairs"] == 1

    def test_duplicate_expire_is_noop(self):
        sim, net, spec = build_chain(["A", "M", "B"])
        net.submit("vc1", normal_request())
        inject(net, spec, 0, at=0.001)
        sim.run_until(0.01)
        head = net.circuit("vc1").head
        corr = next(iter(head.in_transit))
        from qnp.protocol import ExpireMessage

        head.on_expire(ExpireMessage("vc1", corr), from_upstream=False)
        head.on_expire(ExpireMessage("vc1", corr), from_upstream=False)
        assert head.counters["expired_pairs"] == 1
        assert head.counters["expire_noop"] == 1


class TestDemultiplexing:
    def test_round_robin_between_two_requests(self):
        sim, net, spec = build_chain(["A", "M", "B"], cutoff=0.5)
        net.submit("vc1", normal_request("r1", pairs=2))
        net.submit("vc1", normal_request("r2", pairs=2))
        for k in range(4):
            inject(net, spec, 0, at=0.001 + 0.002 * k)
            inject(net, spec, 1, at=0.002 + 0.002 * k)
        sim.run(max_events=50_000)
        chains = assert_tracking_correct(net, expect_min=4)
        per_request = {}
        for events in chains.values():
            per_request.setdefault(events[0].request_id, 0)
            per_request[events[0].request_id] += 1
        assert per_request == {"r1": 2, "r2": 2}
        head = net.circuit("vc1").head
        assert head.requests["r1"].completed and head.requests["r2"].completed

    def test_skew_resolved_by_adopting_head_assignment(self):
        # After a warm-up delivery both ends share a two-request epoch.
        # A discarded head claim then skews the round-robin ordinals, so
        # the ends disagree and the tail must adopt the head's request id.
        sim, net, spec = build_chain(["A", "M", "B"], cutoff=0.01, classical_delay=0.0005)
        net.submit("vc1", normal_request("r1", pairs=2))
        net.submit("vc1", normal_request("r2", pairs=2))
        inject(net, spec, 0, at=0.0010)  # warm-up pair, claimed r1 both ends
        inject(net, spec, 1, at=0.0012)
        inject(net, spec, 0, at=0.005)   # head claims r1 again; expires at M
        inject(net, spec, 0, at=0.020)   # head claims r2
        inject(net, spec, 1, at=0.021)   # tail claims r1: skew
        sim.run(max_events=20_000)
        chains = assert_tracking_correct(net, expect_min=2)
        request_ids = sorted(events[0].request_id for events in chains.values())
        assert request_ids == ["r1", "r2"]
        tail = net.circuit("vc1").tail
        assert tail.counters["adopted_head_assignment"] == 1
        head = net.circuit("vc1").head
        assert head.counters["cross_check_mismatch"] == 1

    def test_unclaimed_pair_is_refused_and_expired(self):
        # The tail has no active request for a pair the head tracked;
        # both halves must be freed with no delivery.
        from qnp.protocol import Epoch

        sim, net, spec = build_chain(["A", "M", "B"], cutoff=0.5)
        net.submit("vc1", normal_request("r1"))
        tail = net.circuit("vc1").tail

        def wipe_tail_bookkeeping():
            tail.requests.clear()
            tail.epochs.clear()
            tail.epochs[0] = Epoch(0, ())
            tail.newest_epoch_id = 0
            tail.active_epoch_id = 0

        sim.schedule(0.0005, wipe_tail_bookkeeping)  # after FORWARD landed
        inject(net, spec, 0, at=0.001)
        inject(net, spec, 1, at=0.002)
        sim.run(max_events=20_000)
        assert net.successful_deliveries() == []
        assert tail.counters["no_active_request"] == 1
        assert tail.counters["refused_unclaimed"] == 1
        head = net.circuit("vc1").head
        assert head.counters["expired_pairs"] == 1
        assert net.occupied_slots() == {}


class TestEarlyAndMeasure:
    def test_early_pair_handed_over_then_confirmed(self):
        sim, net, spec = build_chain(["A", "M", "B"])
        net.submit("vc1", normal_request(request_type="EARLY"))
        inject(net, spec, 0, at=0.001)
        inject(net, spec, 1, at=0.002)
        sim.run(max_events=10_000)
        handed = deliveries_by_kind(net, "early_qubit")
        confirmed = deliveries_by_kind(net, "early_confirm")
        assert len(handed) == 2 and len(confirmed) == 2
        assert min(e.time for e in handed) < min(e.time for e in confirmed)
        assert_tracking_correct(net)

    def test_early_failure_notification_on_expire(self):
        sim, net, spec = build_chain(["A", "M", "B"], cutoff=0.005, classical_delay=0.02)
        net.submit("vc1", normal_request(request_type="EARLY"))
        inject(net, spec, 0, at=0.001)
        sim.run_until(0.2)
        failures = deliveries_by_kind(net, "early_failure")
        assert len(failures) == 1
        assert failures[0].node == "A"

    def test_measure_outcomes_withheld_until_track(self):
        sim, net, spec = build_chain(["A", "M", "B"])
        net.submit("vc1", normal_request(request_type="MEASURE"))
        inject(net, spec, 0, at=0.001)
        sim.run_until(0.01)
        assert deliveries_by_kind(net, "outcome") == []
        inject(net, spec, 1, at=0.02)
        sim.run(max_events=10_000)
        outcomes = deliveries_by_kind(net, "outcome")
        assert len(outcomes) == 2
        basis = measure_basis("r1")
        for event in outcomes:
            assert event.basis == basis
            assert event.outcome in (0, 1)
        assert_tracking_correct(net)

    def test_measure_outcomes_correlate_perfectly_at_f1(self):
        from qnp.bell import ideal_anticorrelation

        for seed in range(10):
            sim, net, spec = build_chain(["A", "M", "B"], seed=seed, f_link=0.95)
            net.submit("vc1", normal_request(request_type="MEASURE"))
            inject(net, spec, 0, at=0.001, fidelity=1.0)
            inject(net, spec, 1, at=0.002, fidelity=1.0)
            sim.run(max_events=10_000)
            outcomes = deliveries_by_kind(net, "outcome")
            assert len(outcomes) == 2
            a, b = outcomes
            anti = ideal_anticorrelation(a.chain.true_state, a.basis)
            assert (a.outcome != b.outcome) == bool(anti)

    def test_measure_frees_memory_at_claim(self):
        sim, net, spec = build_chain(["A", "M", "B"])
        net.submit("vc1", normal_request(request_type="MEASURE"))
        inject(net, spec, 0, at=0.001)
        sim.run_until(0.005)
        assert ("A", "A-M") not in net.occupied_slots()


class TestPolicing:
    def test_min_eer_rules(self):
        base = dict(head_end=Address("A", 1), tail_end=Address("B", 2))
        assert min_eer(UserRequest("x", pairs=100, deadline=10.0, **base)) == 10.0
        assert min_eer(UserRequest("x", pairs=100, deadline=0.0, **base)) == 0.0
        assert min_eer(UserRequest("x", rate=7.5, **base)) == 7.5
        assert min_eer(UserRequest("x", pairs=50, window=5.0, **base)) == 10.0

    def test_reject_when_min_eer_exceeds_capacity(self):
        sim, net, spec = build_chain(["A", "M", "B"], max_eer=5.0)
        result = net.submit("vc1", normal_request(pairs=100, deadline=1.0))
        assert result.status == "rejected"

    def test_delay_then_admit_on_completion(self):
        sim, net, spec = build_chain(["A", "M", "B"], max_eer=10.0, cutoff=0.5)
        first = net.submit("vc1", normal_request("r1", pairs=1, deadline=0.1))
        second = net.submit("vc1", normal_request("r2", pairs=1, deadline=0.1))
        assert first.status == "accepted"
        assert second.status == "delayed"
        inject(net, spec, 0, at=0.001)
        inject(net, spec, 1, at=0.002)
        sim.run(max_events=20_000)
        head = net.circuit("vc1").head
        assert "r2" in head.requests  # admitted once r1 completed

    def test_duplicate_request_id_raises(self):
        sim, net, spec = build_chain(["A", "M", "B"])
        net.submit("vc1", normal_request("r1"))
        with pytest.raises(DuplicateRequestId):
            net.submit("vc1", normal_request("r1"))

    def test_policing_soundness_invariant(self):
        sim, net, spec = build_chain(["A", "M", "B"], max_eer=10.0)
        accepted_eer = 0.0
        for k in range(8):
            request = normal_request(f"r{k}", pairs=10, deadline=3.0)
            result = net.submit("vc1", request)
            if result.status == "accepted":
                accepted_eer += min_eer(request)
        assert accepted_eer <= 10.0 + 1e-12

    def test_deadline_forces_completion(self):
        sim, net, spec = build_chain(["A", "M", "B"])
        net.submit("vc1", normal_request("r1", pairs=100, deadline=0.5))
        sim.run_until(1.0)
        head = net.circuit("vc1").head
        assert head.requests["r1"].completed
        assert head.counters["deadline_completions"] == 1

    def test_rate_request_runs_until_deadline(self):
        sim, net, spec = build_chain(["A", "M", "B"], cutoff=0.5)
        result = net.submit(
            "vc1",
            UserRequest(
                "rr", Address("A", 1), Address("B", 2),
                request_type="MEASURE", rate=5.0, deadline=0.5,
            ),
        )
        assert result.status == "accepted"
        inject(net, spec, 0, at=0.01)
        inject(net, spec, 1, at=0.02)
        sim.run_until(1.0)
        head = net.circuit("vc1").head
        assert head.requests["rr"].completed
        assert head.requests["rr"].delivered == 1

    def test_tail_submitted_request_forwarded_to_head(self):
        sim, net, spec = build_chain(["A", "M", "B"])
        net.submit("vc1", normal_request("r1"), at_end="tail")
        sim.run_until(0.01)
        head = net.circuit("vc1").head
        assert "r1" in head.requests


class TestLinkRateRules:
    def test_count_request_asks_maximum_lpr(self):
        sim, net, spec = build_chain(["A", "M", "B"], max_lpr=200.0, max_eer=50.0)
        net.submit("vc1", normal_request(pairs=10))
        sim.run_until(0.01)
        for hop, label in enumerate(spec.link_labels):
            link_name = f"{spec.path[hop]}-{spec.path[hop + 1]}"
            assert net.links[link_name].requests[label].lpr == pytest.approx(200.0)

    def test_rate_only_requests_get_fraction(self):
        sim, net, spec = build_chain(["A", "M", "B"], max_lpr=200.0, max_eer=50.0)
        net.submit(
            "vc1",
            UserRequest(
                "rr", Address("A", 1), Address("B", 2),
                request_type="MEASURE", rate=25.0,
            ),
        )
        sim.run_until(0.01)
        label = spec.link_labels[0]
        assert net.links["A-M"].requests[label].lpr == pytest.approx(100.0)

    def test_completion_scales_rate_back_down(self):
        sim, net, spec = build_chain(["A", "M", "B"], max_lpr=200.0, max_eer=50.0, cutoff=0.5)
        net.submit("vc1", normal_request("r1", pairs=1))
        inject(net, spec, 0, at=0.005)
        inject(net, spec, 1, at=0.006)
        sim.run(max_events=20_000)
        label = spec.link_labels[0]
        assert net.links["A-M"].requests[label].lpr == 0.0

    def test_unknown_circuit_message_dropped_and_counted(self):
        sim, net, spec = build_chain(["A", "M", "B"])
        message = ForwardMessage("bogus", "r", 1, 2, "NORMAL", 1, None, 10.0)
        net._dispatch_message("bogus", "A", message, False)
        assert net.unknown_circuit_drops == 1


class TestGeneratedTraffic:
    def test_request_served_by_continuous_generation(self):
        sim, net, spec = build_chain(
            ["A", "M", "B"], max_lpr=250.0, cutoff=0.05, seed=7, f_link=0.9
        )
        net.submit("vc1", normal_request(pairs=10))
        sim.run_until(3.0)
        chains = assert_tracking_correct(net, expect_min=10)
        head = net.circuit("vc1").head
        assert head.requests["r1"].completed
        assert head.requests["r1"].delivered == 10
        assert net.oracle.half_delivered_chains() == []
        assert net.oracle.broken_chain_deliveries() == []

    def test_aggressive_cutoff_never_breaks_atomicity(self):
        sim, net, spec = build_chain(
            ["A", "M1", "M2", "B"], max_lpr=250.0, cutoff=0.008, seed=3,
            f_link=0.9, classical_delay=0.002,
        )
        net.submit("vc1", normal_request(pairs=20))
        sim.run_until(10.0)
        assert len(net.successful_deliveries()) >= 2
        assert_tracking_correct(net)
        assert net.oracle.half_delivered_chains() == []
        assert net.oracle.broken_chain_deliveries() == []
        assert net.discard_counts["vc1"] > 0

    def test_epoch_ids_nondecreasing(self):
        sim, net, spec = build_chain(["A", "M", "B"], max_lpr=250.0, cutoff=0.05, seed=9)
        head = net.circuit("vc1").head
        tail = net.circuit("vc1").tail
        seen = []

        def watch():
            seen.append((head.active_epoch_id, tail.active_epoch_id))
            if sim.now < 2.0:
                sim.schedule_after(0.01, watch)

        sim.schedule(0.0, watch)
        for k in range(4):
            sim.schedule(
                0.1 * k, lambda k=k: net.submit("vc1", normal_request(f"r{k}", pairs=3))
            )
        sim.run_until(2.5)
        for (h1, t1), (h2, t2) in zip(seen, seen[1:]):
            assert h2 >= h1 and t2 >= t1
        assert head.requests["r3"].completed
