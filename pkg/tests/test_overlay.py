import pytest

from pvtn.errors import DeliveryFailed, NonTermination
from pvtn.messaging import Envelope, EnvelopeKind
from pvtn.overlay import (
    EventKind,
    OverlayNode,
    RouteMode,
    SimClock,
    Simulator,
    Topology,
    Trace,
    TraceLine,
    diff_traces,
    route,
)


def small_topology():
    """root (layer 0) <- mgr (layer 1) <- leaf (layer 2); gw is leaf's gateway."""
    nodes = {
        "root": OverlayNode("root", b"\x00" * 32, 0),
        "gw": OverlayNode("gw", b"\x10" * 32, 0),
        "mgr": OverlayNode("mgr", b"\xf0" * 32, 1, "root", "gw"),
        "leaf": OverlayNode("leaf", b"\x0f" * 32, 2, "mgr", "gw"),
        "cand": OverlayNode("cand", b"\x33" * 32, 2),
    }
    return Topology(nodes.get, lambda: list(nodes), fanout=2, latency={frozenset(("cand", "mgr")): 5})


def envelope_to(digest: bytes) -> Envelope:
    return Envelope(digest, b"ct", EnvelopeKind.SIGNED_CONTROL, "00" * 8)


class TestRoute:
    def test_direct(self):
        assert route(envelope_to(b"\x0f" * 32), RouteMode.DIRECT_IP, small_topology(), "cand", "leaf") == ["leaf"]

    def test_gateway_relay(self):
        assert route(envelope_to(b"\x0f" * 32), RouteMode.GATEWAY_RELAY, small_topology(), "cand", "leaf") == ["gw", "leaf"]

    def test_gateway_relay_without_gateway(self):
        with pytest.raises(DeliveryFailed):
            route(envelope_to(b"\x00" * 32), RouteMode.GATEWAY_RELAY, small_topology(), "cand", "root")

    def test_tree_path(self):
        assert route(envelope_to(b"\x0f" * 32), RouteMode.VIRGO_ID_PATH, small_topology(), "cand", "leaf") == ["root", "mgr", "leaf"]

    def test_overlay_lookup_orders_relays_by_xor_distance(self):
        path = route(envelope_to(b"\x0f" * 32), RouteMode.OVERLAY_LOOKUP, small_topology(), "cand", "leaf")
        assert path == ["root", "gw", "leaf"]

    def test_unknown_destination(self):
        with pytest.raises(DeliveryFailed):
            route(envelope_to(b"\x00" * 32), RouteMode.DIRECT_IP, small_topology(), "cand", "nowhere")

    def test_latency(self):
        topology = small_topology()
        assert topology.link_latency("mgr", "cand") == 5
        assert topology.link_latency("root", "mgr") == 1
        assert topology.max_latency() == 5


class TestSimulator:
    def test_events_run_in_tick_then_insertion_order(self):
        seen = []
        sim = Simulator(lambda e: seen.append(e.label))
        sim.schedule(5, EventKind.INJECT, label="late")
        sim.schedule(2, EventKind.INJECT, label="first")
        sim.schedule(2, EventKind.INJECT, label="second")
        sim.run_until_quiescent()
        assert seen == ["first", "second", "late"]
        assert sim.now == 5

    def test_cancelled_events_are_skipped(self):
        seen = []
        sim = Simulator(lambda e: seen.append(e.label))
        event = sim.schedule(1, EventKind.INJECT, label="gone")
        event.cancelled = True
        sim.run_until_quiescent()
        assert seen == []

    def test_tick_bound(self):
        sim = Simulator(lambda e: None, max_ticks=10)
        sim.schedule(11, EventKind.INJECT)
        with pytest.raises(NonTermination):
            sim.run_until_quiescent()

    def test_self_rescheduling_event_hits_bound(self):
        sim = Simulator(lambda e: sim.schedule_in(1, EventKind.TIMEOUT), max_ticks=50)
        sim.schedule(0, EventKind.TIMEOUT)
        with pytest.raises(NonTermination):
            sim.run_until_quiescent()

    def test_clock_cannot_go_back(self):
        clock = SimClock(4)
        with pytest.raises(ValueError):
            clock.advance(3)


class TestTrace:
    def test_render_and_parse(self):
        trace = Trace()
        trace.add(3, "send", "a", "b", "JoinReq", "00" * 8, "direct_ip")
        trace.add(4, "deliver", "a", "b", "JoinReq", "00" * 8)
        text = trace.render()
        assert text.splitlines()[1] == "4 | deliver | a | b | JoinReq | 0000000000000000 | -"
        assert Trace.parse(text).render() == text

    def test_select_and_count(self):
        trace = Trace()
        trace.add(1, "send", "a", "b", "JoinReq")
        trace.add(2, "send", "b", "c", "JoinCert")
        trace.add(3, "reject", "b", "c", "JoinCert", detail="SignatureInvalid")
        assert trace.count(kind="send") == 2
        assert trace.count(msg_type="JoinCert") == 2
        assert trace.count(detail="SignatureInvalid") == 1

    def test_separator_in_field_is_escaped(self):
        assert TraceLine(0, "script", detail="a|b").render().endswith("a/b")

    def test_detail_follows_the_six_base_fields(self):
        line = TraceLine(7, "reject", "vault", "gw", "ValidationReq", "ab" * 8, "NotAuthorized").render()
        fields = line.split(" | ")
        assert fields[:6] == ["7", "reject", "vault", "gw", "ValidationReq", "ab" * 8]
        assert fields[6:] == ["NotAuthorized"]

    def test_bad_line(self):
        with pytest.raises(ValueError):
            TraceLine.parse("1 | send")

    def test_diff(self):
        assert diff_traces("a\nb\n", "a\nb\n") == []
        assert any(line.startswith("+c") for line in diff_traces("a\nb\n", "a\nc\n"))
