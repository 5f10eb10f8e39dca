"""Fabric tests: clock ordering, routing rules, trace discipline, taps."""

import json

import pytest
from hypothesis import given, strategies as st

from echo_testbed.netsim import (
    EVENT_BUDGET,
    HOP_MS,
    WAN_MS,
    BudgetExceeded,
    NetError,
    Network,
    PairingNetwork,
    Scheduler,
    TraceLog,
)


# ---------------------------------------------------------------------------
# Scheduler

class TestScheduler:
    def test_time_order(self):
        sched = Scheduler()
        order = []
        sched.at(5, order.append, "b")
        sched.at(1, order.append, "a")
        sched.at(9, order.append, "c")
        sched.run_until_idle()
        assert order == ["a", "b", "c"]
        assert sched.now == 9

    def test_ties_break_by_insertion(self):
        sched = Scheduler()
        order = []
        for tag in "abcde":
            sched.at(3, order.append, tag)
        sched.run_until_idle()
        assert order == list("abcde")

    def test_nested_scheduling(self):
        sched = Scheduler()
        seen = []

        def first():
            seen.append(sched.now)
            sched.at(10, lambda: seen.append(sched.now))

        sched.at(2, first)
        sched.run_until_idle()
        assert seen == [2, 12]

    def test_negative_delay_rejected(self):
        with pytest.raises(ValueError):
            Scheduler().at(-1, lambda: None)

    def test_budget_guard(self):
        sched = Scheduler()

        def forever():
            sched.at(1, forever)

        sched.at(0, forever)
        with pytest.raises(BudgetExceeded):
            sched.run_until_idle(budget=500)

    def test_default_budget_value(self):
        assert EVENT_BUDGET == 10 ** 6

    @given(delays=st.lists(st.integers(min_value=0, max_value=10_000), min_size=1,
                           max_size=50))
    def test_dispatch_never_reorders_time(self, delays):
        sched = Scheduler()
        fired = []
        for d in delays:
            sched.at(d, fired.append, d)
        sched.run_until_idle()
        assert fired == sorted(fired)


# ---------------------------------------------------------------------------
# Topology and routing

def two_lan_net():
    net = Network()
    net.add_lan("home", "10.0.0", nat=True)
    net.add_lan("cloud", "172.16.0")
    dev = net.add_host("device")
    api = net.add_host("api")
    net.attach(dev, "home")
    net.attach(api, "cloud")
    return net, dev, api


class TestRouting:
    def test_lowest_free_assignment(self):
        net = Network()
        net.add_lan("home", "10.0.0")
        a, b, c = (net.add_host(n) for n in "abc")
        assert net.attach(a, "home") == "10.0.0.1"
        assert net.attach(b, "home") == "10.0.0.2"
        net.detach(a, "home")
        assert net.attach(c, "home") == "10.0.0.1"

    def test_outbound_through_nat_allowed(self):
        net, dev, api = two_lan_net()
        api.listen(443, lambda ep: None)
        end = net.open_channel(dev, api.addr("cloud"), 443)
        assert end.lan_name == "home"

    def test_inbound_to_nat_refused(self):
        net, dev, api = two_lan_net()
        dev.listen(8080, lambda ep: None)
        with pytest.raises(NetError, match="NAT"):
            net.open_channel(api, dev.addr("home"), 8080)

    def test_same_lan_ignores_nat(self):
        net, dev, _ = two_lan_net()
        phone = net.add_host("phone")
        net.attach(phone, "home")
        dev.listen(8080, lambda ep: None)
        end = net.open_channel(phone, dev.addr("home"), 8080)
        assert end.channel.latency == HOP_MS

    def test_cross_lan_latency(self):
        net, dev, api = two_lan_net()
        api.listen(443, lambda ep: None)
        end = net.open_channel(dev, api.addr("cloud"), 443)
        assert end.channel.latency == WAN_MS

    def test_isolated_lan_unreachable_from_outside(self):
        net, dev, api = two_lan_net()
        net.add_lan("island", "192.168.50", isolated=True)
        iso = net.add_host("iso")
        net.attach(iso, "island")
        iso.listen(80, lambda ep: None)
        with pytest.raises(NetError, match="isolated"):
            net.open_channel(api, iso.addr("island"), 80)

    def test_isolated_host_cannot_reach_out(self):
        net, dev, api = two_lan_net()
        net.add_lan("island", "192.168.50", isolated=True)
        iso = net.add_host("iso")
        net.attach(iso, "island")
        api.listen(443, lambda ep: None)
        with pytest.raises(NetError, match="no route"):
            net.open_channel(iso, api.addr("cloud"), 443)

    def test_refused_without_listener(self):
        net, dev, api = two_lan_net()
        with pytest.raises(NetError, match="refused"):
            net.open_channel(dev, api.addr("cloud"), 9999)

    def test_unknown_address(self):
        net, dev, _ = two_lan_net()
        with pytest.raises(NetError, match="no host"):
            net.open_channel(dev, "203.0.113.7", 80)

    def test_lookup_requires_route(self):
        net, dev, api = two_lan_net()
        net.register_name("api.example", api.addr("cloud"))
        assert net.lookup("api.example", dev) == api.addr("cloud")
        net.add_lan("island", "192.168.50", isolated=True)
        iso = net.add_host("iso")
        net.attach(iso, "island")
        with pytest.raises(NetError, match="resolver"):
            net.lookup("api.example", iso)


# ---------------------------------------------------------------------------
# Channels, trace, taps

class TestChannels:
    def test_message_round_trip_and_latency(self):
        net, dev, api = two_lan_net()
        got = []
        api.listen(443, lambda ep: setattr(
            ep, "handler", lambda e, data: got.append((net.scheduler.now, data))))
        end = net.open_channel(dev, api.addr("cloud"), 443)
        end.send(b"hello", layer="control", summary="hi")
        net.run()
        assert got == [(WAN_MS, b"hello")]

    def test_reply_goes_back(self):
        net, dev, api = two_lan_net()

        def accept(server_end):
            server_end.handler = lambda e, data: e.send(b"pong", "control", "pong")

        api.listen(443, accept)
        end = net.open_channel(dev, api.addr("cloud"), 443)
        replies = []
        end.handler = lambda e, data: replies.append(data)
        end.send(b"ping", "control", "ping")
        net.run()
        assert replies == [b"pong"]

    def test_trace_event_fields(self):
        net, dev, api = two_lan_net()
        api.listen(443, lambda ep: None)
        end = net.open_channel(dev, api.addr("cloud"), 443)
        end.send(b"x", "control", "probe", payload={"n": 1})
        ev = net.trace.events[-1]
        assert (ev.src, ev.dst, ev.lan) == ("device", "api", "cloud")
        assert ev.layer == "control"
        assert ev.payload == {"n": 1}
        line = json.loads(ev.to_json())
        assert line["summary"] == "probe"

    def test_secured_channel_hides_payload(self):
        net, dev, api = two_lan_net()
        api.listen(443, lambda ep: None)
        end = net.open_channel(dev, api.addr("cloud"), 443, secured=True)
        end.send(b"secret", "control", "handshake", payload={"leak": "no"})
        ev = net.trace.events[-1]
        assert ev.secured
        assert ev.payload is None

    def test_tap_sees_plaintext_only_when_unsecured(self):
        net, dev, api = two_lan_net()
        api.listen(443, lambda ep: None)
        seen = []
        net.add_tap("cloud", seen.append)
        open_end = net.open_channel(dev, api.addr("cloud"), 443)
        open_end.send(b"clear", "control", "a")
        sec_end = net.open_channel(dev, api.addr("cloud"), 443, secured=True)
        sec_end.send(b"hidden", "control", "b")
        net.run()
        assert seen[0].data == b"clear"
        assert seen[1].data is None
        assert seen[1].length == len(b"hidden")

    def test_tap_runs_before_destination_handler(self):
        net, dev, api = two_lan_net()
        order = []
        api.listen(443, lambda ep: setattr(
            ep, "handler", lambda e, d: order.append("handler")))
        net.add_tap("cloud", lambda obs: order.append("tap"))
        end = net.open_channel(dev, api.addr("cloud"), 443)
        end.send(b"x", "control", "x")
        net.run()
        assert order == ["tap", "handler"]

    def test_send_after_close_raises(self):
        net, dev, api = two_lan_net()
        api.listen(443, lambda ep: None)
        end = net.open_channel(dev, api.addr("cloud"), 443)
        end.close()
        with pytest.raises(NetError, match="closed"):
            end.send(b"x", "control", "x")

    def test_close_notifies_peer(self):
        net, dev, api = two_lan_net()
        closed = []
        api.listen(443, lambda ep: setattr(ep, "on_close", lambda e: closed.append(True)))
        end = net.open_channel(dev, api.addr("cloud"), 443)
        end.close()
        net.run()
        assert closed == [True]

    def test_detach_closes_channels(self):
        net, dev, api = two_lan_net()
        api.listen(443, lambda ep: None)
        end = net.open_channel(dev, api.addr("cloud"), 443)
        net.detach(dev, "home")
        assert end.closed

    def test_in_flight_message_survives_close(self):
        # hang up right after sending: the wire still carries the last frame,
        # and the peer hears it before the close notice
        net, dev, api = two_lan_net()
        order = []
        def accept(ep):
            ep.handler = lambda e, d: order.append(("data", d))
            ep.on_close = lambda e: order.append(("closed", None))
        api.listen(443, accept)
        end = net.open_channel(dev, api.addr("cloud"), 443)
        end.send(b"x", "control", "x")
        end.close()
        net.run()
        assert order == [("data", b"x"), ("closed", None)]


# ---------------------------------------------------------------------------
# Pairing micro-network

class TestPairingNetwork:
    def test_owner_at_dot_one_and_announce_once(self):
        net = Network()
        dev = net.add_host("device")
        pair = PairingNetwork(net, dev, "Amazon-ABC")
        assert pair.owner_addr.endswith(".1")
        announces = net.trace.find(layer="sys", summary_prefix="announce:")
        assert len(announces) == 1
        assert announces[0].summary == "announce:Amazon-ABC"

    def test_isolated_from_internet(self):
        net = Network()
        net.add_lan("cloud", "172.16.0")
        api = net.add_host("api")
        net.attach(api, "cloud")
        api.listen(443, lambda ep: None)
        dev = net.add_host("device")
        pair = PairingNetwork(net, dev, "Amazon-ABC")
        phone = net.add_host("phone")
        pair.join(phone)
        with pytest.raises(NetError):
            net.open_channel(phone, api.addr("cloud"), 443)

    def test_teardown_frees_prefix_for_reuse(self):
        net = Network()
        dev = net.add_host("device")
        pair1 = PairingNetwork(net, dev, "Amazon-ABC")
        prefix = pair1.lan.prefix
        pair1.teardown()
        pair2 = PairingNetwork(net, dev, "Amazon-DEF")
        assert pair2.lan.prefix == prefix

    def test_join_assigns_above_owner(self):
        net = Network()
        dev = net.add_host("device")
        pair = PairingNetwork(net, dev, "Amazon-ABC")
        phone = net.add_host("phone")
        assert pair.join(phone).endswith(".2")


# ---------------------------------------------------------------------------
# Trace log shape

class TestTrace:
    def test_jsonl_round_trips(self):
        log = TraceLog()
        log.record(0, "a", "b", "home", False, "sys", "hello", {"k": 1})
        log.record(1, "b", "a", "home", True, "sip", "INVITE", {"hidden": True})
        lines = log.jsonl().strip().split("\n")
        first, second = (json.loads(ln) for ln in lines)
        assert first["payload"] == {"k": 1}
        assert "payload" not in second  # secured events never carry payloads
        assert [e["seq"] for e in (first, second)] == [0, 1]

    def test_unknown_layer_rejected(self):
        log = TraceLog()
        with pytest.raises(ValueError):
            log.record(0, "a", "b", "l", False, "bogus", "x")
