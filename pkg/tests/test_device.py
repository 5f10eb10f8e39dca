"""Device behavior: setup network, pairing API, tunnel, voice-service link."""

import json
import random

import pytest

from echo_testbed import crypto, wire
from echo_testbed.cli import load_scenario, run_scenario
from echo_testbed.client import WifiCredential
from echo_testbed.cloud import CloudServices
from echo_testbed.device import (
    EchoDevice,
    WifiNetwork,
    WifiNetworkTable,
)
from echo_testbed.netsim import NetError, Network

SERIAL = "EK-TEST-0001"
PASS = "wren-pass-7788"


def make_world():
    net = Network()
    net.add_lan("cloud", "10.0.0")
    net.add_lan("home", "192.168.50", nat=True)
    cloud = CloudServices(net, random.Random("t:cloud"))
    cloud.provision_account("alice", "pw-alice")
    table = WifiNetworkTable([WifiNetwork("Wren", "home", PASS)])
    dev = EchoDevice(net, SERIAL, random.Random("t:dev"), table)
    cloud.provision_factory(dev.serial, dev.cert, dev.device_secret)
    return net, cloud, dev


class OobeProbe:
    """Bare client parked on the setup network, speaking the 8080 API."""

    def __init__(self, net, pairing, name="probe"):
        self.net = net
        self.pairing = pairing
        self.host = net.add_host(name)
        pairing.join(self.host)
        self.replies = []

    def call(self, method, args=None):
        chan = self.net.open_channel(self.host, self.pairing.owner_addr, 8080)
        chan.handler = lambda end, data: self.replies.append(
            (wire.http_parse(data).status,
             wire.oobe_decode_response(wire.http_parse(data)).args))
        chan.send(wire.http_serialize(wire.oobe_encode(
            wire.OobeEnvelope(method, args or {}))), layer="oobe", summary=method)
        self.net.run()
        return self.replies[-1]


def cred_armor(dev, ssid, passphrase, rng=None):
    cred = WifiCredential(ssid=ssid, passphrase=passphrase)
    blob = crypto.encrypt_credential(cred, dev.cert, rng or random.Random("t:ph"))
    return blob.to_armor()


def connect_wifi(net, dev, probe):
    status, args = probe.call("connectToAP", {
        "ssid": "Wren", "credential": cred_armor(dev, "Wren", PASS)})
    assert status == 200 and args["status"] == "connecting"
    net.run()
    return args


# ---------------------------------------------------------------------------
# setup network lifecycle

def test_enter_setup_hosts_isolated_lan_as_dot_one():
    net, cloud, dev = make_world()
    pairing = dev.enter_setup()
    assert dev.mode == "setup"
    assert dev.ssid == "Amazon-001"
    assert pairing.lan.isolated
    assert pairing.owner_addr.endswith(".1")
    assert dev.enter_setup() is pairing  # idempotent
    announces = [e for e in net.trace.events if e.summary.startswith("announce:")]
    assert len(announces) == 1


def test_factory_device_is_unregistered():
    net, cloud, dev = make_world()
    assert dev.mode == "factory"
    assert dev.registration_state == "none"
    assert dev.grant is None and dev.identity is None


# ---------------------------------------------------------------------------
# pairing API

def test_ping_and_device_details():
    net, cloud, dev = make_world()
    probe = OobeProbe(net, dev.enter_setup())
    status, args = probe.call("ping")
    assert status == 200 and args == {"pong": True}
    status, args = probe.call("getDeviceDetails")
    assert status == 200
    assert args["serial"] == SERIAL
    cert = crypto.DeviceCertificate.from_dict(args["certificate"])
    assert crypto.verify_certificate(cert)
    assert cert.subject == SERIAL


def test_scan_list_mirrors_radio_table():
    net, cloud, dev = make_world()
    probe = OobeProbe(net, dev.enter_setup())
    status, args = probe.call("getScanList")
    assert status == 200
    assert [n["ssid"] for n in args["networks"]] == ["Wren"]


def test_unknown_method_rejected():
    net, cloud, dev = make_world()
    probe = OobeProbe(net, dev.enter_setup())
    status, args = probe.call("fooBar")
    assert status == 400 and args["error"] == "unknown method"


def test_connect_rejects_garbage_credential():
    net, cloud, dev = make_world()
    probe = OobeProbe(net, dev.enter_setup())
    status, args = probe.call("connectToAP",
                              {"ssid": "Wren", "credential": "AAAA"})
    assert status == 400 and args["error"] == "credential-invalid"
    assert dev.wifi_state == "disconnected"


def test_connect_rejects_ssid_mismatch():
    net, cloud, dev = make_world()
    probe = OobeProbe(net, dev.enter_setup())
    status, args = probe.call("connectToAP", {
        "ssid": "Other", "credential": cred_armor(dev, "Wren", PASS)})
    assert status == 400 and args["error"] == "ssid-mismatch"


def test_connect_rejects_unknown_network():
    net, cloud, dev = make_world()
    probe = OobeProbe(net, dev.enter_setup())
    status, args = probe.call("connectToAP", {
        "ssid": "Ghost", "credential": cred_armor(dev, "Ghost", PASS)})
    assert status == 400 and args["error"] == "no-such-network"


def test_connect_rejects_wrong_passphrase():
    net, cloud, dev = make_world()
    probe = OobeProbe(net, dev.enter_setup())
    status, args = probe.call("connectToAP", {
        "ssid": "Wren", "credential": cred_armor(dev, "Wren", "wrong-pass-1")})
    assert status == 403 and args["error"] == "auth-failed"
    assert "home" not in dev.host.interfaces


def test_connect_joins_home_lan():
    net, cloud, dev = make_world()
    probe = OobeProbe(net, dev.enter_setup())
    connect_wifi(net, dev, probe)
    assert dev.wifi_state == "connected"
    assert "home" in dev.host.interfaces
    notes = [e for e in net.trace.events if e.summary == "mode:wifi-connected"]
    assert len(notes) == 1 and notes[0].payload == {"lan": "home"}


def test_registration_state_progresses():
    net, cloud, dev = make_world()
    probe = OobeProbe(net, dev.enter_setup())
    status, args = probe.call("getRegistrationState")
    assert args == {"network": "disconnected", "registration": "none"}
    connect_wifi(net, dev, probe)
    status, args = probe.call("getRegistrationState")
    assert args == {"network": "connected", "registration": "none"}


def test_link_code_requires_wifi_first():
    net, cloud, dev = make_world()
    probe = OobeProbe(net, dev.enter_setup())
    status, args = probe.call("getLinkCode")
    assert status == 400 and args["error"] == "not-online"


def test_link_code_minted_once_and_polling_starts():
    net, cloud, dev = make_world()
    probe = OobeProbe(net, dev.enter_setup())
    connect_wifi(net, dev, probe)
    status, args = probe.call("getLinkCode")
    assert status == 200
    code = args["code"]
    assert dev.link_code == code and code in cloud.link_codes
    assert dev.registration_state == "pending"
    # a second ask returns the same code without a second mint
    status, args = probe.call("getLinkCode")
    assert args["code"] == code
    mints = [e for e in net.trace.events if e.summary == "createLinkCode"]
    assert len(mints) == 1


def test_unregistered_device_eventually_gives_up_polling():
    net, cloud, dev = make_world()
    probe = OobeProbe(net, dev.enter_setup())
    connect_wifi(net, dev, probe)
    probe.call("getLinkCode")
    net.run()  # drain all 280 polls to quiescence
    assert any(e.summary == "link-code:gave-up" for e in net.trace.events)
    assert dev.grant is None


def test_stale_link_code_expires_at_the_service(monkeypatch):
    monkeypatch.setattr("echo_testbed.device.LINK_POLL_MAX", 10_000)
    net, cloud, dev = make_world()
    probe = OobeProbe(net, dev.enter_setup())
    connect_wifi(net, dev, probe)
    probe.call("getLinkCode")
    net.run()
    assert any(e.summary == "link-code:expired" for e in net.trace.events)
    assert dev.link_code is None


def test_setup_complete_refused_before_registration():
    net, cloud, dev = make_world()
    probe = OobeProbe(net, dev.enter_setup())
    status, args = probe.call("setupComplete")
    assert status == 400 and args["error"] == "not-registered"


# ---------------------------------------------------------------------------
# registration tunnel

def tunnel_probe(net, pairing, name="probe"):
    probe = OobeProbe(net, pairing, name)
    chan = net.open_channel(probe.host, pairing.owner_addr, 443)
    inbox = []
    chan.handler = lambda end, data: inbox.append(data)
    closed = []
    chan.on_close = lambda end: closed.append(True)
    return chan, inbox, closed


def test_tunnel_relays_to_cloud_api():
    net, cloud, dev = make_world()
    pairing = dev.enter_setup()
    probe = OobeProbe(net, pairing, "wifi-helper")
    connect_wifi(net, dev, probe)  # the device can't resolve names before this
    chan, inbox, closed = tunnel_probe(net, pairing)
    connect = wire.HttpMessage(kind="request", method="CONNECT",
                               path="api.echo.example:443", headers=[], body=b"")
    chan.send(wire.http_serialize(connect), layer="http", summary="CONNECT")
    net.run()
    assert wire.http_parse(inbox[0]).status == 200
    # relay something the API will answer, end to end
    req = wire.api_encode(wire.OobeEnvelope("registerDevice", {}))
    chan.send(wire.http_serialize(req), layer="http", summary="registerDevice")
    net.run()
    env = wire.oobe_decode_response(wire.http_parse(inbox[1]))
    assert "error" in env.args
    # the upstream leg is a secured channel; payloads there stay hidden
    upstream = [e for e in net.trace.events
                if e.lan == "cloud" and e.summary == "tunnel-data"]
    assert upstream and all(ev.secured and ev.payload is None for ev in upstream)


def test_tunnel_unknown_upstream_is_502():
    net, cloud, dev = make_world()
    chan, inbox, closed = tunnel_probe(net, dev.enter_setup())
    connect = wire.HttpMessage(kind="request", method="CONNECT",
                               path="nowhere.example:443", headers=[], body=b"")
    chan.send(wire.http_serialize(connect), layer="http", summary="CONNECT")
    net.run()
    assert wire.http_parse(inbox[0]).status == 502
    assert closed


def test_tunnel_rejects_non_connect_preamble():
    net, cloud, dev = make_world()
    chan, inbox, closed = tunnel_probe(net, dev.enter_setup())
    req = wire.HttpMessage(kind="request", method="GET", path="/", headers=[],
                           body=b"")
    chan.send(wire.http_serialize(req), layer="http", summary="GET")
    net.run()
    assert closed and not inbox


# ---------------------------------------------------------------------------
# post-pairing state and the voice-service link

def test_provision_paired_brings_up_comms():
    net, cloud, dev = make_world()
    grant = cloud.provision_grant(SERIAL, "alice")
    dev.provision_paired("home", grant)
    net.run()
    assert dev.mode == "online"
    assert dev.identity.to_dict() == grant["keypair"]
    summaries = [e.summary for e in net.trace.events]
    assert "avs:connected" in summaries
    assert f"sip:bind:{SERIAL}" in " ".join(summaries) or any(
        s.startswith("sip:bind") for s in summaries)


def test_negotiation_payload_is_signed_by_granted_identity():
    net, cloud, dev = make_world()
    grant = cloud.provision_grant(SERIAL, "alice")
    dev.provision_paired("home", grant)
    net.run()
    msg = wire.control_decode(dev.last_negotiation)
    assert (msg.interface, msg.name) == ("System", "NegotiationCommand")
    body = dict(msg.payload)
    sig = bytes.fromhex(body.pop("signature"))
    signed = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    assert crypto.verify_detached(dev.identity.public, signed, sig)
    assert not crypto.verify_detached(dev.keypair.public, signed, sig)


def test_replay_without_capture_refused():
    net, cloud, dev = make_world()
    with pytest.raises(NetError, match="nothing captured"):
        dev.replay_negotiation()


def test_connect_avs_requires_grant():
    net, cloud, dev = make_world()
    with pytest.raises(NetError, match="grant"):
        dev.connect_avs()


def test_refresh_round_trip():
    net, cloud, dev = make_world()
    dev.provision_paired("home", cloud.provision_grant(SERIAL, "alice"))
    net.run()
    cloud.refresh(SERIAL)
    net.run()
    summaries = [e.summary for e in net.trace.events]
    assert "System.Refresh" in summaries
    assert "System.RefreshAck" in summaries


def test_pair_scenario_leaves_no_setup_residue():
    result = run_scenario(load_scenario("pair"))
    assert result.exit_code == 0
    dev = result.world.devices["EK-KITCH-0001"]
    net = result.world.network
    assert dev.mode == "online" and dev.pairing is None
    assert 8080 not in dev.host.listeners and 443 not in dev.host.listeners
    assert not any(name.startswith("pair:") for name in net.lans)
    # the torn-down prefix went back to the front of the pool
    assert net._pairing_prefixes[0] == "192.168.11"
