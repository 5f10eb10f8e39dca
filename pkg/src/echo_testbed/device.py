"""The emulated smart speaker.

Lifecycle: factory -> setup -> online.

In setup mode the device hosts its own temporary Wi-Fi network (SSID
"Amazon-" + the tail of its serial), serves the pairing HTTP API on 8080,
and proxies the companion app's cloud connection on 443. Once it holds
both Wi-Fi credentials and a registration grant it tears the setup
network down, opens an authenticated connection to the voice service,
and provisions comms.

The pairing API is plain HTTP on an open network; what protects the
Wi-Fi passphrase is that the phone encrypts it to the certificate from
getDeviceDetails, and what protects the account is that registration
happens through the 443 tunnel. Everything else on 8080 is readable by
anyone parked on the setup network, which is the point the adversarial
scenarios make.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from . import crypto, wire
from .calling import SIP_DOMAIN, CommsEndpoint
from .netsim import Endpoint, NetError, Network, PairingNetwork

OOBE_PORT = 8080
PROXY_PORT = 443
WIFI_CONNECT_MS = 300
LINK_POLL_MS = 2000
LINK_POLL_MAX = 280          # polls; keeps a forgotten device quiescent
SETUP_TEARDOWN_MS = 5        # let the final reply drain first

DEVICE_TYPE = "emu-speaker-1"

API_NAME = f"api.{SIP_DOMAIN}"
AVS_NAME = f"avs.{SIP_DOMAIN}"


@dataclass(frozen=True)
class WifiNetwork:
    ssid: str
    lan_name: str
    passphrase: str
    security: str = "wpa2"
    signal: int = -50


class WifiNetworkTable:
    """What the device's radio can see: SSIDs mapped to fabric LANs."""

    def __init__(self, networks: list[WifiNetwork] | None = None):
        self.networks = list(networks or [])

    def add(self, net: WifiNetwork) -> None:
        self.networks.append(net)

    def scan(self) -> list[dict]:
        return [{"ssid": n.ssid, "security": n.security, "signal": n.signal}
                for n in self.networks]

    def find(self, ssid: str) -> WifiNetwork | None:
        for n in self.networks:
            if n.ssid == ssid:
                return n
        return None


class EchoDevice:
    def __init__(self, network: Network, serial: str, rng,
                 wifi_table: WifiNetworkTable, name: str | None = None, *,
                 intercom: bool = True, answer_delay_ms: int = 400,
                 frame_count: int = 6, auto_bye: bool = True):
        self.network = network
        self.serial = serial
        self.rng = rng
        self.wifi_table = wifi_table
        self.host = network.add_host(name or f"echo-{serial[-4:]}")
        self.keypair = crypto.keygen(rng)          # factory identity
        self.cert = crypto.self_sign(self.keypair, serial)
        self.device_secret = rng.randbytes(16).hex()
        self.mode = "factory"                      # factory|setup|online
        self.wifi_state = "disconnected"           # disconnected|connecting|connected
        self.home_lan: str | None = None
        self.grant: dict | None = None
        self.identity: crypto.AsymKeypair | None = None  # granted, post-pairing
        self.pairing: PairingNetwork | None = None
        self.link_code: str | None = None
        self.comms = CommsEndpoint(network, self.host, serial, rng,
                                   intercom=intercom,
                                   answer_delay_ms=answer_delay_ms,
                                   frame_count=frame_count, auto_bye=auto_bye)
        self.avs: Endpoint | None = None
        self.last_negotiation: bytes | None = None
        self._api: Endpoint | None = None
        self._api_waiters: list = []
        self._pending_oobe: tuple[Endpoint, str] | None = None
        self._poll_count = 0
        self._tunnels: dict[int, Endpoint] = {}    # tunnel cid -> upstream

    @property
    def ssid(self) -> str:
        return f"Amazon-{self.serial[-3:]}"

    @property
    def registration_state(self) -> str:
        if self.grant is not None:
            return "registered"
        if self.link_code is not None:
            return "pending"
        return "none"

    # -- lifecycle -----------------------------------------------------------

    def enter_setup(self) -> PairingNetwork:
        if self.pairing is not None:
            return self.pairing
        self.mode = "setup"
        self.pairing = PairingNetwork(self.network, self.host, self.ssid)
        self.host.listen(OOBE_PORT, self._accept_oobe)
        self.host.listen(PROXY_PORT, self._accept_tunnel)
        self.network.note(self.host, "sys", "mode:setup", lan=self.pairing.lan.name)
        return self.pairing

    def provision_paired(self, lan_name: str, grant: dict) -> None:
        """Start a scenario after first-time setup: on Wi-Fi, registered."""
        self.network.attach(self.host, lan_name)
        self.home_lan = lan_name
        self.wifi_state = "connected"
        self._adopt_grant(grant)
        self.mode = "online"
        self.connect_avs()

    def _adopt_grant(self, grant: dict) -> None:
        self.grant = grant
        self.identity = crypto.AsymKeypair.from_dict(grant["keypair"])
        self.network.note(self.host, "sys", "grant:stored",
                          payload={"friendly_name": grant["friendly_name"]})

    # -- pairing API (port 8080) ----------------------------------------------

    def _accept_oobe(self, chan: Endpoint) -> None:
        chan.handler = lambda end, data: self._on_oobe(end, data)

    def _on_oobe(self, chan: Endpoint, data: bytes) -> None:
        try:
            env = wire.oobe_decode(wire.http_parse(data))
        except wire.WireError as exc:
            self._oobe_reply(chan, "error", {"error": str(exc)}, status=400)
            return
        handler = {
            "ping": self._oobe_ping,
            "getDeviceDetails": self._oobe_details,
            "getScanList": self._oobe_scan,
            "connectToAP": self._oobe_connect,
            "getRegistrationState": self._oobe_reg_state,
            "getLinkCode": self._oobe_link_code,
            "setupComplete": self._oobe_setup_complete,
        }.get(env.method)
        if handler is None:
            self._oobe_reply(chan, env.method, {"error": "unknown method"}, status=400)
            return
        handler(chan, env.args)

    def _oobe_reply(self, chan: Endpoint, method: str, args: dict,
                    status: int = 200) -> None:
        ok = status == 200 and "error" not in args
        resp = wire.oobe_response(wire.OobeEnvelope(method=method, args=args),
                                  status=status, reason="OK" if ok else "Refused")
        if not chan.closed:
            chan.send(wire.http_serialize(resp), layer="oobe",
                      summary=f"{method}-{'ok' if ok else 'error'}")

    def _oobe_ping(self, chan: Endpoint, args: dict) -> None:
        self._oobe_reply(chan, "ping", {"pong": True})

    def _oobe_details(self, chan: Endpoint, args: dict) -> None:
        self._oobe_reply(chan, "getDeviceDetails", {
            "serial": self.serial, "device_type": DEVICE_TYPE,
            "firmware": "595202420", "certificate": self.cert.to_dict()})

    def _oobe_scan(self, chan: Endpoint, args: dict) -> None:
        self._oobe_reply(chan, "getScanList", {"networks": self.wifi_table.scan()})

    def _oobe_connect(self, chan: Endpoint, args: dict) -> None:
        armor = args.get("credential", "")
        try:
            blob = crypto.EncryptedCredentialBlob.from_armor(armor)
            cred = crypto.decrypt_credential(blob, self.keypair)
        except crypto.CryptoError:
            self._oobe_reply(chan, "connectToAP", {"error": "credential-invalid"},
                             status=400)
            return
        if cred.ssid != args.get("ssid"):
            self._oobe_reply(chan, "connectToAP", {"error": "ssid-mismatch"}, status=400)
            return
        entry = self.wifi_table.find(cred.ssid)
        if entry is None:
            self._oobe_reply(chan, "connectToAP", {"error": "no-such-network"},
                             status=400)
            return
        if entry.passphrase != cred.passphrase:
            self._oobe_reply(chan, "connectToAP", {"error": "auth-failed"}, status=403)
            return
        self.wifi_state = "connecting"
        self.network.scheduler.at(WIFI_CONNECT_MS, self._wifi_up, entry.lan_name)
        self._oobe_reply(chan, "connectToAP", {"status": "connecting"})

    def _wifi_up(self, lan_name: str) -> None:
        if self.wifi_state != "connecting":
            return
        self.network.attach(self.host, lan_name)
        self.home_lan = lan_name
        self.wifi_state = "connected"
        self.network.note(self.host, "sys", "mode:wifi-connected",
                          payload={"lan": lan_name})

    def _oobe_reg_state(self, chan: Endpoint, args: dict) -> None:
        out = {"network": self.wifi_state, "registration": self.registration_state}
        if self.grant is not None:
            out["friendly_name"] = self.grant["friendly_name"]
        self._oobe_reply(chan, "getRegistrationState", out)

    def _oobe_link_code(self, chan: Endpoint, args: dict) -> None:
        if self.wifi_state != "connected":
            self._oobe_reply(chan, "getLinkCode", {"error": "not-online"}, status=400)
            return
        if self.link_code is not None:
            self._oobe_reply(chan, "getLinkCode", {"code": self.link_code})
            return
        self._pending_oobe = (chan, "getLinkCode")
        self._api_call("createLinkCode",
                       {"serial": self.serial, "secret": self.device_secret},
                       self._on_link_code_created)

    def _on_link_code_created(self, args: dict) -> None:
        pending, self._pending_oobe = self._pending_oobe, None
        if "code" not in args:
            if pending is not None:
                self._oobe_reply(pending[0], "getLinkCode",
                                 {"error": args.get("error", "refused")}, status=403)
            return
        self.link_code = args["code"]
        self._poll_count = 0
        self.network.scheduler.at(LINK_POLL_MS, self._poll_link_code)
        if pending is not None:
            self._oobe_reply(pending[0], "getLinkCode", {"code": self.link_code})

    def _poll_link_code(self) -> None:
        if self.grant is not None or self.link_code is None:
            return
        if self._poll_count >= LINK_POLL_MAX:
            self.network.note(self.host, "sys", "link-code:gave-up")
            return
        self._poll_count += 1
        self._api_call("checkLinkCode",
                       {"code": self.link_code, "secret": self.device_secret},
                       self._on_link_code_checked)

    def _on_link_code_checked(self, args: dict) -> None:
        status = args.get("status")
        if status == "registered":
            self._adopt_grant(args["grant"])
        elif status == "pending":
            self.network.scheduler.at(LINK_POLL_MS, self._poll_link_code)
        elif status == "expired":
            self.link_code = None
            self.network.note(self.host, "sys", "link-code:expired")

    def _oobe_setup_complete(self, chan: Endpoint, args: dict) -> None:
        if self.grant is None:
            self._oobe_reply(chan, "setupComplete", {"error": "not-registered"},
                             status=400)
            return
        self._oobe_reply(chan, "setupComplete", {"ok": True})
        self.network.scheduler.at(SETUP_TEARDOWN_MS, self._leave_setup)

    def _leave_setup(self) -> None:
        if self.pairing is None:
            return
        self.host.unlisten(OOBE_PORT)
        self.host.unlisten(PROXY_PORT)
        if self._api is not None and not self._api.closed:
            self._api.close()
            self._api = None
        self.pairing.teardown()
        self.pairing = None
        self.mode = "online"
        self.network.note(self.host, "sys", "mode:paired",
                          payload={"friendly_name": self.grant["friendly_name"]})
        self.connect_avs()

    # -- cloud device API client ------------------------------------------------

    def _api_call(self, method: str, args: dict, cb) -> None:
        try:
            if self._api is None or self._api.closed:
                addr = self.network.lookup(API_NAME, self.host)
                self._api = self.network.open_channel(self.host, addr, 443,
                                                      secured=True)
                self._api.handler = lambda end, data: self._on_api_data(data)
                self._api_waiters = []
        except NetError:
            cb({"error": "cloud-unreachable"})
            return
        self._api_waiters.append(cb)
        req = wire.http_serialize(wire.api_encode(wire.OobeEnvelope(method, args)))
        self._api.send(req, layer="http", summary=method)

    def _on_api_data(self, data: bytes) -> None:
        try:
            env = wire.oobe_decode_response(wire.http_parse(data))
        except wire.WireError:
            return
        if self._api_waiters:
            self._api_waiters.pop(0)(env.args)

    # -- registration tunnel (port 443) -----------------------------------------

    def _accept_tunnel(self, chan: Endpoint) -> None:
        chan.handler = lambda end, data: self._tunnel_open(end, data)
        chan.on_close = lambda end: self._tunnel_close(end)

    def _tunnel_open(self, chan: Endpoint, data: bytes) -> None:
        try:
            req = wire.http_parse(data)
        except wire.WireError:
            chan.close()
            return
        if req.kind != "request" or req.method != "CONNECT" or ":" not in req.path:
            chan.close()
            return
        name, _, port = req.path.partition(":")
        try:
            addr = self.network.lookup(name, self.host)
            upstream = self.network.open_channel(self.host, addr, int(port),
                                                 secured=True)
        except NetError:
            err = wire.HttpMessage(kind="response", status=502, reason="Bad Gateway",
                                   headers=[], body=b"")
            chan.send(wire.http_serialize(err), layer="http", summary="CONNECT-error")
            chan.close()
            return
        self._tunnels[chan.channel.cid] = upstream
        upstream.handler = lambda end, d: self._tunnel_down(chan, d)
        upstream.on_close = lambda end: chan.close() if not chan.closed else None
        chan.handler = lambda end, d: self._tunnel_up(upstream, d)
        ok = wire.HttpMessage(kind="response", status=200,
                              reason="Connection Established", headers=[], body=b"")
        chan.send(wire.http_serialize(ok), layer="http", summary="CONNECT-ok")

    def _tunnel_up(self, upstream: Endpoint, data: bytes) -> None:
        if not upstream.closed:
            upstream.send(data, layer="http", summary="tunnel-data")

    def _tunnel_down(self, chan: Endpoint, data: bytes) -> None:
        if not chan.closed:
            chan.send(data, layer="http", summary="tunnel-data")

    def _tunnel_close(self, chan: Endpoint) -> None:
        upstream = self._tunnels.pop(chan.channel.cid, None)
        if upstream is not None and not upstream.closed:
            upstream.close()

    # -- voice-service connection -------------------------------------------------

    def connect_avs(self) -> None:
        if self.grant is None or self.identity is None:
            raise NetError("cannot connect without a registration grant")
        addr = self.network.lookup(AVS_NAME, self.host)
        self.avs = self.network.open_channel(self.host, addr, 443, secured=True)
        self.avs.handler = lambda end, data: self._on_avs(data)
        payload = self._negotiation_payload()
        self.last_negotiation = wire.control_encode(wire.ControlMessage(
            interface="System", name="NegotiationCommand", payload=payload))
        self.avs.send(self.last_negotiation, layer="control",
                      summary="System.NegotiationCommand",
                      payload={"serial": self.serial})

    def _negotiation_payload(self) -> dict:
        body = {"auth_token": self.grant["auth_token"], "device_type": DEVICE_TYPE,
                "serial": self.serial, "timestamp": self.network.scheduler.now}
        signed = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
        body["signature"] = crypto.sign_detached(self.identity, signed).hex()
        return body

    def replay_negotiation(self) -> None:
        """Resend the captured handshake bytes on a fresh connection.

        Stands in for an attacker who recorded the exchange; the service
        must refuse the stale timestamp.
        """
        if self.last_negotiation is None:
            raise NetError("nothing captured to replay")
        addr = self.network.lookup(AVS_NAME, self.host)
        replay = self.network.open_channel(self.host, addr, 443, secured=True)
        replay.handler = lambda end, data: self._on_avs(data)
        replay.send(self.last_negotiation, layer="control",
                    summary="System.NegotiationCommand",
                    payload={"serial": self.serial, "replayed": True})

    def _on_avs(self, data: bytes) -> None:
        try:
            msg = wire.control_decode(data)
        except wire.WireError:
            return
        if msg.interface == "System":
            if msg.name == "NegotiationAccepted":
                self.network.note(self.host, "sys", "avs:connected")
                self.comms.provision(self.avs, self.grant["auth_token"])
            elif msg.name == "NegotiationRejected":
                reason = (msg.payload or {}).get("reason", "?")
                self.network.note(self.host, "sys", f"avs:refused:{reason}")
            elif msg.name == "Refresh":
                ack = wire.ControlMessage(interface="System", name="RefreshAck",
                                          payload={})
                self.avs.send(wire.control_encode(ack), layer="control",
                              summary="System.RefreshAck")
        elif msg.interface == "SipClient":
            self.comms.handle_control(msg)
