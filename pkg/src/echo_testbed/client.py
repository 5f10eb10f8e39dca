"""Phone-side actors: the companion app that pairs a device, and the two
adversaries from the threat model.

The companion app walks the whole first-time-setup dialogue: probe the
device, encrypt the home Wi-Fi credential to its certificate, fetch a
link code, register the device to an account through the 443 tunnel,
and close with setupComplete.

The eavesdropper sits passively on the open setup network. It recovers
exactly what the protocol leaks there: the link code and the encrypted
credential blob. It can never produce the passphrase, and the tunneled
registration shows it nothing but lengths.

The hijacker extends that with its own internet uplink and an account:
the moment the link code flashes past, it races the owner's registration
call. Whether the race matters is decided server-side, by whether the
device is still bound to an account.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from . import crypto, wire
from .netsim import Endpoint, NetError, Network, Observation, PairingNetwork

OOBE_PORT = 8080
TUNNEL_PORT = 443
REG_POLL_MS = 200
REG_POLL_MAX = 60

API_NAME = "api.echo.example"


@dataclass(frozen=True)
class WifiCredential:
    """An SSID plus what it takes to join it."""

    ssid: str
    passphrase: str
    security: str = "wpa2"

    def validate(self) -> None:
        if not 1 <= len(self.ssid) <= 32:
            raise ValueError("ssid must be 1..32 characters")
        if self.security == "wpa2" and not 8 <= len(self.passphrase) <= 63:
            raise ValueError("wpa2 passphrase must be 8..63 characters")
        if self.security not in ("wpa2", "open"):
            raise ValueError(f"unknown security mode {self.security!r}")

    def canonical_bytes(self) -> bytes:
        return json.dumps({"ssid": self.ssid, "passphrase": self.passphrase,
                           "security": self.security},
                          sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_canonical_bytes(cls, data: bytes) -> "WifiCredential":
        try:
            obj = json.loads(data.decode("utf-8"))
            cred = cls(ssid=obj["ssid"], passphrase=obj["passphrase"],
                       security=obj["security"])
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise ValueError(f"not a credential: {exc}") from exc
        cred.validate()
        return cred


class CompanionApp:
    """Drives first-time setup against one device's pairing network."""

    def __init__(self, network: Network, name: str, account_id: str,
                 password: str, home_credential: WifiCredential, rng):
        self.network = network
        self.account_id = account_id
        self.password = password
        self.home_credential = home_credential
        self.rng = rng
        self.host = network.add_host(name)
        self.oobe: Endpoint | None = None
        self.tunnel: Endpoint | None = None
        self.device_cert: crypto.DeviceCertificate | None = None
        self.device_serial: str | None = None
        self.link_code: str | None = None
        self.outcome: str | None = None   # set when the flow ends
        self._device_addr: str | None = None
        self._reg_polls = 0
        self._tunnel_ready = False

    # -- wiring

    def join_home(self, lan_name: str) -> str:
        return self.network.attach(self.host, lan_name)

    def start_pairing(self, pairing: PairingNetwork) -> None:
        if pairing.lan.name not in self.host.interfaces:
            pairing.join(self.host)
        self._device_addr = pairing.owner_addr
        self.oobe = self.network.open_channel(self.host, self._device_addr, OOBE_PORT)
        self.oobe.handler = lambda end, data: self._on_oobe(data)
        self._send_oobe("ping", {})

    def _send_oobe(self, method: str, args: dict) -> None:
        req = wire.http_serialize(wire.oobe_encode(wire.OobeEnvelope(method, args)))
        self.oobe.send(req, layer="oobe", summary=method)

    # -- the setup dialogue, one reply at a time

    def _on_oobe(self, data: bytes) -> None:
        try:
            msg = wire.http_parse(data)
            env = wire.oobe_decode_response(msg)
        except wire.WireError:
            self._finish("protocol-error")
            return
        if "error" in env.args:
            self._finish(f"device-error:{env.args['error']}")
            return
        step = getattr(self, f"_after_{env.method}", None)
        if step is not None:
            step(env.args)

    def _after_ping(self, args: dict) -> None:
        self._send_oobe("getDeviceDetails", {})

    def _after_getDeviceDetails(self, args: dict) -> None:
        try:
            self.device_cert = crypto.DeviceCertificate.from_dict(args["certificate"])
        except (KeyError, crypto.CryptoError):
            self._finish("bad-certificate")
            return
        if not crypto.verify_certificate(self.device_cert):
            self._finish("bad-certificate")
            return
        self.device_serial = args.get("serial")
        self._send_oobe("getScanList", {})

    def _after_getScanList(self, args: dict) -> None:
        ssids = {n.get("ssid") for n in args.get("networks", [])}
        if self.home_credential.ssid not in ssids:
            self._finish("home-network-not-visible")
            return
        blob = crypto.encrypt_credential(self.home_credential, self.device_cert,
                                         self.rng)
        self._send_oobe("connectToAP", {"ssid": self.home_credential.ssid,
                                        "credential": blob.to_armor()})

    def _after_connectToAP(self, args: dict) -> None:
        self._reg_polls = 0
        self._poll_reg_state()

    def _poll_reg_state(self) -> None:
        if self._reg_polls >= REG_POLL_MAX:
            self._finish("timeout")
            return
        self._reg_polls += 1
        self._send_oobe("getRegistrationState", {})

    def _after_getRegistrationState(self, args: dict) -> None:
        network_state = args.get("network")
        reg_state = args.get("registration")
        if self.link_code is None:
            if network_state == "connected":
                self._send_oobe("getLinkCode", {})
            else:
                self.network.scheduler.at(REG_POLL_MS, self._poll_reg_state)
        elif reg_state == "registered":
            self._send_oobe("setupComplete", {})
        else:
            self.network.scheduler.at(REG_POLL_MS, self._poll_reg_state)

    def _after_getLinkCode(self, args: dict) -> None:
        self.link_code = args.get("code")
        self.network.note(self.host, "sys", "phone:link-code",
                          payload={"code": self.link_code})
        self._open_tunnel()

    def _after_setupComplete(self, args: dict) -> None:
        self._finish("paired")

    # -- registration through the device's 443 tunnel

    def _open_tunnel(self) -> None:
        self.tunnel = self.network.open_channel(self.host, self._device_addr,
                                                TUNNEL_PORT, secured=True)
        self.tunnel.handler = lambda end, data: self._on_tunnel(data)
        connect = wire.HttpMessage(kind="request", method="CONNECT",
                                   path=f"{API_NAME}:443", headers=[], body=b"")
        self.tunnel.send(wire.http_serialize(connect), layer="http", summary="CONNECT")

    def _on_tunnel(self, data: bytes) -> None:
        try:
            msg = wire.http_parse(data)
        except wire.WireError:
            self._finish("tunnel-error")
            return
        if not self._tunnel_ready:
            if msg.status != 200:
                self._finish("tunnel-refused")
                return
            self._tunnel_ready = True
            req = wire.api_encode(wire.OobeEnvelope("registerDevice", {
                "account": self.account_id, "password": self.password,
                "link_code": self.link_code}))
            self.tunnel.send(wire.http_serialize(req), layer="http",
                             summary="registerDevice")
            return
        try:
            env = wire.oobe_decode_response(msg)
        except wire.WireError:
            self._finish("tunnel-error")
            return
        if env.args.get("ok"):
            self.network.note(self.host, "sys", "phone:registered",
                              payload={"account": self.account_id})
            self.tunnel.close()
            self._reg_polls = 0
            self._poll_reg_state()
        else:
            self.network.note(self.host, "sys",
                              f"phone:register-failed:{env.args.get('error')}")
            self.tunnel.close()
            self._finish("register-failed")

    def _finish(self, outcome: str) -> None:
        if self.outcome is not None:
            return
        self.outcome = outcome
        self.network.note(self.host, "sys", f"phone:done:{outcome}")
        if self.oobe is not None and not self.oobe.closed:
            self.oobe.close()


class Eavesdropper:
    """Passive observer on the open setup network."""

    def __init__(self, network: Network, name: str):
        self.network = network
        self.host = network.add_host(name)
        self.link_code: str | None = None
        self.credential_armor: str | None = None
        self.secured_lengths: list[int] = []
        self.cleartext: list[bytes] = []

    def join(self, pairing: PairingNetwork) -> None:
        pairing.join(self.host)
        self.network.add_tap(pairing.lan.name, self._observe)

    def _observe(self, obs: Observation) -> None:
        if obs.data is None:
            self.secured_lengths.append(obs.length)
            return
        self.cleartext.append(obs.data)
        try:
            msg = wire.http_parse(obs.data)
        except wire.WireError:
            return
        if msg.kind == "request":
            try:
                env = wire.oobe_decode(msg)
            except wire.WireError:
                return
            if env.method == "connectToAP" and "credential" in env.args:
                self.credential_armor = env.args["credential"]
                self.network.note(self.host, "sys", "eavesdrop:credential",
                                  payload={"length": len(self.credential_armor)})
        else:
            try:
                env = wire.oobe_decode_response(msg)
            except wire.WireError:
                return
            if env.method == "getLinkCode" and "code" in env.args:
                self.on_link_code(env.args["code"])

    def on_link_code(self, code: str) -> None:
        if self.link_code is None:
            self.link_code = code
            self.network.note(self.host, "sys", f"eavesdrop:link-code:{code}")

    @property
    def recovered_passphrase(self) -> str | None:
        """What the captured material yields without the device's private
        key: nothing."""
        return None


class Hijacker(Eavesdropper):
    """Eavesdropper with an uplink and an account of its own."""

    def __init__(self, network: Network, name: str, account_id: str, password: str):
        super().__init__(network, name)
        self.account_id = account_id
        self.password = password
        self.result: str | None = None

    def bring_uplink(self, lan_name: str) -> str:
        """Attach the attacker's own internet path (cellular data)."""
        return self.network.attach(self.host, lan_name)

    def on_link_code(self, code: str) -> None:
        first_sighting = self.link_code is None
        super().on_link_code(code)
        if first_sighting:
            self._race_registration(code)

    def _race_registration(self, code: str) -> None:
        try:
            addr = self.network.lookup(API_NAME, self.host)
            chan = self.network.open_channel(self.host, addr, 443, secured=True)
        except NetError:
            self.result = "no-route"
            return
        chan.handler = lambda end, data: self._on_register_reply(data)
        req = wire.api_encode(wire.OobeEnvelope("registerDevice", {
            "account": self.account_id, "password": self.password,
            "link_code": code}))
        chan.send(wire.http_serialize(req), layer="http", summary="registerDevice")
        self.network.note(self.host, "sys", "hijack:submitted",
                          payload={"code": code})

    def _on_register_reply(self, data: bytes) -> None:
        try:
            env = wire.oobe_decode_response(wire.http_parse(data))
        except wire.WireError:
            self.result = "protocol-error"
            return
        if env.args.get("ok"):
            self.result = "hijacked"
            self.network.note(self.host, "sys", "hijack:succeeded")
        else:
            self.result = f"refused:{env.args.get('error')}"
            self.network.note(self.host, "sys", "hijack:refused",
                              payload={"error": env.args.get("error")})
