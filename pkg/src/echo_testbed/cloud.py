"""Server side of the testbed: device API, voice-service front end, SIP
registrar/proxy, media relay, and the PSTN/app gateway.

One CloudServices object owns five hosts on the cloud LAN:

    api       device registration: link codes, registration grants
    avs       authenticated device connections and directives
    sip       registrar and forking proxy; records SDES keys by design
    relay     per-call media splice for endpoints that cannot reach
              each other directly; forwards ciphertext verbatim
    gateway   terminates calls to phone numbers and third-party apps;
              answers automatically and absorbs media

State a real operator would hold lives here too: the account database,
the factory record of every device's certificate and secret, issued
grants, spent call-token nonces, and the per-call master keys the
registrar saw in SDP. That last item is deliberate: the service can
decrypt any call it relays, and tests assert exactly that.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import crypto, wire
from .calling import (
    SIP_DOMAIN,
    SIP_PORT,
    account_uri,
    device_uri,
    make_sip_request,
    make_sip_response,
    sip_summary,
)
from .netsim import Endpoint, NetError, Network

LINK_CODE_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
LINK_CODE_LEN = 5
LINK_CODE_TTL_MS = 600_000

AVS_FRESHNESS_MS = 30_000
CALL_TOKEN_TTL_MS = 300_000
GATEWAY_ANSWER_MS = 120

API_HOST = "api"
AVS_HOST = "avs"
SIP_HOST = "sip"
RELAY_HOST = "relay"
GATEWAY_HOST = "gateway"


@dataclass
class DeviceRecord:
    serial: str
    account: str
    friendly_name: str
    identity_pub: crypto.PublicKey
    registered: bool = True


@dataclass
class LinkCode:
    code: str
    serial: str
    created_ms: int
    account: str | None = None
    grant: dict | None = None


@dataclass
class Binding:
    uri: str
    serial: str
    account: str
    contact: str
    intercom: bool
    chan: Endpoint


@dataclass
class ProxyLeg:
    binding: Binding
    state: str = "trying"  # trying|ringing|won|cancelled|failed


@dataclass
class ProxyCall:
    call_id: str
    caller: Binding
    from_uri: str
    to_uri: str
    call_type: str
    invite: wire.SipMessage
    legs: list[ProxyLeg] = field(default_factory=list)
    winner: ProxyLeg | None = None
    relay_port: int | None = None
    gateway: bool = False
    gateway_port: int | None = None
    state: str = "forking"  # forking|established|closing|closed


class CloudServices:
    def __init__(self, network: Network, rng, lan_name: str = "cloud"):
        self.network = network
        self.rng = rng
        self.lan_name = lan_name
        self.keypair = crypto.keygen(rng)

        self.accounts: dict[str, str] = {}           # account id -> password
        self.factory: dict[str, dict] = {}           # serial -> cert, secret
        self.registry: dict[str, DeviceRecord] = {}
        self.link_codes: dict[str, LinkCode] = {}
        self.avs_sessions: dict[str, Endpoint] = {}  # serial -> channel
        self._avs_last_ts: dict[str, int] = {}
        self._avs_session_seq = 0

        self.bindings: dict[str, list[Binding]] = {}  # uri -> bindings
        self.calls: dict[str, ProxyCall] = {}
        self.recorded_keys: dict[str, dict[str, bytes]] = {}
        self.nonce_cache: set = set()

        self._relay_port_next = 30000
        self._relay_ends: dict[int, list[Endpoint]] = {}
        self._relay_buffers: dict[int, list[bytes]] = {}
        self._gateway_port_next = 40000
        self._gateway_frames: dict[int, int] = {}

        self.hosts = {}
        for name in (API_HOST, AVS_HOST, SIP_HOST, RELAY_HOST, GATEWAY_HOST):
            host = network.add_host(name)
            network.attach(host, lan_name)
            self.hosts[name] = host
            network.register_name(f"{name}.{SIP_DOMAIN}",
                                  host.addr(lan_name))

        self.hosts[API_HOST].listen(443, self._accept_api)
        self.hosts[AVS_HOST].listen(443, self._accept_avs)
        self.hosts[SIP_HOST].listen(SIP_PORT, self._accept_sip)

    # -- scenario-facing administration -------------------------------------

    def provision_account(self, account_id: str, password: str) -> None:
        self.accounts[account_id] = password

    def provision_factory(self, serial: str, cert: crypto.DeviceCertificate,
                          secret: str) -> None:
        """Record what manufacturing knows: certificate and device secret."""
        if not crypto.verify_certificate(cert) or cert.subject != serial:
            raise ValueError("factory record needs a valid self-signed certificate")
        self.factory[serial] = {"cert": cert, "secret": secret}

    def provision_grant(self, serial: str, account_id: str) -> dict:
        """Bind a device to an account directly, skipping the pairing flow.

        Scenario setup helper for runs that start after first-time setup.
        """
        if account_id not in self.accounts:
            raise ValueError(f"unknown account {account_id}")
        grant = self._mint_grant(serial, account_id)
        return grant

    def deregister_device(self, serial: str) -> None:
        """What the owner's account page does when a device is removed."""
        record = self.registry.get(serial)
        if record is not None:
            record.registered = False
            record.account = ""
        self.network.note(AVS_HOST, "sys", f"deregistered:{serial}")

    def _mint_grant(self, serial: str, account_id: str) -> dict:
        identity = crypto.keygen(self.rng)
        friendly = f"Echo-{serial[-4:]}"
        token = crypto.mint_auth_token(self.keypair, account_id, serial,
                                       now=self.network.scheduler.now, rng=self.rng)
        self.registry[serial] = DeviceRecord(serial=serial, account=account_id,
                                             friendly_name=friendly,
                                             identity_pub=identity.public)
        self.network.note(API_HOST, "sys", f"grant:issued:{serial}",
                          payload={"account": account_id, "friendly_name": friendly})
        return {"keypair": identity.to_dict(), "auth_token": token.b64(),
                "friendly_name": friendly, "account": account_id}

    # -- device API ----------------------------------------------------------

    def _accept_api(self, chan: Endpoint) -> None:
        chan.handler = lambda end, data: self._on_api(end, data)

    def _on_api(self, chan: Endpoint, data: bytes) -> None:
        try:
            env = wire.api_decode(wire.http_parse(data))
        except wire.WireError as exc:
            self._api_reply(chan, "error", {"error": str(exc)}, status=400)
            return
        handler = {
            "createLinkCode": self._api_create_link_code,
            "checkLinkCode": self._api_check_link_code,
            "registerDevice": self._api_register_device,
        }.get(env.method)
        if handler is None:
            self._api_reply(chan, env.method, {"error": "unknown method"}, status=400)
            return
        handler(chan, env.args)

    def _api_reply(self, chan: Endpoint, method: str, args: dict,
                   status: int = 200) -> None:
        ok = status == 200 and "error" not in args
        resp = wire.oobe_response(wire.OobeEnvelope(method=method, args=args),
                                  status=status, reason="OK" if ok else "Refused")
        chan.send(wire.http_serialize(resp), layer="http",
                  summary=f"{method}-{'ok' if ok else 'error'}")

    def _api_create_link_code(self, chan: Endpoint, args: dict) -> None:
        serial = args.get("serial", "")
        record = self.factory.get(serial)
        if record is None or record["secret"] != args.get("secret"):
            self._api_reply(chan, "createLinkCode", {"error": "bad device identity"},
                            status=403)
            return
        code = "".join(LINK_CODE_ALPHABET[b % len(LINK_CODE_ALPHABET)]
                       for b in self.rng.randbytes(LINK_CODE_LEN))
        while code in self.link_codes:
            code = "".join(LINK_CODE_ALPHABET[b % len(LINK_CODE_ALPHABET)]
                           for b in self.rng.randbytes(LINK_CODE_LEN))
        self.link_codes[code] = LinkCode(code=code, serial=serial,
                                         created_ms=self.network.scheduler.now)
        self.network.note(API_HOST, "sys", f"link-code:created:{serial}")
        self._api_reply(chan, "createLinkCode", {"code": code})

    def _api_check_link_code(self, chan: Endpoint, args: dict) -> None:
        code = args.get("code", "")
        entry = self.link_codes.get(code)
        record = self.factory.get(entry.serial) if entry else None
        if entry is None or record is None or record["secret"] != args.get("secret"):
            self._api_reply(chan, "checkLinkCode", {"error": "unknown code"}, status=403)
            return
        if self.network.scheduler.now - entry.created_ms > LINK_CODE_TTL_MS:
            self._api_reply(chan, "checkLinkCode", {"status": "expired"})
            return
        if entry.account is None:
            self._api_reply(chan, "checkLinkCode", {"status": "pending"})
            return
        if entry.grant is None:
            entry.grant = self._mint_grant(entry.serial, entry.account)
        self._api_reply(chan, "checkLinkCode",
                        {"status": "registered", "grant": entry.grant})

    def _api_register_device(self, chan: Endpoint, args: dict) -> None:
        account = args.get("account", "")
        if self.accounts.get(account) != args.get("password"):
            self.network.note(API_HOST, "sys", "register-device-refused:bad-credentials")
            self._api_reply(chan, "registerDevice", {"error": "bad credentials"},
                            status=403)
            return
        entry = self.link_codes.get(args.get("link_code", ""))
        if entry is None:
            self.network.note(API_HOST, "sys", "register-device-refused:unknown-code")
            self._api_reply(chan, "registerDevice", {"error": "unknown link code"},
                            status=403)
            return
        if self.network.scheduler.now - entry.created_ms > LINK_CODE_TTL_MS:
            self.network.note(API_HOST, "sys", "register-device-refused:expired-code")
            self._api_reply(chan, "registerDevice", {"error": "expired link code"},
                            status=403)
            return
        if entry.account is not None:
            self.network.note(API_HOST, "sys", "register-device-refused:code-consumed")
            self._api_reply(chan, "registerDevice", {"error": "code already used"},
                            status=403)
            return
        existing = self.registry.get(entry.serial)
        if existing is not None and existing.registered and existing.account != account:
            # the anti-hijack rule: a device still bound to an account can
            # only be re-registered by that account
            self.network.note(API_HOST, "sys",
                              "register-device-refused:already-registered",
                              payload={"serial": entry.serial, "account": account})
            self._api_reply(chan, "registerDevice",
                            {"error": "device already registered"}, status=403)
            return
        entry.account = account
        self.network.note(API_HOST, "sys", f"register-device:{account}",
                          payload={"serial": entry.serial})
        self._api_reply(chan, "registerDevice", {"ok": True})

    # -- voice-service connections -------------------------------------------

    def _accept_avs(self, chan: Endpoint) -> None:
        chan.handler = lambda end, data: self._on_avs(end, data)
        chan.on_close = self._on_avs_close

    def _on_avs_close(self, chan: Endpoint) -> None:
        for serial, end in list(self.avs_sessions.items()):
            if end is chan:
                del self.avs_sessions[serial]

    def _avs_send(self, chan: Endpoint, interface: str, name: str, payload) -> None:
        msg = wire.ControlMessage(interface=interface, name=name, payload=payload)
        chan.send(wire.control_encode(msg), layer="control", summary=msg.qualified,
                  payload={"name": msg.qualified})

    def _on_avs(self, chan: Endpoint, data: bytes) -> None:
        try:
            msg = wire.control_decode(data)
        except wire.WireError:
            self.network.note(AVS_HOST, "sys", "avs:unparseable")
            return
        if msg.interface == "System" and msg.name == "NegotiationCommand":
            self._avs_negotiate(chan, msg.payload or {})
        elif msg.interface == "System" and msg.name == "RefreshAck":
            self.network.note(AVS_HOST, "sys", "avs:refresh-ack")
        elif msg.interface == "SipClient":
            self._on_sipclient_control(chan, msg)
        # anything else: absorbed; the command plane is larger than we model

    def _avs_serial_for(self, chan: Endpoint) -> str | None:
        for serial, end in self.avs_sessions.items():
            if end is chan:
                return serial
        return None

    def _avs_negotiate(self, chan: Endpoint, p: dict) -> None:
        serial = p.get("serial", "")
        reason = None
        record = self.registry.get(serial)
        if record is None or not record.registered:
            reason = "not-registered"
        if reason is None:
            signed = json.dumps(
                {"auth_token": p.get("auth_token"), "device_type": p.get("device_type"),
                 "serial": serial, "timestamp": p.get("timestamp")},
                sort_keys=True, separators=(",", ":")).encode()
            try:
                sig = bytes.fromhex(p.get("signature", ""))
            except ValueError:
                sig = b""
            if not crypto.verify_detached(record.identity_pub, signed, sig):
                reason = "bad-signature"
        if reason is None:
            try:
                claims = crypto.open_auth_token(
                    self.keypair, crypto.AuthToken.from_b64(p.get("auth_token", "")))
                if claims["serial"] != serial or claims["account"] != record.account:
                    reason = "token-mismatch"
            except crypto.CryptoError:
                reason = "bad-token"
        if reason is None:
            ts = p.get("timestamp", -1)
            now = self.network.scheduler.now
            if not isinstance(ts, int) or abs(now - ts) > AVS_FRESHNESS_MS:
                reason = "stale-timestamp"
            elif ts <= self._avs_last_ts.get(serial, -1):
                reason = "replayed-timestamp"
        if reason is not None:
            self.network.note(AVS_HOST, "sys", f"avs:rejected:{reason}",
                              payload={"serial": serial})
            self._avs_send(chan, "System", "NegotiationRejected", {"reason": reason})
            return
        self._avs_last_ts[serial] = p["timestamp"]
        self.avs_sessions[serial] = chan
        self._avs_session_seq += 1
        self.network.note(AVS_HOST, "sys", f"avs:accepted:{serial}")
        self._avs_send(chan, "System", "NegotiationAccepted",
                       {"session": f"avs-{self._avs_session_seq}"})

    def _on_sipclient_control(self, chan: Endpoint, msg: wire.ControlMessage) -> None:
        payload = msg.payload or {}
        if msg.name == "ConfigureCommsRequest":
            serial = self._avs_serial_for(chan)
            if serial is None or payload.get("serial") != serial:
                self._avs_send(chan, "SipClient", "ConfigureCommsResponse",
                               {"error": "no negotiated session"})
                return
            record = self.registry[serial]
            self._avs_send(chan, "SipClient", "ConfigureCommsResponse", {
                "registrar": self.hosts[SIP_HOST].addr(self.lan_name),
                "own_uri": device_uri(serial),
                "user_uri": account_uri(record.account),
            })
        else:
            # WarmUp and the call-progress notifications are informational
            self.network.note(AVS_HOST, "sys", f"ctrl:{msg.qualified}",
                              payload=payload if isinstance(payload, dict) else None)

    # -- directives ------------------------------------------------------------

    def start_call(self, caller_serial: str, callee: str, call_type: str) -> None:
        """Model a voice command: tell a device to place a call, with a
        freshly minted single-use authorization token."""
        chan = self.avs_sessions.get(caller_serial)
        if chan is None:
            raise NetError(f"{caller_serial} has no voice-service session")
        token = crypto.mint_call_token(
            self.keypair, caller=device_uri(caller_serial), callee=callee,
            call_type=call_type, ttl=CALL_TOKEN_TTL_MS,
            now=self.network.scheduler.now, rng=self.rng)
        self._avs_send(chan, "SipClient", "BeginCall",
                       {"callee": callee, "call_type": call_type, "token": token.b64()})

    def end_call(self, serial: str) -> None:
        chan = self.avs_sessions.get(serial)
        if chan is None:
            raise NetError(f"{serial} has no voice-service session")
        self._avs_send(chan, "SipClient", "EndCall", {})

    def refresh(self, serial: str) -> None:
        chan = self.avs_sessions.get(serial)
        if chan is None:
            raise NetError(f"{serial} has no voice-service session")
        self._avs_send(chan, "System", "Refresh", {})

    # -- SIP registrar and proxy ------------------------------------------------

    def _accept_sip(self, chan: Endpoint) -> None:
        chan.handler = lambda end, data: self._on_sip(end, data)

    def _sip_send(self, chan: Endpoint, msg: wire.SipMessage,
                  summary: str | None = None) -> None:
        chan.send(wire.sip_serialize(msg), layer="sip",
                  summary=summary or sip_summary(msg),
                  payload={"call_id": msg.header("Call-ID")})

    def _on_sip(self, chan: Endpoint, data: bytes) -> None:
        try:
            msg = wire.sip_parse(data)
        except wire.WireError:
            self.network.note(SIP_HOST, "sys", "sip:unparseable")
            return
        if msg.kind == "request":
            dispatch = {"REGISTER": self._sip_register, "INVITE": self._sip_invite,
                        "ACK": self._sip_ack, "BYE": self._sip_bye,
                        "CANCEL": self._sip_cancel_from_client}
            handler = dispatch.get(msg.method)
            if handler is None:
                self._sip_send(chan, make_sip_response(msg, 404, "Not Found"))
                return
            handler(chan, msg)
        else:
            self._sip_response(chan, msg)

    def _sip_register(self, chan: Endpoint, msg: wire.SipMessage) -> None:
        token_b64 = msg.header("X-authtoken") or ""
        try:
            claims = crypto.open_auth_token(self.keypair,
                                            crypto.AuthToken.from_b64(token_b64))
        except crypto.CryptoError:
            self.network.note(SIP_HOST, "sys", "sip:bind-refused:bad-token")
            self._sip_send(chan, make_sip_response(msg, 403, "Forbidden"))
            return
        serial = claims["serial"]
        record = self.registry.get(serial)
        from_uri = (msg.header("From") or "").strip("<>")
        if record is None or not record.registered \
                or record.account != claims["account"] \
                or from_uri != device_uri(serial):
            self.network.note(SIP_HOST, "sys", "sip:bind-refused:identity")
            self._sip_send(chan, make_sip_response(msg, 403, "Forbidden"))
            return
        binding = Binding(uri=device_uri(serial), serial=serial,
                          account=record.account,
                          contact=msg.header("Contact") or "",
                          intercom=msg.header("X-intercom") == "yes", chan=chan)
        self.bindings.setdefault(binding.uri, [])
        self.bindings[binding.uri] = [b for b in self.bindings[binding.uri]
                                      if b.serial != serial] + [binding]
        alias = account_uri(record.account)
        self.bindings.setdefault(alias, [])
        self.bindings[alias] = [b for b in self.bindings[alias]
                                if b.serial != serial] + [binding]
        self.network.note(SIP_HOST, "sys", f"sip:bind:{binding.uri}",
                          payload={"account": record.account})
        self._sip_send(chan, make_sip_response(msg, 200, "OK"))

    def _binding_for_chan(self, chan: Endpoint) -> Binding | None:
        for blist in self.bindings.values():
            for b in blist:
                if b.chan is chan:
                    return b
        return None

    def _sip_invite(self, chan: Endpoint, msg: wire.SipMessage) -> None:
        caller = self._binding_for_chan(chan)
        call_id = msg.header("Call-ID") or ""
        if caller is None:
            self._sip_send(chan, make_sip_response(msg, 403, "Forbidden"))
            return
        from_uri = (msg.header("From") or "").strip("<>")
        to_uri = (msg.header("To") or "").strip("<>")
        try:
            token = crypto.CallAuthToken.from_b64(msg.header("X-authtoken") or "")
        except crypto.CryptoError:
            token = None
        now = self.network.scheduler.now
        if token is None or not crypto.verify_call_token(
                self.keypair.public, token, from_uri, to_uri, now, self.nonce_cache):
            self.network.note(SIP_HOST, "sys", "call-token:rejected",
                              payload={"call_id": call_id})
            self._sip_send(chan, make_sip_response(msg, 403, "Forbidden"))
            return
        if from_uri != caller.uri:
            self.network.note(SIP_HOST, "sys", "call-token:rejected",
                              payload={"call_id": call_id, "reason": "uri-spoof"})
            self._sip_send(chan, make_sip_response(msg, 403, "Forbidden"))
            return
        self.network.note(SIP_HOST, "sys", "call-token:accepted",
                          payload={"call_id": call_id})

        try:
            offer = wire.sdp_decode(msg.body)
        except wire.WireError:
            self._sip_send(chan, make_sip_response(msg, 404, "Not Found"))
            return
        call = ProxyCall(call_id=call_id, caller=caller, from_uri=from_uri,
                         to_uri=to_uri, call_type=token.call_type, invite=msg)
        self.recorded_keys[call_id] = {"offer": offer.key_salt}
        self.network.note(SIP_HOST, "sys", f"keys:recorded:offer:{call_id}")

        if self._is_gateway_uri(to_uri):
            self.calls[call_id] = call
            call.gateway = True
            self._sip_send(chan, make_sip_response(msg, 100, "Trying"))
            self.network.scheduler.at(GATEWAY_ANSWER_MS, self._gateway_answer, call)
            return

        targets = self._route_targets(caller, to_uri, token.call_type)
        if targets is None:
            self.network.note(SIP_HOST, "sys", "call-refused:drop-in-not-permitted",
                              payload={"call_id": call_id})
            self._sip_send(chan, make_sip_response(msg, 403, "Forbidden"))
            return
        if not targets:
            self._sip_send(chan, make_sip_response(msg, 404, "Not Found"))
            return
        self.calls[call_id] = call
        self._sip_send(chan, make_sip_response(msg, 100, "Trying"))
        relay_port = self._relay_allocate(call_id)
        call.relay_port = relay_port
        relay_addr = self.hosts[RELAY_HOST].addr(self.lan_name)
        fwd_offer = wire.SdpBody(
            session_id=offer.session_id, media_port=offer.media_port,
            candidates=list(offer.candidates)
            + [wire.Candidate("relay", relay_addr, relay_port)],
            crypto_suite=offer.crypto_suite, key_salt=offer.key_salt)
        intercom = token.call_type == "intercom"
        for target in targets:
            leg = ProxyLeg(binding=target)
            call.legs.append(leg)
            fwd = make_sip_request(
                "INVITE", target.uri, from_uri=from_uri, to_uri=to_uri,
                call_id=call_id, cseq=1,
                via=self.hosts[SIP_HOST].addr(self.lan_name),
                headers=[("X-calltype", token.call_type),
                         ("Content-Type", "application/sdp")]
                + ([("X-intercom", "yes")] if intercom else []),
                body=wire.sdp_encode(fwd_offer))
            self._sip_send(target.chan, fwd, summary="INVITE-leg")

    def _is_gateway_uri(self, uri: str) -> bool:
        return uri.startswith("tel:") or "@pstn." in uri or "@skype." in uri

    def _route_targets(self, caller: Binding, to_uri: str,
                       call_type: str) -> list[Binding] | None:
        """Bindings to fork to; None signals a permission failure."""
        if to_uri.startswith("sip:dev-"):
            found = [b for b in self.bindings.get(to_uri, [])]
        elif to_uri.startswith("sip:user-"):
            found = [b for b in self.bindings.get(to_uri, [])
                     if b.serial != caller.serial]
        else:
            found = []
        if call_type == "intercom":
            # drop-in stays within one account's household
            if any(b.account != caller.account for b in found):
                return None
            found = [b for b in found if b.intercom]
        return found

    # -- gateway legs

    def _gateway_answer(self, call: ProxyCall) -> None:
        if call.state != "forking":
            return
        port = self._gateway_port_next
        self._gateway_port_next += 2
        call.gateway_port = port
        self._gateway_frames[port] = 0
        gateway_host = self.hosts[GATEWAY_HOST]
        gateway_host.listen(port, lambda end: self._gateway_media(port, end))
        key_salt = self.rng.randbytes(wire.SRTP_KEY_LEN + wire.SRTP_SALT_LEN)
        answer = wire.SdpBody(
            session_id=f"gw-{call.call_id}", media_port=port,
            candidates=[wire.Candidate("host", gateway_host.addr(self.lan_name), port)],
            crypto_suite=wire.SDES_SUITE, key_salt=key_salt)
        self.recorded_keys[call.call_id]["answer"] = key_salt
        call.state = "established"
        self.network.note(GATEWAY_HOST, "sys", f"gateway:answered:{call.call_id}")
        resp = make_sip_response(call.invite, 200, "OK",
                                 headers=[("Content-Type", "application/sdp"),
                                          ("X-leg", "gateway")],
                                 body=wire.sdp_encode(answer))
        self._sip_send(call.caller.chan, resp)

    def _gateway_media(self, port: int, end: Endpoint) -> None:
        def sink(_end, _data):
            self._gateway_frames[port] = self._gateway_frames.get(port, 0) + 1
        end.handler = sink

    # -- relay

    def _relay_allocate(self, call_id: str) -> int:
        port = self._relay_port_next
        self._relay_port_next += 2
        self._relay_ends[port] = []
        self._relay_buffers[port] = []
        relay_host = self.hosts[RELAY_HOST]
        relay_host.listen(port, lambda end: self._relay_accept(port, end))
        self.network.note(RELAY_HOST, "sys", f"relay:allocated:{call_id}",
                          payload={"port": port})
        return port

    def _relay_accept(self, port: int, end: Endpoint) -> None:
        ends = self._relay_ends[port]
        if len(ends) >= 2:
            end.close()
            return
        ends.append(end)
        end.handler = lambda e, data: self._relay_forward(port, e, data)
        if len(ends) == 2 and self._relay_buffers[port]:
            for data in self._relay_buffers[port]:
                ends[1].send(data, layer="media", summary="relay-forward",
                             payload={"hex": data.hex()})
            self._relay_buffers[port] = []

    def _relay_forward(self, port: int, src: Endpoint, data: bytes) -> None:
        ends = self._relay_ends[port]
        others = [e for e in ends if e is not src]
        if not others:
            self._relay_buffers[port].append(data)
            return
        if not others[0].closed:
            others[0].send(data, layer="media", summary="relay-forward",
                           payload={"hex": data.hex()})

    def _relay_free(self, port: int | None) -> None:
        if port is None:
            return
        for end in self._relay_ends.get(port, []):
            if not end.closed:
                end.close()
        self._relay_ends.pop(port, None)
        self._relay_buffers.pop(port, None)
        self.hosts[RELAY_HOST].unlisten(port)

    # -- proxy responses and mid-call requests

    def _sip_response(self, chan: Endpoint, msg: wire.SipMessage) -> None:
        call = self.calls.get(msg.header("Call-ID") or "")
        if call is None:
            return
        leg = next((l for l in call.legs if l.binding.chan is chan), None)
        method = msg.cseq_method
        if method == "INVITE" and leg is not None:
            self._leg_invite_response(call, leg, msg)
        elif method == "BYE":
            # completion of a BYE we forwarded; relay it to the other party
            other = self._other_chan(call, chan)
            if other is not None:
                self._sip_send(other, msg)
            self._call_close(call)
        elif method == "CANCEL":
            pass  # 200 for our CANCEL; the 487 settles the leg

    def _leg_invite_response(self, call: ProxyCall, leg: ProxyLeg,
                             msg: wire.SipMessage) -> None:
        if msg.status == 180:
            leg.state = "ringing"
            self._sip_send(call.caller.chan, msg)
        elif msg.status == 200:
            if call.winner is None:
                call.winner = leg
                leg.state = "won"
                call.state = "established"
                answer = wire.sdp_decode(msg.body)
                self.recorded_keys[call.call_id]["answer"] = answer.key_salt
                self.network.note(SIP_HOST, "sys",
                                  f"keys:recorded:answer:{call.call_id}")
                for other in call.legs:
                    if other is not leg and other.state in ("trying", "ringing"):
                        other.state = "cancelled"
                        cancel = make_sip_request(
                            "CANCEL", other.binding.uri, from_uri=call.from_uri,
                            to_uri=call.to_uri, call_id=call.call_id, cseq=1,
                            via=self.hosts[SIP_HOST].addr(self.lan_name))
                        self._sip_send(other.binding.chan, cancel)
                relay_addr = self.hosts[RELAY_HOST].addr(self.lan_name)
                fwd_answer = wire.SdpBody(
                    session_id=answer.session_id, media_port=answer.media_port,
                    candidates=list(answer.candidates)
                    + ([wire.Candidate("relay", relay_addr, call.relay_port)]
                       if call.relay_port is not None else []),
                    crypto_suite=answer.crypto_suite, key_salt=answer.key_salt)
                fwd = make_sip_response(call.invite, 200, "OK",
                                        headers=[("Content-Type", "application/sdp")],
                                        body=wire.sdp_encode(fwd_answer))
                self._sip_send(call.caller.chan, fwd)
            else:
                leg.state = "failed"
        elif msg.status in (486, 487, 403, 404):
            leg.state = "failed" if msg.status != 487 else "cancelled"
            active = [l for l in call.legs if l.state in ("trying", "ringing")]
            if call.winner is None and not active:
                self._sip_send(call.caller.chan,
                               make_sip_response(call.invite, 486, "Busy Here"))
                self._call_close(call)

    def _other_chan(self, call: ProxyCall, chan: Endpoint) -> Endpoint | None:
        if call.caller.chan is chan:
            return call.winner.binding.chan if call.winner else None
        return call.caller.chan

    def _sip_ack(self, chan: Endpoint, msg: wire.SipMessage) -> None:
        call = self.calls.get(msg.header("Call-ID") or "")
        if call is None or call.gateway:
            return
        if call.winner is not None:
            self._sip_send(call.winner.binding.chan, msg)

    def _sip_bye(self, chan: Endpoint, msg: wire.SipMessage) -> None:
        call = self.calls.get(msg.header("Call-ID") or "")
        if call is None:
            self._sip_send(chan, make_sip_response(msg, 404, "Not Found"))
            return
        if call.gateway:
            self.network.note(GATEWAY_HOST, "sys", f"gateway:hangup:{call.call_id}")
            if call.gateway_port is not None:
                self.hosts[GATEWAY_HOST].unlisten(call.gateway_port)
            self._sip_send(chan, make_sip_response(msg, 200, "OK"))
            self._call_close(call)
            return
        call.state = "closing"
        other = self._other_chan(call, chan)
        if other is not None:
            self._sip_send(other, msg)

    def _sip_cancel_from_client(self, chan: Endpoint, msg: wire.SipMessage) -> None:
        # endpoints in this testbed never cancel their own INVITEs
        self._sip_send(chan, make_sip_response(msg, 200, "OK"))

    def _call_close(self, call: ProxyCall) -> None:
        if call.state == "closed":
            return
        call.state = "closed"
        self._relay_free(call.relay_port)
        self.network.note(SIP_HOST, "sys", f"call:closed:{call.call_id}")
