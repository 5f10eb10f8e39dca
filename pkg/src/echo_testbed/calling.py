"""SIP user agent and media plane for emulated comms endpoints.

A CommsEndpoint lives on a device host. It is provisioned over the
device's existing cloud control channel (ConfigureCommsRequest ->
ConfigureCommsResponse), registers with the SIP service, and then places
or answers calls when told to.

Call flow, caller side:

    BeginCall directive
      -> OutboundCallRequested (control)
      -> INVITE with X-authtoken and an SDP offer        (sip channel)
      <- 100 / 180 / 200                                  (sip channel)
      -> ACK, OutboundCallAccepted
      -> media: dial the callee's host candidate; if that dial is refused
         (NAT, isolation), fall back to the relay candidate the proxy
         appended to the answer

Callee side: pushed INVITEs arrive on the same channel the endpoint
registered through. Intercom invites (X-intercom) answer immediately;
regular invites ring for answer_delay_ms first. A callee that shares a
LAN with the caller never dials out for media at all: it answers on the
channel the caller opened, so those frames stay on the LAN.

Media frames carry a recognizable canary string so tests can prove the
plaintext never appears anywhere in a trace.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import crypto, wire
from .netsim import Endpoint, NetError, Network

SIP_PORT = 443
MEDIA_CADENCE_MS = 20
DEFAULT_FRAME_COUNT = 6
FRAME_LEN = 160
DEFAULT_ANSWER_DELAY_MS = 400
BYE_GRACE_MS = 60

SIP_DOMAIN = "echo.example"


def device_uri(serial: str) -> str:
    return f"sip:dev-{serial}@{SIP_DOMAIN}"


def account_uri(account_id: str) -> str:
    return f"sip:user-{account_id}@{SIP_DOMAIN}"


def make_sip_request(method: str, uri: str, *, from_uri: str, to_uri: str,
                     call_id: str, cseq: int, via: str,
                     headers: list[tuple[str, str]] | None = None,
                     body: bytes = b"") -> wire.SipMessage:
    hdrs = [("Via", f"SIP/2.0/TCP {via}"), ("From", f"<{from_uri}>"),
            ("To", f"<{to_uri}>"), ("Call-ID", call_id), ("CSeq", f"{cseq} {method}")]
    hdrs.extend(headers or [])
    return wire.SipMessage(kind="request", method=method, request_uri=uri,
                           headers=hdrs, body=body)


def make_sip_response(req: wire.SipMessage, status: int, reason: str, *,
                      headers: list[tuple[str, str]] | None = None,
                      body: bytes = b"") -> wire.SipMessage:
    hdrs = [(k, v) for k, v in req.headers
            if k.lower() in ("via", "from", "to", "call-id", "cseq")]
    hdrs.extend(headers or [])
    return wire.SipMessage(kind="response", status=status, reason=reason,
                           headers=hdrs, body=body)


def sip_summary(msg: wire.SipMessage) -> str:
    if msg.kind == "request":
        return msg.method
    return f"{msg.status}-{msg.cseq_method}"


def canary_payload(tag: str, seq: int) -> bytes:
    text = f"CANARY:{tag}:{seq}:"
    return (text.encode() + b"\x00" * FRAME_LEN)[:FRAME_LEN]


def _shares_lan(host, addr: str) -> str | None:
    prefix = addr.rsplit(".", 1)[0]
    for lan_name, own in host.interfaces.items():
        if own.rsplit(".", 1)[0] == prefix:
            return lan_name
    return None


# ---------------------------------------------------------------------------
# Media plane

class MediaSession:
    """One call's protected audio in both directions."""

    def __init__(self, network: Network, host, tag: str, tx_key_salt: bytes,
                 rx_key_salt: bytes, frame_count: int, on_done=None):
        self.network = network
        self.host = host
        self.tag = tag
        self.tx = crypto.srtp_derive(tx_key_salt[:32], tx_key_salt[32:])
        self.rx = crypto.srtp_derive(rx_key_salt[:32], rx_key_salt[32:])
        self.frame_count = frame_count
        self.on_done = on_done
        self.chan: Endpoint | None = None
        self.sent = 0
        self.received: list[bytes] = []
        self.rejected = 0
        self.done = False

    def attach(self, chan: Endpoint) -> None:
        if self.chan is not None:
            return
        self.chan = chan
        chan.handler = lambda _end, data: self.handle(data)
        self._pump()

    def handle(self, data: bytes) -> None:
        try:
            self.received.append(crypto.srtp_unprotect(self.rx, data))
        except crypto.CryptoError:
            self.rejected += 1

    def _pump(self) -> None:
        if self.chan is None or self.chan.closed or self.sent >= self.frame_count:
            if self.sent >= self.frame_count and not self.done:
                self.done = True
                if self.on_done is not None:
                    self.on_done()
            return
        frame = canary_payload(self.tag, self.sent)
        packet = crypto.srtp_protect(self.tx, frame)
        self.chan.send(packet, layer="media",
                       summary=f"media-frame:{self.tag}:{self.sent}",
                       payload={"hex": packet.hex()})
        self.sent += 1
        self.network.scheduler.at(MEDIA_CADENCE_MS, self._pump)

    def stop(self) -> None:
        if self.chan is not None and not self.chan.closed:
            self.chan.close()
        self.chan = None


# ---------------------------------------------------------------------------
# Call state

@dataclass
class Call:
    call_id: str
    role: str                    # "caller" | "callee"
    peer_uri: str
    call_type: str
    state: str = "init"          # init|inviting|ringing|established|closing|closed
    invite: wire.SipMessage | None = None
    local_sdp: wire.SdpBody | None = None
    remote_sdp: wire.SdpBody | None = None
    media: MediaSession | None = None
    media_port: int | None = None
    gateway_leg: bool = False
    cseq: int = 1


class CommsEndpoint:
    """Drop-in capable SIP agent bound to one device host."""

    def __init__(self, network: Network, host, serial: str, rng, *,
                 intercom: bool = True,
                 answer_delay_ms: int = DEFAULT_ANSWER_DELAY_MS,
                 frame_count: int = DEFAULT_FRAME_COUNT,
                 auto_bye: bool = True):
        self.network = network
        self.host = host
        self.serial = serial
        self.rng = rng
        self.intercom = intercom
        self.answer_delay_ms = answer_delay_ms
        self.frame_count = frame_count
        self.auto_bye = auto_bye
        self.uri = device_uri(serial)
        self.auth_token_b64: str | None = None
        self.control: Endpoint | None = None   # the device's cloud channel
        self.sip: Endpoint | None = None
        self.registered = False
        self.calls: dict[str, Call] = {}
        self.last_invite: wire.SipMessage | None = None
        self._call_seq = 0
        self._media_port_next = 20000
        self._sip_rx = b""

    # -- provisioning ------------------------------------------------------

    def provision(self, control: Endpoint, auth_token_b64: str) -> None:
        """Ask the cloud for comms config over the established channel."""
        self.control = control
        self.auth_token_b64 = auth_token_b64
        self._send_control("ConfigureCommsRequest", {"serial": self.serial})

    def _send_control(self, name: str, payload: dict) -> None:
        if self.control is None or self.control.closed:
            return
        msg = wire.ControlMessage(interface="SipClient", name=name, payload=payload)
        self.control.send(wire.control_encode(msg), layer="control",
                          summary=msg.qualified, payload={"name": msg.qualified})

    def handle_control(self, msg: wire.ControlMessage) -> None:
        """Dispatch one SipClient.* message from the cloud channel."""
        if msg.name == "ConfigureCommsResponse":
            self._on_comms_config(msg.payload)
        elif msg.name == "BeginCall":
            self.begin_call(msg.payload["callee"], msg.payload["call_type"],
                            msg.payload["token"])
        elif msg.name == "EndCall":
            self.end_call()
        # unknown SipClient commands are absorbed, never fatal

    def _on_comms_config(self, cfg: dict) -> None:
        registrar_addr = cfg["registrar"]
        self.sip = self.network.open_channel(self.host, registrar_addr, SIP_PORT,
                                             secured=True)
        self.sip.handler = lambda _end, data: self._on_sip(data)
        reg = make_sip_request(
            "REGISTER", f"sip:{SIP_DOMAIN}", from_uri=self.uri, to_uri=self.uri,
            call_id=f"reg-{self.serial}", cseq=1, via=self._via(),
            headers=[("Contact", f"<sip:dev-{self.serial}@{self._via()}>"),
                     ("X-authtoken", self.auth_token_b64 or ""),
                     ("X-intercom", "yes" if self.intercom else "no")])
        self._send_sip(reg)

    def _via(self) -> str:
        for lan_name, addr in self.host.interfaces.items():
            if not self.network.lans[lan_name].isolated:
                return addr
        return next(iter(self.host.interfaces.values()), "0.0.0.0")

    def _send_sip(self, msg: wire.SipMessage) -> None:
        if self.sip is None or self.sip.closed:
            return
        self.sip.send(wire.sip_serialize(msg), layer="sip", summary=sip_summary(msg),
                      payload={"call_id": msg.header("Call-ID")})

    # -- outbound calls ----------------------------------------------------

    def begin_call(self, callee: str, call_type: str, token_b64: str) -> str:
        if not self.registered:
            self.network.note(self.host, "sys", "call-refused:not-registered")
            return ""
        if any(c.state not in ("closed",) for c in self.calls.values()):
            self.network.note(self.host, "sys", "call-refused:busy")
            return ""
        self._call_seq += 1
        call_id = f"call-{self.serial}-{self._call_seq}"
        call = Call(call_id=call_id, role="caller", peer_uri=callee, call_type=call_type)
        self.calls[call_id] = call
        call.local_sdp = self._build_sdp(call)
        invite = make_sip_request(
            "INVITE", callee, from_uri=self.uri, to_uri=callee, call_id=call_id,
            cseq=call.cseq, via=self._via(),
            headers=[("X-authtoken", token_b64),
                     ("X-calltype", call_type),
                     ("Content-Type", "application/sdp")],
            body=wire.sdp_encode(call.local_sdp))
        call.invite = invite
        call.state = "inviting"
        self.last_invite = invite
        self._send_sip(invite)
        self._send_control("OutboundCallRequested", {"callee": callee, "call_id": call_id})
        return call_id

    def replay_last_invite(self) -> None:
        """Resend the previous INVITE bytes (fresh Call-ID, same token).

        This models an attacker replaying a captured call grant; the
        proxy must refuse it because the token's nonce is already spent.
        """
        if self.last_invite is None:
            return
        self._call_seq += 1
        call_id = f"call-{self.serial}-{self._call_seq}"
        replay = wire.SipMessage(kind="request", method="INVITE",
                                 request_uri=self.last_invite.request_uri,
                                 headers=list(self.last_invite.headers),
                                 body=self.last_invite.body)
        replay.set_header("Call-ID", call_id)
        call = Call(call_id=call_id, role="caller",
                    peer_uri=self.last_invite.request_uri, call_type="replay")
        call.local_sdp = wire.sdp_decode(self.last_invite.body)
        call.state = "inviting"
        self.calls[call_id] = call
        self._send_sip(replay)

    def end_call(self) -> None:
        for call in self.calls.values():
            if call.state == "established":
                self._send_bye(call)
                return

    def _send_bye(self, call: Call) -> None:
        call.cseq += 1
        call.state = "closing"
        bye = make_sip_request("BYE", call.peer_uri, from_uri=self.uri,
                               to_uri=call.peer_uri, call_id=call.call_id,
                               cseq=call.cseq, via=self._via())
        self._send_sip(bye)

    # -- SDP / media -------------------------------------------------------

    def _build_sdp(self, call: Call) -> wire.SdpBody:
        port = self._media_port_next
        self._media_port_next += 2
        call.media_port = port
        self.host.listen(port, lambda end: self._accept_media(call, end))
        key_salt = self.rng.randbytes(wire.SRTP_KEY_LEN + wire.SRTP_SALT_LEN)
        sdp = wire.SdpBody(session_id=call.call_id, media_port=port,
                           candidates=[wire.Candidate("host", self._via(), port)],
                           crypto_suite=wire.SDES_SUITE, key_salt=key_salt)
        self.network.note(self.host, "sdp",
                          f"{'offer' if call.role == 'caller' else 'answer'}:{call.call_id}",
                          payload={"port": port})
        return sdp

    def _accept_media(self, call: Call, end: Endpoint) -> None:
        if call.media is not None:
            call.media.attach(end)

    def _establish_media(self, call: Call) -> None:
        # each side encrypts with the key it generated: caller with the
        # offer key, callee with the answer key
        tx, rx = call.local_sdp.key_salt, call.remote_sdp.key_salt
        call.media = MediaSession(
            self.network, self.host, tag=f"{self.serial}:{call.call_id}",
            tx_key_salt=tx, rx_key_salt=rx, frame_count=self.frame_count,
            on_done=(lambda: self._media_done(call)) if call.role == "caller" else None)
        chan = self._dial_media(call)
        if chan is not None:
            call.media.attach(chan)

    def _dial_media(self, call: Call) -> Endpoint | None:
        peer_host = next((c for c in call.remote_sdp.candidates if c.kind == "host"), None)
        peer_relay = next((c for c in call.remote_sdp.candidates if c.kind == "relay"), None)
        if call.role == "callee" and peer_host is not None \
                and _shares_lan(self.host, peer_host.address):
            # the caller dials us on this LAN; answer on that same channel
            self.network.note(self.host, "sys", "path:direct",
                              payload={"call_id": call.call_id})
            return None
        if call.role == "caller" and peer_host is not None:
            try:
                chan = self.network.open_channel(self.host, peer_host.address,
                                                 peer_host.port)
                path = "gateway" if call.gateway_leg else "direct"
                self.network.note(self.host, "sys", f"path:{path}",
                                  payload={"call_id": call.call_id})
                return chan
            except NetError:
                pass
        if peer_relay is None:
            self.network.note(self.host, "sys", "path:none",
                              payload={"call_id": call.call_id})
            return None
        chan = self.network.open_channel(self.host, peer_relay.address, peer_relay.port)
        self.network.note(self.host, "sys", "path:relay",
                          payload={"call_id": call.call_id})
        return chan

    def _media_done(self, call: Call) -> None:
        if call.state == "established" and self.auto_bye:
            self.network.scheduler.at(BYE_GRACE_MS, self._auto_bye, call)

    def _auto_bye(self, call: Call) -> None:
        if call.state == "established":
            self._send_bye(call)

    def _teardown_call(self, call: Call) -> None:
        if call.media is not None:
            call.media.stop()
        if call.media_port is not None:
            self.host.unlisten(call.media_port)
        call.state = "closed"
        self._send_control("CallDisconnected", {"call_id": call.call_id})

    # -- inbound SIP -------------------------------------------------------

    def _on_sip(self, data: bytes) -> None:
        try:
            msg = wire.sip_parse(data)
        except wire.WireError:
            self.network.note(self.host, "sys", "sip:unparseable")
            return
        if msg.kind == "request":
            self._on_sip_request(msg)
        else:
            self._on_sip_response(msg)

    def _on_sip_request(self, msg: wire.SipMessage) -> None:
        call_id = msg.header("Call-ID") or ""
        if msg.method == "INVITE":
            self._on_invite(msg, call_id)
        elif msg.method == "ACK":
            pass  # media was established when we produced our 200
        elif msg.method == "CANCEL":
            self._on_cancel(msg, call_id)
        elif msg.method == "BYE":
            call = self.calls.get(call_id)
            self._send_sip(make_sip_response(msg, 200, "OK"))
            if call is not None and call.state != "closed":
                self._teardown_call(call)
        else:
            self._send_sip(make_sip_response(msg, 404, "Not Found"))

    def _on_invite(self, msg: wire.SipMessage, call_id: str) -> None:
        if any(c.state in ("ringing", "established", "inviting") for c in self.calls.values()):
            self._send_sip(make_sip_response(msg, 486, "Busy Here"))
            return
        try:
            offer = wire.sdp_decode(msg.body)
        except wire.WireError:
            self._send_sip(make_sip_response(msg, 404, "Not Found"))
            return
        caller = (msg.header("From") or "").strip("<>")
        call = Call(call_id=call_id, role="callee", peer_uri=caller,
                    call_type=msg.header("X-calltype") or "regular")
        call.invite = msg
        call.remote_sdp = offer
        self.calls[call_id] = call
        if msg.header("X-intercom") == "yes" and self.intercom:
            self.network.note(self.host, "sys", "auto-answer",
                              payload={"call_id": call_id})
            self._answer(call)
        else:
            call.state = "ringing"
            self._send_sip(make_sip_response(msg, 180, "Ringing"))
            self.network.scheduler.at(self.answer_delay_ms, self._answer_if_ringing, call)

    def _answer_if_ringing(self, call: Call) -> None:
        if call.state == "ringing":
            self._answer(call)

    def _answer(self, call: Call) -> None:
        call.local_sdp = self._build_sdp(call)
        call.state = "established"
        self._send_sip(make_sip_response(
            call.invite, 200, "OK",
            headers=[("Content-Type", "application/sdp")],
            body=wire.sdp_encode(call.local_sdp)))
        self._establish_media(call)

    def _on_cancel(self, msg: wire.SipMessage, call_id: str) -> None:
        call = self.calls.get(call_id)
        self._send_sip(make_sip_response(msg, 200, "OK"))
        if call is not None and call.state == "ringing":
            invite = call.invite
            cancelled = make_sip_response(invite, 487, "Request Terminated")
            self._send_sip(cancelled)
            call.state = "closed"
            if call.media_port is not None:
                self.host.unlisten(call.media_port)

    def _on_sip_response(self, msg: wire.SipMessage) -> None:
        call_id = msg.header("Call-ID") or ""
        call = self.calls.get(call_id)
        if call is None:
            if call_id == f"reg-{self.serial}" and msg.status == 200:
                self.registered = True
                self.network.note(self.host, "sys", "sip:registered",
                                  payload={"uri": self.uri})
                self._send_control("WarmUp", {})
            return
        method = msg.cseq_method
        if method == "INVITE":
            if msg.status == 180:
                call.state = "ringing" if call.state == "inviting" else call.state
            elif msg.status == 200 and call.state in ("inviting", "ringing"):
                call.remote_sdp = wire.sdp_decode(msg.body)
                call.gateway_leg = msg.header("X-leg") == "gateway"
                call.state = "established"
                ack = make_sip_request("ACK", call.peer_uri, from_uri=self.uri,
                                       to_uri=call.peer_uri, call_id=call_id,
                                       cseq=call.cseq, via=self._via())
                self._send_sip(ack)
                self._send_control("OutboundCallAccepted", {"call_id": call_id})
                self._establish_media(call)
            elif msg.status in (403, 404, 486, 487):
                self.network.note(self.host, "sys",
                                  f"call-failed:{msg.status}",
                                  payload={"call_id": call_id})
                call.state = "closed"
                if call.media_port is not None:
                    self.host.unlisten(call.media_port)
                self._send_control("CallDisconnected", {"call_id": call_id})
        elif method == "BYE" and msg.status == 200 and call.state == "closing":
            self._teardown_call(call)
