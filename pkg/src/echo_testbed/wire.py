"""Wire formats used across the testbed.

Five codecs live here:

  * a minimal HTTP/1.1 subset (Content-Length framing only, no chunked
    encoding, no pipelining),
  * the OOBE method envelope carried as JSON in a POST to /OOBE,
  * a SIP subset (headers are an ordered, repeatable list; unknown headers
    are carried verbatim),
  * an SDP subset with ICE-style candidates and a single SDES crypto line,
  * the JSON control-message envelope used on the voice-service connection,
    plus the length-prefixed frame layer it rides in:

        ┌──────────────┬──────────────┬───────────────┐
        │ stream (4B)  │ length (4B)  │ payload bytes │
        │ u32 BE       │ u32 BE       │               │
        └──────────────┴──────────────┴───────────────┘

All parsers are pure functions over complete byte buffers (the transport
delivers whole messages) and raise WireError on malformed input; they never
crash on garbage.
"""

from __future__ import annotations

import base64
import json
import re
import struct
from dataclasses import dataclass, field


class WireError(Exception):
    """Malformed or out-of-contract wire data."""


# ---------------------------------------------------------------------------
# HTTP/1.1 subset

HTTP_VERSION = "HTTP/1.1"

_TOKEN_RE = re.compile(r"^[!#$%&'*+\-.^_`|~0-9A-Za-z]+$")


@dataclass
class HttpMessage:
    """One complete HTTP request or response.

    Headers are an ordered list of (name, value) pairs; lookup is
    case-insensitive but serialization preserves the stored order and
    spelling. Content-Length is forced to the body length on serialize.
    """

    kind: str  # "request" | "response"
    method: str | None = None
    path: str | None = None
    status: int | None = None
    reason: str | None = None
    headers: list[tuple[str, str]] = field(default_factory=list)
    body: bytes = b""

    def header(self, name: str) -> str | None:
        """First header value matching name, case-insensitively."""
        lower = name.lower()
        for key, value in self.headers:
            if key.lower() == lower:
                return value
        return None

    def set_header(self, name: str, value: str) -> None:
        """Replace the first occurrence of name in place, or append."""
        lower = name.lower()
        for i, (key, _) in enumerate(self.headers):
            if key.lower() == lower:
                self.headers[i] = (key, value)
                return
        self.headers.append((name, value))


def _parse_headers(lines: list[str]) -> list[tuple[str, str]]:
    headers = []
    for line in lines:
        if ":" not in line:
            raise WireError(f"malformed header line: {line!r}")
        name, value = line.split(":", 1)
        name = name.strip()
        if not name or not _TOKEN_RE.match(name):
            raise WireError(f"bad header name: {name!r}")
        headers.append((name, value.strip()))
    return headers


def _split_head(data: bytes, what: str) -> tuple[list[str], bytes]:
    sep = data.find(b"\r\n\r\n")
    if sep < 0:
        raise WireError(f"{what}: no end of headers")
    try:
        head = data[:sep].decode("ascii")
    except UnicodeDecodeError as exc:
        raise WireError(f"{what}: non-ASCII header block") from exc
    return head.split("\r\n"), data[sep + 4:]


def _check_body_length(headers: list[tuple[str, str]], body: bytes, what: str) -> bytes:
    declared = None
    for name, value in headers:
        if name.lower() == "content-length":
            if not value.isdigit():
                raise WireError(f"{what}: non-numeric Content-Length {value!r}")
            declared = int(value)
            break
    if declared is None:
        if body:
            raise WireError(f"{what}: missing Content-Length with non-empty body")
        return b""
    if len(body) < declared:
        raise WireError(f"{what}: body truncated ({len(body)} < {declared})")
    if len(body) > declared:
        raise WireError(f"{what}: unparsed trailing bytes after body")
    return body


def http_parse(data: bytes) -> HttpMessage:
    """Parse one complete HTTP message (request or response)."""
    lines, body = _split_head(data, "http")
    start = lines[0]
    headers = _parse_headers(lines[1:])
    body = _check_body_length(headers, body, "http")

    if start.startswith(HTTP_VERSION + " "):
        parts = start.split(" ", 2)
        if len(parts) < 3 or not parts[1].isdigit() or len(parts[1]) != 3:
            raise WireError(f"malformed status line: {start!r}")
        return HttpMessage(kind="response", status=int(parts[1]), reason=parts[2],
                           headers=headers, body=body)

    parts = start.split(" ")
    if len(parts) != 3 or parts[2] != HTTP_VERSION or not _TOKEN_RE.match(parts[0]):
        raise WireError(f"malformed request line: {start!r}")
    if not parts[1]:
        raise WireError("empty request path")
    return HttpMessage(kind="request", method=parts[0], path=parts[1],
                       headers=headers, body=body)


def _serialize_headers(headers: list[tuple[str, str]]) -> str:
    out = []
    for name, value in headers:
        if any(c in "\r\n" for c in name + value):
            raise WireError(f"CR/LF in header {name!r}")
        if not _TOKEN_RE.match(name):
            raise WireError(f"bad header name: {name!r}")
        out.append(f"{name}: {value}\r\n")
    return "".join(out)


def http_serialize(msg: HttpMessage) -> bytes:
    """Serialize to bytes that reparse to an equal message."""
    if msg.kind == "request":
        if not msg.method or not msg.path:
            raise WireError("request needs method and path")
        start = f"{msg.method} {msg.path} {HTTP_VERSION}"
    elif msg.kind == "response":
        if msg.status is None:
            raise WireError("response needs a status")
        start = f"{HTTP_VERSION} {msg.status} {msg.reason or ''}"
    else:
        raise WireError(f"unknown message kind {msg.kind!r}")
    msg.set_header("Content-Length", str(len(msg.body)))
    head = start + "\r\n" + _serialize_headers(msg.headers) + "\r\n"
    return head.encode("ascii") + msg.body


# ---------------------------------------------------------------------------
# OOBE envelope

OOBE_PATH = "/OOBE"
API_PATH = "/api"  # the cloud-side device API speaks the same envelope shape


@dataclass
class OobeEnvelope:
    """One pairing-API call or reply: a method name plus JSON arguments."""

    method: str
    args: dict = field(default_factory=dict)


def _envelope_encode(env: OobeEnvelope, path: str) -> HttpMessage:
    if not env.method:
        raise WireError("empty method name")
    body = json.dumps({"method": env.method, "args": env.args},
                      separators=(",", ":")).encode()
    return HttpMessage(kind="request", method="POST", path=path,
                       headers=[("Content-Type", "application/json")], body=body)


def oobe_encode(env: OobeEnvelope) -> HttpMessage:
    """Wrap an envelope into a POST /OOBE request."""
    return _envelope_encode(env, OOBE_PATH)


def api_encode(env: OobeEnvelope) -> HttpMessage:
    """Wrap an envelope into a POST /api request for the cloud device API."""
    return _envelope_encode(env, API_PATH)


def oobe_decode(msg: HttpMessage, path: str = OOBE_PATH) -> OobeEnvelope:
    """Extract the envelope from a POST request to the given path."""
    if msg.kind != "request" or msg.method != "POST":
        raise WireError("envelope calls must be POST requests")
    if msg.path != path:
        raise WireError(f"wrong path for envelope call: {msg.path!r}")
    try:
        obj = json.loads(msg.body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError(f"OOBE body is not JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise WireError("OOBE body must be a JSON object")
    method = obj.get("method")
    if not method or not isinstance(method, str):
        raise WireError("OOBE body missing method name")
    args = obj.get("args", {})
    if not isinstance(args, dict):
        raise WireError("OOBE args must be an object")
    return OobeEnvelope(method=method, args=args)


def api_decode(msg: HttpMessage) -> OobeEnvelope:
    return oobe_decode(msg, path=API_PATH)


# OOBE responses travel as HTTP replies carrying the same envelope shape;
# errors use a non-200 status with the failing method echoed back.

def oobe_response(env: OobeEnvelope, status: int = 200, reason: str = "OK") -> HttpMessage:
    body = json.dumps({"method": env.method, "args": env.args},
                      separators=(",", ":")).encode()
    return HttpMessage(kind="response", status=status, reason=reason,
                       headers=[("Content-Type", "application/json")], body=body)


def oobe_decode_response(msg: HttpMessage) -> OobeEnvelope:
    if msg.kind != "response":
        raise WireError("expected an HTTP response")
    try:
        obj = json.loads(msg.body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError(f"OOBE response body is not JSON: {exc}") from exc
    if not isinstance(obj, dict) or not isinstance(obj.get("method"), str):
        raise WireError("OOBE response missing method name")
    return OobeEnvelope(method=obj["method"], args=obj.get("args", {}))


# ---------------------------------------------------------------------------
# SIP subset

SIP_VERSION = "SIP/2.0"

# Methods and response codes the testbed's own agents emit. The parser is
# deliberately more lenient: it accepts any method token so unknown traffic
# still yields structured messages instead of crashes.
SIP_METHODS = ("REGISTER", "INVITE", "ACK", "BYE", "CANCEL")
SIP_STATUSES = (100, 180, 200, 403, 404, 486, 487)

MANDATORY_SIP_HEADERS = ("Via", "From", "To", "Call-ID", "CSeq")

_CSEQ_RE = re.compile(r"^\d+ [A-Z]+$")


@dataclass
class SipMessage:
    """One SIP request or response with order-preserving headers."""

    kind: str  # "request" | "response"
    method: str | None = None
    request_uri: str | None = None
    status: int | None = None
    reason: str | None = None
    headers: list[tuple[str, str]] = field(default_factory=list)
    body: bytes = b""

    def header(self, name: str) -> str | None:
        lower = name.lower()
        for key, value in self.headers:
            if key.lower() == lower:
                return value
        return None

    def header_values(self, name: str) -> list[str]:
        lower = name.lower()
        return [v for k, v in self.headers if k.lower() == lower]

    def set_header(self, name: str, value: str) -> None:
        lower = name.lower()
        for i, (key, _) in enumerate(self.headers):
            if key.lower() == lower:
                self.headers[i] = (key, value)
                return
        self.headers.append((name, value))

    @property
    def cseq_method(self) -> str:
        cseq = self.header("CSeq") or ""
        return cseq.split(" ", 1)[1] if " " in cseq else ""


def _check_sip_headers(headers: list[tuple[str, str]]) -> None:
    present = {k.lower() for k, _ in headers}
    for name in MANDATORY_SIP_HEADERS:
        if name.lower() not in present:
            raise WireError(f"missing mandatory header {name}")
    for key, value in headers:
        if key.lower() == "cseq" and not _CSEQ_RE.match(value):
            raise WireError(f"bad CSeq: {value!r}")


def sip_parse(data: bytes) -> SipMessage:
    """Parse one complete SIP message, retaining unknown headers verbatim."""
    lines, body = _split_head(data, "sip")
    start = lines[0]
    headers = _parse_headers(lines[1:])
    body = _check_body_length(headers, body, "sip")
    _check_sip_headers(headers)

    if start.startswith(SIP_VERSION + " "):
        parts = start.split(" ", 2)
        if len(parts) < 3 or not parts[1].isdigit() or len(parts[1]) != 3:
            raise WireError(f"malformed SIP status line: {start!r}")
        return SipMessage(kind="response", status=int(parts[1]), reason=parts[2],
                          headers=headers, body=body)

    parts = start.split(" ")
    if len(parts) != 3 or parts[2] != SIP_VERSION or not _TOKEN_RE.match(parts[0]):
        raise WireError(f"malformed SIP request line: {start!r}")
    return SipMessage(kind="request", method=parts[0], request_uri=parts[1],
                      headers=headers, body=body)


def sip_serialize(msg: SipMessage) -> bytes:
    if msg.kind == "request":
        if not msg.method or not msg.request_uri:
            raise WireError("SIP request needs method and request-URI")
        if msg.method not in SIP_METHODS:
            raise WireError(f"testbed agents do not emit {msg.method}")
        start = f"{msg.method} {msg.request_uri} {SIP_VERSION}"
    elif msg.kind == "response":
        if msg.status not in SIP_STATUSES:
            raise WireError(f"testbed agents do not emit status {msg.status}")
        start = f"{SIP_VERSION} {msg.status} {msg.reason or ''}"
    else:
        raise WireError(f"unknown message kind {msg.kind!r}")
    msg.set_header("Content-Length", str(len(msg.body)))
    _check_sip_headers(msg.headers)
    head = start + "\r\n" + _serialize_headers(msg.headers) + "\r\n"
    return head.encode("ascii") + msg.body


# ---------------------------------------------------------------------------
# SDP subset

SRTP_KEY_LEN = 32
SRTP_SALT_LEN = 14
SDES_SUITE = "AES_256_CM_HMAC_80"


@dataclass(frozen=True)
class Candidate:
    kind: str  # "host" | "relay"
    address: str
    port: int


@dataclass
class SdpBody:
    """One audio media section: port, candidates, and a single SDES crypto
    line carrying the 46-byte master key‖salt."""

    session_id: str
    media_port: int
    candidates: list[Candidate]
    crypto_suite: str
    key_salt: bytes  # 32-byte master key + 14-byte master salt

    @property
    def master_key(self) -> bytes:
        return self.key_salt[:SRTP_KEY_LEN]

    @property
    def master_salt(self) -> bytes:
        return self.key_salt[SRTP_KEY_LEN:]


def _check_sdp(body: SdpBody) -> None:
    if len(body.key_salt) != SRTP_KEY_LEN + SRTP_SALT_LEN:
        raise WireError(f"crypto key material must be 46 bytes, got {len(body.key_salt)}")
    if not body.candidates:
        raise WireError("SDP needs at least one candidate")
    for cand in body.candidates:
        if cand.kind not in ("host", "relay"):
            raise WireError(f"unknown candidate type {cand.kind!r}")


def sdp_encode(body: SdpBody) -> bytes:
    _check_sdp(body)
    lines = [
        "v=0",
        f"o=- {body.session_id} 0 IN IP4 0.0.0.0",
        "s=-",
        f"m=audio {body.media_port} RTP/SAVP 0",
    ]
    for i, cand in enumerate(body.candidates, start=1):
        lines.append(f"a=candidate:{i} {cand.kind} {cand.address} {cand.port}")
    b64 = base64.b64encode(body.key_salt).decode("ascii")
    lines.append(f"a=crypto:1 {body.crypto_suite} inline:{b64}")
    return ("\r\n".join(lines) + "\r\n").encode("ascii")


def sdp_decode(data: bytes) -> SdpBody:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise WireError("SDP is not ASCII") from exc
    session_id = None
    media_port = None
    candidates: list[Candidate] = []
    crypto = None
    for line in text.split("\r\n"):
        if not line:
            continue
        if line.startswith("o="):
            parts = line[2:].split(" ")
            if len(parts) < 2:
                raise WireError(f"malformed o= line: {line!r}")
            session_id = parts[1]
        elif line.startswith("m=audio "):
            parts = line[2:].split(" ")
            if len(parts) < 2 or not parts[1].isdigit():
                raise WireError(f"malformed m= line: {line!r}")
            media_port = int(parts[1])
        elif line.startswith("a=candidate:"):
            parts = line.split(" ")
            if len(parts) != 4 or not parts[3].isdigit():
                raise WireError(f"malformed candidate line: {line!r}")
            candidates.append(Candidate(kind=parts[1], address=parts[2], port=int(parts[3])))
        elif line.startswith("a=crypto:"):
            if crypto is not None:
                raise WireError("more than one crypto line")
            parts = line.split(" ")
            if len(parts) != 3 or not parts[2].startswith("inline:"):
                raise WireError(f"malformed crypto line: {line!r}")
            try:
                key_salt = base64.b64decode(parts[2][len("inline:"):], validate=True)
            except Exception as exc:
                raise WireError("crypto line is not valid base64") from exc
            crypto = (parts[1], key_salt)
    if session_id is None or media_port is None:
        raise WireError("SDP missing session id or media line")
    if crypto is None:
        raise WireError("SDP missing crypto line")
    body = SdpBody(session_id=session_id, media_port=media_port,
                   candidates=candidates, crypto_suite=crypto[0], key_salt=crypto[1])
    _check_sdp(body)
    return body


# ---------------------------------------------------------------------------
# Control-message envelope and frame layer

# The command pairs the testbed's own nodes exchange. Anything outside this
# set still decodes, flagged unknown, since the real command plane is larger
# than what any one capture shows.
KNOWN_COMMANDS = frozenset({
    ("System", "NegotiationCommand"),
    ("System", "NegotiationAccepted"),
    ("System", "NegotiationRejected"),
    ("System", "Refresh"),
    ("System", "RefreshAck"),
    ("SipClient", "ConfigureCommsRequest"),
    ("SipClient", "ConfigureCommsResponse"),
    ("SipClient", "WarmUp"),
    ("SipClient", "BeginCall"),
    ("SipClient", "EndCall"),
    ("SipClient", "OutboundCallRequested"),
    ("SipClient", "OutboundCallAccepted"),
    ("SipClient", "CallDisconnected"),
})


@dataclass
class ControlMessage:
    """One command on the cloud control plane: interface, name, payload."""

    interface: str
    name: str
    payload: object = None
    unknown: bool = False

    @property
    def qualified(self) -> str:
        return f"{self.interface}.{self.name}"


def control_encode(msg: ControlMessage) -> bytes:
    return json.dumps({"interface": msg.interface, "name": msg.name,
                       "payload": msg.payload}, separators=(",", ":")).encode()


def control_decode(data: bytes) -> ControlMessage:
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError(f"control message is not JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise WireError("control message must be a JSON object")
    interface = obj.get("interface")
    name = obj.get("name")
    if not isinstance(interface, str) or not isinstance(name, str) or not interface or not name:
        raise WireError("control message needs interface and name strings")
    unknown = (interface, name) not in KNOWN_COMMANDS
    return ControlMessage(interface=interface, name=name,
                          payload=obj.get("payload"), unknown=unknown)


FRAME_HEADER = struct.Struct(">II")


def frame_encode(stream_id: int, payload: bytes) -> bytes:
    """One multiplexed frame: u32 stream id + u32 length + payload."""
    if not 0 <= stream_id < 2 ** 32:
        raise WireError(f"stream id out of range: {stream_id}")
    return FRAME_HEADER.pack(stream_id, len(payload)) + payload


def frame_decode(data: bytes) -> tuple[int, bytes]:
    if len(data) < FRAME_HEADER.size:
        raise WireError("frame too short")
    stream_id, length = FRAME_HEADER.unpack_from(data)
    payload = data[FRAME_HEADER.size:]
    if len(payload) != length:
        raise WireError(f"frame length mismatch: declared {length}, got {len(payload)}")
    return stream_id, payload
