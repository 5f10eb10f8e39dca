"""Deterministic single-process network fabric.

Everything runs on one virtual clock: a scheduler dispatches callbacks in
(time, insertion order), so a given seed and scenario replays the exact
same interleaving every time. No threads, no sockets, no wall clock.

Topology model:

    Network
      Lan         named broadcast domain with an address prefix; flags for
                  NAT (no inbound dials from other LANs) and isolation
                  (no route to or from the rest of the fabric)
      Host        named node with one interface (address) per attached LAN
      Channel     message-oriented duplex pipe between two endpoints,
                  opened synchronously to a (address, port) listener

Every message send appends one TraceEvent. Channels opened secured model
an encrypted transport: the event and any tap observation carry only the
payload length, never the bytes. Taps on a LAN see each delivery before
the destination handler runs, which is exactly the edge a same-channel
attacker has over the legitimate party.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Callable

HOP_MS = 1   # delivery latency within one LAN
WAN_MS = 2   # delivery latency across LANs

EVENT_BUDGET = 1_000_000

TRACE_LAYERS = ("http", "oobe", "sip", "sdp", "control", "media", "sys")


class NetError(Exception):
    """Refused dial, unreachable address, or misuse of a closed channel."""


class BudgetExceeded(NetError):
    """The scheduler dispatched more events than the run allows; almost
    always a retry loop that never quiesces."""


# ---------------------------------------------------------------------------
# Virtual clock

class Scheduler:
    def __init__(self):
        self._now = 0
        self._seq = 0
        self._heap: list[tuple[int, int, Callable]] = []

    @property
    def now(self) -> int:
        return self._now

    def at(self, delay_ms: int, fn: Callable, *args) -> None:
        """Run fn(*args) delay_ms virtual milliseconds from now."""
        if delay_ms < 0:
            raise ValueError("cannot schedule into the past")
        self._seq += 1
        heapq.heappush(self._heap, (self._now + delay_ms, self._seq,
                                    (lambda: fn(*args)) if args else fn))

    def run_until_idle(self, budget: int = EVENT_BUDGET) -> int:
        """Dispatch until the queue drains; returns events processed."""
        processed = 0
        while self._heap:
            if processed >= budget:
                raise BudgetExceeded(f"exceeded {budget} events at t={self._now}ms")
            when, _, fn = heapq.heappop(self._heap)
            self._now = when
            fn()
            processed += 1
        return processed


# ---------------------------------------------------------------------------
# Trace

@dataclass(frozen=True)
class TraceEvent:
    seq: int
    t_ms: int
    src: str
    dst: str
    lan: str        # LAN of the receiving interface
    secured: bool
    layer: str
    summary: str
    payload: dict | None = None

    def to_json(self) -> str:
        obj = {"seq": self.seq, "t_ms": self.t_ms, "src": self.src, "dst": self.dst,
               "lan": self.lan, "secured": self.secured, "layer": self.layer,
               "summary": self.summary}
        if self.payload is not None:
            obj["payload"] = self.payload
        return json.dumps(obj, separators=(",", ":"), sort_keys=True)


class TraceLog:
    def __init__(self):
        self.events: list[TraceEvent] = []

    def record(self, t_ms: int, src: str, dst: str, lan: str, secured: bool,
               layer: str, summary: str, payload: dict | None = None) -> TraceEvent:
        if layer not in TRACE_LAYERS:
            raise ValueError(f"unknown trace layer {layer!r}")
        ev = TraceEvent(seq=len(self.events), t_ms=t_ms, src=src, dst=dst, lan=lan,
                        secured=secured, layer=layer, summary=summary,
                        payload=None if secured else payload)
        self.events.append(ev)
        return ev

    def jsonl(self) -> str:
        return "\n".join(ev.to_json() for ev in self.events) + ("\n" if self.events else "")

    def find(self, layer: str | None = None, lan: str | None = None,
             summary_prefix: str | None = None) -> list[TraceEvent]:
        out = []
        for ev in self.events:
            if layer is not None and ev.layer != layer:
                continue
            if lan is not None and ev.lan != lan:
                continue
            if summary_prefix is not None and not ev.summary.startswith(summary_prefix):
                continue
            out.append(ev)
        return out


# ---------------------------------------------------------------------------
# Topology

@dataclass
class Lan:
    name: str
    prefix: str            # dotted /24-style prefix, e.g. "10.0.0"
    nat: bool = False      # True: no inbound dials from other LANs
    isolated: bool = False  # True: no route to or from other LANs
    assignments: dict[str, str] = field(default_factory=dict)  # addr -> host name

    def lowest_free(self) -> str:
        n = 1
        while f"{self.prefix}.{n}" in self.assignments:
            n += 1
        if n > 254:
            raise NetError(f"LAN {self.name} is full")
        return f"{self.prefix}.{n}"


class Host:
    """A node. Interfaces map LAN name to this host's address there."""

    def __init__(self, name: str):
        self.name = name
        self.interfaces: dict[str, str] = {}
        self.listeners: dict[int, Callable] = {}

    def listen(self, port: int, accept: Callable[["Endpoint"], None]) -> None:
        if port in self.listeners:
            raise NetError(f"{self.name} already listens on {port}")
        self.listeners[port] = accept

    def unlisten(self, port: int) -> None:
        self.listeners.pop(port, None)

    def addr(self, lan_name: str) -> str:
        try:
            return self.interfaces[lan_name]
        except KeyError:
            raise NetError(f"{self.name} has no interface on {lan_name}") from None

    def __repr__(self):
        return f"<Host {self.name} {self.interfaces}>"


@dataclass(frozen=True)
class Observation:
    """What a passive tap sees for one delivered message."""

    t_ms: int
    src: str
    dst: str
    port: int
    secured: bool
    length: int
    data: bytes | None  # None when the channel is secured


class Endpoint:
    """One end of a channel. Set .handler to receive; call send to emit."""

    def __init__(self, channel: "Channel", host: Host, lan_name: str):
        self.channel = channel
        self.host = host
        self.lan_name = lan_name
        self.handler: Callable[["Endpoint", bytes], None] | None = None
        self.on_close: Callable[["Endpoint"], None] | None = None

    @property
    def peer(self) -> "Endpoint":
        a, b = self.channel.ends
        return b if self is a else a

    @property
    def closed(self) -> bool:
        return self.channel.closed

    def send(self, data: bytes, layer: str, summary: str,
             payload: dict | None = None) -> None:
        self.channel.send_from(self, data, layer, summary, payload)

    def close(self) -> None:
        self.channel.close(self)

    def __repr__(self):
        state = "closed" if self.closed else "open"
        return f"<Endpoint {self.host.name}@{self.lan_name} cid={self.channel.cid} {state}>"


class Channel:
    """Duplex FIFO pipe. Per-message latency is fixed at open time."""

    def __init__(self, network: "Network", cid: int, a: tuple[Host, str],
                 b: tuple[Host, str], port: int, secured: bool, latency: int):
        self.network = network
        self.cid = cid
        self.port = port
        self.secured = secured
        self.latency = latency
        self.closed = False
        self.ends = (Endpoint(self, a[0], a[1]), Endpoint(self, b[0], b[1]))

    def send_from(self, src: Endpoint, data: bytes, layer: str, summary: str,
                  payload: dict | None) -> None:
        if self.closed:
            raise NetError(f"send on closed channel cid={self.cid}")
        if not isinstance(data, bytes):
            raise TypeError("channel payloads are bytes")
        dst = src.peer
        net = self.network
        net.trace.record(t_ms=net.scheduler.now, src=src.host.name, dst=dst.host.name,
                         lan=dst.lan_name, secured=self.secured, layer=layer,
                         summary=summary, payload=payload)
        obs = Observation(t_ms=net.scheduler.now, src=src.host.name, dst=dst.host.name,
                          port=self.port, secured=self.secured, length=len(data),
                          data=None if self.secured else data)
        net.scheduler.at(self.latency, self._deliver, dst, data, obs)

    def _deliver(self, dst: Endpoint, data: bytes, obs: Observation) -> None:
        # close() stops new sends but frames already in flight still land,
        # so a peer that sends an error and immediately hangs up is heard
        # taps first: a sniffer reacts to a frame before its addressee does
        for tap in self.network.taps.get(dst.lan_name, []):
            tap(obs)
        if dst.handler is not None:
            dst.handler(dst, data)

    def close(self, closer: Endpoint) -> None:
        if self.closed:
            return
        self.closed = True
        peer = closer.peer
        if peer.on_close is not None:
            self.network.scheduler.at(self.latency, self._notify_close, peer)

    def _notify_close(self, peer: Endpoint) -> None:
        if peer.on_close is not None:
            peer.on_close(peer)


# ---------------------------------------------------------------------------
# The fabric

class Network:
    def __init__(self):
        self.scheduler = Scheduler()
        self.trace = TraceLog()
        self.lans: dict[str, Lan] = {}
        self.hosts: dict[str, Host] = {}
        self.taps: dict[str, list[Callable[[Observation], None]]] = {}
        self.dns: dict[str, str] = {}
        self.channels: list[Channel] = []
        self._next_cid = 1
        self._pairing_prefixes = [f"192.168.{n}" for n in range(11, 31)]

    # -- topology construction

    def add_lan(self, name: str, prefix: str, nat: bool = False,
                isolated: bool = False) -> Lan:
        if name in self.lans:
            raise NetError(f"duplicate LAN {name}")
        lan = Lan(name=name, prefix=prefix, nat=nat, isolated=isolated)
        self.lans[name] = lan
        return lan

    def add_host(self, name: str) -> Host:
        if name in self.hosts:
            raise NetError(f"duplicate host {name}")
        host = Host(name)
        self.hosts[name] = host
        return host

    def attach(self, host: Host, lan_name: str) -> str:
        """Put an interface on a LAN; lowest free address wins."""
        lan = self.lans[lan_name]
        if lan_name in host.interfaces:
            raise NetError(f"{host.name} already on {lan_name}")
        addr = lan.lowest_free()
        lan.assignments[addr] = host.name
        host.interfaces[lan_name] = addr
        return addr

    def detach(self, host: Host, lan_name: str) -> None:
        """Drop an interface; every channel riding it closes."""
        lan = self.lans[lan_name]
        addr = host.interfaces.pop(lan_name, None)
        if addr is None:
            raise NetError(f"{host.name} not on {lan_name}")
        del lan.assignments[addr]
        for chan in self.channels:
            if chan.closed:
                continue
            for end in chan.ends:
                if end.host is host and end.lan_name == lan_name:
                    chan.close(end)
                    break

    def remove_lan(self, name: str) -> None:
        lan = self.lans[name]
        for host_name in list(lan.assignments.values()):
            self.detach(self.hosts[host_name], name)
        del self.lans[name]
        self.taps.pop(name, None)

    # -- names and addresses

    def register_name(self, name: str, addr: str) -> None:
        self.dns[name] = addr

    def lookup(self, name: str, from_host: Host) -> str:
        # name service lives on the open internet: a host whose every
        # interface sits on an isolated LAN cannot reach it
        if all(self.lans[ln].isolated for ln in from_host.interfaces):
            raise NetError(f"{from_host.name} has no route to a resolver")
        if name not in self.dns:
            raise NetError(f"unknown name {name!r}")
        return self.dns[name]

    def whereis(self, addr: str) -> tuple[Host, Lan]:
        for lan in self.lans.values():
            if addr in lan.assignments:
                return self.hosts[lan.assignments[addr]], lan
        raise NetError(f"no host holds address {addr}")

    # -- observation

    def add_tap(self, lan_name: str, observer: Callable[[Observation], None]) -> None:
        if lan_name not in self.lans:
            raise NetError(f"no LAN named {lan_name}")
        self.taps.setdefault(lan_name, []).append(observer)

    def note(self, host: Host | str, layer: str, summary: str,
             payload: dict | None = None, lan: str = "-") -> None:
        """Record a node-local trace event (mode changes, decisions)."""
        name = host.name if isinstance(host, Host) else host
        self.trace.record(t_ms=self.scheduler.now, src=name, dst=name, lan=lan,
                          secured=False, layer=layer, summary=summary, payload=payload)

    # -- dialing

    def open_channel(self, src: Host, dst_addr: str, port: int,
                     secured: bool = False) -> Endpoint:
        """Synchronously dial (dst_addr, port). Returns the caller's end;
        the listener's accept callback runs immediately with the other."""
        dst_host, dst_lan = self.whereis(dst_addr)
        src_lan_name, local = self._route(src, dst_host, dst_lan)
        accept = dst_host.listeners.get(port)
        if accept is None:
            raise NetError(f"connection refused: {dst_addr}:{port}")
        chan = Channel(self, self._next_cid, (src, src_lan_name),
                       (dst_host, dst_lan.name), port, secured,
                       HOP_MS if local else WAN_MS)
        self._next_cid += 1
        self.channels.append(chan)
        client_end, server_end = chan.ends
        accept(server_end)
        return client_end

    def _route(self, src: Host, dst_host: Host, dst_lan: Lan) -> tuple[str, bool]:
        if dst_lan.name in src.interfaces:
            return dst_lan.name, True
        if dst_lan.isolated:
            raise NetError(f"{dst_lan.name} is isolated; only its own members reach it")
        if dst_lan.nat:
            raise NetError(f"{dst_host.name} is behind NAT on {dst_lan.name}")
        for lan_name in src.interfaces:
            if not self.lans[lan_name].isolated:
                return lan_name, False
        raise NetError(f"{src.name} has no route off its isolated LAN(s)")

    # -- run control

    def run(self, budget: int = EVENT_BUDGET) -> int:
        return self.scheduler.run_until_idle(budget)


# ---------------------------------------------------------------------------
# Setup-mode micro-network

class PairingNetwork:
    """The temporary LAN a device in setup mode hosts: isolated from
    everything, owner at .1, its presence announced exactly once."""

    def __init__(self, network: Network, owner: Host, ssid: str):
        if not network._pairing_prefixes:
            raise NetError("no pairing prefixes left")
        self.network = network
        self.owner = owner
        self.ssid = ssid
        prefix = network._pairing_prefixes.pop(0)
        self.lan = network.add_lan(name=f"pair:{ssid}", prefix=prefix, isolated=True)
        owner_addr = network.attach(owner, self.lan.name)
        assert owner_addr.endswith(".1")
        network.note(owner, "sys", f"announce:{ssid}", lan=self.lan.name)

    @property
    def owner_addr(self) -> str:
        return self.owner.addr(self.lan.name)

    def join(self, host: Host) -> str:
        return self.network.attach(host, self.lan.name)

    def teardown(self) -> None:
        prefix = self.lan.prefix
        self.network.remove_lan(self.lan.name)
        self.network._pairing_prefixes.insert(0, prefix)
