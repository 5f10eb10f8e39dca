"""Scenario runner and trace assertion engine.

A scenario is one JSON file with three blocks. The topology block
builds the world: LANs, accounts, Wi-Fi networks, devices, phones, and
adversaries. The action block fires admin and attacker moves at given
virtual times. The assertion block is judged against the finished
trace. Running a scenario is therefore: build, schedule, drain the
scheduler, write the trace as JSON lines, evaluate.

Four assertion kinds cover everything the built-ins need:

    subsequence   these (layer, summary-pattern) steps occur in order
    count         exactly N events match a filter
    absent        a substring appears nowhere in summaries or payloads
    locality      matching events stay on given LANs, or always touch
                  a given host (e.g. all media rides the relay)

Exit codes follow CI convention: 0 all assertions hold, 1 at least one
failed, 2 the scenario or command line was unusable. The seed comes
from --seed, else the ECHO_TESTBED_SEED environment variable, else the
scenario file; identical seeds give byte-identical traces.

`assert` reruns the engine against any saved trace with no simulation
involved, which keeps verdicts reproducible after the fact.
"""

from __future__ import annotations

import argparse
import fnmatch
import json
import os
import random
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .calling import DEFAULT_ANSWER_DELAY_MS, DEFAULT_FRAME_COUNT
from .client import CompanionApp, Eavesdropper, Hijacker, WifiCredential
from .cloud import CloudServices
from .device import EchoDevice, WifiNetwork, WifiNetworkTable
from .netsim import BudgetExceeded, NetError, Network

SCENARIO_BUDGET = 100_000   # every built-in quiesces well inside this

BUILTINS = (
    "pair",
    "pair_eavesdrop",
    "hijack_registered",
    "hijack_deregistered",
    "avs_handshake",
    "avs_replay",
    "intercom_same_lan",
    "call_cross_lan_fork",
    "call_pstn",
    "token_reuse",
)

SEED_ENV = "ECHO_TESTBED_SEED"


class ScenarioError(Exception):
    """The scenario file or its execution plan is unusable."""


# ---------------------------------------------------------------------------
# Loading and validation

def _require(obj: dict, key: str, kind, where: str):
    if key not in obj:
        raise ScenarioError(f"{where}: missing {key!r}")
    val = obj[key]
    if not isinstance(val, kind):
        raise ScenarioError(f"{where}: {key!r} must be {kind.__name__}")
    return val


ASSERTION_KINDS = ("subsequence", "count", "absent", "locality")

_FILTER_KEYS = ("layer", "lan", "summary", "src", "dst")

_OP_KEYS = {
    "enter_setup": ("device",),
    "start_pairing": ("client", "device"),
    "tap_pairing": ("attacker", "device"),
    "deregister": ("device",),
    "connect_avs": ("device",),
    "replay_negotiation": ("device",),
    "refresh": ("device",),
    "start_call": ("device", "callee"),
    "end_call": ("device",),
    "replay_invite": ("device",),
}


def validate_assertion(rule, where: str = "assertion") -> None:
    if not isinstance(rule, dict):
        raise ScenarioError(f"{where}: must be an object")
    kind = _require(rule, "kind", str, where)
    if kind not in ASSERTION_KINDS:
        raise ScenarioError(f"{where}: unknown kind {kind!r}")
    if kind == "subsequence":
        steps = _require(rule, "events", list, where)
        for step in steps:
            if (not isinstance(step, list) or len(step) != 2
                    or not all(isinstance(s, str) for s in step)):
                raise ScenarioError(f"{where}: each step is [layer, pattern]")
    elif kind == "count":
        _require(rule, "equals", int, where)
    elif kind == "absent":
        _require(rule, "pattern", str, where)
    elif kind == "locality":
        has_lans = isinstance(rule.get("lans"), list)
        has_via = isinstance(rule.get("via"), str)
        if has_lans == has_via:
            raise ScenarioError(f"{where}: needs exactly one of 'lans' or 'via'")


def validate_scenario(scn) -> None:
    if not isinstance(scn, dict):
        raise ScenarioError("scenario: top level must be an object")
    _require(scn, "name", str, "scenario")
    where = f"scenario {scn['name']!r}"
    topo = scn.get("topology", {})
    if not isinstance(topo, dict):
        raise ScenarioError(f"{where}: topology must be an object")
    for section in ("lans", "accounts", "wifi", "devices", "clients", "attackers"):
        if not isinstance(topo.get(section, []), list):
            raise ScenarioError(f"{where}: topology.{section} must be a list")
    for i, act in enumerate(scn.get("actions", [])):
        spot = f"{where} action[{i}]"
        if not isinstance(act, dict):
            raise ScenarioError(f"{spot}: must be an object")
        op = _require(act, "op", str, spot)
        if op not in _OP_KEYS:
            raise ScenarioError(f"{spot}: unknown op {op!r}")
        if not isinstance(act.get("at", 0), int) or act.get("at", 0) < 0:
            raise ScenarioError(f"{spot}: 'at' must be a non-negative integer")
        for key in _OP_KEYS[op]:
            _require(act, key, str, spot)
    for i, rule in enumerate(scn.get("assertions", [])):
        validate_assertion(rule, f"{where} assertion[{i}]")


def load_scenario(ref: str) -> dict:
    """Load a built-in by name or any scenario file by path."""
    if ref in BUILTINS:
        text = (resources.files(__package__) / "scenarios" / f"{ref}.json") \
            .read_text(encoding="utf-8")
    else:
        path = Path(ref)
        if not path.is_file():
            raise ScenarioError(
                f"unknown scenario {ref!r}; built-ins: {', '.join(BUILTINS)}")
        text = path.read_text(encoding="utf-8")
    try:
        scn = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{ref}: not valid JSON ({exc})") from exc
    validate_scenario(scn)
    return scn


# ---------------------------------------------------------------------------
# World construction

@dataclass
class World:
    """Everything a run built, for tests that reach past the trace."""

    network: Network
    cloud: CloudServices
    accounts: dict[str, str] = field(default_factory=dict)
    wifi: dict[str, WifiNetwork] = field(default_factory=dict)
    devices: dict[str, EchoDevice] = field(default_factory=dict)
    clients: dict[str, CompanionApp] = field(default_factory=dict)
    attackers: dict[str, Eavesdropper] = field(default_factory=dict)


def _component_rng(seed: str, label: str) -> random.Random:
    # one independent, reproducible stream per component
    return random.Random(f"{seed}:{label}")


def build_world(scn: dict, seed: str) -> World:
    topo = scn.get("topology", {})
    net = Network()
    net.add_lan("cloud", "10.0.0")
    cloud = CloudServices(net, _component_rng(seed, "cloud"))
    world = World(network=net, cloud=cloud)

    for entry in topo.get("lans", []):
        net.add_lan(_require(entry, "name", str, "lan"),
                    _require(entry, "prefix", str, "lan"),
                    nat=bool(entry.get("nat", False)),
                    isolated=bool(entry.get("isolated", False)))

    for entry in topo.get("accounts", []):
        account = _require(entry, "id", str, "account")
        password = _require(entry, "password", str, "account")
        cloud.provision_account(account, password)
        world.accounts[account] = password

    for entry in topo.get("wifi", []):
        ssid = _require(entry, "ssid", str, "wifi")
        world.wifi[ssid] = WifiNetwork(
            ssid=ssid, lan_name=_require(entry, "lan", str, "wifi"),
            passphrase=_require(entry, "passphrase", str, "wifi"))

    for entry in topo.get("devices", []):
        serial = _require(entry, "serial", str, "device")
        visible = entry.get("visible_wifi")
        names = list(world.wifi) if visible is None else visible
        try:
            table = WifiNetworkTable([world.wifi[n] for n in names])
        except KeyError as exc:
            raise ScenarioError(f"device {serial}: unknown wifi {exc}") from exc
        dev = EchoDevice(
            net, serial, _component_rng(seed, f"device:{serial}"), table,
            name=entry.get("host"),
            intercom=bool(entry.get("intercom", True)),
            answer_delay_ms=int(entry.get("answer_delay_ms",
                                          DEFAULT_ANSWER_DELAY_MS)),
            frame_count=int(entry.get("frame_count", DEFAULT_FRAME_COUNT)),
            auto_bye=bool(entry.get("auto_bye", True)))
        cloud.provision_factory(serial, dev.cert, dev.device_secret)
        state = entry.get("state", "factory")
        if state == "paired":
            grant = cloud.provision_grant(
                serial, _require(entry, "account", str, f"device {serial}"))
            dev.provision_paired(_require(entry, "lan", str, f"device {serial}"),
                                 grant)
        elif state != "factory":
            raise ScenarioError(f"device {serial}: unknown state {state!r}")
        if entry.get("registered_to"):
            if state == "paired":
                raise ScenarioError(
                    f"device {serial}: registered_to is for factory devices")
            # the registry remembers a past owner; the device itself holds
            # nothing, as after a factory reset
            cloud.provision_grant(serial, entry["registered_to"])
        world.devices[serial] = dev

    for entry in topo.get("clients", []):
        name = _require(entry, "name", str, "client")
        account = _require(entry, "account", str, f"client {name}")
        if account not in world.accounts:
            raise ScenarioError(f"client {name}: unknown account {account!r}")
        wifi_name = _require(entry, "wifi", str, f"client {name}")
        w = world.wifi.get(wifi_name)
        if w is None:
            raise ScenarioError(f"client {name}: unknown wifi {wifi_name!r}")
        app = CompanionApp(net, name, account, world.accounts[account],
                           WifiCredential(ssid=w.ssid, passphrase=w.passphrase),
                           _component_rng(seed, f"client:{name}"))
        if entry.get("lan"):
            app.join_home(entry["lan"])
        world.clients[name] = app

    for entry in topo.get("attackers", []):
        name = _require(entry, "name", str, "attacker")
        kind = _require(entry, "kind", str, f"attacker {name}")
        if kind == "eavesdropper":
            atk: Eavesdropper = Eavesdropper(net, name)
        elif kind == "hijacker":
            account = _require(entry, "account", str, f"attacker {name}")
            if account not in world.accounts:
                raise ScenarioError(f"attacker {name}: unknown account {account!r}")
            atk = Hijacker(net, name, account, world.accounts[account])
            if entry.get("uplink"):
                atk.bring_uplink(entry["uplink"])
        else:
            raise ScenarioError(f"attacker {name}: unknown kind {kind!r}")
        world.attackers[name] = atk

    return world


def _bind_action(world: World, act: dict, idx: int):
    """Resolve one action's referents now; return the closure to schedule."""
    op = act["op"]
    label = f"action[{idx}] {op}"

    def need(table: dict, key: str, what: str):
        ref = act.get(key)
        obj = table.get(ref)
        if obj is None:
            raise ScenarioError(f"{label}: no {what} named {ref!r}")
        return obj

    if op in ("enter_setup", "connect_avs", "replay_negotiation"):
        dev = need(world.devices, "device", "device")
        return {"enter_setup": dev.enter_setup,
                "connect_avs": dev.connect_avs,
                "replay_negotiation": dev.replay_negotiation}[op]
    if op == "start_pairing":
        dev = need(world.devices, "device", "device")
        client = need(world.clients, "client", "client")

        def start():
            if dev.pairing is None:
                raise ScenarioError(f"{label}: {dev.serial} is not in setup mode")
            client.start_pairing(dev.pairing)
        return start
    if op == "tap_pairing":
        dev = need(world.devices, "device", "device")
        attacker = need(world.attackers, "attacker", "attacker")

        def tap():
            if dev.pairing is None:
                raise ScenarioError(f"{label}: {dev.serial} is not in setup mode")
            attacker.join(dev.pairing)
        return tap
    if op == "deregister":
        dev = need(world.devices, "device", "device")
        return lambda: world.cloud.deregister_device(dev.serial)
    if op == "refresh":
        dev = need(world.devices, "device", "device")
        return lambda: world.cloud.refresh(dev.serial)
    if op == "start_call":
        dev = need(world.devices, "device", "device")
        callee = act["callee"]
        call_type = act.get("call_type", "call")
        return lambda: world.cloud.start_call(dev.serial, callee, call_type)
    if op == "end_call":
        dev = need(world.devices, "device", "device")
        return lambda: world.cloud.end_call(dev.serial)
    if op == "replay_invite":
        dev = need(world.devices, "device", "device")
        return dev.comms.replay_last_invite
    raise ScenarioError(f"{label}: unknown op")   # unreachable after validation


def _schedule_actions(world: World, actions: list) -> None:
    for idx, act in enumerate(actions):
        world.network.scheduler.at(int(act.get("at", 0)),
                                   _bind_action(world, act, idx))


# ---------------------------------------------------------------------------
# Assertion engine

@dataclass
class Verdict:
    kind: str
    ok: bool
    detail: str


def _matches(ev: dict, rule: dict) -> bool:
    for key in ("layer", "lan", "src", "dst"):
        want = rule.get(key)
        if want is not None and ev.get(key) != want:
            return False
    if rule.get("secured") is not None and ev.get("secured") != rule["secured"]:
        return False
    pat = rule.get("summary")
    if pat is not None and not fnmatch.fnmatchcase(ev.get("summary", ""), pat):
        return False
    return True


def _eval_subsequence(events: list[dict], rule: dict) -> Verdict:
    steps = rule["events"]
    lan = rule.get("lan")
    idx = 0
    last_seq = None
    for ev in events:
        if idx >= len(steps):
            break
        if lan is not None and ev.get("lan") != lan:
            continue
        layer, pat = steps[idx]
        if (layer == "*" or ev.get("layer") == layer) \
                and fnmatch.fnmatchcase(ev.get("summary", ""), pat):
            idx += 1
            last_seq = ev.get("seq")
    if idx == len(steps):
        return Verdict("subsequence", True,
                       f"all {len(steps)} steps found in order")
    after = "start" if last_seq is None else f"seq={last_seq}"
    return Verdict("subsequence", False,
                   f"step {idx + 1}/{len(steps)} {steps[idx]} not found after {after}")


def _eval_count(events: list[dict], rule: dict) -> Verdict:
    hits = [ev for ev in events if _matches(ev, rule)]
    want = rule["equals"]
    what = {k: rule[k] for k in (*_FILTER_KEYS, "secured") if rule.get(k) is not None}
    if len(hits) == want:
        return Verdict("count", True, f"{what} == {want}")
    seqs = [ev.get("seq") for ev in hits[:5]]
    return Verdict("count", False,
                   f"{what}: expected {want}, found {len(hits)} (seq {seqs})")


def _eval_absent(events: list[dict], rule: dict) -> Verdict:
    needle = rule["pattern"]
    scanned = 0
    for ev in events:
        if not _matches(ev, rule):
            continue
        scanned += 1
        hay = ev.get("summary", "")
        if ev.get("payload") is not None:
            hay += json.dumps(ev["payload"], sort_keys=True)
        if needle in hay:
            return Verdict("absent", False,
                           f"{needle!r} present at seq={ev.get('seq')} "
                           f"({ev.get('layer')} {ev.get('summary')})")
    return Verdict("absent", True, f"{needle!r} absent from {scanned} events")


def _eval_locality(events: list[dict], rule: dict) -> Verdict:
    hits = [ev for ev in events if _matches(ev, rule)]
    if "lans" in rule:
        allowed = set(rule["lans"])
        bad = [ev for ev in hits if ev.get("lan") not in allowed]
        place = f"LANs {sorted(allowed)}"
    else:
        via = rule["via"]
        bad = [ev for ev in hits if via not in (ev.get("src"), ev.get("dst"))]
        place = f"host {rule['via']!r}"
    if not bad:
        return Verdict("locality", True, f"all {len(hits)} events within {place}")
    ev = bad[0]
    return Verdict("locality", False,
                   f"{len(bad)}/{len(hits)} events outside {place}, first "
                   f"seq={ev.get('seq')} on lan={ev.get('lan')} "
                   f"({ev.get('src')} -> {ev.get('dst')})")


_EVALUATORS = {
    "subsequence": _eval_subsequence,
    "count": _eval_count,
    "absent": _eval_absent,
    "locality": _eval_locality,
}


def evaluate_assertion(events: list[dict], rule: dict) -> Verdict:
    validate_assertion(rule)
    return _EVALUATORS[rule["kind"]](events, rule)


def evaluate_all(events: list[dict], rules: list) -> list[Verdict]:
    return [evaluate_assertion(events, rule) for rule in rules]


# ---------------------------------------------------------------------------
# Running

@dataclass
class RunResult:
    name: str
    seed: str
    exit_code: int           # 0 pass, 1 assertion failure, 2 runtime error
    verdicts: list[Verdict]
    events: list[dict]
    jsonl: str
    world: World
    error: str | None = None


def run_scenario(scn: dict, seed: str | None = None) -> RunResult:
    """Build, run to quiescence, evaluate. Raises ScenarioError only for
    setup problems; runtime failures come back as exit_code 2 with the
    partial trace attached."""
    name = scn.get("name", "scenario")
    if seed is None:
        seed = str(scn.get("seed", name))
    try:
        world = build_world(scn, seed)
        _schedule_actions(world, scn.get("actions", []))
    except (NetError, ValueError, KeyError) as exc:
        raise ScenarioError(f"{name}: setup failed: {exc}") from exc

    error = None
    try:
        world.network.run(SCENARIO_BUDGET)
    except (BudgetExceeded, NetError, ScenarioError) as exc:
        error = f"{type(exc).__name__}: {exc}"

    events = [json.loads(ev.to_json()) for ev in world.network.trace.events]
    verdicts = evaluate_all(events, scn.get("assertions", []))
    if error is not None:
        exit_code = 2
    else:
        exit_code = 0 if all(v.ok for v in verdicts) else 1
    return RunResult(name=name, seed=seed, exit_code=exit_code,
                     verdicts=verdicts, events=events,
                     jsonl=world.network.trace.jsonl(), world=world,
                     error=error)


# ---------------------------------------------------------------------------
# Command line

def _print_verdicts(verdicts: list[Verdict]) -> None:
    for v in verdicts:
        print(f"{'PASS' if v.ok else 'FAIL'} {v.kind}: {v.detail}")


def cmd_run(args) -> int:
    try:
        scn = load_scenario(args.scenario)
        seed = args.seed or os.environ.get(SEED_ENV)
        result = run_scenario(scn, seed=seed)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    trace_path = Path(args.trace) if args.trace else Path(f"{result.name}.trace.jsonl")
    trace_path.write_text(result.jsonl, encoding="utf-8")
    _print_verdicts(result.verdicts)
    passed = sum(v.ok for v in result.verdicts)
    print(f"{result.name}: seed={result.seed} events={len(result.events)} "
          f"assertions={passed}/{len(result.verdicts)} trace={trace_path}")
    if result.error:
        print(f"error: {result.error}", file=sys.stderr)
    return result.exit_code


def cmd_list(args) -> int:
    for name in BUILTINS:
        scn = load_scenario(name)
        print(f"{name:22} {scn.get('description', '')}")
    return 0


def cmd_explain(args) -> int:
    try:
        scn = load_scenario(args.name)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    topo = scn.get("topology", {})
    print(scn["name"])
    print(f"  {scn.get('description', '(no description)')}")
    print(f"  seed: {scn.get('seed', scn['name'])}")
    parts = [f"{len(topo.get(s, []))} {s}" for s in
             ("lans", "accounts", "devices", "clients", "attackers")
             if topo.get(s)]
    print(f"  topology: {', '.join(parts) if parts else 'cloud only'}")
    for act in scn.get("actions", []):
        args_txt = ", ".join(f"{k}={v}" for k, v in act.items()
                             if k not in ("at", "op"))
        print(f"  t={act.get('at', 0):>6}ms  {act['op']}  {args_txt}")
    print(f"  assertions: {len(scn.get('assertions', []))}")
    for rule in scn.get("assertions", []):
        brief = {k: v for k, v in rule.items() if k != "kind"}
        print(f"    {rule['kind']}: {json.dumps(brief, sort_keys=True)}")
    return 0


def cmd_assert(args) -> int:
    try:
        lines = Path(args.trace).read_text(encoding="utf-8").splitlines()
        events = [json.loads(line) for line in lines if line.strip()]
        rules = json.loads(Path(args.assertions).read_text(encoding="utf-8"))
        if isinstance(rules, dict):
            rules = rules.get("assertions", [])
        if not isinstance(rules, list):
            raise ScenarioError("assertions file: expected a list")
        for i, rule in enumerate(rules):
            validate_assertion(rule, f"assertion[{i}]")
    except (OSError, json.JSONDecodeError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    verdicts = evaluate_all(events, rules)
    _print_verdicts(verdicts)
    return 0 if all(v.ok for v in verdicts) else 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="echo-testbed",
        description="Deterministic testbed for smart-speaker pairing, "
                    "voice-service handshake, and drop-in calling protocols.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario and judge its assertions")
    p_run.add_argument("scenario", help="built-in name or path to a JSON file")
    p_run.add_argument("--seed", help=f"override the seed (default: ${SEED_ENV} "
                                      "or the scenario file)")
    p_run.add_argument("--trace", help="trace output path "
                                       "(default: NAME.trace.jsonl)")
    p_run.set_defaults(fn=cmd_run)

    p_list = sub.add_parser("list", help="name the built-in scenarios")
    p_list.set_defaults(fn=cmd_list)

    p_explain = sub.add_parser("explain", help="describe one scenario")
    p_explain.add_argument("name")
    p_explain.set_defaults(fn=cmd_explain)

    p_assert = sub.add_parser("assert",
                              help="evaluate an assertions file against a saved trace")
    p_assert.add_argument("trace", help="JSON-lines trace file")
    p_assert.add_argument("assertions", help="JSON file with an assertion list")
    p_assert.set_defaults(fn=cmd_assert)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
