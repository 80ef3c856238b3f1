"""Scenario loader: YAML file or plain dict → ``ScenarioConfig``.

The document may be nested under a top-level ``scenario:`` key or be flat.
Validation errors raise ``ConfigInvalid`` carrying the 1-based line of the
offending YAML node when it is known.

Example YAML:

    scenario:
      name: demo
      seed: 7
      duration: 300
      link_delay: 1
      collaboration: true
      detector: {threshold: 10, window: 50}
      blacklist: {repeat_threshold: 5, repeat_window: 50, malformed_threshold: 3}
      servers: {base: 192.0.2.1, count: 32}
      middleboxes:
        - {id: fw-1, service: fw, kind: firewall, allowlist: [192.0.2.1, 192.0.2.2],
           rules: [{class: cctv, verdict: drop}]}
        - {id: ids-1, service: ids, kind: ids,
           signatures: [{name: telnet, match: {protocol: tcp, dst_port: 23}}]}
        - {id: ids-1b, replica_of: ids-1}
      segments:
        - name: home
          network: 10.0.1.0/24
          chains: {default: [fw, ids], cctv: [fw, ids]}
          hosts:
            - {addr: 10.0.1.1, device_id: 1}
            - {addr: 10.0.1.2, device_id: 2, class: cctv}
      attackers:
        count: 15
        base: 198.51.100.1
        probe_rate: [1, 5]
        schedule: [{segment: home, start: 0}]
      failures:
        - {tick: 40, component: cloud-manager}
"""

from __future__ import annotations
import ipaddress
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .cloud import CloudConfig, LowActivitySchedule
from .errors import ConfigInvalid
from .middlebox import (
    DpiConfig, FirewallConfig, FirewallRule, IdsConfig, MiddleboxConfig,
    RateCondition, Signature,
)
from .types import (
    FIELDS, PROTOCOL_NAMES, DefaultVerdict, FlowMetadata, Issuer, MatchPattern,
    Priority, SecurityPolicy, UserProfile, Verdict, ip_to_int,
)

DEFAULT_OUT = os.environ.get("SECUREBOX_OUT", "out")

FAILURE_KINDS = ("cloud-manager", "middlebox", "link-down", "link-up",
                 "revoke", "rogue-update", "replay", "reboot")


# ------------------------------------------------------------------
# Records
# ------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class HostConfig:
    addr: int
    device_id: int
    device_class: str | None = None


@dataclass(frozen=True, slots=True)
class ManualPolicyConfig:
    pattern: MatchPattern
    verdict: Verdict


@dataclass(frozen=True, slots=True)
class SegmentConfig:
    name: str
    network: ipaddress.IPv4Network
    hosts: tuple[HostConfig, ...]
    chains: Mapping[str, tuple[str, ...]]
    share_data: bool = True
    full_session_routing: bool = False
    default_verdict: DefaultVerdict = field(default_factory=DefaultVerdict)
    manual_policies: tuple[ManualPolicyConfig, ...] = ()

    def profile(self, box_id: int) -> UserProfile:
        return UserProfile(
            box_id=box_id,
            local_network=self.network,
            class_map={h.device_id: h.device_class for h in self.hosts if h.device_class},
            chains=dict(self.chains),
            share_data=self.share_data,
            full_session_routing=self.full_session_routing,
        )


@dataclass(frozen=True, slots=True)
class MiddleboxSpec:
    instance_id: str
    service: str
    config: MiddleboxConfig
    replica_of: str | None = None


@dataclass(frozen=True, slots=True)
class BenignConfig:
    clients: int = 20
    client_base: int = ip_to_int("203.0.113.1")
    rate: float = 0.05                  # inbound flows per client per tick at peak
    ports: tuple[int, ...] = (80, 443)
    outbound_rate: float = 0.02         # outbound flows per host per tick at peak
    outbound_ports: tuple[int, ...] = (443, 80)


@dataclass(frozen=True, slots=True)
class AttackWave:
    segment: str
    start: int


@dataclass(frozen=True, slots=True)
class AttackConfig:
    count: int = 0
    base: int = ip_to_int("198.51.100.1")
    ports_per_target: int = 1000
    probe_rate: tuple[int, int] = (5, 5)      # inclusive range, sampled per zombie
    schedule: tuple[AttackWave, ...] = ()


@dataclass(frozen=True, slots=True)
class ScriptedFlow:
    tick: int
    segment: str
    flow: FlowMetadata
    inbound: bool
    attack: bool = False


@dataclass(frozen=True, slots=True)
class FailureSpec:
    tick: int
    kind: str
    target: str | None = None

    @property
    def component(self) -> str:
        return self.kind if self.target is None else f"{self.kind}:{self.target}"


@dataclass(frozen=True, slots=True)
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    duration: int = 100
    link_delay: int = 1
    report_interval: int = 10
    snapshot_interval: int = 0
    diurnal_period: int = 0             # 0: flat activity
    diurnal_trough: float = 0.1
    cloud: CloudConfig = field(default_factory=CloudConfig)
    derive_low_activity: bool = True
    middleboxes: tuple[MiddleboxSpec, ...] = ()
    servers: tuple[int, ...] = ()
    segments: tuple[SegmentConfig, ...] = ()
    benign: BenignConfig = field(default_factory=BenignConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    scripted_flows: tuple[ScriptedFlow, ...] = ()
    failures: tuple[FailureSpec, ...] = ()

    @property
    def response_timeout(self) -> int:
        """Ticks a parked flow waits: the nominal round trip plus two."""
        return 2 * self.link_delay + 2

    @property
    def collaboration(self) -> bool:
        return self.cloud.collaboration

    def segment_index(self, name: str) -> int:
        for i, seg in enumerate(self.segments):
            if seg.name == name:
                return i
        raise KeyError(name)

    def with_overrides(self, *, seed: int | None = None,
                       collaboration: bool | None = None,
                       failures: tuple[FailureSpec, ...] | None = None) -> "ScenarioConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if collaboration is not None:
            cfg = replace(cfg, cloud=replace(cfg.cloud, collaboration=collaboration))
        if failures is not None:
            cfg = replace(cfg, failures=failures)
        return cfg


# ------------------------------------------------------------------
# Line-tracking YAML
# ------------------------------------------------------------------

class _Mapping(dict):
    """A YAML mapping that remembers where it and its keys were written."""
    line: int | None = None
    key_lines: dict[str, int]


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader: _LineLoader, node: yaml.MappingNode) -> _Mapping:
    loader.flatten_mapping(node)
    mapping = _Mapping()
    mapping.line = node.start_mark.line + 1
    mapping.key_lines = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        mapping[key] = loader.construct_object(value_node, deep=True)
        mapping.key_lines[key] = key_node.start_mark.line + 1
    return mapping


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _line(data: Any, key: str | None = None) -> int | None:
    if key is not None:
        lines = getattr(data, "key_lines", None)
        if lines and key in lines:
            return lines[key]
    return getattr(data, "line", None)


# ------------------------------------------------------------------
# Field readers
# ------------------------------------------------------------------

def _mapping(data: Any, where: str, line: int | None = None) -> Mapping[str, Any]:
    if not isinstance(data, Mapping):
        raise ConfigInvalid(f"{where} must be a mapping", line=_line(data) or line)
    return data


def _check_keys(data: Mapping[str, Any], allowed: set[str], where: str) -> None:
    for key in data:
        if key not in allowed:
            raise ConfigInvalid(f"unknown key {key!r} in {where}", line=_line(data, key))


def _int(data: Mapping[str, Any], key: str, default: int | None = None, *,
         lo: int = 0, hi: int | None = None) -> int:
    if key not in data:
        if default is None:
            raise ConfigInvalid(f"missing required key {key!r}", line=_line(data))
        return default
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigInvalid(f"{key} must be an integer, got {value!r}", line=_line(data, key))
    if value < lo or (hi is not None and value > hi):
        bound = f"{lo}..{hi}" if hi is not None else f">= {lo}"
        raise ConfigInvalid(f"{key}={value} out of range {bound}", line=_line(data, key))
    return value


def _float(data: Mapping[str, Any], key: str, default: float) -> float:
    value = data.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
        raise ConfigInvalid(f"{key} must be a non-negative number", line=_line(data, key))
    return float(value)


def _bool(data: Mapping[str, Any], key: str, default: bool) -> bool:
    value = data.get(key, default)
    if not isinstance(value, bool):
        raise ConfigInvalid(f"{key} must be true or false", line=_line(data, key))
    return value


def _str(data: Mapping[str, Any], key: str, default: str | None = None) -> str:
    if key not in data:
        if default is None:
            raise ConfigInvalid(f"missing required key {key!r}", line=_line(data))
        return default
    value = data[key]
    if not isinstance(value, str) or not value:
        raise ConfigInvalid(f"{key} must be a non-empty string", line=_line(data, key))
    return value


def _list(data: Mapping[str, Any], key: str) -> list[Any]:
    value = data.get(key, [])
    if value is None:
        return []
    if not isinstance(value, list):
        raise ConfigInvalid(f"{key} must be a list", line=_line(data, key))
    return value


def _addr(value: Any, line: int | None) -> int:
    try:
        if isinstance(value, bool):
            raise ValueError
        return ip_to_int(value)
    except (ValueError, TypeError):
        raise ConfigInvalid(f"invalid IPv4 address {value!r}", line=line) from None


def _verdict(value: Any, line: int | None) -> Verdict:
    if isinstance(value, str) and value.upper() in Verdict.__members__:
        return Verdict[value.upper()]
    raise ConfigInvalid(f"verdict must be allow or drop, got {value!r}", line=line)


def _protocol(value: Any, line: int | None) -> int:
    if isinstance(value, str) and value.lower() in PROTOCOL_NAMES:
        return PROTOCOL_NAMES[value.lower()]
    if isinstance(value, int) and not isinstance(value, bool) and 0 <= value <= 0xFF:
        return value
    raise ConfigInvalid(f"unknown protocol {value!r}", line=line)


def _pattern(data: Any, where: str) -> MatchPattern:
    if data is None:
        return MatchPattern()
    data = _mapping(data, where)
    _check_keys(data, set(FIELDS), where)
    values: dict[str, int] = {}
    for name in FIELDS:
        if name not in data:
            continue
        line = _line(data, name)
        if name in ("src_addr", "dst_addr"):
            values[name] = _addr(data[name], line)
        elif name == "protocol":
            values[name] = _protocol(data[name], line)
        else:
            values[name] = _int(data, name, hi=0xFFFF)
    return MatchPattern(**values)


# ------------------------------------------------------------------
# Sections
# ------------------------------------------------------------------

def _load_middlebox(data: Any, index: int, known: dict[str, MiddleboxSpec]) -> MiddleboxSpec:
    where = f"middleboxes[{index}]"
    data = _mapping(data, where)
    _check_keys(data, {"id", "service", "kind", "replica_of", "allowlist", "rules",
                       "signatures", "prevent", "banned", "directory"}, where)
    instance_id = _str(data, "id")
    if instance_id in known:
        raise ConfigInvalid(f"duplicate middlebox id {instance_id!r}", line=_line(data, "id"))

    replica_of = data.get("replica_of")
    if replica_of is not None:
        primary = known.get(replica_of)
        if primary is None:
            raise ConfigInvalid(f"replica_of names unknown middlebox {replica_of!r}",
                                line=_line(data, "replica_of"))
        if set(data) - {"id", "replica_of"}:
            raise ConfigInvalid("a replica takes its service and config from its primary",
                                line=_line(data))
        return MiddleboxSpec(instance_id, primary.service, primary.config, replica_of)

    service = _str(data, "service")
    kind = _str(data, "kind")
    config: MiddleboxConfig
    if kind == "firewall":
        allowlist = frozenset(_addr(a, _line(data, "allowlist")) for a in _list(data, "allowlist"))
        rules = []
        for j, raw in enumerate(_list(data, "rules")):
            rw = f"{where}.rules[{j}]"
            raw = _mapping(raw, rw, _line(data, "rules"))
            _check_keys(raw, {"match", "verdict", "class"}, rw)
            rules.append(FirewallRule(
                pattern=_pattern(raw.get("match"), f"{rw}.match"),
                verdict=_verdict(raw.get("verdict"), _line(raw, "verdict")),
                device_class=raw.get("class"),
            ))
        config = FirewallConfig(allowlist, tuple(rules))
    elif kind == "ids":
        sigs = []
        for j, raw in enumerate(_list(data, "signatures")):
            sw = f"{where}.signatures[{j}]"
            raw = _mapping(raw, sw, _line(data, "signatures"))
            _check_keys(raw, {"name", "match", "rate"}, sw)
            rate = None
            if raw.get("rate") is not None:
                r = _mapping(raw["rate"], f"{sw}.rate", _line(raw, "rate"))
                _check_keys(r, {"count", "window", "key"}, f"{sw}.rate")
                key = _str(r, "key", "src_addr")
                if key not in FIELDS:
                    raise ConfigInvalid(f"rate key must be a flow field, got {key!r}",
                                        line=_line(r, "key"))
                rate = RateCondition(_int(r, "count", lo=1), _int(r, "window", lo=1), key)
            sigs.append(Signature(_str(raw, "name"), _pattern(raw.get("match"), f"{sw}.match"), rate))
        config = IdsConfig(tuple(sigs), _bool(data, "prevent", True))
    elif kind == "dpi":
        directory: dict[tuple[int, int], str] = {}
        for j, raw in enumerate(_list(data, "directory")):
            dw = f"{where}.directory[{j}]"
            raw = _mapping(raw, dw, _line(data, "directory"))
            _check_keys(raw, {"addr", "port", "label"}, dw)
            directory[(_addr(raw.get("addr"), _line(raw, "addr")),
                       _int(raw, "port", 0, hi=0xFFFF))] = _str(raw, "label")
        banned = frozenset(str(b) for b in _list(data, "banned"))
        config = DpiConfig(banned, directory)
    else:
        raise ConfigInvalid(f"unknown middlebox kind {kind!r}", line=_line(data, "kind"))
    return MiddleboxSpec(instance_id, service, config)


def _load_segment(data: Any, index: int, services: set[str]) -> SegmentConfig:
    where = f"segments[{index}]"
    data = _mapping(data, where)
    _check_keys(data, {"name", "network", "hosts", "chains", "share_data",
                       "full_session_routing", "default_verdict", "manual_policies"}, where)
    name = _str(data, "name")
    try:
        network = ipaddress.IPv4Network(_str(data, "network"))
    except ValueError as e:
        raise ConfigInvalid(f"bad network: {e}", line=_line(data, "network")) from None

    chains_raw = _mapping(data.get("chains"), f"{where}.chains", _line(data, "chains"))
    chains: dict[str, tuple[str, ...]] = {}
    for cls, services_raw in chains_raw.items():
        line = _line(chains_raw, cls)
        if not isinstance(services_raw, list) or not services_raw:
            raise ConfigInvalid(f"chain for class {cls!r} must be a non-empty list", line=line)
        for svc in services_raw:
            if svc not in services:
                raise ConfigInvalid(f"chain for class {cls!r} uses unknown service {svc!r}",
                                    line=line)
        if len(set(services_raw)) != len(services_raw):
            raise ConfigInvalid(f"chain for class {cls!r} repeats a service", line=line)
        chains[str(cls)] = tuple(services_raw)
    if "default" not in chains:
        raise ConfigInvalid(f"segment {name!r} needs a chain for class 'default'",
                            line=_line(data, "chains"))

    hosts: list[HostConfig] = []
    seen_devices: set[int] = set()
    for j, raw in enumerate(_list(data, "hosts")):
        hw = f"{where}.hosts[{j}]"
        raw = _mapping(raw, hw, _line(data, "hosts"))
        _check_keys(raw, {"addr", "device_id", "class"}, hw)
        addr = _addr(raw.get("addr"), _line(raw, "addr"))
        if ipaddress.IPv4Address(addr) not in network:
            raise ConfigInvalid(f"host {ipaddress.IPv4Address(addr)} is outside {network}",
                                line=_line(raw, "addr"))
        device_id = _int(raw, "device_id", lo=1, hi=0xFFFF)
        if device_id in seen_devices:
            raise ConfigInvalid(f"duplicate device_id {device_id} in segment {name!r}",
                                line=_line(raw, "device_id"))
        seen_devices.add(device_id)
        device_class = raw.get("class")
        if device_class is not None and device_class not in chains:
            raise ConfigInvalid(f"class {device_class!r} has no service chain",
                                line=_line(raw, "class"))
        hosts.append(HostConfig(addr, device_id, device_class))
    if not hosts:
        raise ConfigInvalid(f"segment {name!r} has no hosts", line=_line(data))

    dv_raw = data.get("default_verdict") or {}
    dv_raw = _mapping(dv_raw, f"{where}.default_verdict", _line(data, "default_verdict"))
    _check_keys(dv_raw, {"inbound", "outbound"}, f"{where}.default_verdict")
    default_verdict = DefaultVerdict(
        _verdict(dv_raw.get("inbound", "drop"), _line(dv_raw, "inbound")),
        _verdict(dv_raw.get("outbound", "allow"), _line(dv_raw, "outbound")),
    )

    manual = []
    for j, raw in enumerate(_list(data, "manual_policies")):
        mw = f"{where}.manual_policies[{j}]"
        raw = _mapping(raw, mw, _line(data, "manual_policies"))
        _check_keys(raw, {"match", "verdict"}, mw)
        manual.append(ManualPolicyConfig(_pattern(raw.get("match"), f"{mw}.match"),
                                         _verdict(raw.get("verdict"), _line(raw, "verdict"))))

    return SegmentConfig(
        name=name,
        network=network,
        hosts=tuple(hosts),
        chains=chains,
        share_data=_bool(data, "share_data", True),
        full_session_routing=_bool(data, "full_session_routing", False),
        default_verdict=default_verdict,
        manual_policies=tuple(manual),
    )


def _load_attack(data: Any, segment_names: set[str], line: int | None) -> AttackConfig:
    data = _mapping(data, "attackers", line)
    _check_keys(data, {"count", "base", "ports_per_target", "probe_rate", "schedule"}, "attackers")
    rate = data.get("probe_rate", 5)
    if isinstance(rate, int) and not isinstance(rate, bool) and rate >= 1:
        probe_rate = (rate, rate)
    elif (isinstance(rate, list) and len(rate) == 2
          and all(isinstance(r, int) and not isinstance(r, bool) for r in rate)
          and 1 <= rate[0] <= rate[1]):
        probe_rate = (rate[0], rate[1])
    else:
        raise ConfigInvalid("probe_rate must be a positive integer or [low, high]",
                            line=_line(data, "probe_rate"))
    waves = []
    for j, raw in enumerate(_list(data, "schedule")):
        ww = f"attackers.schedule[{j}]"
        raw = _mapping(raw, ww, _line(data, "schedule"))
        _check_keys(raw, {"segment", "start"}, ww)
        seg = _str(raw, "segment")
        if seg not in segment_names:
            raise ConfigInvalid(f"schedule names unknown segment {seg!r}", line=_line(raw, "segment"))
        waves.append(AttackWave(seg, _int(raw, "start")))
    return AttackConfig(
        count=_int(data, "count", 0),
        base=_addr(data.get("base", "198.51.100.1"), _line(data, "base")),
        ports_per_target=_int(data, "ports_per_target", 1000, lo=1, hi=0xFFFF),
        probe_rate=probe_rate,
        schedule=tuple(waves),
    )


def _load_benign(data: Any, line: int | None) -> BenignConfig:
    data = _mapping(data, "benign", line)
    _check_keys(data, {"clients", "client_base", "rate", "ports", "outbound_rate",
                       "outbound_ports"}, "benign")
    defaults = BenignConfig()

    def ports(key: str, default: tuple[int, ...]) -> tuple[int, ...]:
        if key not in data:
            return default
        raw = _list(data, key)
        if not raw or not all(isinstance(p, int) and not isinstance(p, bool)
                              and 1 <= p <= 0xFFFF for p in raw):
            raise ConfigInvalid(f"{key} must be a non-empty list of ports", line=_line(data, key))
        return tuple(raw)

    return BenignConfig(
        clients=_int(data, "clients", defaults.clients),
        client_base=_addr(data.get("client_base", "203.0.113.1"), _line(data, "client_base")),
        rate=_float(data, "rate", defaults.rate),
        ports=ports("ports", defaults.ports),
        outbound_rate=_float(data, "outbound_rate", defaults.outbound_rate),
        outbound_ports=ports("outbound_ports", defaults.outbound_ports),
    )


def _load_flow(data: Any, index: int, segments: dict[str, SegmentConfig]) -> ScriptedFlow:
    where = f"scripted_flows[{index}]"
    data = _mapping(data, where)
    _check_keys(data, {"tick", "segment", "inbound", "attack", *FIELDS}, where)
    seg_name = _str(data, "segment")
    seg = segments.get(seg_name)
    if seg is None:
        raise ConfigInvalid(f"unknown segment {seg_name!r}", line=_line(data, "segment"))
    flow = FlowMetadata(
        src_addr=_addr(data.get("src_addr"), _line(data, "src_addr")),
        dst_addr=_addr(data.get("dst_addr"), _line(data, "dst_addr")),
        src_port=_int(data, "src_port", 0, hi=0xFFFF),
        dst_port=_int(data, "dst_port", 0, hi=0xFFFF),
        protocol=_protocol(data.get("protocol", "tcp"), _line(data, "protocol")),
        device_id=_int(data, "device_id", hi=0xFFFF),
    )
    inbound_default = ipaddress.IPv4Address(flow.src_addr) not in seg.network
    return ScriptedFlow(
        tick=_int(data, "tick"),
        segment=seg_name,
        flow=flow,
        inbound=_bool(data, "inbound", inbound_default),
        attack=_bool(data, "attack", False),
    )


def _load_failure(data: Any, index: int, cfg_segments: set[str],
                  middleboxes: dict[str, MiddleboxSpec]) -> FailureSpec:
    where = f"failures[{index}]"
    data = _mapping(data, where)
    _check_keys(data, {"tick", "component"}, where)
    tick = _int(data, "tick")
    component = _str(data, "component")
    kind, _, target = component.partition(":")
    line = _line(data, "component")
    if kind not in FAILURE_KINDS:
        raise ConfigInvalid(f"unknown failure component {component!r}", line=line)
    if kind == "cloud-manager":
        if target:
            raise ConfigInvalid("cloud-manager takes no target", line=line)
        return FailureSpec(tick, kind)
    if not target:
        raise ConfigInvalid(f"{kind} needs a target, e.g. {kind}:<name>", line=line)
    if kind == "middlebox":
        if target not in middleboxes:
            raise ConfigInvalid(f"unknown middlebox {target!r}", line=line)
    elif target not in cfg_segments:
        raise ConfigInvalid(f"unknown segment {target!r}", line=line)
    return FailureSpec(tick, kind, target)


def _load_policies(raw_list: list[Any]) -> tuple[SecurityPolicy, ...]:
    policies = []
    for j, raw in enumerate(raw_list):
        where = f"basic_policies[{j}]"
        raw = _mapping(raw, where)
        _check_keys(raw, {"match", "verdict", "priority"}, where)
        priority = str(raw.get("priority", "normal")).upper()
        if priority not in ("NORMAL", "HIGH"):
            raise ConfigInvalid("basic policy priority must be normal or high",
                                line=_line(raw, "priority"))
        policies.append(SecurityPolicy(
            policy_id=j + 1,
            pattern=_pattern(raw.get("match"), f"{where}.match"),
            verdict=_verdict(raw.get("verdict"), _line(raw, "verdict")),
            priority=Priority[priority],
            issuer=Issuer.CSS,
            issued_at=0,
        ))
    return tuple(policies)


def load_config(data: dict[str, Any]) -> ScenarioConfig:
    """Normalise and validate a scenario dict (from YAML or inline)."""
    if not isinstance(data, Mapping):
        raise ConfigInvalid("scenario must be a mapping", line=_line(data))
    # Support nested under "scenario" key or flat
    if "scenario" in data:
        data = _mapping(data["scenario"], "scenario", _line(data, "scenario"))
    _check_keys(data, {
        "name", "seed", "duration", "link_delay", "report_interval", "snapshot_interval",
        "collaboration", "seal_updates", "detector", "blacklist", "low_activity", "diurnal",
        "basic_policies", "middleboxes", "servers", "segments", "benign", "attackers",
        "scripted_flows", "failures",
    }, "scenario")

    known: dict[str, MiddleboxSpec] = {}
    for i, raw in enumerate(_list(data, "middleboxes")):
        spec = _load_middlebox(raw, i, known)
        known[spec.instance_id] = spec
    services = {spec.service for spec in known.values()}

    segments: dict[str, SegmentConfig] = {}
    raw_segments = _list(data, "segments")
    if not raw_segments:
        raise ConfigInvalid("scenario needs at least one segment", line=_line(data, "segments"))
    for i, raw in enumerate(raw_segments):
        seg = _load_segment(raw, i, services)
        if seg.name in segments:
            raise ConfigInvalid(f"duplicate segment {seg.name!r}", line=_line(raw, "name"))
        segments[seg.name] = seg

    servers_raw = _mapping(data.get("servers") or {}, "servers", _line(data, "servers"))
    _check_keys(servers_raw, {"base", "count"}, "servers")
    server_base = _addr(servers_raw.get("base", "192.0.2.1"), _line(servers_raw, "base"))
    servers = tuple(server_base + i for i in range(_int(servers_raw, "count", 32)))

    detector = _mapping(data.get("detector") or {}, "detector", _line(data, "detector"))
    _check_keys(detector, {"threshold", "window"}, "detector")
    blacklist = _mapping(data.get("blacklist") or {}, "blacklist", _line(data, "blacklist"))
    _check_keys(blacklist, {"repeat_threshold", "repeat_window", "malformed_threshold"}, "blacklist")

    diurnal = _mapping(data.get("diurnal") or {}, "diurnal", _line(data, "diurnal"))
    _check_keys(diurnal, {"period", "trough"}, "diurnal")
    trough = _float(diurnal, "trough", 0.1)
    if trough > 1:
        raise ConfigInvalid("diurnal trough must be within 0..1", line=_line(diurnal, "trough"))

    low_raw = data.get("low_activity")
    derive = low_raw is None
    schedule = LowActivitySchedule()
    if low_raw is not None:
        low = _mapping(low_raw, "low_activity", _line(data, "low_activity"))
        _check_keys(low, {"windows", "period"}, "low_activity")
        windows = []
        for w in _list(low, "windows"):
            if (not isinstance(w, list) or len(w) != 2
                    or not all(isinstance(x, int) and not isinstance(x, bool) for x in w)
                    or not 0 <= w[0] < w[1]):
                raise ConfigInvalid("low_activity windows are [start, end) pairs",
                                    line=_line(low, "windows"))
            windows.append((w[0], w[1]))
        period = _int(low, "period", 0)
        schedule = LowActivitySchedule(tuple(windows), period or None)

    cloud = CloudConfig(
        collaboration=_bool(data, "collaboration", True),
        scan_threshold=_int(detector, "threshold", 10, lo=1),
        scan_window=_int(detector, "window", 50, lo=1),
        repeat_threshold=_int(blacklist, "repeat_threshold", 5, lo=1),
        repeat_window=_int(blacklist, "repeat_window", 50, lo=1),
        malformed_threshold=_int(blacklist, "malformed_threshold", 3, lo=1),
        seal_updates=_bool(data, "seal_updates", False),
        low_activity=schedule,
        basic_policies=_load_policies(_list(data, "basic_policies")),
    )

    attack_line = _line(data, "attackers")
    attack = (_load_attack(data["attackers"], set(segments), attack_line)
              if data.get("attackers") is not None else AttackConfig())
    benign = (_load_benign(data["benign"], _line(data, "benign"))
              if data.get("benign") is not None else BenignConfig(clients=0, outbound_rate=0.0))

    flows = tuple(_load_flow(raw, i, segments) for i, raw in enumerate(_list(data, "scripted_flows")))
    failures = tuple(_load_failure(raw, i, set(segments), known)
                     for i, raw in enumerate(_list(data, "failures")))

    duration = _int(data, "duration", 100, lo=1)
    for i, f in enumerate(failures):
        if f.tick >= duration:
            raise ConfigInvalid(f"failure at tick {f.tick} is past the end of the run",
                                line=_line(_list(data, "failures")[i], "tick"))

    return ScenarioConfig(
        name=_str(data, "name", "scenario"),
        seed=_int(data, "seed", 0, hi=2**64 - 1),
        duration=duration,
        link_delay=_int(data, "link_delay", 1, lo=1),
        report_interval=_int(data, "report_interval", 10, lo=1),
        snapshot_interval=_int(data, "snapshot_interval", 0),
        diurnal_period=_int(diurnal, "period", 0),
        diurnal_trough=trough,
        cloud=cloud,
        derive_low_activity=derive,
        middleboxes=tuple(known.values()),
        servers=servers,
        segments=tuple(segments.values()),
        benign=benign,
        attack=attack,
        scripted_flows=flows,
        failures=failures,
    )


def load_from_yaml(path: str | Path) -> ScenarioConfig:
    """Load and validate a scenario file."""
    with open(path, encoding="utf-8") as f:
        try:
            data = yaml.load(f, Loader=_LineLoader)
        except yaml.MarkedYAMLError as e:
            line = e.problem_mark.line + 1 if e.problem_mark else None
            raise ConfigInvalid(f"YAML syntax error: {e.problem}", line=line) from None
    if data is None:
        raise ConfigInvalid("scenario file is empty")
    return load_config(data)
