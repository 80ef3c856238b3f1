"""Core types."""

from __future__ import annotations
import ipaddress
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Iterable


# Flow fields in canonical order; bit i of a pattern mask is FIELDS[i].
FIELDS: tuple[str, ...] = (
    "src_addr", "dst_addr", "src_port", "dst_port", "protocol", "device_id",
)
FIELD_LIMITS: tuple[int, ...] = (
    0xFFFFFFFF, 0xFFFFFFFF, 0xFFFF, 0xFFFF, 0xFF, 0xFFFF,
)
FULL_MASK = (1 << len(FIELDS)) - 1

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17
PROTOCOL_NAMES = {"icmp": PROTO_ICMP, "tcp": PROTO_TCP, "udp": PROTO_UDP}


def ip_to_int(addr: str | int) -> int:
    """Dotted quad → 32-bit integer (ints pass through after a range check)."""
    return int(ipaddress.IPv4Address(addr))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


class Verdict(IntEnum):
    ALLOW = 1
    DROP = 2


class Priority(IntEnum):
    NORMAL = 1
    HIGH = 2
    MANUAL = 3


class Issuer(IntEnum):
    CSS = 1
    LOCAL_USER = 2


class UpdateTier(IntEnum):
    HIGH = 1
    BUNDLED = 2


class LinkState(Enum):
    CONNECTED = "connected"
    DISCONNECTED = "disconnected"


class EventKind(Enum):
    FLOW_ALLOWED = "flow_allowed"
    FLOW_DROPPED = "flow_dropped"
    CLOUD_REQUESTED = "cloud_requested"
    UPDATE_APPLIED = "update_applied"
    UPDATE_REJECTED = "update_rejected"
    SUSPICIOUS_SOURCE = "suspicious_source"


@dataclass(frozen=True, slots=True)
class FlowMetadata:
    """The 6-tuple a gateway extracts from a new connection attempt."""
    src_addr: int
    dst_addr: int
    src_port: int
    dst_port: int
    protocol: int
    device_id: int

    def __post_init__(self) -> None:
        for name, limit in zip(FIELDS, FIELD_LIMITS):
            value = getattr(self, name)
            if not 0 <= value <= limit:
                raise ValueError(f"{name}={value} out of range 0..{limit}")

    def values(self) -> tuple[int, ...]:
        return (self.src_addr, self.dst_addr, self.src_port,
                self.dst_port, self.protocol, self.device_id)

    def __str__(self) -> str:
        return (f"{int_to_ip(self.src_addr)}:{self.src_port} → "
                f"{int_to_ip(self.dst_addr)}:{self.dst_port} "
                f"proto={self.protocol} dev={self.device_id}")


@dataclass(frozen=True, slots=True)
class MatchPattern:
    """One optional constraint per flow field; None is a wildcard."""
    src_addr: int | None = None
    dst_addr: int | None = None
    src_port: int | None = None
    dst_port: int | None = None
    protocol: int | None = None
    device_id: int | None = None

    @classmethod
    def exact(cls, flow: FlowMetadata) -> "MatchPattern":
        return cls(*flow.values())

    @classmethod
    def from_flow(cls, flow: FlowMetadata, *, wildcard: Iterable[str] = ()) -> "MatchPattern":
        """Pin every field of ``flow`` except the names in ``wildcard``."""
        skip = set(wildcard)
        unknown = skip - set(FIELDS)
        if unknown:
            raise ValueError(f"unknown flow fields: {sorted(unknown)}")
        return cls(*(None if name in skip else value
                     for name, value in zip(FIELDS, flow.values())))

    def values(self) -> tuple[int | None, ...]:
        return (self.src_addr, self.dst_addr, self.src_port,
                self.dst_port, self.protocol, self.device_id)

    @property
    def mask(self) -> int:
        bits = 0
        for i, value in enumerate(self.values()):
            if value is not None:
                bits |= 1 << i
        return bits

    @property
    def specificity(self) -> int:
        return sum(1 for value in self.values() if value is not None)

    def key(self) -> tuple[int, ...]:
        """The concrete values, in field order (index key within one mask)."""
        return tuple(value for value in self.values() if value is not None)

    def with_fields(self, **constraints: int | None) -> "MatchPattern":
        return replace(self, **constraints)


def project(flow: FlowMetadata, mask: int) -> tuple[int, ...]:
    """Flow values selected by ``mask``; equals ``pattern.key()`` on a match."""
    return tuple(value for i, value in enumerate(flow.values()) if mask >> i & 1)


def matches(pattern: MatchPattern, flow: FlowMetadata) -> bool:
    """True iff every non-wildcard constraint equals the flow's field."""
    for want, got in zip(pattern.values(), flow.values()):
        if want is not None and want != got:
            return False
    return True


@dataclass(frozen=True, slots=True)
class SecurityPolicy:
    """A pattern with a verdict, a priority and its provenance."""
    policy_id: int
    pattern: MatchPattern
    verdict: Verdict
    priority: Priority
    issuer: Issuer
    issued_at: int

    def __post_init__(self) -> None:
        manual = self.priority is Priority.MANUAL
        local = self.issuer is Issuer.LOCAL_USER
        if manual != local:
            raise ValueError("priority MANUAL is reserved for LOCAL_USER policies")

    @property
    def identity(self) -> tuple[int, int]:
        return (int(self.issuer), self.policy_id)

    def rank(self) -> tuple[int, int, int, int]:
        """Conflict-resolution key: larger wins."""
        return (int(self.priority), self.pattern.specificity, self.issued_at, self.policy_id)


@dataclass(frozen=True, slots=True)
class LookupResult:
    """Hit when ``policy`` is set, Miss otherwise."""
    policy: SecurityPolicy | None = None

    @property
    def hit(self) -> bool:
        return self.policy is not None


MISS = LookupResult()

# AnalysisRequest.flags
FLAG_INBOUND = 0x01


@dataclass(frozen=True, slots=True)
class AnalysisRequest:
    box_id: int
    request_id: int
    metadata: FlowMetadata
    flags: int = 0
    reserved: int = 0      # 24 bits, carried verbatim

    @property
    def inbound(self) -> bool:
        return bool(self.flags & FLAG_INBOUND)


@dataclass(frozen=True, slots=True)
class AnalysisResponse:
    request_id: int
    policy: SecurityPolicy
    signature: bytes = b""


@dataclass(frozen=True, slots=True)
class PolicyUpdate:
    """A sequence-numbered delta batch from the CSS to one box."""
    box_id: int
    seq: int
    tier: UpdateTier
    policies: tuple[SecurityPolicy, ...]
    signature: bytes = b""


@dataclass(frozen=True, slots=True)
class UpdateResult:
    applied: int
    skipped: int


@dataclass(frozen=True, slots=True)
class DefaultVerdict:
    """Implicit decision for flows with no matching policy while offline."""
    inbound: Verdict = Verdict.DROP
    outbound: Verdict = Verdict.ALLOW

    def for_direction(self, inbound: bool) -> Verdict:
        return self.inbound if inbound else self.outbound


@dataclass(frozen=True, slots=True)
class GatewayEvent:
    tick: int
    kind: EventKind
    metadata: FlowMetadata | None = None
    source: str | None = None      # SUSPICIOUS_SOURCE: who sent the bad artifact
    detail: str = ""


@dataclass(frozen=True, slots=True)
class SensorReport:
    """Per-window activity summary a gateway shares with the CSS."""
    box_id: int
    tick_start: int
    tick_end: int
    flows: dict[int, int] = field(default_factory=dict)          # device → flows
    drops: dict[int, int] = field(default_factory=dict)          # device → dropped
    remotes: dict[int, int] = field(default_factory=dict)        # device → distinct remotes
    suspicious: tuple[GatewayEvent, ...] = ()
    # inbound contacts seen locally: (src_addr, dst_addr, dst_port, tick)
    contacts: tuple[tuple[int, int, int, int], ...] = ()


@dataclass(frozen=True, slots=True)
class UserProfile:
    """Per-subscriber traffic classes and the middlebox chain for each class."""
    box_id: int
    local_network: ipaddress.IPv4Network
    class_map: dict[int, str]                 # device_id → traffic class
    chains: dict[str, tuple[str, ...]]        # traffic class → instance ids
    share_data: bool = True
    full_session_routing: bool = False
    default_class: str = "default"

    def __post_init__(self) -> None:
        classes = set(self.class_map.values()) | {self.default_class}
        for name in sorted(classes):
            if not self.chains.get(name):
                raise ValueError(f"traffic class {name!r} has no service chain")

    def class_of(self, device_id: int) -> str:
        return self.class_map.get(device_id, self.default_class)

    def is_local(self, addr: int) -> bool:
        return ipaddress.IPv4Address(addr) in self.local_network
