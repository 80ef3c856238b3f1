"""Cloud Security Service — request handling, policy store, analytics and dissemination.

Request path (per analysis request):

    1. blacklist check, repeat-request accounting
    2. inbound flows feed the port-scan tracker
    3. store hit → return the stored policy
       store miss → evaluate the profile's service chain and mint a policy
    4. sign the response and mark the policy as sent to the box

End of every tick: port-scan detection turns scanners into High-priority
Drop{src_addr} policies, High-tier deltas go out at once, Bundled deltas
only inside low-activity windows.

A box that rebooted or was cut off sends a resync naming the last update
seq it holds in full.  Policies sent to it after that point are resent in
one update under a fresh seq.

Every public mutator is committed to the replication log first; an attached
backup applies the same record synchronously.
"""

from __future__ import annotations
import ipaddress
import json
import logging
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Sequence

from .chain import MiddleboxManager, ServiceChain
from .detector import PortScanDetector
from .errors import (
    BadSignature, BlacklistedBox, MalformedFrame, ReplicationGap, SecureboxError,
    UnknownBox, WrongLength,
)
from .policy_db import PolicyDb
from .replication import RecordKind, ReplicationRecord, decode_record, encode_record
from .trust import (
    Certificate, CertificateAuthority, KeyPair, LinkKey, seal, verify_certificate,
)
from .types import (
    AnalysisRequest, AnalysisResponse, FlowMetadata, Issuer, MatchPattern, PolicyUpdate,
    Priority, SecurityPolicy, SensorReport, UpdateTier, UserProfile, Verdict,
)
from .wire import (
    MessageType, decode_frame, decode_request, decode_resync, decode_rogue_report,
    decode_sensor_report, encode_frame, encode_request, encode_response, encode_sensor_report,
    encode_update,
)

logger = logging.getLogger(__name__)

# Recent requests kept for inspection; requests_handled counts them all.
REQUEST_LOG_SIZE = 4096


class Role(Enum):
    PRIMARY = "primary"
    BACKUP = "backup"
    FAILED = "failed"


@dataclass(frozen=True, slots=True)
class LowActivitySchedule:
    """Tick ranges [start, end) in which bundled updates may go out.

    With ``period`` set the ranges repeat, and ticks are taken modulo it.
    """
    windows: tuple[tuple[int, int], ...] = ()
    period: int | None = None

    def contains(self, tick: int) -> bool:
        t = tick % self.period if self.period else tick
        return any(start <= t < end for start, end in self.windows)

    @classmethod
    def from_activity(
        cls, levels: Sequence[float], *, fraction: float = 0.2, periodic: bool = True,
    ) -> "LowActivitySchedule":
        """Windows where the activity level is below ``fraction`` of its peak."""
        if not levels:
            return cls()
        cutoff = fraction * max(levels)
        windows: list[tuple[int, int]] = []
        start: int | None = None
        for i, level in enumerate(levels):
            if level < cutoff and start is None:
                start = i
            elif level >= cutoff and start is not None:
                windows.append((start, i))
                start = None
        if start is not None:
            windows.append((start, len(levels)))
        return cls(tuple(windows), len(levels) if periodic else None)


@dataclass(frozen=True, slots=True)
class CloudConfig:
    collaboration: bool = True
    scan_threshold: int = 10
    scan_window: int = 50
    repeat_threshold: int = 5
    repeat_window: int = 50
    malformed_threshold: int = 3
    seal_updates: bool = False
    low_activity: LowActivitySchedule = field(default_factory=LowActivitySchedule)
    basic_policies: tuple[SecurityPolicy, ...] = ()


@dataclass(frozen=True, slots=True)
class Emission:
    tick: int
    box_id: int
    seq: int
    tier: UpdateTier
    policy_ids: tuple[int, ...]
    size: int


@dataclass(frozen=True, slots=True)
class BlacklistEvent:
    box_id: int
    tick: int
    reason: str


def tier_of(policy: SecurityPolicy) -> UpdateTier:
    return UpdateTier.HIGH if policy.priority is Priority.HIGH else UpdateTier.BUNDLED


# ------------------------------------------------------------------
# Profile ⇄ JSON (replication payloads)
# ------------------------------------------------------------------

def profile_to_dict(profile: UserProfile) -> dict[str, Any]:
    return {
        "box_id": profile.box_id,
        "local_network": str(profile.local_network),
        "class_map": {str(k): v for k, v in sorted(profile.class_map.items())},
        "chains": {k: list(v) for k, v in sorted(profile.chains.items())},
        "share_data": profile.share_data,
        "full_session_routing": profile.full_session_routing,
        "default_class": profile.default_class,
    }


def profile_from_dict(d: dict[str, Any]) -> UserProfile:
    return UserProfile(
        box_id=d["box_id"],
        local_network=ipaddress.IPv4Network(d["local_network"]),
        class_map={int(k): v for k, v in d["class_map"].items()},
        chains={k: tuple(v) for k, v in d["chains"].items()},
        share_data=d["share_data"],
        full_session_routing=d["full_session_routing"],
        default_class=d["default_class"],
    )


class CloudService:
    """One Cloud Manager (primary or backup)."""

    def __init__(
        self,
        config: CloudConfig | None = None,
        *,
        ca: CertificateAuthority,
        keypair: KeyPair,
        cert: Certificate,
        manager: MiddleboxManager | None = None,
        role: Role = Role.PRIMARY,
    ) -> None:
        self.config = config or CloudConfig()
        self.ca = ca
        self.keypair = keypair
        self.cert = cert
        self.manager = manager or MiddleboxManager()
        self.role = role

        self.profiles: dict[int, UserProfile] = {}
        self.certs: dict[int, Certificate] = {}
        self.link_keys: dict[int, LinkKey] = {}
        self.chains: dict[int, dict[str, ServiceChain]] = {}

        self.store: dict[int, SecurityPolicy] = {}
        self.scope: dict[int, int | None] = {}          # policy_id → owning box, None = global
        self._global = PolicyDb()
        self._scoped: dict[int, PolicyDb] = {}
        self.sent: dict[int, set[int]] = {}
        self._pending: dict[int, dict[UpdateTier, set[int]]] = {}
        self.update_seq: dict[int, int] = {}
        self._class_rules: set[tuple[int, int]] = set()

        self.request_log: deque[tuple[int, AnalysisRequest, int]] = deque(maxlen=REQUEST_LOG_SIZE)
        self.requests_handled = 0
        self._responded: dict[int, dict[int, int]] = {}     # box → policy_id → tick
        self.blacklist: set[int] = set()
        self.blacklist_events: list[BlacklistEvent] = []
        self._repeats: dict[int, dict[FlowMetadata, deque[int]]] = {}
        self._malformed: dict[int, int] = {}
        self.detector = PortScanDetector(self.config.scan_threshold, self.config.scan_window)
        self.detections: list[tuple[int, int, int | None]] = []   # (tick, addr, scope)

        self.rogue_reports: list[dict[str, Any]] = []
        self.source_contacts: dict[int, int] = {}
        self.reports_merged = 0
        self.reports_excluded = 0
        self.device_flows: dict[tuple[int, int], int] = {}
        self.device_drops: dict[tuple[int, int], int] = {}

        self.emission_log: list[Emission] = []
        self.resync_log: list[Emission] = []
        self._outbox: list[tuple[int, bytes]] = []
        self._next_policy_id = 1
        self.last_tick = 0

        self.log: list[bytes] = []
        self.applied_seq = 0
        self._handed_off = 0
        self._gap = False
        self._backup: CloudService | None = None
        self._replaying = False
        self._depth = 0

        for policy in self.config.basic_policies:
            self._store_policy(policy, None)
            self._next_policy_id = max(self._next_policy_id, policy.policy_id + 1)
        ca.on_revoke(self._on_revoke)

    # ------------------------------------------------------------------
    # Replication
    # ------------------------------------------------------------------

    def attach_backup(self, backup: "CloudService") -> None:
        """Bring ``backup`` up to date and mirror every later record to it.

        Raises ReplicationGap when part of the history was already handed
        to an earlier backup and is no longer held here.
        """
        if self._handed_off:
            raise ReplicationGap(
                f"records up to seq {self._handed_off} live only on an earlier backup")
        backup.role = Role.BACKUP
        self._backup = backup
        for data in self.log:
            backup.receive_record(data)
        self._handed_off = self.applied_seq
        self.log.clear()

    @contextmanager
    def _mutation(self, kind: RecordKind, payload: Callable[[], dict[str, Any]]) -> Iterator[None]:
        if self._depth == 0 and not self._replaying:
            if self.role is not Role.PRIMARY:
                raise SecureboxError(f"cloud manager is {self.role.value}, not primary")
            self.applied_seq += 1
            data = encode_record(ReplicationRecord(self.applied_seq, kind, payload()))
            if self._backup is not None and self._backup.role is Role.BACKUP:
                self._backup.receive_record(data)
                self._handed_off = self.applied_seq
            else:
                self.log.append(data)
        self._depth += 1
        try:
            yield
        finally:
            self._depth -= 1

    def receive_record(self, data: bytes) -> None:
        """Apply one replication record from the primary."""
        record = decode_record(data)
        if record.seq != self.applied_seq + 1:
            logger.warning("replication gap: expected seq %d, got %d",
                           self.applied_seq + 1, record.seq)
            self._gap = True
        self.applied_seq = record.seq
        self.log.append(data)
        self._replaying = True
        try:
            self._replay(record)
        except SecureboxError as e:
            logger.debug("replayed record %d raised %s", record.seq, e)
        finally:
            self._replaying = False
            self._outbox.clear()

    def _replay(self, record: ReplicationRecord) -> None:
        p = record.payload
        kind = record.kind
        if kind is RecordKind.REGISTER:
            self.register_box(
                p["box_id"], Certificate.decode(bytes.fromhex(p["cert"])),
                profile_from_dict(p["profile"]),
                link_key=LinkKey(bytes.fromhex(p["link_key"])) if p["link_key"] else None,
                now=p["now"])
        elif kind is RecordKind.FRAME:
            self.receive_frame(p["box_id"], bytes.fromhex(p["data"]), now=p["now"])
        elif kind is RecordKind.REQUEST:
            self.handle_request(decode_request(bytes.fromhex(p["request"])), now=p["now"])
        elif kind is RecordKind.REPORT:
            self.aggregate_sensor_reports(
                [decode_sensor_report(bytes.fromhex(r)) for r in p["reports"]])
        elif kind is RecordKind.TICK:
            self.on_tick(p["now"])
        elif kind is RecordKind.DETECT:
            self.detect_port_scan(p["now"])
        elif kind is RecordKind.UPDATE:
            self.generate_update(p["box_id"], UpdateTier(p["tier"]), now=p["now"])
        elif kind is RecordKind.DISSEMINATE:
            self.disseminate(p["now"])
        elif kind is RecordKind.BLACKLIST:
            self.blacklist_box(p["box_id"], now=p["now"], reason=p["reason"])
        elif kind is RecordKind.REQUEST_SEEN:
            self.record_and_blacklist(p["box_id"], decode_request(bytes.fromhex(p["request"])),
                                      now=p["now"])
        elif kind is RecordKind.MIDDLEBOX_FAIL:
            self.fail_middlebox(p["instance_id"])
        elif kind is RecordKind.RESYNC:
            self.resync_box(p["box_id"], p["watermark"], since=p["since"], now=p["now"])

    def promote(self) -> None:
        if self._gap:
            raise ReplicationGap(f"backup log has holes (last seq {self.applied_seq})")
        self.role = Role.PRIMARY
        logger.info("backup cloud manager promoted at seq %d", self.applied_seq)

    def fail(self) -> None:
        self.role = Role.FAILED
        logger.info("cloud manager failed at seq %d", self.applied_seq)

    def replicated_state(self) -> dict[str, Any]:
        """Everything failover must preserve, in comparable form."""
        return {
            "store": {pid: (p, self.scope[pid]) for pid, p in sorted(self.store.items())},
            "sent": {b: sorted(s) for b, s in sorted(self.sent.items())},
            "pending": {b: {t.name: sorted(s) for t, s in sorted(tiers.items())}
                        for b, tiers in sorted(self._pending.items())},
            "blacklist": sorted(self.blacklist),
            "update_seq": dict(sorted(self.update_seq.items())),
            "detected": list(self.detections),
            "next_policy_id": self._next_policy_id,
            "middlebox_state": {mb.instance_id: (mb.failed, mb.load, mb.state)
                                for mb in self.manager.instances()},
        }

    # ------------------------------------------------------------------
    # Registration and identity
    # ------------------------------------------------------------------

    def register_box(
        self,
        box_id: int,
        cert: Certificate,
        profile: UserProfile,
        *,
        link_key: LinkKey | None = None,
        now: int = 0,
    ) -> list[PolicyUpdate]:
        """Admit a box and send its bootstrap updates (the basic policy set)."""
        payload = lambda: {
            "box_id": box_id, "cert": cert.encode().hex(), "profile": profile_to_dict(profile),
            "link_key": link_key.key.hex() if link_key else "", "now": now,
        }
        with self._mutation(RecordKind.REGISTER, payload):
            if box_id in self.profiles:
                raise ValueError(f"box {box_id} already registered")
            if cert.subject_id != box_id or not verify_certificate(self.ca.root_public_key, cert):
                raise BadSignature(f"certificate for box {box_id} is not from this CA")
            if profile.box_id != box_id:
                raise ValueError(f"profile belongs to box {profile.box_id}, not {box_id}")
            self.profiles[box_id] = profile
            self.certs[box_id] = cert
            if link_key is not None:
                self.link_keys[box_id] = link_key
            self.chains[box_id] = {cls: self.manager.resolve_chain(services)
                                   for cls, services in sorted(profile.chains.items())}
            self.sent[box_id] = set()
            self._responded[box_id] = {}
            self.update_seq[box_id] = 0
            self._pending[box_id] = {UpdateTier.HIGH: set(), UpdateTier.BUNDLED: set()}
            for pid in sorted(self.store):
                if self.scope[pid] in (None, box_id):
                    self._pending[box_id][tier_of(self.store[pid])].add(pid)
            logger.info("registered box %d (%d classes)", box_id, len(profile.chains))
            updates = [self._emit_update(box_id, tier, now) for tier in UpdateTier]
            return [u for u in updates if u is not None]

    def _on_revoke(self, subject_id: int) -> None:
        if self.role is Role.PRIMARY and subject_id in self.profiles:
            self.blacklist_box(subject_id, now=self.last_tick, reason="certificate revoked")

    # ------------------------------------------------------------------
    # Ingress
    # ------------------------------------------------------------------

    def receive_frame(self, box_id: int, data: bytes, *, now: int) -> None:
        """Handle one frame arriving on ``box_id``'s link.

        Responses are queued on the outbox; rejected frames are logged and
        counted towards the malformed threshold.
        """
        with self._mutation(RecordKind.FRAME,
                            lambda: {"box_id": box_id, "data": data.hex(), "now": now}):
            self.last_tick = max(self.last_tick, now)
            if box_id not in self.profiles:
                logger.warning("frame from unknown box %d dropped", box_id)
                raise UnknownBox(f"box {box_id} is not registered")
            if box_id in self.blacklist:
                logger.debug("frame from blacklisted box %d dropped", box_id)
                raise BlacklistedBox(f"box {box_id} is blacklisted")
            try:
                frame = decode_frame(data)
                if not self.ca.verify(self.certs[box_id], frame.signed_bytes, frame.signature):
                    raise BadSignature(f"frame from box {box_id} failed verification")
                if frame.msg_type is MessageType.REQUEST:
                    req = decode_request(frame.payload)
                    if req.box_id != box_id:
                        raise MalformedFrame(f"request claims box {req.box_id} on box {box_id}'s link")
                    self.handle_request(req, now=now)
                elif frame.msg_type is MessageType.SENSOR_REPORT:
                    report = decode_sensor_report(frame.payload)
                    if report.box_id != box_id:
                        raise MalformedFrame(f"report claims box {report.box_id}")
                    self.aggregate_sensor_reports([report])
                elif frame.msg_type is MessageType.RESYNC:
                    claimed, watermark, since = decode_resync(frame.payload)
                    if claimed != box_id:
                        raise MalformedFrame(f"resync claims box {claimed} on box {box_id}'s link")
                    self.resync_box(box_id, watermark, since=since, now=now)
                elif frame.msg_type is MessageType.ROGUE_REPORT:
                    self.rogue_reports.append({"box_id": box_id, "received": now,
                                               **decode_rogue_report(frame.payload)})
                    logger.warning("box %d reports rogue source %s",
                                   box_id, self.rogue_reports[-1]["source"])
                else:
                    raise MalformedFrame(f"unexpected {frame.msg_type.name} from box {box_id}")
            except (MalformedFrame, WrongLength, BadSignature) as e:
                logger.warning("rejected frame from box %d: %s", box_id, e)
                self._record_malformed(box_id, now)

    def _record_malformed(self, box_id: int, now: int) -> None:
        count = self._malformed.get(box_id, 0) + 1
        self._malformed[box_id] = count
        if count >= self.config.malformed_threshold:
            self.blacklist_box(box_id, now=now, reason=f"{count} malformed or unsigned frames")

    # ------------------------------------------------------------------
    # Request processing
    # ------------------------------------------------------------------

    def handle_request(self, req: AnalysisRequest, *, now: int) -> AnalysisResponse | None:
        """Answer one verified request; None when the box is (or becomes) blacklisted."""
        with self._mutation(RecordKind.REQUEST,
                            lambda: {"request": encode_request(req).hex(), "now": now}):
            box_id = req.box_id
            profile = self.profiles.get(box_id)
            if profile is None:
                raise UnknownBox(f"box {box_id} is not registered")
            if box_id in self.blacklist:
                raise BlacklistedBox(f"box {box_id} is blacklisted")
            self.request_log.append((box_id, req, now))
            self.requests_handled += 1
            if self.record_and_blacklist(box_id, req, now=now) is not None:
                return None

            flow = req.metadata
            if profile.share_data and not profile.is_local(flow.src_addr):
                self.detector.observe(self._scan_key(box_id, flow.src_addr),
                                      flow.dst_addr, flow.dst_port, now)

            hit = self._lookup(box_id, flow)
            policy = hit if hit is not None else self._analyze(box_id, profile, flow, now)

            if policy.policy_id in self.store and self.store[policy.policy_id] == policy:
                self.sent[box_id].add(policy.policy_id)
                self._responded[box_id][policy.policy_id] = now
                for pending in self._pending[box_id].values():
                    pending.discard(policy.policy_id)
            resp = AnalysisResponse(req.request_id, policy)
            frame = encode_frame(MessageType.RESPONSE, encode_response(resp), self.keypair.sign)
            self._outbox.append((box_id, frame))
            return AnalysisResponse(req.request_id, policy, frame[-64:])

    def _analyze(
        self, box_id: int, profile: UserProfile, flow: FlowMetadata, now: int,
    ) -> SecurityPolicy:
        device_class = profile.class_of(flow.device_id)
        chain = self.chains[box_id][device_class]
        result = self.manager.eval_chain(chain, flow, device_class=device_class, now=now,
                                         full_session=profile.full_session_routing)
        rule = result.rule
        scope = None if self.config.collaboration else box_id
        if rule is not None and rule.device_class is not None:
            # A class decision holds for this device and server on any port the rule covers.
            pattern = rule.pattern.with_fields(dst_addr=flow.dst_addr, device_id=flow.device_id)
            scope = box_id
        else:
            pattern = MatchPattern.from_flow(flow, wildcard=("src_port",))
        policy = self._mint(pattern, result.verdict, Priority.NORMAL, now)
        if profile.share_data:
            self._store_policy(policy, scope)
            if (result.verdict is Verdict.DROP and rule is not None
                    and rule.device_class is not None and rule.pattern.specificity == 0):
                fw = self.manager.resolve(result.deciding_instance).config
                self._store_class_rule(box_id, flow.device_id, sorted(fw.allowlist), now)
        logger.debug("box %d %s → %s by %s", box_id, flow, result.verdict.name,
                     result.deciding_instance)
        return policy

    def _store_class_rule(self, box_id: int, device_id: int, servers: list[int], now: int) -> None:
        """Drop{device} plus Allow{device, dst=s} per known-safe server s.

        Device ids are local to a gateway, so these stay scoped to the box.
        """
        if (box_id, device_id) in self._class_rules:
            return
        self._class_rules.add((box_id, device_id))
        self._store_policy(self._mint(MatchPattern(device_id=device_id), Verdict.DROP,
                                      Priority.NORMAL, now), box_id)
        for server in servers:
            self._store_policy(self._mint(MatchPattern(dst_addr=server, device_id=device_id),
                                          Verdict.ALLOW, Priority.NORMAL, now), box_id)

    def record_and_blacklist(
        self, box_id: int, req: AnalysisRequest, *, now: int,
    ) -> BlacklistEvent | None:
        """Count identical requests; more than R within W ticks blacklists the box."""
        with self._mutation(RecordKind.REQUEST_SEEN,
                            lambda: {"box_id": box_id, "request": encode_request(req).hex(),
                                     "now": now}):
            if box_id in self.blacklist:
                return None
            per_box = self._repeats.setdefault(box_id, {})
            window = per_box.setdefault(req.metadata, deque())
            window.append(now)
            while window and window[0] <= now - self.config.repeat_window:
                window.popleft()
            if len(window) > self.config.repeat_threshold:
                return self.blacklist_box(
                    box_id, now=now, reason=f"{len(window)} identical requests for {req.metadata}")
            return None

    def blacklist_box(self, box_id: int, *, now: int, reason: str) -> BlacklistEvent | None:
        with self._mutation(RecordKind.BLACKLIST,
                            lambda: {"box_id": box_id, "now": now, "reason": reason}):
            if box_id in self.blacklist:
                return None
            self.blacklist.add(box_id)
            if box_id in self._pending:
                for pending in self._pending[box_id].values():
                    pending.clear()
            self._outbox = [(b, f) for b, f in self._outbox if b != box_id]
            event = BlacklistEvent(box_id, now, reason)
            self.blacklist_events.append(event)
            logger.warning("box %d blacklisted: %s", box_id, reason)
            return event

    # ------------------------------------------------------------------
    # Policy store
    # ------------------------------------------------------------------

    def _mint(self, pattern: MatchPattern, verdict: Verdict, priority: Priority,
              now: int) -> SecurityPolicy:
        policy = SecurityPolicy(self._next_policy_id, pattern, verdict, priority, Issuer.CSS, now)
        self._next_policy_id += 1
        return policy

    def _store_policy(self, policy: SecurityPolicy, scope: int | None) -> None:
        self.store[policy.policy_id] = policy
        self.scope[policy.policy_id] = scope
        if scope is None:
            self._global.insert(policy)
        else:
            self._scoped.setdefault(scope, PolicyDb()).insert(policy)
        tier = tier_of(policy)
        for box_id in sorted(self.profiles):
            if scope not in (None, box_id) or box_id in self.blacklist:
                continue
            if policy.policy_id not in self.sent[box_id]:
                self._pending[box_id][tier].add(policy.policy_id)

    def _lookup(self, box_id: int, flow: FlowMetadata) -> SecurityPolicy | None:
        best = self._global.lookup(flow).policy
        scoped = self._scoped.get(box_id)
        if scoped is not None:
            other = scoped.lookup(flow).policy
            if other is not None and (best is None or other.rank() > best.rank()):
                best = other
        return best

    def visible_policies(self, box_id: int) -> list[SecurityPolicy]:
        return [p for pid, p in sorted(self.store.items()) if self.scope[pid] in (None, box_id)]

    def _scan_key(self, box_id: int, src_addr: int) -> int | tuple[int, int]:
        return src_addr if self.config.collaboration else (box_id, src_addr)

    # ------------------------------------------------------------------
    # Analytics
    # ------------------------------------------------------------------

    def detect_port_scan(self, now: int) -> list[int]:
        """Attacker addresses detected at ``now``, each turned into a High Drop policy."""
        with self._mutation(RecordKind.DETECT, lambda: {"now": now}):
            found: set[int] = set()
            for key in self.detector.detect(now):
                if isinstance(key, tuple):
                    scope, addr = key
                else:
                    scope, addr = None, key
                policy = self._mint(MatchPattern(src_addr=addr), Verdict.DROP, Priority.HIGH, now)
                self._store_policy(policy, scope)
                self.detections.append((now, addr, scope))
                found.add(addr)
            return sorted(found)

    def aggregate_sensor_reports(self, reports: Iterable[SensorReport]) -> dict[str, Any]:
        reports = list(reports)
        with self._mutation(RecordKind.REPORT, lambda: {
                "reports": [encode_sensor_report(r).hex() for r in reports]}):
            for report in reports:
                profile = self.profiles.get(report.box_id)
                if profile is None or not profile.share_data:
                    self.reports_excluded += 1
                    continue
                self.reports_merged += 1
                for device, n in sorted(report.flows.items()):
                    key = (report.box_id, device)
                    self.device_flows[key] = self.device_flows.get(key, 0) + n
                for device, n in sorted(report.drops.items()):
                    key = (report.box_id, device)
                    self.device_drops[key] = self.device_drops.get(key, 0) + n
                for src, dst, dport, tick in report.contacts:
                    self.source_contacts[src] = self.source_contacts.get(src, 0) + 1
                    self.detector.observe(self._scan_key(report.box_id, src), dst, dport, tick)
            return self.analytics_summary()[0]

    def analytics_summary(self) -> list[dict[str, Any]]:
        """JSON-lines records: one summary followed by detections, blacklistings and rogue reports."""
        records: list[dict[str, Any]] = [{
            "record": "summary",
            "boxes": len(self.profiles),
            "policies": len(self.store),
            "requests": self.requests_handled,
            "detections": len(self.detections),
            "blacklisted": sorted(self.blacklist),
            "reports_merged": self.reports_merged,
            "reports_excluded": self.reports_excluded,
            "updates_emitted": len(self.emission_log),
            "update_bytes": sum(e.size for e in self.emission_log),
            "top_sources": [[ipaddress.IPv4Address(s).compressed, n] for s, n in sorted(
                self.source_contacts.items(), key=lambda kv: (-kv[1], kv[0]))[:10]],
        }]
        for tick, addr, scope in self.detections:
            records.append({"record": "detection", "tick": tick,
                            "source": ipaddress.IPv4Address(addr).compressed, "scope": scope})
        for ev in self.blacklist_events:
            records.append({"record": "blacklist", "tick": ev.tick, "box_id": ev.box_id,
                            "reason": ev.reason})
        for report in self.rogue_reports:
            records.append({"record": "rogue", **report})
        return records

    def export_analytics(self, path: str | Path) -> None:
        lines = [json.dumps(r, sort_keys=True) for r in self.analytics_summary()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    # ------------------------------------------------------------------
    # Dissemination
    # ------------------------------------------------------------------

    def generate_update(self, box_id: int, tier: UpdateTier, *, now: int) -> PolicyUpdate | None:
        """Delta of unsent policies of ``tier`` for one box; None when empty."""
        with self._mutation(RecordKind.UPDATE,
                            lambda: {"box_id": box_id, "tier": int(tier), "now": now}):
            if box_id not in self.profiles:
                raise UnknownBox(f"box {box_id} is not registered")
            if box_id in self.blacklist:
                return None
            return self._emit_update(box_id, tier, now)

    def _emit_update(self, box_id: int, tier: UpdateTier, now: int) -> PolicyUpdate | None:
        pending = self._pending[box_id][tier]
        if not pending:
            return None
        ids = sorted(pending)
        pending.clear()
        update, frame = self._send_update(box_id, tier, ids)
        self.sent[box_id].update(ids)
        self.emission_log.append(Emission(now, box_id, update.seq, tier, tuple(ids), len(frame)))
        logger.debug("update %d to box %d: %d %s policies", update.seq, box_id, len(ids), tier.name)
        return update

    def _send_update(
        self, box_id: int, tier: UpdateTier, ids: list[int],
    ) -> tuple[PolicyUpdate, bytes]:
        seq = self.update_seq[box_id] + 1
        self.update_seq[box_id] = seq
        update = PolicyUpdate(box_id, seq, tier, tuple(self.store[i] for i in ids))
        sealer = None
        link = self.link_keys.get(box_id)
        if self.config.seal_updates and link is not None:
            sealer = lambda body, header: seal(link, box_id, seq, body, header)
        frame = encode_frame(MessageType.UPDATE, encode_update(update, sealer=sealer),
                             self.keypair.sign)
        self._outbox.append((box_id, frame))
        return PolicyUpdate(box_id, seq, tier, update.policies, frame[-64:]), frame

    def resync_box(
        self, box_id: int, watermark: int, *, since: int, now: int,
    ) -> PolicyUpdate | None:
        """Resend what a rebooted or reconnected box may be missing.

        The box holds every update up to seq ``watermark`` and every
        response sent before tick ``since``.  Anything else already marked
        sent goes out again as one High-tier update under a fresh seq;
        policies still pending keep waiting for their tier.  Resent updates
        are logged in ``resync_log``, not ``emission_log``.
        """
        with self._mutation(RecordKind.RESYNC, lambda: {
                "box_id": box_id, "watermark": watermark, "since": since, "now": now}):
            if box_id not in self.profiles:
                raise UnknownBox(f"box {box_id} is not registered")
            if box_id in self.blacklist:
                return None
            held: set[int] = set()
            for e in (*self.emission_log, *self.resync_log):
                if e.box_id == box_id and e.seq <= watermark:
                    held.update(e.policy_ids)
            held.update(pid for pid, tick in self._responded[box_id].items() if tick < since)
            missing = sorted(pid for pid in self.sent[box_id]
                             if pid not in held and self.scope[pid] in (None, box_id))
            logger.info("box %d resync at tick %d: watermark %d, %d policies to resend",
                        box_id, now, watermark, len(missing))
            if not missing:
                return None
            update, frame = self._send_update(box_id, UpdateTier.HIGH, missing)
            self.resync_log.append(
                Emission(now, box_id, update.seq, UpdateTier.HIGH, tuple(missing), len(frame)))
            return update

    def disseminate(self, now: int) -> list[tuple[int, PolicyUpdate]]:
        with self._mutation(RecordKind.DISSEMINATE, lambda: {"now": now}):
            bundled = self.config.low_activity.contains(now)
            out = []
            for box_id in sorted(self.profiles):
                if box_id in self.blacklist:
                    continue
                tiers = (UpdateTier.HIGH, UpdateTier.BUNDLED) if bundled else (UpdateTier.HIGH,)
                for tier in tiers:
                    update = self._emit_update(box_id, tier, now)
                    if update is not None:
                        out.append((box_id, update))
            return out

    def on_tick(self, now: int) -> list[tuple[int, PolicyUpdate]]:
        """End-of-tick housekeeping: detection, then dissemination."""
        with self._mutation(RecordKind.TICK, lambda: {"now": now}):
            self.last_tick = now
            detected = self.detect_port_scan(now)
            if detected:
                logger.info("tick %d: %d scanner(s) detected", now, len(detected))
            return self.disseminate(now)

    def fail_middlebox(self, instance_id: str) -> str:
        with self._mutation(RecordKind.MIDDLEBOX_FAIL, lambda: {"instance_id": instance_id}):
            return self.manager.fail_and_swap(instance_id)

    # ------------------------------------------------------------------
    # Egress
    # ------------------------------------------------------------------

    def drain_outbox(self) -> list[tuple[int, bytes]]:
        frames, self._outbox = self._outbox, []
        return frames
