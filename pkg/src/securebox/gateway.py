"""Securebox — the edge gateway.

Flow processing:

    hit in Pol-DB      → the policy's verdict, logged
    miss, connected    → signed AnalysisRequest queued to the CSS, flow parked
    miss, disconnected → the implicit default verdict (not cached)

Parked flows are released by a verified response, by timeout, or by the
link going down.  Every frame the gateway emits is addressed to the CSS;
there is no path to another gateway.  After a reboot or when the link comes
back, the gateway sends a resync so the CSS can resend what it lost.

Usage:
    box = Securebox(1, keypair=kp, cert=cert, anchor=anchor)
    outcome = box.process_flow(flow, now=t, inbound=True)
    if isinstance(outcome, CloudPending):
        link.send(box.drain_outbox())
    ...
    release = box.receive(frame, now=t + 2)
"""

from __future__ import annotations
import bisect
import hashlib
import ipaddress
import logging
from dataclasses import dataclass

from .errors import BadSignature, MalformedFrame, UnknownRequestId
from .policy_db import PolicyDb
from .snapshot import restore, snapshot
from .snapshot_sqlite import SqliteSnapshotStore
from .trust import Certificate, KeyPair, LinkKey, TrustAnchor, open_sealed
from .types import (
    FLAG_INBOUND, AnalysisRequest, AnalysisResponse, DefaultVerdict, EventKind,
    FlowMetadata, GatewayEvent, Issuer, LinkState, MatchPattern, Priority,
    SecurityPolicy, SensorReport, UpdateResult, Verdict, matches,
)
from .wire import (
    MessageType, decode_frame, decode_response, decode_update, encode_frame,
    encode_request, encode_resync, encode_rogue_report, encode_sensor_report,
    peek_update_header,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class CloudPending:
    request: AnalysisRequest
    frame: bytes


@dataclass(frozen=True, slots=True)
class Release:
    """A parked flow receiving its verdict."""
    request_id: int
    flow: FlowMetadata
    verdict: Verdict
    tick: int
    reason: str             # "response" | "timeout" | "offline"


@dataclass(slots=True)
class _Parked:
    flow: FlowMetadata
    inbound: bool
    issued_at: int
    expires_at: int


class Securebox:
    """One gateway's state and its event loop handlers."""

    def __init__(
        self,
        box_id: int,
        *,
        keypair: KeyPair,
        cert: Certificate,
        anchor: TrustAnchor,
        default_verdict: DefaultVerdict | None = None,
        response_timeout: int = 4,
        link_key: LinkKey | None = None,
        local_network: ipaddress.IPv4Network | None = None,
    ) -> None:
        self.box_id = box_id
        self.keypair = keypair
        self.cert = cert
        self.anchor = anchor
        self.db = PolicyDb(default_verdict)
        self.css_link = LinkState.CONNECTED
        self.response_timeout = response_timeout
        self.link_key = link_key
        self.local_network = local_network
        self.pending: dict[int, _Parked] = {}
        self.event_log: list[GatewayEvent] = []
        self._event_ticks: list[int] = []
        self._outbox: list[bytes] = []
        self._next_request_id = 1
        self._next_manual_id = 1
        self.messages_sent = 0
        self._offline_since: int | None = None

    # ------------------------------------------------------------------
    # Flow processing
    # ------------------------------------------------------------------

    def process_flow(
        self, flow: FlowMetadata, *, now: int, inbound: bool = False,
    ) -> Verdict | CloudPending:
        result = self.db.lookup(flow)
        if result.hit:
            verdict = result.policy.verdict
            self._log_verdict(now, flow, verdict, f"policy {result.policy.identity}")
            return verdict

        if self.css_link is LinkState.DISCONNECTED:
            verdict = self.db.default_verdict.for_direction(inbound)
            self._log_verdict(now, flow, verdict, "offline default")
            return verdict

        request = AnalysisRequest(
            box_id=self.box_id,
            request_id=self._next_request_id,
            metadata=flow,
            flags=FLAG_INBOUND if inbound else 0,
        )
        self._next_request_id += 1
        frame = encode_frame(MessageType.REQUEST, encode_request(request), self.keypair.sign)
        self._send(frame)
        self.pending[request.request_id] = _Parked(
            flow, inbound, now, now + self.response_timeout)
        self._log(GatewayEvent(now, EventKind.CLOUD_REQUESTED, flow,
                               detail=f"request {request.request_id}"))
        return CloudPending(request, frame)

    def on_response(self, resp: AnalysisResponse, *, now: int) -> Verdict:
        """Cache a verified response's policy and release its parked flow."""
        parked = self.pending.get(resp.request_id)
        if parked is None:
            raise UnknownRequestId(f"box {self.box_id}: no parked request {resp.request_id}")
        if not matches(resp.policy.pattern, parked.flow):
            raise MalformedFrame(
                f"box {self.box_id}: policy {resp.policy.identity} does not match "
                f"request {resp.request_id}")
        del self.pending[resp.request_id]
        self.db.insert(resp.policy)
        self._log_verdict(now, parked.flow, resp.policy.verdict,
                          f"response {resp.request_id}")
        return resp.policy.verdict

    def receive(self, data: bytes, *, now: int, source: str = "css") -> Release | UpdateResult | None:
        """Dispatch a frame arriving from the CSS side of the link.

        Anything that is not a response or an update, or that fails
        verification, is reported as coming from a rogue source.
        """
        try:
            msg_type = decode_frame(data).msg_type
        except MalformedFrame as e:
            logger.warning("box %d dropped unreadable frame from %s: %s", self.box_id, source, e)
            self._report_rogue(now, source, str(e), data)
            return None
        if msg_type is MessageType.RESPONSE:
            return self.receive_response_frame(data, now=now, source=source)
        if msg_type is MessageType.UPDATE:
            try:
                return self.receive_update(data, now=now, source=source)
            except (BadSignature, MalformedFrame):
                return None
        self._report_rogue(now, source, f"unexpected {msg_type.name} frame", data)
        return None

    def receive_response_frame(
        self, data: bytes, *, now: int, source: str = "css",
    ) -> Release | None:
        """Verify and apply a framed response; rejected frames return None."""
        try:
            frame = decode_frame(data)
            if frame.msg_type is not MessageType.RESPONSE:
                raise MalformedFrame(f"expected RESPONSE, got {frame.msg_type.name}")
            if not self.anchor.verify(frame.signed_bytes, frame.signature):
                raise BadSignature("response signature does not verify under the CSS key")
            resp = decode_response(frame.payload, frame.signature)
            flow = self.pending[resp.request_id].flow if resp.request_id in self.pending else None
            verdict = self.on_response(resp, now=now)
        except UnknownRequestId as e:
            logger.warning("%s", e)
            return None
        except (BadSignature, MalformedFrame) as e:
            logger.warning("box %d rejected response from %s: %s", self.box_id, source, e)
            self._report_rogue(now, source, str(e), data)
            return None
        return Release(resp.request_id, flow, verdict, now, "response")

    def receive_update(self, data: bytes, *, now: int, source: str = "css") -> UpdateResult:
        """Verify and apply a framed PolicyUpdate.

        Raises BadSignature or MalformedFrame after recording the rejection
        and queueing a rogue-source report to the CSS.
        """
        try:
            frame = decode_frame(data)
            if frame.msg_type is not MessageType.UPDATE:
                raise MalformedFrame(f"expected UPDATE, got {frame.msg_type.name}")
            if not self.anchor.verify(frame.signed_bytes, frame.signature):
                raise BadSignature("update signature does not verify under the CSS key")
            box_id, seq, _, _, _ = peek_update_header(frame.payload)
            if box_id != self.box_id:
                raise MalformedFrame(f"update {seq} is addressed to box {box_id}")
            update = decode_update(frame.payload, frame.signature, opener=self._opener(seq))
        except (BadSignature, MalformedFrame) as e:
            logger.warning("box %d rejected update from %s: %s", self.box_id, source, e)
            self._log(GatewayEvent(now, EventKind.UPDATE_REJECTED, detail=str(e)))
            self._report_rogue(now, source, str(e), data)
            raise

        result = self.db.apply_update(update)
        self._log(GatewayEvent(now, EventKind.UPDATE_APPLIED,
                               detail=f"seq {update.seq} applied {result.applied} "
                                      f"skipped {result.skipped}"))
        logger.debug("box %d applied update %d (%s)", self.box_id, update.seq, result)
        return result

    def _opener(self, seq: int):
        if self.link_key is None:
            return None
        return lambda body, header: open_sealed(self.link_key, self.box_id, seq, body, header)

    # ------------------------------------------------------------------
    # Timeouts and connectivity
    # ------------------------------------------------------------------

    def expire_request(self, request_id: int, *, now: int) -> Release | None:
        parked = self.pending.pop(request_id, None)
        if parked is None:
            return None
        verdict = self.db.default_verdict.for_direction(parked.inbound)
        self._log_verdict(now, parked.flow, verdict, f"request {request_id} timed out")
        return Release(request_id, parked.flow, verdict, now, "timeout")

    def expire_pending(self, now: int) -> list[Release]:
        due = sorted(rid for rid, p in self.pending.items() if p.expires_at <= now)
        return [r for rid in due if (r := self.expire_request(rid, now=now)) is not None]

    def set_link(self, state: LinkState, *, now: int) -> list[Release]:
        """Switch the CSS link.

        Going down releases every parked flow at once; coming back up queues
        a resync covering the outage.
        """
        if state is self.css_link:
            return []
        self.css_link = state
        logger.info("box %d css link %s at tick %d", self.box_id, state.value, now)
        if state is LinkState.CONNECTED:
            since = self._offline_since if self._offline_since is not None else now
            self._offline_since = None
            self.request_resync(since=since, now=now)
            return []
        self._offline_since = now
        released = []
        for rid in sorted(self.pending):
            parked = self.pending.pop(rid)
            verdict = self.db.default_verdict.for_direction(parked.inbound)
            self._log_verdict(now, parked.flow, verdict, "link down")
            released.append(Release(rid, parked.flow, verdict, now, "offline"))
        return released

    # ------------------------------------------------------------------
    # Manual policies and ranking
    # ------------------------------------------------------------------

    def add_manual_policy(
        self, pattern: MatchPattern, verdict: Verdict, *, now: int = 0,
    ) -> SecurityPolicy:
        policy = SecurityPolicy(
            policy_id=self._next_manual_id,
            pattern=pattern,
            verdict=verdict,
            priority=Priority.MANUAL,
            issuer=Issuer.LOCAL_USER,
            issued_at=now,
        )
        self._next_manual_id += 1
        self.db.insert(policy)
        logger.info("box %d manual policy %d: %s", self.box_id, policy.policy_id, verdict.name)
        return policy

    def security_rank(self, device_id: int, window: tuple[int, int]) -> float:
        """100 × (1 − drops/flows) for the device over [start, end]."""
        total = dropped = 0
        for ev in self._events_in(window):
            if ev.metadata is None or ev.metadata.device_id != device_id:
                continue
            if ev.kind is EventKind.FLOW_ALLOWED:
                total += 1
            elif ev.kind is EventKind.FLOW_DROPPED:
                total += 1
                dropped += 1
        if total == 0:
            return 100.0
        return 100.0 * (1 - dropped / total)

    # ------------------------------------------------------------------
    # Sensor reports
    # ------------------------------------------------------------------

    def emit_sensor_report(self, window: tuple[int, int]) -> SensorReport:
        start, end = window
        flows: dict[int, int] = {}
        drops: dict[int, int] = {}
        remotes: dict[int, set[int]] = {}
        suspicious: list[GatewayEvent] = []
        contacts: list[tuple[int, int, int, int]] = []
        for ev in self._events_in(window):
            if ev.kind is EventKind.SUSPICIOUS_SOURCE:
                suspicious.append(ev)
                continue
            if ev.kind not in (EventKind.FLOW_ALLOWED, EventKind.FLOW_DROPPED):
                continue
            m = ev.metadata
            flows[m.device_id] = flows.get(m.device_id, 0) + 1
            if ev.kind is EventKind.FLOW_DROPPED:
                drops[m.device_id] = drops.get(m.device_id, 0) + 1
            remote = self._remote_of(m)
            remotes.setdefault(m.device_id, set()).add(remote)
            if remote == m.src_addr and self.local_network is not None:
                contacts.append((m.src_addr, m.dst_addr, m.dst_port, ev.tick))
        report = SensorReport(
            box_id=self.box_id,
            tick_start=start,
            tick_end=end,
            flows=flows,
            drops=drops,
            remotes={d: len(r) for d, r in remotes.items()},
            suspicious=tuple(suspicious),
            contacts=tuple(contacts),
        )
        if self.css_link is LinkState.CONNECTED:
            self._send(encode_frame(MessageType.SENSOR_REPORT,
                                    encode_sensor_report(report), self.keypair.sign))
        return report

    def _remote_of(self, flow: FlowMetadata) -> int:
        if self.local_network is None:
            return flow.dst_addr
        if ipaddress.IPv4Address(flow.src_addr) in self.local_network:
            return flow.dst_addr
        return flow.src_addr

    def _events_in(self, window: tuple[int, int]) -> list[GatewayEvent]:
        start, end = window
        lo = bisect.bisect_left(self._event_ticks, start)
        hi = bisect.bisect_right(self._event_ticks, end)
        return self.event_log[lo:hi]

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------

    def persist(self, store: SqliteSnapshotStore, *, now: int) -> None:
        store.save(self.box_id, snapshot(self.db), now)

    def reboot(
        self, store: SqliteSnapshotStore, *, now: int,
    ) -> list[tuple[int, FlowMetadata, bool]]:
        """Restore Pol-DB from the last snapshot.

        Parked requests do not survive; each lost (request_id, flow, inbound)
        is returned so the caller can present the flow again.
        """
        blob = store.load(self.box_id)
        defaults = self.db.default_verdict
        self.db = restore(blob) if blob is not None else PolicyDb(defaults)
        lost = [(rid, self.pending[rid].flow, self.pending[rid].inbound)
                for rid in sorted(self.pending)]
        self.pending.clear()
        logger.info("box %d rebooted at tick %d with %d policies, %d flows to re-ask",
                    self.box_id, now, self.db.size, len(lost))
        saved = store.saved_tick(self.box_id) if blob is not None else None
        self.request_resync(since=saved if saved is not None else 0, now=now)
        return lost

    def request_resync(self, *, since: int, now: int) -> bytes | None:
        """Ask the CSS to resend what this box may have lost.

        The watermark is the highest seq below which every update was
        applied. Responses sent shortly before ``since`` may still have been
        in flight, so the window is widened by one response timeout.
        """
        if self.css_link is not LinkState.CONNECTED:
            return None
        watermark = 0
        applied = self.db.applied_seqs
        while watermark + 1 in applied:
            watermark += 1
        since = max(0, since - self.response_timeout)
        frame = encode_frame(MessageType.RESYNC, encode_resync(self.box_id, watermark, since),
                             self.keypair.sign)
        self._send(frame)
        logger.info("box %d asks for resync at tick %d (watermark %d, since %d)",
                    self.box_id, now, watermark, since)
        return frame

    # ------------------------------------------------------------------
    # Egress
    # ------------------------------------------------------------------

    def drain_outbox(self) -> list[bytes]:
        frames, self._outbox = self._outbox, []
        return frames

    def _send(self, frame: bytes) -> None:
        self._outbox.append(frame)
        self.messages_sent += 1

    def _report_rogue(self, now: int, source: str, reason: str, data: bytes) -> None:
        digest = hashlib.sha256(data).hexdigest()[:16]
        self._log(GatewayEvent(now, EventKind.SUSPICIOUS_SOURCE, source=source, detail=reason))
        if self.css_link is LinkState.CONNECTED:
            self._send(encode_frame(MessageType.ROGUE_REPORT,
                                    encode_rogue_report(source, reason, digest, now),
                                    self.keypair.sign))

    def _log_verdict(self, now: int, flow: FlowMetadata, verdict: Verdict, why: str) -> None:
        kind = EventKind.FLOW_ALLOWED if verdict is Verdict.ALLOW else EventKind.FLOW_DROPPED
        self._log(GatewayEvent(now, kind, flow, detail=why))
        logger.debug("box %d %s %s (%s)", self.box_id, verdict.name, flow, why)

    def _log(self, event: GatewayEvent) -> None:
        if self._event_ticks and event.tick < self._event_ticks[-1]:
            raise ValueError(f"event at tick {event.tick} after tick {self._event_ticks[-1]}")
        self.event_log.append(event)
        self._event_ticks.append(event.tick)
