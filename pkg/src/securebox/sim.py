"""Deterministic discrete-event simulation of gateways and the CSS.

Gateways and the cloud exchange encoded frames through the event queue, so
every message crosses the wire codecs exactly as it would on a socket.

Order of events within one tick:

    1. failure injections
    2. deliveries and timers, in the order they were scheduled
    3. flow arrivals generated for the tick
    4. housekeeping: CSS detection and dissemination, sensor reports, snapshots

Usage:
    config = load_from_yaml("scenarios/canonical.yaml")
    result = simulate(config)
    export_csv(result.metrics, "out/metrics.csv")
"""

from __future__ import annotations
import heapq
import itertools
import logging
import random
from collections import defaultdict
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any

from .chain import MiddleboxManager
from .cloud import CloudConfig, CloudService, Emission, LowActivitySchedule
from .config import FailureSpec, ScenarioConfig
from .errors import MalformedFrame, NoReplica, ReplicationGap, SecureboxError
from .framing import FrameReader
from .gateway import CloudPending, Release, Securebox
from .metrics import MetricsSeries, render_csv
from .middlebox import Middlebox
from .replication import failover
from .snapshot_sqlite import SqliteSnapshotStore
from .traffic import GeneratedFlow, TrafficMix, diurnal_levels
from .trust import CSS_SUBJECT_ID, CertificateAuthority, KeyPair, LinkKey, TrustAnchor
from .types import (
    FLAG_INBOUND, PROTO_TCP, AnalysisRequest, FlowMetadata, Issuer, LinkState,
    MatchPattern, PolicyUpdate, Priority, SecurityPolicy, UpdateTier, Verdict, ip_to_int,
)
from .wire import MessageType, decode_frame, encode_frame, encode_request, encode_update

logger = logging.getLogger(__name__)

UPLINK = "up"
DOWNLINK = "down"
ROGUE_SOURCE = "rogue-node"
REPLAY_FLOW_SRC = ip_to_int("198.18.0.1")


class SimEventKind(Enum):
    FAILURE = "failure"
    DELIVER = "deliver"
    TIMER_FIRE = "timer"
    FLOW_ARRIVAL = "flow"
    HOUSEKEEPING = "housekeeping"


@dataclass(frozen=True, slots=True)
class SimEvent:
    tick: int
    kind: SimEventKind
    payload: Any = None


class EventQueue:
    """Min-heap on (tick, insertion order)."""

    def __init__(self) -> None:
        self._heap: list[tuple[int, int, SimEvent]] = []
        self._seq = itertools.count()

    def push(self, tick: int, kind: SimEventKind, payload: Any = None) -> None:
        heapq.heappush(self._heap, (tick, next(self._seq), SimEvent(tick, kind, payload)))

    def pop(self) -> SimEvent:
        return heapq.heappop(self._heap)[2]

    def next_tick(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)


@dataclass(slots=True)
class FlowRecord:
    """What happened to one generated flow."""
    tick: int
    segment: int
    flow: FlowMetadata
    inbound: bool
    attack: bool
    outcome: str                    # "analyzed" | "dropped" | "allowed"
    verdict: Verdict | None = None  # None while parked
    released_at: int | None = None


@dataclass(slots=True)
class SimResult:
    config: ScenarioConfig
    metrics: MetricsSeries
    trace: list[FlowRecord]
    emissions: list[Emission]
    analytics: list[dict[str, Any]]
    boxes: list[Securebox]
    cloud: CloudService
    failovers: int = 0

    @property
    def csv(self) -> str:
        return render_csv(self.metrics)


def _cloud_config(config: ScenarioConfig) -> CloudConfig:
    cloud = config.cloud
    if not config.derive_low_activity:
        return cloud
    if config.diurnal_period > 0:
        levels = diurnal_levels(config.diurnal_period, config.diurnal_trough)
        return replace(cloud, low_activity=LowActivitySchedule.from_activity(levels))
    # Flat activity: every tick counts as quiet.
    return replace(cloud, low_activity=LowActivitySchedule(((0, 1),), 1))


def _manager(config: ScenarioConfig) -> MiddleboxManager:
    return MiddleboxManager(Middlebox(s.instance_id, s.service, s.config, s.replica_of)
                            for s in config.middleboxes)


class Simulation:
    """One scenario run.  Construct, then call ``run()`` once."""

    def __init__(self, config: ScenarioConfig) -> None:
        self.config = config
        rng = random.Random(f"{config.seed}:keys")
        self.ca = CertificateAuthority(rng=rng)
        css_keys, css_cert = self.ca.register(CSS_SUBJECT_ID)
        cloud_cfg = _cloud_config(config)
        self.cloud = CloudService(cloud_cfg, ca=self.ca, keypair=css_keys, cert=css_cert,
                                  manager=_manager(config))
        self.backup: CloudService | None = CloudService(
            cloud_cfg, ca=self.ca, keypair=css_keys, cert=css_cert, manager=_manager(config))
        self.cloud.attach_backup(self.backup)

        anchor = TrustAnchor.pin(self.ca.root_public_key, css_cert)
        self.boxes: list[Securebox] = []
        self._link_keys: list[LinkKey] = []
        for i, seg in enumerate(config.segments):
            box_id = i + 1
            keys, cert = self.ca.register(box_id)
            link_key = LinkKey.generate(rng)
            box = Securebox(box_id, keypair=keys, cert=cert, anchor=anchor,
                            default_verdict=seg.default_verdict,
                            response_timeout=config.response_timeout,
                            link_key=link_key, local_network=seg.network)
            for manual in seg.manual_policies:
                box.add_manual_policy(manual.pattern, manual.verdict, now=0)
            self.boxes.append(box)
            self._link_keys.append(link_key)
        self._rogue_keys = KeyPair.generate(random.Random(f"{config.seed}:rogue"))

        self.traffic = TrafficMix(config)
        self.metrics = MetricsSeries([s.name for s in config.segments], config.duration)
        self.queue = EventQueue()
        self.trace: list[FlowRecord] = []
        self._parked: dict[tuple[int, int], int] = {}        # (segment, request id) → trace index
        self._link_up = [True] * len(config.segments)
        self._readers = {(d, s): FrameReader()
                         for d in (UPLINK, DOWNLINK) for s in range(len(config.segments))}
        self._store = SqliteSnapshotStore(":memory:")
        self._replay_ids = itertools.count(1 << 30)
        self.failovers = 0
        self._ran = False

    # ------------------------------------------------------------------
    # Main loop
    # ------------------------------------------------------------------

    def run(self) -> SimResult:
        if self._ran:
            raise RuntimeError("a Simulation runs once; build a new one")
        self._ran = True
        cfg = self.config
        logger.info("scenario %r: %d segments, %d ticks, seed %d, collaboration %s",
                    cfg.name, len(cfg.segments), cfg.duration, cfg.seed, cfg.collaboration)

        for failure in sorted(cfg.failures, key=lambda f: f.tick):
            self.queue.push(failure.tick, SimEventKind.FAILURE, failure)
        for i, seg in enumerate(cfg.segments):
            self.cloud.register_box(i + 1, self.boxes[i].cert, seg.profile(i + 1),
                                    link_key=self._link_keys[i], now=0)
        self._flush(0)

        for tick in range(cfg.duration):
            for generated in self.traffic.flows_at(tick):
                self.queue.push(tick, SimEventKind.FLOW_ARRIVAL, generated)
            self.queue.push(tick, SimEventKind.HOUSEKEEPING)
            while (nxt := self.queue.next_tick()) is not None and nxt <= tick:
                event = self.queue.pop()
                self._dispatch(event)
                self._flush(event.tick)

        self._store.close()
        logger.info("scenario %r done: %d flows, %d css requests, %d updates",
                    cfg.name, len(self.trace), self.cloud.requests_handled,
                    len(self.cloud.emission_log))
        return SimResult(
            config=cfg,
            metrics=self.metrics,
            trace=self.trace,
            emissions=list(self.cloud.emission_log),
            analytics=self.cloud.analytics_summary(),
            boxes=self.boxes,
            cloud=self.cloud,
            failovers=self.failovers,
        )

    def _dispatch(self, event: SimEvent) -> None:
        if event.kind is SimEventKind.FLOW_ARRIVAL:
            self._on_flow(event.tick, event.payload)
        elif event.kind is SimEventKind.DELIVER:
            direction, segment, data = event.payload
            if direction == UPLINK:
                self._deliver_up(event.tick, segment, data)
            else:
                self._deliver_down(event.tick, segment, data)
        elif event.kind is SimEventKind.TIMER_FIRE:
            segment, request_id = event.payload
            self._settle(segment, self.boxes[segment].expire_request(request_id, now=event.tick))
        elif event.kind is SimEventKind.FAILURE:
            self._inject(event.tick, event.payload)
        else:
            self._housekeeping(event.tick)

    # ------------------------------------------------------------------
    # Flows
    # ------------------------------------------------------------------

    def _on_flow(self, now: int, g: GeneratedFlow) -> None:
        outcome = self.boxes[g.segment].process_flow(g.flow, now=now, inbound=g.inbound)
        record = FlowRecord(now, g.segment, g.flow, g.inbound, g.attack, "analyzed")
        if isinstance(outcome, CloudPending):
            self._park(g.segment, outcome.request.request_id, len(self.trace), now)
        else:
            record.outcome = "allowed" if outcome is Verdict.ALLOW else "dropped"
            record.verdict = outcome
            record.released_at = now
        self.trace.append(record)
        self.metrics.record_flow(g.segment, now, attack=g.attack, outcome=record.outcome)

    def _park(self, segment: int, request_id: int, index: int, now: int) -> None:
        self._parked[(segment, request_id)] = index
        self.queue.push(now + self.config.response_timeout, SimEventKind.TIMER_FIRE,
                        (segment, request_id))

    def _settle(self, segment: int, release: Release | None) -> None:
        if release is None:
            return
        index = self._parked.pop((segment, release.request_id), None)
        if index is None:
            return
        record = self.trace[index]
        record.verdict = release.verdict
        record.released_at = release.tick

    # ------------------------------------------------------------------
    # Links
    # ------------------------------------------------------------------

    def _flush(self, now: int) -> None:
        deliver_at = now + self.config.link_delay
        for segment, box in enumerate(self.boxes):
            frames = box.drain_outbox()
            if frames and self._link_up[segment]:
                self.queue.push(deliver_at, SimEventKind.DELIVER,
                                (UPLINK, segment, b"".join(frames)))
        per_box: dict[int, list[bytes]] = defaultdict(list)
        for box_id, frame in self.cloud.drain_outbox():
            per_box[box_id].append(frame)
            if frame[4] == MessageType.UPDATE:
                self.metrics.add_update_bytes(box_id - 1, now, len(frame))
        for box_id in sorted(per_box):
            self.queue.push(deliver_at, SimEventKind.DELIVER,
                            (DOWNLINK, box_id - 1, b"".join(per_box[box_id])))

    def _frames(self, direction: str, segment: int, data: bytes) -> list[bytes]:
        try:
            return self._readers[(direction, segment)].feed(data)
        except MalformedFrame as e:
            logger.warning("%slink of segment %d lost sync: %s", direction, segment, e)
            return []

    def _deliver_up(self, now: int, segment: int, data: bytes) -> None:
        if not self._link_up[segment]:
            return
        box_id = segment + 1
        for frame in self._frames(UPLINK, segment, data):
            try:
                if decode_frame(frame).msg_type is MessageType.REQUEST:
                    self.metrics.add_css_request(segment, now)
            except MalformedFrame:
                pass
            try:
                self.cloud.receive_frame(box_id, frame, now=now)
            except SecureboxError as e:
                logger.debug("css refused frame from box %d: %s", box_id, e)

    def _deliver_down(self, now: int, segment: int, data: bytes) -> None:
        if not self._link_up[segment]:
            return
        box = self.boxes[segment]
        for frame in self._frames(DOWNLINK, segment, data):
            result = box.receive(frame, now=now)
            if isinstance(result, Release):
                self._settle(segment, result)

    # ------------------------------------------------------------------
    # Housekeeping
    # ------------------------------------------------------------------

    def _housekeeping(self, now: int) -> None:
        try:
            self.cloud.on_tick(now)
        except SecureboxError as e:
            logger.debug("css housekeeping skipped at tick %d: %s", now, e)
        interval = self.config.report_interval
        if (now + 1) % interval == 0:
            for box in self.boxes:
                box.emit_sensor_report((now + 1 - interval, now))
        snap = self.config.snapshot_interval
        if snap and (now + 1) % snap == 0:
            for box in self.boxes:
                box.persist(self._store, now=now)

    # ------------------------------------------------------------------
    # Failure injection
    # ------------------------------------------------------------------

    def _inject(self, now: int, failure: FailureSpec) -> None:
        logger.info("tick %d: injecting %s", now, failure.component)
        kind = failure.kind
        segment = (self.config.segment_index(failure.target)
                   if failure.target is not None and kind != "middlebox" else None)
        if kind == "cloud-manager":
            if self.backup is None:
                logger.warning("no backup cloud manager left to promote")
                self.cloud.fail()
                return
            try:
                self.cloud = failover(self.cloud, self.backup)
                self.failovers += 1
            except ReplicationGap as e:
                logger.error("failover aborted: %s", e)
            self.backup = None
        elif kind == "middlebox":
            try:
                promoted = self.cloud.fail_middlebox(failure.target)
                logger.info("middlebox %s replaced by %s", failure.target, promoted)
            except NoReplica as e:
                logger.warning("%s", e)
            except SecureboxError as e:
                logger.warning("middlebox failure not applied: %s", e)
        elif kind in ("link-down", "link-up"):
            up = kind == "link-up"
            self._link_up[segment] = up
            state = LinkState.CONNECTED if up else LinkState.DISCONNECTED
            for release in self.boxes[segment].set_link(state, now=now):
                self._settle(segment, release)
        elif kind == "revoke":
            self.ca.revoke(segment + 1)
        elif kind == "rogue-update":
            self._rogue_update(now, segment)
        elif kind == "replay":
            self._replay_attack(now, segment)
        elif kind == "reboot":
            self._reboot(now, segment)

    def _rogue_update(self, now: int, segment: int) -> None:
        """A node off the CSS pushes an update signed with its own key."""
        box = self.boxes[segment]
        bait = SecurityPolicy(
            policy_id=0xFFFF_FFFF,
            pattern=MatchPattern(src_addr=self.config.attack.base),
            verdict=Verdict.ALLOW,
            priority=Priority.HIGH,
            issuer=Issuer.CSS,
            issued_at=now,
        )
        update = PolicyUpdate(box.box_id, 0x7FFF_FFFF, UpdateTier.HIGH, (bait,))
        frame = encode_frame(MessageType.UPDATE, encode_update(update), self._rogue_keys.sign)
        box.receive(frame, now=now, source=ROGUE_SOURCE)

    def _replay_attack(self, now: int, segment: int) -> None:
        """A compromised box repeats one request past the blacklist threshold."""
        box = self.boxes[segment]
        host = self.config.segments[segment].hosts[0]
        flow = FlowMetadata(src_addr=REPLAY_FLOW_SRC, dst_addr=host.addr, src_port=4444,
                            dst_port=4444, protocol=PROTO_TCP, device_id=host.device_id)
        frames = []
        for _ in range(self.cloud.config.repeat_threshold + 1):
            req = AnalysisRequest(box_id=box.box_id, request_id=next(self._replay_ids),
                                  metadata=flow, flags=FLAG_INBOUND)
            frames.append(encode_frame(MessageType.REQUEST, encode_request(req), box.keypair.sign))
        if self._link_up[segment]:
            self.queue.push(now + self.config.link_delay, SimEventKind.DELIVER,
                            (UPLINK, segment, b"".join(frames)))

    def _reboot(self, now: int, segment: int) -> None:
        box = self.boxes[segment]
        for request_id, flow, inbound in box.reboot(self._store, now=now):
            index = self._parked.pop((segment, request_id), None)
            outcome = box.process_flow(flow, now=now, inbound=inbound)
            if index is None:
                continue
            if isinstance(outcome, CloudPending):
                self._park(segment, outcome.request.request_id, index, now)
            else:
                self.trace[index].verdict = outcome
                self.trace[index].released_at = now


# ------------------------------------------------------------------
# Entry points
# ------------------------------------------------------------------

def simulate(config: ScenarioConfig) -> SimResult:
    return Simulation(config).run()


def run_scenario(config: ScenarioConfig) -> MetricsSeries:
    """Run one scenario and return its metrics."""
    return simulate(config).metrics


def replay_check(config: ScenarioConfig) -> bool:
    """True when two independent runs render byte-identical CSV."""
    first = render_csv(run_scenario(config))
    second = render_csv(run_scenario(config))
    if first != second:
        logger.error("scenario %r is not reproducible", config.name)
    return first == second
