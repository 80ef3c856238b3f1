"""Traffic generators for the simulation.

Every generator draws from its own ``random.Random`` seeded by a string
derived from the scenario seed, so adding a zombie never perturbs benign
traffic and the same seed always yields the same flows.
"""

from __future__ import annotations
import math
import random
from dataclasses import dataclass

from .config import ScenarioConfig
from .types import PROTO_TCP, FlowMetadata

EPHEMERAL_PORTS = (1024, 65535)


@dataclass(frozen=True, slots=True)
class GeneratedFlow:
    tick: int
    segment: int
    flow: FlowMetadata
    inbound: bool
    attack: bool


def diurnal_levels(period: int, trough: float = 0.1) -> list[float]:
    """One activity cycle of ``period`` ticks: ``trough`` at tick 0, 1.0 at mid-cycle."""
    if period <= 0:
        return []
    return [trough + (1 - trough) * (1 - math.cos(2 * math.pi * t / period)) / 2
            for t in range(period)]


class BenignTraffic:
    """External clients contacting hosts, and hosts contacting well-known servers.

    Each client is bound to one segment.  Rates are per tick at peak activity
    and scale with the diurnal level.
    """

    def __init__(self, config: ScenarioConfig) -> None:
        self._cfg = config.benign
        self._segments = config.segments
        self._servers = config.servers
        self._levels = diurnal_levels(config.diurnal_period, config.diurnal_trough)
        self._rng = random.Random(f"{config.seed}:benign")

    def level(self, tick: int) -> float:
        return self._levels[tick % len(self._levels)] if self._levels else 1.0

    def flows_at(self, tick: int) -> list[GeneratedFlow]:
        rng = self._rng
        level = self.level(tick)
        out: list[GeneratedFlow] = []
        n_seg = len(self._segments)
        for client in range(self._cfg.clients):
            if rng.random() >= self._cfg.rate * level:
                continue
            seg_index = client % n_seg
            host = rng.choice(self._segments[seg_index].hosts)
            flow = FlowMetadata(
                src_addr=self._cfg.client_base + client,
                dst_addr=host.addr,
                src_port=rng.randint(*EPHEMERAL_PORTS),
                dst_port=rng.choice(self._cfg.ports),
                protocol=PROTO_TCP,
                device_id=host.device_id,
            )
            out.append(GeneratedFlow(tick, seg_index, flow, True, False))
        if not self._servers:
            return out
        for seg_index, seg in enumerate(self._segments):
            for host in seg.hosts:
                if rng.random() >= self._cfg.outbound_rate * level:
                    continue
                flow = FlowMetadata(
                    src_addr=host.addr,
                    dst_addr=rng.choice(self._servers),
                    src_port=rng.randint(*EPHEMERAL_PORTS),
                    dst_port=rng.choice(self._cfg.outbound_ports),
                    protocol=PROTO_TCP,
                    device_id=host.device_id,
                )
                out.append(GeneratedFlow(tick, seg_index, flow, False, False))
        return out


@dataclass(slots=True)
class _Probe:
    zombie: int
    segment: int
    start: int
    rate: int
    ports: list[int]
    sent: int = 0


class ZombieSwarm:
    """Attacker-controlled nodes port-scanning segment hosts.

    Each wave sends the whole swarm at one segment.  A zombie probes a fresh
    sample of ``ports_per_target`` distinct ports per segment, ``rate`` probes
    per tick, each at a random host of the segment.
    """

    def __init__(self, config: ScenarioConfig) -> None:
        attack = config.attack
        self._segments = config.segments
        self.addresses = [attack.base + z for z in range(attack.count)]
        self.rates = [random.Random(f"{config.seed}:rate:{z}").randint(*attack.probe_rate)
                      for z in range(attack.count)]
        self._scans: list[_Probe] = []
        for wave in attack.schedule:
            seg_index = config.segment_index(wave.segment)
            for z in range(attack.count):
                rng = random.Random(f"{config.seed}:ports:{z}:{seg_index}:{wave.start}")
                ports = rng.sample(range(1, 65536), attack.ports_per_target)
                self._scans.append(_Probe(z, seg_index, wave.start, self.rates[z], ports))
        self._rng = random.Random(f"{config.seed}:attack")

    def is_attacker(self, addr: int) -> bool:
        return bool(self.addresses) and self.addresses[0] <= addr <= self.addresses[-1]

    def flows_at(self, tick: int) -> list[GeneratedFlow]:
        out: list[GeneratedFlow] = []
        for scan in self._scans:
            if tick < scan.start or scan.sent >= len(scan.ports):
                continue
            hosts = self._segments[scan.segment].hosts
            for _ in range(min(scan.rate, len(scan.ports) - scan.sent)):
                host = self._rng.choice(hosts)
                flow = FlowMetadata(
                    src_addr=self.addresses[scan.zombie],
                    dst_addr=host.addr,
                    src_port=self._rng.randint(*EPHEMERAL_PORTS),
                    dst_port=scan.ports[scan.sent],
                    protocol=PROTO_TCP,
                    device_id=host.device_id,
                )
                scan.sent += 1
                out.append(GeneratedFlow(tick, scan.segment, flow, True, True))
        return out


class TrafficMix:
    """Scripted flows, then benign traffic, then the swarm, for one tick at a time."""

    def __init__(self, config: ScenarioConfig) -> None:
        self._scripted: dict[int, list[GeneratedFlow]] = {}
        for sf in config.scripted_flows:
            self._scripted.setdefault(sf.tick, []).append(GeneratedFlow(
                sf.tick, config.segment_index(sf.segment), sf.flow, sf.inbound, sf.attack))
        self.benign = BenignTraffic(config)
        self.swarm = ZombieSwarm(config)

    def flows_at(self, tick: int) -> list[GeneratedFlow]:
        return (self._scripted.get(tick, [])
                + self.benign.flows_at(tick)
                + self.swarm.flows_at(tick))


