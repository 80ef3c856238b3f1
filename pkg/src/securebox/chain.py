"""Service chains and the Middlebox Manager.

Usage:
    manager = MiddleboxManager()
    manager.add(Middlebox("fw-1", "fw", FirewallConfig(...)))
    manager.add(Middlebox("ids-1", "ids", IdsConfig(...)))
    manager.add(Middlebox("ids-1b", "ids", IdsConfig(...), replica_of="ids-1"))

    chain = manager.resolve_chain(["fw", "ids"])      # balanced instance ids
    result = manager.eval_chain(chain, flow, device_class="cctv", now=tick)
    result.verdict, result.deciding_instance

Stateful instances push a copy of their state to their replica after every
evaluation, so ``fail_and_swap`` promotes a replica that behaves exactly as
the failed primary would have.
"""

from __future__ import annotations
import copy
import logging
from dataclasses import dataclass
from typing import Iterable

from .errors import InstanceUnavailable, NoInstance, NoReplica
from .middlebox import FirewallRule, Middlebox, MiddleboxKind
from .types import FlowMetadata, Verdict

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class ServiceChain:
    instances: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.instances:
            raise ValueError("service chain must not be empty")
        if len(set(self.instances)) != len(self.instances):
            raise ValueError(f"duplicate instance in chain {self.instances}")


@dataclass(frozen=True, slots=True)
class StageResult:
    instance_id: str
    kind: MiddleboxKind
    verdict: Verdict
    rule: FirewallRule | None = None
    alerts: tuple[str, ...] = ()


@dataclass(frozen=True, slots=True)
class ChainVerdict:
    verdict: Verdict
    deciding_instance: str
    stages: tuple[StageResult, ...]

    @property
    def rule(self) -> FirewallRule | None:
        """Firewall rule behind the decision, if a firewall decided."""
        for stage in self.stages:
            if stage.instance_id == self.deciding_instance:
                return stage.rule
        return None


@dataclass(frozen=True, slots=True)
class AssignmentRequest:
    service: str
    cost: int = 1


class MiddleboxManager:
    """Deployment, load balancing and hot-swap of middlebox instances."""

    def __init__(self, instances: Iterable[Middlebox] = ()) -> None:
        self._instances: dict[str, Middlebox] = {}
        self._replicas: dict[str, str] = {}     # primary id → replica id
        self._aliases: dict[str, str] = {}      # failed id → promoted replica id
        for mb in instances:
            self.add(mb)

    def add(self, mb: Middlebox) -> None:
        if mb.instance_id in self._instances:
            raise ValueError(f"duplicate middlebox instance {mb.instance_id!r}")
        if mb.replica_of is not None:
            primary = self._instances.get(mb.replica_of)
            if primary is None:
                raise ValueError(f"replica {mb.instance_id!r} of unknown instance {mb.replica_of!r}")
            if primary.config != mb.config:
                raise ValueError(f"replica {mb.instance_id!r} config differs from its primary")
            mb.state = copy.deepcopy(primary.state)
            self._replicas[mb.replica_of] = mb.instance_id
        self._instances[mb.instance_id] = mb

    def get(self, instance_id: str) -> Middlebox:
        return self._instances[instance_id]

    def instances(self) -> list[Middlebox]:
        return [self._instances[k] for k in sorted(self._instances)]

    def resolve(self, instance_id: str) -> Middlebox:
        """The live instance currently serving ``instance_id``."""
        seen: set[str] = set()
        current = instance_id
        while current in self._aliases and current not in seen:
            seen.add(current)
            current = self._aliases[current]
        mb = self._instances.get(current)
        if mb is None or mb.failed:
            raise InstanceUnavailable(f"no live instance behind {instance_id!r}")
        return mb

    # ------------------------------------------------------------------
    # Balancing and fault tolerance
    # ------------------------------------------------------------------

    def assign_and_balance(self, request: AssignmentRequest) -> str:
        """Least-loaded live primary of the service; ties go to the lowest id."""
        pool = [mb for mb in self._instances.values()
                if mb.service == request.service and not mb.failed and mb.replica_of is None]
        if not pool:
            raise NoInstance(f"no live instance of service {request.service!r}")
        chosen = min(pool, key=lambda mb: (mb.load, mb.instance_id))
        chosen.load += request.cost
        return chosen.instance_id

    def resolve_chain(self, services: Iterable[str]) -> ServiceChain:
        return ServiceChain(tuple(self.assign_and_balance(AssignmentRequest(s)) for s in services))

    def fail_and_swap(self, instance_id: str) -> str:
        mb = self._instances.get(instance_id)
        if mb is None:
            raise InstanceUnavailable(f"unknown middlebox instance {instance_id!r}")
        mb.failed = True
        replica_id = self._replicas.pop(instance_id, None)
        replica = self._instances.get(replica_id) if replica_id else None
        if replica is None or replica.failed:
            logger.warning("middlebox %s failed with no replica", instance_id)
            raise NoReplica(f"instance {instance_id!r} has no live replica")
        replica.replica_of = None
        replica.load = mb.load
        self._aliases[instance_id] = replica.instance_id
        logger.info("middlebox %s failed, replica %s promoted", instance_id, replica.instance_id)
        return replica.instance_id

    # ------------------------------------------------------------------
    # Evaluation
    # ------------------------------------------------------------------

    def eval_chain(
        self,
        chain: ServiceChain,
        flow: FlowMetadata,
        *,
        device_class: str | None = None,
        now: int = 0,
        full_session: bool = False,
    ) -> ChainVerdict:
        """Run the stages in order.

        Short-circuits on the first Drop unless ``full_session`` is set, in
        which case every stage sees the flow and the first Drop still decides.
        """
        stages: list[StageResult] = []
        decider: str | None = None
        for instance_id in chain.instances:
            mb = self.resolve(instance_id)
            outcome = mb.evaluate(flow, device_class=device_class, now=now)
            self._sync(mb)
            stages.append(StageResult(instance_id, mb.kind, outcome.verdict,
                                      outcome.rule, outcome.alerts))
            if outcome.verdict is Verdict.DROP and decider is None:
                decider = instance_id
                if not full_session:
                    break
        if decider is None:
            return ChainVerdict(Verdict.ALLOW, chain.instances[-1], tuple(stages))
        return ChainVerdict(Verdict.DROP, decider, tuple(stages))

    def _sync(self, mb: Middlebox) -> None:
        if not mb.stateful:
            return
        replica_id = self._replicas.get(mb.instance_id)
        if replica_id is not None:
            self._instances[replica_id].state = copy.deepcopy(mb.state)
