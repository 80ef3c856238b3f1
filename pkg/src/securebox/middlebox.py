"""Virtual middleboxes: firewall, IDS (IPS in prevent mode) and label-based DPI.

Each kind is a frozen config plus a pure-ish evaluator.  Only the IDS keeps
state (rate windows); that state lives on the ``Middlebox`` instance so the
manager can copy it to a replica after every mutation.
"""

from __future__ import annotations
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

from .types import FlowMetadata, MatchPattern, Verdict, matches

logger = logging.getLogger(__name__)


class MiddleboxKind(Enum):
    FIREWALL = "firewall"
    IDS = "ids"
    DPI = "dpi"


# ------------------------------------------------------------------
# Firewall
# ------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class FirewallRule:
    pattern: MatchPattern
    verdict: Verdict
    device_class: str | None = None     # None applies to every class


@dataclass(frozen=True, slots=True)
class FirewallConfig:
    allowlist: frozenset[int] = frozenset()      # known-safe server addresses
    rules: tuple[FirewallRule, ...] = ()


def first_match_rule(
    fw: FirewallConfig, flow: FlowMetadata, device_class: str | None = None,
) -> FirewallRule | None:
    """First rule, in order, that applies to the class and matches the flow."""
    for rule in fw.rules:
        if rule.device_class is not None and rule.device_class != device_class:
            continue
        if matches(rule.pattern, flow):
            return rule
    return None


def eval_firewall(
    fw: FirewallConfig, flow: FlowMetadata, device_class: str | None = None,
    matched: list[FirewallRule] | None = None,
) -> Verdict:
    """Allowlisted servers pass; otherwise the first applicable rule decides.

    The deciding rule, if any, is appended to ``matched``.
    """
    if flow.dst_addr in fw.allowlist:
        return Verdict.ALLOW
    rule = first_match_rule(fw, flow, device_class)
    if rule is None:
        return Verdict.ALLOW
    if matched is not None:
        matched.append(rule)
    return rule.verdict


# ------------------------------------------------------------------
# IDS
# ------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class RateCondition:
    """Fires when more than ``count`` matching flows share ``key`` within ``window`` ticks."""
    count: int
    window: int
    key: str = "src_addr"


@dataclass(frozen=True, slots=True)
class Signature:
    name: str
    pattern: MatchPattern
    rate: RateCondition | None = None


@dataclass(frozen=True, slots=True)
class IdsConfig:
    signatures: tuple[Signature, ...] = ()
    prevent: bool = True        # False: detect-only, alerts but never drops


# (signature index, key value) → ticks of matching flows, oldest first
IdsState = dict[tuple[int, int], deque[int]]


def eval_ids(
    ids: IdsConfig, flow: FlowMetadata, state: IdsState, now: int,
    alerts: list[str] | None = None,
) -> Verdict:
    """Evaluate every signature and record the flow in the rate windows.

    All signatures are evaluated (no early exit) so rate windows stay
    complete regardless of which signature fires first.
    """
    fired: list[str] = []
    for index, sig in enumerate(ids.signatures):
        if not matches(sig.pattern, flow):
            continue
        if sig.rate is None:
            fired.append(sig.name)
            continue
        window = state.setdefault((index, getattr(flow, sig.rate.key)), deque())
        window.append(now)
        while window and window[0] <= now - sig.rate.window:
            window.popleft()
        if len(window) > sig.rate.count:
            fired.append(sig.name)
    if not fired:
        return Verdict.ALLOW
    if alerts is not None:
        alerts.extend(fired)
    logger.debug("ids signatures %s fired on %s", fired, flow)
    return Verdict.DROP if ids.prevent else Verdict.ALLOW


# ------------------------------------------------------------------
# DPI
# ------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class DpiConfig:
    banned_labels: frozenset[str] = frozenset()
    # (addr, port) → content label; port 0 labels every port of the address
    directory: Mapping[tuple[int, int], str] = field(default_factory=dict)

    def label_of(self, flow: FlowMetadata) -> str | None:
        for key in ((flow.dst_addr, flow.dst_port), (flow.dst_addr, 0),
                    (flow.src_addr, flow.src_port), (flow.src_addr, 0)):
            label = self.directory.get(key)
            if label is not None:
                return label
        return None


def eval_dpi(dpi: DpiConfig, flow: FlowMetadata) -> Verdict:
    label = dpi.label_of(flow)
    return Verdict.DROP if label is not None and label in dpi.banned_labels else Verdict.ALLOW


# ------------------------------------------------------------------
# Instances
# ------------------------------------------------------------------

MiddleboxConfig = FirewallConfig | IdsConfig | DpiConfig

_KIND_OF_CONFIG = {FirewallConfig: MiddleboxKind.FIREWALL,
                   IdsConfig: MiddleboxKind.IDS,
                   DpiConfig: MiddleboxKind.DPI}


@dataclass(slots=True)
class StageOutcome:
    verdict: Verdict
    rule: FirewallRule | None = None
    alerts: tuple[str, ...] = ()


@dataclass(slots=True)
class Middlebox:
    """One deployed instance.  ``service`` is the name profiles refer to."""
    instance_id: str
    service: str
    config: MiddleboxConfig
    replica_of: str | None = None
    state: IdsState = field(default_factory=dict)
    failed: bool = False
    load: int = 0
    evaluations: int = 0

    @property
    def kind(self) -> MiddleboxKind:
        return _KIND_OF_CONFIG[type(self.config)]

    @property
    def stateful(self) -> bool:
        return isinstance(self.config, IdsConfig)

    def evaluate(self, flow: FlowMetadata, *, device_class: str | None, now: int) -> StageOutcome:
        self.evaluations += 1
        cfg = self.config
        if isinstance(cfg, FirewallConfig):
            matched: list[FirewallRule] = []
            verdict = eval_firewall(cfg, flow, device_class, matched)
            return StageOutcome(verdict, matched[0] if matched else None)
        if isinstance(cfg, IdsConfig):
            alerts: list[str] = []
            verdict = eval_ids(cfg, flow, self.state, now, alerts)
            return StageOutcome(verdict, alerts=tuple(alerts))
        return StageOutcome(eval_dpi(cfg, flow))
