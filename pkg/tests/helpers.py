"""Builders shared by the test modules."""

import ipaddress
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from securebox.chain import MiddleboxManager
from securebox.cloud import CloudService
from securebox.gateway import Securebox
from securebox.middlebox import FirewallConfig, FirewallRule, IdsConfig, Middlebox, Signature
from securebox.types import (
    PROTO_TCP, FlowMetadata, MatchPattern, UserProfile, Verdict, ip_to_int,
)

HOST = ip_to_int("10.0.1.1")
CAMERA = ip_to_int("10.0.1.2")
ATTACKER = ip_to_int("198.51.100.1")
SERVER = ip_to_int("192.0.2.1")
NETWORK = ipaddress.IPv4Network("10.0.1.0/24")


def make_flow(src=ATTACKER, dst=HOST, sport=40000, dport=80, proto=PROTO_TCP, device=1):
    return FlowMetadata(src, dst, sport, dport, proto, device)


def make_manager() -> MiddleboxManager:
    """fw (allowlists SERVER, drops every cctv flow) and ids (telnet signature)."""
    return MiddleboxManager([
        Middlebox("fw-1", "fw", FirewallConfig(
            allowlist=frozenset({SERVER}),
            rules=(FirewallRule(MatchPattern(), Verdict.DROP, device_class="cctv"),),
        )),
        Middlebox("ids-1", "ids", IdsConfig((
            Signature("telnet", MatchPattern(protocol=PROTO_TCP, dst_port=23)),
        ))),
    ])


def make_profile(box_id: int = 1, **kw) -> UserProfile:
    """Device 2 is a cctv camera; everything else is default class."""
    defaults = dict(
        box_id=box_id,
        local_network=NETWORK,
        class_map={2: "cctv"},
        chains={"default": ("fw", "ids"), "cctv": ("fw",)},
    )
    defaults.update(kw)
    return UserProfile(**defaults)


def pump(box: Securebox, cloud: CloudService, *, now: int) -> None:
    """Deliver everything queued on both sides, box first, until quiet."""
    while True:
        up = box.drain_outbox()
        for frame in up:
            cloud.receive_frame(box.box_id, frame, now=now)
        down = [f for b, f in cloud.drain_outbox() if b == box.box_id]
        for frame in down:
            box.receive(frame, now=now)
        if not up and not down:
            return
