"""Tests for middlebox evaluation, service chains and the port-scan detector."""

import sys, os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import random

import pytest

from helpers import ATTACKER, HOST, SERVER, make_flow
from securebox.chain import AssignmentRequest, MiddleboxManager, ServiceChain
from securebox.detector import PortScanDetector
from securebox.errors import InstanceUnavailable, NoInstance, NoReplica
from securebox.middlebox import (
    DpiConfig, FirewallConfig, FirewallRule, IdsConfig, Middlebox, MiddleboxKind, RateCondition,
    Signature, eval_dpi, eval_firewall, eval_ids,
)
from securebox.types import PROTO_TCP, MatchPattern, Verdict


def _ids(prevent=True):
    return IdsConfig((
        Signature("telnet", MatchPattern(protocol=PROTO_TCP, dst_port=23)),
        Signature("burst", MatchPattern(), RateCondition(count=2, window=5)),
    ), prevent=prevent)


# ── Firewall ─────────────────────────────────────────────────────────

def test_firewall_allowlist_wins_over_rules():
    fw = FirewallConfig(allowlist=frozenset({SERVER}),
                        rules=(FirewallRule(MatchPattern(), Verdict.DROP),))
    assert eval_firewall(fw, make_flow(HOST, SERVER)) is Verdict.ALLOW
    assert eval_firewall(fw, make_flow(ATTACKER, HOST)) is Verdict.DROP


def test_firewall_first_matching_rule_decides():
    fw = FirewallConfig(rules=(
        FirewallRule(MatchPattern(dst_port=23), Verdict.ALLOW),
        FirewallRule(MatchPattern(protocol=PROTO_TCP), Verdict.DROP),
    ))
    assert eval_firewall(fw, make_flow(dport=23)) is Verdict.ALLOW
    assert eval_firewall(fw, make_flow(dport=80)) is Verdict.DROP


def test_firewall_class_rules_only_apply_to_their_class():
    fw = FirewallConfig(rules=(FirewallRule(MatchPattern(), Verdict.DROP, device_class="cctv"),))
    assert eval_firewall(fw, make_flow(), "cctv") is Verdict.DROP
    assert eval_firewall(fw, make_flow(), "default") is Verdict.ALLOW


def test_firewall_instance_agrees_with_eval_firewall():
    cctv = FirewallRule(MatchPattern(), Verdict.DROP, device_class="cctv")
    telnet = FirewallRule(MatchPattern(dst_port=23), Verdict.ALLOW)
    fw = FirewallConfig(allowlist=frozenset({SERVER}), rules=(telnet, cctv))
    mb = Middlebox("fw-1", "fw", fw)
    cases = [(make_flow(HOST, SERVER), "cctv", None),
             (make_flow(HOST, ATTACKER, dport=23), "cctv", telnet),
             (make_flow(HOST, ATTACKER), "cctv", cctv),
             (make_flow(HOST, ATTACKER), "default", None)]
    for flow, cls, rule in cases:
        matched = []
        verdict = eval_firewall(fw, flow, cls, matched)
        outcome = mb.evaluate(flow, device_class=cls, now=0)
        assert outcome.verdict is verdict
        assert outcome.rule == rule
        assert matched == ([rule] if rule else [])


# ── IDS ──────────────────────────────────────────────────────────────

def test_ids_signature_drops():
    assert eval_ids(_ids(), make_flow(dport=23), {}, 0) is Verdict.DROP


def test_ids_rate_window():
    state = {}
    ids = _ids()
    verdicts = [eval_ids(ids, make_flow(dport=80), state, t) for t in (0, 1, 2)]
    assert verdicts == [Verdict.ALLOW, Verdict.ALLOW, Verdict.DROP]
    # the window has slid past the first two flows
    assert eval_ids(ids, make_flow(dport=80), state, 7) is Verdict.ALLOW


def test_ids_detect_only_alerts_without_dropping():
    alerts = []
    assert eval_ids(_ids(prevent=False), make_flow(dport=23), {}, 0, alerts) is Verdict.ALLOW
    assert alerts == ["telnet"]


# ── DPI ──────────────────────────────────────────────────────────────

def test_dpi_labels_by_address_and_port():
    dpi = DpiConfig(frozenset({"p2p"}), {(SERVER, 6881): "p2p", (ATTACKER, 0): "web"})
    assert eval_dpi(dpi, make_flow(HOST, SERVER, dport=6881)) is Verdict.DROP
    assert eval_dpi(dpi, make_flow(HOST, SERVER, dport=80)) is Verdict.ALLOW
    assert dpi.label_of(make_flow(ATTACKER, HOST)) == "web"


def test_dpi_port_zero_covers_every_port():
    dpi = DpiConfig(frozenset({"p2p"}), {(SERVER, 0): "p2p"})
    assert eval_dpi(dpi, make_flow(HOST, SERVER, dport=1234)) is Verdict.DROP
    assert eval_dpi(dpi, make_flow(SERVER, HOST, sport=5, dport=80)) is Verdict.DROP


# ── Chains ───────────────────────────────────────────────────────────

def _manager():
    return MiddleboxManager([
        Middlebox("fw-1", "fw", FirewallConfig(rules=(
            FirewallRule(MatchPattern(dst_port=445), Verdict.DROP),))),
        Middlebox("ids-1", "ids", _ids()),
        Middlebox("ids-1b", "ids", _ids(), replica_of="ids-1"),
        Middlebox("dpi-1", "dpi", DpiConfig()),
    ])


def test_chain_rejects_empty_and_duplicates():
    with pytest.raises(ValueError):
        ServiceChain(())
    with pytest.raises(ValueError):
        ServiceChain(("fw-1", "fw-1"))


def test_chain_short_circuits_on_drop():
    m = _manager()
    chain = ServiceChain(("fw-1", "ids-1", "dpi-1"))
    result = m.eval_chain(chain, make_flow(dport=445))
    assert result.verdict is Verdict.DROP
    assert result.deciding_instance == "fw-1"
    assert len(result.stages) == 1
    assert result.rule.pattern.dst_port == 445
    assert m.get("ids-1").evaluations == 0


def test_chain_full_session_visits_every_stage():
    m = _manager()
    chain = ServiceChain(("fw-1", "ids-1", "dpi-1"))
    result = m.eval_chain(chain, make_flow(dport=445), full_session=True)
    assert result.deciding_instance == "fw-1"
    assert [s.kind for s in result.stages] == [
        MiddleboxKind.FIREWALL, MiddleboxKind.IDS, MiddleboxKind.DPI]


def test_chain_allow_reports_last_stage():
    m = _manager()
    result = m.eval_chain(ServiceChain(("fw-1", "dpi-1")), make_flow(dport=80))
    assert result.verdict is Verdict.ALLOW
    assert result.deciding_instance == "dpi-1"
    assert result.rule is None


def test_balance_picks_least_loaded_then_lowest_id():
    m = MiddleboxManager([Middlebox("fw-2", "fw", FirewallConfig()),
                          Middlebox("fw-1", "fw", FirewallConfig())])
    picks = [m.assign_and_balance(AssignmentRequest("fw")) for _ in range(3)]
    assert picks == ["fw-1", "fw-2", "fw-1"]
    with pytest.raises(NoInstance):
        m.assign_and_balance(AssignmentRequest("dpi"))


def test_replicas_are_never_balanced_to():
    m = _manager()
    assert {m.assign_and_balance(AssignmentRequest("ids")) for _ in range(4)} == {"ids-1"}


def test_replica_must_match_primary():
    m = _manager()
    with pytest.raises(ValueError):
        m.add(Middlebox("fw-1b", "fw", FirewallConfig(), replica_of="fw-1"))
    with pytest.raises(ValueError):
        m.add(Middlebox("x-1b", "fw", FirewallConfig(), replica_of="nope"))


def test_replica_tracks_ids_state():
    m = _manager()
    chain = ServiceChain(("ids-1",))
    for t in (0, 1):
        m.eval_chain(chain, make_flow(dport=80), now=t)
    assert m.get("ids-1b").state == m.get("ids-1").state
    assert m.get("ids-1b").state is not m.get("ids-1").state


def test_fail_and_swap_preserves_rate_windows():
    m = _manager()
    chain = ServiceChain(("ids-1",))
    m.eval_chain(chain, make_flow(dport=80), now=0)
    m.eval_chain(chain, make_flow(dport=80), now=1)
    assert m.fail_and_swap("ids-1") == "ids-1b"
    # third flow in the window crosses the rate through the promoted replica
    result = m.eval_chain(chain, make_flow(dport=80), now=2)
    assert result.verdict is Verdict.DROP
    assert m.resolve("ids-1").instance_id == "ids-1b"


def test_fail_without_replica():
    m = _manager()
    with pytest.raises(NoReplica):
        m.fail_and_swap("fw-1")
    with pytest.raises(InstanceUnavailable):
        m.eval_chain(ServiceChain(("fw-1",)), make_flow())
    with pytest.raises(InstanceUnavailable):
        m.fail_and_swap("nope")


# ── Port-scan detector ───────────────────────────────────────────────

def test_detector_fires_at_threshold():
    d = PortScanDetector(threshold=3, window=10)
    for port in (1, 2):
        d.observe(ATTACKER, HOST, port, 0)
    assert d.detect(0) == []
    d.observe(ATTACKER, HOST, 3, 1)
    assert d.detect(1) == [ATTACKER]
    assert d.detected == {ATTACKER: 1}


def test_detector_counts_distinct_pairs_only():
    d = PortScanDetector(threshold=3, window=10)
    for t in range(5):
        d.observe(ATTACKER, HOST, 22, t)
    d.observe(ATTACKER, HOST, 23, 5)
    assert d.distinct_in_window(ATTACKER, 5) == 2
    assert d.detect(5) == []


def test_detector_window_is_inclusive_of_now_minus_window_plus_one():
    d = PortScanDetector(threshold=2, window=5)
    d.observe(ATTACKER, HOST, 1, 0)
    d.observe(ATTACKER, HOST, 2, 4)
    assert d.distinct_in_window(ATTACKER, 4) == 2
    assert d.distinct_in_window(ATTACKER, 5) == 1
    assert d.detect(5) == []


def test_detector_reports_once_and_sorted():
    d = PortScanDetector(threshold=1, window=5)
    d.observe(("b", 2), HOST, 1, 0)
    d.observe(("a", 1), HOST, 1, 0)
    assert d.detect(0) == [("a", 1), ("b", 2)]
    d.observe(("a", 1), HOST, 2, 1)
    assert d.detect(1) == []
    assert d.is_detected(("a", 1))


def test_detector_rejects_bad_parameters():
    with pytest.raises(ValueError):
        PortScanDetector(threshold=0)


def _first_crossing(contacts, threshold, window):
    """Brute force: first tick whose window (tick - window, tick] holds enough distinct pairs."""
    for now in sorted({t for t, _, _ in contacts}):
        pairs = {(dst, port) for t, dst, port in contacts if now - window < t <= now}
        if len(pairs) >= threshold:
            return now
    return None


def test_detector_matches_sliding_window_oracle_for_a_swarm():
    rng = random.Random("swarm")
    threshold, window, duration = 10, 50, 400
    zombies = [ATTACKER + z for z in range(15)]
    activity = {z: rng.uniform(0.02, 0.6) for z in zombies}
    pool = {z: rng.randint(8, 40) for z in zombies}
    contacts = {z: [] for z in zombies}
    d = PortScanDetector(threshold, window)
    reported = {}
    for now in range(duration):
        for z in zombies:
            for _ in range(rng.randint(1, 3) if rng.random() < activity[z] else 0):
                dst, port = HOST + rng.randint(0, 2), rng.randint(1, pool[z])
                contacts[z].append((now, dst, port))
                d.observe(z, dst, port, now)
        for z in d.detect(now):
            reported[z] = now

    expected = {z: t for z in zombies
                if (t := _first_crossing(contacts[z], threshold, window)) is not None}
    assert reported == expected
    assert d.detected == expected
    assert expected
