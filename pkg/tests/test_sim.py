"""Tests for the discrete-event simulator, traffic generators and failure injection."""

import sys, os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dataclasses import replace

import pytest

from securebox.cloud import Role
from securebox.config import FailureSpec
from securebox.metrics import COLUMNS, render_csv
from securebox.sim import (
    EventQueue, SimEventKind, Simulation, replay_check, run_scenario, simulate,
)
from securebox.traffic import TrafficMix, ZombieSwarm, diurnal_levels
from securebox.types import Issuer, Verdict


@pytest.fixture(scope="module")
def short_canonical(canonical):
    return replace(canonical, duration=300, failures=())


@pytest.fixture(scope="module")
def short_run(short_canonical):
    return simulate(short_canonical)


@pytest.fixture(scope="module")
def home_run(home):
    return simulate(home)


def _with_failures(cfg, *failures):
    return cfg.with_overrides(failures=tuple(FailureSpec(*f) for f in failures))


# ── Event queue ──────────────────────────────────────────────────────

def test_queue_orders_by_tick_then_insertion():
    q = EventQueue()
    q.push(2, SimEventKind.FLOW_ARRIVAL, "c")
    q.push(1, SimEventKind.DELIVER, "a")
    q.push(2, SimEventKind.HOUSEKEEPING, "d")
    q.push(1, SimEventKind.TIMER_FIRE, "b")
    assert q.next_tick() == 1
    assert [q.pop().payload for _ in range(len(q))] == ["a", "b", "c", "d"]
    assert q.next_tick() is None


def test_simulation_runs_once(home):
    sim = Simulation(replace(home, duration=5, failures=()))
    sim.run()
    with pytest.raises(RuntimeError):
        sim.run()


# ── Traffic ──────────────────────────────────────────────────────────

def test_diurnal_levels_shape():
    levels = diurnal_levels(400, 0.1)
    assert levels[0] == pytest.approx(0.1)
    assert levels[200] == pytest.approx(1.0)
    assert diurnal_levels(0) == []


def test_traffic_is_reproducible(short_canonical):
    a, b = TrafficMix(short_canonical), TrafficMix(short_canonical)
    for tick in range(20):
        assert a.flows_at(tick) == b.flows_at(tick)


def test_zombies_scan_distinct_ports_per_segment(short_canonical):
    swarm = ZombieSwarm(short_canonical)
    assert len(swarm.addresses) == 15
    assert all(1 <= r <= 5 for r in swarm.rates)
    seen: dict[tuple[int, int], list[int]] = {}
    for tick in range(150):
        for g in swarm.flows_at(tick):
            assert g.attack and g.inbound
            seen.setdefault((g.flow.src_addr, g.segment), []).append(g.flow.dst_port)
    for ports in seen.values():
        assert len(ports) == len(set(ports))
    assert {seg for _, seg in seen} == {0, 1}


# ── Conservation and determinism ─────────────────────────────────────

def test_every_flow_is_counted_once(short_run):
    rows = list(short_run.metrics.rows())
    assert list(rows[0]) == list(COLUMNS)
    for row in rows:
        for prefix in ("attack", "benign"):
            assert row[f"{prefix}_received"] == sum(
                row[f"{prefix}_{o}"] for o in ("analyzed", "dropped", "allowed"))
    assert sum(r["attack_received"] + r["benign_received"] for r in rows) == len(short_run.trace)


def test_parked_flows_are_all_released(short_run):
    horizon = short_run.config.duration - short_run.config.response_timeout
    for record in short_run.trace:
        if record.tick < horizon:
            assert record.verdict is not None
            assert record.released_at - record.tick <= short_run.config.response_timeout


def test_css_requests_are_cumulative(short_run):
    per_segment: dict[str, list[int]] = {}
    for row in short_run.metrics.rows():
        per_segment.setdefault(row["segment"], []).append(row["css_requests"])
    for counts in per_segment.values():
        assert counts == sorted(counts)


def test_same_seed_same_csv(short_canonical, short_run):
    assert simulate(short_canonical).csv == short_run.csv


def test_different_seed_different_csv(short_canonical, short_run):
    assert simulate(short_canonical.with_overrides(seed=2)).csv != short_run.csv


def test_replay_check_home(home):
    assert replay_check(home)


def test_run_scenario_returns_the_series(home):
    cfg = replace(home, failures=())
    assert render_csv(run_scenario(cfg)) == simulate(cfg).csv


def test_no_attackers_no_attack_traffic(short_canonical):
    quiet = replace(short_canonical, duration=120,
                    attack=replace(short_canonical.attack, count=0))
    result = simulate(quiet)
    assert all(r["attack_received"] == 0 for r in result.metrics.rows())


# ── Home scenario ────────────────────────────────────────────────────

def test_home_flow_outcomes(home_run):
    got = [(r.tick, r.outcome, r.verdict, r.released_at) for r in home_run.trace]
    assert got == [
        (1, "analyzed", Verdict.DROP, 3),       # camera to an unknown host: class rule
        (2, "analyzed", Verdict.ALLOW, 4),      # camera to a vendor server
        (3, "dropped", Verdict.DROP, 3),        # manual policy
        (4, "dropped", Verdict.DROP, 4),        # basic telnet policy
        (12, "dropped", Verdict.DROP, 12),      # generalised class rule, cached
        (30, "allowed", Verdict.ALLOW, 30),     # link down: outbound default
        (45, "analyzed", Verdict.ALLOW, 47),
    ]


def test_home_class_rules_arrive_in_bundle(home_run):
    bundles = [e for e in home_run.emissions if e.tier.name == "BUNDLED" and 0 < e.tick < 5]
    assert bundles
    box = home_run.boxes[0]
    assert len(box.db.policies()) >= 5


def test_home_rogue_update_rejected(home_run):
    box = home_run.boxes[0]
    assert box.db.get(Issuer.CSS, 0xFFFF_FFFF) is None
    assert [r["source"] for r in home_run.cloud.rogue_reports] == ["rogue-node"]
    assert any(r["record"] == "rogue" for r in home_run.analytics)


def test_home_failover_and_hot_swap(home_run):
    assert home_run.failovers == 1
    assert home_run.cloud.role is Role.PRIMARY
    assert home_run.cloud.manager.resolve("ids-1").instance_id == "ids-1b"


def test_reboot_reasks_parked_flow(home):
    result = simulate(_with_failures(home, (46, "reboot", "home")))
    last = result.trace[-1]
    assert last.tick == 45
    assert last.verdict is Verdict.ALLOW
    assert last.released_at == 48
    assert len(result.trace) == 7


def test_replay_attack_blacklists_box(home):
    result = simulate(_with_failures(home, (10, "replay", "home")))
    assert result.cloud.blacklist == {1}
    assert not any(e.box_id == 1 and e.tick > 11 for e in result.emissions)
    late = [r for r in result.trace if r.tick == 45][0]
    assert late.outcome == "analyzed"
    assert late.released_at == 45 + home.response_timeout


def test_revocation_blacklists_box(home):
    result = simulate(_with_failures(home, (10, "revoke", "home")))
    assert result.cloud.blacklist == {1}
    assert result.cloud.blacklist_events[0].reason == "certificate revoked"


def test_failover_keeps_home_csv(home):
    plain = simulate(_with_failures(home))
    failed = simulate(_with_failures(home, (60, "cloud-manager")))
    assert failed.failovers == 1
    assert failed.csv == plain.csv
