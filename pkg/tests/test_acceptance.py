"""End-to-end acceptance checks against the canonical scenario and micro-scenario oracles."""

import sys, os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import random
from collections import Counter

import pytest

from helpers import ATTACKER, HOST, make_flow, pump
from oracles import micro_oracle, micro_scenario
from securebox.config import FailureSpec, load_config
from securebox.errors import BlacklistedBox
from securebox.gateway import CloudPending
from securebox.metrics import fractions
from securebox.sim import replay_check, simulate
from securebox.trust import KeyPair
from securebox.types import (
    FLAG_INBOUND, AnalysisRequest, Issuer, MatchPattern, PolicyUpdate, Priority,
    SecurityPolicy, UpdateTier, Verdict,
)
from securebox.wire import MessageType, encode_frame, encode_request, encode_update

SWEEP_SEEDS = range(1, 11)


@pytest.fixture(scope="module")
def collab_run(canonical):
    return simulate(canonical)


@pytest.fixture(scope="module")
def solo_run(canonical):
    return simulate(canonical.with_overrides(collaboration=False))


def _summary(result):
    return fractions(list(result.metrics.rows()))


# ── Collaborative mitigation ─────────────────────────────────────────

def test_last_segment_drops_locally(collab_run):
    seg3 = _summary(collab_run)["segment-3"]
    assert seg3.attack_received > 0
    assert seg3.dropped_fraction > 0.90
    assert seg3.analyzed_fraction < 0.10


def test_without_collaboration_every_segment_relearns(collab_run, solo_run):
    first = _summary(collab_run)["segment-1"].attack_analyzed
    for name, summary in _summary(solo_run).items():
        assert summary.attack_analyzed == pytest.approx(first, rel=0.05), name
    assert solo_run.cloud.requests_handled > collab_run.cloud.requests_handled


def test_collaboration_lowers_css_load(collab_run, solo_run):
    collab = sum(s.attack_analyzed for s in _summary(collab_run).values())
    solo = sum(s.attack_analyzed for s in _summary(solo_run).values())
    assert collab < solo


def _zombie_outcomes(result, segment):
    by_zombie: dict[int, list[tuple[int, str]]] = {}
    for r in result.trace:
        if r.segment == segment and r.attack:
            by_zombie.setdefault(r.flow.src_addr, []).append((r.tick, r.outcome))
    return by_zombie


def test_first_segment_local_drops_only_grow(collab_run):
    by_zombie = _zombie_outcomes(collab_run, 0)
    assert len(by_zombie) == collab_run.config.attack.count
    for addr, outcomes in by_zombie.items():
        kinds = [o for _, o in outcomes]
        assert "dropped" in kinds, addr
        first = kinds.index("dropped")
        assert set(kinds[:first]) == {"analyzed"}, addr
        assert set(kinds[first:]) == {"dropped"}, addr

    # fraction of zombies whose latest flow so far was dropped locally
    last_tick = max(t for outcomes in by_zombie.values() for t, _ in outcomes)
    latest: dict[int, str] = {}
    events = sorted((t, addr, o) for addr, outcomes in by_zombie.items() for t, o in outcomes)
    frac, i = [], 0
    for tick in range(last_tick + 1):
        while i < len(events) and events[i][0] <= tick:
            latest[events[i][1]] = events[i][2]
            i += 1
        frac.append(sum(o == "dropped" for o in latest.values()) / len(by_zombie))
    assert frac[0] == 0.0
    assert all(a <= b for a, b in zip(frac, frac[1:]))
    assert frac[-1] == 1.0
    onset = next(r for r in collab_run.metrics.rows()
                 if r["segment"] == "segment-1" and r["tick"] == 0)
    assert onset["attack_dropped"] == 0


def test_detected_sources_never_reach_the_css_again(collab_run):
    assert len(collab_run.cloud.detections) == collab_run.config.attack.count
    delay = collab_run.config.link_delay
    for tick, addr, scope in collab_run.cloud.detections:
        assert scope is None
        late = [r for r in collab_run.trace if r.flow.src_addr == addr and r.tick > tick + delay]
        assert late
        assert {r.outcome for r in late} == {"dropped"}
        assert all(r.verdict is Verdict.DROP for r in late)


def test_boxes_hold_every_drop_after_the_run(collab_run):
    cloud = collab_run.cloud
    for box in collab_run.boxes:
        held = {p.policy_id for p in box.db.policies() if p.issuer is Issuer.CSS}
        assert held <= cloud.sent[box.box_id]
        drops = {p.policy_id for p in cloud.visible_policies(box.box_id)
                 if p.priority is Priority.HIGH}
        assert len(drops) == collab_run.config.attack.count
        assert drops <= held


# ── Update protocol ──────────────────────────────────────────────────

def _resends(result):
    sent = Counter((e.box_id, pid) for e in result.emissions for pid in e.policy_ids)
    return [k for k, n in sent.items() if n > 1]


def test_no_policy_sent_twice(collab_run, solo_run):
    assert _resends(collab_run) == []
    assert _resends(solo_run) == []


def test_cached_flows_cost_no_messages(make_box, cloud):
    box = make_box(1, cloud)
    pump(box, cloud, now=0)
    first = box.process_flow(make_flow(ATTACKER, HOST, 40000, 80), now=1, inbound=True)
    assert isinstance(first, CloudPending)
    pump(box, cloud, now=1)
    sent = box.messages_sent
    rng = random.Random("replay")
    for i in range(1000):
        flow = make_flow(ATTACKER, HOST, rng.randint(1024, 65535), 80)
        assert box.process_flow(flow, now=2 + i, inbound=True) is Verdict.ALLOW
    assert box.drain_outbox() == []
    assert box.messages_sent == sent


# ── Security gate ────────────────────────────────────────────────────

def test_foreign_signed_updates_all_rejected(make_box, cloud):
    box = make_box(1, cloud)
    pump(box, cloud, now=0)
    before = box.db.size
    for i in range(100):
        rogue = KeyPair.generate(random.Random(f"rogue:{i}"))
        bait = SecurityPolicy(1000 + i, MatchPattern(src_addr=ATTACKER), Verdict.ALLOW,
                              Priority.HIGH, Issuer.CSS, i)
        update = PolicyUpdate(1, 100 + i, UpdateTier.HIGH, (bait,))
        frame = encode_frame(MessageType.UPDATE, encode_update(update), rogue.sign)
        assert box.receive(frame, now=1 + i, source=f"node-{i}") is None
    assert box.db.size == before
    pump(box, cloud, now=200)
    assert len(cloud.rogue_reports) == 100


def test_repeat_offender_gets_nothing_more(make_box, cloud):
    box = make_box(1, cloud)
    pump(box, cloud, now=0)
    flow = make_flow(ATTACKER, HOST, 4444, 4444)
    for i in range(6):
        req = AnalysisRequest(1, 1000 + i, flow, FLAG_INBOUND)
        cloud.receive_frame(1, encode_frame(MessageType.REQUEST, encode_request(req),
                                            box.keypair.sign), now=i)
    assert cloud.blacklist == {1}
    assert [b for b, _ in cloud.drain_outbox()] == []
    req = AnalysisRequest(1, 2000, make_flow(ATTACKER, HOST, 4444, 23), FLAG_INBOUND)
    with pytest.raises(BlacklistedBox):
        cloud.receive_frame(1, encode_frame(MessageType.REQUEST, encode_request(req),
                                            box.keypair.sign), now=10)
    for t in range(10, 60):
        cloud.on_tick(t)
    assert cloud.drain_outbox() == []
    assert not any(e.box_id == 1 and e.tick >= 5 for e in cloud.emission_log)


# ── Failover and determinism ─────────────────────────────────────────

def test_manager_failover_is_invisible(canonical, collab_run):
    failed = simulate(canonical.with_overrides(
        failures=(FailureSpec(canonical.duration // 2, "cloud-manager"),)))
    assert failed.failovers == 1
    assert failed.csv == collab_run.csv


def test_replay_check_canonical(canonical):
    assert replay_check(canonical)


def test_replay_check_home(home):
    assert replay_check(home)


# ── Micro-scenario oracle ────────────────────────────────────────────

@pytest.mark.parametrize("seed", range(200))
def test_micro_scenario_matches_oracle(seed):
    doc = micro_scenario(seed)
    result = simulate(load_config(doc))
    assert [r.verdict for r in result.trace] == micro_oracle(doc)


# ── Seed sweep and runtime ───────────────────────────────────────────

@pytest.mark.slow
@pytest.mark.parametrize("seed", SWEEP_SEEDS)
def test_seed_sweep(canonical, seed):
    collab = simulate(canonical.with_overrides(seed=seed))
    seg3 = _summary(collab)["segment-3"]
    assert seg3.dropped_fraction > 0.87
    assert seg3.analyzed_fraction < 0.13
    assert _resends(collab) == []
    solo = simulate(canonical.with_overrides(seed=seed, collaboration=False))
    assert _resends(solo) == []
    assert sum(s.attack_analyzed for s in _summary(collab).values()) < \
        sum(s.attack_analyzed for s in _summary(solo).values())


def test_canonical_runtime(benchmark, canonical):
    result = benchmark.pedantic(simulate, args=(canonical,), rounds=1, iterations=1)
    assert len(result.trace) > 0
