import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgecloud import cloudqrm as cq
from edgecloud import geometry as geo
from edgecloud import netsim as ns
from edgecloud import tracker as tk
from edgecloud.edgenode import EdgeReport
from edgecloud.modes import CAUSE_LEVEL, Cause, mode_for
from edgecloud.perception import (Detection, IdentityVerdict, Subject, WatchlistEntry,
                                  latent_from_seed)


def square(x0, y0, size, kind=geo.CAMERA_FOV):
    return geo.PerimeterPolygon(((x0, y0), (x0 + size, y0), (x0 + size, y0 + size), (x0, y0 + size)),
                                kind)


CAM1 = cq.CameraInfo("cam1", square(0, 0, 10), (5.0, -2.0))
CAM2 = cq.CameraInfo("cam2", square(20, 0, 10), (25.0, -2.0))
SECURED = square(4, 4, 2, geo.SECURED_AREA)


def confirmed(x, y, vx=0.0, vy=0.0, var=0.01, t=0.0, tid=1, identity=None):
    tr = tk.Track(tid, np.array([x, y, vx, vy], float), np.diag([var, var, 1e-12, 1e-12]), t,
                  status=tk.CONFIRMED, hits=3)
    tr.identity = identity
    return tr


QUIET = tk.TrackerConfig(accel_noise=0.0)


def kinds(events):
    return sorted((e.kind.value, e.camera_ids) for e in events)


def test_no_tracks_no_events():
    assert cq.evaluate([], [CAM1, CAM2], [SECURED], 0.0) == []


def test_centroid_of_secured_polygon_breaks_perimeter():
    cx, cy = SECURED.centroid()
    ev = cq.evaluate([confirmed(cx, cy)], [CAM1, CAM2], [SECURED], 0.0, QUIET)
    assert ("broken_perimeter", ("cam1",)) in kinds(ev)
    assert ("detection", ("cam1",)) in kinds(ev)


def test_predicted_entry_handoff():
    # 0.5 m left of cam2, moving right at 3 m/s, 95% radius 0.3 m
    var = (0.3 / np.sqrt(tk.CHI2_2DOF_95)) ** 2
    ev = cq.evaluate([confirmed(19.5, 5.0, 3.0, 0.0, var)], [CAM1, CAM2], [], 0.0, QUIET)
    assert kinds(ev) == [("predicted_entry", ("cam2",))]
    slow = cq.evaluate([confirmed(19.5, 5.0, 0.5, 0.0, var)], [CAM1, CAM2], [], 0.0, QUIET)
    assert slow == []


def test_possible_intrusion_forward_looking():
    ev = cq.evaluate([confirmed(3.8, 5.0, 2.0, 0.0)], [CAM1], [SECURED], 0.0, QUIET)
    assert ("possible_intrusion", ("cam1",)) in kinds(ev)
    assert all(e.kind != Cause.BROKEN_PERIMETER for e in ev)


def test_confirmed_intrusion_requires_bad_identity():
    unknown = IdentityVerdict(None, False, 40, 0.0)
    intruder = IdentityVerdict("bad", False, 40, 0.9)
    operator = IdentityVerdict("op1", True, 40, 0.9)
    for v, expect in [(unknown, True), (intruder, True), (operator, False), (None, False)]:
        ev = cq.evaluate([confirmed(1, 1, identity=v)], [CAM1], [], 0.0, QUIET)
        assert (("confirmed_intrusion", ("cam1",)) in kinds(ev)) == expect


def test_tentative_tracks_are_ignored():
    t = confirmed(5, 5)
    t.status = tk.TENTATIVE
    assert cq.evaluate([t], [CAM1], [SECURED], 0.0) == []


def test_every_level2_event_has_track_id():
    cx, cy = SECURED.centroid()
    ev = cq.evaluate([confirmed(cx, cy, identity=IdentityVerdict(None, False, 40, 0.0))],
                     [CAM1], [SECURED], 0.0, QUIET)
    assert all(e.track_id is not None for e in ev if CAUSE_LEVEL[e.kind] == 2)


# -- mode controller ------------------------------------------------------------------

def ev(kind, cam="cam1", t=0.0):
    return cq.SurveillanceEvent(kind, 1, (cam,), t)


def test_detection_from_mode0():
    mc = cq.ModeController({"cam1": 0})
    [c] = mc.decide([ev(Cause.DETECTION)], 0.0)
    assert (c.target_level, c.cause) == (1, Cause.DETECTION)


def test_max_rule():
    mc = cq.ModeController({"cam1": 0})
    [c] = mc.decide([ev(Cause.DETECTION), ev(Cause.BROKEN_PERIMETER)], 0.0)
    assert (c.target_level, c.cause) == (2, Cause.BROKEN_PERIMETER)


def test_dwell_timer_downgrade():
    mc = cq.ModeController({"cam1": 0})
    mc.decide([ev(Cause.DETECTION)], 0.0)
    t = 500.0
    assert mc.decide([ev(Cause.DETECTION)], t) == []
    assert mc.decide([], t + 1999) == []
    [c] = mc.decide([], t + 2000)
    assert (c.target_level, c.cause) == (0, Cause.NOTHING_RELEVANT)


def test_staged_downgrade_keeps_level1_while_detected():
    mc = cq.ModeController({"cam1": 0})
    mc.decide([ev(Cause.DETECTION), ev(Cause.BROKEN_PERIMETER)], 0.0)
    assert mc.decide([ev(Cause.DETECTION)], 1000.0) == []
    [c] = mc.decide([ev(Cause.DETECTION)], 2000.0)
    assert (c.target_level, c.cause) == (1, Cause.DETECTION)


def test_handoff_flag():
    assert cq.ModeController({"cam1": 0}).decide([ev(Cause.PREDICTED_ENTRY)], 0)[0].target_level == 1
    mc = cq.ModeController({"cam1": 0}, cq.QRMConfig(handoff_escalates_to_2=True))
    assert mc.decide([ev(Cause.PREDICTED_ENTRY)], 0)[0].target_level == 2


def test_replay_is_idempotent():
    mc = cq.ModeController({"cam1": 0, "cam2": 0})
    events = [ev(Cause.DETECTION), ev(Cause.PREDICTED_ENTRY, "cam2")]
    assert len(mc.decide(events, 0.0)) == 2
    assert mc.decide(events, 0.0) == []
    assert mc.decide(events, 100.0) == []


EVENT_KINDS = [c for c in Cause if c is not Cause.NOTHING_RELEVANT]


def expected_level(kinds_, handoff=False):
    levels = [2 if (k is Cause.PREDICTED_ENTRY and handoff) else CAUSE_LEVEL[k] for k in kinds_]
    return max(levels, default=0)


@pytest.mark.parametrize("handoff", [False, True])
def test_state_machine_exhaustive(handoff):
    """Every (current mode, event set) pair, including the dwell-timer downgrade."""
    cfg = cq.QRMConfig(handoff_escalates_to_2=handoff)
    seen = set()
    for current in range(3):
        for r in range(len(EVENT_KINDS) + 1):
            for subset in itertools.combinations(EVENT_KINDS, r):
                mc = cq.ModeController({"cam1": current}, cfg)
                events = [ev(k) for k in subset]
                want = expected_level(subset, handoff)
                cmds = mc.decide(events, 0.0)
                after = max(want, current)
                if want > current:
                    assert [c.target_level for c in cmds] == [want]
                    assert CAUSE_LEVEL[cmds[0].cause] <= want
                else:
                    assert cmds == []
                seen.add((current, after))
                # events end: held until the dwell expires, then straight to level 0
                assert mc.decide([], 1999.0) == []
                cmds = mc.decide([], 2000.0)
                if after > 0:
                    assert [(c.target_level, c.cause) for c in cmds] == [(0, Cause.NOTHING_RELEVANT)]
                    seen.add((after, 0))
                else:
                    assert cmds == []
                # a set that stays active settles on its own level once the start-up
                # hold of the initial mode has expired, and then stays there
                steady = cq.ModeController({"cam1": current}, cfg)
                steady.decide(events, 0.0)
                steady.decide(events, 5000.0)
                assert steady.current["cam1"] == want
                assert steady.decide(events, 9000.0) == []
    # every upgrade and every downgrade-to-0 transition was exercised
    assert {(0, 1), (0, 2), (1, 2), (1, 0), (2, 0)} <= {s for s in seen if s[0] != s[1]}


def test_level2_to_level1_transition_covered():
    mc = cq.ModeController({"cam1": 2})
    mc.decide([ev(Cause.DETECTION)], 0.0)
    [c] = mc.decide([ev(Cause.DETECTION)], 2000.0)
    assert (c.target_level, c.cause) == (1, Cause.DETECTION)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.sampled_from(EVENT_KINDS), max_size=3), min_size=1, max_size=60))
def test_monotone_escalation(script):
    mc = cq.ModeController({"cam1": 0})
    for k, kinds_ in enumerate(script):
        mc.decide([ev(x) for x in kinds_], 100.0 * k)
        assert mc.current["cam1"] >= expected_level(kinds_)


# -- identity ---------------------------------------------------------------------------

WATCH = [WatchlistEntry("op1", True, latent_from_seed(1)),
         WatchlistEntry("bad", False, latent_from_seed(2))]
CAM_AT_ORIGIN = cq.CameraInfo("cam1", square(-5, -5, 10), (0.0, 0.0))


def test_identity_mode2_two_metres():
    rng = np.random.default_rng(3)
    subj = Subject("op1", latent_from_seed(1))
    ok = sum(1 for _ in range(10_000)
             if (v := cq.identity_gate(subj, CAM_AT_ORIGIN, 2, (2.0, 0.0), WATCH, rng)) is not None
             and v.subject_id == "op1" and v.authorized)
    assert ok / 10_000 >= 1 - 1e-4 - 1e-4  # one failure allowed in the sample


def test_identity_mode0_two_metres_stays_pending_on_failure():
    rng = np.random.default_rng(4)
    subj = Subject("op1", latent_from_seed(1))
    results = [cq.identity_gate(subj, CAM_AT_ORIGIN, 0, (2.0, 0.0), WATCH, rng) for _ in range(2000)]
    assert all(r is None or r.subject_id == "op1" for r in results)
    assert any(r is None for r in results)


def test_identity_unknown_subject():
    rng = np.random.default_rng(5)
    v = cq.identity_gate(Subject("stranger", latent_from_seed(9)), CAM_AT_ORIGIN, 2, (2.0, 0.0),
                         WATCH, rng)
    assert v.unknown and not v.authorized


def test_identity_far_away_is_pending():
    rng = np.random.default_rng(6)
    v = cq.identity_gate(Subject("stranger", latent_from_seed(9)), CAM_AT_ORIGIN, 2, (30.0, 0.0),
                         WATCH, rng)
    assert v is None


# -- bandwidth report -----------------------------------------------------------------

def pinned_log(levels, seconds):
    n = ns.Network(ns.LinkConfig(capacity_mbps=1000))
    sends = []
    for cam, lvl in levels.items():
        m = mode_for(lvl)
        sends += [(Fraction(1000 * k, m.fps), cam, m.chunk_bytes) for k in range(seconds * m.fps)]
    for t, cam, size in sorted(sends):
        n.send(ns.VIDEO_CHUNK, cam, ns.CLOUD, size, t)
        n.send(ns.EDGE_REPORT, cam, ns.CLOUD, 48, t)
    n.drain()
    return n.log


def test_reduction_pinned_mode2_is_zero():
    r = cq.bandwidth_report(pinned_log({"cam1": 2}, 10), ["cam1"], 10_000)
    assert r.reduction == 0


def test_reduction_pinned_mode0():
    r = cq.bandwidth_report(pinned_log({"cam1": 0}, 10), ["cam1"], 10_000)
    assert r.reduction == 1 - Fraction(41, 840)
    assert round(r.reduction_pct, 2) == 95.12


def brute_force_reduction(log, n_nodes, duration_ms):
    used = 0
    for m in log:
        if m.kind == "VideoChunk":
            used += m.size_bytes
    base = n_nodes * duration_ms * 8_400_000 // 1000
    return Fraction(base - used, base)


def test_reduction_matches_brute_force_and_dwell_formula():
    log = pinned_log({"a": 0, "b": 1, "c": 2}, 10)
    r = cq.bandwidth_report(log, ["a", "b", "c"], 10_000)
    assert r.reduction == brute_force_reduction(log, 3, 10_000)
    dwell = {"a": {0: Fraction(10_000)}, "b": {1: Fraction(10_000)}, "c": {2: Fraction(10_000)}}
    assert cq.analytic_reduction(dwell, 10_000) == r.reduction


def test_bandwidth_csv_summary():
    r = cq.bandwidth_report(pinned_log({"cam1": 0}, 1), ["cam1"], 1000)
    lines = cq.bandwidth_csv(r).splitlines()
    assert lines[0] == "bin_start_ms,cam1_MBps,total_MBps"
    assert lines[-2] == "# total_MB,baseline_MB,reduction_pct"
    assert lines[-1] == "# 0.410000,8.400000,95.1190"


# -- coordinator ----------------------------------------------------------------------------

def report(cam, t, points, level=1, warm=False, actor="a1"):
    dets = tuple(Detection(cam, (0, 0, 1, 1), 1.0, latent_from_seed(7), p, t, actor, True)
                 for p in points)
    return EdgeReport(cam, Fraction(t), dets, "person_detected" if dets else "none", level, warm)


def deliver(cloud, rep):
    cloud.receive(ns.Message(ns.EDGE_REPORT, rep.camera_id, ns.CLOUD, 48, Fraction(rep.timestamp_ms),
                             payload=rep))


def test_coordinator_detection_then_breach():
    cloud = cq.CloudCoordinator([CAM1, CAM2], [SECURED])
    cmds = []
    for k in range(5):
        deliver(cloud, report("cam1", 100 * k, [(1.0, 5.0)]))
        cmds += cloud.cycle(100 * k + 50)
    assert [(c.camera_id, c.target_level, c.cause) for c in cmds] == [("cam1", 1, Cause.DETECTION)]
    for k in range(5, 8):
        deliver(cloud, report("cam1", 100 * k, [(5.0, 5.0)]))
        cmds += cloud.cycle(100 * k + 50)
    assert cmds[-1].target_level == 2 and cmds[-1].cause == Cause.BROKEN_PERIMETER
    assert cq.command_log_csv(cloud.command_log).splitlines()[1].startswith("250.000000,cam1,0,1,")


def test_coordinator_warm_up_reports_do_not_count_misses():
    cloud = cq.CloudCoordinator([CAM1], [])
    deliver(cloud, report("cam1", 0, [(1.0, 5.0)]))
    cloud.cycle(50)
    for k in range(1, 60):
        deliver(cloud, report("cam1", 100 * k, [], warm=True))
        cloud.cycle(100 * k + 50)
    assert cloud.tracker.tracks and cloud.tracker.tracks[0].misses == 0


def test_coordinator_reports_processed_in_timestamp_order():
    cloud = cq.CloudCoordinator([CAM1, CAM2], [])
    deliver(cloud, report("cam2", 40, [(21.0, 5.0)]))
    deliver(cloud, report("cam1", 40, [(1.0, 5.0)]))
    deliver(cloud, report("cam1", 10, [(1.0, 5.0)]))
    cloud.cycle(100)
    # cam1@10 spawns track 1, cam1@40 updates it, cam2@40 spawns track 2
    assert [(t.track_id, t.hits) for t in cloud.tracker.tracks] == [(1, 2), (2, 1)]
