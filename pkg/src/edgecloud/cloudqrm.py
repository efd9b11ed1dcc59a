"""Cloud coordinator: fuses edge reports into ground-plane tracks, derives
surveillance events, and drives each camera's operating mode."""
from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import geometry as geo
from . import netsim as ns
from . import tracker as tk
from .errors import UnknownCamera
from .modes import RESOLUTIONS, Cause, ReconfigCommand, cause_level, mode_for
from .perception import (IdentityVerdict, PerceptionConfig, Subject, WatchlistEntry,
                         face_pixels_for, fnr_at, identify_face)

COMMAND_LOG_HEADER = ["timestamp_ms", "camera_id", "from_level", "to_level", "cause"]

# which cause names a level when several events of that level are active
_CAUSE_PRIORITY = [Cause.BROKEN_PERIMETER, Cause.CONFIRMED_INTRUSION, Cause.DETECTION,
                   Cause.PREDICTED_ENTRY, Cause.POSSIBLE_INTRUSION, Cause.NOTHING_RELEVANT]


@dataclass(frozen=True)
class CameraInfo:
    camera_id: str
    fov: geo.PerimeterPolygon
    position: tuple[float, float]   # mast foot on the ground plane, for face distance
    initial_level: int = 0


@dataclass(frozen=True)
class QRMConfig:
    cycle_ms: int = 100
    cooldown_ms: int = 2000
    handoff_escalates_to_2: bool = False
    min_face_distance_m: float = 0.1


@dataclass(frozen=True)
class SurveillanceEvent:
    kind: Cause
    track_id: int | None
    camera_ids: tuple[str, ...]
    timestamp_ms: float


@dataclass(frozen=True)
class CommandRecord:
    timestamp_ms: Fraction
    camera_id: str
    from_level: int
    to_level: int
    cause: str


def _at(track: tk.Track, now_ms: float, cfg: tk.TrackerConfig) -> tk.Track:
    return tk.predict(track, now_ms - track.time_ms, cfg) if now_ms > track.time_ms else track


def evaluate(tracks: Iterable[tk.Track], cameras: Sequence[CameraInfo],
             perimeters: Sequence[geo.PerimeterPolygon], now_ms: float,
             config: tk.TrackerConfig | None = None) -> list[SurveillanceEvent]:
    """Events raised by the confirmed tracks at ``now_ms``."""
    cfg = config or tk.TrackerConfig()
    guarded = [(poly, tuple(c.camera_id for c in cameras if geo.polygons_intersect(c.fov, poly)))
               for poly in perimeters]
    events = []
    for track in sorted(tracks, key=lambda t: t.track_id):
        if track.status != tk.CONFIRMED:
            continue
        t = _at(track, now_ms, cfg)
        pos = t.position
        inside = tuple(c.camera_id for c in cameras if geo.contains(c.fov, pos))
        for cid in inside:
            events.append(SurveillanceEvent(Cause.DETECTION, t.track_id, (cid,), now_ms))
        ell = tk.prediction_ellipse(t, cfg)
        for c in cameras:
            if c.camera_id in inside:
                continue
            if geo.ellipse_intersects_polygon(ell.center, ell.axes, ell.orientation, c.fov):
                events.append(SurveillanceEvent(Cause.PREDICTED_ENTRY, t.track_id,
                                                (c.camera_id,), now_ms))
        for poly, cams in guarded:
            if geo.contains(poly, pos):
                events.append(SurveillanceEvent(Cause.BROKEN_PERIMETER, t.track_id, cams, now_ms))
            elif geo.contains(poly, ell.center):
                events.append(SurveillanceEvent(Cause.POSSIBLE_INTRUSION, t.track_id, cams, now_ms))
        v = t.identity
        if inside and v is not None and (v.unknown or not v.authorized):
            events.append(SurveillanceEvent(Cause.CONFIRMED_INTRUSION, t.track_id, inside, now_ms))
    return events


class ModeController:
    """Per-camera target level: max over active events, with a downgrade dwell.

    A level stays held while some event mapped to it was active less than
    ``cooldown_ms`` ago. The mode a camera starts in counts as active at
    ``start_ms``.
    """

    def __init__(self, initial_levels: Mapping[str, int], config: QRMConfig | None = None,
                 start_ms: float = 0.0):
        self.config = config or QRMConfig()
        self.current = dict(initial_levels)
        self.last_active: dict[str, dict[int, tuple[float, Cause]]] = {
            cam: ({lvl: (start_ms, Cause.NOTHING_RELEVANT)} if lvl > 0 else {})
            for cam, lvl in self.current.items()}

    def decide(self, events: Iterable[SurveillanceEvent], now_ms: float) -> list[ReconfigCommand]:
        cfg = self.config
        active: dict[str, dict[int, Cause]] = {cam: {} for cam in self.current}
        for ev in events:
            lvl = cause_level(ev.kind, cfg.handoff_escalates_to_2)
            for cam in ev.camera_ids:
                if cam not in active:
                    raise UnknownCamera(f"event for unknown camera {cam!r}")
                prev = active[cam].get(lvl)
                if prev is None or _CAUSE_PRIORITY.index(ev.kind) < _CAUSE_PRIORITY.index(prev):
                    active[cam][lvl] = ev.kind
        commands = []
        for cam in sorted(self.current):
            for lvl, cause in active[cam].items():
                if lvl > 0:
                    self.last_active[cam][lvl] = (now_ms, cause)
            act = max(active[cam], default=0)
            current = self.current[cam]
            held = [lvl for lvl, (t, _) in self.last_active[cam].items()
                    if act < lvl <= current and now_ms - t < cfg.cooldown_ms]
            target = max([act, *held])
            if target == current:
                continue
            if target == 0:
                cause = Cause.NOTHING_RELEVANT
            elif target == act:
                cause = active[cam][act]
            else:
                cause = self.last_active[cam][target][1]
            commands.append(ReconfigCommand(cam, target, cause, now_ms))
            self.current[cam] = target
        return commands


def identity_gate(subject: Subject | None, camera: CameraInfo, level: int,
                  world_point, watchlist: Sequence[WatchlistEntry], rng: np.random.Generator,
                  perception: PerceptionConfig | None = None,
                  min_distance_m: float = 0.1) -> IdentityVerdict | None:
    """One face-identification attempt; ``None`` leaves the verdict pending.

    A failed match only counts as "unknown" when the face was large enough for
    the recognizer to be reliable; otherwise it is inconclusive.
    """
    cfg = perception or PerceptionConfig()
    if subject is None:
        return None
    distance = max(min_distance_m, math.dist(camera.position, world_point))
    px = face_pixels_for(distance, RESOLUTIONS[level][1], cfg.face_k)
    if watchlist:
        verdict = identify_face(subject, px, watchlist, rng, cfg)
    else:
        verdict = IdentityVerdict(None, False, px, 0.0)
    if verdict.unknown and fnr_at(px) > cfg.reliable_fnr:
        return None
    return verdict


@dataclass
class Observation:
    actor_id: str | None
    camera_id: str
    level: int
    world_point: tuple[float, float]


class CloudCoordinator:
    def __init__(self, cameras: Sequence[CameraInfo], perimeters: Sequence[geo.PerimeterPolygon],
                 *, watchlist: Sequence[WatchlistEntry] = (),
                 subjects: Mapping[str, Subject] | None = None,
                 config: QRMConfig | None = None, tracker: tk.TrackerConfig | None = None,
                 perception: PerceptionConfig | None = None, seed: int = 0):
        self.cameras = {c.camera_id: c for c in cameras}
        self.camera_list = sorted(cameras, key=lambda c: c.camera_id)
        self.perimeters = list(perimeters)
        self.watchlist = list(watchlist)
        self.subjects = dict(subjects or {})
        self.config = config or QRMConfig()
        self.tracker = tk.Tracker(tracker)
        self.perception = perception or PerceptionConfig()
        self.rng = np.random.default_rng([int(seed), zlib.crc32(b"cloud")])
        self.controller = ModeController({c.camera_id: c.initial_level for c in cameras},
                                         self.config)
        self.inbox = []
        self.acked = {c.camera_id: c.initial_level for c in cameras}
        self.observations: dict[int, Observation] = {}
        self.command_log: list[CommandRecord] = []
        self.event_log: list[SurveillanceEvent] = []
        self.track_rows: list[tuple] = []
        self.track_events: list[tk.TrackEvent] = []

    def receive(self, msg: ns.Message):
        if msg.kind == ns.EDGE_REPORT:
            if msg.payload.camera_id not in self.cameras:
                raise UnknownCamera(f"report from unknown camera {msg.payload.camera_id!r}")
            self.inbox.append(msg.payload)
        elif msg.kind == ns.ACK:
            cam, level, _ = msg.payload
            self.acked[cam] = level

    def _miss_rule(self, report):
        if report.warming_up:
            return lambda t: False
        fov = self.cameras[report.camera_id].fov

        def eligible(t: tk.Track) -> bool:
            p = t.position
            if geo.contains(fov, p):
                return True
            return not any(geo.contains(c.fov, p) for c in self.camera_list)
        return eligible

    def _ingest(self, report):
        ts = float(report.timestamp_ms)
        evs = self.tracker.step(list(report.detections), ts, self._miss_rule(report),
                                report.camera_id)
        self.track_events += evs
        for di, tid in self.tracker.last_assignment.items():
            d = report.detections[di]
            if d.from_detector:
                self.observations[tid] = Observation(d.actor_id, report.camera_id, report.level,
                                                     d.world_point)
        live = {t.track_id for t in self.tracker.tracks}
        for tid in [k for k in self.observations if k not in live]:
            del self.observations[tid]

    def _identify(self):
        for t in self.tracker.tracks:
            obs = self.observations.get(t.track_id)
            if t.status != tk.CONFIRMED or obs is None or obs.actor_id is None:
                continue
            if t.identity is not None and obs.level <= t.identity_level:
                continue
            verdict = identity_gate(self.subjects.get(obs.actor_id), self.cameras[obs.camera_id],
                                    obs.level, obs.world_point, self.watchlist, self.rng,
                                    self.perception, self.config.min_face_distance_m)
            if verdict is not None:
                t.identity = verdict
                t.identity_level = obs.level

    def cycle(self, now) -> list[ReconfigCommand]:
        now_f = ns.as_ms(now)
        now_ms = float(now_f)
        for report in sorted(self.inbox, key=lambda r: (r.timestamp_ms, r.camera_id)):
            self._ingest(report)
        self.inbox = []
        self._identify()
        events = evaluate(self.tracker.tracks, self.camera_list, self.perimeters, now_ms,
                          self.tracker.config)
        self.event_log += events
        before = dict(self.controller.current)
        commands = self.controller.decide(events, now_ms)
        for c in commands:
            self.command_log.append(CommandRecord(now_f, c.camera_id, before[c.camera_id],
                                                  c.target_level, str(c.cause)))
        for t in self.tracker.tracks:
            p = _at(t, now_ms, self.tracker.config)
            self.track_rows.append((now_f, t.track_id, *p.position, *p.velocity, t.status,
                                    t.last_camera_id or ""))
        return commands


# -- bandwidth accounting ---------------------------------------------------------

@dataclass
class BandwidthReport:
    duration_ms: Fraction
    node_ids: tuple[str, ...]
    bin_ms: int
    series: dict[str, list[int]]       # VideoChunk bytes per bin, by delivery time
    total_bytes: int
    baseline_bytes: Fraction
    reduction: Fraction

    @property
    def reduction_pct(self) -> float:
        return float(self.reduction * 100)

    @property
    def total_mb(self) -> float:
        return self.total_bytes / 1e6

    @property
    def baseline_mb(self) -> float:
        return float(self.baseline_bytes / 1_000_000)


def baseline_bytes(n_nodes: int, duration_ms, rates: str = "table2") -> Fraction:
    """Everything streamed at Mode 2 for the whole run."""
    return n_nodes * ns.as_ms(duration_ms) / 1000 * mode_for(2, rates).effective_rate_bps


def bandwidth_report(delivery_log: Sequence[ns.Message], node_ids: Sequence[str], duration_ms,
                     rates: str = "table2", bin_ms: int = ns.BIN_MS) -> BandwidthReport:
    nodes = tuple(sorted(node_ids))
    chunks = [m for m in delivery_log if m.kind == ns.VIDEO_CHUNK]
    last = max([m.deliver_at for m in chunks], default=Fraction(0))
    nbins = max(int(ns.as_ms(duration_ms) // bin_ms), int(last // bin_ms) + 1)
    series = {n: [0] * nbins for n in nodes}
    total = 0
    for m in chunks:
        series[m.src][int(m.deliver_at // bin_ms)] += m.size_bytes
        total += m.size_bytes
    base = baseline_bytes(len(nodes), duration_ms, rates)
    return BandwidthReport(ns.as_ms(duration_ms), nodes, bin_ms, series, total, base,
                           1 - Fraction(total) / base)


def analytic_reduction(dwell_ms: Mapping[str, Mapping[int, Fraction]], duration_ms,
                       rates: str = "table2") -> Fraction:
    """Reduction from mode dwell times alone: 1 - sum(dwell * rate) / baseline."""
    used = sum(Fraction(d) / 1000 * mode_for(lvl, rates).effective_rate_bps
               for per_node in dwell_ms.values() for lvl, d in per_node.items())
    return 1 - used / baseline_bytes(len(dwell_ms), duration_ms, rates)


def bandwidth_csv(report: BandwidthReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_start_ms", *[f"{n}_MBps" for n in report.node_ids], "total_MBps"])
    scale = 1000 / report.bin_ms / 1e6
    nbins = len(next(iter(report.series.values()), []))
    for b in range(nbins):
        vals = [report.series[n][b] * scale for n in report.node_ids]
        w.writerow([b * report.bin_ms, *[f"{v:.6f}" for v in vals], f"{sum(vals):.6f}"])
    buf.write("# total_MB,baseline_MB,reduction_pct\n")
    buf.write(f"# {report.total_mb:.6f},{report.baseline_mb:.6f},{report.reduction_pct:.4f}\n")
    return buf.getvalue()


def command_log_csv(records: Sequence[CommandRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMMAND_LOG_HEADER)
    for r in records:
        w.writerow([ns.format_ms(r.timestamp_ms), r.camera_id, r.from_level, r.to_level, r.cause])
    return buf.getvalue()


def track_log_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(tk.TRACK_LOG_HEADER.split(","))
    for t, tid, x, y, vx, vy, status, cam in rows:
        w.writerow([ns.format_ms(t), tid, f"{x:.4f}", f"{y:.4f}", f"{vx:.4f}", f"{vy:.4f}",
                    status, cam])
    return buf.getvalue()
