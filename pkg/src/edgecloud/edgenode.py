"""Per-camera edge pipeline and operating-mode state machine.

Ticks happen on a global frame grid: frames of a mode at ``fps`` fall on the
multiples of ``1000/fps`` ms. Because the Mode 0 grid is contained in the
Mode 1 grid which is contained in the Mode 2 grid, a switch is applied at the
first tick that is a frame boundary of both the outgoing and the incoming
mode. Upgrades therefore apply at the next frame; downgrades wait at most one
Mode 0 period. Every mode dwell is then a whole number of its frame periods.
"""
from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass
from fractions import Fraction
from typing import Protocol, Sequence

import numpy as np

from . import bgmodel as bg
from . import geometry as geo
from . import netsim as ns
from .errors import Overrun, UnknownCamera, UnknownMode
from .modes import (Cause, OperatingMode, ReconfigCommand, mode_for, processing_latency_ms,
                    RESOLUTIONS)
from .perception import (ActorView, Detection, PerceptionConfig, classify_rois,
                         roi_detections)

NODE_LOG_HEADER = ["timestamp_ms", "camera_id", "mode", "cause", "bytes_sent_cum"]

NONE, PERSON = "none", "person_detected"


class Scene(Protocol):
    def actor_views(self, camera_id: str, t_ms, width: int, height: int) -> list[ActorView]: ...

    def render(self, camera_id: str, t_ms, width: int, height: int) -> bg.Frame: ...


@dataclass(frozen=True)
class NodeConfig:
    camera_id: str
    homography: geo.Homography          # image -> ground at calib_resolution
    calib_resolution: tuple[int, int] = (1280, 960)
    device: str = "TX2"
    initial_level: int = 0
    rates: str = "table2"
    vision: str = "pixels"              # "pixels" runs the MOG; "geometric" uses actor boxes
    analysis_max_width: int | None = None
    detector_every: int = 5
    report_base_bytes: int = 48
    report_det_bytes: int = 160
    report_max_bytes: int = 2048


@dataclass(frozen=True)
class EdgeReport:
    camera_id: str
    timestamp_ms: Fraction
    detections: tuple[Detection, ...]
    event_hint: str
    level: int
    warming_up: bool = False


@dataclass(frozen=True)
class Outgoing:
    send_at: Fraction
    kind: str
    size_bytes: int
    payload: object = None


@dataclass
class NodeEvent:
    timestamp_ms: Fraction
    camera_id: str
    level: int
    cause: str
    bytes_sent_cum: int


def camera_seed(master_seed: int, camera_id: str) -> list[int]:
    return [int(master_seed), zlib.crc32(camera_id.encode("utf-8"))]


def on_grid(t: Fraction, fps: int) -> bool:
    return (t * fps / 1000).denominator == 1


def report_size(n_detections: int, cfg: NodeConfig) -> int:
    return min(cfg.report_max_bytes, cfg.report_base_bytes + cfg.report_det_bytes * n_detections)


def analysis_resolution(mode: OperatingMode, max_width: int | None) -> tuple[int, int]:
    if max_width is None or mode.width <= max_width:
        return mode.resolution
    return max_width, round(mode.height * max_width / mode.width)


class EdgeNode:
    def __init__(self, config: NodeConfig, *, seed: int = 0,
                 perception: PerceptionConfig | None = None,
                 mog: bg.MOGConfig | None = None):
        if config.vision not in ("pixels", "geometric"):
            raise ValueError(f"unknown vision mode {config.vision!r}")
        self.config = config
        self.camera_id = config.camera_id
        self.perception = perception or PerceptionConfig()
        self.mog_config = mog or bg.MOGConfig()
        self.rng = np.random.default_rng(camera_seed(seed, config.camera_id))
        self.mode = mode_for(config.initial_level, config.rates)
        self.pending: ReconfigCommand | None = None
        self.next_tick = Fraction(0)
        self.frames_processed = 0
        self.frames_since_reset = 0
        self.bytes_sent = 0
        self.emitted: list[Outgoing] = []
        self.events: list[NodeEvent] = [NodeEvent(Fraction(0), self.camera_id, self.mode.level,
                                                  Cause.NOTHING_RELEVANT.value, 0)]
        self.dwell_ms = {lvl: Fraction(0) for lvl in RESOLUTIONS}
        self._mode_since = Fraction(0)
        self._model: bg.PixelGaussianMixture | None = None
        self.last_mask: np.ndarray | None = None
        self._reset_vision()
        latency = processing_latency_ms(config.device, 2)
        if latency > mode_for(2, config.rates).frame_period_ms:
            raise Overrun(f"{config.camera_id}: {config.device} cannot sustain Mode 2")

    @property
    def level(self) -> int:
        return self.mode.level

    def warming_up(self) -> bool:
        return self.frames_since_reset < self.mog_config.warmup_frames

    def _reset_vision(self):
        self.frames_since_reset = 0
        if self.config.vision == "pixels":
            w, h = analysis_resolution(self.mode, self.config.analysis_max_width)
            if self._model is None:
                self._model = bg.PixelGaussianMixture(w, h, self.mog_config)
            else:
                self._model.reset(w, h)

    def apply_reconfig(self, command: ReconfigCommand):
        """Queue a command; it takes effect at the next admissible frame boundary."""
        if command.camera_id != self.camera_id:
            raise UnknownCamera(f"command for {command.camera_id} delivered to {self.camera_id}")
        if command.target_level not in RESOLUTIONS:
            raise UnknownMode(f"unknown operating mode level {command.target_level!r}")
        self.pending = command  # last writer wins

    def _switch(self, t: Fraction) -> list[Outgoing]:
        cmd = self.pending
        target = mode_for(cmd.target_level, self.config.rates)
        if target.level != self.mode.level and not on_grid(t, target.fps):
            return []
        self.pending = None
        if target.level != self.mode.level:
            self.dwell_ms[self.mode.level] += t - self._mode_since
            self._mode_since = t
            self.mode = target
            self._reset_vision()
            self.events.append(NodeEvent(t, self.camera_id, target.level, str(cmd.cause),
                                         self.bytes_sent))
        return [Outgoing(t, ns.ACK, 0, (self.camera_id, self.mode.level, cmd))]

    def _perceive(self, t: Fraction, scene: Scene) -> tuple[list[Detection], bool]:
        cfg = self.config
        w, h = analysis_resolution(self.mode, cfg.analysis_max_width)
        views = scene.actor_views(self.camera_id, t, w, h)
        if cfg.vision == "pixels":
            frame = scene.render(self.camera_id, t, w, h)
            mask = bg.clean_mask(bg.update_and_segment(self._model, frame),
                                 self.mog_config.open_iterations)
            self.last_mask = mask
            rois = bg.extract_rois(mask, bg.min_area_for(w, self.mog_config))
        else:
            rois = _geometric_rois(views, w, h, bg.min_area_for(w, self.mog_config))
        warm = self.warming_up()
        self.frames_since_reset += 1
        if warm:
            return [], True
        hom = cfg.homography.rescaled_input(cfg.calib_resolution[0] / w, cfg.calib_resolution[1] / h)
        ts = float(t)
        detector_frame = (self.frames_since_reset - 1) % cfg.detector_every == 0
        if detector_frame:
            dets = classify_rois(rois, views, self.mode.level, self.rng, camera_id=self.camera_id,
                                 timestamp_ms=ts, homography=hom, frame_size=(w, h),
                                 config=self.perception)
        else:
            dets = roi_detections(rois, camera_id=self.camera_id, timestamp_ms=ts, homography=hom)
        return dets, False

    def tick(self, now, scene: Scene) -> list[Outgoing]:
        """Process the frame due at ``now`` and return the messages it produces."""
        t = ns.as_ms(now)
        if t != self.next_tick:
            raise ValueError(f"{self.camera_id}: tick at {float(t)} ms, expected {float(self.next_tick)}")
        out: list[Outgoing] = []
        if self.pending is not None:
            out += self._switch(t)
        mode = self.mode
        out.append(Outgoing(t, ns.VIDEO_CHUNK, mode.chunk_bytes, (self.camera_id, mode.level)))
        dets, warm = self._perceive(t, scene)
        latency = ns.as_ms(processing_latency_ms(self.config.device, mode.level))
        if latency > ns.as_ms(1000) / mode.fps:
            raise Overrun(f"{self.camera_id}: processing {float(latency):.1f} ms exceeds the frame period")
        hint = PERSON if any(d.from_detector for d in dets) else NONE
        report = EdgeReport(self.camera_id, t, tuple(dets), hint, mode.level, warm)
        out.append(Outgoing(t + latency, ns.EDGE_REPORT, report_size(len(dets), self.config), report))
        for o in out:
            self.bytes_sent += o.size_bytes
        self.emitted += out
        self.frames_processed += 1
        self.next_tick = t + ns.as_ms(1000) / mode.fps
        return out

    def close(self, end_ms) -> dict[int, Fraction]:
        """Finish the dwell accounting at ``end_ms``; returns ms spent per level."""
        end = ns.as_ms(end_ms)
        dwell = dict(self.dwell_ms)
        dwell[self.mode.level] += end - self._mode_since
        return dwell

    def bandwidth_used(self, start_ms, end_ms, kinds=(ns.VIDEO_CHUNK, ns.EDGE_REPORT)) -> float:
        """MB/s emitted by this node over [start, end)."""
        start, end = ns.as_ms(start_ms), ns.as_ms(end_ms)
        if end <= start:
            raise ValueError("empty window")
        total = sum(o.size_bytes for o in self.emitted if o.kind in kinds and start <= o.send_at < end)
        return float(Fraction(total) / (end - start) * 1000 / 1_000_000)


def _geometric_rois(views: Sequence[ActorView], width: int, height: int,
                    min_area: float) -> list[bg.RegionOfInterest]:
    rois = []
    for v in views:
        x, y, w, h = v.bbox
        x0, y0 = max(0, int(x)), max(0, int(y))
        x1, y1 = min(width, int(x + w)), min(height, int(y + h))
        if x1 <= x0 or y1 <= y0:
            continue
        area = (x1 - x0) * (y1 - y0)
        if area >= min_area:
            rois.append(bg.RegionOfInterest(x0, y0, x1 - x0, y1 - y0, area))
    rois.sort(key=lambda r: (-r.area, r.y, r.x))
    return rois


def node_log_csv(events: Sequence[NodeEvent]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(NODE_LOG_HEADER)
    for e in events:
        w.writerow([ns.format_ms(e.timestamp_ms), e.camera_id, e.level, e.cause, e.bytes_sent_cum])
    return buf.getvalue()
