"""Scenario files, the synthetic scene, and the simulation driver."""
from __future__ import annotations

import bisect
import heapq
import json
import math
import zlib
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from . import bgmodel as bg
from . import cloudqrm as cq
from . import edgenode as en
from . import evaluation as ev
from . import geometry as geo
from . import netsim as ns
from .errors import EdgeCloudError, ParseError, UnknownCamera, ValidationError
from .modes import DEVICE_FPS, RATE_ALIASES, RESOLUTIONS, canonical_rates
from .perception import (ActorView, PerceptionConfig, Subject, WatchlistEntry, latent_from_seed,
                         read_watchlist)
from .tracker import CONFIRMED, TrackerConfig

BACKGROUND_LEVEL, BACKGROUND_SIGMA, ACTOR_LEVEL = 120, 2.0, 220
COMMON_FRAME_MS = 200  # every mode has a frame boundary on multiples of this


class SimulationAborted(EdgeCloudError):
    pass


@dataclass(frozen=True)
class Waypoint:
    x: float
    y: float
    speed: float | None = None  # m/s on the leg arriving here; actor default if None
    pause_ms: float = 0.0


@dataclass(frozen=True)
class CameraSpec:
    camera_id: str
    homography: geo.Homography
    fov: geo.PerimeterPolygon
    position: tuple[float, float]
    device: str = "TX2"
    initial_mode: int = 0
    calib_resolution: tuple[int, int] = (1280, 960)


@dataclass(frozen=True)
class ActorSpec:
    actor_id: str
    latent_seed: int
    waypoints: tuple[Waypoint, ...]
    authorized: bool = False
    enrolled: bool = False
    start_ms: float = 0.0
    speed: float = 1.4
    width_m: float = 0.5
    height_m: float = 1.7


@dataclass(frozen=True)
class VisionSpec:
    mode: str = "pixels"
    analysis_max_width: int | None = None
    detector_every: int = 5


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    duration_ms: int
    master_seed: int
    cameras: tuple[CameraSpec, ...]
    actors: tuple[ActorSpec, ...] = ()
    perimeters: tuple[geo.PerimeterPolygon, ...] = ()
    link: ns.LinkConfig = ns.LinkConfig()
    qrm: cq.QRMConfig = cq.QRMConfig()
    rates: str = "table2"
    vision: VisionSpec = VisionSpec()
    noise: bool = True
    watchlist: tuple[WatchlistEntry, ...] | None = None
    source: Path | None = None

    def camera(self, camera_id: str) -> CameraSpec:
        for c in self.cameras:
            if c.camera_id == camera_id:
                return c
        raise UnknownCamera(f"no camera {camera_id!r} in scenario {self.name!r}")


# -- loading ----------------------------------------------------------------------------------

_TOP_KEYS = {"name", "duration_ms", "master_seed", "cameras", "actors", "perimeters", "link",
             "qrm", "rates", "vision", "noise", "watchlist_file", "description"}


def _num(obj, key, where, default=None, kind=float):
    if key not in obj:
        if default is None:
            raise ParseError(f"{where}: missing required field", field=key)
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"{where}: expected a number, got {v!r}", field=key)
    if kind is int:
        if float(v) != int(v):
            raise ParseError(f"{where}: expected an integer, got {v!r}", field=key)
        return int(v)
    return float(v)


def _point(v, where, fld):
    if not (isinstance(v, (list, tuple)) and len(v) == 2
            and all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in v)):
        raise ParseError(f"{where}: expected [x, y], got {v!r}", field=fld)
    return (float(v[0]), float(v[1]))


def _points(v, where, fld):
    if not isinstance(v, list):
        raise ParseError(f"{where}: expected a list of points", field=fld)
    return tuple(_point(p, where, fld) for p in v)


def _polygon(verts, kind, name, violations):
    problems = geo.polygon_problems(verts)
    if problems:
        violations += [f"{name}: {p}" for p in problems]
        return None
    return geo.PerimeterPolygon(verts, kind, name)


def parse_scenario(data: dict, base_dir: Path | None = None) -> ScenarioConfig:
    """Build a validated config from decoded JSON; see ``load``."""
    base_dir = base_dir or Path(".")
    if not isinstance(data, dict):
        raise ParseError("scenario must be a JSON object")
    unknown = sorted(set(data) - _TOP_KEYS)
    if unknown:
        raise ParseError(f"unknown top-level field {unknown[0]!r}", field=unknown[0])
    violations: list[str] = []

    rates = data.get("rates", "table2")
    if rates not in RATE_ALIASES:
        raise ParseError(f"unknown rates preset {rates!r}; expected one of {sorted(RATE_ALIASES)}",
                         field="rates")
    rates = canonical_rates(rates)
    duration = _num(data, "duration_ms", "scenario", kind=int)
    if duration <= 0:
        violations.append("duration_ms must be positive")
    elif duration % COMMON_FRAME_MS:
        violations.append(f"duration_ms must be a multiple of {COMMON_FRAME_MS} ms")
    seed = _num(data, "master_seed", "scenario", default=0, kind=int)

    cams = []
    raw_cams = data.get("cameras")
    if not isinstance(raw_cams, list) or not raw_cams:
        raise ParseError("at least one camera is required", field="cameras")
    for i, c in enumerate(raw_cams):
        where = f"cameras[{i}]"
        if not isinstance(c, dict) or "id" not in c:
            raise ParseError(f"{where}: camera needs an id", field="id")
        cid = str(c["id"])
        calib = tuple(c.get("calib_resolution", (1280, 960)))
        hom = None
        try:
            if "homography" in c:
                hom = geo.Homography(np.array(c["homography"], dtype=float).reshape(3, 3))
            elif "homography_file" in c:
                hom = geo.read_homography(base_dir / c["homography_file"])
            elif "correspondences_file" in c:
                corrs = geo.read_correspondences(base_dir / c["correspondences_file"])
                hom = geo.estimate_homography(corrs)
            else:
                violations.append(f"{cid}: needs homography, homography_file or correspondences_file")
        except (ValueError, OSError) as exc:
            raise ParseError(f"{where}: cannot read homography: {exc}", field="homography") from None
        except EdgeCloudError as exc:
            violations.append(f"{cid}: homography unusable: {exc}")
        fov = _polygon(_points(c.get("fov", []), where, "fov"), geo.CAMERA_FOV, f"{cid} fov",
                       violations)
        device = c.get("device", "TX2" if i % 2 == 0 else "Xavier")
        if device not in DEVICE_FPS:
            violations.append(f"{cid}: unknown device {device!r}")
        mode = c.get("initial_mode", 0)
        if mode not in RESOLUTIONS:
            violations.append(f"{cid}: initial_mode must be 0, 1 or 2")
        if "position" not in c:
            violations.append(f"{cid}: position (mast foot on the ground) is required")
            pos = (0.0, 0.0)
        else:
            pos = _point(c["position"], where, "position")
        if hom is not None and fov is not None:
            cams.append(CameraSpec(cid, hom, fov, pos, device, mode, (int(calib[0]), int(calib[1]))))

    actors = []
    for i, a in enumerate(data.get("actors", [])):
        where = f"actors[{i}]"
        if not isinstance(a, dict) or "id" not in a:
            raise ParseError(f"{where}: actor needs an id", field="id")
        aid = str(a["id"])
        speed = _num(a, "speed", where, default=1.4)
        wps = []
        for j, w in enumerate(a.get("waypoints", [])):
            if isinstance(w, dict):
                x, y = _point([w.get("x"), w.get("y")], where, "waypoints")
                wps.append(Waypoint(x, y, w.get("speed"), float(w.get("pause_ms", 0.0))))
            else:
                x, y = _point(w, where, "waypoints")
                wps.append(Waypoint(x, y))
        if not wps:
            violations.append(f"{aid}: needs at least one waypoint")
        for w in wps:
            s = speed if w.speed is None else w.speed
            if not (isinstance(s, (int, float)) and s > 0):
                violations.append(f"{aid}: waypoint ({w.x}, {w.y}) unreachable, speed {s!r}")
            if w.pause_ms < 0:
                violations.append(f"{aid}: negative pause")
        width, height = _num(a, "width_m", where, 0.5), _num(a, "height_m", where, 1.7)
        if width <= 0 or height <= 0:
            violations.append(f"{aid}: body size must be positive")
        actors.append(ActorSpec(aid, _num(a, "latent_seed", where, kind=int), tuple(wps),
                                bool(a.get("authorized", False)), bool(a.get("enrolled", False)),
                                _num(a, "start_ms", where, 0.0), speed, width, height))
        if actors[-1].authorized and not actors[-1].enrolled:
            violations.append(f"{aid}: authorized actors must be enrolled in the watchlist")

    perims = []
    for i, p in enumerate(data.get("perimeters", [])):
        name = str(p.get("name", f"perimeter{i}")) if isinstance(p, dict) else f"perimeter{i}"
        verts = _points(p.get("vertices") if isinstance(p, dict) else p, f"perimeters[{i}]",
                        "vertices")
        poly = _polygon(verts, geo.SECURED_AREA, name, violations)
        if poly is not None:
            perims.append(poly)

    for label, ids in [("camera", [c.get("id") for c in raw_cams]),
                       ("actor", [a.get("id") for a in data.get("actors", [])]),
                       ("perimeter", [p.name for p in perims])]:
        dup = sorted({x for x in ids if ids.count(x) > 1})
        if dup:
            violations.append(f"duplicate {label} ids: {dup}")

    link_d = data.get("link", {})
    link = ns.LinkConfig(_num(link_d, "capacity_mbps", "link", 100.0),
                         _num(link_d, "uplink_latency_ms", "link", 5.0),
                         _num(link_d, "downlink_latency_ms", "link", 5.0))
    if link.capacity_mbps <= 0 or link.uplink_latency_ms < 0 or link.downlink_latency_ms < 0:
        violations.append("link capacity must be positive and latencies non-negative")
    q = data.get("qrm", {})
    qrm = cq.QRMConfig(_num(q, "cycle_ms", "qrm", 100, kind=int),
                       _num(q, "cooldown_ms", "qrm", 2000, kind=int),
                       bool(q.get("handoff_escalates_to_2", False)))
    if qrm.cycle_ms <= 0 or qrm.cooldown_ms < 0:
        violations.append("qrm cycle must be positive and cooldown non-negative")
    v = data.get("vision", {})
    vision = VisionSpec(v.get("mode", "pixels"), v.get("analysis_max_width"),
                        int(v.get("detector_every", 5)))
    if vision.mode not in ("pixels", "geometric"):
        raise ParseError(f"unknown vision mode {vision.mode!r}", field="vision.mode")
    if vision.detector_every < 1:
        violations.append("detector_every must be >= 1")

    watch = None
    if "watchlist_file" in data:
        try:
            watch = tuple(read_watchlist(base_dir / data["watchlist_file"]))
        except OSError as exc:
            raise ParseError(f"cannot read watchlist: {exc}", field="watchlist_file") from None

    if violations:
        raise ValidationError(violations)
    return ScenarioConfig(str(data.get("name", "scenario")), duration, seed, tuple(cams),
                          tuple(actors), tuple(perims), link, qrm, rates, vision,
                          bool(data.get("noise", True)), watch)


def load(path) -> ScenarioConfig:
    """Read and validate a scenario file, or a built-in scenario by name."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and builtin_path(str(path)).exists():
        p = builtin_path(str(path))
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {p}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None
    cfg = parse_scenario(data, p.parent)
    return replace(cfg, source=p)


def builtin_path(name: str) -> Path:
    return Path(str(resources.files("edgecloud") / "scenarios" / f"{name}.json"))


def builtin_names() -> list[str]:
    d = resources.files("edgecloud") / "scenarios"
    return sorted(Path(str(p)).stem for p in d.iterdir() if str(p).endswith(".json"))


# -- scene ----------------------------------------------------------------------------------

class ActorPath:
    """Piecewise-linear walk with pauses; the actor leaves the scene at the end."""

    def __init__(self, spec: ActorSpec):
        self.spec = spec
        t = float(spec.start_ms)
        pts = [(spec.waypoints[0].x, spec.waypoints[0].y)]
        self.knots = [(t, pts[0])]
        if spec.waypoints[0].pause_ms:
            t += spec.waypoints[0].pause_ms
            self.knots.append((t, pts[0]))
        for w in spec.waypoints[1:]:
            speed = spec.speed if w.speed is None else w.speed
            prev = self.knots[-1][1]
            t += 1000.0 * math.dist(prev, (w.x, w.y)) / speed
            self.knots.append((t, (w.x, w.y)))
            if w.pause_ms:
                t += w.pause_ms
                self.knots.append((t, (w.x, w.y)))
        self.times = [k[0] for k in self.knots]
        self.end_ms = t

    def position(self, t_ms) -> tuple[float, float] | None:
        t = float(t_ms)
        if t < self.times[0] or t > self.end_ms:
            return None
        i = bisect.bisect_right(self.times, t) - 1
        if i >= len(self.knots) - 1:
            return self.knots[-1][1]
        (t0, p0), (t1, p1) = self.knots[i], self.knots[i + 1]
        a = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
        return (p0[0] + a * (p1[0] - p0[0]), p0[1] + a * (p1[1] - p0[1]))


def image_homography(cam: CameraSpec, width: int, height: int) -> geo.Homography:
    """Image -> ground map for frames of the given size."""
    return cam.homography.rescaled_input(cam.calib_resolution[0] / width,
                                         cam.calib_resolution[1] / height)


def foot_box(cam: CameraSpec, world, width_m: float, height_m: float, width: int, height: int):
    """Integer pixel box (x, y, w, h) whose bottom-centre maps to ``world``, or None if unseen."""
    to_img = image_homography(cam, width, height).inverse()
    m = to_img.h
    x, y = world
    wz = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if wz <= 1e-9:
        return None  # behind the camera
    u, v = geo.project(to_img, world)
    if not (0 <= u < width and 0 < v <= height):
        return None
    # local pixels-per-metre from the Jacobian of the ground -> image map
    eps = 0.01
    du = np.subtract(geo.project(to_img, (x + eps, y)), (u, v)) / eps
    dv = np.subtract(geo.project(to_img, (x, y + eps)), (u, v)) / eps
    scale = math.sqrt(abs(du[0] * dv[1] - du[1] * dv[0]))
    bw = max(1, round(width_m * scale))
    bh = max(1, round(height_m * scale))
    x0 = round(u - bw / 2)
    y1 = round(v)
    y0 = y1 - bh
    # clip to the frame
    cx0, cy0 = max(0, x0), max(0, y0)
    cx1, cy1 = min(width, x0 + bw), min(height, y1)
    if cx1 <= cx0 or cy1 <= cy0:
        return None
    return (cx0, cy0, cx1 - cx0, cy1 - cy0)


class Scene:
    """The synthetic physical world seen by every camera."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.paths = [ActorPath(a) for a in config.actors]
        self.latents = {a.actor_id: latent_from_seed(a.latent_seed) for a in config.actors}
        self._cams = {c.camera_id: c for c in config.cameras}

    def _cam(self, camera_id) -> CameraSpec:
        try:
            return self._cams[camera_id]
        except KeyError:
            raise UnknownCamera(f"no camera {camera_id!r}") from None

    def positions(self, t_ms) -> dict[str, tuple[float, float]]:
        out = {}
        for p in self.paths:
            pos = p.position(t_ms)
            if pos is not None:
                out[p.spec.actor_id] = pos
        return out

    def actor_views(self, camera_id, t_ms, width, height) -> list[ActorView]:
        cam = self._cam(camera_id)
        views = []
        for p in self.paths:
            pos = p.position(t_ms)
            if pos is None:
                continue
            box = foot_box(cam, pos, p.spec.width_m, p.spec.height_m, width, height)
            if box is not None:
                views.append(ActorView(p.spec.actor_id, box, self.latents[p.spec.actor_id]))
        return views

    def render(self, camera_id, t_ms, width, height) -> bg.Frame:
        self._cam(camera_id)
        t = ns.as_ms(t_ms)
        rng = np.random.default_rng([self.config.master_seed, zlib.crc32(camera_id.encode()),
                                     t.numerator, t.denominator, width, height])
        img = BACKGROUND_LEVEL + BACKGROUND_SIGMA * rng.standard_normal((height, width))
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        for v in self.actor_views(camera_id, t, width, height):
            x, y, w, h = v.bbox
            img[y:y + h, x:x + w] = ACTOR_LEVEL
        return bg.Frame(width, height, img, float(t))


def render(scene: Scene, camera_id: str, t_ms, resolution) -> bg.Frame:
    return scene.render(camera_id, t_ms, resolution[0], resolution[1])


# -- driver ------------------------------------------------------------------------------------

@dataclass
class RunResult:
    config: ScenarioConfig
    nodes: dict[str, en.EdgeNode]
    cloud: cq.CloudCoordinator
    network: ns.Network
    bandwidth: cq.BandwidthReport
    dwell_ms: dict[str, dict[int, Fraction]]
    analytic_reduction: Fraction
    mot: ev.MotReport | None
    gt_frames: dict = field(repr=False, default_factory=dict)
    hyp_frames: dict = field(repr=False, default_factory=dict)

    @property
    def reduction_pct(self) -> float:
        return self.bandwidth.reduction_pct

    def csvs(self) -> dict[str, str]:
        events = [e for n in sorted(self.nodes) for e in self.nodes[n].events]
        events.sort(key=lambda e: (e.timestamp_ms, e.camera_id))
        return {
            "tracks.csv": cq.track_log_csv(self.cloud.track_rows),
            "node_events.csv": en.node_log_csv(events),
            "commands.csv": cq.command_log_csv(self.cloud.command_log),
            "bandwidth.csv": cq.bandwidth_csv(self.bandwidth),
            "deliveries.csv": ns.delivery_log_csv(self.network.log),
        }

    def write(self, out_dir):
        cmds = self.cloud.command_log
        extra = {
            "scenario": self.config.name,
            "seed": self.config.master_seed,
            "rates": self.config.rates,
            "duration_ms": self.config.duration_ms,
            "analytic_reduction_pct": float(self.analytic_reduction * 100),
            "commands": len(cmds),
            "bytes_delivered": self.network.bytes_delivered,
        }
        return ev.run_report(out_dir, mot=self.mot, bandwidth=self.bandwidth, csvs=self.csvs(),
                             dwell_ms=self.dwell_ms, extra=extra)


def watchlist_for(config: ScenarioConfig) -> list[WatchlistEntry]:
    if config.watchlist is not None:
        return list(config.watchlist)
    return [WatchlistEntry(a.actor_id, a.authorized, latent_from_seed(a.latent_seed))
            for a in config.actors if a.enrolled]


def run(config: ScenarioConfig, *, seed: int | None = None, rates: str | None = None,
        mask_dir=None, tracker: TrackerConfig | None = None) -> RunResult:
    """Simulate the whole system from 0 to ``duration_ms`` of virtual time."""
    if seed is not None:
        config = replace(config, master_seed=int(seed))
    if rates is not None:
        config = replace(config, rates=canonical_rates(rates))
    perception = PerceptionConfig() if config.noise else PerceptionConfig().without_noise()
    scene = Scene(config)
    nodes = {}
    for cam in config.cameras:
        ncfg = en.NodeConfig(cam.camera_id, cam.homography, cam.calib_resolution, cam.device,
                             cam.initial_mode, config.rates, config.vision.mode,
                             config.vision.analysis_max_width, config.vision.detector_every)
        nodes[cam.camera_id] = en.EdgeNode(ncfg, seed=config.master_seed, perception=perception)
    cloud = cq.CloudCoordinator(
        [cq.CameraInfo(c.camera_id, c.fov, c.position, c.initial_mode) for c in config.cameras],
        config.perimeters, watchlist=watchlist_for(config),
        subjects={a.actor_id: Subject(a.actor_id, latent_from_seed(a.latent_seed))
                  for a in config.actors},
        config=config.qrm, tracker=tracker, perception=perception, seed=config.master_seed)
    net = ns.Network(config.link)
    duration = Fraction(config.duration_ms)
    cycle = Fraction(config.qrm.cycle_ms)
    next_cycle = cycle
    outbox: list = []
    seq = 0
    gt_frames: dict = {}
    fovs = [c.fov for c in config.cameras]
    if mask_dir is not None:
        Path(mask_dir).mkdir(parents=True, exist_ok=True)

    def component(name, t, fn, *args):
        try:
            return fn(*args)
        except EdgeCloudError as exc:
            raise SimulationAborted(f"{name} failed at t={float(t):.3f} ms: {exc}") from exc

    while True:
        candidates = [x for x in (net.next_delivery(), outbox[0][0] if outbox else None) if x is not None]
        ticks = [n.next_tick for n in nodes.values() if n.next_tick < duration]
        candidates += ticks
        if next_cycle < duration:
            candidates.append(next_cycle)
        if not candidates:
            break
        t = min(candidates)
        for msg in net.advance(t):
            if msg.dst == ns.CLOUD:
                component("cloud", t, cloud.receive, msg)
            else:
                component(msg.dst, t, nodes[msg.dst].apply_reconfig, msg.payload)
        for cid in sorted(nodes):
            node = nodes[cid]
            if node.next_tick == t and t < duration:
                for o in component(cid, t, node.tick, t, scene):
                    heapq.heappush(outbox, (o.send_at, cid, seq, o))
                    seq += 1
                if mask_dir is not None and node.last_mask is not None \
                        and (node.frames_processed - 1) % node.mode.fps == 0:
                    bg.write_pgm(node.last_mask, Path(mask_dir) / f"{cid}_{float(t):010.1f}.pgm")
        while outbox and outbox[0][0] <= t:
            _, cid, _, o = heapq.heappop(outbox)
            net.send(o.kind, cid, ns.CLOUD, o.size_bytes, o.send_at, o.payload)
        if next_cycle == t and t < duration:
            for cmd in component("cloud", t, cloud.cycle, t):
                net.send(ns.RECONFIG, ns.CLOUD, cmd.camera_id, 0, t, cmd)
            visible = {aid: p for aid, p in scene.positions(t).items()
                       if any(geo.contains(f, p) for f in fovs)}
            if visible:
                gt_frames[float(t)] = visible
            next_cycle += cycle
    net.drain()

    dwell = {cid: n.close(duration) for cid, n in nodes.items()}
    bandwidth = cq.bandwidth_report(net.log, list(nodes), duration, config.rates)
    analytic = cq.analytic_reduction(dwell, duration, config.rates)
    hyp_frames: dict = {}
    for t, tid, x, y, _, _, status, _ in cloud.track_rows:
        if status == CONFIRMED:
            hyp_frames.setdefault(float(t), {})[tid] = (x, y)
    mot = ev.compute_mot(gt_frames, hyp_frames) if gt_frames else None
    return RunResult(config, nodes, cloud, net, bandwidth, dwell, analytic, mot,
                     gt_frames, hyp_frames)
