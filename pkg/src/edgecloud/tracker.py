"""Ground-plane multi-object tracking.

Constant-velocity Kalman filter per track, association by a blend of
Mahalanobis distance and appearance (cosine) distance solved as an optimal
assignment, and a tentative -> confirmed -> deleted lifecycle.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import NonSPDCovariance
from .perception import Detection, IdentityVerdict

# chi-square quantile, 2 dof, 0.95 (closed form for 2 dof)
CHI2_2DOF_95 = -2.0 * math.log(1.0 - 0.95)

TENTATIVE, CONFIRMED, DELETED = "tentative", "confirmed", "deleted"

_H = np.hstack([np.eye(2), np.zeros((2, 2))])
_INFEASIBLE = 1e6


@dataclass(frozen=True)
class TrackerConfig:
    appearance_weight: float = 0.5   # weight of the motion term
    gate_chi2: float = CHI2_2DOF_95
    meas_sigma_m: float = 0.25
    accel_noise: float = 0.5         # m/s^2 per sqrt(s)
    init_vel_sigma: float = 1.5      # m/s
    confirm_hits: int = 3
    max_misses: int = 30
    tentative_max_misses: int = 3    # probation: unconfirmed tracks die quickly
    gallery_size: int = 30
    ellipse_horizon_ms: float = 200.0


@dataclass
class Track:
    track_id: int
    state: np.ndarray
    covariance: np.ndarray
    time_ms: float
    gallery: deque = field(default_factory=lambda: deque(maxlen=30))
    status: str = TENTATIVE
    hits: int = 1
    misses: int = 0
    last_camera_id: str | None = None
    identity: IdentityVerdict | None = None  # None while pending
    identity_level: int = -1                 # mode level the verdict was obtained at
    last_detection: Detection | None = None  # last detector (not ROI-only) observation

    @property
    def position(self) -> tuple[float, float]:
        return (float(self.state[0]), float(self.state[1]))

    @property
    def velocity(self) -> tuple[float, float]:
        return (float(self.state[2]), float(self.state[3]))

    def copy(self) -> "Track":
        return replace(self, state=self.state.copy(), covariance=self.covariance.copy(),
                       gallery=deque(self.gallery, maxlen=self.gallery.maxlen))


@dataclass(frozen=True)
class PredictionEllipse:
    center: tuple[float, float]
    axes: tuple[float, float]      # semi-axes (major, minor), meters
    orientation: float             # radians, direction of the major axis
    horizon_ms: float = 200.0
    confidence: float = 0.95

    def contains(self, p) -> bool:
        c, s = math.cos(self.orientation), math.sin(self.orientation)
        dx, dy = p[0] - self.center[0], p[1] - self.center[1]
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / self.axes[0]) ** 2 + (v / self.axes[1]) ** 2 <= 1.0


@dataclass(frozen=True)
class TrackEvent:
    kind: str  # created | confirmed | lost
    track_id: int
    timestamp_ms: float
    camera_id: str | None = None


def transition(dt_s: float) -> np.ndarray:
    f = np.eye(4)
    f[0, 2] = f[1, 3] = dt_s
    return f


def process_noise(dt_s: float, accel_noise: float) -> np.ndarray:
    """Continuous white-noise acceleration model, discretized exactly over dt."""
    q = accel_noise ** 2
    a, b, c = dt_s ** 3 / 3.0, dt_s ** 2 / 2.0, dt_s
    return q * np.array([[a, 0, b, 0], [0, a, 0, b], [b, 0, c, 0], [0, b, 0, c]])


def predict(track: Track, dt_ms: float, config: TrackerConfig | None = None) -> Track:
    if dt_ms <= 0:
        raise ValueError(f"dt_ms must be positive, got {dt_ms}")
    cfg = config or TrackerConfig()
    dt = dt_ms / 1000.0
    f = transition(dt)
    out = track.copy()
    out.state = f @ track.state
    p = f @ track.covariance @ f.T + process_noise(dt, cfg.accel_noise)
    out.covariance = 0.5 * (p + p.T)
    out.time_ms = track.time_ms + dt_ms
    return out


def _is_spd(p: np.ndarray) -> bool:
    return np.allclose(p, p.T, atol=1e-12) and np.linalg.eigvalsh(p).min() > 0


def _repair_spd(p: np.ndarray) -> np.ndarray:
    p = 0.5 * (p + p.T)
    vals, vecs = np.linalg.eigh(p)
    vals = np.maximum(vals, 1e-12)
    return (vecs * vals) @ vecs.T


def innovation(track: Track, z, meas_sigma: float):
    r = np.eye(2) * meas_sigma ** 2
    y = np.asarray(z, dtype=float) - _H @ track.state
    s = _H @ track.covariance @ _H.T + r
    return y, s


def mahalanobis_sq(track: Track, z, meas_sigma: float) -> float:
    y, s = innovation(track, z, meas_sigma)
    return float(y @ np.linalg.solve(s, y))


def update(track: Track, detection: Detection, config: TrackerConfig | None = None) -> Track:
    """Kalman correction with the detection's ground-plane position."""
    cfg = config or TrackerConfig()
    out = track.copy()
    r = np.eye(2) * cfg.meas_sigma_m ** 2
    p = track.covariance
    for attempt in range(2):
        y, s = innovation(replace(track, covariance=p), detection.world_point, cfg.meas_sigma_m)
        k = p @ _H.T @ np.linalg.inv(s)
        ikh = np.eye(4) - k @ _H
        new_p = ikh @ p @ ikh.T + k @ r @ k.T
        new_p = 0.5 * (new_p + new_p.T)
        if _is_spd(new_p):
            break
        if attempt == 1:
            raise NonSPDCovariance(f"track {track.track_id}: covariance lost positive definiteness")
        p = _repair_spd(p)
    out.state = track.state + k @ y
    out.covariance = new_p
    if detection.descriptor is not None:
        out.gallery.append(detection.descriptor)
    out.hits = track.hits + 1
    out.misses = 0
    out.last_camera_id = detection.camera_id
    if detection.from_detector:
        out.last_detection = detection
    return out


def appearance_distance(track: Track, detection: Detection) -> float:
    """1 - best cosine similarity against the track's gallery.

    ROI-only observations carry no descriptor and reuse the track's last
    gallery entry, which makes this term vanish.
    """
    if detection.descriptor is None or not track.gallery:
        return 0.0
    g = np.asarray(track.gallery)
    d = detection.descriptor
    sims = g @ d / (np.linalg.norm(g, axis=1) * np.linalg.norm(d))
    return float(1.0 - sims.max())


def cost_matrix(tracks: Sequence[Track], detections: Sequence[Detection],
                config: TrackerConfig | None = None):
    """Blended association costs and the gate mask."""
    cfg = config or TrackerConfig()
    lam = cfg.appearance_weight
    cost = np.zeros((len(tracks), len(detections)))
    gated = np.zeros((len(tracks), len(detections)), dtype=bool)
    for i, t in enumerate(tracks):
        for j, d in enumerate(detections):
            m2 = mahalanobis_sq(t, d.world_point, cfg.meas_sigma_m)
            gated[i, j] = m2 <= cfg.gate_chi2
            cost[i, j] = lam * math.sqrt(m2) + (1 - lam) * appearance_distance(t, d)
    return cost, gated


def associate(tracks: Sequence[Track], detections: Sequence[Detection],
              config: TrackerConfig | None = None):
    """Optimal gated assignment.

    Returns ``(matches, unmatched_tracks, unmatched_detections)`` with matches
    as (track index, detection index) pairs. The number of gated pairs is
    maximized first, then the total cost minimized.
    """
    if not tracks or not detections:
        return [], list(range(len(tracks))), list(range(len(detections)))
    cost, gated = cost_matrix(tracks, detections, config)
    c = np.where(gated, cost, _INFEASIBLE)
    rows, cols = linear_sum_assignment(c)
    matches = [(int(r), int(k)) for r, k in zip(rows, cols) if gated[r, k]]
    mt = {r for r, _ in matches}
    md = {k for _, k in matches}
    return (sorted(matches), [i for i in range(len(tracks)) if i not in mt],
            [j for j in range(len(detections)) if j not in md])


def prediction_ellipse(track: Track, config: TrackerConfig | None = None) -> PredictionEllipse:
    """95% region for the track position ``horizon`` ms ahead."""
    cfg = config or TrackerConfig()
    ahead = predict(track, cfg.ellipse_horizon_ms, cfg)
    return ellipse_from_covariance(ahead.position, ahead.covariance[:2, :2],
                                   cfg.ellipse_horizon_ms)


def ellipse_from_covariance(center, p: np.ndarray, horizon_ms: float = 200.0,
                            chi2: float = CHI2_2DOF_95) -> PredictionEllipse:
    vals, vecs = np.linalg.eigh(np.asarray(p, dtype=float))
    major = vecs[:, 1]
    angle = math.atan2(major[1], major[0])
    if angle <= -math.pi / 2:
        angle += math.pi
    elif angle > math.pi / 2:
        angle -= math.pi
    axes = (math.sqrt(chi2 * vals[1]), math.sqrt(chi2 * vals[0]))
    return PredictionEllipse((float(center[0]), float(center[1])), axes, angle, horizon_ms)


class Tracker:
    """Owns the track store; all calls are sequential in virtual time."""

    def __init__(self, config: TrackerConfig | None = None):
        self.config = config or TrackerConfig()
        self.tracks: list[Track] = []
        self.next_id = 1
        # detection index -> track id for the most recent step
        self.last_assignment: dict[int, int] = {}

    def live_tracks(self) -> list[Track]:
        return [t for t in self.tracks if t.status != DELETED]

    def confirmed_tracks(self) -> list[Track]:
        return [t for t in self.tracks if t.status == CONFIRMED]

    def _spawn(self, det: Detection, now_ms: float) -> Track:
        cfg = self.config
        r2, v2 = cfg.meas_sigma_m ** 2, cfg.init_vel_sigma ** 2
        t = Track(self.next_id, np.array([*det.world_point, 0.0, 0.0]),
                  np.diag([r2, r2, v2, v2]), now_ms,
                  gallery=deque(maxlen=cfg.gallery_size), last_camera_id=det.camera_id)
        if det.descriptor is not None:
            t.gallery.append(det.descriptor)
        if det.from_detector:
            t.last_detection = det
        self.next_id += 1
        return t

    def step(self, detections: Sequence[Detection], now_ms: float,
             miss_eligible: Callable[[Track], bool] | None = None,
             camera_id: str | None = None) -> list[TrackEvent]:
        """Predict all tracks to ``now_ms``, associate, update and apply lifecycle rules.

        ``miss_eligible`` restricts which unmatched tracks accrue a miss (for
        example only those inside the reporting camera's view).
        """
        cfg = self.config
        events: list[TrackEvent] = []
        live = []
        for t in self.live_tracks():
            if now_ms > t.time_ms:
                t = predict(t, now_ms - t.time_ms, cfg)
            live.append(t)

        matches, unmatched_t, unmatched_d = associate(live, detections, cfg)
        self.last_assignment = {}
        for ti, di in matches:
            self.last_assignment[di] = live[ti].track_id
            t = update(live[ti], detections[di], cfg)
            if t.status == TENTATIVE and t.hits >= cfg.confirm_hits:
                t.status = CONFIRMED
                events.append(TrackEvent("confirmed", t.track_id, now_ms, camera_id))
            live[ti] = t
        for ti in unmatched_t:
            t = live[ti]
            if miss_eligible is None or miss_eligible(t):
                t.misses += 1
                limit = cfg.max_misses if t.status == CONFIRMED else cfg.tentative_max_misses
                if t.misses >= limit:
                    t.status = DELETED
                    events.append(TrackEvent("lost", t.track_id, now_ms, camera_id))
        for di in unmatched_d:
            det = detections[di]
            if not det.from_detector:
                continue
            t = self._spawn(det, now_ms)
            self.last_assignment[di] = t.track_id
            live.append(t)
            events.append(TrackEvent("created", t.track_id, now_ms, camera_id))

        self.tracks = [t for t in live if t.status != DELETED]
        return events


TRACK_LOG_HEADER = "timestamp_ms,track_id,x,y,vx,vy,status,camera_id"


def track_log_row(timestamp_ms: float, t: Track) -> str:
    x, y = t.position
    vx, vy = t.velocity
    return (f"{timestamp_ms:.3f},{t.track_id},{x:.4f},{y:.4f},{vx:.4f},{vy:.4f},"
            f"{t.status},{t.last_camera_id or ''}")
