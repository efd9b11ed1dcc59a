"""Stochastic stand-ins for the neural components.

Person classification, appearance descriptors and face identification are
modeled as seeded noise channels whose quality depends on the operating mode
(detection, descriptors) or on face size in pixels (identification).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import geometry as geo
from .bgmodel import RegionOfInterest
from .errors import InvalidFaceSize, NonPositiveDistance, ParseError

DESCRIPTOR_DIM = 128

FNR_LOW_PX, FNR_LOW = 8, 1.0
FNR_HIGH_PX, FNR_HIGH = 63, 1e-5


@dataclass(frozen=True)
class PerceptionConfig:
    iou_threshold: float = 0.3
    # indexed by mode level 0, 1, 2
    p_fn: tuple[float, float, float] = (0.05, 0.03, 0.02)
    p_fp: tuple[float, float, float] = (0.04, 0.02, 0.01)
    sigma_app: tuple[float, float, float] = (0.20, 0.10, 0.05)
    noise: bool = True
    face_k: float = 0.12
    fpr: float = 1e-6
    # a failed match only establishes "unknown" when the face was this reliable
    reliable_fnr: float = 1e-3

    def without_noise(self) -> "PerceptionConfig":
        return PerceptionConfig(**{**self.__dict__, "noise": False,
                                   "sigma_app": (0.0, 0.0, 0.0)})


@dataclass(frozen=True)
class Detection:
    camera_id: str
    bbox: tuple[float, float, float, float]
    confidence: float
    descriptor: np.ndarray | None
    world_point: tuple[float, float]
    timestamp_ms: float
    # simulation truth tag; never used by the tracker, only by the face channel stand-in
    actor_id: str | None = None
    from_detector: bool = True


@dataclass(frozen=True)
class ActorView:
    """Ground-truth image footprint of an actor in one camera frame."""
    actor_id: str
    bbox: tuple[float, float, float, float]
    latent: np.ndarray


@dataclass(frozen=True)
class WatchlistEntry:
    subject_id: str
    authorized: bool
    latent: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class Subject:
    subject_id: str
    latent: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class IdentityVerdict:
    subject_id: str | None
    authorized: bool
    face_pixels: int
    match_score: float

    def __post_init__(self):
        if self.subject_id is None and self.authorized:
            raise ValueError("an unknown subject cannot be authorized")

    @property
    def unknown(self) -> bool:
        return self.subject_id is None


def unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def latent_from_seed(seed: int) -> np.ndarray:
    return unit(np.random.default_rng(seed).standard_normal(DESCRIPTOR_DIM))


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def make_descriptor(latent: np.ndarray, level: int, rng: np.random.Generator,
                    config: PerceptionConfig | None = None) -> np.ndarray:
    cfg = config or PerceptionConfig()
    # sigma_app is the expected norm of the perturbation, spread over all components
    sigma = cfg.sigma_app[level] / math.sqrt(DESCRIPTOR_DIM)
    noise = rng.standard_normal(DESCRIPTOR_DIM)
    if sigma == 0:
        return np.array(latent, dtype=float)
    return unit(latent + sigma * noise)


def classify_rois(rois: Sequence[RegionOfInterest], actors: Sequence[ActorView], level: int,
                  rng: np.random.Generator, *, camera_id: str, timestamp_ms: float,
                  homography: geo.Homography, frame_size: tuple[int, int],
                  config: PerceptionConfig | None = None) -> list[Detection]:
    """Label ROIs as people using the ground-truth footprints.

    ROIs and actors are paired one-to-one, best IoU first, subject to the IoU
    threshold. With noise enabled each true detection is dropped with the
    mode's miss rate and one spurious detection is injected with the mode's
    false-positive rate.
    """
    cfg = config or PerceptionConfig()
    pairs = []
    for ri, roi in enumerate(rois):
        for ai, actor in enumerate(actors):
            o = iou(roi.bbox, actor.bbox)
            if o >= cfg.iou_threshold:
                pairs.append((-o, ri, ai))
    pairs.sort()
    used_r, used_a = set(), set()
    matched = []
    for neg_o, ri, ai in pairs:
        if ri in used_r or ai in used_a:
            continue
        used_r.add(ri)
        used_a.add(ai)
        matched.append((ri, ai, -neg_o))
    matched.sort()

    out = []
    for ri, ai, overlap in matched:
        roi, actor = rois[ri], actors[ai]
        if cfg.noise and rng.random() < cfg.p_fn[level]:
            continue
        desc = make_descriptor(actor.latent, level, rng, cfg)
        out.append(Detection(camera_id, roi.bbox, 0.5 + 0.5 * overlap, desc,
                             geo.project(homography, roi.foot_point), timestamp_ms,
                             actor.actor_id, True))
    if cfg.noise and rng.random() < cfg.p_fp[level]:
        width, height = frame_size
        bw = rng.uniform(0.03, 0.08) * width
        bh = min(height - 1.0, 2.5 * bw)
        bx = rng.uniform(0, width - bw)
        by = rng.uniform(0, height - bh)
        bbox = (bx, by, bw, bh)
        foot = (bx + bw / 2, by + bh)
        try:
            wp = geo.project(homography, foot)
        except Exception:
            wp = None
        desc = unit(rng.standard_normal(DESCRIPTOR_DIM))
        if wp is not None and all(math.isfinite(c) for c in wp):
            out.append(Detection(camera_id, bbox, float(rng.uniform(0.5, 1.0)), desc, wp,
                                 timestamp_ms, None, True))
    return out


def roi_detections(rois: Sequence[RegionOfInterest], *, camera_id: str, timestamp_ms: float,
                   homography: geo.Homography) -> list[Detection]:
    """Unclassified ROI-only observations used between detector frames."""
    out = []
    for roi in rois:
        out.append(Detection(camera_id, roi.bbox, 0.0, None,
                             geo.project(homography, roi.foot_point), timestamp_ms,
                             None, False))
    return out


def fnr_at(face_pixels: float) -> float:
    """False-negative rate at FPR 1e-6, log-linear in FNR over log face size."""
    if face_pixels <= FNR_LOW_PX:
        return FNR_LOW
    if face_pixels >= FNR_HIGH_PX:
        return FNR_HIGH
    frac = math.log(face_pixels / FNR_LOW_PX) / math.log(FNR_HIGH_PX / FNR_LOW_PX)
    log_fnr = math.log10(FNR_LOW) + frac * (math.log10(FNR_HIGH) - math.log10(FNR_LOW))
    return 10.0 ** log_fnr


def face_pixels_for(distance_m: float, image_height: int, k: float = 0.12) -> int:
    if not distance_m > 0:
        raise NonPositiveDistance(f"distance must be positive, got {distance_m}")
    return max(1, int(math.floor(k * image_height / distance_m + 0.5)))


def identify_face(subject: Subject, face_pixels: int, watchlist: Sequence[WatchlistEntry],
                  rng: np.random.Generator,
                  config: PerceptionConfig | None = None) -> IdentityVerdict:
    """One identification attempt against the watchlist.

    Always consumes three uniforms so the random stream advances identically
    whatever the outcome.
    """
    cfg = config or PerceptionConfig()
    if face_pixels < 1:
        raise InvalidFaceSize(f"face size must be >= 1 px, got {face_pixels}")
    if not watchlist:
        raise ValueError("watchlist is empty")
    u_true, u_false, u_pick = rng.random(3)
    own = next((e for e in watchlist if e.subject_id == subject.subject_id), None)
    if own is not None and u_true < 1.0 - fnr_at(face_pixels):
        return IdentityVerdict(own.subject_id, own.authorized, face_pixels,
                               _cosine(subject.latent, own.latent))
    others = [e for e in watchlist if e.subject_id != subject.subject_id]
    if others and u_false < cfg.fpr:
        wrong = others[min(int(u_pick * len(others)), len(others) - 1)]
        return IdentityVerdict(wrong.subject_id, wrong.authorized, face_pixels,
                               _cosine(subject.latent, wrong.latent))
    return IdentityVerdict(None, False, face_pixels, 0.0)


def _cosine(a, b) -> float:
    return float(max(0.0, min(1.0, np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


# -- watchlist file --------------------------------------------------------------

def parse_watchlist(text: str) -> list[WatchlistEntry]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 2 + DESCRIPTOR_DIM:
            raise ParseError(f"expected {2 + DESCRIPTOR_DIM} fields, got {len(fields)}",
                             line=lineno)
        if fields[1] not in ("0", "1"):
            raise ParseError("authorized flag must be 0 or 1", line=lineno, field="authorized")
        try:
            latent = np.array([float(f) for f in fields[2:]])
        except ValueError as exc:
            raise ParseError(f"not a decimal: {exc}", line=lineno) from None
        out.append(WatchlistEntry(fields[0], fields[1] == "1", latent))
    return out


def read_watchlist(path) -> list[WatchlistEntry]:
    return parse_watchlist(Path(path).read_text(encoding="utf-8"))


def format_watchlist(entries: Sequence[WatchlistEntry]) -> str:
    lines = []
    for e in entries:
        vals = " ".join(repr(float(v)) for v in e.latent)
        lines.append(f"{e.subject_id} {int(e.authorized)} {vals}")
    return "\n".join(lines) + "\n"
