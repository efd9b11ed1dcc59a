"""Per-pixel adaptive Mixture-of-Gaussians background subtraction.

Each pixel keeps up to ``max_components`` weighted 1-D Gaussians, kept sorted
by weight. A pixel is background when the component it matches belongs to
the heaviest set of components whose cumulative weight reaches
``1 - fg_fraction``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch

MODE1_WIDTH = 640


@dataclass(frozen=True)
class MOGConfig:
    max_components: int = 5
    learning_rate: float = 0.005
    match_sigmas: float = 3.0
    fg_fraction: float = 0.1
    var_init: float = 225.0
    var_min: float = 4.0
    var_max: float = 5000.0
    open_iterations: int = 1
    min_area_mode1: float = 50.0
    warmup_frames: int = 30


@dataclass(frozen=True)
class Frame:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) uint8
    timestamp_ms: float = 0.0

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width):
            raise DimensionMismatch(
                f"pixel grid {self.pixels.shape} does not match {self.width}x{self.height}")


@dataclass(frozen=True)
class RegionOfInterest:
    x: int
    y: int
    w: int
    h: int
    area: int

    @property
    def foot_point(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, float(self.y + self.h))

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


class PixelGaussianMixture:
    """Mixture state for a whole frame: arrays of shape (height, width, K)."""

    def __init__(self, width: int, height: int, config: MOGConfig | None = None):
        self.config = config or MOGConfig()
        self.reset(width, height)

    def reset(self, width: int, height: int):
        k = self.config.max_components
        self.width, self.height = width, height
        self.weights = np.zeros((height, width, k))
        self.means = np.zeros((height, width, k))
        self.variances = np.full((height, width, k), self.config.var_init)
        self.frames_seen = 0

    @property
    def component_counts(self) -> np.ndarray:
        return np.count_nonzero(self.weights > 0, axis=-1)

    def warming_up(self) -> bool:
        return self.frames_seen < self.config.warmup_frames


def update_and_segment(model: PixelGaussianMixture, frame: Frame) -> np.ndarray:
    """Classify ``frame`` against ``model`` then fold it into the model.

    Returns a boolean foreground mask of shape (height, width).
    """
    if (frame.width, frame.height) != (model.width, model.height):
        raise DimensionMismatch(
            f"frame {frame.width}x{frame.height} vs model {model.width}x{model.height}")
    cfg = model.config
    k_max = cfg.max_components
    alpha = cfg.learning_rate
    thresh_d2 = cfg.match_sigmas * cfg.match_sigmas
    bg_cover = 1.0 - cfg.fg_fraction

    w, mu, var = model.weights, model.means, model.variances
    x = frame.pixels.astype(np.float64)
    xk = x[..., None]

    active = w > 0
    diff = xk - mu
    match = active & (diff * diff <= thresh_d2 * var)
    matched = match.any(axis=-1)
    m_idx = np.argmax(match, axis=-1)[..., None]

    # cumulative weight in front of each component, summed in index order
    cum_before = np.empty_like(w)
    acc = np.zeros(x.shape)
    for k in range(k_max):
        cum_before[..., k] = acc
        acc = acc + w[..., k]
    in_bg_set = cum_before < bg_cover
    background = matched & np.take_along_axis(in_bg_set, m_idx, -1)[..., 0]

    w *= (1.0 - alpha)
    n_active = np.count_nonzero(active, axis=-1)
    slot = np.where(matched, m_idx[..., 0], np.minimum(n_active, k_max - 1))[..., None]

    w_slot = np.take_along_axis(w, slot, -1)
    w_slot = np.where(matched[..., None], w_slot + alpha, alpha)
    np.put_along_axis(w, slot, w_slot, -1)

    new = ~matched[..., None]
    mu_slot = np.take_along_axis(mu, slot, -1)
    var_slot = np.take_along_axis(var, slot, -1)
    mu_slot = np.where(new, xk, mu_slot)
    var_slot = np.where(new, cfg.var_init, var_slot)

    total = w[..., 0].copy()
    for k in range(1, k_max):
        total = total + w[..., k]
    w /= total[..., None]

    rho = alpha / np.take_along_axis(w, slot, -1)
    d = xk - mu_slot
    upd_mu = mu_slot + rho * d
    upd_var = np.minimum(np.maximum(var_slot + rho * (d * d - var_slot), cfg.var_min), cfg.var_max)
    mu_slot = np.where(new, mu_slot, upd_mu)
    var_slot = np.where(new, var_slot, upd_var)
    np.put_along_axis(mu, slot, mu_slot, -1)
    np.put_along_axis(var, slot, var_slot, -1)

    order = np.argsort(-w, axis=-1, kind="stable")
    model.weights = np.take_along_axis(w, order, -1)
    model.means = np.take_along_axis(mu, order, -1)
    model.variances = np.take_along_axis(var, order, -1)
    model.frames_seen += 1
    return ~background


_SQUARE = np.ones((3, 3), dtype=bool)


def clean_mask(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Morphological opening with a 3x3 square."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    return ndimage.binary_opening(mask, structure=_SQUARE, iterations=iterations,
                                  border_value=0)


def min_area_for(width: int, config: MOGConfig | None = None) -> float:
    cfg = config or MOGConfig()
    return cfg.min_area_mode1 * (width / MODE1_WIDTH) ** 2


def extract_rois(mask: np.ndarray, min_area: float = 0.0) -> list[RegionOfInterest]:
    """8-connected components of ``mask`` as ROIs, largest first."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_SQUARE)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    rois = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        area = int(areas[lab])
        if area < min_area:
            continue
        ys, xs = sl
        rois.append(RegionOfInterest(xs.start, ys.start, xs.stop - xs.start,
                                     ys.stop - ys.start, area))
    rois.sort(key=lambda r: (-r.area, r.y, r.x))
    return rois


def write_pgm(mask: np.ndarray, path):
    """Dump a mask as binary PGM (P5), foreground white."""
    img = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
