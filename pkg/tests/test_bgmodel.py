import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from edgecloud import bgmodel as bg
from edgecloud.errors import DimensionMismatch


class ScalarPixelMixture:
    """Reference single-pixel mixture written with plain Python floats and lists."""

    def __init__(self, cfg: bg.MOGConfig):
        self.cfg = cfg
        self.comps = []  # [weight, mean, var], heaviest first

    def step(self, value: float) -> bool:
        """Returns True if ``value`` is foreground."""
        cfg = self.cfg
        a = cfg.learning_rate
        hit = None
        for i, (w, m, v) in enumerate(self.comps):
            if (value - m) * (value - m) <= (cfg.match_sigmas * cfg.match_sigmas) * v:
                hit = i
                break
        fg = True
        if hit is not None:
            covered = 0.0
            for i in range(hit):
                covered = covered + self.comps[i][0]
            fg = not covered < 1.0 - cfg.fg_fraction
        for c in self.comps:
            c[0] = c[0] * (1.0 - a)
        if hit is None:
            if len(self.comps) == cfg.max_components:
                self.comps.pop()
            self.comps.append([a, value, cfg.var_init])
            slot = len(self.comps) - 1
        else:
            self.comps[hit][0] = self.comps[hit][0] + a
            slot = hit
        total = 0.0
        for c in self.comps:
            total = total + c[0]
        for c in self.comps:
            c[0] = c[0] / total
        if hit is not None:
            w, m, v = self.comps[slot]
            rho = a / w
            d = value - m
            self.comps[slot][1] = m + rho * d
            self.comps[slot][2] = min(max(v + rho * (d * d - v), cfg.var_min), cfg.var_max)
        self.comps.sort(key=lambda c: -c[0])
        return fg


def run_reference(frames, cfg):
    h, w = frames[0].shape
    pix = [[ScalarPixelMixture(cfg) for _ in range(w)] for _ in range(h)]
    masks = []
    for f in frames:
        m = np.zeros((h, w), dtype=bool)
        for r in range(h):
            for c in range(w):
                m[r, c] = pix[r][c].step(float(f[r, c]))
        masks.append(m)
    return masks, pix


def run_vectorized(frames, cfg):
    h, w = frames[0].shape
    model = bg.PixelGaussianMixture(w, h, cfg)
    return [bg.update_and_segment(model, bg.Frame(w, h, f, t)) for t, f in enumerate(frames)], model


def synthetic_sequence(n, size=16, seed=7):
    rng = np.random.default_rng(seed)
    frames = []
    for t in range(n):
        f = rng.normal(120, 2, (size, size))
        x0 = (t // 3) % size
        f[4:9, x0:x0 + 4] = 220
        if 100 <= t < 180:
            f[10:14, 2:6] = 60 + rng.normal(0, 5, (4, 4))
        if t % 37 == 0:
            f[rng.integers(0, size), rng.integers(0, size)] = 0
        frames.append(np.clip(np.round(f), 0, 255).astype(np.uint8))
    return frames


def test_oracle_equivalence_16x16_300_frames():
    cfg = bg.MOGConfig()
    frames = synthetic_sequence(300)
    ref, pix = run_reference(frames, cfg)
    vec, model = run_vectorized(frames, cfg)
    for a, b in zip(ref, vec):
        assert np.array_equal(a, b)
    # model state matches as well
    r, c = 5, 7
    comps = pix[r][c].comps
    assert model.weights[r, c, :len(comps)].tolist() == [x[0] for x in comps]
    assert model.means[r, c, :len(comps)].tolist() == [x[1] for x in comps]


def test_stationary_scene_is_background():
    cfg = bg.MOGConfig()
    model = bg.PixelGaussianMixture(20, 20, cfg)
    frame = np.full((20, 20), 100, np.uint8)
    for t in range(200):
        mask = bg.update_and_segment(model, bg.Frame(20, 20, frame, t))
    assert not mask.any()
    assert np.all(np.abs(model.means[..., 0] - 100) < 1)


def test_patch_after_stationary_scene():
    cfg = bg.MOGConfig()
    model = bg.PixelGaussianMixture(20, 20, cfg)
    frame = np.full((20, 20), 100, np.uint8)
    seq = [frame] * 200
    patch = frame.copy()
    patch[5:15, 3:13] = 250
    seq.append(patch)
    ref, _ = run_reference(seq, cfg)
    for t, f in enumerate(seq):
        mask = bg.update_and_segment(model, bg.Frame(20, 20, f, t))
    expected = np.zeros((20, 20), bool)
    expected[5:15, 3:13] = True
    assert np.array_equal(ref[-1], expected)
    assert np.array_equal(mask, expected)


def test_step_change_absorption_time():
    cfg = bg.MOGConfig()
    a = cfg.learning_rate
    # a new component becomes background once the old one's weight (1-a)^k drops below 1-c_f
    predicted = math.ceil(math.log(1 - cfg.fg_fraction) / math.log(1 - a))
    model = bg.PixelGaussianMixture(1, 1, cfg)
    for t in range(100):
        bg.update_and_segment(model, bg.Frame(1, 1, np.array([[100]], np.uint8), t))
    absorbed_at = None
    for k in range(1, 200):
        fg = bg.update_and_segment(model, bg.Frame(1, 1, np.array([[200]], np.uint8), 100 + k))
        if not fg[0, 0]:
            absorbed_at = k
            break
    assert absorbed_at is not None
    assert abs(absorbed_at - predicted) <= 1


def test_weight_simplex_and_variance_bounds():
    cfg = bg.MOGConfig()
    frames = synthetic_sequence(120, size=16, seed=3)
    model = bg.PixelGaussianMixture(16, 16, cfg)
    for t, f in enumerate(frames):
        bg.update_and_segment(model, bg.Frame(16, 16, f, t))
        assert np.all(np.abs(model.weights.sum(-1) - 1) <= 1e-6)
        live = model.weights > 0
        assert np.all(model.variances[live] >= cfg.var_min)
        assert np.all(model.variances[live] <= cfg.var_max)
        assert np.all(model.component_counts <= cfg.max_components)


def test_determinism():
    frames = synthetic_sequence(50, seed=11)
    a, _ = run_vectorized(frames, bg.MOGConfig())
    b, _ = run_vectorized(frames, bg.MOGConfig())
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_dimension_mismatch():
    model = bg.PixelGaussianMixture(8, 8)
    with pytest.raises(DimensionMismatch):
        bg.update_and_segment(model, bg.Frame(4, 4, np.zeros((4, 4), np.uint8)))


# -- morphology ----------------------------------------------------------------

def brute_opening(mask):
    """Opening straight from the set definitions, 3x3 square, outside treated as 0."""
    h, w = mask.shape

    def get(m, r, c):
        return 0 <= r < h and 0 <= c < w and m[r, c]

    ero = np.zeros_like(mask)
    for r in range(h):
        for c in range(w):
            ero[r, c] = all(get(mask, r + dr, c + dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1))
    dil = np.zeros_like(mask)
    for r in range(h):
        for c in range(w):
            dil[r, c] = any(get(ero, r + dr, c + dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1))
    return dil


def test_clean_mask_examples():
    z = np.zeros((30, 30), bool)
    assert not bg.clean_mask(z).any()
    speck = z.copy()
    speck[10, 10] = True
    assert not bg.clean_mask(speck).any()
    block = z.copy()
    block[5:25, 5:25] = True
    assert np.array_equal(bg.clean_mask(block), brute_opening(block))
    assert np.array_equal(bg.clean_mask(block), block)


@given(arrays(bool, (12, 12)))
@settings(max_examples=60, deadline=None)
def test_clean_mask_matches_bruteforce_and_is_idempotent(m):
    once = bg.clean_mask(m)
    assert np.array_equal(once, brute_opening(m))
    assert np.array_equal(bg.clean_mask(once), once)


# -- connected components ------------------------------------------------------

def flood_fill_components(mask):
    h, w = mask.shape
    seen = np.zeros_like(mask)
    comps = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                q = deque([(r, c)])
                seen[r, c] = True
                cells = []
                while q:
                    y, x = q.popleft()
                    cells.append((y, x))
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xx = y + dy, x + dx
                            if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not seen[yy, xx]:
                                seen[yy, xx] = True
                                q.append((yy, xx))
                comps.append(cells)
    return comps


def test_extract_rois_examples():
    z = np.zeros((40, 40), bool)
    assert bg.extract_rois(z) == []
    two = z.copy()
    two[2:12, 2:12] = True
    two[20:30, 25:35] = True
    rois = bg.extract_rois(two)
    assert [r.area for r in rois] == [100, 100]
    diag = z.copy()
    diag[0:10, 0:10] = True
    diag[10:20, 10:20] = True
    rois = bg.extract_rois(diag)
    assert len(rois) == len(flood_fill_components(diag)) == 1
    assert rois[0].area == 200
    assert rois[0].foot_point == (10.0, 20.0)


@given(arrays(bool, (10, 10)), st.integers(0, 6))
@settings(max_examples=60, deadline=None)
def test_extract_rois_matches_flood_fill(m, min_area):
    comps = [c for c in flood_fill_components(m) if len(c) >= min_area]
    rois = bg.extract_rois(m, min_area)
    assert sorted(r.area for r in rois) == sorted(len(c) for c in comps)
    boxes = set()
    for c in comps:
        ys, xs = zip(*c)
        boxes.add((min(xs), min(ys), max(xs) - min(xs) + 1, max(ys) - min(ys) + 1))
    assert {r.bbox for r in rois} == boxes
    assert [r.area for r in rois] == sorted((r.area for r in rois), reverse=True)


def test_min_area_scales_with_resolution():
    assert bg.min_area_for(640) == 50
    assert bg.min_area_for(320) == pytest.approx(12.5)
    assert bg.min_area_for(1280) == pytest.approx(200)


def test_pgm_dump(tmp_path):
    m = np.zeros((3, 4), bool)
    m[1, 2] = True
    bg.write_pgm(m, tmp_path / "m.pgm")
    data = (tmp_path / "m.pgm").read_bytes()
    assert data.startswith(b"P5\n4 3\n255\n")
    assert data[-12:][6] == 255
