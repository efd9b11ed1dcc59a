"""Ground-plane geometry: homography estimation (DLT), projection and polygons.

Homographies map image pixels to world ground-plane coordinates in meters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateConfiguration,
    ParseError,
    PointAtInfinity,
    TooFewPoints,
    ValidationError,
)

# calibration acceptance threshold; not a published value
DEFAULT_MAX_RMSE_M = 0.25

_COLLINEAR_TOL = 1e-9
_W_EPS = 1e-12


@dataclass(frozen=True)
class Correspondence:
    image_point: tuple[float, float]
    world_point: tuple[float, float]

    def __post_init__(self):
        vals = (*self.image_point, *self.world_point)
        if len(vals) != 4 or not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite or malformed correspondence {self!r}")


def _normalize_matrix(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if abs(m[2, 2]) > _W_EPS * max(1.0, np.abs(m).max()):
        return m / m[2, 2]
    return m / np.linalg.norm(m)


class Homography:
    """3x3 projective map, image plane -> ground plane.

    Stored normalized so that h[2, 2] == 1 (unit Frobenius norm if that entry vanishes).
    """

    __slots__ = ("h",)

    def __init__(self, h):
        h = np.array(h, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(h)):
            raise DegenerateConfiguration("homography has non-finite entries")
        h = _normalize_matrix(h)
        if abs(np.linalg.det(h)) <= 1e-12:
            raise DegenerateConfiguration("homography is singular")
        h.setflags(write=False)
        self.h = h

    def __repr__(self):
        return f"Homography({self.h.tolist()!r})"

    def __eq__(self, other):
        return isinstance(other, Homography) and np.array_equal(self.h, other.h)

    def __hash__(self):
        return hash(self.h.tobytes())

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def rescaled_input(self, sx: float, sy: float) -> "Homography":
        """Homography for images whose pixel grid is scaled by (1/sx, 1/sy).

        A pixel (u, v) of the new grid corresponds to (sx*u, sy*v) on the original one.
        """
        return Homography(self.h @ np.diag([sx, sy, 1.0]))

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))


def project(h: Homography, p) -> tuple[float, float]:
    x, y = float(p[0]), float(p[1])
    m = h.h
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(w) < _W_EPS:
        raise PointAtInfinity(f"point {p} maps to the line at infinity")
    return ((m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w,
            (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w)


def project_points(h: Homography, pts) -> np.ndarray:
    """Vectorized ``project`` over an (N, 2) array."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    ph = np.column_stack([pts, np.ones(len(pts))]) @ h.h.T
    w = ph[:, 2]
    if np.any(np.abs(w) < _W_EPS):
        raise PointAtInfinity("a point maps to the line at infinity")
    return ph[:, :2] / w[:, None]


def hartley_transform(pts: np.ndarray) -> np.ndarray:
    """Similarity taking ``pts`` to centroid 0 and mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.mean(np.linalg.norm(pts - c, axis=1))
    if d < 1e-12:
        raise DegenerateConfiguration("points are coincident")
    s = math.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _collinear(a, b, c) -> bool:
    ab = np.subtract(b, a)
    ac = np.subtract(c, a)
    cross = ab[0] * ac[1] - ab[1] * ac[0]
    return abs(cross) <= _COLLINEAR_TOL * np.linalg.norm(ab) * np.linalg.norm(ac) or (
        np.linalg.norm(ab) == 0 or np.linalg.norm(ac) == 0)


def _check_configuration(img: np.ndarray, wld: np.ndarray):
    n = len(img)
    for pts, name in ((img, "image"), (wld, "world")):
        # exact duplicates make the system rank deficient
        if len(np.unique(pts, axis=0)) < n:
            raise DegenerateConfiguration(f"duplicate {name} points")
        if n == 4:
            for i, j, k in combinations(range(4), 3):
                if _collinear(pts[i], pts[j], pts[k]):
                    raise DegenerateConfiguration(f"three collinear {name} points in minimal set")


def dlt_rows(x: np.ndarray, xp: np.ndarray, rows: int = 2) -> np.ndarray:
    """Linear constraints x' cross (H x) = 0 for one homogeneous pair.

    With ``rows=3`` the (linearly dependent) third equation is kept as well.
    """
    chi, phi, omega = xp
    z = np.zeros(3)
    eqs = [
        np.concatenate([z, -omega * x, phi * x]),
        np.concatenate([omega * x, z, -chi * x]),
        np.concatenate([-phi * x, chi * x, z]),
    ]
    return np.array(eqs[:rows])


def estimate_homography(correspondences: Sequence[Correspondence], *, rows: int = 2,
                        normalize: bool = True) -> Homography:
    """Least-squares DLT estimate of the image->world homography.

    The stacked system is solved for its smallest right singular vector. With
    ``normalize`` (default) both point sets are Hartley-normalized first.
    """
    if rows not in (2, 3):
        raise ValueError("rows must be 2 or 3")
    if len(correspondences) < 4:
        raise TooFewPoints(f"need at least 4 correspondences, got {len(correspondences)}")
    img = np.array([c.image_point for c in correspondences], dtype=float)
    wld = np.array([c.world_point for c in correspondences], dtype=float)
    _check_configuration(img, wld)

    if normalize:
        t_img, t_wld = hartley_transform(img), hartley_transform(wld)
    else:
        t_img = t_wld = np.eye(3)
    img_h = np.column_stack([img, np.ones(len(img))]) @ t_img.T
    wld_h = np.column_stack([wld, np.ones(len(wld))]) @ t_wld.T

    a = np.vstack([dlt_rows(x, xp, rows) for x, xp in zip(img_h, wld_h)])
    _, s, vt = np.linalg.svd(a)
    if s[7] <= 1e-10 * s[0]:
        raise DegenerateConfiguration("DLT system has a multi-dimensional null space")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_wld) @ hn @ t_img
    return Homography(h)


def reprojection_rmse(h: Homography, correspondences: Sequence[Correspondence]) -> float:
    """Root-mean-square world-space residual, in meters."""
    if not correspondences:
        raise ValueError("need at least one correspondence")
    img = np.array([c.image_point for c in correspondences], dtype=float)
    wld = np.array([c.world_point for c in correspondences], dtype=float)
    res = project_points(h, img) - wld
    return float(np.sqrt(np.mean(np.sum(res ** 2, axis=1))))


# -- polygons ---------------------------------------------------------------

SECURED_AREA = "secured_area"
CAMERA_FOV = "camera_fov"


def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if v == 0 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
                and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return ((o1 == 0 and on_seg(p1, p2, q1)) or (o2 == 0 and on_seg(p1, p2, q2))
            or (o3 == 0 and on_seg(q1, q2, p1)) or (o4 == 0 and on_seg(q1, q2, p2)))


@dataclass(frozen=True)
class PerimeterPolygon:
    vertices: tuple[tuple[float, float], ...]
    kind: str = SECURED_AREA
    name: str = field(default="", compare=False)

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        object.__setattr__(self, "vertices", verts)
        problems = polygon_problems(verts)
        if self.kind not in (SECURED_AREA, CAMERA_FOV):
            problems.append(f"unknown polygon kind {self.kind!r}")
        if problems:
            raise ValidationError(problems)

    def edges(self):
        v = self.vertices
        return [(v[i], v[(i + 1) % len(v)]) for i in range(len(v))]

    def reversed(self) -> "PerimeterPolygon":
        return PerimeterPolygon(self.vertices[::-1], self.kind, self.name)

    def centroid(self) -> tuple[float, float]:
        v = np.array(self.vertices)
        x, y = v[:, 0], v[:, 1]
        xn, yn = np.roll(x, -1), np.roll(y, -1)
        cross = x * yn - xn * y
        area = cross.sum() / 2.0
        if abs(area) < 1e-15:
            return tuple(v.mean(axis=0))
        return (float(((x + xn) * cross).sum() / (6 * area)),
                float(((y + yn) * cross).sum() / (6 * area)))


def polygon_problems(verts) -> list[str]:
    problems = []
    if len(verts) < 3:
        problems.append(f"polygon needs at least 3 vertices, got {len(verts)}")
        return problems
    if not all(math.isfinite(c) for v in verts for c in v):
        problems.append("polygon has non-finite coordinates")
        return problems
    n = len(verts)
    edges = [(verts[i], verts[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            adjacent = j == i + 1 or (i == 0 and j == n - 1)
            if adjacent:
                continue
            if _segments_intersect(*edges[i], *edges[j]):
                problems.append(f"polygon edges {i} and {j} intersect (not simple)")
                return problems
    if len(set(verts)) < n:
        problems.append("polygon has repeated vertices")
    return problems


def _point_on_segment(p, a, b, tol=1e-12) -> bool:
    ax, ay = a
    bx, by = b
    px, py = p
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    scale = max(1.0, abs(bx - ax) + abs(by - ay))
    if abs(cross) > tol * scale * scale:
        return False
    return (min(ax, bx) - tol <= px <= max(ax, bx) + tol
            and min(ay, by) - tol <= py <= max(ay, by) + tol)


def contains(poly: PerimeterPolygon, p) -> bool:
    """Even-odd point-in-polygon test; boundary points are inside."""
    px, py = float(p[0]), float(p[1])
    inside = False
    for a, b in poly.edges():
        if _point_on_segment((px, py), a, b):
            return True
        (ax, ay), (bx, by) = a, b
        if (ay > py) != (by > py):
            x_cross = ax + (py - ay) * (bx - ax) / (by - ay)
            if px < x_cross:
                inside = not inside
    return inside


def polygons_intersect(a: PerimeterPolygon, b: PerimeterPolygon) -> bool:
    if any(contains(b, v) for v in a.vertices) or any(contains(a, v) for v in b.vertices):
        return True
    return any(_segments_intersect(*ea, *eb) for ea in a.edges() for eb in b.edges())


def _segment_distance_to_origin(a: np.ndarray, b: np.ndarray) -> float:
    d = b - a
    dd = float(d @ d)
    t = 0.0 if dd == 0 else min(1.0, max(0.0, -float(a @ d) / dd))
    return float(np.linalg.norm(a + t * d))


def ellipse_intersects_polygon(center, axes, orientation: float, poly: PerimeterPolygon) -> bool:
    """True when the filled ellipse and the filled polygon share a point.

    The polygon is mapped into the ellipse's whitened frame, where the ellipse
    is the unit disc.
    """
    c, s = math.cos(orientation), math.sin(orientation)
    rot_t = np.array([[c, s], [-s, c]])
    scale = np.diag([1.0 / axes[0], 1.0 / axes[1]])
    verts = (np.asarray(poly.vertices) - np.asarray(center, dtype=float)) @ (scale @ rot_t).T
    n = len(verts)
    local = PerimeterPolygon(tuple(map(tuple, verts)), poly.kind)
    if contains(local, (0.0, 0.0)):
        return True
    return any(_segment_distance_to_origin(verts[i], verts[(i + 1) % n]) <= 1.0
               for i in range(n))


# -- file formats -----------------------------------------------------------

def parse_correspondences(text: str) -> list[Correspondence]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 4:
            raise ParseError(f"expected 4 fields, got {len(fields)}", line=lineno)
        try:
            vals = [float(f) for f in fields]
        except ValueError as exc:
            raise ParseError(f"not a decimal: {exc}", line=lineno) from None
        try:
            out.append(Correspondence((vals[0], vals[1]), (vals[2], vals[3])))
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
    return out


def read_correspondences(path) -> list[Correspondence]:
    return parse_correspondences(Path(path).read_text(encoding="utf-8"))


def format_correspondences(corrs: Iterable[Correspondence]) -> str:
    lines = ["# img_x img_y world_x world_y"]
    for c in corrs:
        lines.append(" ".join(repr(float(v)) for v in (*c.image_point, *c.world_point)))
    return "\n".join(lines) + "\n"


def format_homography(h: Homography) -> str:
    return " ".join(repr(float(v)) for v in h.h.ravel()) + "\n"


def parse_homography(text: str) -> Homography:
    values = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            values.extend(float(f) for f in line.split())
        except ValueError as exc:
            raise ParseError(f"not a decimal: {exc}", line=lineno) from None
    if len(values) != 9:
        raise ParseError(f"homography needs 9 values, got {len(values)}")
    return Homography(np.array(values).reshape(3, 3))


def read_homography(path) -> Homography:
    return parse_homography(Path(path).read_text(encoding="utf-8"))


def write_homography(h: Homography, path):
    Path(path).write_text(format_homography(h), encoding="utf-8")
