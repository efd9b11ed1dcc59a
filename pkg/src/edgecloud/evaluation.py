"""CLEAR-MOT metrics on the ground plane and the run output bundle."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EmptyGroundTruth, ParseError

METRICS_HEADER = ["MOTA", "MOTP", "MT", "ML", "FN", "FP", "ID"]
BUNDLE_FILES = ("tracks.csv", "node_events.csv", "commands.csv", "bandwidth.csv",
                "deliveries.csv", "summary.json")


@dataclass(frozen=True)
class GroundTruthTrack:
    actor_id: str
    samples: tuple[tuple[float, tuple[float, float]], ...]
    authorized: bool = False

    def __post_init__(self):
        times = [t for t, _ in self.samples]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"ground truth for {self.actor_id} is not strictly increasing in time")


@dataclass(frozen=True)
class MotReport:
    MOTA: float
    MOTP: float
    MT: float
    ML: float
    FN: float
    FP: float
    ID: int
    ID_pct: float
    gt_total: int
    mean_distance_m: float

    def row(self) -> list[str]:
        return [f"{self.MOTA:.4f}", f"{self.MOTP:.4f}", f"{self.MT:.4f}", f"{self.ML:.4f}",
                f"{self.FN:.4f}", f"{self.FP:.4f}", str(self.ID)]


def euclidean(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def iou_distance(a, b) -> float:
    """1 - IoU for (x, y, w, h) boxes, for image-plane hypotheses."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return 1.0 - (inter / union if union > 0 else 0.0)


def match_frame(gt: Mapping, hyp: Mapping, threshold: float = 1.0,
                previous: Mapping | None = None, distance=euclidean) -> dict:
    """Match one frame. Returns {gt_id: (hyp_id, distance)}.

    Correspondences from the previous frame are kept while still within the
    threshold; the rest are assigned to maximize the number of pairs within
    the threshold and, among those, minimize the summed distance.
    """
    out = {}
    used = set()
    for g, h in (previous or {}).items():
        if g in gt and h in hyp:
            d = distance(gt[g], hyp[h])
            if d <= threshold:
                out[g] = (h, d)
                used.add(h)
    g_ids = [g for g in gt if g not in out]
    h_ids = [h for h in hyp if h not in used]
    if not g_ids or not h_ids:
        return out
    d = np.array([[distance(gt[g], hyp[h]) for h in h_ids] for g in g_ids], dtype=float)
    feasible = d <= threshold
    penalty = (min(d.shape) + 1) * (threshold + 1.0)
    rows, cols = linear_sum_assignment(np.where(feasible, d, penalty))
    for r, c in zip(rows, cols):
        if feasible[r, c]:
            out[g_ids[r]] = (h_ids[c], float(d[r, c]))
    return out


def frames_from_tracks(tracks: Sequence[GroundTruthTrack]) -> dict[float, dict]:
    frames: dict[float, dict] = {}
    for tr in tracks:
        for t, p in tr.samples:
            frames.setdefault(t, {})[tr.actor_id] = p
    return frames


def compute_mot(gt_frames: Mapping[float, Mapping], hyp_frames: Mapping[float, Mapping],
                threshold: float = 1.0, distance=euclidean) -> MotReport:
    """CLEAR-MOT over aligned timestamps; frames map object id -> position."""
    times = sorted(set(gt_frames) | set(hyp_frames))
    gt_total = sum(len(gt_frames.get(t, {})) for t in times)
    if gt_total == 0:
        raise EmptyGroundTruth("ground truth has no objects")
    fn = fp = idsw = 0
    sims, dists = [], []
    previous: dict = {}
    last_label: dict = {}
    life: dict = {}
    covered: dict = {}
    for t in times:
        gt = gt_frames.get(t, {})
        hyp = hyp_frames.get(t, {})
        m = match_frame(gt, hyp, threshold, previous, distance)
        for g in gt:
            life[g] = life.get(g, 0) + 1
        for g, (h, d) in m.items():
            covered[g] = covered.get(g, 0) + 1
            if g in last_label and last_label[g] != h:
                idsw += 1
            last_label[g] = h
            sims.append(1.0 - d / threshold)
            dists.append(d)
        fn += len(gt) - len(m)
        fp += len(hyp) - len(m)
        previous = {g: h for g, (h, _) in m.items()}
    n_tracks = len(life)
    ratios = [covered.get(g, 0) / life[g] for g in life]
    return MotReport(
        MOTA=100.0 * (1.0 - (fn + fp + idsw) / gt_total),
        MOTP=100.0 * float(np.mean(sims)) if sims else 0.0,
        MT=100.0 * sum(r >= 0.8 for r in ratios) / n_tracks,
        ML=100.0 * sum(r <= 0.2 for r in ratios) / n_tracks,
        FN=100.0 * fn / gt_total,
        FP=100.0 * fp / gt_total,
        ID=idsw,
        ID_pct=100.0 * idsw / gt_total,
        gt_total=gt_total,
        mean_distance_m=float(np.mean(dists)) if dists else float("nan"),
    )


def metrics_csv(report: MotReport) -> str:
    return ",".join(METRICS_HEADER) + "\n" + ",".join(report.row()) + "\n"


# -- position CSVs for the mot command ---------------------------------------------------

def parse_positions_csv(text: str) -> dict[float, dict]:
    """``timestamp_ms,id,x,y`` rows (header required) into frames."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise ParseError("empty file", line=1)
    cols = [h.strip() for h in header]
    need = ["timestamp_ms", "x", "y"]
    id_col = "track_id" if "track_id" in cols else "id" if "id" in cols else "actor_id"
    for c in need + [id_col]:
        if c not in cols:
            raise ParseError(f"missing column {c!r}", line=1, field=c)
    idx = {c: cols.index(c) for c in need + [id_col]}
    status_i = cols.index("status") if "status" in cols else None
    frames: dict[float, dict] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or row[0].startswith("#"):
            continue
        if status_i is not None and row[status_i] != "confirmed":
            continue
        try:
            t = float(row[idx["timestamp_ms"]])
            p = (float(row[idx["x"]]), float(row[idx["y"]]))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad row: {exc}", line=lineno) from None
        frames.setdefault(t, {})[row[idx[id_col]]] = p
    return frames


def positions_csv(frames: Mapping[float, Mapping], id_name: str = "id") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp_ms", id_name, "x", "y"])
    for t in sorted(frames):
        for k in sorted(frames[t]):
            x, y = frames[t][k]
            w.writerow([f"{t:.6f}", k, f"{x:.4f}", f"{y:.4f}"])
    return buf.getvalue()


# -- output bundle -------------------------------------------------------------------------

def run_report(out_dir, *, mot: MotReport | None, bandwidth, csvs: Mapping[str, str],
               dwell_ms: Mapping[str, Mapping[int, float]], extra: Mapping | None = None) -> Path:
    """Write the CSVs and ``summary.json``. Output is a pure function of the inputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    expected = set(BUNDLE_FILES) - {"summary.json"}
    if set(csvs) != expected:
        raise ValueError(f"bundle needs exactly {sorted(expected)}, got {sorted(csvs)}")
    for name in sorted(csvs):
        (out / name).write_text(csvs[name], encoding="utf-8")
    summary = {
        "reduction_pct": bandwidth.reduction_pct,
        "reduction_fraction": f"{bandwidth.reduction.numerator}/{bandwidth.reduction.denominator}",
        "total_MB": bandwidth.total_mb,
        "baseline_MB": bandwidth.baseline_mb,
        "mode_dwell_ms": {cam: {str(lvl): float(v) for lvl, v in sorted(d.items())}
                          for cam, d in sorted(dwell_ms.items())},
        "mot": None if mot is None else _finite(asdict(mot)),
    }
    if extra:
        summary.update(extra)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    return out


def _finite(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}
