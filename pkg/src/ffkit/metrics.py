"""Rotated-box IoU, per-class average precision and range/orientation errors."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import FrameMismatch
from .geometry import TWO_PI, Box3D, bev_corners

# per-class IoU thresholds used for the tractor-road evaluation
TRACTOR_ROAD_THRESHOLDS = {
    "Car": 0.7,
    "People": 0.5,
    "Cyclist": 0.5,
    "Bicycle": 0.5,
    "Truck": 0.7,
    "Freight_Tricycle": 0.6,
}
KITTI_THRESHOLDS = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of ``subject`` inside convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0.0:
                if s_prev < 0.0:
                    t = s_prev / (s_prev - s_cur)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif s_prev >= 0.0:
                t = s_prev / (s_prev - s_cur)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, s_prev = cur, s_cur
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _far_apart(a: Box3D, b: Box3D) -> bool:
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    return math.hypot(a.x - b.x, a.z - b.z) > ra + rb


def _box_key(b: Box3D) -> tuple:
    return (b.x, b.y, b.z, b.l, b.w, b.h, b.yaw)


def bev_intersection(a: Box3D, b: Box3D) -> float:
    if _far_apart(a, b):
        return 0.0
    # fixed clipping order so swapping the arguments gives bit-identical results
    if _box_key(b) < _box_key(a):
        a, b = b, a
    return max(0.0, polygon_area(clip_convex(bev_corners(a), bev_corners(b))))


def _same_box(a: Box3D, b: Box3D) -> bool:
    return _box_key(a) == _box_key(b)


def iou_bev(a: Box3D, b: Box3D) -> float:
    if _same_box(a, b):
        return 1.0
    inter = bev_intersection(a, b)
    union = a.l * a.w + b.l * b.w - inter
    return float(min(1.0, max(0.0, inter / union))) if union > 0 else 0.0


def vertical_overlap(a: Box3D, b: Box3D) -> float:
    lo = max(a.y - a.h / 2.0, b.y - b.h / 2.0)
    hi = min(a.y + a.h / 2.0, b.y + b.h / 2.0)
    return max(0.0, hi - lo)


def iou_3d(a: Box3D, b: Box3D) -> float:
    if _same_box(a, b):
        return 1.0
    dh = vertical_overlap(a, b)
    if dh <= 0.0:
        return 0.0
    inter = bev_intersection(a, b) * dh
    union = a.l * a.w * a.h + b.l * b.w * b.h - inter
    return float(min(1.0, max(0.0, inter / union))) if union > 0 else 0.0


def distance_error(pred: Box3D | Sequence[float] | float, gt: Box3D | Sequence[float] | float, mode: str = "range") -> float:
    """Absolute difference of sensor ranges (default) or center-to-center distance.

    Plain numbers are read as ranges in meters.
    """

    def center(v):
        if isinstance(v, Box3D):
            return v.center
        return np.atleast_1d(np.asarray(v, dtype=np.float64))

    p, g = center(pred), center(gt)
    if mode == "range":
        return abs(float(np.linalg.norm(p)) - float(np.linalg.norm(g)))
    if mode == "center":
        return float(np.linalg.norm(p - g))
    raise ValueError(f"unknown distance mode {mode!r}")


def orientation_error(pred_yaw: float, gt_yaw: float) -> float:
    d = math.fmod(abs(float(pred_yaw) - float(gt_yaw)), TWO_PI)
    return min(d, TWO_PI - d)


@dataclass
class MatchConfig:
    thresholds: dict[str, float] = field(default_factory=lambda: dict(TRACTOR_ROAD_THRESHOLDS))
    recall_points: int = 40
    distance_mode: str = "range"
    # optional KITTI-style stratification: gt beyond these limits is ignored
    max_occlusion: int | None = None
    max_truncation: float | None = None

    def __post_init__(self):
        for name, t in self.thresholds.items():
            if not 0.0 < t <= 1.0:
                raise ValueError(f"threshold for {name!r} must be in (0, 1], got {t}")
        if self.recall_points not in (11, 40):
            raise ValueError("recall_points must be 11 or 40")

    def recall_grid(self) -> np.ndarray:
        if self.recall_points == 40:
            return np.arange(1, 41) / 40.0
        return np.arange(0, 11) / 10.0

    def threshold(self, cls: str) -> float:
        return self.thresholds.get(cls, 0.5)


class ScoredBox(NamedTuple):
    box: Box3D
    score: float


class GroundTruth(NamedTuple):
    box: Box3D
    occluded: int = 0
    truncated: float = 0.0


def _as_gt(g) -> GroundTruth:
    return g if isinstance(g, GroundTruth) else GroundTruth(g)


def _ignored(g: GroundTruth, cfg: MatchConfig) -> bool:
    if cfg.max_occlusion is not None and g.occluded > cfg.max_occlusion:
        return True
    if cfg.max_truncation is not None and g.truncated > cfg.max_truncation:
        return True
    return False


@dataclass
class ClassMatches:
    """Outcome of greedy matching for one class over all frames."""

    scores: np.ndarray  # ranked detection scores
    tp: np.ndarray  # (D,) bool, ranked order; ignored detections removed
    n_gt: int
    pairs: list[tuple[Box3D, Box3D]]  # (pred, gt) for every true positive


def rank_detections(dets: Mapping[str, Sequence[ScoredBox]], frames: Sequence[str], cls: str):
    """Detections of ``cls`` sorted by descending score; ties broken by (frame order, index)."""
    order = {f: i for i, f in enumerate(frames)}
    flat = [
        (d.score, order[f], j, f, d)
        for f in frames
        for j, d in enumerate(dets.get(f, ()))
        if d.box.label == cls
    ]
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [(f, d) for _, _, _, f, d in flat]


def match_class(
    dets: Mapping[str, Sequence[ScoredBox]],
    gts: Mapping[str, Sequence],
    cls: str,
    cfg: MatchConfig,
    iou_fn: Callable[[Box3D, Box3D], float] = iou_3d,
) -> ClassMatches:
    frames = list(gts)
    thr = cfg.threshold(cls)
    gt_cls = {f: [_as_gt(g) for g in gts[f] if _as_gt(g).box.label == cls] for f in frames}
    used = {f: [False] * len(v) for f, v in gt_cls.items()}
    n_gt = sum(1 for v in gt_cls.values() for g in v if not _ignored(g, cfg))
    scores, tp, pairs = [], [], []
    for f, d in rank_detections(dets, frames, cls):
        best, best_iou, best_ign = -1, -1.0, False
        for k, g in enumerate(gt_cls[f]):
            if used[f][k]:
                continue
            iou = iou_fn(d.box, g.box)
            if iou < thr:
                continue
            ign = _ignored(g, cfg)
            # a non-ignored gt always beats an ignored one; then highest IoU
            if best < 0 or (best_ign and not ign) or (ign == best_ign and iou > best_iou):
                best, best_iou, best_ign = k, iou, ign
        if best >= 0:
            used[f][best] = True
            if best_ign:
                continue
            pairs.append((d.box, gt_cls[f][best].box))
        scores.append(d.score)
        tp.append(best >= 0)
    return ClassMatches(np.array(scores, dtype=np.float64), np.array(tp, dtype=bool), n_gt, pairs)


def interpolated_ap(tp: np.ndarray, n_gt: int, recall_grid: np.ndarray) -> float:
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    k = np.arange(1, len(tp) + 1)
    precision = ctp / k
    recall = ctp / n_gt
    # precision envelope: max precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in recall_grid:
        idx = np.searchsorted(recall, r, side="left")
        total += float(env[idx]) if idx < len(env) else 0.0
    return total / len(recall_grid)


def average_precision(
    dets: Mapping[str, Sequence[ScoredBox]],
    gts: Mapping[str, Sequence],
    cls: str,
    cfg: MatchConfig,
    iou_fn: Callable[[Box3D, Box3D], float] = iou_3d,
) -> float:
    m = match_class(dets, gts, cls, cfg, iou_fn)
    return interpolated_ap(m.tp, m.n_gt, cfg.recall_grid())


@dataclass
class ClassMetrics:
    ap_3d: float
    ap_bev: float
    tp: int
    fp: int
    fn: int
    n_gt: int
    n_det: int
    mean_distance_error: float | None = None
    mean_orientation_error: float | None = None
    ap_undefined: bool = False


@dataclass
class MetricsReport:
    per_class: dict[str, ClassMetrics]
    mean_distance_error: float | None
    mean_orientation_error: float | None
    config: dict

    @property
    def mean_ap_3d(self) -> float:
        vals = [m.ap_3d for m in self.per_class.values()]
        return float(np.mean(vals)) if vals else 0.0

    def to_dict(self) -> dict:
        def strip(d):
            return {k: v for k, v in d.items() if v is not None}

        out = {
            "per_class": {c: strip(asdict(m)) for c, m in self.per_class.items()},
            "mean_ap_3d": self.mean_ap_3d,
            "config": self.config,
        }
        if self.mean_distance_error is not None:
            out["mean_distance_error"] = self.mean_distance_error
        if self.mean_orientation_error is not None:
            out["mean_orientation_error"] = self.mean_orientation_error
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        per = {c: ClassMetrics(**m) for c, m in d["per_class"].items()}
        return cls(per, d.get("mean_distance_error"), d.get("mean_orientation_error"), d.get("config", {}))


def evaluate(
    dets: Mapping[str, Sequence[ScoredBox]],
    gts: Mapping[str, Sequence],
    cfg: MatchConfig | None = None,
    classes: Iterable[str] | None = None,
) -> MetricsReport:
    """3D and BEV AP per class plus range/orientation errors over 3D true positives."""
    cfg = cfg or MatchConfig()
    extra = set(dets) - set(gts)
    if extra:
        raise FrameMismatch(f"detections for frames without ground truth: {sorted(extra)[:5]}")
    if classes is None:
        seen = {_as_gt(g).box.label for v in gts.values() for g in v}
        seen |= {d.box.label for v in dets.values() for d in v}
        classes = [c for c in cfg.thresholds if c in seen] + sorted(seen - set(cfg.thresholds))
    grid = cfg.recall_grid()
    per_class = {}
    all_dist, all_ori = [], []
    for cls in classes:
        m3 = match_class(dets, gts, cls, cfg, iou_3d)
        mb = match_class(dets, gts, cls, cfg, iou_bev)
        dist = [distance_error(p, g, cfg.distance_mode) for p, g in m3.pairs]
        ori = [orientation_error(p.yaw, g.yaw) for p, g in m3.pairs]
        all_dist += dist
        all_ori += ori
        n_tp = int(m3.tp.sum())
        per_class[cls] = ClassMetrics(
            ap_3d=interpolated_ap(m3.tp, m3.n_gt, grid),
            ap_bev=interpolated_ap(mb.tp, mb.n_gt, grid),
            tp=n_tp,
            fp=int(len(m3.tp) - n_tp),
            fn=int(m3.n_gt - n_tp),
            n_gt=m3.n_gt,
            n_det=int(len(m3.tp)),
            mean_distance_error=float(np.mean(dist)) if dist else None,
            mean_orientation_error=float(np.mean(ori)) if ori else None,
            ap_undefined=m3.n_gt == 0 and len(m3.tp) == 0,
        )
    return MetricsReport(
        per_class,
        float(np.mean(all_dist)) if all_dist else None,
        float(np.mean(all_ori)) if all_ori else None,
        asdict(cfg),
    )


def format_table(report: MetricsReport) -> str:
    """Plain-text summary: AP, distance error and orientation error per class."""
    classes = list(report.per_class)
    head = f"{'metric':<28}" + "".join(f"{c:>18}" for c in classes)
    rows = [head, "-" * len(head)]

    def fmt(v, pct=False):
        if v is None:
            return f"{'-':>18}"
        return f"{100 * v:>18.2f}" if pct else f"{v:>18.3f}"

    rows.append(f"{'3D AP (%)':<28}" + "".join(fmt(report.per_class[c].ap_3d, True) for c in classes))
    rows.append(f"{'BEV AP (%)':<28}" + "".join(fmt(report.per_class[c].ap_bev, True) for c in classes))
    rows.append(f"{'Distance error (m)':<28}" + "".join(fmt(report.per_class[c].mean_distance_error) for c in classes))
    rows.append(f"{'Orientation error (rad)':<28}" + "".join(fmt(report.per_class[c].mean_orientation_error) for c in classes))
    rows.append(f"{'TP / FP / FN':<28}" + "".join(f"{f'{m.tp}/{m.fp}/{m.fn}':>18}" for m in report.per_class.values()))
    return "\n".join(rows)
