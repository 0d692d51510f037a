"""Keypoint (PCK), part-box (PCP) and classification metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DEFAULT_ALPHAS = (0.02, 0.05, 0.08, 0.10)


@dataclass
class PckTable:
    """PCK per part and threshold.

    ``fraction[k, a]`` is NaN when part ``k`` has no visible ground truth,
    i.e. the metric is undefined rather than 0 or 1.
    """

    alphas: tuple
    correct: np.ndarray   # (P, A) counts
    count: np.ndarray     # (P,) visible ground-truth keypoints

    @property
    def fraction(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.count[:, None] > 0, self.correct / np.maximum(self.count[:, None], 1), np.nan)

    def mean_over_parts(self) -> np.ndarray:
        """Unweighted mean over parts with defined PCK, per alpha."""
        frac = self.fraction
        defined = ~np.isnan(frac[:, 0])
        if not defined.any():
            return np.full(len(self.alphas), np.nan)
        return frac[defined].mean(axis=0)


def pck(pred_xy: np.ndarray, gt: np.ndarray, boxes: np.ndarray, alphas=DEFAULT_ALPHAS) -> PckTable:
    """Percentage of correct keypoints.

    ``pred_xy`` (N, P, 2) predicted pixels, NaN for a missing prediction;
    ``gt`` (N, P, 3) x, y, visible; ``boxes`` (N, 4) object boxes x, y, w, h.
    A visible keypoint is correct when its distance to the prediction is at
    most ``alpha * max(h, w)``. Invisible keypoints are not counted.
    """
    alphas = tuple(float(a) for a in alphas)
    if any(a <= 0 for a in alphas):
        raise ConfigError(f"alpha values must be positive, got {alphas}")
    pred_xy, gt, boxes = np.asarray(pred_xy, float), np.asarray(gt, float), np.asarray(boxes, float)
    if pred_xy.shape[:2] != gt.shape[:2] or boxes.shape != (gt.shape[0], 4):
        raise ConfigError(f"misaligned shapes: pred {pred_xy.shape}, gt {gt.shape}, boxes {boxes.shape}")
    visible = gt[..., 2] > 0
    dist = np.linalg.norm(pred_xy - gt[..., :2], axis=-1)
    size = np.maximum(boxes[:, 2], boxes[:, 3])
    thresholds = np.asarray(alphas)[None, None, :] * size[:, None, None]
    with np.errstate(invalid="ignore"):
        hit = (dist[..., None] <= thresholds) & visible[..., None]   # NaN distance -> False
    return PckTable(alphas, hit.sum(axis=0), visible.sum(axis=0))


@dataclass
class PartBoxRule:
    """Named keypoint groups turned into boxes.

    The box is the tight box around the group's visible keypoints grown on
    every side by ``max(margin_frac * diagonal, min_margin)`` pixels, where
    ``diagonal`` is the tight box's diagonal.
    """

    groups: dict
    margin_frac: float = 0.10
    min_margin: float = 4.0

    def __post_init__(self):
        for name, members in self.groups.items():
            if not len(members):
                raise ConfigError(f"part group {name!r} is empty")
        if self.margin_frac < 0 or self.min_margin < 0:
            raise ConfigError("margins must be non-negative")

    def describe(self) -> str:
        groups = "; ".join(f"{k}={list(v)}" for k, v in self.groups.items())
        return (f"part boxes: tight box over visible keypoints of each group ({groups}), "
                f"grown by max({self.margin_frac} * diagonal, {self.min_margin} px), clipped to the image")


def part_boxes(keypoints: np.ndarray, rule: PartBoxRule, image_size: tuple[float, float] | None = None) -> dict:
    """Boxes ``(x0, y0, x1, y1)`` per group for one object; ``None`` if no group member is visible.

    ``keypoints`` is (P, 3) x, y, visible; ``image_size`` is (width, height)
    for clipping.
    """
    kp = np.asarray(keypoints, float)
    out = {}
    for name, members in rule.groups.items():
        pts = kp[list(members)]
        pts = pts[pts[:, 2] > 0]
        if len(pts) == 0:
            out[name] = None
            continue
        x0, y0 = pts[:, 0].min(), pts[:, 1].min()
        x1, y1 = pts[:, 0].max(), pts[:, 1].max()
        margin = max(rule.margin_frac * float(np.hypot(x1 - x0, y1 - y0)), rule.min_margin)
        box = [x0 - margin, y0 - margin, x1 + margin, y1 + margin]
        if image_size is not None:
            w, h = image_size
            box = [min(max(box[0], 0.0), w), min(max(box[1], 0.0), h), min(max(box[2], 0.0), w),
                   min(max(box[3], 0.0), h)]
        out[name] = tuple(float(v) for v in box)
    return out


def iou(a, b) -> float:
    """Intersection over union of two ``(x0, y0, x1, y1)`` boxes."""
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class PcpResult:
    correct: dict
    count: dict

    def fraction(self, group: str) -> float:
        n = self.count[group]
        return self.correct[group] / n if n else float("nan")


def pcp(pred_boxes: list[dict], gt_boxes: list[dict], threshold: float = 0.5) -> PcpResult:
    """Percentage of correct parts: IoU strictly above ``threshold``.

    Objects whose ground-truth box is undefined are skipped; an undefined
    prediction against a defined ground truth counts as a miss.
    """
    if len(pred_boxes) != len(gt_boxes):
        raise ConfigError(f"{len(pred_boxes)} predicted vs {len(gt_boxes)} ground-truth box sets")
    groups = list(gt_boxes[0]) if gt_boxes else []
    correct = dict.fromkeys(groups, 0)
    count = dict.fromkeys(groups, 0)
    for pred, gt in zip(pred_boxes, gt_boxes):
        for g in groups:
            if gt[g] is None:
                continue
            count[g] += 1
            p = pred.get(g)
            if p is not None and iou(p, gt[g]) > threshold:
                correct[g] += 1
    return PcpResult(correct, count)


def accuracy(predicted, true) -> float:
    predicted, true = np.asarray(predicted), np.asarray(true)
    if predicted.shape != true.shape:
        raise ConfigError(f"label arrays differ in shape: {predicted.shape} vs {true.shape}")
    if predicted.size == 0:
        return float("nan")
    return float((predicted == true).mean())


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

METRIC_FIELDS = ["name", "threshold", "fraction", "count"]


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return f"{float(v):.6f}"


def pck_rows(table: PckTable, part_names=None) -> list[dict]:
    names = part_names or [f"part{k}" for k in range(len(table.count))]
    frac = table.fraction
    rows = []
    for k, name in enumerate(names):
        for a, alpha in enumerate(table.alphas):
            rows.append({"name": name, "threshold": alpha, "fraction": frac[k, a], "count": int(table.count[k])})
    mean = table.mean_over_parts()
    for a, alpha in enumerate(table.alphas):
        rows.append({"name": "mean", "threshold": alpha, "fraction": mean[a], "count": int(table.count.sum())})
    return rows


def pcp_rows(result: PcpResult, threshold: float = 0.5) -> list[dict]:
    return [{"name": g, "threshold": threshold, "fraction": result.fraction(g), "count": result.count[g]}
            for g in result.count]


def write_metric_csv(rows: list[dict], path, header_comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for r in rows:
            writer.writerow([r["name"], f"{float(r['threshold']):g}", _fmt(r["fraction"]), int(r["count"])])
