"""Pseudo-label evaluation: spatial crop, class merging, per-class IoU."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import MissingGroundTruthError
from .pointcloud import UNLABELED, DensePointCloud, Pose

POLICIES = ("count_as_wrong", "exclude")


@dataclass(frozen=True)
class EvalConfig:
    """Crop extents in meters, single-pass class merges, unlabeled policy."""

    lateral_crop: float = 30.0
    height_crop: float = 10.0
    class_merge: tuple[tuple[int, int], ...] = ()
    unlabeled_policy: str = "count_as_wrong"

    def __post_init__(self) -> None:
        if not (self.lateral_crop > 0 and self.height_crop > 0):
            raise ValueError("crop extents must be positive")
        if self.unlabeled_policy not in POLICIES:
            raise ValueError(f"unknown unlabeled_policy {self.unlabeled_policy!r}")
        object.__setattr__(
            self, "class_merge", tuple((int(a), int(b)) for a, b in self.class_merge)
        )

    def validate(self, num_classes: int) -> None:
        for a, b in self.class_merge:
            if not (0 <= a < num_classes and 0 <= b < num_classes):
                raise ValueError(f"class merge {a}->{b} outside [0, {num_classes})")


@dataclass
class EvalReport:
    iou_per_class: dict[int, float]
    miou: float
    coverage: float
    evaluated_points: int
    class_names: tuple[str, ...] = ()
    confusion: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        name = lambda c: self.class_names[c] if c < len(self.class_names) else str(c)  # noqa: E731
        return {
            "miou": self.miou,
            "coverage": self.coverage,
            "evaluated_points": self.evaluated_points,
            "iou_per_class": {name(c): v for c, v in sorted(self.iou_per_class.items())},
        }

    def to_text(self) -> str:
        d = self.to_dict()
        lines = [
            f"miou: {d['miou']:.6f}",
            f"coverage: {d['coverage']:.6f}",
            f"evaluated_points: {d['evaluated_points']}",
        ]
        lines += [f"iou.{k}: {v:.6f}" for k, v in d["iou_per_class"].items()]
        return "\n".join(lines) + "\n"

    def write(self, directory: str | os.PathLike, stem: str = "report") -> dict[str, Path]:
        """Write ``<stem>.json``, ``<stem>.txt`` and per-class ``<stem>_iou.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "json": directory / f"{stem}.json",
            "text": directory / f"{stem}.txt",
            "csv": directory / f"{stem}_iou.csv",
        }
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        paths["text"].write_text(self.to_text())
        with open(paths["csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "iou"])
            for k, v in self.to_dict()["iou_per_class"].items():
                w.writerow([k, f"{v:.6f}"])
        return paths


def crop_mask(positions: np.ndarray | DensePointCloud, trajectory: Sequence[Pose], cfg: EvalConfig = EvalConfig()) -> np.ndarray:
    """Keep points near the trajectory.

    A point survives when its horizontal (XY) distance to the nearest
    trajectory position is at most ``lateral_crop`` and it sits no more
    than ``height_crop`` above that position.
    """
    if len(trajectory) == 0:
        raise ValueError("trajectory is empty")
    if isinstance(positions, DensePointCloud):
        positions = positions.positions
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    centers = np.array([p.translation for p in trajectory])
    dist, nearest = cKDTree(centers[:, :2]).query(pts[:, :2])
    above = pts[:, 2] - centers[nearest, 2]
    return (dist <= cfg.lateral_crop) & (above <= cfg.height_crop)


def merge_classes(labels, mapping: Mapping[int, int] | Sequence[tuple[int, int]], num_classes: int | None = None) -> np.ndarray:
    """Replace each from-class by its to-class in one pass (not transitive).

    :data:`UNLABELED` entries pass through untouched.
    """
    pairs = list(mapping.items()) if isinstance(mapping, Mapping) else list(mapping)
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is not None:
        for a, b in pairs:
            if not (0 <= a < num_classes and 0 <= b < num_classes):
                raise ValueError(f"class merge {a}->{b} outside [0, {num_classes})")
    out = labels.copy()
    for a, b in pairs:
        out[labels == a] = b
    return out


def compute_iou(
    pred,
    gt,
    num_classes: int,
    unlabeled_policy: str = "count_as_wrong",
    class_names: Sequence[str] = (),
) -> EvalReport:
    """Per-class IoU and mIoU over points whose ground truth is known.

    Unlabeled predictions are false negatives for the true class
    (``count_as_wrong``) or dropped (``exclude``). mIoU averages the
    classes present in the evaluated ground truth.
    """
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} predictions, {gt.shape[0]} ground truth")
    if unlabeled_policy not in POLICIES:
        raise ValueError(f"unknown unlabeled_policy {unlabeled_policy!r}")
    C = int(num_classes)
    keep = gt != UNLABELED
    labeled = pred != UNLABELED
    n_known = int(np.count_nonzero(keep))
    coverage = float(np.count_nonzero(keep & labeled) / n_known) if n_known else 0.0
    if unlabeled_policy == "exclude":
        keep &= labeled
    p, g = pred[keep], gt[keep]
    if g.size and (g.min() < 0 or g.max() >= C):
        raise ValueError(f"ground-truth class outside [0, {C})")
    if np.any((p != UNLABELED) & ((p < 0) | (p >= C))):
        raise ValueError(f"predicted class outside [0, {C})")

    # extra column C collects unlabeled predictions
    p_col = np.where(p == UNLABELED, C, p)
    confusion = np.bincount(g * (C + 1) + p_col, minlength=C * (C + 1)).reshape(C, C + 1)
    tp = np.diag(confusion[:, :C])
    gt_total = confusion.sum(axis=1)
    pred_total = confusion[:, :C].sum(axis=0)
    union = gt_total + pred_total - tp
    present = np.flatnonzero(gt_total > 0)
    seen = np.flatnonzero(union > 0)
    iou = {int(c): float(tp[c] / union[c]) for c in seen}
    miou = float(np.mean([iou[int(c)] for c in present])) if present.size else 0.0
    return EvalReport(
        iou_per_class=iou,
        miou=miou,
        coverage=coverage,
        evaluated_points=int(g.size),
        class_names=tuple(class_names),
        confusion=confusion,
    )


def evaluate(
    pred: np.ndarray,
    cloud: DensePointCloud,
    trajectory: Sequence[Pose],
    cfg: EvalConfig = EvalConfig(),
) -> EvalReport:
    """Crop, merge classes on both sides, then score ``pred`` against the cloud's ground truth."""
    if cloud.gt_class is None:
        raise MissingGroundTruthError("cloud has no ground-truth classes")
    C = cloud.num_classes or int(max(cloud.gt_class[cloud.gt_class != UNLABELED].max(initial=0), 0)) + 1
    cfg.validate(C)
    if len(pred) != len(cloud):
        raise ValueError(f"length mismatch: {len(pred)} predictions for {len(cloud)} points")
    mask = crop_mask(cloud.positions, trajectory, cfg)
    p = merge_classes(np.asarray(pred)[mask], cfg.class_merge)
    g = merge_classes(cloud.gt_class[mask], cfg.class_merge)
    return compute_iou(p, g, C, cfg.unlabeled_policy, cloud.class_names)
