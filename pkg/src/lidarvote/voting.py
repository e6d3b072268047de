"""Back-projection of per-view segmentations onto points, and vote fusion.

Every non-empty pixel casts one vote for the point that won it. Votes are
accumulated into a :class:`VoteTable` and a final class is elected per
point with one of three estimators:

``hard_sum``       argmax of per-class vote counts
``soft_sum``       argmax of summed scores
``soft_compound``  argmax of the compounded (multiplied) scores

Compounding runs in log space over softmax probabilities floored at
``eps`` by default. ``compound_mode="raw_product"`` instead multiplies the
raw scores as given; that product is tracked as sign parity plus summed
``log|score|`` so it never overflows, and its argmax is
exact up to log rounding (near-equal products tie to the lowest class).
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.special import log_softmax

from .errors import ShapeMismatchError
from .pointcloud import UNLABELED, write_labels
from .segmenter import SegmentationResult, Segmenter
from .viewgen import EMPTY, RenderedView

ESTIMATORS = ("hard_sum", "soft_sum", "soft_compound")
COMPOUND_MODES = ("log_softmax", "raw_product")
DEFAULT_EPS = 1e-6
_RAW_TIE_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class Contributions:
    """Votes from one view: parallel arrays in row-major pixel order."""

    view_index: int
    point: np.ndarray  # (n,) int64
    label: np.ndarray  # (n,) int64
    logits: np.ndarray  # (n, C) float32

    def __len__(self) -> int:
        return self.point.shape[0]


def backproject(view: RenderedView, seg: SegmentationResult, dedup: bool = False) -> Contributions:
    """Collect one vote per non-empty pixel of ``view``.

    With ``dedup`` a point keeps only its first pixel (row-major) in this view.
    """
    if seg.labels.shape != view.point_index.shape:
        raise ShapeMismatchError(
            f"segmentation {seg.labels.shape} does not match view {view.point_index.shape}"
        )
    flat = view.point_index.reshape(-1)
    pix = np.flatnonzero(flat != EMPTY)
    point = flat[pix].astype(np.int64)
    if dedup and pix.size:
        _, first = np.unique(point, return_index=True)
        first.sort()
        pix, point = pix[first], point[first]
    C = seg.num_classes
    return Contributions(
        view_index=view.view_index,
        point=point,
        label=seg.labels.reshape(-1)[pix],
        logits=seg.logits.reshape(-1, C)[pix],
    )


class VoteTable:
    """Per-point vote accumulators for ``M`` points and ``C`` classes."""

    def __init__(self, num_points: int, num_classes: int, eps: float = DEFAULT_EPS) -> None:
        M, C = int(num_points), int(num_classes)
        self.num_points, self.num_classes, self.eps = M, C, float(eps)
        self.hard_counts = np.zeros((M, C), dtype=np.int64)
        self.logit_sums = np.zeros((M, C), dtype=np.float64)
        self.logprob_sums = np.zeros((M, C), dtype=np.float64)
        self.vote_count = np.zeros(M, dtype=np.int64)
        # raw-product compounding: sum of log|score|, sign parity, zero seen
        self.raw_logabs = np.zeros((M, C), dtype=np.float64)
        self.raw_negative = np.zeros((M, C), dtype=bool)
        self.raw_zero = np.zeros((M, C), dtype=bool)

    _ARRAYS = (
        "hard_counts",
        "logit_sums",
        "logprob_sums",
        "vote_count",
        "raw_logabs",
        "raw_negative",
        "raw_zero",
    )

    def copy(self) -> "VoteTable":
        out = VoteTable(self.num_points, self.num_classes, self.eps)
        for name in self._ARRAYS:
            setattr(out, name, getattr(self, name).copy())
        return out

    def check(self) -> None:
        """Assert the table invariants; raises ``AssertionError`` on violation."""
        assert np.array_equal(self.hard_counts.sum(axis=1), self.vote_count)
        assert np.all(self.hard_counts >= 0)
        empty = self.vote_count == 0
        for name in ("hard_counts", "logit_sums", "logprob_sums", "raw_logabs"):
            assert not np.any(getattr(self, name)[empty])

    def merge(self, other: "VoteTable") -> "VoteTable":
        """Add ``other``'s accumulators into this table (in place)."""
        if (other.num_points, other.num_classes) != (self.num_points, self.num_classes):
            raise ShapeMismatchError("vote tables differ in shape")
        self.hard_counts += other.hard_counts
        self.logit_sums += other.logit_sums
        self.logprob_sums += other.logprob_sums
        self.vote_count += other.vote_count
        self.raw_logabs += other.raw_logabs
        self.raw_negative ^= other.raw_negative
        self.raw_zero |= other.raw_zero
        return self

    def save(self, path: str | os.PathLike) -> None:
        np.savez_compressed(
            path,
            eps=np.array(self.eps),
            **{name: getattr(self, name) for name in self._ARRAYS},
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "VoteTable":
        with np.load(path) as z:
            M, C = z["hard_counts"].shape
            out = cls(M, C, float(z["eps"]))
            for name in cls._ARRAYS:
                setattr(out, name, z[name].copy())
        return out


def accumulate(table: VoteTable, contributions: Contributions) -> VoteTable:
    """Add one view's votes to ``table`` (in place) and return it.

    Votes are applied sequentially in their stored (row-major) order.
    """
    n = len(contributions)
    if n == 0:
        return table
    pt, lab = contributions.point, contributions.label
    logits = np.asarray(contributions.logits, dtype=np.float64)
    M, C = table.num_points, table.num_classes
    if logits.shape != (n, C):
        raise ShapeMismatchError(f"contribution logits {logits.shape}, expected ({n}, {C})")
    if pt.min() < 0 or pt.max() >= M:
        raise IndexError(f"contribution point index outside [0, {M})")
    if lab.min() < 0 or lab.max() >= C:
        raise IndexError(f"contribution class outside [0, {C})")

    size = M * C
    cell = pt * C + lab
    table.hard_counts += np.bincount(cell, minlength=size).reshape(M, C)
    table.vote_count += np.bincount(pt, minlength=M)

    # float sums: flat 1-D add.at keeps strict per-vote order
    flat = (pt[:, None] * C + np.arange(C)).reshape(-1)
    np.add.at(table.logit_sums.reshape(-1), flat, logits.reshape(-1))
    logprob = np.maximum(log_softmax(logits, axis=1), np.log(table.eps))
    np.add.at(table.logprob_sums.reshape(-1), flat, logprob.reshape(-1))

    absval = np.abs(logits)
    zero = absval == 0
    np.add.at(table.raw_logabs.reshape(-1), flat, np.log(np.where(zero, 1.0, absval)).reshape(-1))
    neg = np.bincount(flat, weights=(logits < 0).reshape(-1), minlength=size).reshape(M, C)
    table.raw_negative ^= (neg.astype(np.int64) % 2).astype(bool)
    table.raw_zero |= np.bincount(flat, weights=zero.reshape(-1), minlength=size).reshape(M, C) > 0
    return table


@dataclass(frozen=True, eq=False)
class PointLabels:
    labels: np.ndarray  # (M,) int64, UNLABELED where no votes
    estimator_used: str
    compound_mode: str = "log_softmax"

    @property
    def coverage(self) -> float:
        n = self.labels.shape[0]
        return float(np.count_nonzero(self.labels != UNLABELED) / n) if n else 0.0


def _raw_product_argmax(table: VoteTable) -> np.ndarray:
    # order classes by sign of the product first (+ > 0 > -), then magnitude
    tier = np.where(table.raw_zero, 1, np.where(table.raw_negative, 0, 2))
    mag = np.where(table.raw_zero, 0.0, np.where(table.raw_negative, -table.raw_logabs, table.raw_logabs))
    top = tier.max(axis=1, keepdims=True)
    mag = np.where(tier == top, mag, -np.inf)
    # summed logs are order dependent in the last bits, so products that are
    # equal in exact arithmetic can differ by rounding; treat those as ties
    best = mag.max(axis=1, keepdims=True)
    tol = _RAW_TIE_RTOL * np.maximum(1.0, np.abs(best))
    return np.argmax(mag >= best - tol, axis=1)


def elect(table: VoteTable, estimator: str = "hard_sum", compound_mode: str = "log_softmax") -> PointLabels:
    """Pick one class per voted point; ties go to the lowest class index."""
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
    if compound_mode not in COMPOUND_MODES:
        raise ValueError(f"unknown compound mode {compound_mode!r}; expected one of {COMPOUND_MODES}")
    if estimator == "hard_sum":
        winner = np.argmax(table.hard_counts, axis=1)
    elif estimator == "soft_sum":
        winner = np.argmax(table.logit_sums, axis=1)
    elif compound_mode == "log_softmax":
        winner = np.argmax(table.logprob_sums, axis=1)
    else:
        winner = _raw_product_argmax(table)
    labels = np.where(table.vote_count > 0, winner, UNLABELED).astype(np.int64)
    return PointLabels(labels, estimator, compound_mode)


def collect_votes(
    views: Iterable[RenderedView],
    segmenter: Segmenter,
    num_points: int,
    workers: int = 1,
    dedup: bool = False,
    eps: float = DEFAULT_EPS,
) -> VoteTable:
    """Segment every view and fold its votes into a fresh table.

    Segmentation may run on ``workers`` threads; accumulation always
    follows the order of ``views``, so results do not depend on ``workers``.
    """
    table = VoteTable(num_points, segmenter.num_classes, eps)

    def one(view: RenderedView) -> Contributions:
        return backproject(view, segmenter.segment(view), dedup)

    if workers <= 1 or not getattr(segmenter, "thread_safe", False):
        for view in views:
            accumulate(table, one(view))
        return table
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for contrib in pool.map(one, views):
            accumulate(table, contrib)
    return table


def vote_summary(table: VoteTable, result: PointLabels) -> dict:
    """JSON-ready summary: histogram of votes per point, coverage, estimator."""
    hist = np.bincount(table.vote_count) if table.num_points else np.zeros(1, dtype=np.int64)
    return {
        "estimator": result.estimator_used,
        "compound_mode": result.compound_mode,
        "num_points": table.num_points,
        "num_classes": table.num_classes,
        "coverage": result.coverage,
        "votes_per_point_histogram": hist.tolist(),
        "mean_votes_per_point": float(table.vote_count.mean()) if table.num_points else 0.0,
    }


def write_pseudo_labels(
    path: str | os.PathLike,
    result: PointLabels,
    table: VoteTable | None = None,
) -> None:
    """Write uint16 labels in cloud order; with ``table``, also ``<path>.json``."""
    write_labels(path, result.labels)
    if table is not None:
        summary = vote_summary(table, result)
        Path(str(path) + ".json").write_text(json.dumps(summary, indent=2) + "\n")
