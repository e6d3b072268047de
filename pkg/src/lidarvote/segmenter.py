"""Per-view 2D segmentation: the segmenter interface and two implementations.

``OracleSegmenter`` labels pixels from the ground truth of the point behind
them, optionally with label noise. ``ExternalSegmenter`` reads results that
some other process wrote following the file exchange protocol:

* input:  ``view_%06d.png`` (8-bit greyscale) in a view directory
* output: ``labels_%06d.png`` (8-bit, pixel value = class index) and
  optionally ``logits_%06d.bin`` (little-endian float32, row-major
  ``[height][width][C]``) in a result directory
* ``RESULTS_READY`` in the result directory marks completion

Missing logits are synthesized as one-hot scores at ``margin``.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from PIL import Image

from .errors import (
    MissingGroundTruthError,
    MissingResultError,
    SegmentationError,
    ShapeMismatchError,
)
from .pointcloud import UNLABELED
from .viewgen import EMPTY, RenderedView

READY_MARKER = "RESULTS_READY"


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    """Per-pixel class labels ``(H, W)`` and scores ``(H, W, C)``.

    ``labels`` always equals the first-maximum argmax of ``logits``.
    """

    labels: np.ndarray
    logits: np.ndarray

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        logits = np.asarray(self.logits, dtype=np.float32)
        if logits.ndim != 3 or labels.shape != logits.shape[:2]:
            raise ShapeMismatchError(
                f"labels {labels.shape} and logits {logits.shape} disagree on (H, W)"
            )
        if not np.all(np.isfinite(logits)):
            raise SegmentationError("non-finite logit")
        if not np.array_equal(labels, np.argmax(logits, axis=-1)):
            raise SegmentationError("labels are not the argmax of logits")
        object.__setattr__(self, "labels", labels.astype(np.int64, copy=False))
        object.__setattr__(self, "logits", logits)

    @property
    def num_classes(self) -> int:
        return self.logits.shape[-1]

    @classmethod
    def from_labels(cls, labels: np.ndarray, num_classes: int, margin: float = 10.0):
        """One-hot scores at ``margin`` for each label."""
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise SegmentationError(f"label outside [0, {num_classes})")
        logits = np.zeros(labels.shape + (num_classes,), dtype=np.float32)
        np.put_along_axis(logits, labels[..., None], np.float32(margin), axis=-1)
        return cls(labels, logits)


@runtime_checkable
class Segmenter(Protocol):
    """Anything that turns a rendered view into a :class:`SegmentationResult`.

    ``thread_safe = False`` tells callers to segment one view at a time.
    """

    num_classes: int
    thread_safe: bool

    def segment(self, view: RenderedView) -> SegmentationResult: ...


class OracleSegmenter:
    """Stand-in 2D model that reads the answer off the ground truth.

    Each non-empty pixel gets the class of its point; with probability
    ``noise_rate`` that class is swapped for one of the other ``C - 1``
    classes, uniformly. In ``"onehot"`` mode the emitted class scores
    ``margin`` and the rest 0. In ``"calibrated"`` mode every score is
    N(0, 1) noise and the emitted class gets ``margin`` added; the label is
    then the argmax, so low margins produce their own errors.

    Background pixels, and pixels whose point has no ground truth, get zero
    scores and label 0. Randomness is drawn per view from ``(seed,
    view_index)``, so results do not depend on call order.
    """

    thread_safe = True

    def __init__(
        self,
        gt_class: np.ndarray | None,
        num_classes: int,
        noise_rate: float = 0.0,
        margin: float = 10.0,
        seed: int = 0,
        mode: str = "onehot",
    ) -> None:
        if gt_class is None:
            raise MissingGroundTruthError("oracle segmenter needs per-point ground truth")
        if not 0.0 <= noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")
        if not margin > 0:
            raise ValueError("margin must be positive")
        if mode not in ("onehot", "calibrated"):
            raise ValueError(f"unknown oracle mode {mode!r}")
        if num_classes < 2 and noise_rate > 0:
            raise ValueError("label noise needs at least 2 classes")
        self.gt_class = np.asarray(gt_class, dtype=np.int64)
        self.num_classes = int(num_classes)
        self.noise_rate = float(noise_rate)
        self.margin = float(margin)
        self.seed = int(seed)
        self.mode = mode

    def segment(self, view: RenderedView) -> SegmentationResult:
        C = self.num_classes
        rng = np.random.default_rng([self.seed, view.view_index])
        H, W = view.shape
        flat_idx = view.point_index.reshape(-1)
        pix = np.flatnonzero(flat_idx != EMPTY)
        truth = self.gt_class[flat_idx[pix]]
        known = truth != UNLABELED
        pix, truth = pix[known], truth[known]
        n = pix.shape[0]

        emitted = truth.copy()
        if self.noise_rate > 0:
            flip = rng.random(n) < self.noise_rate
            shift = rng.integers(1, C, size=n)
            emitted[flip] = (truth[flip] + shift[flip]) % C

        logits = np.zeros((H * W, C), dtype=np.float32)
        if self.mode == "onehot":
            logits[pix, emitted] = self.margin
        else:
            scores = rng.standard_normal((n, C))
            scores[np.arange(n), emitted] += self.margin
            logits[pix] = scores.astype(np.float32)
        logits = logits.reshape(H, W, C)
        return SegmentationResult(np.argmax(logits, axis=-1), logits)


def oracle_segment(
    view: RenderedView,
    cloud_gt: np.ndarray | None,
    num_classes: int,
    noise_rate: float = 0.0,
    margin: float = 10.0,
    seed: int = 0,
    mode: str = "onehot",
) -> SegmentationResult:
    return OracleSegmenter(cloud_gt, num_classes, noise_rate, margin, seed, mode).segment(view)


# ---------------------------------------------------------------------------
# File exchange
# ---------------------------------------------------------------------------

_VIEW_RE = re.compile(r"^view_(\d{6})\.png$")


def list_view_indices(view_directory: str | os.PathLike) -> list[int]:
    out = []
    for p in Path(view_directory).iterdir():
        m = _VIEW_RE.match(p.name)
        if m:
            out.append(int(m.group(1)))
    return sorted(out)


def labels_path(result_directory, index: int) -> Path:
    return Path(result_directory) / f"labels_{index:06d}.png"


def logits_path(result_directory, index: int) -> Path:
    return Path(result_directory) / f"logits_{index:06d}.bin"


def write_result(
    result: SegmentationResult,
    result_directory: str | os.PathLike,
    index: int,
    with_logits: bool = True,
) -> None:
    """Write one result in the exchange format (the external tool's side)."""
    if result.num_classes > 256:
        raise ValueError("8-bit label images hold at most 256 classes")
    Image.fromarray(result.labels.astype(np.uint8)).save(labels_path(result_directory, index))
    if with_logits:
        result.logits.astype("<f4").tofile(logits_path(result_directory, index))


def mark_ready(result_directory: str | os.PathLike) -> None:
    (Path(result_directory) / READY_MARKER).touch()


def read_result(
    result_directory: str | os.PathLike,
    index: int,
    shape: tuple[int, int],
    num_classes: int,
    margin: float = 10.0,
) -> SegmentationResult:
    lp = labels_path(result_directory, index)
    if not lp.exists():
        raise MissingResultError(index, lp)
    labels = np.asarray(Image.open(lp))
    if labels.ndim != 2 or labels.shape != tuple(shape):
        raise ShapeMismatchError(f"{lp}: label image {labels.shape}, view is {tuple(shape)}")
    labels = labels.astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise SegmentationError(f"{lp}: class index {labels.max()} >= {num_classes}")
    gp = logits_path(result_directory, index)
    if not gp.exists():
        return SegmentationResult.from_labels(labels, num_classes, margin)
    raw = gp.read_bytes()
    expected = shape[0] * shape[1] * num_classes * 4
    if len(raw) != expected:
        raise ShapeMismatchError(f"{gp}: {len(raw)} bytes, expected {expected}")
    logits = np.frombuffer(raw, dtype="<f4").reshape(shape[0], shape[1], num_classes)
    if not np.all(np.isfinite(logits)):
        raise SegmentationError(f"{gp}: non-finite logit")
    try:
        return SegmentationResult(labels, logits.astype(np.float32))
    except SegmentationError as exc:
        raise SegmentationError(f"{lp}: {exc}") from None


class ExternalSegmenter:
    """Reads results an external 2D model wrote into ``result_directory``."""

    thread_safe = True

    def __init__(self, result_directory: str | os.PathLike, num_classes: int, margin: float = 10.0):
        self.result_directory = Path(result_directory)
        self.num_classes = int(num_classes)
        self.margin = float(margin)

    def check_ready(self, indices) -> None:
        """Raise for a missing marker or the first view index without labels."""
        marker = self.result_directory / READY_MARKER
        for i in sorted(indices):
            if not labels_path(self.result_directory, i).exists():
                raise MissingResultError(i, labels_path(self.result_directory, i))
        if not marker.exists():
            raise SegmentationError(f"{marker} not found; external results incomplete")

    def segment(self, view: RenderedView) -> SegmentationResult:
        return read_result(
            self.result_directory, view.view_index, view.shape, self.num_classes, self.margin
        )


def external_segment(
    view_directory: str | os.PathLike,
    result_directory: str | os.PathLike,
    num_classes: int,
    margin: float = 10.0,
) -> dict[int, SegmentationResult]:
    """Parse the external results for every ``view_%06d.png`` in ``view_directory``."""
    indices = list_view_indices(view_directory)
    seg = ExternalSegmenter(result_directory, num_classes, margin)
    seg.check_ready(indices)
    out = {}
    for i in indices:
        with Image.open(Path(view_directory) / f"view_{i:06d}.png") as im:
            shape = (im.height, im.width)
        out[i] = read_result(result_directory, i, shape, num_classes, margin)
    return out
