"""Scan sequences, sensor poses and the aligned dense cloud.

Poses map sensor (or camera) coordinates into the world frame:
``p_world = R @ p_local + t``. The local frame follows the usual camera
convention (X right, Y down, Z forward), which is also what KITTI-style
odometry pose files store. The world frame is Z-up.

File formats
------------
* scans: ``*.bin`` files of little-endian float32 ``(x, y, z, intensity)``
  quadruples without header, or ASCII ``*.ply`` with x/y/z/intensity
  vertex properties. Lexicographic file order defines the scan index.
* poses: one line per scan, 12 whitespace-separated values holding the
  row-major 3x4 matrix ``[R | t]``.
* labels: one little-endian uint16 class index per point, in scan order;
  ``65535`` marks an unlabeled point.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError, PoseError

UNLABELED = 65535
ORTHO_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform from a local frame into the world frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        check_rotation(R)
        if not np.all(np.isfinite(t)):
            raise PoseError("translation must be finite")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat) -> "Pose":
        """Build from a 3x4 ``[R|t]`` or 4x4 homogeneous matrix."""
        mat = np.asarray(mat, dtype=np.float64)
        return cls(mat[:3, :3], mat[:3, 3])

    def as_matrix(self) -> np.ndarray:
        """Return the 4x4 homogeneous matrix."""
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 3) local points into the world frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 3) world points into this pose's local frame."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self) -> int:
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self) -> str:
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> None:
    """Raise :class:`PoseError` unless ``R`` is orthonormal with det +1."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise PoseError("rotation must be a finite 3x3 matrix")
    dev = np.abs(R.T @ R - np.eye(3)).max()
    if dev > tol:
        raise PoseError(f"rotation is not orthonormal (max |R^T R - I| = {dev:.3g})")
    det = np.linalg.det(R)
    if abs(det - 1.0) > tol:
        raise PoseError(f"rotation determinant is {det:.9f}, expected +1")


def rotation_about(axis: str, angle: float) -> np.ndarray:
    """Right-handed rotation matrix of ``angle`` radians about x, y or z."""
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    raise ValueError(f"unknown axis {axis!r}")


@dataclass(frozen=True, eq=False)
class RawScan:
    """One LiDAR sweep in its sensor frame.

    ``points`` is (N, 4): x, y, z in meters and a non-negative intensity.
    ``labels`` optionally holds a ground-truth class per point.
    """

    points: np.ndarray
    scan_index: int = 0
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"scan {self.scan_index}: non-finite coordinates or intensity")
        if np.any(pts[:, 3] < 0):
            raise ValueError(f"scan {self.scan_index}: negative intensity")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"scan {self.scan_index}: {lab.shape[0]} labels for {pts.shape[0]} points"
                )
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass(frozen=True, eq=False)
class ScanSequence:
    scans: list[RawScan]
    poses: list[Pose]
    class_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.scans) != len(self.poses):
            raise ValueError(
                f"length mismatch: {len(self.scans)} scans but {len(self.poses)} poses"
            )
        object.__setattr__(self, "scans", list(self.scans))
        object.__setattr__(self, "poses", list(self.poses))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        C = len(self.class_names)
        for scan in self.scans:
            if scan.labels is None:
                continue
            bad = (scan.labels != UNLABELED) & ((scan.labels < 0) | (scan.labels >= C))
            if np.any(bad):
                raise ValueError(
                    f"scan {scan.scan_index}: ground-truth class outside [0, {C}) "
                    f"(class_names has {C} entries)"
                )

    def __len__(self) -> int:
        return len(self.scans)

    @property
    def has_labels(self) -> bool:
        return bool(self.scans) and all(s.labels is not None for s in self.scans)


@dataclass(frozen=True, eq=False)
class DensePointCloud:
    """All scans of a sequence merged into the world frame.

    ``intensity_norm`` lies in ``intensity_range`` (``(eta_min, eta_max)``).
    ``gt_class`` uses :data:`UNLABELED` for points without ground truth.
    """

    positions: np.ndarray
    intensity_norm: np.ndarray
    source_scan: np.ndarray
    gt_class: np.ndarray | None = None
    intensity_range: tuple[float, float] = (0.0, 1.0)
    class_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        pos = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        inten = np.ascontiguousarray(self.intensity_norm, dtype=np.float64).reshape(-1)
        src = np.ascontiguousarray(self.source_scan, dtype=np.int64).reshape(-1)
        M = pos.shape[0]
        if inten.shape[0] != M or src.shape[0] != M:
            raise ValueError("positions, intensity_norm and source_scan lengths differ")
        lo, hi = map(float, self.intensity_range)
        if M and (inten.min() < lo or inten.max() > hi):
            raise ValueError(f"intensity_norm outside [{lo}, {hi}]")
        for arr in (pos, inten, src):
            arr.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "intensity_norm", inten)
        object.__setattr__(self, "source_scan", src)
        object.__setattr__(self, "intensity_range", (lo, hi))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.gt_class is not None:
            gt = np.ascontiguousarray(self.gt_class, dtype=np.int64).reshape(-1)
            if gt.shape[0] != M:
                raise ValueError("gt_class length differs from point count")
            gt.setflags(write=False)
            object.__setattr__(self, "gt_class", gt)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def save(self, path: str | os.PathLike) -> None:
        """Write to a compressed ``.npz`` archive."""
        extra = {} if self.gt_class is None else {"gt_class": self.gt_class}
        np.savez_compressed(
            path,
            positions=self.positions,
            intensity_norm=self.intensity_norm,
            source_scan=self.source_scan,
            intensity_range=np.array(self.intensity_range),
            class_names=np.array(self.class_names, dtype=str),
            **extra,
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DensePointCloud":
        with np.load(path) as z:
            return cls(
                positions=z["positions"],
                intensity_norm=z["intensity_norm"],
                source_scan=z["source_scan"],
                gt_class=z["gt_class"] if "gt_class" in z.files else None,
                intensity_range=tuple(z["intensity_range"].tolist()),
                class_names=tuple(z["class_names"].tolist()),
            )


# ---------------------------------------------------------------------------
# Intensity normalization
# ---------------------------------------------------------------------------


def clip_intensity(intensity, beta_min: float, beta_max: float):
    """Clamp intensities into ``[beta_min, beta_max]``."""
    if beta_min > beta_max:
        raise ValueError(f"invalid clip range: beta_min={beta_min} > beta_max={beta_max}")
    out = np.minimum(np.maximum(intensity, beta_min), beta_max)
    return out if np.ndim(out) else float(out)


def rescale_intensity(intensity, eta_min: float = 0.0, eta_max: float = 1.0) -> np.ndarray:
    """Min-max rescale one scan's (already clipped) intensities to ``[eta_min, eta_max]``.

    A scan of constant intensity maps entirely to ``eta_min``.
    """
    arr = np.asarray(intensity, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot rescale an empty intensity array")
    if eta_min > eta_max:
        raise ValueError(f"invalid rescale range: eta_min={eta_min} > eta_max={eta_max}")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.full(arr.shape, float(eta_min))
    out = (arr - lo) / (hi - lo) * (eta_max - eta_min) + eta_min
    # guard against rounding past the bounds
    return np.clip(out, eta_min, eta_max)


def normalize_scan_intensity(
    intensity: np.ndarray,
    beta_min: float | None = 0.0,
    beta_max: float | None = None,
    eta_min: float = 0.0,
    eta_max: float = 1.0,
    beta_max_percentile: float = 99.0,
) -> np.ndarray:
    """Clip then rescale one scan. ``beta_max=None`` uses a per-scan percentile."""
    arr = np.asarray(intensity, dtype=np.float64)
    if arr.size == 0:
        return arr.copy()
    b_lo = 0.0 if beta_min is None else float(beta_min)
    b_hi = float(np.percentile(arr, beta_max_percentile)) if beta_max is None else float(beta_max)
    b_hi = max(b_hi, b_lo)
    return rescale_intensity(clip_intensity(arr, b_lo, b_hi), eta_min, eta_max)


def align(
    seq: ScanSequence,
    beta_min: float | None = 0.0,
    beta_max: float | None = None,
    eta_min: float = 0.0,
    eta_max: float = 1.0,
) -> DensePointCloud:
    """Normalize intensities per scan and merge all scans into the world frame.

    Output order is scan order, then point order within each scan.
    """
    if len(seq.scans) != len(seq.poses):
        raise ValueError(f"length mismatch: {len(seq.scans)} scans but {len(seq.poses)} poses")
    positions, intens, source, labels = [], [], [], []
    for m, (scan, pose) in enumerate(zip(seq.scans, seq.poses)):
        positions.append(pose.apply(scan.xyz))
        intens.append(normalize_scan_intensity(scan.intensity, beta_min, beta_max, eta_min, eta_max))
        source.append(np.full(len(scan), m, dtype=np.int64))
        if scan.labels is not None:
            labels.append(scan.labels)
    gt = None
    if seq.scans and len(labels) == len(seq.scans):
        gt = np.concatenate(labels)
    return DensePointCloud(
        positions=np.concatenate(positions) if positions else np.zeros((0, 3)),
        intensity_norm=np.concatenate(intens) if intens else np.zeros(0),
        source_scan=np.concatenate(source) if source else np.zeros(0, dtype=np.int64),
        gt_class=gt,
        intensity_range=(eta_min, eta_max),
        class_names=seq.class_names,
    )


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def read_bin_scan(path: str | os.PathLike) -> np.ndarray:
    """Read a headerless float32 quadruple file into an (N, 4) float64 array."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % 16:
        raise ParseError(path, f"size {len(raw)} bytes is not a multiple of 16")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if not np.all(np.isfinite(pts)):
        raise ParseError(path, "non-finite value in scan")
    return pts


def write_bin_scan(path: str | os.PathLike, points: np.ndarray) -> None:
    np.asarray(points, dtype="<f4").reshape(-1, 4).tofile(path)


def read_ply_scan(path: str | os.PathLike) -> np.ndarray:
    """Read an ASCII PLY with x, y, z and intensity vertex properties."""
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(path, "missing 'ply' magic", 1)
    n_vertex, props, in_vertex, body_start = None, [], False, None
    for i, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError(path, "only ASCII PLY is supported", i)
        elif tok[0] == "element":
            in_vertex = len(tok) == 3 and tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = i
            break
    if body_start is None or n_vertex is None:
        raise ParseError(path, "incomplete PLY header")
    missing = [p for p in ("x", "y", "z", "intensity") if p not in props]
    if missing:
        raise ParseError(path, f"PLY lacks vertex properties {missing}")
    cols = [props.index(p) for p in ("x", "y", "z", "intensity")]
    out = np.empty((n_vertex, 4))
    for k in range(n_vertex):
        lineno = body_start + 1 + k
        if lineno > len(lines):
            raise ParseError(path, f"expected {n_vertex} vertices, file ends after {k}", lineno)
        tok = lines[lineno - 1].split()
        if len(tok) < len(props):
            raise ParseError(path, f"expected {len(props)} values, got {len(tok)}", lineno)
        try:
            out[k] = [float(tok[c]) for c in cols]
        except ValueError as exc:
            raise ParseError(path, str(exc), lineno) from None
    return out


def write_ply_scan(path: str | os.PathLike, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\nproperty float intensity\n"
        "end_header\n"
    )
    with open(path, "w") as fh:
        fh.write(header)
        np.savetxt(fh, pts, fmt="%.9g")


def parse_pose_line(line: str, path="<string>", lineno: int | None = None) -> Pose:
    tok = line.split()
    if len(tok) != 12:
        raise ParseError(path, f"expected 12 pose values, got {len(tok)}", lineno)
    try:
        vals = np.array([float(t) for t in tok]).reshape(3, 4)
    except ValueError as exc:
        raise ParseError(path, str(exc), lineno) from None
    try:
        return Pose.from_matrix(vals)
    except PoseError as exc:
        raise PoseError(f"{path}:{lineno}: {exc}") from None


def load_poses(path: str | os.PathLike) -> list[Pose]:
    """Read a pose file: one row-major 3x4 ``[R|t]`` per non-blank line."""
    path = Path(path)
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                poses.append(parse_pose_line(line, path, lineno))
    return poses


def format_pose(pose: Pose) -> str:
    return " ".join(repr(float(v)) for v in pose.as_matrix()[:3].reshape(-1))


def save_poses(path: str | os.PathLike, poses: Sequence[Pose]) -> None:
    with open(path, "w") as fh:
        for pose in poses:
            fh.write(format_pose(pose) + "\n")


def read_labels(path: str | os.PathLike, n_points: int | None = None) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % 2:
        raise ParseError(path, f"size {len(raw)} bytes is not a multiple of 2")
    lab = np.frombuffer(raw, dtype="<u2").astype(np.int64)
    if n_points is not None and lab.shape[0] != n_points:
        raise ParseError(path, f"{lab.shape[0]} labels for {n_points} points")
    return lab


def write_labels(path: str | os.PathLike, labels: np.ndarray) -> None:
    lab = np.asarray(labels)
    if lab.size and (lab.min() < 0 or lab.max() > UNLABELED):
        raise ValueError("labels must fit in uint16")
    lab.astype("<u2").tofile(path)


_SCAN_READERS = {"bin": read_bin_scan, "ply": read_ply_scan}


def list_scan_files(directory: str | os.PathLike, fmt: str = "bin") -> list[Path]:
    if fmt not in _SCAN_READERS:
        raise ValueError(f"unknown scan format {fmt!r}; expected one of {sorted(_SCAN_READERS)}")
    return sorted(Path(directory).glob(f"*.{fmt}"), key=lambda p: p.name)


def load_scans(
    directory: str | os.PathLike,
    poses: str | os.PathLike | Sequence[Pose],
    fmt: str = "bin",
    label_dir: str | os.PathLike | None = None,
    class_names: Sequence[str] = (),
) -> ScanSequence:
    """Load every scan file in ``directory`` with its pose and optional labels.

    Label files share the scan file's stem with a ``.label`` suffix.
    """
    files = list_scan_files(directory, fmt)
    if not isinstance(poses, (list, tuple)):
        poses = load_poses(poses)
    reader = _SCAN_READERS[fmt]
    scans = []
    for idx, f in enumerate(files):
        pts = reader(f)
        labels = None
        if label_dir is not None:
            labels = read_labels(Path(label_dir) / f"{f.stem}.label", len(pts))
        try:
            scans.append(RawScan(pts, scan_index=idx, labels=labels))
        except ValueError as exc:
            raise ParseError(f, str(exc)) from None
    return ScanSequence(scans, list(poses), class_names)


def save_sequence(
    seq: ScanSequence,
    directory: str | os.PathLike,
    fmt: str = "bin",
) -> dict[str, Path]:
    """Write scans, poses and labels in the formats :func:`load_scans` reads.

    Returns the paths used: ``scans``, ``poses``, and ``labels`` /
    ``classes`` when the sequence has them.
    """
    root = Path(directory)
    scan_dir, label_dir = root / "scans", root / "labels"
    scan_dir.mkdir(parents=True, exist_ok=True)
    writer = {"bin": write_bin_scan, "ply": write_ply_scan}[fmt]
    for i, scan in enumerate(seq.scans):
        writer(scan_dir / f"{i:06d}.{fmt}", scan.points)
        if scan.labels is not None:
            label_dir.mkdir(exist_ok=True)
            write_labels(label_dir / f"{i:06d}.label", scan.labels)
    save_poses(root / "poses.txt", seq.poses)
    if seq.class_names:
        (root / "classes.txt").write_text("\n".join(seq.class_names) + "\n")
    out = {"scans": scan_dir, "poses": root / "poses.txt"}
    if seq.has_labels:
        out["labels"] = label_dir
    if seq.class_names:
        out["classes"] = root / "classes.txt"
    return out
