"""Virtual camera poses and z-buffered greyscale renders of a dense cloud.

Cameras use the pinhole model in the local pose frame (X right, Y down,
Z forward): ``u = f*x/z + cx``, ``v = f*y/z + cy``. Pixel ``(col, row)``
covers ``[col-0.5, col+0.5) x [row-0.5, row+0.5)``, so the principal point
falls on the center of pixel ``(round(cx), round(cy))``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ParseError
from .pointcloud import DensePointCloud, Pose, rotation_about

EMPTY = -1


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 1024
    height: int = 512
    focal: float = 512.0
    cx: float = 512.0
    cy: float = 256.0

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int = 1024, height: int = 512, hfov_deg: float = 90.0):
        """Centered principal point, focal chosen for the horizontal FOV."""
        focal = (width / 2) / np.tan(np.radians(hfov_deg) / 2)
        return cls(width, height, float(focal), width / 2, height / 2)


@dataclass(frozen=True)
class PoseNoiseParams:
    """Pose jitter: yaw half-range ``theta`` (degrees), ``lam`` along camera X
    and Z, ``gamma`` along camera Y (meters), and ``K`` samples."""

    theta: float = 30.0
    lam: float = 1.0
    gamma: float = 1.0
    K: int = 600
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.theta, self.lam, self.gamma) < 0:
            raise ValueError("noise half-ranges must be non-negative")
        if self.K < 1:
            raise ValueError("K must be >= 1")


@dataclass(frozen=True, eq=False)
class RenderedView:
    view_index: int
    pose: Pose
    image: np.ndarray  # (H, W) uint8
    depth: np.ndarray  # (H, W) float32, 0 where empty
    point_index: np.ndarray  # (H, W) int32, EMPTY where empty
    intrinsics: CameraIntrinsics = CameraIntrinsics()
    depth_range: tuple[float, float] = (1.0, 30.0)
    splat_radius: int = 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    @property
    def mask(self) -> np.ndarray:
        return self.point_index != EMPTY


def sample_poses(sensor_poses: Sequence[Pose], params: PoseNoiseParams) -> list[Pose]:
    """Draw ``params.K`` jittered copies of randomly chosen sensor poses.

    Each draw picks a base pose uniformly, turns it about its own Y axis by
    up to ``theta`` degrees, then shifts it along the turned X, Z and Y axes.
    """
    if len(sensor_poses) == 0:
        raise ValueError("sensor_poses is empty")
    rng = np.random.default_rng(params.seed)
    theta = np.radians(params.theta)
    out = []
    for _ in range(params.K):
        base = sensor_poses[int(rng.integers(len(sensor_poses)))]
        R = base.rotation @ rotation_about("y", rng.uniform(-theta, theta))
        t = base.translation + rng.uniform(-params.lam, params.lam) * R[:, 0]
        t = t + rng.uniform(-params.lam, params.lam) * R[:, 2]
        t = t + rng.uniform(-params.gamma, params.gamma) * R[:, 1]
        out.append(Pose(R, t))
    return out


def quantize_intensity(values: np.ndarray, intensity_range: tuple[float, float]) -> np.ndarray:
    """Map normalized intensities onto 8-bit greyscale."""
    lo, hi = intensity_range
    if hi <= lo:
        return np.zeros(np.shape(values), dtype=np.uint8)
    scaled = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo) * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def project(points_cam: np.ndarray, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Continuous pixel coordinates of camera-frame points (z must be > 0)."""
    z = points_cam[:, 2]
    u = intr.focal * points_cam[:, 0] / z + intr.cx
    v = intr.focal * points_cam[:, 1] / z + intr.cy
    return u, v


def unproject(col, row, depth, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points for pixel centers at the given depths."""
    depth = np.asarray(depth, dtype=np.float64)
    x = (np.asarray(col, dtype=np.float64) - intr.cx) * depth / intr.focal
    y = (np.asarray(row, dtype=np.float64) - intr.cy) * depth / intr.focal
    return np.stack([x, y, depth], axis=-1)


def render(
    cloud: DensePointCloud,
    pose: Pose,
    intr: CameraIntrinsics = CameraIntrinsics(),
    splat_radius: int = 1,
    d_min: float = 1.0,
    d_max: float = 30.0,
    view_index: int = 0,
) -> RenderedView:
    """Render one view with square splats and a nearest-depth z-buffer.

    Equal depths at a pixel resolve to the lowest point index.
    """
    if not (0 < d_min < d_max):
        raise ValueError(f"invalid depth range [{d_min}, {d_max}]")
    if len(cloud) == 0:
        raise ValueError("cannot render an empty cloud")
    if splat_radius < 0:
        raise ValueError("splat_radius must be >= 0")
    W, H = intr.width, intr.height

    cam = pose.to_local(cloud.positions)
    z = cam[:, 2]
    keep = np.flatnonzero((z >= d_min) & (z <= d_max))
    u, v = project(cam[keep], intr)
    col = np.floor(u + 0.5)
    row = np.floor(v + 0.5)
    inside = (col >= 0) & (col < W) & (row >= 0) & (row < H)
    keep = keep[inside]
    col = col[inside].astype(np.int64)
    row = row[inside].astype(np.int64)

    # rank survivors by (depth, point index); smallest rank wins each pixel
    order = np.argsort(z[keep], kind="stable")
    keep, col, row = keep[order], col[order], row[order]
    rank = np.arange(keep.shape[0], dtype=np.int64)

    r = int(splat_radius)
    offs = np.arange(-r, r + 1)
    dc, dr = np.meshgrid(offs, offs, indexing="xy")
    cc = (col[:, None] + dc.reshape(1, -1)).reshape(-1)
    rr = (row[:, None] + dr.reshape(1, -1)).reshape(-1)
    rk = np.repeat(rank, dc.size)
    ok = (cc >= 0) & (cc < W) & (rr >= 0) & (rr < H)
    pix = rr[ok] * W + cc[ok]

    sentinel = np.iinfo(np.int64).max
    best = np.full(W * H, sentinel, dtype=np.int64)
    np.minimum.at(best, pix, rk[ok])
    hit = best != sentinel

    point_index = np.full(W * H, EMPTY, dtype=np.int32)
    point_index[hit] = keep[best[hit]]
    depth = np.zeros(W * H, dtype=np.float32)
    depth[hit] = z[point_index[hit]]
    image = np.zeros(W * H, dtype=np.uint8)
    image[hit] = quantize_intensity(cloud.intensity_norm[point_index[hit]], cloud.intensity_range)

    return RenderedView(
        view_index=view_index,
        pose=pose,
        image=image.reshape(H, W),
        depth=depth.reshape(H, W),
        point_index=point_index.reshape(H, W),
        intrinsics=intr,
        depth_range=(float(d_min), float(d_max)),
        splat_radius=r,
    )


def render_views(
    cloud: DensePointCloud,
    poses: Sequence[Pose],
    intr: CameraIntrinsics = CameraIntrinsics(),
    splat_radius: int = 1,
    d_min: float = 1.0,
    d_max: float = 30.0,
    workers: int = 1,
):
    """Yield one :class:`RenderedView` per pose, in pose order."""
    def one(i: int) -> RenderedView:
        return render(cloud, poses[i], intr, splat_radius, d_min, d_max, view_index=i)

    if workers <= 1:
        for i in range(len(poses)):
            yield one(i)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(one, range(len(poses)))


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

SIDECAR_KEYS = (
    "view_index",
    "rotation",
    "translation",
    "width",
    "height",
    "focal",
    "cx",
    "cy",
    "d_min",
    "d_max",
    "splat_radius",
)


def view_stem(index: int) -> str:
    return f"view_{index:06d}"


def format_sidecar(view: RenderedView) -> str:
    """Sidecar text: one ``key: value...`` line per entry of :data:`SIDECAR_KEYS`.

    ``rotation`` holds 9 row-major values, ``translation`` 3.
    """
    intr = view.intrinsics
    fmt = lambda a: " ".join(repr(float(x)) for x in np.ravel(a))  # noqa: E731
    lines = [
        f"view_index: {view.view_index}",
        f"rotation: {fmt(view.pose.rotation)}",
        f"translation: {fmt(view.pose.translation)}",
        f"width: {intr.width}",
        f"height: {intr.height}",
        f"focal: {intr.focal!r}",
        f"cx: {intr.cx!r}",
        f"cy: {intr.cy!r}",
        f"d_min: {view.depth_range[0]!r}",
        f"d_max: {view.depth_range[1]!r}",
        f"splat_radius: {view.splat_radius}",
    ]
    return "\n".join(lines) + "\n"


def parse_sidecar(path: str | os.PathLike) -> dict:
    path = Path(path)
    fields = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, val = line.partition(":")
        if not sep:
            raise ParseError(path, "expected 'key: value'", lineno)
        fields[key.strip()] = val.split()
    missing = [k for k in SIDECAR_KEYS if k not in fields]
    if missing:
        raise ParseError(path, f"missing keys {missing}")
    try:
        return {
            "view_index": int(fields["view_index"][0]),
            "pose": Pose(
                np.array(fields["rotation"], dtype=float).reshape(3, 3),
                np.array(fields["translation"], dtype=float),
            ),
            "intrinsics": CameraIntrinsics(
                int(fields["width"][0]),
                int(fields["height"][0]),
                float(fields["focal"][0]),
                float(fields["cx"][0]),
                float(fields["cy"][0]),
            ),
            "depth_range": (float(fields["d_min"][0]), float(fields["d_max"][0])),
            "splat_radius": int(fields["splat_radius"][0]),
        }
    except ValueError as exc:
        raise ParseError(path, str(exc)) from None


def export_view(view: RenderedView, directory: str | os.PathLike, with_arrays: bool = False) -> None:
    directory = Path(directory)
    stem = view_stem(view.view_index)
    Image.fromarray(view.image).save(directory / f"{stem}.png")
    (directory / f"{stem}.txt").write_text(format_sidecar(view))
    if with_arrays:
        np.savez_compressed(directory / f"{stem}.npz", depth=view.depth, point_index=view.point_index)


def export_views(views, directory: str | os.PathLike, with_arrays: bool = False) -> list[Path]:
    """Write ``view_%06d.png`` plus a ``view_%06d.txt`` sidecar per view.

    ``with_arrays`` also stores depth and point-index maps (``.npz``) so the
    views can be reloaded with :func:`load_view`.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not os.access(directory, os.W_OK):
        raise PermissionError(f"directory not writable: {directory}")
    written = []
    for view in views:
        export_view(view, directory, with_arrays)
        written.append(directory / f"{view_stem(view.view_index)}.png")
    return written


def load_view(directory: str | os.PathLike, index: int) -> RenderedView:
    """Reload a view written by :func:`export_views` with ``with_arrays=True``."""
    directory = Path(directory)
    stem = view_stem(index)
    meta = parse_sidecar(directory / f"{stem}.txt")
    image = np.asarray(Image.open(directory / f"{stem}.png"), dtype=np.uint8)
    with np.load(directory / f"{stem}.npz") as z:
        depth, point_index = z["depth"], z["point_index"]
    return RenderedView(
        view_index=meta["view_index"],
        pose=meta["pose"],
        image=image,
        depth=depth,
        point_index=point_index,
        intrinsics=meta["intrinsics"],
        depth_range=meta["depth_range"],
        splat_radius=meta["splat_radius"],
    )
