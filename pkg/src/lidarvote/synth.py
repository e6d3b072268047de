"""Synthetic labeled LiDAR sequences ray-cast against simple primitives.

World frame is Z-up. Sensor poses use the camera convention of
:mod:`lidarvote.pointcloud` (X right, Y down, Z forward), so a ray at
elevation ``e`` and azimuth ``a`` (0 = straight ahead, positive to the
right) has local direction ``(cos e sin a, -sin e, cos e cos a)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .pointcloud import Pose, RawScan, ScanSequence

CLASS_NAMES = ("driveable_surface", "sidewalk", "manmade", "vegetation", "terrain")
ROAD, SIDEWALK, MANMADE, VEGETATION, TERRAIN = range(5)

_T_MIN = 1e-9


@dataclass(frozen=True)
class Primitive:
    class_index: int
    intensity_mean: float = 0.5
    intensity_sigma: float = 0.05

    shape = "primitive"

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the first hit per ray (``inf`` for a miss)."""
        raise NotImplementedError

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance from each point to this primitive's surface."""
        raise NotImplementedError


def _plane_hits(origin, dirs, height):
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (height - origin[2]) / dz
    return np.where((dz != 0) & (t > _T_MIN), t, np.inf)


@dataclass(frozen=True)
class GroundPlane(Primitive):
    """Unbounded horizontal plane ``z = height``."""

    height: float = 0.0
    shape = "ground_plane"

    def intersect(self, origin, dirs):
        return _plane_hits(origin, dirs, self.height)

    def distance(self, points):
        return np.abs(points[:, 2] - self.height)


@dataclass(frozen=True)
class Strip(Primitive):
    """Horizontal rectangle ``z = height`` over ``x in [x0, x1]``, ``y in [y0, y1]``."""

    height: float = 0.0
    x0: float = -np.inf
    x1: float = np.inf
    y0: float = -1.0
    y1: float = 1.0
    shape = "strip"

    def intersect(self, origin, dirs):
        t = _plane_hits(origin, dirs, self.height)
        with np.errstate(invalid="ignore"):
            x = origin[0] + t * dirs[:, 0]
            y = origin[1] + t * dirs[:, 1]
            inside = (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)
        return np.where(np.isfinite(t) & inside, t, np.inf)

    def distance(self, points):
        dx = np.maximum(np.maximum(self.x0 - points[:, 0], points[:, 0] - self.x1), 0)
        dy = np.maximum(np.maximum(self.y0 - points[:, 1], points[:, 1] - self.y1), 0)
        return np.sqrt(dx**2 + dy**2 + (points[:, 2] - self.height) ** 2)


@dataclass(frozen=True)
class Box(Primitive):
    """Axis-aligned box between corners ``lo`` and ``hi``."""

    lo: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hi: tuple[float, float, float] = (1.0, 1.0, 1.0)
    shape = "box"

    def intersect(self, origin, dirs):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
        # axis-parallel rays: inside the slab -> unbounded, outside -> miss
        par = dirs == 0
        inside = (origin >= lo) & (origin <= hi)
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        near = tmin.max(axis=1)
        far = tmax.min(axis=1)
        t = np.where(near > _T_MIN, near, far)
        return np.where((near <= far) & (t > _T_MIN), t, np.inf)

    def distance(self, points):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        outside = np.maximum(np.maximum(lo - points, points - hi), 0)
        d_out = np.linalg.norm(outside, axis=1)
        d_in = np.minimum(points - lo, hi - points).min(axis=1)
        return np.where(d_out > 0, d_out, np.abs(d_in))


@dataclass(frozen=True)
class Blob(Primitive):
    """Sphere of ``radius`` around ``center``."""

    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0
    shape = "blob"

    def intersect(self, origin, dirs):
        oc = origin - np.asarray(self.center)
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0))
        t_near = (-b - sq) / (2 * a)
        t_far = (-b + sq) / (2 * a)
        t = np.where(t_near > _T_MIN, t_near, t_far)
        return np.where((disc >= 0) & (t > _T_MIN), t, np.inf)

    def distance(self, points):
        return np.abs(np.linalg.norm(points - np.asarray(self.center), axis=1) - self.radius)


@dataclass(frozen=True)
class SceneSpec:
    """Everything :func:`generate` needs to build a sequence.

    Rays form a grid of ``n_beams`` elevations spread evenly over
    ``elevation_deg`` and ``n_azimuth`` azimuths over ``azimuth_deg``
    (default: a full turn without repeating the end point).
    """

    trajectory: tuple[Pose, ...]
    primitives: tuple[Primitive, ...]
    class_names: tuple[str, ...] = CLASS_NAMES
    n_beams: int = 32
    n_azimuth: int = 720
    elevation_deg: tuple[float, float] = (-25.0, 10.0)
    azimuth_deg: tuple[float, float] | None = None
    max_range: float = 40.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "trajectory", tuple(self.trajectory))
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "class_names", tuple(self.class_names))

    def validate(self) -> None:
        C = len(self.class_names)
        if self.n_beams < 1 or self.n_azimuth < 1:
            raise ValueError("invalid scene: beam and azimuth counts must be >= 1")
        if not self.max_range > 0:
            raise ValueError("invalid scene: max_range must be positive")
        if not self.trajectory:
            raise ValueError("invalid scene: empty trajectory")
        for p in self.primitives:
            if not 0 <= p.class_index < C:
                raise ValueError(f"invalid scene: primitive class {p.class_index} outside [0, {C})")
            if not 0.0 <= p.intensity_mean <= 1.0 or p.intensity_sigma < 0:
                raise ValueError("invalid scene: intensity mean must be in [0, 1], sigma >= 0")

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, beam-major, shape (n_beams*n_azimuth, 3)."""
        elev = np.radians(np.linspace(*self.elevation_deg, self.n_beams))
        if self.azimuth_deg is None:
            azim = np.radians(np.arange(self.n_azimuth) * (360.0 / self.n_azimuth) - 180.0)
        else:
            azim = np.radians(np.linspace(*self.azimuth_deg, self.n_azimuth))
        e, a = np.meshgrid(elev, azim, indexing="ij")
        e, a = e.reshape(-1), a.reshape(-1)
        return np.stack([np.cos(e) * np.sin(a), -np.sin(e), np.cos(e) * np.cos(a)], axis=1)


def cast_rays(
    primitives: Sequence[Primitive], origin: np.ndarray, dirs: np.ndarray, max_range: float
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit per world-frame ray.

    Returns ``(t, which)``: ray parameter and primitive index, with
    ``which == -1`` where nothing is hit within ``max_range``. Exact ties
    go to the earlier primitive.
    """
    n = dirs.shape[0]
    if not primitives:
        return np.full(n, np.inf), np.full(n, -1, dtype=np.int64)
    ts = np.stack([p.intersect(origin, dirs) for p in primitives], axis=1)
    which = np.argmin(ts, axis=1)
    t = ts[np.arange(n), which]
    miss = ~(t <= max_range)
    which = np.where(miss, -1, which)
    return t, which


def scan_from_pose(spec: SceneSpec, pose_index: int, local_dirs: np.ndarray | None = None) -> RawScan:
    """Ray-cast one scan; points are returned in the sensor frame."""
    pose = spec.trajectory[pose_index]
    if local_dirs is None:
        local_dirs = spec.ray_directions()
    world_dirs = local_dirs @ pose.rotation.T
    t, which = cast_rays(spec.primitives, pose.translation, world_dirs, spec.max_range)
    # one normal draw per ray, hit or not, so streams are fixed by (seed, pose, ray)
    noise = np.random.default_rng([spec.seed, pose_index]).standard_normal(local_dirs.shape[0])
    hit = np.flatnonzero(which >= 0)
    xyz = t[hit, None] * local_dirs[hit]
    cls = which[hit]
    mean = np.array([p.intensity_mean for p in spec.primitives])[cls]
    sigma = np.array([p.intensity_sigma for p in spec.primitives])[cls]
    inten = np.clip(mean + sigma * noise[hit], 0.0, 1.0)
    labels = np.array([p.class_index for p in spec.primitives], dtype=np.int64)[cls]
    return RawScan(np.column_stack([xyz, inten]), scan_index=pose_index, labels=labels)


def generate(spec: SceneSpec) -> ScanSequence:
    """One scan per trajectory pose with ground-truth classes."""
    spec.validate()
    dirs = spec.ray_directions()
    scans = [scan_from_pose(spec, i, dirs) for i in range(len(spec.trajectory))]
    return ScanSequence(scans, list(spec.trajectory), spec.class_names)


def hit_primitive(spec: SceneSpec, seq: ScanSequence) -> list[np.ndarray]:
    """Index of the primitive each generated point came from (recomputed by re-casting)."""
    dirs = spec.ray_directions()
    out = []
    for i, pose in enumerate(spec.trajectory):
        _, which = cast_rays(spec.primitives, pose.translation, dirs @ pose.rotation.T, spec.max_range)
        out.append(which[which >= 0])
    return out


def forward_pose(x: float, y: float, z: float, heading: float = 0.0) -> Pose:
    """Level sensor pose at ``(x, y, z)`` looking along world heading (radians from +X)."""
    fwd = np.array([np.cos(heading), np.sin(heading), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    right = np.cross(down, fwd)
    return Pose(np.column_stack([right, down, fwd]), [x, y, z])


def straight_trajectory(length: float = 50.0, n_poses: int = 20, height: float = 1.8) -> tuple[Pose, ...]:
    return tuple(forward_pose(x, 0.0, height) for x in np.linspace(0.0, length, n_poses))


# class-separated intensity means; road darkest, vegetation brightest
DEFAULT_INTENSITY = {ROAD: 0.15, SIDEWALK: 0.35, TERRAIN: 0.45, MANMADE: 0.6, VEGETATION: 0.8}
DEFAULT_SIGMA = 0.05


def default_scene(seed: int = 0, **overrides) -> SceneSpec:
    """A 5-class street along a 50 m straight trajectory of 20 poses.

    Road in the middle, a sidewalk on each side, buildings behind the left
    sidewalk, a terrain strip with vegetation blobs behind the right one.
    Building heights and blob placement vary with ``seed``; ``overrides``
    replace :class:`SceneSpec` fields.
    """
    rng = np.random.default_rng([seed, 1])
    x0, x1 = 3.0, 85.0

    def mk(cls, **kw):
        return dict(class_index=cls, intensity_mean=DEFAULT_INTENSITY[cls], intensity_sigma=DEFAULT_SIGMA, **kw)

    prims: list[Primitive] = [
        Strip(**mk(ROAD, height=0.0, x0=x0, x1=x1, y0=-4.0, y1=4.0)),
        Strip(**mk(SIDEWALK, height=0.15, x0=x0, x1=x1, y0=4.0, y1=7.0)),
        Strip(**mk(SIDEWALK, height=0.15, x0=x0, x1=x1, y0=-7.0, y1=-4.0)),
        Strip(**mk(TERRAIN, height=0.05, x0=x0, x1=x1, y0=-14.0, y1=-7.0)),
    ]
    bx = x0
    while bx < x1 - 4:
        width = rng.uniform(8.0, 14.0)
        top = rng.uniform(6.0, 12.0)
        prims.append(Box(**mk(MANMADE, lo=(bx, 8.0, 0.0), hi=(min(bx + width, x1), 16.0, top))))
        bx += width + rng.uniform(2.0, 5.0)
    for cx in np.arange(x0 + 3.0, x1 - 2.0, 9.0):
        r = rng.uniform(1.5, 2.5)
        cy = rng.uniform(-12.0, -9.5)
        cxj = cx + rng.uniform(-2.0, 2.0)
        prims.append(Blob(**mk(VEGETATION, center=(cxj, cy, r + 0.4), radius=r)))

    fields = dict(
        trajectory=straight_trajectory(50.0, 20, 1.8),
        primitives=tuple(prims),
        class_names=CLASS_NAMES,
        n_beams=32,
        n_azimuth=720,
        elevation_deg=(-25.0, 10.0),
        max_range=40.0,
        seed=seed,
    )
    fields.update(overrides)
    return SceneSpec(**fields)
