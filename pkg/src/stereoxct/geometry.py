"""Cone-beam imaging geometry.

Conventions used throughout the package:

* World coordinates are millimetres; ``z`` is the vertical (cylinder) axis.
* Detector pixel coordinates ``(u, v)`` are continuous, measured in pixels
  from the detector corner.  Pixel ``(i, j)`` (column ``i``, row ``j``) has its
  centre at ``(i + 0.5, j + 0.5)``; images are stored as ``array[v, u]``.
* A volume grid is described by its minimum corner ``origin``, its per-axis
  ``voxel`` size and ``dims``; voxel ``(ix, iy, iz)`` has its centre at
  ``origin + (index + 0.5) * voxel``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BehindSource,
    EmptyCurve,
    InvalidGeometry,
    ParallelRays,
    RayParallelToDetector,
)

_ORTHO_TOL = 1e-9
_UNIT_TOL = 1e-9
_PARALLEL_TOL = 1e-12


def _vec3(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(3)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GridSpec:
    """Extent of a voxel grid (no data)."""

    origin: np.ndarray
    voxel: np.ndarray
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", _vec3(self.origin))
        voxel = np.broadcast_to(np.asarray(self.voxel, dtype=np.float64), (3,)).copy()
        voxel.setflags(write=False)
        object.__setattr__(self, "voxel", voxel)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise InvalidGeometry(f"grid dims must be three positive ints, got {self.dims}")
        if np.any(self.voxel <= 0):
            raise InvalidGeometry("voxel size must be positive")

    @classmethod
    def centered(cls, dims, voxel_size=1.0, center=(0.0, 0.0, 0.0)) -> "GridSpec":
        dims = tuple(int(d) for d in np.broadcast_to(dims, (3,)))
        voxel = np.broadcast_to(np.asarray(voxel_size, dtype=float), (3,))
        origin = np.asarray(center, dtype=float) - 0.5 * np.asarray(dims) * voxel
        return cls(origin, voxel, dims)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims) * self.voxel

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.extent

    @property
    def center(self) -> np.ndarray:
        return self.origin + 0.5 * self.extent

    @property
    def cylinder_radius(self) -> float:
        """Radius of the vertical cylinder inscribed in the grid."""
        return float(0.5 * min(self.extent[0], self.extent[1]))

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.voxel[axis]

    def voxel_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Open meshgrid (broadcastable) of voxel-centre coordinates."""
        return np.ix_(self.axis_centers(0), self.axis_centers(1), self.axis_centers(2))

    def world_to_index(self, p) -> np.ndarray:
        """Continuous voxel index; integer values are voxel centres."""
        return (np.asarray(p, dtype=float) - self.origin) / self.voxel - 0.5

    def index_to_world(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.voxel

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.origin) and np.all(p <= self.upper))

    def to_dict(self) -> dict:
        return {
            "origin": self.origin.tolist(),
            "voxel": self.voxel.tolist(),
            "dims": list(self.dims),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(d["origin"], d["voxel"], d["dims"])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", _vec3(self.origin))
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n == 0:
            raise InvalidGeometry("ray direction must be non-zero")
        object.__setattr__(self, "direction", _vec3(d / n))

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class ViewGeometry:
    """One X-ray source and its flat-panel detector."""

    source_position: np.ndarray
    detector_center: np.ndarray
    detector_u_axis: np.ndarray
    detector_v_axis: np.ndarray
    pixel_pitch_u: float
    pixel_pitch_v: float
    n_u: int
    n_v: int

    def __post_init__(self):
        for name in ("source_position", "detector_center", "detector_u_axis", "detector_v_axis"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))
        object.__setattr__(self, "pixel_pitch_u", float(self.pixel_pitch_u))
        object.__setattr__(self, "pixel_pitch_v", float(self.pixel_pitch_v))
        object.__setattr__(self, "n_u", int(self.n_u))
        object.__setattr__(self, "n_v", int(self.n_v))
        u, v = self.detector_u_axis, self.detector_v_axis
        if abs(np.linalg.norm(u) - 1) > _UNIT_TOL or abs(np.linalg.norm(v) - 1) > _UNIT_TOL:
            raise InvalidGeometry("detector axes must be unit vectors")
        if abs(float(u @ v)) >= _ORTHO_TOL:
            raise InvalidGeometry("detector u and v axes must be orthogonal")
        if self.pixel_pitch_u <= 0 or self.pixel_pitch_v <= 0:
            raise InvalidGeometry("pixel pitches must be positive")
        if self.n_u <= 0 or self.n_v <= 0:
            raise InvalidGeometry("pixel counts must be positive")
        if self.source_detector_distance <= 0:
            raise InvalidGeometry("source lies in the detector plane")

    # -- derived quantities ---------------------------------------------
    @property
    def normal(self) -> np.ndarray:
        """Unit detector normal pointing from the source towards the detector."""
        n = np.cross(self.detector_u_axis, self.detector_v_axis)
        if (self.detector_center - self.source_position) @ n < 0:
            n = -n
        return n

    @property
    def source_detector_distance(self) -> float:
        """Perpendicular source-to-detector-plane distance (SDD)."""
        n = np.cross(self.detector_u_axis, self.detector_v_axis)
        return float(abs((self.detector_center - self.source_position) @ n))

    @property
    def corner(self) -> np.ndarray:
        """World position of pixel coordinate (0, 0)."""
        return (
            self.detector_center
            - 0.5 * self.n_u * self.pixel_pitch_u * self.detector_u_axis
            - 0.5 * self.n_v * self.pixel_pitch_v * self.detector_v_axis
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_v, self.n_u)

    def magnification(self, point) -> float:
        """SDD divided by the source distance of ``point`` along the normal."""
        depth = (np.asarray(point, float) - self.source_position) @ self.normal
        return self.source_detector_distance / float(depth)

    def principal_point(self) -> np.ndarray:
        """Pixel coordinate of the foot of the perpendicular from the source."""
        foot = self.source_position + self.source_detector_distance * self.normal
        rel = foot - self.corner
        return np.array([
            rel @ self.detector_u_axis / self.pixel_pitch_u,
            rel @ self.detector_v_axis / self.pixel_pitch_v,
        ])

    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix ``P`` with ``(u*w, v*w, w) = P @ (x, y, z, 1)``.

        ``w`` is the depth of the point along the detector normal, so points
        in front of the source have ``w > 0``.
        """
        s = self.source_position
        n = self.normal
        h = self.source_detector_distance
        rel = s - self.corner
        depth_row = np.append(n, -n @ s)
        rows = []
        for axis, pitch in ((self.detector_u_axis, self.pixel_pitch_u),
                            (self.detector_v_axis, self.pixel_pitch_v)):
            row = (rel @ axis) * depth_row + h * np.append(axis, -axis @ s)
            rows.append(row / pitch)
        rows.append(depth_row)
        return np.vstack(rows)

    def pixel_position(self, u, v) -> np.ndarray:
        """World position of continuous pixel coordinates (broadcasts)."""
        u = np.asarray(u, dtype=float)[..., None]
        v = np.asarray(v, dtype=float)[..., None]
        return (
            self.corner
            + u * self.pixel_pitch_u * self.detector_u_axis
            + v * self.pixel_pitch_v * self.detector_v_axis
        )

    def scaled(self, factor: float) -> "ViewGeometry":
        return ViewGeometry(
            self.source_position * factor,
            self.detector_center * factor,
            self.detector_u_axis,
            self.detector_v_axis,
            self.pixel_pitch_u * factor,
            self.pixel_pitch_v * factor,
            self.n_u,
            self.n_v,
        )

    def to_dict(self) -> dict:
        return {
            "source": self.source_position.tolist(),
            "det_center": self.detector_center.tolist(),
            "u_axis": self.detector_u_axis.tolist(),
            "v_axis": self.detector_v_axis.tolist(),
            "pitch": [self.pixel_pitch_u, self.pixel_pitch_v],
            "size": [self.n_u, self.n_v],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViewGeometry":
        return cls(
            d["source"], d["det_center"], d["u_axis"], d["v_axis"],
            d["pitch"][0], d["pitch"][1], d["size"][0], d["size"][1],
        )


@dataclass(frozen=True)
class StereoRig:
    views: tuple[ViewGeometry, ...]
    world_grid: GridSpec = field(default_factory=lambda: GridSpec.centered(128))

    def __post_init__(self):
        views = tuple(self.views)
        object.__setattr__(self, "views", views)
        if not 2 <= len(views) <= 3:
            raise InvalidGeometry(f"a stereo rig needs 2 or 3 views, got {len(views)}")
        for i in range(len(views)):
            for j in range(i + 1, len(views)):
                if np.array_equal(views[i].source_position, views[j].source_position):
                    raise InvalidGeometry(f"views {i} and {j} share a source position")

    def __len__(self):
        return len(self.views)

    def to_dict(self) -> dict:
        return {"views": [v.to_dict() for v in self.views], "grid": self.world_grid.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "StereoRig":
        return cls(tuple(ViewGeometry.from_dict(v) for v in d["views"]), GridSpec.from_dict(d["grid"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "StereoRig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def orbit_view(
    azimuth_deg: float,
    elevation_deg: float = 0.0,
    *,
    sod: float,
    sdd: float,
    pitch: float,
    n_pixels: int,
    iso_center=(0.0, 0.0, 0.0),
) -> ViewGeometry:
    """Source/detector pair looking at ``iso_center`` from a given direction.

    The detector ``u`` axis stays horizontal; ``v`` completes the frame.
    """
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    iso = np.asarray(iso_center, dtype=float)
    w = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    u_axis = np.array([-np.sin(az), np.cos(az), 0.0])
    v_axis = np.cross(w, u_axis)
    v_axis /= np.linalg.norm(v_axis)
    return ViewGeometry(
        source_position=iso + sod * w,
        detector_center=iso - (sdd - sod) * w,
        detector_u_axis=u_axis,
        detector_v_axis=v_axis,
        pixel_pitch_u=pitch,
        pixel_pitch_v=pitch,
        n_u=n_pixels,
        n_v=n_pixels,
    )


def default_rig(grid: GridSpec | None = None, n_views: int = 2, n_pixels: int | None = None) -> StereoRig:
    """Default synthetic rig for a grid.

    Source-to-iso distance is four cylinder radii, magnification is 2, and
    the pixel pitch makes the detector cover the bounding sphere of the
    inscribed cylinder.  Views sit at 0 and 90 degrees azimuth; a third view
    (trinocular) sits at 45 degrees azimuth, 30 degrees elevation.
    """
    if grid is None:
        grid = GridSpec.centered(128)
    if n_views not in (2, 3):
        raise InvalidGeometry("n_views must be 2 or 3")
    if n_pixels is None:
        n_pixels = 2 * max(grid.dims)
    radius = grid.cylinder_radius
    half_height = 0.5 * grid.extent[2]
    sod = 4.0 * radius
    sdd = 2.0 * sod
    bounding = float(np.hypot(radius, half_height))
    half_fan = np.arcsin(min(bounding / sod, 0.99))
    pitch = 2.0 * sdd * np.tan(half_fan) / n_pixels * 1.02
    iso = grid.center
    angles = [(0.0, 0.0), (90.0, 0.0), (45.0, 30.0)][:n_views]
    views = tuple(
        orbit_view(a, e, sod=sod, sdd=sdd, pitch=pitch, n_pixels=n_pixels, iso_center=iso)
        for a, e in angles
    )
    return StereoRig(views, grid)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def project_point(view: ViewGeometry, p) -> np.ndarray:
    """Continuous pixel coordinate ``(u, v)`` of world point ``p``."""
    p = np.asarray(p, dtype=float)
    d = p - view.source_position
    n = view.normal
    norm_d = np.linalg.norm(d)
    if norm_d == 0:
        raise BehindSource("point coincides with the source")
    denom = d @ n
    if abs(denom) < _PARALLEL_TOL * norm_d:
        raise RayParallelToDetector("ray from source is parallel to the detector plane")
    t = ((view.detector_center - view.source_position) @ n) / denom
    if t <= 0:
        raise BehindSource("point projects behind the source")
    hit = view.source_position + t * d - view.corner
    return np.array([
        hit @ view.detector_u_axis / view.pixel_pitch_u,
        hit @ view.detector_v_axis / view.pixel_pitch_v,
    ])


def project_points(view: ViewGeometry, points) -> np.ndarray:
    """Vectorised projection of an ``(..., 3)`` array; no error checks.

    Points at or behind the source plane map to NaN.
    """
    pts = np.asarray(points, dtype=float)
    P = view.projection_matrix()
    h = pts @ P[:, :3].T + P[:, 3]
    w = h[..., 2:3]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.where(w > 0, h[..., :2] / w, np.nan)
    return uv


def pixel_ray(view: ViewGeometry, u: float, v: float) -> Ray:
    """Ray from the source through continuous pixel coordinate ``(u, v)``."""
    if not (-1.0 <= u <= view.n_u + 1.0 and -1.0 <= v <= view.n_v + 1.0):
        raise ValueError(f"pixel ({u}, {v}) outside detector bounds (+1 px)")
    target = view.pixel_position(u, v)
    return Ray(view.source_position, target - view.source_position)


def pixel_rays(view: ViewGeometry, uv) -> np.ndarray:
    """Unit directions of rays through an ``(..., 2)`` array of pixel coords."""
    uv = np.asarray(uv, dtype=float)
    d = view.pixel_position(uv[..., 0], uv[..., 1]) - view.source_position
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_box_interval(ray: Ray, lower, upper) -> tuple[float, float] | None:
    """Slab-method parameter interval where ``ray`` is inside an AABB."""
    lo, hi = -np.inf, np.inf
    for k in range(3):
        o, d = ray.origin[k], ray.direction[k]
        if abs(d) < 1e-15:
            if o < lower[k] or o > upper[k]:
                return None
            continue
        t0, t1 = (lower[k] - o) / d, (upper[k] - o) / d
        if t0 > t1:
            t0, t1 = t1, t0
        lo, hi = max(lo, t0), min(hi, t1)
    if hi <= max(lo, 0.0):
        return None
    return max(lo, 0.0), hi


@dataclass(frozen=True)
class EpipolarCurve:
    """Projection of a depth-restricted ray into another view.

    ``points`` are pixel coordinates in the target view sampled at ``depths``
    (millimetres along the source ray).  Under a pinhole model the curve is a
    straight segment, so distances are measured against that segment.
    """

    points: np.ndarray
    depths: np.ndarray

    @property
    def direction(self) -> np.ndarray:
        d = self.points[-1] - self.points[0]
        n = np.linalg.norm(d)
        return d / n if n > 0 else np.array([1.0, 0.0])

    def distance(self, uv) -> np.ndarray:
        """Distance from pixel coordinates to the polyline."""
        return polyline_distance(self.points, uv)

    def line_distance(self, uv) -> np.ndarray:
        """Distance to the infinite line carrying the curve."""
        uv = np.asarray(uv, dtype=float)
        d = self.direction
        rel = uv - self.points[0]
        return np.abs(rel[..., 0] * d[1] - rel[..., 1] * d[0])


def polyline_distance(vertices, uv) -> np.ndarray:
    vertices = np.asarray(vertices, dtype=float)
    uv = np.asarray(uv, dtype=float)
    flat = uv.reshape(-1, 2)
    best = np.full(len(flat), np.inf)
    if len(vertices) == 1:
        return np.linalg.norm(flat - vertices[0], axis=-1).reshape(uv.shape[:-1])
    for a, b in zip(vertices[:-1], vertices[1:]):
        ab = b - a
        L2 = ab @ ab
        t = np.zeros(len(flat)) if L2 == 0 else np.clip((flat - a) @ ab / L2, 0.0, 1.0)
        proj = a + t[:, None] * ab
        best = np.minimum(best, np.linalg.norm(flat - proj, axis=-1))
    return best.reshape(uv.shape[:-1])


def epipolar_curve(
    view_a: ViewGeometry,
    view_b: ViewGeometry,
    u: float,
    v: float,
    depth_range: tuple[float, float],
    n_samples: int = 16,
) -> EpipolarCurve:
    """Epipolar curve of pixel ``(u, v)`` of ``view_a`` as seen in ``view_b``.

    The depth interval is clipped to the part of the ray that lies in front
    of source B and projects onto B's detector.  Clipping is exact because
    each detector bound is a linear inequality in depth once multiplied by
    the (positive) projective depth.
    """
    d0, d1 = float(depth_range[0]), float(depth_range[1])
    if not (np.isfinite(d0) and np.isfinite(d1)) or d0 < 0 or d1 <= d0:
        raise ValueError("depth_range must be a finite positive interval")
    ray = pixel_ray(view_a, u, v)
    P = view_b.projection_matrix()
    # homogeneous coordinates are affine in depth t: h(t) = h0 + t * h1
    h0 = P[:, :3] @ ray.origin + P[:, 3]
    h1 = P[:, :3] @ ray.direction
    lo, hi = d0, d1
    eps = 1e-9
    # (coef0 + t * coef1) >= 0 constraints
    constraints = [
        (h0[2] - eps, h1[2]),                                 # w > 0
        (h0[0], h1[0]),                                       # u >= 0
        (view_b.n_u * h0[2] - h0[0], view_b.n_u * h1[2] - h1[0]),  # u <= n_u
        (h0[1], h1[1]),
        (view_b.n_v * h0[2] - h0[1], view_b.n_v * h1[2] - h1[1]),
    ]
    for c0, c1 in constraints:
        if abs(c1) < 1e-300:
            if c0 < 0:
                raise EmptyCurve("epipolar ray misses the target detector")
            continue
        root = -c0 / c1
        if c1 > 0:
            lo = max(lo, root)
        else:
            hi = min(hi, root)
    if hi <= lo:
        raise EmptyCurve("epipolar ray misses the target detector")
    depths = np.linspace(lo, hi, max(int(n_samples), 2))
    pts = ray.origin + depths[:, None] * ray.direction
    return EpipolarCurve(project_points(view_b, pts), depths)


def closest_approach(ray_a: Ray, ray_b: Ray) -> tuple[np.ndarray, float]:
    """Midpoint of the common perpendicular of two lines and its length."""
    d1, d2 = ray_a.direction, ray_b.direction
    cross = np.cross(d1, d2)
    denom = float(cross @ cross)
    if np.sqrt(denom) < _PARALLEL_TOL:
        raise ParallelRays("rays are parallel")
    w0 = ray_a.origin - ray_b.origin
    b = d1 @ d2
    d = d1 @ w0
    e = d2 @ w0
    s = (b * e - d) / denom
    t = (e - b * d) / denom
    p1 = ray_a.origin + s * d1
    p2 = ray_b.origin + t * d2
    return 0.5 * (p1 + p2), float(np.linalg.norm(p1 - p2))


def least_squares_point(rays) -> np.ndarray:
    """Point minimising the sum of squared distances to several rays."""
    A = np.zeros((3, 3))
    rhs = np.zeros(3)
    for r in rays:
        M = np.eye(3) - np.outer(r.direction, r.direction)
        A += M
        rhs += M @ r.origin
    if np.linalg.cond(A) > 1e12:
        raise ParallelRays("rays are (nearly) parallel")
    return np.linalg.solve(A, rhs)


def point_ray_distance(p, ray: Ray) -> float:
    rel = np.asarray(p, float) - ray.origin
    return float(np.linalg.norm(rel - (rel @ ray.direction) * ray.direction))
