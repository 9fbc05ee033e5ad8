"""Synthetic phantoms: random convex shapes plus point and line fiducials."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, HalfspaceIntersection
from scipy.spatial.transform import Rotation

from .errors import DegenerateRecipe, FeatureOutsideGrid
from .geometry import GridSpec, ViewGeometry, pixel_rays

_MAX_RETRIES = 100


@dataclass
class Volume3D:
    """Dense attenuation grid, indexed ``data[ix, iy, iz]``."""

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape != self.grid.dims:
            raise ValueError(f"data shape {self.data.shape} != grid dims {self.grid.dims}")

    @classmethod
    def zeros(cls, grid: GridSpec, dtype=np.float32) -> "Volume3D":
        return cls(grid, np.zeros(grid.dims, dtype=dtype))

    @property
    def dims(self):
        return self.grid.dims

    @property
    def voxel_size(self):
        return self.grid.voxel

    @property
    def origin(self):
        return self.grid.origin


@dataclass(frozen=True)
class ShapeSpec:
    """A random convex body.

    ``dimensions`` are the ellipsoid semi-axes (mm).  For polyhedra they are
    the semi-axes of the ellipsoid the faces are tangent to, and ``normals``
    holds the body-frame face normals.
    """

    kind: str
    center: np.ndarray
    rotation: np.ndarray
    dimensions: np.ndarray
    attenuation: float
    normals: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("ellipsoid", "polyhedron"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if not 0.0 <= self.attenuation <= 1.0:
            raise ValueError("attenuation must lie in [0, 1]")
        if np.any(np.asarray(self.dimensions) <= 0):
            raise ValueError("shape dimensions must be positive")

    @property
    def offsets(self) -> np.ndarray:
        """Face offsets of the polyhedron (support of the inner ellipsoid)."""
        return np.sqrt(((self.normals * self.dimensions) ** 2).sum(axis=1))

    def vertices(self) -> np.ndarray:
        """Body-frame vertices (polyhedron) or bounding-box corners (ellipsoid)."""
        if self.kind == "ellipsoid":
            a = self.dimensions
            return np.array([[sx * a[0], sy * a[1], sz * a[2]]
                             for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        hs = np.hstack([self.normals, -self.offsets[:, None]])
        return HalfspaceIntersection(hs, np.zeros(3)).intersections

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        world = self.vertices() @ self.rotation.T + self.center
        return world.min(axis=0), world.max(axis=0)

    def contains(self, points) -> np.ndarray:
        """Membership of world points ``(..., 3)``; boundary counts as inside."""
        local = (np.asarray(points, float) - self.center) @ self.rotation
        if self.kind == "ellipsoid":
            return ((local / self.dimensions) ** 2).sum(axis=-1) <= 1.0
        return np.all(local @ self.normals.T <= self.offsets, axis=-1)


@dataclass(frozen=True)
class PointFeature:
    center: np.ndarray
    radius: float
    intensity: float


@dataclass(frozen=True)
class LineFeature:
    a: np.ndarray
    b: np.ndarray
    thickness: float
    intensity: float


@dataclass(frozen=True)
class FeatureSetTruth:
    points: tuple[PointFeature, ...] = ()
    lines: tuple[LineFeature, ...] = ()

    def to_dict(self) -> dict:
        return {
            "points": [
                {"center": p.center.tolist(), "radius": p.radius, "intensity": p.intensity}
                for p in self.points
            ],
            "lines": [
                {"a": l.a.tolist(), "b": l.b.tolist(), "thickness": l.thickness,
                 "intensity": l.intensity}
                for l in self.lines
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSetTruth":
        return cls(
            tuple(PointFeature(np.asarray(p["center"], float), float(p["radius"]),
                               float(p["intensity"])) for p in d.get("points", [])),
            tuple(LineFeature(np.asarray(l["a"], float), np.asarray(l["b"], float),
                              float(l["thickness"]), float(l["intensity"]))
                  for l in d.get("lines", [])),
        )

    @property
    def endpoints(self) -> np.ndarray:
        if not self.lines:
            return np.zeros((0, 3))
        return np.array([e for l in self.lines for e in (l.a, l.b)])

    @property
    def point_centers(self) -> np.ndarray:
        if not self.points:
            return np.zeros((0, 3))
        return np.array([p.center for p in self.points])


@dataclass(frozen=True)
class PhantomRecipe:
    seed: int = 0
    n_shapes: int = 10
    n_points: int = 3
    n_lines: int = 1
    intensity_scale: float = 1.0
    blur_sigma: float = 1.0
    grid: GridSpec = field(default_factory=lambda: GridSpec.centered(128))
    # the knobs below are fixed design choices, exposed for experiments
    shape_size_range: tuple[float, float] = (0.06, 0.2)
    point_radius_range: tuple[float, float] = (1.0, 2.0)
    line_thickness: float = 1.0
    line_length_range: tuple[float, float] = (0.1, 0.4)
    feature_intensity_range: tuple[float, float] = (30.0, 60.0)

    def __post_init__(self):
        if min(self.n_shapes, self.n_points, self.n_lines) < 0:
            raise ValueError("feature and shape counts must be >= 0")
        if self.intensity_scale <= 0:
            raise ValueError("intensity_scale must be positive")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "seed", "n_shapes", "n_points", "n_lines", "intensity_scale", "blur_sigma",
            "line_thickness")}
        for k in ("shape_size_range", "point_radius_range", "line_length_range",
                  "feature_intensity_range"):
            d[k] = list(getattr(self, k))
        d["grid"] = self.grid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomRecipe":
        d = dict(d)
        if "grid" in d:
            d["grid"] = GridSpec.from_dict(d["grid"])
        for k in ("shape_size_range", "point_radius_range", "line_length_range",
                  "feature_intensity_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# random draws
# ---------------------------------------------------------------------------

def _random_in_cylinder(rng, grid: GridSpec, margin: float) -> np.ndarray:
    radius = grid.cylinder_radius - margin
    if radius <= 0:
        raise DegenerateRecipe("feature margin exceeds the inscribed cylinder")
    c = grid.center
    r = radius * np.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * np.pi)
    z = rng.uniform(grid.origin[2] + margin, grid.upper[2] - margin)
    return np.array([c[0] + r * np.cos(phi), c[1] + r * np.sin(phi), z])


def _inside_cylinder(grid: GridSpec, p, margin: float) -> bool:
    c = grid.center
    p = np.asarray(p, float)
    return (np.hypot(p[0] - c[0], p[1] - c[1]) <= grid.cylinder_radius - margin
            and grid.origin[2] + margin <= p[2] <= grid.upper[2] - margin)


def _unit_vectors(rng, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _draw_shape(rng, recipe: PhantomRecipe) -> ShapeSpec:
    grid = recipe.grid
    extent = float(np.min(grid.extent))
    lo, hi = recipe.shape_size_range
    for _ in range(_MAX_RETRIES):
        kind = "polyhedron" if rng.uniform() < 0.5 else "ellipsoid"
        center = _random_in_cylinder(rng, grid, 0.0)
        rotation = Rotation.random(random_state=rng).as_matrix()
        dims = rng.uniform(lo, hi, size=3) * extent
        attenuation = float(rng.uniform(0.0, 1.0))
        normals = None
        if kind == "polyhedron":
            normals = _unit_vectors(rng, int(rng.integers(6, 13)))
            # bounded iff the origin is strictly inside the hull of the normals
            try:
                hull = ConvexHull(normals)
            except Exception:
                continue
            if np.any(hull.equations[:, 3] >= -0.05):
                continue
        shape = ShapeSpec(kind, center, rotation, dims, attenuation, normals)
        if kind == "polyhedron":
            verts = shape.vertices()
            if np.max(np.linalg.norm(verts, axis=1)) > 3.0 * dims.max():
                continue
        return shape
    raise DegenerateRecipe("could not draw a bounded shape")


def _draw_features(rng, recipe: PhantomRecipe) -> FeatureSetTruth:
    grid = recipe.grid
    vox = float(np.min(grid.voxel))
    extent = float(np.min(grid.extent))
    margin = (recipe.point_radius_range[1] + 4.0 * recipe.blur_sigma + 2.0) * vox
    ilo, ihi = recipe.feature_intensity_range
    points = []
    for _ in range(recipe.n_points):
        center = _random_in_cylinder(rng, grid, margin)
        radius = float(rng.uniform(*recipe.point_radius_range)) * vox
        points.append(PointFeature(center, radius, float(rng.uniform(ilo, ihi))))
    lines = []
    for _ in range(recipe.n_lines):
        for _attempt in range(_MAX_RETRIES):
            length = float(rng.uniform(*recipe.line_length_range)) * extent
            direction = _unit_vectors(rng, 1)[0]
            mid = _random_in_cylinder(rng, grid, margin)
            a = mid - 0.5 * length * direction
            b = mid + 0.5 * length * direction
            if _inside_cylinder(grid, a, margin) and _inside_cylinder(grid, b, margin):
                break
        else:
            raise DegenerateRecipe("could not place a line feature inside the cylinder")
        lines.append(LineFeature(a, b, recipe.line_thickness * vox, float(rng.uniform(ilo, ihi))))
    return FeatureSetTruth(tuple(points), tuple(lines))


def draw_geometry(recipe: PhantomRecipe) -> tuple[list[ShapeSpec], FeatureSetTruth]:
    """All random draws of a recipe; independent of ``intensity_scale``."""
    rng = np.random.default_rng(recipe.seed)
    shapes = [_draw_shape(rng, recipe) for _ in range(recipe.n_shapes)]
    truth = _draw_features(rng, recipe)
    return shapes, truth


# ---------------------------------------------------------------------------
# rasterisation
# ---------------------------------------------------------------------------

def cylinder_mask(grid: GridSpec) -> np.ndarray:
    """Voxels whose centre lies inside the inscribed vertical cylinder."""
    x, y, _ = grid.voxel_centers()
    c = grid.center
    inside = (x - c[0]) ** 2 + (y - c[1]) ** 2 <= grid.cylinder_radius ** 2
    return np.broadcast_to(inside, grid.dims)


def _bbox_slices(grid: GridSpec, lo, hi) -> tuple[slice, ...] | None:
    i0 = np.floor((np.asarray(lo) - grid.origin) / grid.voxel - 0.5).astype(int)
    i1 = np.ceil((np.asarray(hi) - grid.origin) / grid.voxel - 0.5).astype(int) + 1
    i0 = np.maximum(i0, 0)
    i1 = np.minimum(i1, grid.dims)
    if np.any(i1 <= i0):
        return None
    return tuple(slice(a, b) for a, b in zip(i0, i1))


def _centers_in(grid: GridSpec, sl) -> np.ndarray:
    axes = [grid.axis_centers(k)[sl[k]] for k in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    return np.stack([X, Y, Z], axis=-1)


def rasterize_shapes(shapes, grid: GridSpec) -> np.ndarray:
    """Sum of shape indicators times attenuation, clipped to the cylinder."""
    out = np.zeros(grid.dims, dtype=np.float64)
    for shape in shapes:
        sl = _bbox_slices(grid, *shape.bounding_box())
        if sl is None:
            continue
        out[sl] += shape.attenuation * shape.contains(_centers_in(grid, sl))
    out *= cylinder_mask(grid)
    return out


def _segment_distance(points, a, b) -> np.ndarray:
    ab = b - a
    L2 = ab @ ab
    rel = points - a
    t = np.zeros(points.shape[:-1]) if L2 == 0 else np.clip(rel @ ab / L2, 0.0, 1.0)
    return np.linalg.norm(rel - t[..., None] * ab, axis=-1)


FEATURE_SUBSAMPLES = 4


def _coverage(grid: GridSpec, sl, dist, radius: float) -> np.ndarray:
    """Fraction of each voxel in ``sl`` within ``radius`` of a feature.

    ``dist`` maps (..., 3) points to distances. Voxels whose centre is farther
    than radius + half the voxel diagonal are skipped.
    """
    centers = _centers_in(grid, sl)
    out = np.zeros(centers.shape[:-1])
    near = dist(centers) <= radius + 0.5 * float(np.linalg.norm(grid.voxel))
    if not near.any():
        return out
    c = centers[near]
    k = (np.arange(FEATURE_SUBSAMPLES) + 0.5) / FEATURE_SUBSAMPLES - 0.5
    offsets = np.stack(np.meshgrid(k, k, k, indexing="ij"), axis=-1).reshape(-1, 3) * grid.voxel
    hits = np.zeros(len(c))
    for off in offsets:
        hits += dist(c + off) <= radius
    out[near] = hits / len(offsets)
    return out


def feature_indicator(truth: FeatureSetTruth, grid: GridSpec, intensity_scale: float = 1.0) -> np.ndarray:
    """Unblurred feature field: intensity times the voxel fraction inside each feature."""
    out = np.zeros(grid.dims, dtype=np.float64)
    pad = 0.5 * grid.voxel
    for p in truth.points:
        if not grid.contains(p.center):
            raise FeatureOutsideGrid(f"point {p.center} lies outside the grid")
        sl = _bbox_slices(grid, p.center - p.radius - pad, p.center + p.radius + pad)
        if sl is None:
            continue
        cov = _coverage(grid, sl, lambda q, c=p.center: np.linalg.norm(q - c, axis=-1), p.radius)
        out[sl] += p.intensity * intensity_scale * cov
    for l in truth.lines:
        if not (grid.contains(l.a) and grid.contains(l.b)):
            raise FeatureOutsideGrid("line endpoint lies outside the grid")
        half = 0.5 * l.thickness
        lo = np.minimum(l.a, l.b) - half - pad
        hi = np.maximum(l.a, l.b) + half + pad
        sl = _bbox_slices(grid, lo, hi)
        if sl is None:
            continue
        cov = _coverage(grid, sl, lambda q, l=l: _segment_distance(q, l.a, l.b), half)
        out[sl] += l.intensity * intensity_scale * cov
    return out


def stamp_features(
    volume: Volume3D,
    truth: FeatureSetTruth,
    blur_sigma: float,
    intensity_scale: float,
) -> Volume3D:
    """Add Gaussian-blurred features on top of ``volume`` (returns a new one)."""
    if blur_sigma < 0:
        raise ValueError("blur_sigma must be >= 0")
    field_ = feature_indicator(truth, volume.grid, intensity_scale)
    if blur_sigma > 0:
        field_ = ndimage.gaussian_filter(field_, blur_sigma, mode="constant", truncate=4.0)
        np.maximum(field_, 0.0, out=field_)
    data = volume.data.astype(np.float64) + field_
    return Volume3D(volume.grid, data.astype(volume.data.dtype))


def generate_phantom(recipe: PhantomRecipe) -> tuple[Volume3D, FeatureSetTruth]:
    if min(recipe.grid.dims) < 16:
        raise ValueError("grid must have at least 16 voxels per axis")
    shapes, truth = draw_geometry(recipe)
    background = Volume3D(recipe.grid, rasterize_shapes(shapes, recipe.grid).astype(np.float32))
    volume = stamp_features(background, truth, recipe.blur_sigma, recipe.intensity_scale)
    return volume, truth


DEFAULT_INTENSITY_LEVELS = tuple(float(x) for x in np.round(np.linspace(0.5, 1.5, 10), 6))


def item_seed(base_seed: int, index: int) -> int:
    """Seed of dataset geometry ``index``, derived from the base seed."""
    ss = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def dataset(
    recipe_base: PhantomRecipe,
    n_volumes: int,
    intensity_levels=DEFAULT_INTENSITY_LEVELS,
) -> Iterator[tuple[Volume3D, FeatureSetTruth, PhantomRecipe]]:
    """Enumerate ``n_volumes`` geometries, each at every intensity level.

    With a single volume and a single level the item is exactly
    ``generate_phantom(replace(recipe_base, intensity_scale=level))``.
    """
    if n_volumes < 1:
        raise ValueError("n_volumes must be >= 1")
    levels = list(intensity_levels)
    if not levels:
        raise ValueError("intensity_levels must be non-empty")
    for i in range(n_volumes):
        seed = recipe_base.seed if n_volumes == 1 else item_seed(recipe_base.seed, i)
        shapes, truth = draw_geometry(replace(recipe_base, seed=seed))
        background = rasterize_shapes(shapes, recipe_base.grid).astype(np.float32)
        for level in levels:
            recipe = replace(recipe_base, seed=seed, intensity_scale=float(level))
            vol = stamp_features(Volume3D(recipe.grid, background), truth,
                                 recipe.blur_sigma, recipe.intensity_scale)
            yield vol, truth, recipe


# ---------------------------------------------------------------------------
# ground-truth masks
# ---------------------------------------------------------------------------

def _ray_segment_distance(src, dirs, a, b) -> np.ndarray:
    """Distance between lines (src, dirs) and segment ab, vectorised over dirs."""
    ab = b - a
    L2 = ab @ ab
    w0 = a - src
    if L2 == 0:
        rel = w0
        return np.linalg.norm(rel - (dirs @ rel)[..., None] * dirs, axis=-1)
    # minimise |a + lam*ab - (src + t*d)| over t (free) and lam in [0, 1]
    dab = dirs @ ab
    dw = dirs @ w0
    denom = L2 - dab ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(denom > 1e-12 * L2, (dab * dw - ab @ w0) / denom, 0.0)
    lam = np.clip(lam, 0.0, 1.0)
    q = a + lam[..., None] * ab - src
    return np.linalg.norm(q - (np.sum(q * dirs, axis=-1))[..., None] * dirs, axis=-1)


def truth_mask(truth: FeatureSetTruth, view: ViewGeometry) -> np.ndarray:
    """Pixels whose centre ray passes through a feature's unblurred geometry."""
    jj, ii = np.mgrid[0:view.n_v, 0:view.n_u]
    uv = np.stack([ii + 0.5, jj + 0.5], axis=-1)
    dirs = pixel_rays(view, uv)
    s = view.source_position
    mask = np.zeros(view.shape, dtype=bool)
    for p in truth.points:
        rel = p.center - s
        d = np.linalg.norm(rel - (dirs @ rel)[..., None] * dirs, axis=-1)
        mask |= d <= p.radius
    for l in truth.lines:
        mask |= _ray_segment_distance(s, dirs, l.a, l.b) <= 0.5 * l.thickness
    return mask
