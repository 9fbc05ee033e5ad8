"""3D localization: ray triangulation and the volumetric backprojection pathway."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .detector import FeatureMask
from .errors import AllSamplesDegenerate, GeometryMismatch, ParallelRays
from .geometry import (
    GridSpec, StereoRig, closest_approach, least_squares_point, pixel_ray, point_ray_distance,
)
from .matcher import DEGENERATE_SIN, FeatureCandidate, LineMatch, Match, epipolar_in, segment_crossing
from .projector import ProjectionImage, backproject, fbp_sum

SOURCES = ("triangulated", "volumetric")


@dataclass(frozen=True)
class Feature3D:
    """A point (one vertex) or a polyline (two or more vertices) in world mm."""

    kind: str
    positions: np.ndarray
    residual_gap: float = 0.0
    source: str = "triangulated"
    occlusion_flag: bool = False

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        object.__setattr__(self, "positions", pos)
        if self.kind not in ("point", "polyline"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if pos.shape[1] != 3 or (self.kind == "point" and len(pos) != 1):
            raise ValueError("a point has one 3-vector position")
        if self.kind == "polyline" and len(pos) < 2:
            raise ValueError("a polyline needs at least two vertices")
        if not self.residual_gap >= 0:
            raise ValueError("residual_gap must be non-negative")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")

    @property
    def position(self) -> np.ndarray:
        return self.positions[0]

    @property
    def endpoints(self) -> np.ndarray:
        return self.positions[[0, -1]]

    def to_dict(self, grid: GridSpec | None = None) -> dict:
        d = {
            "kind": self.kind,
            "positions": self.positions.tolist(),
            "residual_gap": self.residual_gap,
            "source": self.source,
            "occlusion_flag": self.occlusion_flag,
        }
        if grid is not None:
            d["voxel_positions"] = [grid.world_to_index(p).tolist() for p in self.positions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Feature3D":
        return cls(d["kind"], np.asarray(d["positions"]), d["residual_gap"], d["source"],
                   d["occlusion_flag"])


def _rays(match: Match, rig: StereoRig):
    return [pixel_ray(rig.views[c.view_id], c.position[0], c.position[1])
            for c in match.candidates]


def triangulate(match: Match, rig: StereoRig) -> Feature3D:
    """Closest-approach midpoint (2 rays) or least-squares point (3 rays).

    ``residual_gap`` is twice the largest point-to-ray distance, which for two
    rays equals the length of their common perpendicular.
    """
    rays = _rays(match, rig)
    if len(rays) == 2:
        p, _ = closest_approach(*rays)
    else:
        p = least_squares_point(rays)
    gap = 2.0 * max(point_ray_distance(p, r) for r in rays)
    return Feature3D("point", p, gap, "triangulated", match.any_occluded)


def _refined_endpoint(line_match: LineMatch, which: int, rig: StereoRig) -> Feature3D:
    """Endpoint from the crossing of its epipolar line with the partner segment.

    Endpoint positions along a blurred line are less reliable than the line
    direction, so each view's endpoint is paired with the point where its
    epipolar line crosses the other view's segment; both results are averaged.
    Falls back to plain triangulation when the crossings are degenerate.
    """
    ma, mb = line_match.endpoint_a, line_match.endpoint_b
    m = (ma, mb)[which]
    if len(m.candidates) != 2:
        return triangulate(m, rig)
    found = []
    for i, j in ((0, 1), (1, 0)):
        c = epipolar_in(rig, m.candidates[i].view_id, m.candidates[j].view_id, m.candidates[i].uv)
        if c is None:
            continue
        p, _, sin = segment_crossing(c, ma.candidates[j].uv, mb.candidates[j].uv)
        if sin < DEGENERATE_SIN:
            continue
        other = m.candidates[j]
        stand_in = FeatureCandidate(other.view_id, other.kind, tuple(p), other.component_id,
                                    other.line_axis, other.line_param)
        pair = [None, None]
        pair[i], pair[j] = m.candidates[i], stand_in
        found.append(triangulate(Match(tuple(pair), 0.0), rig))
    if not found:
        return triangulate(m, rig)
    plain = triangulate(m, rig)
    pos = np.mean([f.position for f in found], axis=0)
    return Feature3D("point", pos, plain.residual_gap, "triangulated", m.any_occluded)


def reconstruct_line(line_match: LineMatch, rig: StereoRig) -> Feature3D:
    """Polyline through triangulated endpoints and interior samples.

    Degenerate interior samples are replaced by linear interpolation between
    their valid neighbours along the reference line.
    """
    ends = []
    for which in (0, 1):
        try:
            ends.append(_refined_endpoint(line_match, which, rig))
        except ParallelRays:
            ends.append(None)
    valid = [(0.0, ends[0])] if ends[0] is not None else []
    samples = sorted(line_match.samples, key=lambda m: m.candidates[0].line_param)
    params = [m.candidates[0].line_param for m in samples]
    for t, m in zip(params, samples):
        if m.degenerate:
            continue
        try:
            valid.append((t, triangulate(m, rig)))
        except ParallelRays:
            continue
    if ends[1] is not None:
        valid.append((1.0, ends[1]))
    ordering_bad = "ordering_ambiguous" in line_match.flags
    interior_ok = any(0.0 < t < 1.0 for t, _ in valid)
    if len(valid) < 2 or (ordering_bad and not interior_ok):
        raise AllSamplesDegenerate("no reliable vertices to build the line from")
    ts = np.array([t for t, _ in valid])
    pts = np.array([f.position for _, f in valid])
    gap = max(f.residual_gap for _, f in valid)
    all_t = np.concatenate([[0.0], params, [1.0]])
    verts = np.column_stack([np.interp(all_t, ts, pts[:, k]) for k in range(3)])
    if ends[0] is None or ends[1] is None:
        # np.interp clamps; extrapolate missing endpoints with a linear fit
        fit = [np.polyfit(ts, pts[:, k], 1) for k in range(3)]
        if ends[0] is None:
            verts[0] = [np.polyval(f, 0.0) for f in fit]
        if ends[1] is None:
            verts[-1] = [np.polyval(f, 1.0) for f in fit]
    occl = any(m.any_occluded for m in (line_match.endpoint_a, line_match.endpoint_b))
    return Feature3D("polyline", verts, gap, "triangulated", occl)


# ---------------------------------------------------------------------------
# volumetric pathway
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VolumetricParams:
    """Extraction settings; ``extract_threshold=None`` means 50% of the peak."""

    extract_threshold: float | None = None
    relative_threshold: float = 0.5
    support_level: float = 0.5
    window: str = "hann"
    min_line_length: float = 4.0
    min_elongation: float = 3.0


def _mask_data(m, view):
    data = m.bits if isinstance(m, FeatureMask) else (m.data if isinstance(m, ProjectionImage) else m)
    data = np.asarray(data, dtype=np.float64)
    if data.shape != view.shape:
        raise GeometryMismatch(f"mask shape {data.shape} does not match view {view.shape}")
    return data


def support(masks, rig: StereoRig, grid: GridSpec, level: float = 0.5) -> np.ndarray:
    """Voxels whose projection falls inside the mask of every view."""
    out = np.ones(grid.dims, dtype=bool)
    for m, view in zip(masks, rig.views):
        bp = backproject(ProjectionImage(_mask_data(m, view), view), grid, "none").data
        out &= bp >= level
    return out


def _component_feature(idx, weights, grid: GridSpec, params: VolumetricParams, occl=False):
    pts = np.array([grid.index_to_world(i) for i in idx])
    w = np.maximum(weights, 1e-12)
    centroid = (pts * w[:, None]).sum(axis=0) / w.sum()
    if len(pts) > 2:
        mean = pts.mean(axis=0)
        evals, evecs = np.linalg.eigh(np.cov((pts - mean).T, bias=True))
        major, minor = np.sqrt(max(evals[-1], 0)), np.sqrt(max(evals[-2], 0))
        length = np.sqrt(12.0) * major
        vox = float(np.mean(grid.voxel))
        if length >= params.min_line_length * vox and major >= params.min_elongation * max(minor, 0.25 * vox):
            axis = evecs[:, -1]
            s = (pts - mean) @ axis
            perp = np.linalg.norm((pts - mean) - np.outer(s, axis), axis=1)
            inset = max(float(np.median(perp)), 0.5 * vox)
            s0, s1 = s.min() + inset, s.max() - inset
            if s1 > s0:
                return Feature3D("polyline", [mean + s0 * axis, mean + s1 * axis], 0.0,
                                 "volumetric", occl)
    return Feature3D("point", centroid, 0.0, "volumetric", occl)


def volumetric_map(masks, rig: StereoRig, grid: GridSpec | None = None,
                   extract_threshold: float | None = None,
                   params: VolumetricParams | None = None):
    """Sum of filtered backprojections plus connected-component extraction.

    A voxel is kept when every view's (unfiltered) mask backprojection covers
    it and the filtered sum reaches the threshold. With no explicit threshold
    each supported component keeps voxels at or above ``relative_threshold``
    of its own peak.
    """
    params = params or VolumetricParams()
    grid = grid or rig.world_grid
    masks = list(masks)
    if len(masks) != len(rig.views):
        raise GeometryMismatch("one mask per rig view is required")
    datas = [_mask_data(m, v) for m, v in zip(masks, rig.views)]
    vol = fbp_sum(datas, rig.views, grid, params.window)
    if not all(d.any() for d in datas):
        return vol, []
    sup = support(datas, rig, grid, params.support_level)
    val = vol.data
    thr = extract_threshold if extract_threshold is not None else params.extract_threshold
    keep = sup & (val > 0)
    labels, n = ndimage.label(keep, structure=np.ones((3, 3, 3)))
    feats = []
    if thr is not None:
        keep &= val >= thr
        labels, n = ndimage.label(keep, structure=np.ones((3, 3, 3)))
    for cid, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        local = labels[sl] == cid
        v = val[sl]
        if thr is None:
            local &= v >= params.relative_threshold * v[local].max()
        idx = np.argwhere(local) + np.array([s.start for s in sl])
        feats.append(_component_feature(idx, v[local], grid, params))
    feats.sort(key=lambda f: tuple(f.positions[0]))
    return vol, feats
