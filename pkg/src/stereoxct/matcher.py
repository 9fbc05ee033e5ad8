"""Candidate extraction from feature masks and epipolar matching across views."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .detector import FeatureMask
from .errors import EmptyCurve, EndpointCountMismatch, NoViews, ToleranceNonPositive
from .geometry import StereoRig, ViewGeometry, epipolar_curve, pixel_ray, ray_box_interval

KINDS = ("point", "line_endpoint", "line_sample")

DEFAULT_TOL_PX = 2.0
# line endpoints sit on blurred caps, so they get a looser gate than points
DEFAULT_LINE_TOL_PX = 3.0
# sin of the smallest epipolar/line crossing angle accepted for interior samples
DEGENERATE_SIN = 0.15


@dataclass(frozen=True)
class FeatureCandidate:
    """A detected 2D feature location (pixel units, ``u`` along columns)."""

    view_id: int
    kind: str
    position: tuple
    component_id: int
    line_axis: tuple | None = None
    # fractional position along the parent line (0 and 1 at the endpoints)
    line_param: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown candidate kind {self.kind!r}")
        object.__setattr__(self, "position", tuple(float(x) for x in self.position))
        if self.line_axis is not None:
            object.__setattr__(self, "line_axis", tuple(float(x) for x in self.line_axis))

    @property
    def uv(self) -> np.ndarray:
        return np.array(self.position)

    def to_dict(self) -> dict:
        return {
            "view_id": self.view_id, "kind": self.kind, "position": list(self.position),
            "component_id": self.component_id,
            "line_axis": None if self.line_axis is None else list(self.line_axis),
            "line_param": self.line_param,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureCandidate":
        return cls(d["view_id"], d["kind"], tuple(d["position"]), d["component_id"],
                   None if d.get("line_axis") is None else tuple(d["line_axis"]),
                   d.get("line_param"))


@dataclass(frozen=True)
class Match:
    """Corresponding candidates, at most one per view.

    ``occluded[i]`` marks an entry that stands in for a feature hidden behind
    a line in that view: its position is where the line crosses the epipolar
    constraint, not a detection of the feature itself.
    """

    candidates: tuple
    epipolar_residual: float
    ambiguity_flag: bool = False
    occluded: tuple = ()
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not self.occluded:
            object.__setattr__(self, "occluded", (False,) * len(self.candidates))
        object.__setattr__(self, "occluded", tuple(bool(o) for o in self.occluded))
        if len(self.candidates) < 2 or len(self.occluded) != len(self.candidates):
            raise ValueError("a match needs at least two candidates")
        if not self.epipolar_residual >= 0:
            raise ValueError("residual must be non-negative")

    @property
    def any_occluded(self) -> bool:
        return any(self.occluded)

    def to_dict(self) -> dict:
        return {
            "candidates": [c.to_dict() for c in self.candidates],
            "epipolar_residual": self.epipolar_residual,
            "ambiguity_flag": self.ambiguity_flag,
            "occluded": list(self.occluded),
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Match":
        return cls(tuple(FeatureCandidate.from_dict(c) for c in d["candidates"]),
                   d["epipolar_residual"], d["ambiguity_flag"], tuple(d["occluded"]),
                   d.get("degenerate", False))


@dataclass(frozen=True)
class LineMatch:
    endpoint_a: Match
    endpoint_b: Match
    samples: tuple = ()
    flags: tuple = ()

    def to_dict(self) -> dict:
        return {"endpoint_a": self.endpoint_a.to_dict(), "endpoint_b": self.endpoint_b.to_dict(),
                "samples": [s.to_dict() for s in self.samples], "flags": list(self.flags)}

    @classmethod
    def from_dict(cls, d: dict) -> "LineMatch":
        return cls(Match.from_dict(d["endpoint_a"]), Match.from_dict(d["endpoint_b"]),
                   tuple(Match.from_dict(s) for s in d["samples"]), tuple(d.get("flags", ())))


# ---------------------------------------------------------------------------
# candidate extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExtractionParams:
    """Component classification: elongated components become lines."""

    min_line_length: float = 8.0
    min_elongation: float = 3.0
    sample_spacing: float = 4.0
    min_samples: int = 5
    min_area: int = 1


def _component_geometry(rows, cols, weights):
    uv = np.column_stack([cols + 0.5, rows + 0.5]).astype(float)
    mean = uv.mean(axis=0)
    cov = np.cov((uv - mean).T, bias=True) if len(uv) > 1 else np.zeros((2, 2))
    evals, evecs = np.linalg.eigh(cov)
    centroid = (uv * weights[:, None]).sum(axis=0) / weights.sum()
    return uv, mean, evals[::-1], evecs[:, ::-1], centroid


def extract_candidates(mask, view_id: int = 0, params: ExtractionParams | None = None):
    """Connected components of ``mask`` as point or line candidates."""
    params = params or ExtractionParams()
    if isinstance(mask, FeatureMask):
        bits, score = mask.bits, mask.score
    else:
        bits, score = np.asarray(mask, dtype=bool), None
    labels, n = ndimage.label(bits, structure=np.ones((3, 3)))
    out = []
    objects = ndimage.find_objects(labels)
    for cid in range(1, n + 1):
        sl = objects[cid - 1]
        local = labels[sl] == cid
        rows, cols = np.nonzero(local)
        if len(rows) < params.min_area:
            continue
        rows = rows + sl[0].start
        cols = cols + sl[1].start
        w = score[rows, cols] if score is not None else np.ones(len(rows))
        w = np.where(w > 0, w, 1e-12)
        uv, mean, evals, evecs, centroid = _component_geometry(rows, cols, w)
        major = np.sqrt(max(evals[0], 0.0))
        minor = np.sqrt(max(evals[1], 0.0))
        length = np.sqrt(12.0) * major
        elong = major / max(minor, 0.25)
        if length < params.min_line_length or elong < params.min_elongation:
            out.append(FeatureCandidate(view_id, "point", tuple(centroid), cid))
            continue
        axis = evecs[:, 0]
        if axis[0] < 0 or (axis[0] == 0 and axis[1] < 0):
            axis = -axis
        normal = np.array([-axis[1], axis[0]])
        rel = uv - mean
        s = rel @ axis
        # a stripe of width W has median |offset| W/4; robust to blobs on the line
        half_width = 2.0 * float(np.median(np.abs(rel @ normal)))
        inset = max(half_width, 0.5)
        s0, s1 = s.min() + inset, s.max() - inset
        if s1 <= s0:
            s0 = s1 = 0.5 * (s.min() + s.max())
        ends = [mean + s0 * axis, mean + s1 * axis]
        ax = tuple(axis)
        out.append(FeatureCandidate(view_id, "line_endpoint", tuple(ends[0]), cid, ax, 0.0))
        out.append(FeatureCandidate(view_id, "line_endpoint", tuple(ends[1]), cid, ax, 1.0))
        n_s = max(params.min_samples, int(np.ceil((s1 - s0) / params.sample_spacing)) - 1)
        for k in range(1, n_s + 1):
            t = k / (n_s + 1)
            p = ends[0] + t * (ends[1] - ends[0])
            out.append(FeatureCandidate(view_id, "line_sample", tuple(p), cid, ax, t))
    return out


# ---------------------------------------------------------------------------
# epipolar residuals
# ---------------------------------------------------------------------------

def _depth_range(view: ViewGeometry, uv, rig: StereoRig):
    grid = rig.world_grid
    pad = np.asarray(grid.voxel)
    ray = pixel_ray(view, float(uv[0]), float(uv[1]))
    iv = ray_box_interval(ray, grid.origin - pad, grid.upper + pad)
    if iv is None:
        return None
    return max(iv[0], 1e-6), iv[1]


def epipolar_in(rig: StereoRig, ia: int, ib: int, uv):
    rng = _depth_range(rig.views[ia], uv, rig)
    if rng is None or rng[1] <= rng[0]:
        return None
    try:
        return epipolar_curve(rig.views[ia], rig.views[ib], float(uv[0]), float(uv[1]), rng, 2)
    except EmptyCurve:
        return None


def _one_way(rig, ia, ib, pts_a, pts_b):
    out = np.full((len(pts_a), len(pts_b)), np.inf)
    if len(pts_b) == 0:
        return out
    pts_b = np.asarray(pts_b, dtype=float).reshape(-1, 2)
    for i, uv in enumerate(pts_a):
        c = epipolar_in(rig, ia, ib, uv)
        if c is not None:
            out[i] = c.distance(pts_b)
    return out


def residual_matrix(rig: StereoRig, ia: int, ib: int, pts_a, pts_b) -> np.ndarray:
    """Symmetrized epipolar residual (px) between two candidate sets."""
    fwd = _one_way(rig, ia, ib, pts_a, pts_b)
    bwd = _one_way(rig, ib, ia, pts_b, pts_a).T
    return 0.5 * (fwd + bwd)


def _check(cands_by_view, tol_px):
    if cands_by_view is None or len(cands_by_view) < 2:
        raise NoViews("matching needs candidates from at least two views")
    if len(cands_by_view) > 3:
        raise NoViews("at most three views are supported")
    if not tol_px > 0:
        raise ToleranceNonPositive("tol_px must be positive")


def _sort_key(m: Match):
    return (m.epipolar_residual,
            tuple((c.view_id, c.component_id, c.position) for c in m.candidates))


# ---------------------------------------------------------------------------
# point matching
# ---------------------------------------------------------------------------

def _segment_near_line(curve, a, b):
    """Point of segment ab closest to the (infinite) epipolar line, and its distance."""
    d = curve.direction
    p0 = curve.points[0]
    n = np.array([-d[1], d[0]])
    fa = (a - p0) @ n
    fb = (b - p0) @ n
    if fa * fb <= 0 and fa != fb:
        t = fa / (fa - fb)
        return a + t * (b - a), 0.0, t
    if abs(fa) <= abs(fb):
        return a.copy(), abs(fa), 0.0
    return b.copy(), abs(fb), 1.0


def _line_segments(cands):
    segs = {}
    for c in cands:
        if c.kind == "line_endpoint":
            segs.setdefault(c.component_id, []).append(c)
    return {k: sorted(v, key=lambda c: c.line_param) for k, v in segs.items() if len(v) == 2}


def _occlusion_partner(rig, ia, ib, cand, lines_b, tol_px):
    """Stand-in for a point hidden behind a line of view ``ib``."""
    c = epipolar_in(rig, ia, ib, cand.uv)
    if c is None:
        return None
    best = None
    for cid, (e0, e1) in sorted(lines_b.items()):
        p, dist, t = _segment_near_line(c, e0.uv, e1.uv)
        if dist <= tol_px and (best is None or dist < best[0]):
            best = (dist, FeatureCandidate(ib, "line_sample", tuple(p), cid, e0.line_axis, t))
    return best


def _binocular(rig, ia, ib, pts_a, pts_b, tol_px, lines_a=None, lines_b=None):
    R = residual_matrix(rig, ia, ib, [c.uv for c in pts_a], [c.uv for c in pts_b])
    adm = R <= tol_px
    pairs = sorted((R[i, j], i, j) for i, j in zip(*np.nonzero(adm)))
    used_a, used_b = set(), set()
    out = []
    for r, i, j in pairs:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        amb = adm[i].sum() > 1 or adm[:, j].sum() > 1
        out.append(Match((pts_a[i], pts_b[j]), float(r), bool(amb)))
    # points with no admissible partner may be hidden behind a line
    if lines_b:
        for i, c in enumerate(pts_a):
            if not adm[i].any():
                hit = _occlusion_partner(rig, ia, ib, c, lines_b, tol_px)
                if hit is not None:
                    out.append(Match((c, hit[1]), float(hit[0]), False, (False, True)))
    if lines_a:
        for j, c in enumerate(pts_b):
            if not adm[:, j].any():
                hit = _occlusion_partner(rig, ib, ia, c, lines_a, tol_px)
                if hit is not None:
                    out.append(Match((hit[1], c), float(hit[0]), False, (True, False)))
    return out


def _trinocular(rig, pts, tol_px):
    uv = [[c.uv for c in p] for p in pts]
    R01 = residual_matrix(rig, 0, 1, uv[0], uv[1])
    R02 = residual_matrix(rig, 0, 2, uv[0], uv[2])
    R12 = residual_matrix(rig, 1, 2, uv[1], uv[2])
    triples = []
    for i, j in zip(*np.nonzero(R01 <= tol_px)):
        for k in np.nonzero((R02[i] <= tol_px) & (R12[j] <= tol_px))[0]:
            r = (R01[i, j] + R02[i, k] + R12[j, k]) / 3.0
            triples.append((float(r), int(i), int(j), int(k)))
    triples.sort()
    count = [dict(), dict(), dict()]
    for _, *idx in triples:
        for v, x in enumerate(idx):
            count[v][x] = count[v].get(x, 0) + 1
    used = [set(), set(), set()]
    out = []
    for r, *idx in triples:
        if any(x in used[v] for v, x in enumerate(idx)):
            continue
        for v, x in enumerate(idx):
            used[v].add(x)
        amb = any(count[v][x] > 1 for v, x in enumerate(idx))
        out.append(Match(tuple(pts[v][x] for v, x in enumerate(idx)), r, amb))
    return out


def match_points(cands_by_view, rig: StereoRig, tol_px: float = DEFAULT_TOL_PX):
    """Epipolar point correspondences across 2 or 3 views.

    Two views: greedy mutual-best assignment by symmetrized residual, with
    ambiguity flags and occlusion stand-ins. Three views: only triples that
    are consistent in every pairing survive.
    """
    _check(cands_by_view, tol_px)
    if len(cands_by_view) != len(rig.views):
        raise NoViews("one candidate list per rig view is required")
    pts = [[c for c in cs if c.kind == "point"] for cs in cands_by_view]
    if len(pts) == 2:
        out = _binocular(rig, 0, 1, pts[0], pts[1], tol_px,
                         _line_segments(cands_by_view[0]), _line_segments(cands_by_view[1]))
    else:
        out = _trinocular(rig, pts, tol_px)
    return sorted(out, key=_sort_key)


# ---------------------------------------------------------------------------
# line matching
# ---------------------------------------------------------------------------

def segment_crossing(curve, a, b):
    """Epipolar line crossing of segment ab: (point, t, sin of crossing angle)."""
    d = curve.direction
    e = b - a
    L = np.linalg.norm(e)
    if L == 0:
        return a.copy(), 0.0, 0.0
    sin = abs(d[0] * e[1] - d[1] * e[0]) / L
    n = np.array([-d[1], d[0]])
    fa = (a - curve.points[0]) @ n
    fb = (b - curve.points[0]) @ n
    if fa == fb:
        return a.copy(), 0.0, 0.0
    t = fa / (fa - fb)
    return a + t * e, float(t), float(sin)


def _pair_lines(rig, ia, ib, segs_a, segs_b, tol_px):
    """Greedy one-to-one component pairing by endpoint residual."""
    options = []
    for ca, (a0, a1) in sorted(segs_a.items()):
        for cb, (b0, b1) in sorted(segs_b.items()):
            R = residual_matrix(rig, ia, ib, [a0.uv, a1.uv], [b0.uv, b1.uv])
            straight = max(R[0, 0], R[1, 1])
            swapped = max(R[0, 1], R[1, 0])
            ok_s, ok_w = straight <= tol_px, swapped <= tol_px
            if not (ok_s or ok_w):
                continue
            flip = swapped < straight
            r = swapped if flip else straight
            res = (R[0, 1], R[1, 0]) if flip else (R[0, 0], R[1, 1])
            options.append((float(r), ca, cb, flip, bool(ok_s and ok_w), res))
    options.sort(key=lambda o: o[:3])
    used_a, used_b, out = set(), set(), []
    n_a = {}
    n_b = {}
    for o in options:
        n_a[o[1]] = n_a.get(o[1], 0) + 1
        n_b[o[2]] = n_b.get(o[2], 0) + 1
    for r, ca, cb, flip, both, res in options:
        if ca in used_a or cb in used_b:
            continue
        used_a.add(ca)
        used_b.add(cb)
        amb = both or n_a[ca] > 1 or n_b[cb] > 1
        out.append((ca, cb, flip, amb, res))
    return out


def _orient(seg, flip):
    e0, e1 = seg
    return (e1, e0) if flip else (e0, e1)


def match_lines(cands_by_view, rig: StereoRig, tol_px: float = DEFAULT_LINE_TOL_PX,
                min_sin: float = DEGENERATE_SIN):
    """Match line components by their endpoints, then their interior samples.

    View 0 is the reference; its samples are carried into every other view
    at the crossing of their epipolar line with the partner segment. A
    sample whose epipolar line runs (nearly) along the partner is marked
    degenerate in that view; if it is degenerate in all views the sample
    match is flagged ``degenerate``.

    Raises EndpointCountMismatch (with the partial result in ``.partial``)
    when a line component does not carry exactly two endpoints.
    """
    _check(cands_by_view, tol_px)
    if len(cands_by_view) != len(rig.views):
        raise NoViews("one candidate list per rig view is required")
    broken = []
    for cs in cands_by_view:
        counts = {}
        for c in cs:
            if c.kind == "line_endpoint":
                counts[c.component_id] = counts.get(c.component_id, 0) + 1
        broken += [(cs[0].view_id if cs else None, k) for k, n in counts.items() if n != 2]
    segs = [_line_segments(cs) for cs in cands_by_view]
    samples = [{} for _ in cands_by_view]
    for v, cs in enumerate(cands_by_view):
        for c in cs:
            if c.kind == "line_sample":
                samples[v].setdefault(c.component_id, []).append(c)
    n_views = len(cands_by_view)
    partners = {v: {ca: rest for ca, *rest in _pair_lines(rig, 0, v, segs[0], segs[v], tol_px)}
                for v in range(1, n_views)}

    result = []
    for ca in sorted(segs[0]):
        views = [v for v in range(1, n_views) if ca in partners[v]]
        if not views:
            continue
        a0, a1 = segs[0][ca]
        ends_a, ends_b = [a0], [a1]
        res_a, res_b, amb = [], [], False
        others = {}
        for v in views:
            cb, flip, amb_v, res = partners[v][ca]
            b0, b1 = _orient(segs[v][cb], flip)
            others[v] = (b0, b1, cb)
            ends_a.append(b0)
            ends_b.append(b1)
            res_a.append(res[0])
            res_b.append(res[1])
            amb = amb or amb_v
        m_a = Match(tuple(ends_a), float(np.mean(res_a)), amb)
        m_b = Match(tuple(ends_b), float(np.mean(res_b)), amb)
        sample_matches = []
        for s in sorted(samples[0].get(ca, []), key=lambda c: c.line_param):
            entries, good, resid = [s], 0, []
            for v in views:
                b0, b1, cb = others[v]
                c = epipolar_in(rig, 0, v, s.uv)
                if c is None:
                    p, t, sin = b0.uv + s.line_param * (b1.uv - b0.uv), s.line_param, 0.0
                else:
                    p, t, sin = segment_crossing(c, b0.uv, b1.uv)
                ok = sin >= min_sin and -0.05 <= t <= 1.05
                if not ok:
                    # placeholder at the same fraction along the partner
                    t = s.line_param
                    p = b0.uv + t * (b1.uv - b0.uv)
                good += ok
                entries.append(FeatureCandidate(v, "line_sample", tuple(p), cb, b0.line_axis, t))
                if ok:
                    resid.append(float(residual_matrix(rig, 0, v, [s.uv], [p])[0, 0]))
            sample_matches.append(Match(tuple(entries), float(np.mean(resid)) if resid else 0.0,
                                        amb, degenerate=good == 0))
        result.append(LineMatch(m_a, m_b, tuple(sample_matches),
                                ("ordering_ambiguous",) if amb else ()))
    if broken:
        err = EndpointCountMismatch(f"line components without two endpoints: {broken}")
        err.partial = result
        raise err
    return result


def group_by_view(cands, n_views: int):
    out = [[] for _ in range(n_views)]
    for c in cands:
        out[c.view_id].append(c)
    return out
