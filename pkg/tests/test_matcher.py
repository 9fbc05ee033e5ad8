import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from stereoxct.errors import EndpointCountMismatch, NoViews, ToleranceNonPositive
from stereoxct.geometry import default_rig, project_point
from stereoxct.mapper import triangulate
from stereoxct.matcher import (FeatureCandidate, LineMatch, Match, extract_candidates,
                               match_lines, match_points, residual_matrix)
from stereoxct.phantom import PhantomRecipe, draw_geometry, truth_mask


def _pt(view_id, uv, cid=0):
    return FeatureCandidate(view_id, "point", tuple(uv), cid)


def _line_cands(view_id, view, a, b, cid=100, n_samples=5):
    ua, ub = project_point(view, a), project_point(view, b)
    axis = tuple((ub - ua) / np.linalg.norm(ub - ua))
    out = [FeatureCandidate(view_id, "line_endpoint", tuple(ua), cid, axis, 0.0),
           FeatureCandidate(view_id, "line_endpoint", tuple(ub), cid, axis, 1.0)]
    for k in range(1, n_samples + 1):
        t = k / (n_samples + 1)
        out.append(FeatureCandidate(view_id, "line_sample", tuple(ua + t * (ub - ua)), cid, axis, t))
    return out


def _same_plane_pair(rig, p1, offset):
    """Second point on the epipolar plane of p1 for views 0 and 1."""
    s0, s1 = rig.views[0].source_position, rig.views[1].source_position
    e1 = (s1 - s0) / np.linalg.norm(s1 - s0)
    w = p1 - s0
    e2 = w - (w @ e1) * e1
    e2 /= np.linalg.norm(e2)
    return p1 + offset[0] * e1 + offset[1] * e2


# -- extraction ---------------------------------------------------------------------------

def test_extract_empty():
    assert extract_candidates(np.zeros((32, 32), bool)) == []


def test_extract_blob_centroid():
    m = np.zeros((32, 32), bool)
    m[10:13, 20:23] = True
    (c,) = extract_candidates(m, view_id=1)
    assert c.kind == "point" and c.view_id == 1
    np.testing.assert_allclose(c.position, (21.5, 11.5))


def test_extract_rasterized_segment():
    m = np.zeros((64, 256), bool)
    a, b = np.array([10.0, 10.0]), np.array([200.0, 40.0])
    jj, ii = np.mgrid[0:64, 0:256]
    q = np.stack([ii + 0.5, jj + 0.5], -1)
    ab = b - a
    t = np.clip(((q - a) @ ab) / (ab @ ab), 0, 1)
    d = np.linalg.norm(q - (a + t[..., None] * ab), axis=-1)
    m[d <= 0.75] = True
    cands = extract_candidates(m)
    ends = [c for c in cands if c.kind == "line_endpoint"]
    assert len(ends) == 2
    got = sorted((c.uv for c in ends), key=lambda p: p[0])
    assert np.linalg.norm(got[0] - a) <= 1.0
    assert np.linalg.norm(got[1] - b) <= 1.0
    assert sum(c.kind == "line_sample" for c in cands) >= 5
    assert {c.line_param for c in ends} == {0.0, 1.0}


def test_candidate_round_trip():
    c = FeatureCandidate(2, "line_sample", (1.5, 2.5), 7, (1.0, 0.0), 0.25)
    assert FeatureCandidate.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        FeatureCandidate(0, "blob", (0, 0), 0)


# -- point matching -----------------------------------------------------------------------

def test_single_match_small_residual(desk_rig):
    p = np.array([5.0, -7.0, 3.0])
    ua = project_point(desk_rig.views[0], p)
    ub = project_point(desk_rig.views[1], p) + [0.0, 0.2]
    (m,) = match_points([[_pt(0, ua)], [_pt(1, ub)]], desk_rig)
    assert not m.ambiguity_flag and not m.any_occluded
    assert 0 < m.epipolar_residual < 0.5


def test_errors(desk_rig):
    with pytest.raises(NoViews):
        match_points([[]], desk_rig)
    with pytest.raises(ToleranceNonPositive):
        match_points([[], []], desk_rig, tol_px=0)


def test_same_epipolar_plane_binocular_vs_trinocular(tri_rig):
    p1 = np.array([4.0, -6.0, 8.0])
    p2 = _same_plane_pair(tri_rig, p1, (20.0, 0.0))
    pts = [p1, p2]
    cands = [[_pt(v, project_point(tri_rig.views[v], p), k) for k, p in enumerate(pts)]
             for v in range(3)]
    binocular = match_points(cands[:2], default_rig(tri_rig.world_grid))
    assert len(binocular) == 2
    assert all(m.ambiguity_flag for m in binocular)
    tri = match_points(cands, tri_rig)
    assert len(tri) == 2
    for m in tri:
        assert not m.ambiguity_flag
        assert len({c.component_id for c in m.candidates}) == 1


def test_occluded_point_flagged(desk_rig):
    view2 = desk_rig.views[1]
    a, b = np.array([-8.0, -10.0, -22.0]), np.array([8.0, 12.0, 22.0])
    q = 0.5 * (a + b)
    d = (q - view2.source_position) / np.linalg.norm(q - view2.source_position)
    hidden = q + 18 * d
    others = [np.array([10.0, -25.0, 20.0]), np.array([-15.0, 20.0, -15.0])]
    v0 = [_pt(0, project_point(desk_rig.views[0], p), k)
          for k, p in enumerate([hidden] + others)] + _line_cands(0, desk_rig.views[0], a, b)
    v1 = [_pt(1, project_point(view2, p), k + 1)
          for k, p in enumerate(others)] + _line_cands(1, view2, a, b)
    ms = match_points([v0, v1], desk_rig)
    assert len(ms) == 3
    occl = [m for m in ms if m.any_occluded]
    assert len(occl) == 1
    m = occl[0]
    assert m.occluded == (False, True)
    assert m.candidates[1].kind == "line_sample"
    assert np.linalg.norm(triangulate(m, desk_rig).position - hidden) < 0.5


@given(st.integers(0, 10_000))
def test_symmetry(seed):
    rig = default_rig()
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-40, 40, size=(5, 3))
    noise = rng.normal(scale=0.4, size=(2, 5, 2))
    cands = [[_pt(v, project_point(rig.views[v], p) + noise[v, k], k)
              for k, p in enumerate(pts)] for v in range(2)]
    fwd = match_points(cands, rig)
    swapped = type(rig)((rig.views[1], rig.views[0]), rig.world_grid)
    rev = match_points([cands[1], cands[0]], swapped)

    def key(ms):
        return sorted((frozenset(c.position for c in m.candidates), round(m.epipolar_residual, 9),
                       m.ambiguity_flag) for m in ms)

    assert key(fwd) == key(rev)


@given(st.integers(0, 10_000))
def test_soundness_on_exact_candidates(seed):
    rig = default_rig()
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-40, 40, size=(6, 3))
    v0 = rig.views[0]
    # keep one feature per epipolar plane: distinct image rows in view 0 by > 3 px
    rows = np.array([project_point(v0, p)[1] for p in pts])
    assume(np.min(np.diff(np.sort(rows))) > 3.0)
    cands = [[_pt(v, project_point(rig.views[v], p), k) for k, p in enumerate(pts)]
             for v in range(2)]
    for m in match_points(cands, rig, tol_px=1.0):
        assert m.candidates[0].component_id == m.candidates[1].component_id


def test_ordering_deterministic(desk_rig):
    rng = np.random.default_rng(3)
    pts = rng.uniform(-40, 40, size=(6, 3))
    cands = [[_pt(v, project_point(desk_rig.views[v], p), k) for k, p in enumerate(pts)]
             for v in range(2)]
    a = match_points(cands, desk_rig)
    b = match_points(cands, desk_rig)
    assert [m.to_dict() for m in a] == [m.to_dict() for m in b]
    res = [m.epipolar_residual for m in a]
    assert res == sorted(res)


def test_trinocular_subset_of_binocular(tri_rig):
    rng = np.random.default_rng(4)
    pts = rng.uniform(-40, 40, size=(8, 3))
    cands = [[_pt(v, project_point(tri_rig.views[v], p) + rng.normal(scale=0.3, size=2), k)
              for k, p in enumerate(pts)] for v in range(3)]
    tri = [m for m in match_points(cands, tri_rig) if not m.ambiguity_flag]
    for m in tri:
        for i, j in ((0, 1), (0, 2), (1, 2)):
            r = residual_matrix(tri_rig, i, j, [m.candidates[i].uv], [m.candidates[j].uv])
            assert r[0, 0] <= 2.0


def test_match_round_trip():
    m = Match((_pt(0, (1, 2)), _pt(1, (3, 4))), 0.5, True, (False, True))
    assert Match.from_dict(m.to_dict()) == m
    lm = LineMatch(m, m, (m,), ("ordering_ambiguous",))
    assert LineMatch.from_dict(lm.to_dict()) == lm
    with pytest.raises(ValueError):
        Match((_pt(0, (1, 2)),), 0.0)
    with pytest.raises(ValueError):
        Match((_pt(0, (1, 2)), _pt(1, (1, 2))), -1.0)


# -- line matching ------------------------------------------------------------------------

def test_line_match_full(desk_rig):
    a, b = np.array([-20.0, -5.0, -25.0]), np.array([15.0, 10.0, 20.0])
    cands = [_line_cands(v, desk_rig.views[v], a, b) for v in range(2)]
    (lm,) = match_lines(cands, desk_rig)
    assert len(lm.samples) >= 5
    assert not any(s.degenerate for s in lm.samples)
    assert lm.flags == ()
    assert lm.endpoint_a.epipolar_residual < 1e-6


def test_line_parallel_to_epipolar_planes_is_degenerate(desk_rig):
    s0, s1 = desk_rig.views[0].source_position, desk_rig.views[1].source_position
    base = (s1 - s0) / np.linalg.norm(s1 - s0)
    mid = np.array([3.0, 2.0, 15.0])
    a, b = mid - 20 * base, mid + 20 * base
    cands = [_line_cands(v, desk_rig.views[v], a, b) for v in range(2)]
    (lm,) = match_lines(cands, desk_rig)
    assert all(s.degenerate for s in lm.samples)


def test_endpoint_count_mismatch(desk_rig):
    a, b = np.array([-20.0, -5.0, -25.0]), np.array([15.0, 10.0, 20.0])
    cands = [_line_cands(v, desk_rig.views[v], a, b) for v in range(2)]
    cands[1] = cands[1][1:]
    with pytest.raises(EndpointCountMismatch) as err:
        match_lines(cands, desk_rig)
    assert err.value.partial == []


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_end_to_end_ground_truth_masks(seed, desk_rig):
    _, truth = draw_geometry(PhantomRecipe(seed=seed))
    masks = [truth_mask(truth, v) for v in desk_rig.views]
    cands = [extract_candidates(m, k) for k, m in enumerate(masks)]
    points = match_points(cands, desk_rig, tol_px=2.0)
    lines = match_lines(cands, desk_rig)
    assert len(points) == 3 and len(lines) == 1
    for m in points:
        p = triangulate(m, desk_rig).position
        assert np.min(np.linalg.norm(truth.point_centers - p, axis=1)) < 1.5
