import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial import Delaunay

from oracles import point_segment_distance, sampled_ray_integral
from stereoxct.errors import GeometryMismatch, SourceInsideVolume
from stereoxct.geometry import GridSpec, default_rig, orbit_view, pixel_rays, project_point
from stereoxct.phantom import Volume3D
from stereoxct.projector import (ProjectionImage, backproject, fbp_sum, forward_project,
                                 ramlak_kernel, ramp_filter)

G32 = GridSpec.centered(32)
RIG32 = default_rig(G32, n_pixels=64)


def _random_volume(seed, grid=G32):
    return Volume3D(grid, np.random.default_rng(seed).uniform(0, 1, grid.dims))


def test_zero_volume_projects_to_zero():
    p = forward_project(Volume3D.zeros(G32), RIG32.views[0])
    assert p.data.shape == (64, 64)
    assert not p.data.any()


def test_single_voxel_path_length():
    grid = GridSpec.centered(17, 0.5)
    data = np.zeros(grid.dims)
    data[8, 8, 8] = 3.0
    view = orbit_view(0, sod=100, sdd=200, pitch=0.5, n_pixels=9)
    p = forward_project(Volume3D(grid, data), view)
    assert p.data[4, 4] == pytest.approx(3.0 * 0.5, abs=1e-12)


def test_source_inside_volume():
    view = orbit_view(0, sod=5, sdd=100, pitch=1, n_pixels=8)
    with pytest.raises(SourceInsideVolume):
        forward_project(Volume3D.zeros(G32), view)


def test_forward_matches_dense_sampling_oracle():
    vol = _random_volume(1)
    view = RIG32.views[1]
    p = forward_project(vol, view).data
    rng = np.random.default_rng(2)
    pix = rng.integers(0, 64, size=(200, 2))
    dirs = pixel_rays(view, pix[:, ::-1] + 0.5)
    for (j, i), d in zip(pix, dirs):
        o = sampled_ray_integral(vol.data, G32.origin, G32.voxel, view.source_position, d,
                                 2000, 20000)
        if o == 0:
            assert p[j, i] == 0
        else:
            assert abs(p[j, i] - o) <= 1e-3 * o


def test_forward_linearity():
    v1, v2 = _random_volume(3), _random_volume(4)
    a, b = 0.7, -2.3
    view = RIG32.views[0]
    lhs = forward_project(Volume3D(G32, a * v1.data + b * v2.data), view).data
    rhs = a * forward_project(v1, view).data + b * forward_project(v2, view).data
    assert np.max(np.abs(lhs - rhs)) <= 1e-6 * np.max(np.abs(rhs))


def test_adjoint_consistency():
    rng = np.random.default_rng(5)
    for view in RIG32.views:
        V = _random_volume(6)
        P = ProjectionImage(rng.uniform(0, 1, view.shape), view)
        lhs = float(np.sum(forward_project(V, view).data * P.data))
        rhs = float(np.sum(V.data * backproject(P, G32, "adjoint").data))
        assert abs(lhs - rhs) <= 0.01 * abs(lhs)


def _dist_to_hull(hull_pts, q):
    tri = Delaunay(hull_pts)
    if tri.find_simplex(q) >= 0:
        return 0.0
    from scipy.spatial import ConvexHull
    h = ConvexHull(hull_pts)
    return min(point_segment_distance(q, hull_pts[a], hull_pts[b]) for a, b in h.simplices)


@given(st.tuples(*[st.integers(0, 31)] * 3))
def test_footprint_inside_corner_hull(idx):
    data = np.zeros(G32.dims)
    data[idx] = 1.0
    view = RIG32.views[0]
    p = forward_project(Volume3D(G32, data), view).data
    lo = G32.origin + np.array(idx) * G32.voxel
    corners = np.array([lo + G32.voxel * [x, y, z] for x in (0, 1) for y in (0, 1)
                        for z in (0, 1)])
    hull = np.array([project_point(view, c) for c in corners])
    jj, ii = np.nonzero(p)
    assert len(jj) > 0
    for j, i in zip(jj, ii):
        assert _dist_to_hull(hull, np.array([i + 0.5, j + 0.5])) <= 1.0


# -- ramp filter ----------------------------------------------------------------

def test_ramp_zero():
    view = RIG32.views[0]
    out = ramp_filter(ProjectionImage(np.zeros(view.shape), view))
    assert not out.data.any()


def test_ramp_dc_rejection():
    view = RIG32.views[0]
    out = ramp_filter(ProjectionImage(np.full(view.shape, 5.0), view), cosine_weight=False)
    assert np.max(np.abs(out.data[:, 8:-8])) < 1e-3 * 5.0


def test_ramlak_closed_form_taps():
    view = orbit_view(0, sod=100, sdd=200, pitch=0.7, n_pixels=64)
    img = np.zeros(view.shape)
    img[:, 32] = 1.0
    out = ramp_filter(ProjectionImage(img, view), cosine_weight=False).data[10]
    n = 128
    ks = np.arange(-n // 2, n // 2)
    taps = np.where(ks == 0, 0.25, np.where(ks % 2 == 0, 0.0, -1.0 / (np.pi * np.maximum(np.abs(ks), 1)) ** 2))
    dc = taps.sum() / n
    for k in range(-12, 13):
        want = 0.25 if k == 0 else (0.0 if k % 2 == 0 else -1.0 / (np.pi * k) ** 2)
        assert out[32 + k] == pytest.approx((want - dc) / 0.7, abs=1e-12)
    assert abs(dc) < 2e-5
    h = ramlak_kernel(16)
    assert h[0] == 0.25 and h[2] == 0 and h[1] == pytest.approx(-1 / np.pi ** 2)


def test_ramp_linear_and_hann():
    view = RIG32.views[0]
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=view.shape), rng.normal(size=view.shape)
    for window in ("ramlak", "hann"):
        fa = ramp_filter(ProjectionImage(a, view), window).data
        fb = ramp_filter(ProjectionImage(b, view), window).data
        fab = ramp_filter(ProjectionImage(2 * a - b, view), window).data
        np.testing.assert_allclose(fab, 2 * fa - fb, atol=1e-10)
    with pytest.raises(ValueError):
        ramp_filter(ProjectionImage(a, view), "shepp")


# -- backprojection ---------------------------------------------------------------

def test_backproject_zero():
    view = RIG32.views[0]
    assert not backproject(ProjectionImage(np.zeros(view.shape), view), G32).data.any()


def test_single_pixel_backprojection_oracle():
    view = RIG32.views[1]
    img = np.zeros(view.shape)
    i, j = 30, 27
    img[j, i] = 1.0
    out = backproject(ProjectionImage(img, view), G32, "none").data
    X, Y, Z = np.meshgrid(*[G32.axis_centers(k) for k in range(3)], indexing="ij")
    pts = np.stack([X, Y, Z], -1).reshape(-1, 3)
    uv = np.array([project_point(view, p) for p in pts])
    wu = np.clip(1 - np.abs(uv[:, 0] - (i + 0.5)), 0, None)
    wv = np.clip(1 - np.abs(uv[:, 1] - (j + 0.5)), 0, None)
    expect = (wu * wv).reshape(G32.dims)
    np.testing.assert_allclose(out, expect, atol=1e-9)
    assert np.count_nonzero(out) > 0


def _impulse_masks(rig, grid, p):
    vol = np.zeros(grid.dims)
    vol[tuple(np.round(grid.world_to_index(p)).astype(int))] = 1.0
    return [forward_project(Volume3D(grid, vol), v) for v in rig.views], vol


@pytest.mark.parametrize("idx", [(32, 32, 32), (40, 22, 35), (8, 4, 13), (36, 18, 22),
                                 (6, 27, 56), (57, 55, 9)])
def test_fbp_impulse_argmax(idx):
    grid = GridSpec.centered(64)
    rig = default_rig(grid, n_pixels=128)
    projs, _ = _impulse_masks(rig, grid, grid.index_to_world(idx))
    total = fbp_sum(projs, rig.views, grid)
    arg = np.unravel_index(np.argmax(total.data), grid.dims)
    assert np.max(np.abs(np.array(arg) - idx)) <= 1


def test_fbp_sum_linearity_and_errors():
    grid = G32
    rig = RIG32
    p = [forward_project(_random_volume(8), v) for v in rig.views]
    zero = [ProjectionImage(np.zeros(v.shape), v) for v in rig.views]
    assert not fbp_sum(zero, rig.views, grid).data.any()
    single = backproject(ramp_filter(p[0], "hann"), grid, "none").data
    np.testing.assert_allclose(fbp_sum([p[0], zero[1]], rig.views, grid).data, single)
    fdk = backproject(ramp_filter(p[1], "ramlak"), grid, "fdk").data
    np.testing.assert_allclose(
        fbp_sum([zero[0], p[1]], rig.views, grid, "ramlak", "fdk").data, fdk)
    with pytest.raises(GeometryMismatch):
        fbp_sum([p[0]], rig.views[:1], grid)
    with pytest.raises(GeometryMismatch):
        fbp_sum([np.zeros((3, 3)), p[1]], rig.views, grid)
