import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from cardioflow.geometry import closest_facet_query, facet_normals_of, unsigned_distance
from cardioflow.mesh import generate_box_mesh
from cardioflow.riis import (
    PRESETS, RIISOperator, Surface, ValveSpec, assemble_riis_operator, signed_distance,
    smoothed_delta, valve_state_at, valve_states,
)

coord = st.floats(-2, 2)


def brute_segment_distance(p, a, b, n=20001):
    s = np.linspace(0, 1, n)[:, None]
    return np.linalg.norm(a + s * (b - a) - p, axis=1).min()


@given(coord, coord)
def test_segment_distance_matches_sampling(x, y):
    a, b = np.array([-0.5, 0.2]), np.array([0.7, -0.3])
    d = unsigned_distance(np.array([[x, y]]), np.array([[a, b]]))[0]
    oracle = brute_segment_distance(np.array([x, y]), a, b)
    assert d <= oracle + 1e-12
    assert oracle - d <= np.linalg.norm(b - a) / 20000


@given(coord, coord, coord)
def test_triangle_distance_matches_sampling(x, y, z):
    tri = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.2], [0.2, 1.0, -0.1]])
    d = unsigned_distance(np.array([[x, y, z]]), tri[None])[0]
    u, v = np.meshgrid(np.linspace(0, 1, 301), np.linspace(0, 1, 301))
    keep = u + v <= 1
    pts = tri[0] + u[keep, None] * (tri[1] - tri[0]) + v[keep, None] * (tri[2] - tri[0])
    oracle = np.linalg.norm(pts - [x, y, z], axis=1).min()
    assert d <= oracle + 1e-12
    assert oracle - d <= 0.01


def test_closest_point_regions():
    tri = np.array([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    pts = np.array([[0.2, 0.2, 0.5], [-1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [0.5, -2.0, 0.0]])
    d, idx, c, off = closest_facet_query(pts, tri)
    assert np.allclose(c, [[0.2, 0.2, 0], [0, 0, 0], [0.5, 0.5, 0], [0.5, 0, 0]])
    assert d[0] == pytest.approx(0.5) and off[0] == pytest.approx(0.5)
    assert np.all(idx == 0)
    with pytest.raises(ValueError):
        closest_facet_query(pts, np.zeros((0, 3, 3)))
    with pytest.raises(ValueError):
        closest_facet_query(pts[:, :2], tri)
    with pytest.raises(ValueError):
        facet_normals_of(np.zeros((1, 2, 2)))


def test_signed_distance_sides():
    s = Surface.segment([0.0, 0.0], [1.0, 0.0])
    assert np.allclose(s.normals, [[0.0, -1.0]])
    phi = signed_distance(s, np.array([[0.5, -0.3], [0.5, 0.4], [2.0, 0.0]]))
    assert np.allclose(phi, [0.3, -0.4, 1.0])


def test_surface_construction():
    p = Surface.polyline([[0, 0], [1, 0], [1, 1]], closed=True)
    assert p.simplices.shape == (3, 2, 2)
    assert p.area() == pytest.approx(2 + np.sqrt(2))
    assert Surface.segment([0, 0], [0, 2], 4).area() == pytest.approx(2.0)
    tri = Surface(np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0]]]))
    assert tri.dim == 3 and tri.area() == pytest.approx(0.5)
    for bad in (np.zeros((0, 2, 2)), np.zeros((1, 2, 3)), np.array([[[0, 0], [0, 0]]]),
                np.array([[[np.nan, 0], [1, 0]]])):
        with pytest.raises(ValueError):
            Surface(bad)


@given(st.floats(1e-4, 1e-1))
def test_delta_kernel_normalized(eps):
    val, _ = quad(lambda x: float(smoothed_delta(x, eps)), -eps, eps, epsabs=1e-14, epsrel=1e-13)
    assert abs(val - 1.0) < 1e-10
    x = np.linspace(-2 * eps, 2 * eps, 101)
    d = smoothed_delta(x, eps)
    assert np.all(d >= 0) and np.allclose(d, d[::-1])
    assert np.all(d[np.abs(x) > eps] == 0)
    assert smoothed_delta(0.0, eps) == pytest.approx(1 / eps)


def test_delta_rejects_bad_eps():
    with pytest.raises(ValueError):
        smoothed_delta(0.0, 0.0)


def _valve(mesh, **kw):
    cut = Surface.segment([0.5, -0.2], [0.5, 1.2], 8)
    kw = dict(dict(R=1e4, eps=0.15, open_time=0.262, close_time=0.666), **kw)
    return ValveSpec("AV", closed_surface=cut, open_surface=None, **kw)


def test_operator_mass_equals_surface_measure():
    """sum of nodal weights = R/eps * int delta(phi) = R/eps * length inside the domain."""
    mesh = generate_box_mesh(2, [1.0, 1.0], [40, 40])
    v = _valve(mesh)
    op = RIISOperator(mesh, [v])
    w = op.nodal_weights(mesh, {"AV": False})
    assert w.sum() == pytest.approx(1e4 / 0.15 * 1.0, rel=1e-3)
    assert np.all(w >= 0)
    band = np.abs(mesh.vertices[:, 0] - 0.5) > 0.15 + 1 / 40 * np.sqrt(2)
    assert np.all(w[band] == 0)
    # open valve without an open surface: no resistance
    assert np.all(op.nodal_weights(mesh, {"AV": True}) == 0)
    M = op.assemble(mesh, {"AV": False})
    assert M.shape == (2 * mesh.num_vertices,) * 2
    assert np.allclose(M.matrix.diagonal(), np.tile(w, 2))


def test_operator_caches_distances():
    mesh = generate_box_mesh(2, [1.0, 1.0], [10, 10])
    op = RIISOperator(mesh, [_valve(mesh, eps=0.25)])
    for _ in range(3):
        op.refresh({"AV": False})
    op.refresh({"AV": True})
    op.refresh({"AV": False})
    assert op.distance_evaluations == 1  # the open state has no surface
    # a moved mesh reuses the reference-configuration distances
    d = np.zeros_like(mesh.vertices)
    d[:, 0] = 0.05 * mesh.vertices[:, 0] * (1 - mesh.vertices[:, 0])
    moved = mesh.moved(d)
    w0 = op.nodal_weights(mesh, {"AV": False})
    w1 = op.nodal_weights(moved, {"AV": False})
    assert op.distance_evaluations == 1
    assert not np.allclose(w0, w1)
    with pytest.raises(ValueError):
        op.nodal_weights(generate_box_mesh(2, [1, 1], [3, 3]), {"AV": False})


def test_resolution_warning_and_forcing():
    mesh = generate_box_mesh(2, [1.0, 1.0], [10, 10])
    with pytest.warns(RuntimeWarning, match="under-resolved"):
        RIISOperator(mesh, [_valve(mesh, eps=0.05)]).refresh({"AV": False})
    v = _valve(mesh, eps=0.25, leaflet_velocity=np.array([0.0, 2.0]))
    op = RIISOperator(mesh, [v])
    f = op.target_forcing(mesh, {"AV": False})
    w = op.nodal_weights(mesh, {"AV": False})
    nv = mesh.num_vertices
    assert np.allclose(f[:nv], 0) and np.allclose(f[nv:], 2 * w)
    assert RIISOperator(mesh, [_valve(mesh, eps=0.25)]).target_forcing(mesh, {"AV": False}) is None


def test_valve_timing_half_open():
    mesh = generate_box_mesh(2, [1.0, 1.0], [4, 4])
    av = _valve(mesh)
    assert not valve_state_at(av, 0.2619, 0.8)
    assert valve_state_at(av, 0.262, 0.8)
    assert not valve_state_at(av, 0.666, 0.8)
    mv = ValveSpec.from_preset("MV", av.closed_surface)
    assert (mv.open_time, mv.close_time, mv.eps) == (0.710, 0.208, 0.68e-3)
    assert valve_state_at(mv, 0.75, 0.8) and valve_state_at(mv, 0.1, 0.8)
    assert not valve_state_at(mv, 0.208, 0.8)
    states = valve_states([av, mv], 0.3, 0.8)
    assert states["AV"].is_open and states["AV"].surface is None
    assert not states["MV"].is_open and states["MV"].surface is av.closed_surface
    with pytest.raises(ValueError):
        valve_state_at(av, 0.1, 0.0)
    with pytest.raises(ValueError):
        valve_state_at(_valve(mesh, open_time=0.9), 0.1, 0.8)


def test_valve_validation_and_presets():
    s = Surface.segment([0, 0], [1, 0])
    for kw in ({"R": 0.0}, {"eps": -1.0}, {"open_time": 0.3, "close_time": 0.3}):
        with pytest.raises(ValueError):
            ValveSpec.from_preset("AV", s, **kw)
    assert set(PRESETS["zygote-times"]) == {"MV", "AV", "TV", "PV"}
    assert PRESETS["zygote-times"]["PV"] == (0.279, 0.677, 1e4, 0.52e-3)
    with pytest.raises(ValueError):
        RIISOperator(generate_box_mesh(2, [1, 1], [2, 2]), [ValveSpec.from_preset("AV", s)] * 2)


def test_one_shot_assembly():
    mesh = generate_box_mesh(2, [1.0, 1.0], [20, 20])
    v = _valve(mesh)
    closed = assemble_riis_operator(mesh, [v], t=0.1, period=0.8)
    opened = assemble_riis_operator(mesh, [v], t=0.3, period=0.8)
    assert closed.matrix.sum() > 0 and opened.matrix.sum() == 0
    with pytest.raises(ValueError):
        assemble_riis_operator(mesh, [v])
    assert assemble_riis_operator(mesh, []).matrix.nnz == 0
