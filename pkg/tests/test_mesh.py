import hashlib
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from voxelforge.mesh import CORNERS, EDGES, TriangleMesh, case_table, marching_cubes, obj_text, read_obj, write_obj


def grid_from_occ(occ, rgb=(0.8, 0.2, 0.1)):
    occ = np.asarray(occ, dtype=np.float64)
    g = np.zeros((4,) + occ.shape)
    for c in range(3):
        g[c] = occ * rgb[c]
    g[3] = occ
    return g


def surface_area(mesh):
    a, b, c = (mesh.vertices[mesh.triangles[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum()


def test_empty_grid_gives_empty_mesh():
    m = marching_cubes(np.zeros((4, 5, 5, 5)))
    assert len(m.vertices) == 0 and len(m.triangles) == 0


def test_single_voxel_is_a_closed_octahedron():
    occ = np.zeros((3, 3, 3))
    occ[1, 1, 1] = 1
    m = marching_cubes(grid_from_occ(occ))
    assert (len(m.vertices), len(m.edges), len(m.triangles)) == (6, 12, 8)
    assert m.euler_characteristic() == 2
    assert m.is_watertight()
    assert m.signed_volume() == pytest.approx(4 / 3 * 0.5 ** 3)


def test_full_grid_closes_at_the_padded_boundary():
    m = marching_cubes(grid_from_occ(np.ones((4, 4, 4))))
    assert m.is_watertight() and m.euler_characteristic() == 2
    assert m.vertices.min() >= -0.5 and m.vertices.max() <= 3.5


def test_torus_has_euler_characteristic_zero():
    occ = np.zeros((5, 3, 5))
    occ[1:4, 1, 1:4] = 1
    occ[2, 1, 2] = 0
    m = marching_cubes(grid_from_occ(occ))
    assert m.is_watertight() and m.euler_characteristic() == 0


def test_two_components_sum_euler():
    occ = np.zeros((7, 3, 3))
    occ[1, 1, 1] = occ[5, 1, 1] = 1
    assert marching_cubes(grid_from_occ(occ)).euler_characteristic() == 4


def test_diagonal_neighbours_stay_separate():
    occ = np.zeros((4, 4, 3))
    occ[1, 1, 1] = occ[2, 2, 1] = 1
    m = marching_cubes(grid_from_occ(occ))
    assert m.is_watertight() and m.euler_characteristic() == 4


@given(hnp.arrays(np.float64, (5, 5, 5), elements=st.floats(0, 1)), st.floats(0.05, 0.95))
@settings(max_examples=80, deadline=None)
def test_random_fields_are_watertight_and_outward(occ, iso):
    g = grid_from_occ(occ)
    m = marching_cubes(g, iso)
    if len(m.triangles) == 0:
        assert not np.any(occ > iso)
        return
    assert m.is_watertight()
    assert m.signed_volume() > 0
    assert np.all(np.isfinite(m.vertices))
    assert m.vertices.min() >= -1 and m.vertices.max() <= 5
    assert m.triangles.min() >= 0 and m.triangles.max() < len(m.vertices)
    assert np.all(m.vertex_colors >= 0) and np.all(m.vertex_colors <= 1)


@given(hnp.arrays(np.bool_, (4, 4, 4)))
@settings(max_examples=80, deadline=None)
def test_binary_grids_euler_matches_components(occ):
    m = marching_cubes(grid_from_occ(occ.astype(float)))
    if not occ.any():
        assert len(m.triangles) == 0
        return
    assert m.is_watertight()
    # every closed orientable surface has even Euler characteristic
    assert m.euler_characteristic() % 2 == 0


def test_no_degenerate_triangles():
    rng = np.random.default_rng(0)
    m = marching_cubes(grid_from_occ((rng.random((6, 6, 6)) > 0.5).astype(float)))
    assert surface_area(m) > 0
    a, b, c = (m.vertices[m.triangles[:, i]] for i in range(3))
    assert np.all(np.linalg.norm(np.cross(b - a, c - a), axis=1) > 1e-12)


def test_case_table_structure():
    table = case_table()
    assert len(table) == 256
    assert table[0] == () and table[255] == ()
    assert max(len(t) for t in table) <= 5
    # complementary configurations cut the same edges
    for case in range(256):
        cut = {e for e, (a, b) in enumerate(EDGES) if ((case >> a) & 1) != ((case >> b) & 1)}
        used = {e for tri in table[case] for e in tri}
        assert used == cut
    assert CORNERS.shape == (8, 3) and len(EDGES) == 12


def test_triangle_count_scales_with_area():
    def count(side):
        occ = np.zeros((side + 4,) * 3)
        occ[2:2 + side, 2:2 + side, 2:2 + side] = 1
        return len(marching_cubes(grid_from_occ(occ)).triangles)

    for side in (4, 6):
        assert count(2 * side) / count(side) == pytest.approx(4.0, rel=0.2)


def test_sphere_against_skimage():
    measure = pytest.importorskip("skimage.measure")
    n = 20
    ax = np.arange(n) - (n - 1) / 2
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    field = np.clip(0.5 + (6.0 - np.sqrt(x ** 2 + y ** 2 + z ** 2)) / 4, 0, 1)
    ours = marching_cubes(grid_from_occ(field), 0.5)
    verts, faces, _, _ = measure.marching_cubes(field, 0.5)
    ref = TriangleMesh(verts, np.zeros_like(verts), faces[:, ::-1].astype(np.int64))
    assert ours.signed_volume() == pytest.approx(abs(ref.signed_volume()), rel=1e-3)
    assert surface_area(ours) == pytest.approx(surface_area(ref), rel=2e-2)
    assert ours.signed_volume() == pytest.approx(4 / 3 * np.pi * 6 ** 3, rel=0.03)


def test_vertex_colors_weighted_by_occupancy():
    g = np.zeros((4, 3, 3, 3))
    g[3, 1, 1, 1] = 1.0
    g[:3, 1, 1, 1] = (0.2, 0.4, 0.6)
    g[:3, 0, 1, 1] = (1.0, 1.0, 1.0)  # color on an empty voxel must not leak
    m = marching_cubes(g)
    np.testing.assert_allclose(m.vertex_colors, np.tile([0.2, 0.4, 0.6], (6, 1)))


def test_iso_validation():
    with pytest.raises(ValueError):
        marching_cubes(np.zeros((4, 2, 2, 2)), 1.0)
    with pytest.raises(ValueError):
        marching_cubes(np.zeros((2, 2, 2)))


def test_obj_roundtrip_and_determinism(tmp_path):
    occ = np.zeros((4, 4, 4))
    occ[1:3, 1:3, 1] = 1
    m = marching_cubes(grid_from_occ(occ))
    path = tmp_path / "m.obj"
    write_obj(m, path)
    text = path.read_text()
    assert text.startswith("#")
    v_lines = [ln for ln in text.splitlines() if ln.startswith("v ")]
    assert all(len(ln.split()) == 7 for ln in v_lines)
    f_idx = [int(p) for ln in text.splitlines() if ln.startswith("f ") for p in ln.split()[1:]]
    assert min(f_idx) == 1 and max(f_idx) == len(v_lines)
    back = read_obj(path)
    assert len(back.vertices) == len(m.vertices)
    np.testing.assert_array_equal(back.triangles, m.triangles)
    np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-6)
    again = obj_text(marching_cubes(grid_from_occ(occ)))
    assert hashlib.sha256(again.encode()).hexdigest() == hashlib.sha256(text.encode()).hexdigest()


def test_empty_mesh_obj_is_header_only(tmp_path):
    path = tmp_path / "e.obj"
    write_obj(TriangleMesh(), path)
    lines = path.read_text().splitlines()
    assert lines and all(ln.startswith("#") for ln in lines)
    assert len(read_obj(path).triangles) == 0


def test_each_mesh_edge_used_twice_on_a_chair():
    from voxelforge.data import PALETTE, StyleParams, generate_shape
    high, _ = generate_shape("chair", StyleParams(0.25, 0.125, 0.375, PALETTE["blue"]), 16, seed=2)
    m = marching_cubes(high)
    assert set(Counter(m.edges.values())) == {2}
    assert m.euler_characteristic() == 2


def test_corner_exactly_at_iso_stays_watertight():
    occ = np.ones((5, 5, 5))
    occ[0, 0, 0] = 0.5
    m = marching_cubes(grid_from_occ(occ), 0.5)
    assert m.is_watertight() and m.euler_characteristic() == 2
    a, b, c = (m.vertices[m.triangles[:, i]] for i in range(3))
    assert np.all(np.linalg.norm(np.cross(b - a, c - a), axis=1) > 0)
