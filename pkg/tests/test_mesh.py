import numpy as np
import pytest

from fracopt.errors import ClosureOverflow, UnsupportedDomain
from fracopt.mesh import (BaseMesh, IntervalMesh, bisect, check_grading, extrude,
                          graded_interval, initial_mesh, star, star_sizes, uniform_refine)

from conftest import grid_mesh


def single_triangle(scale=1.0):
    return BaseMesh(scale * np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), [[0, 1, 2]],
                    [True, True, True], perimeter=scale * (2 + np.sqrt(2)))


def test_unit_square():
    m = initial_mesh("unit-square")
    assert (m.n_triangles, m.n_vertices) == (2, 4)
    assert m.is_conforming()
    assert m.boundary.all()


def test_lshape():
    m = initial_mesh("l-shape")
    assert (m.n_triangles, m.n_vertices) == (6, 8)
    assert m.is_conforming()
    assert np.isclose(m.areas.sum(), 3.0)
    assert np.all(m.signed_areas > 0)


def test_square_and_polygon_domains():
    m = initial_mesh("square")
    assert np.isclose(m.areas.sum(), 4.0)
    poly = [(0, 0), (3, 0), (3, 1), (2, 1), (2, 2), (0, 2)]
    m = initial_mesh(poly)
    assert m.is_conforming()
    assert np.isclose(m.areas.sum(), 5.0)


def test_unsupported_domains():
    with pytest.raises(UnsupportedDomain):
        initial_mesh("circle")
    with pytest.raises(UnsupportedDomain):
        initial_mesh([(0, 0), (1, 0), (1, 1), (0.5, 2)])  # slanted edge
    with pytest.raises(UnsupportedDomain):
        # self-intersecting axis-aligned outline
        initial_mesh([(0, 0), (2, 0), (2, 1), (1, 1), (1, -1), (0, -1)])


def test_bisect_single_triangle():
    m = bisect(single_triangle(), [0])
    assert m.n_triangles == 2
    assert m.is_conforming()
    assert np.allclose(m.areas, 0.25)
    assert list(m.parent) == [0, 0]
    assert list(m.generation) == [1, 1]


def test_bisect_one_of_two_restores_conformity():
    m = bisect(initial_mesh("unit-square"), [0])
    assert m.n_triangles in (3, 4)
    assert m.is_conforming()


def test_bisect_empty_is_identity():
    m = initial_mesh("l-shape")
    assert bisect(m, []) is m


def test_random_bisections_stay_conforming():
    """10^4 bisections of randomly chosen triangles, conformity checked after each sweep."""
    rng = np.random.default_rng(2024)
    m = initial_mesh("l-shape")
    area = m.areas.sum()
    done = 0
    while done < 10_000:
        k = min(10_000 - done, max(1, m.n_triangles // 4))
        marked = rng.choice(m.n_triangles, size=k, replace=False)
        m = bisect(m, marked)
        done += k
        assert m.is_conforming()
        assert np.all(m.signed_areas > 0)
        assert abs(m.areas.sum() - area) <= 1e-12 * area


def test_parent_bookkeeping_preserves_area():
    m0 = uniform_refine(initial_mesh("l-shape"), 2)
    m1 = bisect(m0, [0, 5, 7])
    per_parent = np.bincount(m1.parent, weights=m1.areas, minlength=m0.n_triangles)
    np.testing.assert_allclose(per_parent, m0.areas, rtol=1e-14)


def test_closure_overflow():
    with pytest.raises(ClosureOverflow):
        bisect(uniform_refine(initial_mesh("l-shape"), 2), [0], max_depth=1)


def test_uniform_refine_counts():
    m = uniform_refine(initial_mesh("l-shape"), 3)
    assert m.n_triangles == 6 * 8
    assert m.is_conforming()


@pytest.mark.parametrize("Y,M,gamma,expected", [
    (1.0, 2, 2.0, [0.0, 0.25, 1.0]),
    (1.0, 1, 5.0, [0.0, 1.0]),
    (2.0, 4, 3.0, [0.0, 0.03125, 0.25, 0.84375, 2.0]),
])
def test_graded_interval_examples(Y, M, gamma, expected):
    iv = graded_interval(Y, M, gamma)
    np.testing.assert_allclose(iv.points, expected, rtol=1e-14, atol=0)
    assert iv.M == M


@pytest.mark.parametrize("gamma", [1.0, 2.0, 5.5])
def test_graded_interval_spacing(gamma):
    iv = graded_interval(3.0, 20, gamma)
    h = iv.lengths
    assert np.all(np.diff(h) >= -1e-15)
    # neighbour ratio bounded by the first step, 2^gamma - 1
    assert np.max(h[1:] / h[:-1]) <= 2.0 ** gamma - 1.0 + 1e-12


def test_graded_interval_rejects_bad_input():
    for args in [(0.0, 2, 2.0), (1.0, 0, 2.0), (1.0, 2, 0.5)]:
        with pytest.raises(ValueError):
            graded_interval(*args)


def test_extrude_counts():
    iv = graded_interval(1.0, 3, 2.0)
    em = extrude(initial_mesh("unit-square"), iv, 0.2)
    assert em.n_cells == 6
    em1 = extrude(initial_mesh("unit-square"), graded_interval(1.0, 1, 2.0), 0.2)
    assert em1.n_dofs == 0
    base = uniform_refine(initial_mesh("l-shape"), 3)
    em = extrude(base, graded_interval(2.0, 5, 3.0), -0.4)
    assert em.n_dofs == np.count_nonzero(~base.boundary) * 5
    assert em.n_cells == base.n_triangles * em.M
    with pytest.raises(ValueError):
        extrude(base, iv, 1.0)


def test_dof_index():
    base = uniform_refine(initial_mesh("l-shape"), 2)
    em = extrude(base, graded_interval(2.0, 4, 3.0), 0.0)
    free = base.free_vertices
    assert em.dof_index(free[1], 2) == 1 * 4 + 2
    assert em.dof_index(np.flatnonzero(base.boundary)[0], 0) == -1
    assert em.dof_index(free[0], 4) == -1


def test_star_examples():
    fan = uniform_refine(initial_mesh("unit-square"), 1)
    centre = int(np.argmin(np.linalg.norm(fan.vertices - 0.5, axis=1)))
    st = star(fan, centre)
    assert len(st.triangles) == 4
    assert np.isclose(st.h, fan.diameters[st.triangles].min())

    sq = initial_mesh("unit-square")
    corner = int(np.flatnonzero(np.all(np.isclose(sq.vertices, [1.0, 0.0]), axis=1))[0])
    assert len(star(sq, corner).triangles) == 1

    m = uniform_refine(initial_mesh("l-shape"), 3)
    total = sum(len(star(m, z).triangles) for z in range(m.n_vertices))
    assert total == 3 * m.n_triangles
    for z in range(0, m.n_vertices, 7):
        st = star(m, z)
        assert all(z in m.triangles[t] for t in st.triangles)
    hz = star_sizes(m)
    assert np.allclose(hz, [star(m, z).h for z in range(m.n_vertices)])


def test_check_grading_examples():
    tri = BaseMesh([[0.0, 0.0], [0.5, 0.0], [0.25, 0.3]], [[2, 0, 1]], [True] * 3)
    assert np.isclose(tri.diameters[0], 0.5)
    em = extrude(tri, graded_interval(0.8, 2, 1.0), 0.0)
    assert np.isclose(em.interval.h_max, 0.4)
    assert check_grading(em, 1.0)
    assert not check_grading(em, 0.5)


def test_check_grading_flips_under_base_refinement():
    base = initial_mesh("l-shape")
    iv = graded_interval(2.0, 4, 3.0)
    assert check_grading(extrude(base, iv, 0.0), 1.0)
    for _ in range(20):
        base = uniform_refine(base)
        if not check_grading(extrude(base, iv, 0.0), 1.0):
            break
    else:
        pytest.fail("grading never violated")


def test_dump_and_load_roundtrip(tmp_path):
    m = bisect(uniform_refine(initial_mesh("l-shape"), 2), [1, 4])
    path = tmp_path / "mesh.txt"
    m.dump(path)
    assert path.read_text().splitlines()[0] == f"vertices {m.n_vertices} triangles {m.n_triangles}"
    back = BaseMesh.load(path)
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.triangles, m.triangles)
    np.testing.assert_array_equal(back.boundary, m.boundary)
    assert back.is_conforming()


def test_grid_helper_is_conforming():
    assert grid_mesh(3, 2).is_conforming()


def test_interval_grading_flag():
    iv = graded_interval(1.0, 4, 3.0 / (2 * 0.3) * 1.1)
    assert iv.satisfies_grading(0.3)
    assert not IntervalMesh(1.0, iv.points, 2.0).satisfies_grading(0.3)
