import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperfe2 import fem, meshgen
from hyperfe2 import materials as M


def _inside(etype, a, b):
    # map two unit numbers into the parent domain
    if etype.startswith("tri"):
        return np.array([a * (1 - b), b])
    return np.array([2 * a - 1, 2 * b - 1])


def test_tri3_centroid():
    N, _ = fem.shape_functions("tri3", [1 / 3, 1 / 3])
    np.testing.assert_allclose(N, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_quad4_corner():
    N, _ = fem.shape_functions("quad4", [-1.0, -1.0])
    np.testing.assert_array_equal(N, [1, 0, 0, 0])


@pytest.mark.parametrize("etype", fem.ELEMENT_TYPES)
@settings(max_examples=40, deadline=None)
@given(a=st.floats(0, 1), b=st.floats(0, 1))
def test_partition_of_unity(etype, a, b):
    N, dN = fem.shape_functions(etype, _inside(etype, a, b))
    assert abs(N.sum() - 1.0) <= 1e-14
    np.testing.assert_allclose(dN.sum(axis=0), 0.0, atol=1e-13)


@pytest.mark.parametrize("etype", fem.ELEMENT_TYPES)
def test_nodal_interpolation(etype):
    N, _ = fem.shape_functions(etype, fem.PARENT_NODES[etype])
    np.testing.assert_allclose(N, np.eye(len(N)), atol=1e-14)


@pytest.mark.parametrize("etype", fem.ELEMENT_TYPES)
def test_gradients_match_finite_differences(etype):
    xi = _inside(etype, 0.3, 0.4)
    _, dN = fem.shape_functions(etype, xi)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (fem.shape_functions(etype, xi + e)[0] - fem.shape_functions(etype, xi - e)[0]) / (2 * h)
        np.testing.assert_allclose(dN[:, k], fd, atol=1e-9)


@pytest.mark.parametrize("etype", fem.ELEMENT_TYPES)
def test_quadrature_weights(etype):
    rule = fem.gauss_rule(etype)
    assert np.all(rule.weights > 0)
    assert rule.weights.sum() == pytest.approx(fem.PARENT_VOLUME[etype], abs=1e-15)


def test_quadrature_counts():
    assert [len(fem.gauss_rule(t)) for t in fem.ELEMENT_TYPES] == [1, 3, 4, 4]


def test_unknown_type():
    with pytest.raises(ValueError):
        fem.shape_functions("hex8", [0, 0])


def test_unit_triangle_b_matrix():
    B, detJ = fem.b_matrix([[0, 0], [1, 0], [0, 1]], "tri3", [0.2, 0.2])
    expect = np.array([[-1, 0, 1, 0, 0, 0],
                       [0, -1, 0, 0, 0, 1],
                       [-1, -1, 0, 1, 1, 0]], dtype=float)
    np.testing.assert_allclose(B, expect, atol=1e-15)
    assert detJ == pytest.approx(1.0)


def test_inverted_element():
    with pytest.raises(fem.InvertedElementError):
        fem.b_matrix([[0, 0], [0, 1], [1, 0]], "tri3", [0.2, 0.2])


def _element(etype, rng):
    X = fem.PARENT_NODES[etype].astype(float)
    if etype.startswith("quad"):
        X = 0.5 * (X + 1)
    # mild distortion keeps detJ > 0
    return X @ np.array([[1.3, 0.2], [0.1, 0.9]]) + 0.03 * rng.standard_normal(X.shape)


@pytest.mark.parametrize("etype", fem.ELEMENT_TYPES)
def test_rigid_translation_and_patch(etype, rng):
    X = _element(etype, rng)
    E = np.array([[0.01, 0.004], [-0.003, 0.02]])
    u_lin = (X @ E.T).reshape(-1)
    voigt = [E[0, 0], E[1, 1], E[0, 1] + E[1, 0]]
    for xi in fem.gauss_rule(etype).points:
        B, _ = fem.b_matrix(X, etype, xi)
        np.testing.assert_allclose(B @ np.tile([0.7, -0.2], len(X)), 0.0, atol=1e-14)
        np.testing.assert_allclose(B @ u_lin, voigt, atol=1e-14)


def test_element_zero_and_linear(rng):
    X = _element("tri6", rng)
    mat = M.LinearElastic(100.0, 0.3)
    st = mat.init_state(3)
    f, k, _, integ = fem.element_force_stiffness(X, "tri6", mat, st, np.zeros(12))
    np.testing.assert_array_equal(f, 0.0)
    u = 1e-3 * rng.standard_normal(12)
    f, k, _, integ = fem.element_force_stiffness(X, "tri6", mat, st, u)
    np.testing.assert_allclose(f, k @ u, rtol=1e-12, atol=1e-12 * np.abs(f).max())
    assert integ["volume"] > 0


def test_element_stiffness_fd_plastic(rng):
    X = _element("quad4", rng)
    mat = M.J2Plasticity(100.0, 0.3, 0.5, 2.0)
    st = mat.init_state(4)
    u = np.tile([0.0, 0.0], 4).astype(float)
    u[0::2] = 0.02 * X[:, 0]
    u[1::2] = -0.01 * X[:, 1] + 0.015 * X[:, 0]
    f, k, _, _ = fem.element_force_stiffness(X, "quad4", mat, st, u)
    h = 1e-7 * np.linalg.norm(u)
    K_fd = np.empty_like(k)
    for j in range(8):
        e = np.zeros(8)
        e[j] = h
        K_fd[:, j] = (fem.element_force_stiffness(X, "quad4", mat, st, u + e)[0]
                      - fem.element_force_stiffness(X, "quad4", mat, st, u - e)[0]) / (2 * h)
    assert np.abs(k - K_fd).max() / np.abs(k).max() <= 1e-5


def test_assemble_single_element_equals_element(rng):
    X = _element("quad8", rng)
    mesh = fem.Mesh(X, [("quad8", tuple(range(8)), 0)])
    mat = M.LinearElastic(10.0, 0.25)
    u = 1e-3 * rng.standard_normal(16)
    g = fem.assemble(mesh, {0: mat}, None, u)
    f, k, _, _ = fem.element_force_stiffness(X, "quad8", mat, mat.init_state(4), u)
    np.testing.assert_allclose(g.residual, f, atol=1e-14)
    np.testing.assert_allclose(g.stiffness.toarray(), k, atol=1e-12)


def test_assemble_zero_state():
    mesh = meshgen.rectangle(2.0, 1.0, 3, 2, "tri6")
    g = fem.assemble(mesh, {0: M.LinearElastic(1.0, 0.3)}, None, np.zeros(mesh.n_dofs))
    np.testing.assert_array_equal(g.residual, 0.0)


@pytest.mark.parametrize("etype", fem.ELEMENT_TYPES)
def test_patch_interior_residual(etype):
    mesh = meshgen.rectangle(2.0, 1.0, 2, 2, etype)
    x = mesh.nodes
    u = np.column_stack([0.01 * x[:, 0] + 0.002 * x[:, 1], -0.004 * x[:, 1]]).reshape(-1)
    g = fem.assemble(mesh, {0: M.LinearElastic(5.0, 0.3)}, None, u)
    lo, hi = mesh.bounding_box()
    inner = np.flatnonzero(np.all((x > lo + 1e-9) & (x < hi - 1e-9), axis=1))
    assert len(inner) > 0
    r = g.residual.reshape(-1, 2)[inner]
    assert np.abs(r).max() <= 1e-13 * np.abs(g.residual).max()


def test_symmetry_and_rigid_modes():
    mesh = meshgen.rectangle(3.0, 1.0, 4, 2, "quad8")
    g = fem.assemble(mesh, {0: M.LinearElastic(7.0, 0.3)}, None, np.zeros(mesh.n_dofs))
    K = g.stiffness.toarray()
    assert np.abs(K - K.T).max() <= 1e-12 * np.abs(K).max()
    x = mesh.nodes
    modes = [np.tile([1.0, 0.0], mesh.n_nodes), np.tile([0.0, 1.0], mesh.n_nodes),
             np.column_stack([-x[:, 1], x[:, 0]]).reshape(-1)]
    for m in modes:
        assert np.abs(K @ m).max() <= 1e-10 * np.abs(K).max() * np.abs(m).max()


def test_sparsity_matches_connectivity():
    mesh = meshgen.rectangle(1.0, 1.0, 2, 1, "quad4")
    g = fem.assemble(mesh, {0: M.LinearElastic(1.0, 0.3)}, None, np.zeros(mesh.n_dofs))
    # 6 nodes; the outer node columns (2 x 2 nodes) do not couple
    K = g.stiffness.toarray()
    assert K[0, 2 * 2] == 0.0 and g.stiffness.nnz == 2 * 2 * (6 * 6 - 8)


def test_mesh_json_roundtrip(tmp_path):
    mesh = meshgen.rve_with_pore(n=4, etype="tri6")
    fem.save_mesh(mesh, tmp_path / "m.json")
    back = fem.load_mesh(tmp_path / "m.json")
    np.testing.assert_array_equal(back.nodes, mesh.nodes)
    assert back.elements == [(t, tuple(c), m) for t, c, m in mesh.elements]
    back.validate()


def test_mesh_validation_errors():
    with pytest.raises(fem.MeshError):
        fem.Mesh(np.zeros((3, 2)), [("tri3", (0, 1), 0)])
    m = fem.Mesh(np.array([[0, 0], [1, 0], [0, 1.0]]), [("tri3", (0, 1, 5), 0)])
    with pytest.raises(fem.MeshError):
        m.validate()
    dup = fem.Mesh(np.array([[0, 0], [1, 0], [0, 1.0], [0, 1.0]]), [("tri3", (0, 1, 2), 0)])
    with pytest.raises(fem.MeshError):
        dup.validate()
