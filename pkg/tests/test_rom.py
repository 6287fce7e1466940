import numpy as np
import pytest

from hyperfe2 import rom, rve


def test_pod_orthonormal_and_sorted(rng):
    S = rng.standard_normal((40, 6)) @ np.diag([10, 5, 2, 1, 0.5, 0.1]) @ rng.standard_normal((6, 12))
    b = rom.pod(S, n_modes=4)
    np.testing.assert_allclose(b.Phi.T @ b.Phi, np.eye(4), atol=1e-13)
    assert np.all(np.diff(b.singular_values) <= 0)
    # largest entry of each mode is positive
    idx = np.argmax(np.abs(b.Phi), axis=0)
    assert np.all(b.Phi[idx, np.arange(4)] > 0)


def test_pod_rank_cap_and_exact_reconstruction(rng):
    S = rng.standard_normal((30, 3)) @ rng.standard_normal((3, 8))
    b = rom.pod(S, n_modes=10)
    assert b.n_modes == 3
    np.testing.assert_allclose(b.Phi @ (b.Phi.T @ S), S, atol=1e-12)
    assert rom.pod(S).n_modes == 3


def test_pod_energy_threshold():
    S = np.diag([4.0, 3.0, 2.0, 1.0])
    assert rom.pod(S, energy=0.7).n_modes == 2  # 4+3 reaches 0.7 exactly
    assert rom.pod(S, energy=0.71).n_modes == 3
    assert rom.pod(S, energy=0.69).n_modes == 2
    assert rom.pod(S, energy=0.8, energy_kind="squared").n_modes == 2  # (16+9)/30
    np.testing.assert_allclose(rom.cumulative_energy(np.array([4.0, 3, 2, 1])), [0.4, 0.7, 0.9, 1.0])


def test_pod_errors():
    with pytest.raises(ValueError):
        rom.pod(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        rom.pod(np.eye(3), energy=1.5)
    with pytest.raises(ValueError):
        rom.pod(np.eye(3), energy_kind="cubic")
    with pytest.raises(ValueError):
        rom.SnapshotMatrix(np.array([[np.nan]]))


def test_basis_json_roundtrip_bitwise(tmp_path, small_basis):
    small_basis.save(tmp_path / "b.json")
    back = rom.ReducedBasis.load(tmp_path / "b.json")
    assert back.Phi.tobytes() == small_basis.Phi.tobytes()
    assert back.singular_values.tobytes() == small_basis.singular_values.tobytes()
    assert back.energy_kind == small_basis.energy_kind


def test_basis_shape_mismatch(small_micro):
    with pytest.raises(ValueError, match="rows"):
        rom.ReducedModel(small_micro, rom.pod(np.eye(small_micro.n + 2)[:, :3]))


def test_reduced_residual_is_galerkin_projection(small_micro, small_basis, rng):
    rm = rom.ReducedModel(small_micro, small_basis)
    a = 1e-3 * rng.standard_normal(small_basis.n_modes)
    E = np.array([0.01, -0.003, 0.004])
    st = rm.init_states(1)
    red = rm.evaluate(a[None], E[None], st, 0.0)
    full = small_micro.evaluate(small_basis.Phi @ a, E, small_micro.init_states(), 0.0)
    Phi = small_basis.Phi
    np.testing.assert_allclose(red["r"][0], Phi.T @ full["r"], atol=1e-12 * np.abs(full["r"]).max())
    np.testing.assert_allclose(red["fE"][0], full["fE"], rtol=1e-12)
    np.testing.assert_allclose(red["K"][0], Phi.T @ (full["K"] @ Phi), atol=1e-11 * np.abs(red["K"]).max())
    np.testing.assert_allclose(red["KqE"][0], Phi.T @ full["KqE"], atol=1e-11 * np.abs(red["KqE"]).max())


def test_full_basis_reproduces_high_fidelity(small_micro):
    basis = rom.ReducedBasis(np.eye(small_micro.n), np.ones(small_micro.n), np.ones(small_micro.n))
    rm = rom.ReducedModel(small_micro, basis)
    E = np.array([0.02, -0.01, 0.015])
    hf = rve.micro_solve(small_micro, small_micro.init_states(), E)
    a, pt, _ = rom.reduced_solve(rm, rm.init_states(), E)
    np.testing.assert_allclose(pt.stress, hf.point.stress, rtol=1e-7, atol=1e-9)
    np.testing.assert_allclose(pt.tangent, hf.point.tangent, rtol=1e-6, atol=1e-8)


def test_training_path_is_reproduced(small_micro):
    t = np.linspace(0, 1, 6)
    path = rve.LoadPath(t, np.outer(t, [0.025, -0.01, 0.01]))
    hf = rve.run_path(small_micro, path)
    basis = rom.pod(rom.SnapshotMatrix.from_columns([s.q for s in hf]))
    rm = rom.ReducedModel(small_micro, basis)
    st = rm.init_states()
    a = None
    for k, s in enumerate(hf):
        a, pt, st = rom.reduced_solve(rm, st, path.values[k + 1], 0.2, a0=a)
        assert np.abs(pt.stress - s.point.stress).max() <= 1e-6 * np.abs(s.point.stress).max()


def test_batch_equals_single(small_micro, small_basis):
    rm = rom.ReducedModel(small_micro, small_basis)
    E = np.array([[0.01, 0.0, 0.0], [0.0, 0.02, -0.01], [0.015, -0.005, 0.02]])
    sol = rom.reduced_solve_batch(rm, rm.init_states(3), E)
    for b in range(3):
        a, pt, _ = rom.reduced_solve(rm, rm.init_states(), E[b])
        np.testing.assert_allclose(sol.stress[b], pt.stress, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(sol.a[b], a, rtol=1e-7, atol=1e-12)
    assert sol.tol.shape == (3,)
    assert np.all(np.linalg.norm(sol.out["r"], axis=1) <= sol.tol)


def test_reduced_tangent_fd(small_micro, small_basis):
    rm = rom.ReducedModel(small_micro, small_basis)
    E = np.array([0.018, -0.006, 0.012])
    st = rm.init_states()
    a, pt, _ = rom.reduced_solve(rm, st, E)
    C = pt.tangent
    assert np.abs(C - C.T).max() <= 1e-8 * np.abs(C).max()
    h = 1e-7
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        sp_ = rom.reduced_solve(rm, st, E + e, a0=a)[1].stress
        sm = rom.reduced_solve(rm, st, E - e, a0=a)[1].stress
        assert np.abs((sp_ - sm) / (2 * h) - C[:, j]).max() <= 1e-4 * np.abs(C).max()
    np.testing.assert_allclose(rom.reduced_condensed_tangent(rm, a, E, st), C, rtol=1e-10, atol=1e-14)


def test_subset_with_unit_weights_is_plain_sum(small_micro, small_basis):
    pts = np.arange(0, small_micro.disc.n_points, 3)
    rm = rom.ReducedModel(small_micro, small_basis, points=pts, weights=np.ones(len(pts)))
    assert rm.n_points == len(pts)
    E = np.array([[0.001, 0.0, 0.0]])
    out = rm.evaluate(np.zeros((1, rm.n)), E, rm.init_states(1), 0.0)
    eps = rm.strains(np.zeros((1, rm.n)), E)[0]
    s = out["stress"][0]
    np.testing.assert_allclose(out["fE"][0], np.einsum("gij,gi->j", rm.BE, s), rtol=1e-12)
    assert eps.shape == (len(pts), 3)
