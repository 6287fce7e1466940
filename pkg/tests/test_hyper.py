import numpy as np
import pytest

from hyperfe2 import hyper, rom, rve
from hyperfe2.hyper import CriterionSet


def _paths():
    t = np.linspace(0, 1, 6)
    dirs = [[0.03, -0.01, 0.02], [-0.01, 0.025, -0.015], [0.02, 0.02, 0.0]]
    return [rve.LoadPath(t, np.outer(t, d)) for d in dirs]


@pytest.fixture(scope="module")
def snap(small_micro, small_basis):
    return hyper.collect_hyper_snapshots(rom.ReducedModel(small_micro, small_basis), _paths())


def test_criterion_sets():
    assert CriterionSet.parse("conventional").names == ("f_int", "f_sigma")
    assert CriterionSet.parse("additional").names == hyper.CRITERIA
    assert CriterionSet(("energy", "f_int")).names == ("f_int", "energy")
    with pytest.raises(ValueError):
        CriterionSet(("f_sigma",))
    with pytest.raises(ValueError):
        CriterionSet(("f_int", "vorticity"))


def test_snapshot_shapes(snap, small_micro, small_basis):
    K = 3 * 5
    ng = small_micro.disc.n_points
    assert snap.f_int.shape == (K, ng, small_basis.n_modes)
    assert snap.power.shape == (K, ng)
    assert snap.newton_tol.shape == (K,)
    assert snap.V_rel == pytest.approx(small_micro.V_rel)
    # the stress block reproduces the macro stress of the reduced solve
    rm = rom.ReducedModel(small_micro, small_basis)
    _, pt, _ = rom.reduced_solve(rm, rm.init_states(), _paths()[0].values[1], 0.2)
    np.testing.assert_allclose(snap.totals()["f_sigma"][0], pt.stress, rtol=1e-10)


@pytest.mark.parametrize("mode", ["ecm", "eheim"])
def test_training_matrix_layout(snap, mode):
    tm = hyper.build_unified_training_matrix(snap, "additional", mode)
    K, n = snap.n_snapshots, snap.f_int.shape[2]
    assert len(tm.x) == K * (n + 3 + 1 + 3 + 3 + 1)
    assert tm.n_entities == (snap.W.size if mode == "ecm" else snap.n_elements)
    norms = np.linalg.norm(tm.x, axis=1)
    assert np.all((np.abs(norms - 1) < 1e-12) | (norms == 0))
    assert tm.V_star == pytest.approx(snap.V_star, rel=1e-14)


@pytest.mark.parametrize("mode", ["ecm", "eheim"])
def test_all_ones_integrates_rows_to_zero(snap, mode):
    tm = hyper.build_unified_training_matrix(snap, "additional", mode)
    s = np.abs(tm.x.sum(axis=1))
    bound = hyper.all_ones_bound(tm, snap)
    assert np.all(s <= bound)
    res = hyper.all_ones_residual(tm)
    for name in hyper.ADDITIONAL + ("f_sigma",):
        assert res[name] <= 1e-12


def test_all_ones_bound_needs_tolerances(snap):
    tm = hyper.build_unified_training_matrix(snap)
    bare = hyper.HyperSnapshots(**{**snap.__dict__, "newton_tol": None})
    with pytest.raises(ValueError):
        hyper.all_ones_bound(tm, bare)


@pytest.mark.parametrize("mode", ["ecm", "eheim"])
@pytest.mark.parametrize("m_tilde", [4, 10, 20])
def test_scheme_properties(snap, mode, m_tilde):
    tm = hyper.build_unified_training_matrix(snap, "additional", mode)
    sc = hyper.select_hyper_scheme(tm, m_tilde)
    assert 1 <= len(sc.entities) <= m_tilde
    assert np.all(sc.gamma > 0)
    assert abs(sc.gamma @ tm.V[sc.entities] - tm.V_star) <= 1e-10 * tm.V_star
    # the training error equals the objective written with the full SVD
    assert sc.residual == pytest.approx(hyper.scheme_objective_svd(tm, sc), rel=1e-9, abs=1e-14)


def test_more_entities_reduce_training_error(snap):
    tm = hyper.build_unified_training_matrix(snap, "conventional", "ecm")
    errs = [hyper.select_hyper_scheme(tm, m).residual for m in (2, 8, 32)]
    assert errs[2] < errs[0]
    full = hyper.select_hyper_scheme(tm, tm.n_entities)
    assert np.all(full.gamma == 1.0)
    # what is left is the Newton residual in the force rows
    b = hyper.all_ones_bound(tm, snap)
    assert full.residual <= np.sum(np.where(np.isfinite(b), b, 0.0) ** 2)


def test_ecm_and_eheim_agree_on_single_point_elements(snap):
    # tri3 has one point per element, so both modes see the same matrix
    a = hyper.build_unified_training_matrix(snap, "additional", "ecm")
    b = hyper.build_unified_training_matrix(snap, "additional", "eheim")
    np.testing.assert_allclose(a.x, b.x, atol=1e-14)
    sa, sb = hyper.select_hyper_scheme(a, 12), hyper.select_hyper_scheme(b, 12)
    np.testing.assert_array_equal(sa.entities, sb.entities)
    np.testing.assert_allclose(sa.gamma, sb.gamma, rtol=1e-10)


def test_scheme_json_roundtrip(tmp_path, snap):
    sc = hyper.select_hyper_scheme(hyper.build_unified_training_matrix(snap), 6)
    sc.save(tmp_path / "s.json")
    back = hyper.HyperScheme.load(tmp_path / "s.json")
    np.testing.assert_array_equal(back.entities, sc.entities)
    assert back.gamma.tobytes() == sc.gamma.tobytes()
    assert back.criteria == sc.criteria and back.mode == sc.mode


def test_scheme_validation():
    with pytest.raises(ValueError):
        hyper.HyperScheme("ecm", [1, 1], [0.5, 0.5], 0.0, (), 2)
    with pytest.raises(ValueError):
        hyper.HyperScheme.from_json({"mode": "gauss", "entities": [], "gamma": [], "residual": 0,
                                     "criteria": [], "m_tilde": 1})


def test_full_scheme_equals_rom(small_micro, small_basis):
    m = small_micro.mesh.n_elements
    sc = hyper.HyperScheme("eheim", np.arange(m), np.ones(m), 0.0, hyper.CRITERIA, m)
    hm = hyper.hyper_reduced_model(sc, small_micro, small_basis)
    rm = rom.ReducedModel(small_micro, small_basis)
    E = np.array([0.02, -0.01, 0.01])
    _, p1, _ = hyper.hyper_reduced_solve(hm, hm.init_states(), E)
    _, p2, _ = rom.reduced_solve(rm, rm.init_states(), E)
    np.testing.assert_allclose(p1.stress, p2.stress, rtol=1e-12)
    assert hyper.integration_point_count(sc, small_micro) == small_micro.disc.n_points


def test_eheim_points_cover_whole_elements():
    from hyperfe2 import meshgen
    from conftest import porous_materials
    micro = rve.MicroModel(meshgen.rve_with_pore(n=4, etype="quad8"), porous_materials())
    sc = hyper.HyperScheme("eheim", [0, 5], [1.5, 0.7], 0.0, hyper.CRITERIA, 2)
    pts, w = hyper.scheme_points(sc, micro)
    assert len(pts) == 8
    assert set(micro.disc.gp_elem[pts]) == {0, 5}
    np.testing.assert_allclose(w.sum(), 1.5 * micro.disc.element_volume[0] + 0.7 * micro.disc.element_volume[5])


def test_hf_source_matches_rom_source_with_full_basis(small_micro):
    basis = rom.ReducedBasis(np.eye(small_micro.n), np.ones(small_micro.n), np.ones(small_micro.n))
    rm = rom.ReducedModel(small_micro, basis)
    paths = _paths()[:1]
    a = hyper.collect_hyper_snapshots(rm, paths, "rom")
    b = hyper.collect_hyper_snapshots(rm, paths, "hf")
    np.testing.assert_allclose(a.f_sigma, b.f_sigma, rtol=1e-6, atol=1e-7 * np.abs(a.f_sigma).max())
    with pytest.raises(ValueError):
        hyper.collect_hyper_snapshots(rm, paths, "lab")
