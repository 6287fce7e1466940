"""Empirical hyper-integration with unified integration criteria.

A hyper-integration scheme replaces the full quadrature of the reduced RVE
by a small set of weighted entities: Gauss points (ECM mode) or whole
elements (EHEIM mode). The entities and their positive weights are chosen
so that a training matrix of per-entity contributions is integrated with
near-zero error while the bulk volume is integrated exactly.

The training matrix stacks, for every snapshot, the projected internal
forces and the macro reactions ("conventional" criteria) and optionally the
stress power, average strain, average stress and free energy. Each
non-force block has its full-integration total subtracted, spread over the
entities in proportion to their volume, so that the all-ones weight vector
integrates every row to zero.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .rom import ReducedModel, ReducedBasis, reduced_solve_batch
from .rve import MicroModel, micro_solve

log = logging.getLogger(__name__)

CRITERIA = ("f_int", "f_sigma", "power", "strain", "stress", "energy")
CONVENTIONAL = ("f_int", "f_sigma")
ADDITIONAL = ("power", "strain", "stress", "energy")


@dataclass(frozen=True)
class CriterionSet:
    """Enabled integration criteria, in the fixed order of ``CRITERIA``."""

    names: tuple = CONVENTIONAL

    def __post_init__(self):
        bad = [n for n in self.names if n not in CRITERIA]
        if bad:
            raise ValueError(f"unknown criteria {bad}")
        if "f_int" not in self.names:
            raise ValueError("the reduced internal force criterion must be enabled")
        object.__setattr__(self, "names", tuple(n for n in CRITERIA if n in self.names))

    @classmethod
    def conventional(cls):
        return cls(CONVENTIONAL)

    @classmethod
    def unified(cls):
        return cls(CRITERIA)

    @classmethod
    def parse(cls, spec) -> "CriterionSet":
        """``"conventional"``, ``"additional"``/``"unified"`` or a list of names."""
        if isinstance(spec, CriterionSet):
            return spec
        if spec == "conventional":
            return cls.conventional()
        if spec in ("additional", "unified", "all"):
            return cls.unified()
        return cls(tuple(spec))


# ----------------------------------------------------------------------
@dataclass
class HyperSnapshots:
    """Per-integration-point contributions of every training snapshot.

    Arrays have a leading snapshot axis ``K`` and a point axis; all values
    already carry the quadrature weight.
    """

    f_int: np.ndarray  # (K, ng, ñ)
    f_sigma: np.ndarray  # (K, ng, 3)
    power: np.ndarray  # (K, ng)
    strain: np.ndarray  # (K, ng, 3)
    stress: np.ndarray  # (K, ng, 3)
    energy: np.ndarray  # (K, ng)
    W: np.ndarray  # (ng,)
    gp_elem: np.ndarray
    n_elements: int
    V: float
    meta: list = field(default_factory=list)
    newton_tol: np.ndarray | None = None  # (K,) residual tolerance of each snapshot solve

    @property
    def n_snapshots(self):
        return self.f_int.shape[0]

    @property
    def V_star(self):
        return float(self.W.sum())

    @property
    def V_rel(self):
        return self.V_star / self.V

    def block(self, name):
        a = getattr(self, name)
        return a[..., None] if a.ndim == 2 else a

    def entity_values(self, name, mode):
        """(K, m, comps) contributions per entity."""
        a = self.block(name)
        if mode == "ecm":
            return a
        out = np.zeros((a.shape[0], self.n_elements, a.shape[2]))
        np.add.at(out, (slice(None), self.gp_elem), a)
        return out

    def entity_volume(self, mode):
        if mode == "ecm":
            return self.W.copy()
        return np.bincount(self.gp_elem, weights=self.W, minlength=self.n_elements)

    def totals(self):
        """Macro stress, power, strain, stress and energy averages per snapshot
        (full integration, divided by the RVE volume)."""
        return {n: self.block(n).sum(axis=1) / self.V for n in CRITERIA}


def _point_quantities(rm: ReducedModel, out, K_list):
    W = rm.W
    s = out["stress"] * W[:, None]
    K_list["f_int"].append(np.einsum("gim,bgi->bgm", rm.Bq, s))
    K_list["f_sigma"].append(np.einsum("gij,bgi->bgj", rm.BE, s))
    K_list["power"].append(out["power"] * W)
    K_list["strain"].append(out["eps"] * W[:, None])
    K_list["stress"].append(s)
    K_list["energy"].append(out["psi"] * W)


def collect_hyper_snapshots(rm: ReducedModel, paths, source: str = "rom", micro: MicroModel | None = None,
                            skip_zero: bool = True) -> HyperSnapshots:
    """Run the training paths and record per-point criterion contributions.

    ``rm`` must integrate all points with their standard weights. With
    ``source="hf"`` the paths are solved with the full RVE and the point
    fields are projected with the basis of ``rm``.
    """
    if rm.n_points != rm.micro.disc.n_points:
        raise ValueError("snapshot collection needs the fully integrated reduced model")
    data = {n: [] for n in CRITERIA}
    meta, tols = [], []
    paths = list(paths)
    if source == "rom":
        # all paths advance together as one batch when they share time stations
        groups = {}
        for pid, p in enumerate(paths):
            groups.setdefault(tuple(p.t), []).append(pid)
        for t, pids in groups.items():
            vals = np.stack([paths[i].values for i in pids])  # (B, T, 3)
            states = rm.init_states(len(pids))
            a = np.zeros((len(pids), rm.n))
            t_prev = 0.0
            for k in range(len(t)):
                if k == 0 and not np.any(vals[:, 0]):
                    t_prev = t[0]
                    continue
                dt = t[k] - t_prev
                sol = reduced_solve_batch(rm, states, vals[:, k], dt, a0=a, tangent=False)
                a, states = sol.a, sol.states
                t_prev = t[k]
                keep = np.ones(len(pids), dtype=bool)
                if skip_zero:
                    keep = np.any(vals[:, k] != 0.0, axis=1)
                sub = {key: sol.out[key][keep] for key in ("stress", "power", "eps", "psi")}
                _point_quantities(rm, sub, data)
                meta.extend((pids[i], float(t[k])) for i in np.flatnonzero(keep))
                tols.extend(sol.tol[keep])
    elif source == "hf":
        micro = micro or rm.micro
        for pid, p in enumerate(paths):
            states = micro.init_states()
            q = np.zeros(micro.n)
            t_prev = 0.0
            for k in range(len(p)):
                if k == 0 and not np.any(p.values[0]):
                    t_prev = p.t[0]
                    continue
                sol = micro_solve(micro, states, p.values[k], p.t[k] - t_prev, q0=q, tangent=False)
                states, q, t_prev = sol.states, sol.q, p.t[k]
                if skip_zero and not np.any(p.values[k]):
                    continue
                f = sol.fields
                _point_quantities(rm, {key: f[key][None] for key in ("stress", "power", "eps", "psi")}, data)
                meta.append((pid, float(p.t[k])))
                tols.append(sol.tol)
    else:
        raise ValueError("source must be 'rom' or 'hf'")
    if not meta:
        raise ValueError("no non-zero training snapshots")
    arrs = {n: np.concatenate(v) for n, v in data.items()}
    return HyperSnapshots(W=rm.W.copy(), gp_elem=rm.gp_elem.copy(), n_elements=rm.micro.mesh.n_elements,
                          V=rm.V, meta=meta, newton_tol=np.asarray(tols, dtype=float), **arrs)


# ----------------------------------------------------------------------
@dataclass
class HyperTrainingMatrix:
    x: np.ndarray  # (rows, m), normalized
    V: np.ndarray  # (m,) entity volumes
    V_star: float
    V_rel: float
    mode: str
    criteria: CriterionSet
    row_block: np.ndarray  # criterion index of every row
    row_norm: np.ndarray  # pre-normalization norms
    eps_row: float

    @property
    def n_entities(self):
        return self.x.shape[1]

    def block_rows(self, name):
        return np.flatnonzero(self.row_block == CRITERIA.index(name))


def build_unified_training_matrix(snap: HyperSnapshots, criteria=CONVENTIONAL, mode: str = "ecm",
                                  eps_rel: float = 1e-10) -> HyperTrainingMatrix:
    """Stack and normalize the criterion blocks.

    Every row holds one component of one criterion for one snapshot over
    all entities. Non-force criteria subtract ``V_e * Omega_k / V_rel``
    from each entity, ``Omega_k`` being the full-integration total divided
    by the RVE volume. Rows end up with unit norm; rows whose norm is below
    ``eps_rel`` times the largest row norm are zeroed.
    """
    mode = _mode(mode)
    crit = CriterionSet.parse(criteria)
    Ve = snap.entity_volume(mode)
    V_rel = snap.V_rel
    blocks, labels = [], []
    for name in crit.names:
        X = snap.entity_values(name, mode)  # (K, m, c)
        if name != "f_int":
            omega = X.sum(axis=1) / snap.V  # (K, c)
            X = X - Ve[None, :, None] * omega[:, None, :] / V_rel
        rows = np.transpose(X, (0, 2, 1)).reshape(-1, X.shape[1])
        blocks.append(rows)
        labels.append(np.full(len(rows), CRITERIA.index(name)))
    x = np.vstack(blocks)
    norms = np.linalg.norm(x, axis=1)
    if norms.max() <= 0.0:
        raise ValueError("training matrix has no signal (all rows vanish)")
    eps = eps_rel * norms.max()
    scale = np.where(norms >= eps, 1.0 / np.where(norms > 0, norms, 1.0), 0.0)
    x = x * scale[:, None]
    if not np.any(scale):
        raise ValueError("all training rows are degenerate")
    return HyperTrainingMatrix(x, Ve, float(Ve.sum()), V_rel, mode, crit, np.concatenate(labels), norms, eps)


def all_ones_residual(tm: HyperTrainingMatrix) -> dict:
    """``max |x_f 1|`` per criterion block."""
    s = tm.x.sum(axis=1)
    return {n: float(np.abs(s[tm.block_rows(n)]).max()) for n in tm.criteria.names}


def all_ones_bound(tm: HyperTrainingMatrix, snap: HyperSnapshots, tol_rel: float = 1e-8,
                   factor: float = 10.0) -> np.ndarray:
    """Per-row bound for ``|x_f 1|`` implied by the snapshot tolerances.

    A force row sums to one component of the reduced residual, bounded by
    the Newton tolerance of its snapshot divided by the row norm. The other
    rows vanish identically after target subtraction; they are held to the
    relative Newton tolerance.
    """
    if snap.newton_tol is None:
        raise ValueError("snapshots carry no Newton tolerances")
    bound = np.full(len(tm.x), factor * tol_rel)
    rows = tm.block_rows("f_int")
    if len(rows):
        ncomp = snap.f_int.shape[2]
        k = np.arange(len(rows)) // ncomp  # f_int rows are ordered snapshot-major
        with np.errstate(divide="ignore"):
            b = factor * snap.newton_tol[k] / tm.row_norm[rows]
        bound[rows] = np.where(tm.row_norm[rows] >= tm.eps_row, b, np.inf)
    return bound


def singular_values(tm: HyperTrainingMatrix) -> np.ndarray:
    return np.linalg.svd(tm.x, compute_uv=False)


# ----------------------------------------------------------------------
@dataclass
class HyperScheme:
    mode: str
    entities: np.ndarray
    gamma: np.ndarray
    residual: float
    criteria: tuple
    m_tilde: int
    n_singular: int = 0

    def __post_init__(self):
        self.entities = np.asarray(self.entities, dtype=np.int64)
        self.gamma = np.asarray(self.gamma, dtype=float)
        if len(self.entities) != len(self.gamma):
            raise ValueError("entities and gamma differ in length")
        if len(np.unique(self.entities)) != len(self.entities):
            raise ValueError("duplicate entities")

    def to_json(self) -> dict:
        return {"mode": self.mode, "entities": [int(e) for e in self.entities],
                "gamma": [float(g) for g in self.gamma], "residual": float(self.residual),
                "criteria": list(self.criteria), "m_tilde": int(self.m_tilde)}

    @classmethod
    def from_json(cls, d: dict) -> "HyperScheme":
        return cls(_mode(d["mode"]), d["entities"], d["gamma"], d["residual"], tuple(d["criteria"]), d["m_tilde"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "HyperScheme":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _mode(mode: str) -> str:
    m = mode.lower()
    if m not in ("ecm", "eheim"):
        raise ValueError(f"mode must be 'ecm' or 'eheim', got {mode!r}")
    return m


def _eq_lsq(A, c, d):
    """``min |A g|`` subject to ``c . g = d``."""
    nc = np.linalg.norm(c)
    g0 = c * (d / nc ** 2)
    if len(c) == 1:
        return g0
    Q, _ = np.linalg.qr(c[:, None], mode="complete")
    N = Q[:, 1:]
    y, *_ = np.linalg.lstsq(A @ N, -(A @ g0), rcond=None)
    return g0 + N @ y


def select_hyper_scheme(tm: HyperTrainingMatrix, m_tilde: int, tol: float = 1e-12,
                        max_iter: int | None = None) -> HyperScheme:
    """Greedy selection of ``m_tilde`` entities with positive weights.

    The first ``m_tilde - 1`` left singular vectors of ``x_f^T`` and the
    normalized volume row form the system ``J g = b``. Entities are added by
    their correlation with the current residual of that system; after every
    addition the weights solve an equality-constrained least-squares
    problem (exact volume) and non-positive weights are removed by
    Lawson-Hanson interpolation. Stops at ``m_tilde`` entities or when the
    training error ``|x_f[:, z] g|^2`` drops below ``tol``.
    """
    m = tm.n_entities
    if m_tilde < 1:
        raise ValueError("m_tilde must be >= 1")
    crit = tm.criteria.names
    if m_tilde >= m:
        g = np.ones(m)
        res = float(np.sum((tm.x @ g) ** 2))
        return HyperScheme(tm.mode, np.arange(m), g, res, crit, m_tilde, 0)
    U, s, _ = np.linalg.svd(tm.x.T, full_matrices=False)
    rank = int(np.sum(s > 1e-12 * s[0])) if s.size and s[0] > 0 else 0
    k = min(m_tilde - 1, rank)
    lam = U[:, :k]
    V = tm.V
    nV = np.linalg.norm(V)
    J = np.vstack([lam.T, V[None, :] / nV])
    b = np.zeros(k + 1)
    b[-1] = tm.V_star / nV
    Jn = np.linalg.norm(J, axis=0)
    Jn[Jn == 0.0] = 1.0
    A_sel = lam.T  # rows minimized
    z: list[int] = []
    g = np.zeros(0)
    blocked = np.zeros(m, dtype=bool)
    resid = b.copy()
    max_iter = max_iter or 4 * m_tilde + 20

    def err(zz, gg):
        return float(np.sum((tm.x[:, zz] @ gg) ** 2)) if len(zz) else float("inf")

    for _ in range(max_iter):
        if len(z) >= m_tilde:
            break
        score = (J.T @ resid) / Jn
        score[z] = -np.inf
        score[blocked] = -np.inf
        if not np.isfinite(score).any():
            break
        i = int(np.argmax(score))
        if score[i] <= 0.0 and len(z):
            break
        z_new = z + [i]
        g_old = np.append(g, 0.0)  # feasible start, exact volume once z is non-empty
        g_new = _eq_lsq(A_sel[:, z_new], V[z_new], tm.V_star)
        # Lawson-Hanson interpolation back towards the last feasible weights
        while np.any(g_new <= 0.0):
            neg = g_new <= 0.0
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(neg, g_old / (g_old - g_new), np.inf)
            t_min = float(np.clip(np.min(t), 0.0, 1.0))
            g_int = g_old + t_min * (g_new - g_old)
            keep = g_int > 1e-14 * g_int.max()
            keep[np.argmin(np.where(neg, t, np.inf))] = False
            if i in z_new and not keep[z_new.index(i)]:
                blocked[i] = True
            z_new = [e for e, kp in zip(z_new, keep) if kp]
            g_old = g_int[keep]
            g_new = _eq_lsq(A_sel[:, z_new], V[z_new], tm.V_star)
        z, g = z_new, g_new
        resid = b - J[:, z] @ g
        if err(z, g) <= tol:
            break
    if not z:
        raise ValueError("no feasible hyper-integration scheme (volume cannot be matched)")
    order = np.argsort(z)
    z = np.asarray(z)[order]
    g = np.asarray(g)[order]
    return HyperScheme(tm.mode, z, g, err(z, g), crit, m_tilde, k)


def scheme_objective_svd(tm: HyperTrainingMatrix, scheme: HyperScheme) -> float:
    """``sum_i s_i^2 (lambda^T g)_i^2`` with the full SVD of ``x_f^T``."""
    U, s, _ = np.linalg.svd(tm.x.T, full_matrices=False)
    gf = np.zeros(tm.n_entities)
    gf[scheme.entities] = scheme.gamma
    return float(np.sum(s ** 2 * (U.T @ gf) ** 2))


# ----------------------------------------------------------------------
def scheme_points(scheme: HyperScheme, micro: MicroModel):
    """Integration points and weights of a scheme (sorted by point id)."""
    W = micro.disc.gp_W
    if scheme.mode == "ecm":
        pts = scheme.entities
        w = scheme.gamma * W[pts]
    else:
        ge = micro.disc.gp_elem
        gam = np.zeros(micro.mesh.n_elements)
        gam[scheme.entities] = scheme.gamma
        sel = np.zeros(micro.mesh.n_elements, dtype=bool)
        sel[scheme.entities] = True
        pts = np.flatnonzero(sel[ge])
        w = gam[ge[pts]] * W[pts]
    order = np.argsort(pts, kind="stable")
    return np.asarray(pts)[order], np.asarray(w)[order]


def hyper_reduced_model(scheme: HyperScheme, micro: MicroModel, basis: ReducedBasis) -> ReducedModel:
    """Reduced model integrated only over the scheme's entities.

    EHEIM evaluates complete elements with their standard rule scaled by
    the element weight; ECM evaluates single points with weights
    ``gamma * w * detJ``.
    """
    pts, w = scheme_points(scheme, micro)
    return ReducedModel(micro, basis, points=pts, weights=w)


def hyper_reduced_solve(hm: ReducedModel, states, E, dt: float = 0.0, a0=None, tangent=True):
    """Solve one hyper-reduced RVE; see :func:`rom.reduced_solve`."""
    from .rom import reduced_solve

    return reduced_solve(hm, states, E, dt, a0, tangent)


def integration_point_count(scheme: HyperScheme, micro: MicroModel) -> int:
    return len(scheme_points(scheme, micro)[0])
