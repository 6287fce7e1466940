"""POD reduced-order RVE models.

The independent micro DOFs are approximated as ``q = Phi a`` with ``ñ``
modal amplitudes ``a``. Strains at the integration points become

    eps_g = Bq_g a + BE_g E,    Bq_g = B_g A_u*[e(g)] Phi,  BE_g = B_g A_E*[e(g)]

so the reduced residual, macro reactions and tangents are sums over points
of small dense products. :class:`ReducedModel` evaluates a batch of RVEs
(one per macro Gauss point) at once and optionally restricts the sums to a
weighted subset of integration points, which is how hyper-integration
schemes are run.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .materials import MaterialError
from .rve import ConvergenceError, MacroPoint, MicroModel, NewtonOptions


@dataclass
class SnapshotMatrix:
    """Columns are converged independent-DOF vectors ``q``."""

    data: np.ndarray
    meta: list = field(default_factory=list)  # (path id, time) per column

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise ValueError("snapshot matrix must be 2D")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("snapshot matrix has non-finite entries")

    @classmethod
    def from_columns(cls, cols, meta=None):
        cols = list(cols)
        if not cols:
            raise ValueError("no snapshots")
        return cls(np.column_stack(cols), list(meta or []))

    @property
    def n_snapshots(self):
        return self.data.shape[1]


def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "float64", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).copy()


@dataclass
class ReducedBasis:
    Phi: np.ndarray
    singular_values: np.ndarray
    energy: np.ndarray  # cumulative fraction per mode count (all snapshot modes)
    energy_kind: str = "sum"

    @property
    def n_modes(self) -> int:
        return self.Phi.shape[1]

    @property
    def n_dofs(self) -> int:
        return self.Phi.shape[0]

    def truncated(self, n_modes: int) -> "ReducedBasis":
        return ReducedBasis(self.Phi[:, :n_modes].copy(), self.singular_values, self.energy, self.energy_kind)

    def to_json(self) -> dict:
        return {"format": "hyperfe2-basis-1", "energy_kind": self.energy_kind,
                "Phi": _encode(self.Phi), "singular_values": _encode(self.singular_values),
                "energy": _encode(self.energy)}

    @classmethod
    def from_json(cls, d: dict) -> "ReducedBasis":
        if d.get("format") != "hyperfe2-basis-1":
            raise ValueError("not a basis file")
        return cls(_decode(d["Phi"]), _decode(d["singular_values"]), _decode(d["energy"]), d["energy_kind"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "ReducedBasis":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def cumulative_energy(s: np.ndarray, kind: str = "sum") -> np.ndarray:
    """Cumulative fraction of singular values (``sum``) or of their squares
    (``squared``)."""
    w = s if kind == "sum" else s ** 2
    tot = w.sum()
    return np.cumsum(w) / tot if tot > 0 else np.zeros_like(w)


def pod(snapshots, n_modes: int | None = None, energy: float | None = None, energy_kind: str = "sum",
        rank_tol: float = 1e-12) -> ReducedBasis:
    """Truncated SVD basis of the snapshot columns.

    Give either a fixed ``n_modes`` or an ``energy`` threshold in (0, 1];
    the mode count is capped by the numerical rank. Each mode's
    largest-magnitude entry is made positive.
    """
    S = snapshots.data if isinstance(snapshots, SnapshotMatrix) else np.asarray(snapshots, dtype=float)
    if S.ndim != 2 or S.shape[1] == 0:
        raise ValueError("empty snapshot set")
    if energy_kind not in ("sum", "squared"):
        raise ValueError("energy_kind must be 'sum' or 'squared'")
    U, s, _ = np.linalg.svd(S, full_matrices=False)
    rank = int(np.sum(s > rank_tol * s[0])) if s[0] > 0 else 0
    if rank == 0:
        raise ValueError("snapshot matrix is zero")
    frac = cumulative_energy(s, energy_kind)
    if n_modes is not None:
        k = min(int(n_modes), rank)
    elif energy is not None:
        if not 0.0 < energy <= 1.0:
            raise ValueError("energy threshold must be in (0, 1]")
        k = min(int(np.searchsorted(frac, energy - 1e-14) + 1), rank)
    else:
        k = rank
    Phi = U[:, :k].copy()
    idx = np.argmax(np.abs(Phi), axis=0)
    Phi *= np.sign(Phi[idx, np.arange(k)])
    return ReducedBasis(Phi, s, frac, energy_kind)


# ----------------------------------------------------------------------
class ReducedModel:
    """Batched POD model of an RVE, optionally hyper-integrated.

    Parameters
    ----------
    micro : MicroModel
    basis : ReducedBasis
    points : int array, optional
        Integration points kept in the sums (all by default).
    weights : array, optional
        Weights replacing ``w * detJ`` at ``points``.
    """

    def __init__(self, micro: MicroModel, basis: ReducedBasis, points=None, weights=None):
        if basis.n_dofs != micro.n:
            raise ValueError(f"basis has {basis.n_dofs} rows, RVE has {micro.n} unknowns")
        self.micro = micro
        self.basis = basis
        disc = micro.disc
        ng = disc.n_points
        self.points = np.arange(ng) if points is None else np.asarray(points, dtype=np.int64)
        self.W = disc.gp_W[self.points] if weights is None else np.asarray(weights, dtype=float)
        self.Bq, self.BE = self._operators(self.points)
        self.gp_mat = disc.gp_mat[self.points]
        self.gp_elem = disc.gp_elem[self.points]
        self.groups = fem.material_groups(self.gp_mat, micro.materials)
        self.V = micro.V
        self.V_rel = micro.V_rel
        self.options = micro.options
        self.tol_abs = micro.tol_abs
        # combined operator [Bq BE] used for the tangent blocks
        self.Bfull = np.concatenate([self.Bq, self.BE], axis=2)

    @property
    def n(self) -> int:
        return self.basis.n_modes

    @property
    def n_points(self) -> int:
        return len(self.points)

    def _operators(self, pts):
        disc = self.micro.disc
        Phi_ext = np.vstack([self.basis.Phi, np.zeros((1, self.basis.n_modes))])
        Bq = np.empty((len(pts), 3, self.basis.n_modes))
        BE = np.empty((len(pts), 3, 3))
        for b in disc.blocks:
            sl = b["gp"]
            sel = np.flatnonzero((pts >= sl.start) & (pts < sl.stop))
            if not len(sel):
                continue
            loc = pts[sel] - sl.start
            e, g = np.divmod(loc, b["ngp"])
            Bg = b["B"][e, g]  # (k, 3, ndofe)
            Bq[sel] = np.einsum("kij,kjm->kim", Bg, Phi_ext[b["edof"][e]])
            BE[sel] = np.einsum("kij,kjl->kil", Bg, b["edofE"][e])
        return Bq, BE

    def init_states(self, batch: int | None = None):
        shape = () if batch is None else (batch,)
        return [mat.init_state(shape + (len(idx),)) for _, mat, idx in self.groups]

    def strains(self, a, E):
        """``a`` (..., ñ), ``E`` (..., 3) -> (..., n_points, 3)."""
        return np.einsum("gim,...m->...gi", self.Bq, a) + np.einsum("gij,...j->...gi", self.BE, E)

    def evaluate(self, a, E, states, dt, tangent=True):
        """Reduced residual, reactions and tangent blocks for a batch.

        Shapes: ``a`` (B, ñ), ``E`` (B, 3); states with leading dim B.
        """
        eps = self.strains(a, E)
        pts = fem.evaluate_points(self, self.micro.materials, states, eps, dt, self.groups)
        s = pts["stress"] * self.W[:, None]
        r = np.einsum("gim,bgi->bm", self.Bq, s)
        fE = np.einsum("gij,bgi->bj", self.BE, s)
        out = dict(r=r, fE=fE, eps=eps, **pts)
        if tangent:
            CB = np.einsum("bgij,gjk->bgik", pts["tangent"] * self.W[:, None, None], self.Bfull)
            Kf = np.einsum("gia,bgic->bac", self.Bfull, CB)
            n = self.n
            out["K"], out["KqE"], out["KEE"] = Kf[:, :n, :n], Kf[:, :n, n:], Kf[:, n:, n:]
        return out

    def condense(self, out):
        """Batched static condensation of an evaluation."""
        K, KqE, KEE = out["K"], out["KqE"], out["KEE"]
        rhs = np.concatenate([out["r"][:, :, None], KqE], axis=2)
        try:
            X = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError as exc:
            from .rve import SingularSystemError

            raise SingularSystemError("singular reduced stiffness") from exc
        dq_r, dq_dE = -X[:, :, 0], -X[:, :, 1:]
        KEq = np.swapaxes(KqE, 1, 2)
        C = (KEE + KEq @ dq_dE) / self.V
        S = (out["fE"] + np.einsum("bji,bj->bi", KqE, dq_r)) / self.V
        return dict(stress=S, tangent=C, dq_r=dq_r, dq_dE=dq_dE)


def _take(states, idx):
    return [{k: v[idx] for k, v in st.items()} for st in states]


def _put(dst, src, idx):
    for d, s in zip(dst, src):
        for k in d:
            d[k][idx] = s[k]


@dataclass
class ReducedSolution:
    a: np.ndarray  # (B, ñ)
    stress: np.ndarray  # (B, 3)
    tangent: np.ndarray | None  # (B, 3, 3)
    states: list
    iterations: np.ndarray
    linearizations: np.ndarray
    out: dict = field(default_factory=dict, repr=False)
    tol: np.ndarray | None = None  # residual tolerance per batch entry


def reduced_solve_batch(rm: ReducedModel, states, E, dt: float = 0.0, a0=None, tangent: bool = True,
                        options: NewtonOptions | None = None) -> ReducedSolution:
    """Newton solve of a batch of reduced RVEs for macro strains ``E`` (B, 3)."""
    opt = options or rm.options
    E = np.atleast_2d(np.asarray(E, dtype=float))
    B = len(E)
    a = np.zeros((B, rm.n)) if a0 is None else np.array(a0, dtype=float).reshape(B, rm.n)
    out = rm.evaluate(a, E, states, dt)
    nlin = np.ones(B, dtype=int)
    its = np.zeros(B, dtype=int)
    rn = np.linalg.norm(out["r"], axis=1)
    tol = rm.tol_abs + opt.tol_rel * rn
    active = np.flatnonzero(rn > tol)
    while len(active):
        if its[active].max() >= opt.max_iter:
            raise ConvergenceError(f"reduced Newton did not converge, max |r| = {rn[active].max():.3e}")
        try:
            da = -np.linalg.solve(out["K"][active], out["r"][active][:, :, None])[:, :, 0]
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("singular reduced stiffness") from exc
        st_a = _take(states, active)
        alpha = np.ones(len(active))
        for k in range(opt.max_bisect + 1):
            trial = a[active] + alpha[:, None] * da
            try:
                new = rm.evaluate(trial, E[active], st_a, dt)
            except MaterialError:
                if k == opt.max_bisect:
                    raise
                alpha *= 0.5
                continue
            nlin[active] += 1
            rnew = np.linalg.norm(new["r"], axis=1)
            bad = ~(np.isfinite(rnew) & ((rnew < rn[active]) | (rnew <= tol[active])))
            if not bad.any() or k == opt.max_bisect:
                break
            alpha = np.where(bad, 0.5 * alpha, alpha)
            # points that improved keep their step; re-evaluating all is simpler
        a[active] = trial
        for key in ("r", "fE", "K", "KqE", "KEE", "stress", "tangent", "psi", "power", "eps"):
            out[key][active] = new[key]
        _put(out["states"], new["states"], active)
        rn[active] = rnew
        its[active] += 1
        active = active[rnew > tol[active]]
    C = rm.condense(out)["tangent"] if tangent else None
    return ReducedSolution(a, out["fE"] / rm.V, C, out["states"], its, nlin, out, tol)


def reduced_solve(rm: ReducedModel, states, E, dt: float = 0.0, a0=None, tangent: bool = True):
    """Single-RVE reduced solve. ``states`` are unbatched (as from
    ``rm.init_states()``). Returns ``(a, MacroPoint, states')``."""
    st = [{k: v[None] for k, v in s.items()} for s in states]
    sol = reduced_solve_batch(rm, st, np.asarray(E, dtype=float)[None], dt,
                              None if a0 is None else np.asarray(a0)[None], tangent)
    point = MacroPoint(np.asarray(E, dtype=float).copy(), sol.stress[0],
                       None if sol.tangent is None else sol.tangent[0], rm.V, rm.V_rel)
    return sol.a[0], point, [{k: v[0] for k, v in s.items()} for s in sol.states]


def reduced_condensed_tangent(rm: ReducedModel, a, E, states, dt: float = 0.0) -> np.ndarray:
    st = [{k: v[None] for k, v in s.items()} for s in states]
    out = rm.evaluate(np.asarray(a)[None], np.asarray(E, dtype=float)[None], st, dt)
    return rm.condense(out)["tangent"][0]
