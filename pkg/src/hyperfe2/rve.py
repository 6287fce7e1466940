"""Periodic RVE problems: constraint elimination, micro Newton solves,
macro stress from boundary reactions and the condensed macro tangent.

The nodal displacement of the RVE is written as ``u = A_u* q + A_E* E``:
``q`` collects the independent (inner and plus-boundary) DOFs, ``E`` the
Voigt macro strain. Minus-boundary nodes follow their plus partner through

    u(x-) = u(x+) + E . (x- - x+)

and the three non-master corners are chained to the master corner
``(xmin, ymin)``, whose DOFs are held at zero to remove the rigid
translations.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .materials import MaterialError

log = logging.getLogger(__name__)


class PeriodicityError(ValueError):
    """Boundary nodes without a periodic partner."""


class ConvergenceError(RuntimeError):
    """Newton iteration failed; ``history`` holds the residual norms."""

    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = list(history or [])


class SingularSystemError(RuntimeError):
    pass


def affine_operator(dx, dy) -> np.ndarray:
    """``(2, 3)`` map from Voigt strain to the displacement jump over
    ``(dx, dy)``."""
    return np.array([[dx, 0.0, 0.5 * dy], [0.0, dy, 0.5 * dx]])


@dataclass
class ConstraintSystem:
    """Periodic constraints of an RVE mesh.

    Attributes
    ----------
    inner, plus, minus : node index arrays
        ``plus`` holds the independent boundary nodes (left and bottom
        edges, master corner); ``minus`` the dependent ones.
    partner : dict
        Minus node -> plus node it is tied to.
    anchor : int
        Master corner; its DOFs are fixed.
    dofmap : fem.DofMap
        Composed ``A_u*`` (``node_dof``) and ``A_E*`` (``node_E``).
    """

    inner: np.ndarray
    plus: np.ndarray
    minus: np.ndarray
    partner: dict
    anchor: int
    dofmap: fem.DofMap
    box: tuple

    @property
    def n(self) -> int:
        return self.dofmap.n

    @property
    def A_u(self) -> sp.csr_matrix:
        """Selection operator ``A_u*`` of shape ``(2 n_nodes, n)``."""
        nd = self.dofmap.node_dof.reshape(-1)
        keep = nd < self.n
        rows = np.flatnonzero(keep)
        return sp.csr_matrix((np.ones(len(rows)), (rows, nd[keep])), shape=(len(nd), self.n))

    @property
    def A_E(self) -> np.ndarray:
        """``A_E*`` of shape ``(2 n_nodes, 3)``."""
        return self.dofmap.node_E.reshape(-1, 3)

    def expand(self, q, E) -> np.ndarray:
        return self.dofmap.expand(q, E)


def build_pbc(mesh: fem.Mesh, tol: float = 1e-8) -> ConstraintSystem:
    """Pair the boundary nodes of a rectangular RVE.

    ``tol`` is relative to the RVE size. Raises :class:`PeriodicityError`
    naming the coordinates of the first unpaired node.
    """
    x = mesh.nodes
    lo, hi = mesh.bounding_box()
    L = float(np.max(hi - lo))
    atol = tol * L
    onx0 = np.abs(x[:, 0] - lo[0]) <= atol
    onx1 = np.abs(x[:, 0] - hi[0]) <= atol
    ony0 = np.abs(x[:, 1] - lo[1]) <= atol
    ony1 = np.abs(x[:, 1] - hi[1]) <= atol

    def corner(a, b):
        idx = np.flatnonzero(a & b)
        if len(idx) != 1:
            raise PeriodicityError(f"expected one corner node, found {len(idx)}")
        return int(idx[0])

    c0, c1, c2, c3 = corner(onx0, ony0), corner(onx1, ony0), corner(onx1, ony1), corner(onx0, ony1)
    corners = {c0, c1, c2, c3}
    partner = {c1: c0, c2: c0, c3: c0}

    def pair(src, dst, axis):
        s = np.array([i for i in np.flatnonzero(src) if i not in corners], dtype=np.int64)
        d = np.array([i for i in np.flatnonzero(dst) if i not in corners], dtype=np.int64)
        if len(s) != len(d):
            bad = s if len(s) > len(d) else d
            raise PeriodicityError(f"{len(s)} vs {len(d)} nodes on opposite edges; first at {x[bad[0]].tolist()}")
        ds = d[np.argsort(x[d, axis])]
        for i in s:
            k = np.searchsorted(x[ds, axis], x[i, axis])
            cand = [ds[m] for m in (k - 1, k) if 0 <= m < len(ds)]
            j = min(cand, key=lambda m: abs(x[m, axis] - x[i, axis]))
            if abs(x[j, axis] - x[i, axis]) > atol:
                raise PeriodicityError(f"node {i} at {x[i].tolist()} has no periodic partner")
            partner[int(i)] = int(j)

    pair(onx1, onx0, 1)  # right -> left
    pair(ony1, ony0, 0)  # top -> bottom
    minus = np.array(sorted(partner), dtype=np.int64)
    if len(set(partner.values()) & set(partner)):
        raise PeriodicityError("constraint chain is not one level deep")
    boundary = onx0 | onx1 | ony0 | ony1
    is_minus = np.zeros(len(x), dtype=bool)
    is_minus[minus] = True
    plus = np.flatnonzero(boundary & ~is_minus)
    inner = np.flatnonzero(~boundary)

    node_dof = np.full((len(x), 2), -1, dtype=np.int64)
    indep = np.flatnonzero(~is_minus)
    indep = indep[indep != c0]
    node_dof[indep] = np.arange(2 * len(indep)).reshape(-1, 2)
    n = 2 * len(indep)
    node_dof[c0] = n
    node_E = np.zeros((len(x), 2, 3))
    for s, m in partner.items():
        node_dof[s] = node_dof[m]
        node_E[s] = affine_operator(*(x[s] - x[m]))
    dm = fem.DofMap(n, node_dof, node_E)
    return ConstraintSystem(inner, plus, minus, partner, c0, dm, (lo, hi))


# ----------------------------------------------------------------------
@dataclass
class LoadPath:
    """Macro strain (or stress) samples in Voigt form, engineering shear."""

    t: np.ndarray
    values: np.ndarray
    kind: str = "strain"

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.t), 3)
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0.0):
            raise ValueError("load path times must be strictly increasing")
        if self.kind not in ("strain", "stress"):
            raise ValueError("kind must be 'strain' or 'stress'")

    def __len__(self):
        return len(self.t)


def read_load_path(path, kind: str = "strain") -> LoadPath:
    """CSV with header ``t, E11, E22, E12`` (tensor shear)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty load path")
    key = "E" if kind == "strain" else "S"
    try:
        t = [float(r["t"]) for r in rows]
        v = [[float(r[f"{key}11"]), float(r[f"{key}22"]), 2.0 * float(r[f"{key}12"])] for r in rows]
    except KeyError as exc:
        raise ValueError(f"{path}: missing column {exc}") from None
    return LoadPath(np.array(t), np.array(v), kind)


def write_load_path(lp: LoadPath, path) -> None:
    key = "E" if lp.kind == "strain" else "S"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", f"{key}11", f"{key}22", f"{key}12"])
        for t, v in zip(lp.t, lp.values):
            w.writerow([repr(float(t)), repr(float(v[0])), repr(float(v[1])), repr(float(0.5 * v[2]))])


# ----------------------------------------------------------------------
@dataclass
class MacroPoint:
    E: np.ndarray
    stress: np.ndarray
    tangent: np.ndarray | None
    V: float
    V_rel: float


@dataclass
class NewtonOptions:
    tol_rel: float = 1e-8
    tol_abs_factor: float = 1e-10
    max_iter: int = 25
    max_bisect: int = 4


def condense(K, KqE, KEE, r, fE, V, solve=None):
    """Static condensation of the micro unknowns.

    Returns the linearized macro stress ``(fE - K_Eq K^-1 r) / V``, the
    condensed tangent ``(K_EE - K_Eq K^-1 K_qE) / V`` and the sensitivities
    ``dq_r = -K^-1 r``, ``dq_dE = -K^-1 K_qE``.
    """
    if solve is None:
        solve = factorize(K)
    rhs = np.column_stack([r, KqE])
    X = solve(rhs)
    dq_r, dq_dE = -X[:, 0], -X[:, 1:]
    C = (KEE + KqE.T @ dq_dE) / V
    S = (fE + KqE.T @ dq_r) / V
    return dict(stress=S, tangent=C, dq_r=dq_r, dq_dE=dq_dE)


def factorize(K):
    """Solver callable for a sparse or dense symmetric system."""
    if sp.issparse(K):
        try:
            lu = spla.splu(sp.csc_matrix(K))
        except RuntimeError as exc:
            raise SingularSystemError(f"singular micro stiffness: {exc}") from exc
        diag = np.abs(lu.U.diagonal())
        if diag.min() <= 1e-13 * diag.max():
            raise SingularSystemError("singular micro stiffness (unconstrained mode)")
        return lu.solve
    K = np.asarray(K)
    try:
        cho = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        w = np.linalg.svd(K, compute_uv=False)
        if w.min() <= 1e-13 * w.max():
            raise SingularSystemError("singular reduced stiffness")
        return lambda b: np.linalg.solve(K, b)
    import scipy.linalg as sla

    return lambda b: sla.cho_solve((cho, True), b)


class MicroModel:
    """High-fidelity periodic RVE.

    Parameters
    ----------
    mesh : fem.Mesh
    materials : dict
        Material id -> material object.
    constraints : ConstraintSystem, optional
        Built with :func:`build_pbc` if omitted.
    """

    def __init__(self, mesh: fem.Mesh, materials: dict, constraints: ConstraintSystem | None = None,
                 options: NewtonOptions | None = None):
        self.mesh = mesh
        self.materials = materials
        self.constraints = constraints if constraints is not None else build_pbc(mesh)
        self.disc = fem.Discretization(mesh, self.constraints.dofmap)
        self.groups = fem.material_groups(self.disc.gp_mat, materials)
        lo, hi = self.constraints.box
        self.V = float(np.prod(hi - lo))
        self.V_bulk = self.disc.volume
        self.V_rel = self.V_bulk / self.V
        self.L = float(np.max(hi - lo))
        self.E_ref = max(m.E_ref for _, m, _ in self.groups)
        self.options = options or NewtonOptions()

    @property
    def n(self) -> int:
        return self.constraints.n

    @property
    def tol_abs(self) -> float:
        return self.options.tol_abs_factor * self.E_ref * self.L

    def init_states(self):
        return fem.init_states(self.disc, self.materials)

    def evaluate(self, q, E, states, dt, tangent=True):
        eps = self.disc.strains(q, E)
        pts = fem.evaluate_points(self.disc, self.materials, states, eps, dt, self.groups)
        out = self.disc.assemble(pts["stress"], pts["tangent"] if tangent else None)
        out.update(pts)
        out["eps"] = eps
        return out


@dataclass
class MicroSolution:
    q: np.ndarray
    point: MacroPoint
    states: list
    iterations: int
    linearizations: int
    history: list
    fields: dict = field(default_factory=dict, repr=False)
    tol: float = float("nan")  # residual tolerance the solve met


def newton(evaluate, q0, norm_ref, tol_abs, options: NewtonOptions, solve_dense=False):
    """Damped Newton iteration on ``evaluate(q) -> dict(r=..., K=...)``.

    Returns ``(q, out, iterations, linearizations, history)`` where ``out``
    is the evaluation at the converged ``q``.
    """
    q = np.array(q0, dtype=float, copy=True)
    out = evaluate(q)
    nlin = 1
    hist = [float(np.linalg.norm(out["r"]))]
    r0 = hist[0] if norm_ref is None else norm_ref
    tol = tol_abs + options.tol_rel * r0
    it = 0
    while hist[-1] > tol:
        if it >= options.max_iter:
            raise ConvergenceError(f"Newton did not converge in {it} iterations, |r| = {hist[-1]:.3e}", hist)
        solve = factorize(out["K"])
        dq = -solve(out["r"])
        alpha = 1.0
        for k in range(options.max_bisect + 1):
            trial = q + alpha * dq
            try:
                new = evaluate(trial)
            except MaterialError:
                if k == options.max_bisect:
                    raise
                alpha *= 0.5
                continue
            nlin += 1
            rn = float(np.linalg.norm(new["r"]))
            if np.isfinite(rn) and (rn < hist[-1] or rn <= tol or k == options.max_bisect):
                break
            alpha *= 0.5
        q, out = trial, new
        hist.append(rn)
        it += 1
        if not np.isfinite(rn):
            raise ConvergenceError("Newton produced a non-finite residual", hist)
    return q, out, it, nlin, hist


def micro_solve(model: MicroModel, states, E=None, dt: float = 0.0, *, stress=None, q0=None,
                E0=None, tangent: bool = True, stress_tol: float = 1e-8, max_outer: int = 25) -> MicroSolution:
    """Equilibrate the RVE for a prescribed macro strain or macro stress.

    ``states`` are the committed point states of the previous step; the
    returned ones are trial states to be committed by the caller.
    In stress-driven mode an outer Newton on ``E`` uses the condensed
    tangent until ``|Sigma - target| <= stress_tol * E_ref``.
    """
    if (E is None) == (stress is None):
        raise ValueError("give exactly one of E or stress")
    q = np.zeros(model.n) if q0 is None else np.asarray(q0, dtype=float)
    if stress is not None:
        target = np.asarray(stress, dtype=float)
        Ek = np.zeros(3) if E0 is None else np.array(E0, dtype=float)
        tot_it = tot_lin = 0
        for k in range(max_outer):
            sol = micro_solve(model, states, Ek, dt, q0=q)
            tot_it += sol.iterations
            tot_lin += sol.linearizations
            res = target - sol.point.stress
            if np.linalg.norm(res) <= stress_tol * model.E_ref:
                sol.iterations, sol.linearizations = tot_it, tot_lin
                return sol
            Ek = Ek + np.linalg.solve(sol.point.tangent, res)
            q = sol.q
        raise ConvergenceError("stress-driven RVE solve did not converge")

    E = np.asarray(E, dtype=float)

    def evaluate(qq):
        return model.evaluate(qq, E, states, dt)

    q, out, it, nlin, hist = newton(evaluate, q, None, model.tol_abs, model.options)
    C = None
    if tangent:
        C = condense(out["K"], out["KqE"], out["KEE"], out["r"], out["fE"], model.V)["tangent"]
    point = MacroPoint(E.copy(), out["fE"] / model.V, C, model.V, model.V_rel)
    tol = model.tol_abs + model.options.tol_rel * hist[0]
    return MicroSolution(q, point, out["states"], it, nlin, hist, out, tol)


def condensed_tangent(model: MicroModel, q, E, states, dt: float = 0.0) -> np.ndarray:
    """Condensed macro tangent at an equilibrium state."""
    out = model.evaluate(q, E, states, dt)
    return condense(out["K"], out["KqE"], out["KEE"], out["r"], out["fE"], model.V)["tangent"]


def run_path(model: MicroModel, path: LoadPath, states=None, on_step=None):
    """Follow a load path step by step, committing converged states.

    ``on_step(k, solution)`` is called after every converged step. Returns
    the list of solutions.
    """
    states = model.init_states() if states is None else states
    q = np.zeros(model.n)
    sols = []
    # a leading zero-load sample only sets the start time
    start = 1 if not np.any(path.values[0]) else 0
    t_prev = path.t[0] if start else 0.0
    for k in range(start, len(path)):
        dt = path.t[k] - t_prev
        kw = {"E": path.values[k]} if path.kind == "strain" else {"stress": path.values[k]}
        sol = micro_solve(model, states, dt=dt, q0=q, **kw)
        states, q = sol.states, sol.q
        t_prev = path.t[k]
        sols.append(sol)
        if on_step is not None:
            on_step(k, sol)
    return sols
