"""Two-dimensional finite element core.

Shape functions, Gauss rules, strain-displacement operators and the
vectorized element loop used by every solver in the package.

Voigt convention: strains ``(e11, e22, g12)`` with engineering shear
``g12 = 2 e12``; stresses ``(s11, s22, s12)``. Nodal DOFs are interleaved,
global DOF ``2*node + component``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

ELEMENT_TYPES = ("tri3", "tri6", "quad4", "quad8")

NODES_PER_ELEMENT = {"tri3": 3, "tri6": 6, "quad4": 4, "quad8": 8}

PARENT_VOLUME = {"tri3": 0.5, "tri6": 0.5, "quad4": 4.0, "quad8": 4.0}

# parent coordinates of the element nodes
PARENT_NODES = {
    "tri3": np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
    "tri6": np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0],
                      [0.5, 0.0], [0.5, 0.5], [0.0, 0.5]]),
    "quad4": np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]),
    "quad8": np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0],
                       [0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]),
}


class MeshError(ValueError):
    """Invalid mesh topology or geometry."""


class InvertedElementError(MeshError):
    """Non-positive Jacobian determinant at an integration point."""


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.weights)


def gauss_rule(elem_type: str) -> QuadratureRule:
    """Default integration rule of an element type.

    tri3: 1 point, tri6: 3 points, quad4 and quad8 (reduced): 2x2.
    """
    if elem_type == "tri3":
        return QuadratureRule(np.array([[1.0 / 3.0, 1.0 / 3.0]]), np.array([0.5]))
    if elem_type == "tri6":
        pts = np.array([[1.0 / 6.0, 1.0 / 6.0], [2.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 2.0 / 3.0]])
        return QuadratureRule(pts, np.full(3, 1.0 / 6.0))
    if elem_type in ("quad4", "quad8"):
        a = 1.0 / np.sqrt(3.0)
        pts = np.array([[-a, -a], [a, -a], [a, a], [-a, a]])
        return QuadratureRule(pts, np.ones(4))
    raise ValueError(f"unknown element type {elem_type!r}")


def shape_functions(elem_type: str, xi) -> tuple[np.ndarray, np.ndarray]:
    """Shape function values and parent-coordinate gradients.

    Parameters
    ----------
    elem_type : str
        One of ``tri3``, ``tri6``, ``quad4``, ``quad8``.
    xi : array_like, shape (2,) or (n, 2)
        Parent coordinates.

    Returns
    -------
    N : ndarray, shape (n, nn) or (nn,)
    dN : ndarray, shape (n, nn, 2) or (nn, 2)
    """
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    xi = np.atleast_2d(xi)
    s, t = xi[:, 0], xi[:, 1]
    n = len(s)
    if elem_type == "tri3":
        N = np.stack([1.0 - s - t, s, t], axis=1)
        dN = np.broadcast_to(np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]), (n, 3, 2)).copy()
    elif elem_type == "tri6":
        L1, L2, L3 = 1.0 - s - t, s, t
        N = np.stack([L1 * (2 * L1 - 1), L2 * (2 * L2 - 1), L3 * (2 * L3 - 1),
                      4 * L1 * L2, 4 * L2 * L3, 4 * L3 * L1], axis=1)
        # dL/ds = (-1, 1, 0), dL/dt = (-1, 0, 1)
        dN = np.empty((n, 6, 2))
        dN[:, 0, 0] = dN[:, 0, 1] = -(4 * L1 - 1)
        dN[:, 1, 0], dN[:, 1, 1] = 4 * L2 - 1, 0.0
        dN[:, 2, 0], dN[:, 2, 1] = 0.0, 4 * L3 - 1
        dN[:, 3, 0], dN[:, 3, 1] = 4 * (L1 - L2), -4 * L2
        dN[:, 4, 0], dN[:, 4, 1] = 4 * L3, 4 * L2
        dN[:, 5, 0], dN[:, 5, 1] = -4 * L3, 4 * (L1 - L3)
    elif elem_type == "quad4":
        si, ti = PARENT_NODES["quad4"].T
        a = 1.0 + np.outer(s, si)
        b = 1.0 + np.outer(t, ti)
        N = 0.25 * a * b
        dN = np.stack([0.25 * si * b, 0.25 * a * ti], axis=2)
    elif elem_type == "quad8":
        N = np.empty((n, 8))
        dN = np.empty((n, 8, 2))
        for k, (si, ti) in enumerate(PARENT_NODES["quad8"]):
            if k < 4:
                N[:, k] = 0.25 * (1 + s * si) * (1 + t * ti) * (s * si + t * ti - 1)
                dN[:, k, 0] = 0.25 * si * (1 + t * ti) * (2 * s * si + t * ti)
                dN[:, k, 1] = 0.25 * ti * (1 + s * si) * (s * si + 2 * t * ti)
            elif si == 0.0:
                N[:, k] = 0.5 * (1 - s * s) * (1 + t * ti)
                dN[:, k, 0] = -s * (1 + t * ti)
                dN[:, k, 1] = 0.5 * ti * (1 - s * s)
            else:
                N[:, k] = 0.5 * (1 + s * si) * (1 - t * t)
                dN[:, k, 0] = 0.5 * si * (1 - t * t)
                dN[:, k, 1] = -t * (1 + s * si)
    else:
        raise ValueError(f"unknown element type {elem_type!r}")
    if single:
        return N[0], dN[0]
    return N, dN


def _b_from_gradients(dNx: np.ndarray) -> np.ndarray:
    """Assemble Voigt B matrices from physical gradients ``(..., nn, 2)``."""
    nn = dNx.shape[-2]
    B = np.zeros(dNx.shape[:-2] + (3, 2 * nn))
    B[..., 0, 0::2] = dNx[..., 0]
    B[..., 1, 1::2] = dNx[..., 1]
    B[..., 2, 0::2] = dNx[..., 1]
    B[..., 2, 1::2] = dNx[..., 0]
    return B


def b_matrix(coords, elem_type: str, xi) -> tuple[np.ndarray, float]:
    """Strain-displacement matrix and Jacobian determinant at one point.

    Raises
    ------
    InvertedElementError
        If ``detJ <= 0``.
    """
    coords = np.asarray(coords, dtype=float)
    _, dN = shape_functions(elem_type, xi)
    J = dN.T @ coords  # J[k, l] = d x_l / d xi_k
    detJ = float(np.linalg.det(J))
    if detJ <= 0.0:
        raise InvertedElementError(f"detJ = {detJ:.3e} <= 0 for element at {coords.mean(axis=0)}")
    dNx = dN @ np.linalg.inv(J).T
    return _b_from_gradients(dNx), detJ


@dataclass
class ElementBlock:
    """Elements of a single type."""

    etype: str
    conn: np.ndarray  # (nel, nn)
    mat: np.ndarray  # (nel,)
    ids: np.ndarray  # global element ids


@dataclass
class Mesh:
    """Nodes and 2D elements grouped into same-type blocks.

    ``elements`` keeps the input order; element ids are positions in that
    list.
    """

    nodes: np.ndarray
    elements: list  # list of (etype, node tuple, mat)
    blocks: list = field(init=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise MeshError("nodes must be an (n, 2) array")
        by_type: dict[str, list[int]] = {}
        for i, (etype, conn, _) in enumerate(self.elements):
            if etype not in NODES_PER_ELEMENT:
                raise MeshError(f"element {i}: unknown type {etype!r}")
            if len(conn) != NODES_PER_ELEMENT[etype]:
                raise MeshError(f"element {i}: {etype} needs {NODES_PER_ELEMENT[etype]} nodes, got {len(conn)}")
            by_type.setdefault(etype, []).append(i)
        self.blocks = []
        for etype in ELEMENT_TYPES:
            ids = by_type.get(etype)
            if not ids:
                continue
            conn = np.array([self.elements[i][1] for i in ids], dtype=np.int64)
            mat = np.array([self.elements[i][2] for i in ids], dtype=np.int64)
            self.blocks.append(ElementBlock(etype, conn, mat, np.array(ids, dtype=np.int64)))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_dofs(self) -> int:
        return 2 * len(self.nodes)

    def bounding_box(self):
        return self.nodes.min(axis=0), self.nodes.max(axis=0)

    def translated(self, shift) -> "Mesh":
        return Mesh(self.nodes + np.asarray(shift, dtype=float), list(self.elements))

    def validate(self, tol: float = 1e-10) -> None:
        """Check node ranges, positive Jacobians and duplicate nodes."""
        n = self.n_nodes
        for i, (_, conn, _) in enumerate(self.elements):
            if min(conn) < 0 or max(conn) >= n:
                raise MeshError(f"element {i}: node index out of range")
        for blk in self.blocks:
            rule = gauss_rule(blk.etype)
            _, dN = shape_functions(blk.etype, rule.points)
            J = np.einsum("gnk,enl->egkl", dN, self.nodes[blk.conn])
            det = np.linalg.det(J)
            bad = np.argwhere(det <= 0.0)
            if len(bad):
                e = blk.ids[bad[0, 0]]
                raise InvertedElementError(f"element {e}: detJ = {det[tuple(bad[0])]:.3e}")
        size = np.ptp(self.nodes, axis=0).max()
        pairs = cKDTree(self.nodes).query_pairs(tol * max(size, 1.0))
        if pairs:
            a, b = sorted(pairs)[0]
            raise MeshError(f"duplicate nodes {a} and {b} at {self.nodes[a]}")

    def to_json(self) -> dict:
        return {
            "nodes": self.nodes.tolist(),
            "elements": [{"type": t, "nodes": [int(v) for v in c], "mat": int(m)} for t, c, m in self.elements],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Mesh":
        return cls(np.array(data["nodes"], dtype=float),
                   [(e["type"], tuple(e["nodes"]), int(e.get("mat", 0))) for e in data["elements"]])


def load_mesh(path) -> Mesh:
    with open(path) as fh:
        return Mesh.from_json(json.load(fh))


def save_mesh(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        json.dump(mesh.to_json(), fh)


@dataclass
class DofMap:
    """Map from nodal DOFs to unknowns plus an affine macro-strain part.

    ``node_dof[a, c]`` is the unknown driving DOF ``c`` of node ``a``; the
    value ``n`` denotes a DOF held at zero. ``node_E[a, c, :]`` multiplies
    the Voigt macro strain.
    """

    n: int
    node_dof: np.ndarray  # (n_nodes, 2)
    node_E: np.ndarray | None = None  # (n_nodes, 2, 3)

    @classmethod
    def identity(cls, n_nodes: int) -> "DofMap":
        return cls(2 * n_nodes, np.arange(2 * n_nodes).reshape(n_nodes, 2))

    def expand(self, q, E=None) -> np.ndarray:
        """Full nodal displacement vector ``A_u* q + A_E* E``."""
        q_ext = np.append(np.asarray(q, dtype=float), 0.0)
        u = q_ext[self.node_dof].reshape(-1)
        if self.node_E is not None and E is not None:
            u = u + (self.node_E @ np.asarray(E, dtype=float)).reshape(-1)
        return u


class Discretization:
    """Precomputed integration-point operators of a mesh under a DOF map.

    Integration points are numbered block by block, element-major. For every
    point the class stores the B matrix, the weight ``w * detJ`` (times
    thickness), its element and material id.
    """

    def __init__(self, mesh: Mesh, dofmap: DofMap | None = None, thickness: float = 1.0):
        self.mesh = mesh
        self.dofmap = dofmap if dofmap is not None else DofMap.identity(mesh.n_nodes)
        self.thickness = thickness
        self.blocks = []
        offset = 0
        gp_elem, gp_mat, gp_W = [], [], []
        for blk in mesh.blocks:
            rule = gauss_rule(blk.etype)
            N, dN = shape_functions(blk.etype, rule.points)
            X = mesh.nodes[blk.conn]  # (nel, nn, 2)
            J = np.einsum("gnk,enl->egkl", dN, X)
            det = np.linalg.det(J)
            if np.any(det <= 0.0):
                e, g = np.argwhere(det <= 0.0)[0]
                raise InvertedElementError(f"element {blk.ids[e]}: detJ = {det[e, g]:.3e} at point {g}")
            dNx = np.einsum("gnk,eglk->egnl", dN, np.linalg.inv(J))
            B = _b_from_gradients(dNx)  # (nel, ngp, 3, ndofe)
            W = det * rule.weights * thickness
            nel, ngp = W.shape
            edof = self.dofmap.node_dof[blk.conn].reshape(nel, -1)
            edofE = None
            if self.dofmap.node_E is not None:
                edofE = self.dofmap.node_E[blk.conn].reshape(nel, -1, 3)
            xg = np.einsum("gn,enl->egl", N, X)
            self.blocks.append(dict(etype=blk.etype, ids=blk.ids, B=B, W=W, edof=edof, edofE=edofE,
                                    gp=slice(offset, offset + nel * ngp), ngp=ngp, x=xg))
            offset += nel * ngp
            gp_elem.append(np.repeat(blk.ids, ngp))
            gp_mat.append(np.repeat(blk.mat, ngp))
            gp_W.append(W.reshape(-1))
        self.n_points = offset
        self.gp_elem = np.concatenate(gp_elem)
        self.gp_mat = np.concatenate(gp_mat)
        self.gp_W = np.concatenate(gp_W)
        self.gp_x = np.concatenate([b["x"].reshape(-1, 2) for b in self.blocks])
        self.element_volume = np.bincount(self.gp_elem, weights=self.gp_W, minlength=mesh.n_elements)
        self._pattern = None

    @property
    def volume(self) -> float:
        return float(self.gp_W.sum())

    # ------------------------------------------------------------------
    def point_operators(self):
        """Per-point B and the affine macro-strain operator.

        Returns
        -------
        B : list of (nel, ngp, 3, ndofe) arrays (one per block)
        BE : ndarray, shape (n_points, 3, 3) or None
            Strain produced by a unit macro strain through ``A_E*``.
        """
        if self.dofmap.node_E is None:
            return [b["B"] for b in self.blocks], None
        BE = np.concatenate([np.einsum("egij,ejk->egik", b["B"], b["edofE"]).reshape(-1, 3, 3)
                             for b in self.blocks])
        return [b["B"] for b in self.blocks], BE

    def strains(self, q, E=None) -> np.ndarray:
        """Integration-point strains for unknowns ``q`` and macro strain ``E``."""
        q_ext = np.append(np.asarray(q, dtype=float), 0.0)
        out = np.empty((self.n_points, 3))
        for b in self.blocks:
            ue = q_ext[b["edof"]]
            if b["edofE"] is not None and E is not None:
                ue = ue + b["edofE"] @ np.asarray(E, dtype=float)
            out[b["gp"]] = np.einsum("egij,ej->egi", b["B"], ue).reshape(-1, 3)
        return out

    def _sparsity(self):
        """Symbolic CSR pattern of the unknown-unknown block, computed once."""
        if self._pattern is None:
            n = self.dofmap.n
            rows, cols = [], []
            for b in self.blocks:
                edof = b["edof"]
                rows.append(np.repeat(edof, edof.shape[1], axis=1).reshape(-1))
                cols.append(np.tile(edof, (1, edof.shape[1])).reshape(-1))
            rows, cols = np.concatenate(rows), np.concatenate(cols)
            keep = (rows < n) & (cols < n)
            key = rows[keep] * n + cols[keep]
            uniq, slot = np.unique(key, return_inverse=True)
            indptr = np.searchsorted(uniq // n, np.arange(n + 1))
            self._pattern = (keep, slot, uniq % n, indptr, len(uniq))
        return self._pattern

    def assemble(self, stress: np.ndarray, tangent: np.ndarray | None = None, weights=None):
        """Reduce integration-point stress and tangent to the unknowns.

        Parameters
        ----------
        stress : (n_points, 3)
        tangent : (n_points, 3, 3), optional
        weights : (n_points,), optional
            Replaces the quadrature weights ``w * detJ``.

        Returns
        -------
        dict with ``r`` (n,), ``fE`` (3,) and, if ``tangent`` is given,
        ``K`` (csr n x n), ``KqE`` (n, 3), ``KEE`` (3, 3).
        ``fE`` and the E-blocks are zero when the map has no affine part.
        """
        n = self.dofmap.n
        W = self.gp_W if weights is None else weights
        r = np.zeros(n + 1)
        fE = np.zeros(3)
        out = {}
        k_all = []
        KqE = np.zeros((n + 1, 3))
        KEE = np.zeros((3, 3))
        for b in self.blocks:
            sl = b["gp"]
            nel, ngp = b["W"].shape
            w = W[sl].reshape(nel, ngp)
            s = stress[sl].reshape(nel, ngp, 3)
            fe = np.einsum("eg,egij,egi->ej", w, b["B"], s)
            r += np.bincount(b["edof"].reshape(-1), weights=fe.reshape(-1), minlength=n + 1)
            if b["edofE"] is not None:
                fE += np.einsum("ejk,ej->k", b["edofE"], fe)
            if tangent is not None:
                C = tangent[sl].reshape(nel, ngp, 3, 3)
                CB = np.einsum("egij,egjk->egik", C, b["B"])
                ke = np.einsum("eg,egia,egib->eab", w, b["B"], CB)
                k_all.append(ke.reshape(-1))
                if b["edofE"] is not None:
                    kE = ke @ b["edofE"]  # (nel, ndofe, 3)
                    for c in range(3):
                        KqE[:, c] += np.bincount(b["edof"].reshape(-1), weights=kE[..., c].reshape(-1),
                                                 minlength=n + 1)
                    KEE += np.einsum("eak,eal->kl", b["edofE"], kE)
        out["r"] = r[:n]
        out["fE"] = fE
        if tangent is not None:
            keep, slot, indices, indptr, nnz = self._sparsity()
            data = np.bincount(slot, weights=np.concatenate(k_all)[keep], minlength=nnz)
            out["K"] = sp.csr_matrix((data, indices, indptr), shape=(n, n))
            out["KqE"] = KqE[:n]
            out["KEE"] = KEE
        return out

    def element_sums(self, values: np.ndarray) -> np.ndarray:
        """Sum weighted point values per element: ``sum_g W_g v_g``."""
        values = np.asarray(values)
        shape = values.shape[1:]
        flat = (self.gp_W.reshape((-1,) + (1,) * len(shape)) * values).reshape(self.n_points, -1)
        out = np.zeros((self.mesh.n_elements, flat.shape[1]))
        np.add.at(out, self.gp_elem, flat)
        return out.reshape((self.mesh.n_elements,) + shape)


def element_force_stiffness(coords, elem_type: str, material, state: dict, u_e, dt: float = 0.0):
    """Internal force, stiffness and integrals of a single element.

    Returns
    -------
    f : (2 nn,) element internal force
    k : (2 nn, 2 nn) tangent stiffness
    new_state : dict
        Updated point states (trial, not committed).
    integrals : dict
        ``volume``, ``strain`` and ``stress`` (integrated Voigt vectors),
        ``power`` (integrated stress-power increment) and ``energy``.
    """
    coords = np.asarray(coords, dtype=float)
    rule = gauss_rule(elem_type)
    Bs, ws = [], []
    for xi, w in zip(rule.points, rule.weights):
        B, det = b_matrix(coords, elem_type, xi)
        Bs.append(B)
        ws.append(w * det)
    B = np.array(Bs)
    W = np.array(ws)
    eps = np.einsum("gij,j->gi", B, np.asarray(u_e, dtype=float))
    from .materials import MaterialError

    try:
        res = material.update(eps, state, dt)
    except MaterialError as exc:
        raise MaterialError(f"{exc} (element point {getattr(exc, 'index', '?')})") from exc
    f = np.einsum("g,gij,gi->j", W, B, res.stress)
    k = np.einsum("g,gia,gij,gjb->ab", W, B, res.tangent, B)
    power = res.stress * (eps - state["eps"])
    integrals = dict(volume=W.sum(), strain=W @ eps, stress=W @ res.stress,
                     power=float(W @ power.sum(axis=1)), energy=float(W @ res.psi))
    return f, k, res.state, integrals


@dataclass
class GlobalSystem:
    residual: np.ndarray
    stiffness: sp.csr_matrix
    states: list
    element_integrals: dict


def assemble(mesh: Mesh, materials: dict, states: list | None, u, dt: float = 0.0,
             disc: Discretization | None = None) -> GlobalSystem:
    """Global internal force and tangent of an unconstrained mesh.

    ``materials`` maps material id to a material object; ``states`` is the
    list returned by :func:`init_states` (one dict per material group).
    """
    disc = disc if disc is not None else Discretization(mesh)
    if states is None:
        states = init_states(disc, materials)
    eps = disc.strains(u)
    out = evaluate_points(disc, materials, states, eps, dt)
    sysm = disc.assemble(out["stress"], out["tangent"])
    integ = dict(
        volume=disc.element_volume,
        strain=disc.element_sums(eps),
        stress=disc.element_sums(out["stress"]),
        power=disc.element_sums(out["power"]),
        energy=disc.element_sums(out["psi"]),
    )
    return GlobalSystem(sysm["r"], sysm["K"], out["states"], integ)


def material_groups(gp_mat: np.ndarray, materials: dict):
    """``[(mat_id, material, point indices), ...]`` in ascending id order."""
    groups = []
    for mid in sorted(set(int(m) for m in np.unique(gp_mat))):
        if mid not in materials:
            raise KeyError(f"no material for id {mid}")
        groups.append((mid, materials[mid], np.flatnonzero(gp_mat == mid)))
    return groups


def init_states(disc: Discretization, materials: dict, batch: tuple = ()) -> list:
    return [mat.init_state(batch + (len(idx),)) for _, mat, idx in material_groups(disc.gp_mat, materials)]


def evaluate_points(disc_or_mat, materials: dict, states: list, eps: np.ndarray, dt: float, groups=None):
    """Run the constitutive update at every point, grouped by material.

    ``eps`` has shape ``batch + (n_points, 3)``; point states are dicts of
    arrays with leading shape ``batch + (n_group,)``.
    """
    if groups is None:
        groups = material_groups(disc_or_mat.gp_mat, materials)
    shape = eps.shape[:-1]
    stress = np.empty(shape + (3,))
    tangent = np.empty(shape + (3, 3))
    psi = np.empty(shape)
    power = np.empty(shape)
    new_states = []
    for (_, mat, idx), st in zip(groups, states):
        e = eps[..., idx, :]
        lead = e.shape[:-1]
        flat_state = {k: v.reshape((-1,) + v.shape[len(lead):]) for k, v in st.items()}
        res = mat.update(e.reshape(-1, 3), flat_state, dt)
        stress[..., idx, :] = res.stress.reshape(lead + (3,))
        tangent[..., idx, :, :] = res.tangent.reshape(lead + (3, 3))
        psi[..., idx] = res.psi.reshape(lead)
        power[..., idx] = np.sum(res.stress * (e.reshape(-1, 3) - flat_state["eps"]), axis=1).reshape(lead)
        new_states.append({k: v.reshape(lead + v.shape[1:]) for k, v in res.state.items()})
    return dict(stress=stress, tangent=tangent, psi=psi, power=power, states=new_states)
