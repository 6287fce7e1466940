"""Structured mesh generators for beams and square RVEs."""
from __future__ import annotations

import numpy as np

from .fem import Mesh


def _grid_nodes(x0, y0, lx, ly, nx, ny, order):
    """Node array of a structured grid and an index function."""
    mx, my = order * nx + 1, order * ny + 1
    xs = x0 + np.linspace(0.0, lx, mx)
    ys = y0 + np.linspace(0.0, ly, my)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return j * mx + i

    return nodes, nid


def rectangle(lx: float, ly: float, nx: int, ny: int, etype: str = "quad4", origin=(0.0, 0.0),
              mat=0) -> Mesh:
    """Structured rectangle mesh.

    ``tri3``/``tri6`` split every cell along its rising diagonal. For
    ``quad8`` the unused cell-centre nodes are dropped. ``mat`` is a constant
    id or a callable of the element centroid.
    """
    order = 2 if etype in ("tri6", "quad8") else 1
    nodes, nid = _grid_nodes(origin[0], origin[1], lx, ly, nx, ny, order)
    el = []
    for j in range(ny):
        for i in range(nx):
            a, b = order * i, order * j
            if order == 1:
                n00, n10, n11, n01 = nid(a, b), nid(a + 1, b), nid(a + 1, b + 1), nid(a, b + 1)
                if etype == "quad4":
                    el.append(("quad4", (n00, n10, n11, n01)))
                elif etype == "tri3":
                    el.append(("tri3", (n00, n10, n11)))
                    el.append(("tri3", (n00, n11, n01)))
                else:
                    raise ValueError(f"unsupported element type {etype!r}")
            else:
                c = {(p, q): nid(a + p, b + q) for p in range(3) for q in range(3)}
                if etype == "quad8":
                    el.append(("quad8", (c[0, 0], c[2, 0], c[2, 2], c[0, 2], c[1, 0], c[2, 1], c[1, 2], c[0, 1])))
                elif etype == "tri6":
                    el.append(("tri6", (c[0, 0], c[2, 0], c[2, 2], c[1, 0], c[2, 1], c[1, 1])))
                    el.append(("tri6", (c[0, 0], c[2, 2], c[0, 2], c[1, 1], c[1, 2], c[0, 1])))
                else:
                    raise ValueError(f"unsupported element type {etype!r}")
    elements = []
    for etype_, conn in el:
        m = mat(nodes[list(conn)].mean(axis=0)) if callable(mat) else mat
        elements.append((etype_, conn, int(m)))
    return compact(nodes, elements)


def compact(nodes, elements) -> Mesh:
    """Drop nodes not referenced by any element and renumber."""
    used = np.zeros(len(nodes), dtype=bool)
    for _, conn, _ in elements:
        used[list(conn)] = True
    new = -np.ones(len(nodes), dtype=np.int64)
    new[used] = np.arange(used.sum())
    return Mesh(nodes[used], [(t, tuple(int(new[v]) for v in c), m) for t, c, m in elements])


def rve_with_pore(n: int = 12, pore_radius: float = 0.18, inclusions=(((0.22, 0.22), 0.12), ((0.75, 0.7), 0.14)),
                  etype: str = "tri6", size: float = 1.0, matrix_id: int = 0, inclusion_id: int = 1) -> Mesh:
    """Square RVE with a central pore and circular stiff inclusions.

    Pore and inclusions are resolved on element centroids of a structured
    mesh, which keeps the boundary grids periodic. Inclusion geometry is in
    units of ``size``.
    """

    def which(c):
        p = c / size
        for (cx, cy), r in inclusions:
            if (p[0] - cx) ** 2 + (p[1] - cy) ** 2 < r * r:
                return inclusion_id
        return matrix_id

    base = rectangle(size, size, n, n, etype, mat=which)
    keep = []
    for t, conn, m in base.elements:
        c = base.nodes[list(conn)].mean(axis=0) / size - 0.5
        if c @ c >= pore_radius ** 2:
            keep.append((t, conn, m))
    mesh = compact(base.nodes, keep)
    lo, hi = mesh.bounding_box()
    if not (np.allclose(lo, 0.0) and np.allclose(hi, size)):
        raise ValueError("pore or inclusions cut the RVE boundary")
    return mesh
