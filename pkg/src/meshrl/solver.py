"""Discontinuous Galerkin constant-velocity advection on quadtree meshes.

Solves u_t + div(c u) = 0 with periodic boundaries on the broken
tensor-product Lagrange space of the mesh.  Fluxes are upwind; hanging faces
are integrated per shared sub-segment, so nonconforming interfaces need no
special casing.  Because the velocity is constant the whole semidiscrete
right-hand side is a sparse matrix, assembled once per mesh state and
cached; each SSP-RK3 stage is then a single sparse matrix-vector product.

Time stepping subdivides a requested duration into equal substeps of at most
cfl * h_min / (|c| (2p + 1)).
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from .basis import Basis, FEField, lagrange_values
from .mesh import QuadMesh


def assemble_operator(mesh: QuadMesh, basis: Basis, velocity) -> sp.csr_matrix:
    """The semidiscrete operator A with du/dt = A u (flat leaf-major dofs)."""
    cx, cy = float(velocity[0]), float(velocity[1])
    key = (mesh.version, basis.p, basis.q, cx, cy)
    cached = getattr(mesh, "_solver_cache", None)
    if cached is not None and cached[0] == key:
        return cached[1]

    p = basis.p
    n1 = p + 1
    npl = n1 * n1
    n = mesh.n_leaves
    ndof = n * npl
    x0, y0, hx, hy = mesh.leaf_boxes()
    gw, gx = basis.gw, basis.gx
    nodes = basis.nodes

    rows_all, cols_all, vals_all = [], [], []
    bb, aa = np.meshgrid(np.arange(n1), np.arange(n1), indexing="ij")
    local = (bb * n1 + aa).ravel()

    # volume terms: for each leaf, cx*hy*(M1 kron G^T) + cy*hx*(G^T kron M1),
    # where G[c, a] = conv_1d[c, a] = integral of L_c * L_a'
    GT = basis.conv_1d.T  # GT[a, c] = integral of L_c L_a'
    M1 = basis.mass_1d
    vol = (cx * np.kron(M1, GT)[None, :, :] * hy[:, None, None]
           + cy * np.kron(GT, M1)[None, :, :] * hx[:, None, None])
    base = (np.arange(n, dtype=np.int64) * npl)[:, None, None]
    shape = (n, npl, npl)
    rows_all.append(np.broadcast_to(base + local[None, :, None], shape).ravel())
    cols_all.append(np.broadcast_to(base + local[None, None, :], shape).ravel())
    vals_all.append(vol.ravel())

    faces = mesh.faces()

    def face_blocks(sideA, sideB, c0, c1, axis_len, speed, along_axis):
        """Flux blocks for one face family.

        sideA/sideB: leaf positions on the negative/positive side of the face
        normal; c0/c1: lattice bounds of the segment along the face; speed is
        the velocity component along the normal; along_axis selects which box
        coordinate varies along the face ('y' for vertical faces).
        """
        s_lo = c0 / axis_len
        s_len = (c1 - c0) / axis_len
        Sg = s_lo[:, None] + gx[None, :] * s_len[:, None]  # (S, q) face points
        if along_axis == "y":
            tA = (Sg - y0[sideA][:, None]) / hy[sideA][:, None]
            tB = (Sg - y0[sideB][:, None]) / hy[sideB][:, None]
            edgeA, edgeB = p, 0        # x-node index on the shared edge
            def dof(leaf, along, across):
                return leaf[:, None] * npl + along * n1 + across
        else:
            tA = (Sg - x0[sideA][:, None]) / hx[sideA][:, None]
            tB = (Sg - x0[sideB][:, None]) / hx[sideB][:, None]
            edgeA, edgeB = p, 0        # y-node index on the shared edge
            def dof(leaf, along, across):
                return leaf[:, None] * npl + across * n1 + along
        TA = lagrange_values(nodes, tA)  # (S, q, p+1)
        TB = lagrange_values(nodes, tB)
        if speed >= 0:
            Tup, up_leaf, up_edge = TA, sideA, edgeA
        else:
            Tup, up_leaf, up_edge = TB, sideB, edgeB
        along_idx = np.arange(n1)
        colsU = dof(up_leaf, along_idx[None, :], up_edge)        # (S, p+1)
        rowsA = dof(sideA, along_idx[None, :], edgeA)
        rowsB = dof(sideB, along_idx[None, :], edgeB)
        wseg = speed * s_len
        blkA = np.einsum("g,sgb,sgd->sbd", gw, TA, Tup) * wseg[:, None, None]
        blkB = np.einsum("g,sgb,sgd->sbd", gw, TB, Tup) * wseg[:, None, None]
        S = len(s_lo)
        r = np.concatenate([np.repeat(rowsA, n1, axis=1).ravel(),
                            np.repeat(rowsB, n1, axis=1).ravel()])
        c = np.concatenate([np.tile(colsU, (1, n1)).ravel(),
                            np.tile(colsU, (1, n1)).ravel()])
        v = np.concatenate([blkA.ravel(), -blkB.ravel()])
        return r, c, v

    if cx != 0.0:
        w, e, _, j0, j1 = faces["v"]
        if len(w):
            r, c, v = face_blocks(w, e, j0, j1, float(mesh.fine_ny), cx, "y")
            rows_all.append(r); cols_all.append(c); vals_all.append(-v)
    if cy != 0.0:
        s, nn, _, i0, i1 = faces["h"]
        if len(s):
            r, c, v = face_blocks(s, nn, i0, i1, float(mesh.fine_nx), cy, "x")
            rows_all.append(r); cols_all.append(c); vals_all.append(-v)

    R = sp.coo_matrix((np.concatenate(vals_all),
                       (np.concatenate(rows_all), np.concatenate(cols_all))),
                      shape=(ndof, ndof)).tocsr()

    Minv1 = np.linalg.inv(M1)
    Mb = np.kron(Minv1, Minv1)
    blocks = Mb[None, :, :] / (hx * hy)[:, None, None]
    D = sp.bsr_matrix((blocks, np.arange(n), np.arange(n + 1)), shape=(ndof, ndof))
    A = (D @ R).tocsr()
    A.sum_duplicates()
    mesh._solver_cache = (key, A)
    return A


def stable_dt(mesh: QuadMesh, p: int, velocity, cfl: float = 0.3) -> float:
    speed = math.hypot(float(velocity[0]), float(velocity[1]))
    if speed == 0.0:
        return math.inf
    _, _, hx, hy = mesh.leaf_boxes()
    h_min = min(hx.min(), hy.min())
    return cfl * h_min / (speed * (2 * p + 1))


def advance(field: FEField, velocity, duration: float, cfl: float = 0.3) -> tuple[FEField, int]:
    """Advance the field by `duration` with SSP-RK3 in equal substeps.

    Returns the advanced field (on the same mesh) and the substep count.
    """
    if duration == 0.0:
        return field.copy(), 0
    mesh, basis = field.mesh, field.basis
    if not mesh.periodic:
        raise ValueError("advection requires a periodic mesh")
    dt_max = stable_dt(mesh, basis.p, velocity, cfl)
    if not math.isfinite(dt_max):
        return field.copy(), 0
    n_sub = max(1, math.ceil(duration / dt_max))
    dt = duration / n_sub
    A = assemble_operator(mesh, basis, velocity)
    u = field.coeffs.reshape(-1).copy()
    for _ in range(n_sub):
        k1 = u + dt * (A @ u)
        k2 = 0.75 * u + 0.25 * (k1 + dt * (A @ k1))
        u = u / 3.0 + (2.0 / 3.0) * (k2 + dt * (A @ k2))
    return FEField(mesh, u.reshape(field.coeffs.shape), basis), n_sub
