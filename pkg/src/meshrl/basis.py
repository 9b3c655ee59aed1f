"""Broken tensor-product Lagrange elements on quadtree meshes.

Every leaf carries its own (p+1) x (p+1) grid of equispaced nodes on the
closed reference square; no continuity is imposed across faces.  Fields are
stored as per-leaf nodal coefficient grids C[n, b, a] where b indexes the
y-node and a the x-node.  Integrals use tensor-product Gauss-Legendre
quadrature with q points per axis (default q = p + 2), exact for polynomials
of per-axis degree <= 2q - 1: in particular (u - v)^2 for two fields of
degree p is integrated exactly.

Transfers to a refined mesh evaluate the parent polynomial at the child
nodes, which reproduces the parent exactly because the child spaces are
nested.
"""

from __future__ import annotations

import numpy as np

from .mesh import MeshError, QuadMesh


def gauss_legendre(q: int):
    """Nodes and weights of q-point Gauss-Legendre quadrature on [0, 1]."""
    t, w = np.polynomial.legendre.leggauss(q)
    return (t + 1.0) / 2.0, w / 2.0


def lagrange_values(nodes: np.ndarray, x) -> np.ndarray:
    """Values of all cardinal Lagrange polynomials at x.

    Returns shape x.shape + (len(nodes),).  Exactly cardinal: at x == nodes[j]
    the j-th value is exactly 1 and the others exactly 0.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(nodes)
    out = np.ones(x.shape + (n,))
    for j in range(n):
        for m in range(n):
            if m != j:
                out[..., j] *= (x - nodes[m]) / (nodes[j] - nodes[m])
    return out


def lagrange_derivs(nodes: np.ndarray, x) -> np.ndarray:
    """Derivatives of all cardinal Lagrange polynomials at x."""
    x = np.asarray(x, dtype=np.float64)
    n = len(nodes)
    out = np.zeros(x.shape + (n,))
    for j in range(n):
        for m in range(n):
            if m == j:
                continue
            term = np.full(x.shape, 1.0 / (nodes[j] - nodes[m]))
            for l in range(n):
                if l != j and l != m:
                    term = term * ((x - nodes[l]) / (nodes[j] - nodes[l]))
            out[..., j] += term
    return out


class Basis:
    """Reference-element operators for degree p with q-point quadrature."""

    def __init__(self, p: int = 2, q: int | None = None):
        if p < 1:
            raise ValueError(f"degree must be >= 1, got {p}")
        self.p = p
        self.q = p + 2 if q is None else q
        self.nodes = np.arange(p + 1, dtype=np.float64) / p
        self.gx, self.gw = gauss_legendre(self.q)
        self.Vg = lagrange_values(self.nodes, self.gx)   # (q, p+1)
        self.Dg = lagrange_derivs(self.nodes, self.gx)   # (q, p+1)
        self.int_1d = self.gw @ self.Vg                  # (p+1,) exact node integrals
        self.mass_1d = np.einsum("g,gi,gj->ij", self.gw, self.Vg, self.Vg)
        # conv_1d[i, j] = integral of L_i * L_j' over [0, 1]
        self.conv_1d = np.einsum("g,gi,gj->ij", self.gw, self.Vg, self.Dg)

    def node_grid(self, mesh: QuadMesh):
        """Physical node coordinates X, Y of shape (N, p+1, p+1) (b, a order)."""
        x0, y0, hx, hy = mesh.leaf_boxes()
        X = x0[:, None, None] + hx[:, None, None] * self.nodes[None, None, :]
        Y = y0[:, None, None] + hy[:, None, None] * self.nodes[None, :, None]
        n = mesh.n_leaves
        shape = (n, self.p + 1, self.p + 1)
        return np.broadcast_to(X, shape).copy(), np.broadcast_to(Y, shape).copy()


_basis_cache: dict[tuple[int, int], Basis] = {}


def get_basis(p: int = 2, q: int | None = None) -> Basis:
    key = (p, p + 2 if q is None else q)
    if key not in _basis_cache:
        _basis_cache[key] = Basis(*key)
    return _basis_cache[key]


class FEField:
    """A broken piecewise-polynomial field tied to one mesh state."""

    def __init__(self, mesh: QuadMesh, coeffs: np.ndarray, basis: Basis):
        n1 = basis.p + 1
        if coeffs.shape != (mesh.n_leaves, n1, n1):
            raise MeshError(f"coefficient shape {coeffs.shape} does not match "
                            f"({mesh.n_leaves}, {n1}, {n1})")
        self.mesh = mesh
        self.coeffs = coeffs
        self.basis = basis

    def copy(self) -> "FEField":
        return FEField(self.mesh, self.coeffs.copy(), self.basis)

    def eval(self, x, y) -> np.ndarray:
        """Pointwise values; points must lie in [0, 1]^2."""
        x = np.asarray(x, dtype=np.float64)
        shape = x.shape
        xf = x.ravel()
        yf = np.asarray(y, dtype=np.float64).ravel()
        k = self.mesh.locate(xf, yf)
        x0, y0, hx, hy = self.mesh.leaf_boxes()
        Lx = lagrange_values(self.basis.nodes, (xf - x0[k]) / hx[k])
        Ly = lagrange_values(self.basis.nodes, (yf - y0[k]) / hy[k])
        u = np.einsum("pba,pb,pa->p", self.coeffs[k], Ly, Lx)
        return u.reshape(shape)

    def grad(self, x, y):
        """Pointwise gradient (du/dx, du/dy)."""
        x = np.asarray(x, dtype=np.float64)
        shape = x.shape
        xf = x.ravel()
        yf = np.asarray(y, dtype=np.float64).ravel()
        k = self.mesh.locate(xf, yf)
        x0, y0, hx, hy = self.mesh.leaf_boxes()
        tx = (xf - x0[k]) / hx[k]
        ty = (yf - y0[k]) / hy[k]
        Lx = lagrange_values(self.basis.nodes, tx)
        Ly = lagrange_values(self.basis.nodes, ty)
        Dx = lagrange_derivs(self.basis.nodes, tx)
        Dy = lagrange_derivs(self.basis.nodes, ty)
        ux = np.einsum("pba,pb,pa->p", self.coeffs[k], Ly, Dx) / hx[k]
        uy = np.einsum("pba,pb,pa->p", self.coeffs[k], Dy, Lx) / hy[k]
        return ux.reshape(shape), uy.reshape(shape)

    def transfer_to(self, new_mesh: QuadMesh) -> "FEField":
        """Re-express the field on a refinement of its current mesh.

        Each new leaf must be contained in exactly one current leaf; children
        receive the parent polynomial evaluated at their own nodes, so the
        represented function is unchanged.  Leaves common to both meshes get
        a verbatim coefficient copy.
        """
        old = self.mesh
        if (new_mesh.base_nx != old.base_nx or new_mesh.base_ny != old.base_ny
                or new_mesh.d_max != old.d_max):
            raise MeshError("transfer target must share base dimensions and d_max")
        p = self.basis.p
        shift = old.d_max - new_mesh.depth
        ka = old._leaf_map[new_mesh.ix << shift, new_mesh.iy << shift].astype(np.int64)
        kd = new_mesh.depth - old.depth[ka]
        if np.any(kd < 0):
            raise MeshError("transfer target is coarser than the source somewhere")
        out = np.empty((new_mesh.n_leaves, p + 1, p + 1))
        same = kd == 0
        if same.any():
            out[same] = self.coeffs[ka[same]]
        deep = ~same
        if deep.any():
            ks = ka[deep]
            kds = kd[deep]
            denom = (p * (1 << kds)).astype(np.float64)[:, None]
            rx = new_mesh.ix[deep] - (old.ix[ks] << kds)
            ry = new_mesh.iy[deep] - (old.iy[ks] << kds)
            a = np.arange(p + 1)
            tx = (rx[:, None] * p + a[None, :]) / denom
            ty = (ry[:, None] * p + a[None, :]) / denom
            Lx = lagrange_values(self.basis.nodes, tx)  # (M, p+1, p+1): [n, a', i]
            Ly = lagrange_values(self.basis.nodes, ty)
            out[deep] = np.einsum("nji,nbj,nai->nba", self.coeffs[ks], Ly, Lx)
        return FEField(new_mesh, out, self.basis)

    # -- integrals --------------------------------------------------------

    def _values_on_boxes(self, x0, y0, hx, hy):
        """Field values on the Gauss grid of axis-aligned boxes.

        Each box must lie inside a single leaf.  Returns (U, X, Y) with
        shapes (B, q, q), (B, q), (B, q); U[n, g, h] pairs y-point g with
        x-point h.
        """
        b = self.basis
        X = x0[:, None] + b.gx[None, :] * hx[:, None]
        Y = y0[:, None] + b.gx[None, :] * hy[:, None]
        k = self.mesh.locate(x0 + hx / 2, y0 + hy / 2)
        mx0, my0, mhx, mhy = self.mesh.leaf_boxes()
        Lx = lagrange_values(b.nodes, (X - mx0[k][:, None]) / mhx[k][:, None])
        Ly = lagrange_values(b.nodes, (Y - my0[k][:, None]) / mhy[k][:, None])
        U = np.einsum("nji,ngj,nhi->ngh", self.coeffs[k], Ly, Lx)
        return U, X, Y

    def l2_error_on(self, f, quad_mesh: QuadMesh) -> float:
        """L2 distance to a callable, integrated over quad_mesh's leaves.

        quad_mesh must be the field's own mesh or a refinement of it; using a
        common finer mesh makes errors of fields on different meshes directly
        comparable in the same discrete norm.
        """
        x0, y0, hx, hy = quad_mesh.leaf_boxes()
        U, X, Y = self._values_on_boxes(x0, y0, hx, hy)
        F = f(X[:, None, :], Y[:, :, None])
        gw = self.basis.gw
        per = np.einsum("ngh,g,h->n", (U - F) ** 2, gw, gw)
        return float(np.sqrt((hx * hy) @ per))

    def l2_error(self, f) -> float:
        """L2 distance to a callable on the field's own mesh quadrature."""
        return self.l2_error_on(f, self.mesh)

    def element_errors(self, f) -> np.ndarray:
        """Per-leaf L2 distances to a callable, in state order."""
        b = self.basis
        x0, y0, hx, hy = self.mesh.leaf_boxes()
        U = np.einsum("nba,gb,ha->ngh", self.coeffs, b.Vg, b.Vg)
        X = x0[:, None] + b.gx[None, :] * hx[:, None]
        Y = y0[:, None] + b.gx[None, :] * hy[:, None]
        F = f(X[:, None, :], Y[:, :, None])
        per = np.einsum("ngh,g,h->n", (U - F) ** 2, b.gw, b.gw)
        return np.sqrt(hx * hy * per)

    def l2_norm(self) -> float:
        gw = self.basis.gw
        Vg = self.basis.Vg
        U = np.einsum("nba,gb,ha->ngh", self.coeffs, Vg, Vg)
        _, _, hx, hy = self.mesh.leaf_boxes()
        return float(np.sqrt((hx * hy) @ np.einsum("ngh,g,h->n", U ** 2, gw, gw)))

    def integral(self) -> float:
        iL = self.basis.int_1d
        _, _, hx, hy = self.mesh.leaf_boxes()
        return float((hx * hy) @ np.einsum("nba,b,a->n", self.coeffs, iL, iL))


def interpolate(mesh: QuadMesh, f, basis: Basis | None = None) -> FEField:
    """Nodal interpolant of a callable f(x, y) (must accept arrays)."""
    basis = basis or get_basis()
    X, Y = basis.node_grid(mesh)
    return FEField(mesh, np.asarray(f(X, Y), dtype=np.float64), basis)


def l2_diff(fa: FEField, fb: FEField) -> float:
    """L2 norm of fa - fb for fields on meshes from the same base family.

    Integration runs over the overlay partition (the locally finer of the two
    leaf partitions), where both restrictions are plain polynomials, so the
    quadrature is exact and the triangle inequality holds at machine
    precision.
    """
    ma, mb = fa.mesh, fb.mesh
    if (ma.base_nx != mb.base_nx or ma.base_ny != mb.base_ny or ma.d_max != mb.d_max):
        raise MeshError("fields live on incompatible mesh families")
    A = ma._leaf_map.ravel().astype(np.int64)
    B = mb._leaf_map.ravel().astype(np.int64)
    pairs = np.unique(A * mb.n_leaves + B)
    ka = pairs // mb.n_leaves
    kb = pairs % mb.n_leaves
    ax0, ay0, ahx, ahy = ma.leaf_boxes()
    bx0, by0, bhx, bhy = mb.leaf_boxes()
    use_a = ma.depth[ka] >= mb.depth[kb]
    x0 = np.where(use_a, ax0[ka], bx0[kb])
    y0 = np.where(use_a, ay0[ka], by0[kb])
    hx = np.where(use_a, ahx[ka], bhx[kb])
    hy = np.where(use_a, ahy[ka], bhy[kb])
    Ua, _, _ = fa._values_on_boxes(x0, y0, hx, hy)
    Ub, _, _ = fb._values_on_boxes(x0, y0, hx, hy)
    gw = fa.basis.gw
    per = np.einsum("ngh,g,h->n", (Ua - Ub) ** 2, gw, gw)
    return float(np.sqrt((hx * hy) @ per))
