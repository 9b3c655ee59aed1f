"""Reference refinement selectors: estimator-driven, oracle, and controls.

zz: refines the leaf whose recovered-gradient error indicator is largest.
The indicator needs only the mesh and the discrete field, never the target,
so it is deployable; the recovery averages the discontinuous gradient's
per-leaf limits at every node location (hanging nodes included via all
leaves whose closure contains the point) and measures the L2 mismatch
between recovered and raw gradient per leaf.

true_error: refines the leaf with the largest exact local error; requires
the target function, so it is an evaluation-only oracle.

greedy_optimal: one-step lookahead over every valid action (including
do-nothing) by simulating each candidate step and taking the argmin of the
resulting global error; evaluation-only and expensive.

random: uniform over valid refine actions.  no_refine: always do nothing.

Ties in argmax/argmin selectors break to the lowest element id (do-nothing
wins greedy ties).
"""

from __future__ import annotations

import numpy as np

from .basis import FEField, lagrange_derivs, lagrange_values
from .env import RefineEnv


def zz_indicator(field: FEField) -> np.ndarray:
    """Per-leaf recovered-gradient error indicators (truth-free)."""
    mesh, basis = field.mesh, field.basis
    p = basis.p
    n = mesh.n_leaves
    n1 = p + 1
    nlx, nly = p * mesh.fine_nx, p * mesh.fine_ny   # node-lattice extent per axis

    # integer node keys on the finest node lattice, per (leaf, b, a)
    shift = mesh.d_max - mesh.depth
    ar = np.arange(n1, dtype=np.int64)
    KX = (mesh.ix[:, None] * p + ar[None, :]) << shift[:, None]
    KY = (mesh.iy[:, None] * p + ar[None, :]) << shift[:, None]
    kx = np.broadcast_to(KX[:, None, :], (n, n1, n1)).ravel()
    ky = np.broadcast_to(KY[:, :, None], (n, n1, n1)).ravel()
    if mesh.periodic:
        kx = kx % nlx
        ky = ky % nly
    code = ky * np.int64(nlx + 1) + kx
    uniq, inv = np.unique(code, return_inverse=True)
    ukx = uniq % (nlx + 1)
    uky = uniq // (nlx + 1)

    # the up-to-4 finest cells meeting each node; -1 marks out-of-domain
    def side_cells(k, extent_nodes):
        if mesh.periodic:
            return ((k - 1) % extent_nodes) // p, k // p
        lo = np.where(k > 0, (k - 1) // p, -1)
        hi = np.where(k < extent_nodes, k // p, -1)
        return lo, hi

    cxl, cxh = side_cells(ukx, nlx)
    cyl, cyh = side_cells(uky, nly)
    u_cnt = len(uniq)
    cand = np.full((u_cnt, 4), -1, dtype=np.int64)
    combos = ((cxl, cyl), (cxl, cyh), (cxh, cyl), (cxh, cyh))
    for col, (cx, cy) in enumerate(combos):
        ok = (cx >= 0) & (cy >= 0)
        cand[ok, col] = mesh._leaf_map[cx[ok], cy[ok]]
    cand.sort(axis=1)
    first = np.ones_like(cand, dtype=bool)
    first[:, 1:] = cand[:, 1:] != cand[:, :-1]
    keep = first & (cand >= 0)
    node_of, _ = np.nonzero(keep)
    leaf_of = cand[keep]

    # per-(node, leaf) gradient of that leaf's polynomial at the node point
    x0, y0, hx, hy = mesh.leaf_boxes()
    px = ukx[node_of] / float(nlx)
    py = uky[node_of] / float(nly)
    if mesh.periodic:
        # nodes on the seam belong to wrapped leaves; shift into the leaf box
        px = px + np.rint((x0[leaf_of] + hx[leaf_of] / 2 - px))
        py = py + np.rint((y0[leaf_of] + hy[leaf_of] / 2 - py))
    tx = (px - x0[leaf_of]) / hx[leaf_of]
    ty = (py - y0[leaf_of]) / hy[leaf_of]
    Lx = lagrange_values(basis.nodes, tx)
    Ly = lagrange_values(basis.nodes, ty)
    Dx = lagrange_derivs(basis.nodes, tx)
    Dy = lagrange_derivs(basis.nodes, ty)
    C = field.coeffs[leaf_of]
    gx = np.einsum("pba,pb,pa->p", C, Ly, Dx) / hx[leaf_of]
    gy = np.einsum("pba,pb,pa->p", C, Dy, Lx) / hy[leaf_of]

    sums = np.zeros((u_cnt, 2))
    np.add.at(sums, node_of, np.stack([gx, gy], axis=1))
    counts = np.bincount(node_of, minlength=u_cnt).astype(np.float64)
    means = sums / counts[:, None]

    R = means[inv].reshape(n, n1, n1, 2)     # recovered nodal gradients per leaf
    Vg, Dg, gw = basis.Vg, basis.Dg, basis.gw
    Gx = np.einsum("nba,gb,ha->ngh", R[..., 0], Vg, Vg)
    Gy = np.einsum("nba,gb,ha->ngh", R[..., 1], Vg, Vg)
    ux = np.einsum("nba,gb,ha->ngh", field.coeffs, Vg, Dg) / hx[:, None, None]
    uy = np.einsum("nba,gb,ha->ngh", field.coeffs, Dg, Vg) / hy[:, None, None]
    per = np.einsum("ngh,g,h->n", (Gx - ux) ** 2 + (Gy - uy) ** 2, gw, gw)
    return np.sqrt(hx * hy * per)


def _refinable(env: RefineEnv) -> np.ndarray:
    ok = np.asarray(env.mesh.depth < env.mesh.d_max)
    if env.budget_left <= 0:
        ok = np.zeros_like(ok)
    return ok


def _argmax_lowest_id(scores: np.ndarray, valid: np.ndarray, ids: np.ndarray) -> int:
    """Action for the best-scoring valid element; ties pick the lowest id."""
    if not valid.any():
        return 0
    masked = np.where(valid, scores, -np.inf)
    best = masked.max()
    tied = np.flatnonzero(masked == best)
    pos = tied[np.argmin(ids[tied])]
    return int(pos) + 1


def zz_select(env: RefineEnv) -> int:
    eta = zz_indicator(env.field)
    return _argmax_lowest_id(eta, _refinable(env), env.mesh.ids)


def true_error_select(env: RefineEnv) -> int:
    truth = env._reference(env.t)
    err = env.field.element_errors(truth)
    return _argmax_lowest_id(err, _refinable(env), env.mesh.ids)


def greedy_optimal_select(env: RefineEnv) -> int:
    valid = _refinable(env)
    best_action = 0
    best_e = env.peek_error(0)
    best_id = None
    for pos in np.flatnonzero(valid):
        e = env.peek_error(int(pos) + 1)
        eid = int(env.mesh.ids[pos])
        if e < best_e or (e == best_e and best_id is not None and eid < best_id):
            best_action, best_e, best_id = int(pos) + 1, e, eid
    return best_action


def random_select(env: RefineEnv, rng: np.random.Generator) -> int:
    valid = np.flatnonzero(_refinable(env))
    if len(valid) == 0:
        return 0
    return int(rng.choice(valid)) + 1


def no_refine_select(env: RefineEnv) -> int:
    return 0


BASELINES = ("zz", "true-error", "greedy-optimal", "random", "no-refine")


def make_selector(name: str):
    """A uniform (env, obs, rng) -> action callable for the eval harness."""
    if name == "zz":
        return lambda env, obs, rng: zz_select(env)
    if name == "true-error":
        return lambda env, obs, rng: true_error_select(env)
    if name == "greedy-optimal":
        return lambda env, obs, rng: greedy_optimal_select(env)
    if name == "random":
        return lambda env, obs, rng: random_select(env, rng)
    if name == "no-refine":
        return lambda env, obs, rng: 0
    raise ValueError(f"unknown baseline {name!r}; choose from {BASELINES}")
