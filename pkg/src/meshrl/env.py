"""The budgeted mesh-refinement decision process.

An episode fixes a randomly sampled target function and runs for exactly
`budget` steps.  Each step the agent either refines one leaf (action i
refines the element at state position i-1) or does nothing (action 0).
Static episodes re-interpolate the target on the new mesh after every
refinement; advecting episodes transfer the running DG solution onto the new
mesh and then advance it by a fixed wall-clock interval, so refinement
decisions pay off over the remaining transport.

Rewards are per-step reductions of the approximation error, normalized by
the initial error, or optionally an error-free surrogate: the L2 distance
between the post-step solutions with and without the chosen refinement.

Observations are per-element 24 x 24 x 2 tensors: channel 0 samples the
current solution on a cell-centered grid covering the element plus a
4-point halo per side, channel 1 holds the owning leaf's depth / d_max at
those sample points.  Row 0 of the observation stack is an all-zero dummy
for the do-nothing action.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import solver
from .basis import FEField, get_basis, interpolate, l2_diff
from .functions import ADVECTION_FAMILIES, FAMILIES, TargetFn, sample_target
from .mesh import AdjacencyGraph, QuadMesh


@dataclass
class EnvConfig:
    mode: str = "static"                 # "static" or "advection"
    family: str = "bumps"
    base_nx: int = 8
    base_ny: int = 8
    d_max: int = 3
    budget: int = 10
    p: int = 2
    q: Optional[int] = None              # quadrature points per axis, default p + 2
    velocity: tuple = (1.0, 0.0)
    rl_step_time: float = 0.1
    cfl: float = 0.3
    reward: str = "true"                 # "true" or "surrogate"
    mask_invalid: bool = True
    steps2_rotation_fix: bool = False
    l_element: int = 16                  # interior sample points per axis
    l_context: int = 4                   # halo sample points per side
    build_obs: bool = True

    def __post_init__(self):
        if self.mode not in ("static", "advection"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.mode == "advection" and self.family not in ADVECTION_FAMILIES:
            raise ValueError(f"family {self.family!r} is static-only")
        if self.reward not in ("true", "surrogate"):
            raise ValueError(f"unknown reward kind {self.reward!r}")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")

    @property
    def obs_size(self) -> int:
        return self.l_element + 2 * self.l_context

    @property
    def periodic(self) -> bool:
        return self.mode == "advection"

    @property
    def max_leaves(self) -> int:
        return (1 << (2 * self.d_max)) * self.base_nx * self.base_ny


@dataclass
class Observation:
    """Per-element tensors plus masks and adjacency, in state order."""

    tensors: np.ndarray          # (N+1, s, s, 2), row 0 is the dummy action
    valid: np.ndarray            # (N+1,) bool; action 0 always valid
    mask: np.ndarray             # (N+1,) bool mask applied by policies
    graph: AdjacencyGraph
    ids: np.ndarray              # (N,) element ids in state order
    t: int
    budget_left: int

    @property
    def n_actions(self) -> int:
        return len(self.valid)


@dataclass
class StepResult:
    obs: Observation
    reward: float
    done: bool
    info: dict = dc_field(default_factory=dict)


class RefineEnv:
    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.basis = get_basis(cfg.p, cfg.q)
        self.mesh: QuadMesh | None = None
        self.field: FEField | None = None
        self.target: TargetFn | None = None

    # -- episode control --------------------------------------------------

    def reset(self, seed) -> Observation:
        """Start an episode; seed may be an int or a SeedSequence."""
        cfg = self.cfg
        if isinstance(seed, np.random.SeedSequence):
            ss = seed
        else:
            ss = np.random.SeedSequence(seed)
        self.rng = np.random.Generator(np.random.Philox(ss))
        opts = {}
        if cfg.family == "steps2":
            opts["rotation_fix"] = cfg.steps2_rotation_fix
        self.target = sample_target(cfg.family, self.rng, cfg.mode, **opts)
        self.mesh = QuadMesh.new_uniform(cfg.base_nx, cfg.base_ny, cfg.d_max,
                                         periodic=cfg.periodic)
        self.field = interpolate(self.mesh, self.target, self.basis)
        self.t = 0
        self.n_refined = 0
        self.e0 = self.field.l2_error(self.target)
        self.e_prev = self.e0
        return self._observe()

    @property
    def budget_left(self) -> int:
        return self.cfg.budget - self.t

    def _reference(self, t_steps: int) -> TargetFn:
        """Exact solution after t_steps decision intervals."""
        if self.cfg.mode == "static":
            return self.target
        return self.target.advected(self.cfg.velocity, t_steps * self.cfg.rl_step_time)

    def step(self, action: int) -> StepResult:
        if self.mesh is None:
            raise RuntimeError("call reset() before step()")
        if self.t >= self.cfg.budget:
            raise RuntimeError("episode is over; call reset()")
        action = int(action)
        n = self.mesh.n_leaves
        if not 0 <= action <= n:
            raise ValueError(f"action {action} out of range [0, {n}]")

        refine = action != 0
        elem_id = None
        if refine:
            k = action - 1
            if self.mesh.depth[k] >= self.mesh.d_max:
                refine = False          # invalid choice degrades to a no-op
            else:
                elem_id = int(self.mesh.ids[k])

        cfg = self.cfg
        info = {"refined": refine, "elem_id": elem_id, "substeps": 0}
        surrogate = None

        if cfg.mode == "static":
            if refine:
                old_field = self.field
                self.mesh = self.mesh.copy()
                self.mesh.refine(elem_id)
                self.field = interpolate(self.mesh, self.target, self.basis)
                if cfg.reward == "surrogate":
                    surrogate = l2_diff(self.field, old_field)
                e_t = self.field.l2_error(self.target)
            else:
                if cfg.reward == "surrogate":
                    surrogate = 0.0
                e_t = self.e_prev
        else:
            if refine:
                new_mesh = self.mesh.copy()
                new_mesh.refine(elem_id)
                moved = self.field.transfer_to(new_mesh)
            else:
                new_mesh, moved = self.mesh, self.field
            adv, nsub = solver.advance(moved, cfg.velocity, cfg.rl_step_time, cfg.cfl)
            info["substeps"] = nsub
            if cfg.reward == "surrogate":
                if refine:
                    nr_adv, _ = solver.advance(self.field, cfg.velocity,
                                               cfg.rl_step_time, cfg.cfl)
                    surrogate = l2_diff(adv, nr_adv)
                else:
                    surrogate = 0.0
            self.mesh, self.field = new_mesh, adv
            e_t = self.field.l2_error(self._reference(self.t + 1))

        if refine:
            self.n_refined += 1
        self.t += 1
        reward = surrogate if cfg.reward == "surrogate" else (self.e_prev - e_t) / self.e0
        info.update(e=e_t, e_prev=self.e_prev, e0=self.e0,
                    n_leaves=self.mesh.n_leaves, n_refined=self.n_refined)
        self.e_prev = e_t
        done = self.t >= cfg.budget
        return StepResult(self._observe(), float(reward), done, info)

    def peek_error(self, action: int) -> float:
        """The error this step would end with, without touching env state.

        Evaluation-only helper for lookahead baselines; mirrors step()'s
        transition (including the solver advance in advecting mode) on
        copies.
        """
        if self.mesh is None:
            raise RuntimeError("call reset() before peek_error()")
        action = int(action)
        n = self.mesh.n_leaves
        if not 0 <= action <= n:
            raise ValueError(f"action {action} out of range [0, {n}]")
        refine = action != 0 and self.mesh.depth[action - 1] < self.mesh.d_max
        if self.cfg.mode == "static":
            if not refine:
                return self.e_prev
            mesh2 = self.mesh.copy()
            mesh2.refine(int(self.mesh.ids[action - 1]))
            return interpolate(mesh2, self.target, self.basis).l2_error(self.target)
        if refine:
            mesh2 = self.mesh.copy()
            mesh2.refine(int(self.mesh.ids[action - 1]))
            moved = self.field.transfer_to(mesh2)
        else:
            moved = self.field
        adv, _ = solver.advance(moved, self.cfg.velocity, self.cfg.rl_step_time,
                                self.cfg.cfl)
        return adv.l2_error(self._reference(self.t + 1))

    # -- observations -----------------------------------------------------

    def _observe(self) -> Observation:
        cfg = self.cfg
        mesh = self.mesh
        n = mesh.n_leaves
        valid = np.ones(n + 1, dtype=bool)
        valid[1:] = (mesh.depth < mesh.d_max) & (self.budget_left > 0)
        mask = valid if cfg.mask_invalid else np.ones(n + 1, dtype=bool)
        s = cfg.obs_size
        if cfg.build_obs:
            tensors = np.zeros((n + 1, s, s, 2))
            tensors[1:] = self._element_tensors()
        else:
            tensors = np.zeros((n + 1, s, s, 2))
        return Observation(tensors, valid, mask, mesh.adjacency_graph(),
                           mesh.ids.copy(), self.t, self.budget_left)

    def _element_tensors(self) -> np.ndarray:
        """(N, s, s, 2) sample grids; index [i, row, col] is (y, x) order."""
        cfg = self.cfg
        mesh = self.mesh
        n = mesh.n_leaves
        s = cfg.obs_size
        x0, y0, hx, hy = mesh.leaf_boxes()
        offs = (np.arange(s) - cfg.l_context + 0.5)
        X = x0[:, None] + (hx / cfg.l_element)[:, None] * offs[None, :]     # (N, s)
        Y = y0[:, None] + (hy / cfg.l_element)[:, None] * offs[None, :]
        Xg = np.broadcast_to(X[:, None, :], (n, s, s))
        Yg = np.broadcast_to(Y[:, :, None], (n, s, s))
        if cfg.periodic:
            Xq = np.mod(Xg, 1.0)
            Yq = np.mod(Yg, 1.0)
            outside = None
        else:
            Xq = np.clip(Xg, 0.0, 1.0)
            Yq = np.clip(Yg, 0.0, 1.0)
            outside = (Xg < 0.0) | (Xg > 1.0) | (Yg < 0.0) | (Yg > 1.0)
        out = np.empty((n, s, s, 2))
        out[..., 0] = self.field.eval(Xq, Yq)
        k = mesh.locate(Xq.ravel(), Yq.ravel()).reshape(n, s, s)
        depth = mesh.depth[k] / max(mesh.d_max, 1)
        if outside is not None:
            depth = np.where(outside, 0.0, depth)
        out[..., 1] = depth
        return out

    # -- bookkeeping for replays and baselines ----------------------------

    def episode_snapshot(self) -> dict:
        return {
            "config": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in vars(self.cfg).items()},
            "target": {"family": self.target.family, "params": self.target.params},
            "mesh": self.mesh.to_snapshot(),
            "t": self.t,
            "e0": self.e0,
            "e": self.e_prev,
        }
