"""Quadtree mesh of quadrilateral elements on the unit square.

The mesh starts as a uniform base_nx x base_ny grid of depth-0 elements and
supports isotropic h-refinement: a leaf splits into 4 children at depth+1, up
to a fixed maximum depth d_max.  Leaves are kept in a deterministic state
order (children spliced in place of their parent as SW, SE, NW, NE) and carry
ids that are never reused.

Internally the leaf partition is mirrored onto the finest possible lattice
(2^d_max * base_nx by 2^d_max * base_ny cells), which makes point location,
neighbor queries, and face extraction cheap vectorized array operations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class MeshError(Exception):
    pass


class NotALeaf(MeshError):
    """The referenced id does not identify a current leaf element."""


class AtMaxDepth(MeshError):
    """The leaf is already at maximum refinement depth."""


class Element(NamedTuple):
    id: int
    depth: int
    ix: int
    iy: int


class RefineResult(NamedTuple):
    child_ids: tuple[int, int, int, int]


class FaceSegment(NamedTuple):
    """A shared face interval, seen from one element.

    side is one of 'E', 'W', 'N', 'S'; lo/hi bound the interval along the
    face (y for vertical faces, x for horizontal ones); coord is the position
    of the face line on the other axis, measured on this element's boundary.
    """

    side: str
    coord: float
    lo: float
    hi: float

    @property
    def length(self) -> float:
        return self.hi - self.lo


@dataclass
class AdjacencyGraph:
    """Symmetric directed adjacency between leaves in state order.

    senders/receivers index into node_ids (state order), and each directed
    edge carries a one-hot encoding of depth(receiver) - depth(sender) over
    the range [-d_max, d_max].
    """

    node_ids: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    edge_onehot: np.ndarray

    @property
    def n_edges(self) -> int:
        return len(self.senders)


class QuadMesh:
    def __init__(self, base_nx: int, base_ny: int, d_max: int, periodic: bool = False):
        if base_nx < 1 or base_ny < 1:
            raise MeshError(f"base dimensions must be positive, got {base_nx}x{base_ny}")
        if d_max < 0:
            raise MeshError(f"d_max must be non-negative, got {d_max}")
        self.base_nx = base_nx
        self.base_ny = base_ny
        self.d_max = d_max
        self.periodic = periodic
        self.fine_nx = base_nx << d_max
        self.fine_ny = base_ny << d_max
        self.version = 0

        n = base_nx * base_ny
        self.ids = np.arange(n, dtype=np.int64)
        self.depth = np.zeros(n, dtype=np.int64)
        # row-major: leaf k is (ix, iy) = (k % base_nx, k // base_nx)
        self.ix = np.arange(n, dtype=np.int64) % base_nx
        self.iy = np.arange(n, dtype=np.int64) // base_nx
        self._next_id = n
        self._rebuild_index()
        self._rebuild_leaf_map()
        self._faces = None

    @classmethod
    def new_uniform(cls, base_nx: int, base_ny: int, d_max: int, periodic: bool = False) -> "QuadMesh":
        return cls(base_nx, base_ny, d_max, periodic)

    # -- bookkeeping ------------------------------------------------------

    def _rebuild_index(self):
        self._index = {int(i): k for k, i in enumerate(self.ids)}

    def _rebuild_leaf_map(self):
        self._leaf_map = np.empty((self.fine_nx, self.fine_ny), dtype=np.int32)
        for k in range(self.n_leaves):
            self._fill_leaf_map(k)

    def _fill_leaf_map(self, k: int):
        shift = self.d_max - int(self.depth[k])
        i0 = int(self.ix[k]) << shift
        j0 = int(self.iy[k]) << shift
        w = 1 << shift
        self._leaf_map[i0:i0 + w, j0:j0 + w] = k

    @property
    def n_leaves(self) -> int:
        return len(self.ids)

    @property
    def leaves(self) -> list[Element]:
        return [Element(int(self.ids[k]), int(self.depth[k]), int(self.ix[k]), int(self.iy[k]))
                for k in range(self.n_leaves)]

    def element(self, elem_id: int) -> Element:
        k = self.index_of(elem_id)
        return Element(elem_id, int(self.depth[k]), int(self.ix[k]), int(self.iy[k]))

    def index_of(self, elem_id: int) -> int:
        try:
            return self._index[int(elem_id)]
        except KeyError:
            raise NotALeaf(f"id {elem_id} is not a current leaf") from None

    def is_leaf(self, elem_id: int) -> bool:
        return int(elem_id) in self._index

    def can_refine(self, elem_id: int) -> bool:
        return self.is_leaf(elem_id) and int(self.depth[self.index_of(elem_id)]) < self.d_max

    def leaf_boxes(self):
        """(x0, y0, hx, hy) arrays over leaves in state order."""
        scale = (1 << self.depth.astype(np.int64)).astype(np.float64)
        hx = 1.0 / (scale * self.base_nx)
        hy = 1.0 / (scale * self.base_ny)
        return self.ix * hx, self.iy * hy, hx, hy

    def copy(self) -> "QuadMesh":
        m = QuadMesh.__new__(QuadMesh)
        m.base_nx, m.base_ny = self.base_nx, self.base_ny
        m.d_max, m.periodic = self.d_max, self.periodic
        m.fine_nx, m.fine_ny = self.fine_nx, self.fine_ny
        m.version = self.version
        m.ids = self.ids.copy()
        m.depth = self.depth.copy()
        m.ix = self.ix.copy()
        m.iy = self.iy.copy()
        m._next_id = self._next_id
        m._index = dict(self._index)
        m._leaf_map = self._leaf_map.copy()
        m._faces = self._faces
        return m

    # -- refinement -------------------------------------------------------

    def refine(self, elem_id: int) -> RefineResult:
        k = self.index_of(elem_id)
        d = int(self.depth[k])
        if d >= self.d_max:
            raise AtMaxDepth(f"leaf {elem_id} is at depth {d} = d_max")
        cx, cy = 2 * int(self.ix[k]), 2 * int(self.iy[k])
        # children in SW, SE, NW, NE order, spliced at the parent position
        child_ix = np.array([cx, cx + 1, cx, cx + 1], dtype=np.int64)
        child_iy = np.array([cy, cy, cy + 1, cy + 1], dtype=np.int64)
        child_ids = np.arange(self._next_id, self._next_id + 4, dtype=np.int64)
        self._next_id += 4

        self.ids = np.concatenate([self.ids[:k], child_ids, self.ids[k + 1:]])
        self.depth = np.concatenate([self.depth[:k], np.full(4, d + 1, dtype=np.int64), self.depth[k + 1:]])
        self.ix = np.concatenate([self.ix[:k], child_ix, self.ix[k + 1:]])
        self.iy = np.concatenate([self.iy[:k], child_iy, self.iy[k + 1:]])

        self._rebuild_index()
        self._leaf_map[self._leaf_map > k] += 3
        for c in range(4):
            self._fill_leaf_map(k + c)
        self.version += 1
        self._faces = None
        return RefineResult(tuple(int(c) for c in child_ids))

    # -- geometry queries -------------------------------------------------

    def locate(self, x, y):
        """Leaf position index owning each point.

        Ownership follows the half-open convention [x0, x1) x [y0, y1),
        closed on the domain's top/right boundary.  Points must already lie
        in [0, 1]^2 (wrap or clamp beforehand).
        """
        i = np.clip(np.floor(np.asarray(x) * self.fine_nx).astype(np.int64), 0, self.fine_nx - 1)
        j = np.clip(np.floor(np.asarray(y) * self.fine_ny).astype(np.int64), 0, self.fine_ny - 1)
        return self._leaf_map[i, j].astype(np.int64)

    def _face_runs(self, a: np.ndarray, b: np.ndarray, lines: np.ndarray, wrap_mask: np.ndarray):
        """Merge lattice-cell face entries into maximal constant-pair runs.

        a, b: leaf positions on either side, shape (n_lines, n_cells);
        lines: line index per row; wrap_mask: rows where a==b still counts
        (periodic self-adjacency of 1-wide meshes).
        Returns (left, right, line, c0, c1) arrays of merged runs in lattice
        units along the face.
        """
        n_lines, n_cells = a.shape
        valid = a != b
        if wrap_mask.any():
            valid = valid | wrap_mask[:, None]
        idx = np.flatnonzero(valid.ravel())
        if idx.size == 0:
            z = np.zeros(0, dtype=np.int64)
            return z, z, z, z, z
        row = idx // n_cells
        col = idx % n_cells
        af, bf = a.ravel()[idx], b.ravel()[idx]
        brk = np.ones(idx.size, dtype=bool)
        brk[1:] = (row[1:] != row[:-1]) | (af[1:] != af[:-1]) | (bf[1:] != bf[:-1]) | (col[1:] != col[:-1] + 1)
        starts = np.flatnonzero(brk)
        ends = np.append(starts[1:], idx.size)
        return (af[starts].astype(np.int64), bf[starts].astype(np.int64),
                lines[row[starts]].astype(np.int64), col[starts].astype(np.int64),
                col[ends - 1].astype(np.int64) + 1)

    def faces(self):
        """All interior face segments of the mesh, merged to maximal runs.

        Returns a dict with two groups:
          'v': (west, east, line_i, j0, j1)  vertical faces; lattice units
          'h': (south, north, line_j, i0, i1) horizontal faces
        Periodic meshes include the wrap faces (line index 0).
        """
        if self._faces is not None:
            return self._faces
        lm = self._leaf_map
        # vertical faces between columns line-1 | line
        if self.periodic:
            lines_v = np.arange(self.fine_nx, dtype=np.int64)
            left = lm[lines_v - 1, :]
            right = lm[lines_v, :]
            wrap_v = lines_v == 0
        else:
            lines_v = np.arange(1, self.fine_nx, dtype=np.int64)
            left = lm[lines_v - 1, :]
            right = lm[lines_v, :]
            wrap_v = np.zeros(len(lines_v), dtype=bool)
        v = self._face_runs(left, right, lines_v, wrap_v)

        if self.periodic:
            lines_h = np.arange(self.fine_ny, dtype=np.int64)
            south = lm[:, lines_h - 1].T
            north = lm[:, lines_h].T
            wrap_h = lines_h == 0
        else:
            lines_h = np.arange(1, self.fine_ny, dtype=np.int64)
            south = lm[:, lines_h - 1].T
            north = lm[:, lines_h].T
            wrap_h = np.zeros(len(lines_h), dtype=bool)
        h = self._face_runs(south, north, lines_h, wrap_h)
        self._faces = {"v": v, "h": h}
        return self._faces

    def face_neighbors(self, elem_id: int) -> list[tuple[int, FaceSegment]]:
        k = self.index_of(elem_id)
        fx, fy = float(self.fine_nx), float(self.fine_ny)
        scale = 1 << int(self.depth[k])
        x0 = int(self.ix[k]) / (scale * self.base_nx)
        x1 = (int(self.ix[k]) + 1) / (scale * self.base_nx)
        y0 = int(self.iy[k]) / (scale * self.base_ny)
        y1 = (int(self.iy[k]) + 1) / (scale * self.base_ny)
        out = []
        fv = self.faces()
        w, e, line, j0, j1 = fv["v"]
        for m in np.flatnonzero((w == k) | (e == k)):
            lo, hi = j0[m] / fy, j1[m] / fy
            if w[m] == k:
                out.append((int(self.ids[e[m]]), FaceSegment("E", x1, lo, hi)))
            if e[m] == k:
                out.append((int(self.ids[w[m]]), FaceSegment("W", x0, lo, hi)))
        s, n, line, i0, i1 = fv["h"]
        for m in np.flatnonzero((s == k) | (n == k)):
            lo, hi = i0[m] / fx, i1[m] / fx
            if s[m] == k:
                out.append((int(self.ids[n[m]]), FaceSegment("N", y1, lo, hi)))
            if n[m] == k:
                out.append((int(self.ids[s[m]]), FaceSegment("S", y0, lo, hi)))
        return out

    def adjacency_graph(self) -> AdjacencyGraph:
        fv = self.faces()
        w, e, _, _, _ = fv["v"]
        s, n, _, _, _ = fv["h"]
        a = np.concatenate([w, s])
        b = np.concatenate([e, n])
        keep = a != b  # periodic self-faces are not graph edges
        a, b = a[keep], b[keep]
        senders = np.concatenate([a, b])
        receivers = np.concatenate([b, a])
        if senders.size:
            codes = senders * np.int64(self.n_leaves) + receivers
            _, first = np.unique(codes, return_index=True)
            first.sort()
            senders, receivers = senders[first], receivers[first]
        width = 2 * self.d_max + 1
        diff = self.depth[receivers] - self.depth[senders]
        onehot = np.zeros((len(senders), width))
        onehot[np.arange(len(senders)), diff + self.d_max] = 1.0
        return AdjacencyGraph(self.ids.copy(), senders, receivers, onehot)

    # -- serialization ----------------------------------------------------

    def to_snapshot(self) -> dict:
        return {
            "base_nx": self.base_nx,
            "base_ny": self.base_ny,
            "d_max": self.d_max,
            "periodic": self.periodic,
            "leaves": [{"id": int(i), "depth": int(d), "ix": int(x), "iy": int(y)}
                       for i, d, x, y in zip(self.ids, self.depth, self.ix, self.iy)],
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> "QuadMesh":
        m = cls(snap["base_nx"], snap["base_ny"], snap["d_max"], snap["periodic"])
        leaves = snap["leaves"]
        m.ids = np.array([e["id"] for e in leaves], dtype=np.int64)
        m.depth = np.array([e["depth"] for e in leaves], dtype=np.int64)
        m.ix = np.array([e["ix"] for e in leaves], dtype=np.int64)
        m.iy = np.array([e["iy"] for e in leaves], dtype=np.int64)
        m._next_id = int(m.ids.max()) + 1 if len(m.ids) else 0
        m._rebuild_index()
        m._rebuild_leaf_map()
        m._faces = None
        return m

    def to_json(self) -> str:
        return json.dumps(self.to_snapshot())

    def __repr__(self):
        return (f"QuadMesh({self.base_nx}x{self.base_ny}, d_max={self.d_max}, "
                f"periodic={self.periodic}, leaves={self.n_leaves})")
