"""Unstructured 2D triangle mesh and its extrusion into prism columns.

Triangles are CCW.  Local edge k of a triangle joins local vertices k and
(k+1) % 3 and carries the outward normal (dy, -dx)/len computed from the
element's own traversal of the edge, so the two sides of a shared edge hold
exactly negated normal vectors.

Columns are the triangles themselves; each column is divided into layers
following the free surface and the bed (sigma coordinates).  Prism p of
column c at layer l (0 = surface layer) has index p = offset[c] + l.  Prism
nodes 0..2 sit on the top face, 3..5 on the bottom face, node k % 3 above /
below triangle vertex k % 3.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import (
    DegenerateLayer,
    DryColumn,
    NonConforming,
    NonPositiveArea,
    NonPositiveLength,
)

BTAG_INTERIOR = 0
BTAG_WALL = 1
BTAG_OPEN = 2


@dataclass
class Mesh2D:
    vx: np.ndarray          # (nv,) vertex x
    vy: np.ndarray          # (nv,) vertex y
    vb: np.ndarray          # (nv,) bed elevation (negative below datum)
    tri: np.ndarray         # (nt, 3) vertex ids, CCW
    # derived, filled by _finish()
    x: np.ndarray = None    # (nt, 3) nodal coordinates
    y: np.ndarray = None
    b: np.ndarray = None
    j2d: np.ndarray = None  # (nt,) = 2 * area
    dphx: np.ndarray = None  # (nt, 3) d(phi_h)/dx
    dphy: np.ndarray = None
    nbr: np.ndarray = None   # (nt, 3) neighbour element id, -1 at boundary
    nbrk: np.ndarray = None  # (nt, 3) neighbour's local edge id
    btag: np.ndarray = None  # (nt, 3) boundary tag per local edge
    elen: np.ndarray = None  # (nt, 3) edge lengths
    enx: np.ndarray = None   # (nt, 3) outward normal per local edge
    eny: np.ndarray = None
    hilbert_perm: np.ndarray = None  # new-id -> old-id after reordering

    @property
    def nt(self) -> int:
        return self.tri.shape[0]

    @property
    def nv(self) -> int:
        return self.vx.shape[0]

    @property
    def area(self) -> np.ndarray:
        return 0.5 * self.j2d

    @property
    def min_edge(self) -> float:
        return float(self.elen.min())

    def n_interior_edges(self) -> int:
        return int(np.count_nonzero(self.nbr >= 0)) // 2

    def n_edges(self) -> int:
        nb = int(np.count_nonzero(self.nbr < 0))
        return self.n_interior_edges() + nb

    def _finish(self) -> "Mesh2D":
        t = self.tri
        self.x = self.vx[t]
        self.y = self.vy[t]
        self.b = self.vb[t]
        x, y = self.x, self.y
        self.j2d = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
        if np.any(self.j2d <= 0.0):
            bad = int(np.argmin(self.j2d))
            raise NonPositiveArea(f"triangle {bad} has signed area {self.j2d[bad] / 2.0:g}")
        # grad(phi_i) = ((y_j - y_k), (x_k - x_j)) / J2D with (i, j, k) cyclic
        jn = np.array([1, 2, 0])
        kn = np.array([2, 0, 1])
        self.dphx = (y[:, jn] - y[:, kn]) / self.j2d[:, None]
        self.dphy = (x[:, kn] - x[:, jn]) / self.j2d[:, None]
        # edges
        ex = x[:, EDGE_V1_] - x[:, EDGE_V0_]
        ey = y[:, EDGE_V1_] - y[:, EDGE_V0_]
        self.elen = np.hypot(ex, ey)
        if np.any(self.elen <= 0.0):
            raise NonPositiveLength("zero-length edge")
        self.enx = ey / self.elen
        self.eny = -ex / self.elen
        self._build_adjacency()
        if self.hilbert_perm is None:
            self.hilbert_perm = np.arange(self.nt)
        return self

    def _build_adjacency(self):
        nt = self.nt
        self.nbr = np.full((nt, 3), -1, dtype=np.int64)
        self.nbrk = np.full((nt, 3), -1, dtype=np.int64)
        self.btag = np.full((nt, 3), BTAG_WALL, dtype=np.int64)
        seen = {}
        for e in range(nt):
            for k in range(3):
                a = self.tri[e, EDGE_V0_[k]]
                bvert = self.tri[e, EDGE_V1_[k]]
                key = (min(a, bvert), max(a, bvert))
                if key in seen:
                    e2, k2 = seen.pop(key)
                    self.nbr[e, k] = e2
                    self.nbrk[e, k] = k2
                    self.nbr[e2, k2] = e
                    self.nbrk[e2, k2] = k
                    self.btag[e, k] = BTAG_INTERIOR
                    self.btag[e2, k2] = BTAG_INTERIOR
                else:
                    seen[key] = (e, k)

    def astype(self, dtype) -> "Mesh2D":
        m = replace(self)
        for name in ("vx", "vy", "vb", "x", "y", "b", "j2d", "dphx", "dphy", "elen", "enx", "eny"):
            setattr(m, name, getattr(self, name).astype(dtype))
        return m


EDGE_V0_ = np.array([0, 1, 2])
EDGE_V1_ = np.array([1, 2, 0])


def make_mesh(vx, vy, vb, tri) -> Mesh2D:
    m = Mesh2D(
        vx=np.asarray(vx, dtype=float),
        vy=np.asarray(vy, dtype=float),
        vb=np.asarray(vb, dtype=float),
        tri=np.asarray(tri, dtype=np.int64),
    )
    return m._finish()


def generate_basin_mesh(nx, ny, lx, ly, bed: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Mesh2D:
    """Structured triangulation of [0, lx] x [0, ly]: 2 nx ny CCW triangles.

    `bed` maps (x, y) arrays to bed elevation (negative below the datum).
    All boundary edges are tagged as closed walls.
    """
    if nx < 1 or ny < 1:
        raise NonPositiveArea("nx and ny must be >= 1")
    if lx <= 0.0 or ly <= 0.0:
        raise NonPositiveArea("lx and ly must be positive")
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    vx = gx.ravel()
    vy = gy.ravel()
    vb = np.asarray(bed(vx, vy), dtype=float)

    def vid(i, j):
        return j * (nx + 1) + i

    tris = []
    for j in range(ny):
        for i in range(nx):
            v00 = vid(i, j)
            v10 = vid(i + 1, j)
            v11 = vid(i + 1, j + 1)
            v01 = vid(i, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return make_mesh(vx, vy, vb, np.array(tris, dtype=np.int64))


# ---------------------------------------------------------------------------
# Hilbert ordering
# ---------------------------------------------------------------------------


def _hilbert_index(order: int, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    """Distance along the Hilbert curve of a 2^order x 2^order grid."""
    ix = ix.astype(np.int64).copy()
    iy = iy.astype(np.int64).copy()
    n = np.int64(1) << order
    d = np.zeros_like(ix)
    s = n >> 1
    while s > 0:
        rx = ((ix & s) > 0).astype(np.int64)
        ry = ((iy & s) > 0).astype(np.int64)
        d += s * s * ((3 * rx) ^ ry)
        # rotate the quadrant: mirror where the curve runs backwards, then swap
        rot = ry == 0
        neg = rot & (rx == 1)
        ix[neg] = (n - 1) - ix[neg]
        iy[neg] = (n - 1) - iy[neg]
        tmp = ix[rot].copy()
        ix[rot] = iy[rot]
        iy[rot] = tmp
        s >>= 1
    return d


def hilbert_reorder(mesh: Mesh2D, order: int = 16) -> Mesh2D:
    """Reorder triangles along a Hilbert curve over their centroids.

    Idempotent: reordering an already ordered mesh keeps the order (the sort
    is stable).  Only the triangle numbering changes; vertices are untouched.
    Field arrays built for the old mesh must be permuted with `hilbert_perm`.
    """
    cx = mesh.x.mean(axis=1)
    cy = mesh.y.mean(axis=1)
    n = np.int64(1) << order
    span_x = max(cx.max() - cx.min(), 1e-300)
    span_y = max(cy.max() - cy.min(), 1e-300)
    ix = np.minimum((n - 1), ((cx - cx.min()) / span_x * (n - 1)).astype(np.int64))
    iy = np.minimum((n - 1), ((cy - cy.min()) / span_y * (n - 1)).astype(np.int64))
    d = _hilbert_index(order, ix, iy)
    perm = np.argsort(d, kind="stable")
    out = make_mesh(mesh.vx, mesh.vy, mesh.vb, mesh.tri[perm])
    out.hilbert_perm = perm
    return out


def mesh_locality(mesh: Mesh2D) -> float:
    """Mean |i - j| over interior edges; lower means better memory locality."""
    e, k = np.nonzero(mesh.nbr >= 0)
    j = mesh.nbr[e, k]
    keep = e < j
    if not np.any(keep):
        return 0.0
    return float(np.abs(e[keep] - j[keep]).mean())


# ---------------------------------------------------------------------------
# mesh file I/O (PRISMDG-MESH 1)
# ---------------------------------------------------------------------------


def write_mesh(path, mesh: Mesh2D) -> None:
    with open(path, "w") as f:
        f.write("PRISMDG-MESH 1\n")
        f.write(f"{mesh.nv} {mesh.nt}\n")
        for i in range(mesh.nv):
            f.write(f"{mesh.vx[i]!r} {mesh.vy[i]!r} {mesh.vb[i]!r}\n")
        for e in range(mesh.nt):
            f.write(f"{mesh.tri[e, 0]} {mesh.tri[e, 1]} {mesh.tri[e, 2]}\n")


def read_mesh(path) -> Mesh2D:
    with open(path) as f:
        header = f.readline().split()
        if header[:2] != ["PRISMDG-MESH", "1"]:
            raise ValueError(f"not a PRISMDG-MESH 1 file: {path}")
        nv, nt = (int(tok) for tok in f.readline().split())
        vx = np.empty(nv)
        vy = np.empty(nv)
        vb = np.empty(nv)
        for i in range(nv):
            toks = f.readline().split()
            vx[i], vy[i], vb[i] = float(toks[0]), float(toks[1]), float(toks[2])
        tri = np.empty((nt, 3), dtype=np.int64)
        for e in range(nt):
            tri[e] = [int(tok) for tok in f.readline().split()]
    return make_mesh(vx, vy, vb, tri)


# ---------------------------------------------------------------------------
# layer policy and extrusion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerPolicy:
    """Layer counts per column.

    mode "uniform": every column gets `count` layers.
    mode "by-depth": `table` is a sequence of (min_depth, count) rows sorted by
    min_depth; a column picks the count of the deepest row its maximum depth
    reaches.  Counts must agree across every interior edge (the discretisation
    assumes conforming layer interfaces), otherwise extrusion raises
    NonConforming.
    """

    mode: str = "uniform"
    count: int = 1
    table: tuple = ()

    def counts(self, mesh: Mesh2D, eta=None) -> np.ndarray:
        if self.mode == "uniform":
            return np.full(mesh.nt, self.count, dtype=np.int64)
        if self.mode != "by-depth":
            raise ValueError(f"unknown layer policy mode '{self.mode}'")
        eta_arr = np.zeros((mesh.nt, 3)) if eta is None else np.asarray(eta)
        depth = (eta_arr - mesh.b).max(axis=1)
        counts = np.full(mesh.nt, self.count, dtype=np.int64)
        for dmin, cnt in sorted(self.table):
            counts[depth >= dmin] = int(cnt)
        return counts


@dataclass
class ColumnGrid:
    """Geometry of the extruded prism columns for one free-surface snapshot."""

    mesh: Mesh2D
    layers: np.ndarray       # (nt,) layer count per column
    offsets: np.ndarray      # (nt + 1,) prism row offset per column
    fracs: np.ndarray        # (L + 1,) sigma fractions, 0 = surface, 1 = bed
    eta: np.ndarray          # (nt, 3) free surface this grid was built from
    z: np.ndarray            # (P, 6) nodal z
    jz: np.ndarray           # (P, 3) half thickness per corner
    w_m: np.ndarray          # (P, 6) nodal mesh velocity
    # per-prism horizontal gradients (constant per prism, P1 data)
    dzmid: np.ndarray = None  # (P, 2) grad_h of (z_top + z_bot)/2
    djz: np.ndarray = None    # (P, 2) grad_h of Jz
    dztop: np.ndarray = None  # (P, 2) grad_h of the top face
    dzbot: np.ndarray = None  # (P, 2) grad_h of the bottom face

    @property
    def n_prisms(self) -> int:
        return self.z.shape[0]

    @property
    def n_layers(self) -> int:
        # uniform after the conformity check
        return int(self.layers[0]) if self.layers.size else 0

    @property
    def depth(self) -> np.ndarray:
        """(nt, 3) water depth H = eta - b."""
        return self.eta - self.mesh.b

    def column_slice(self, c: int) -> slice:
        return slice(self.offsets[c], self.offsets[c + 1])

    def _finish(self) -> "ColumnGrid":
        mesh = self.mesh
        L = self.n_layers
        nt = mesh.nt
        zt = self.z[:, 0:3]
        zb = self.z[:, 3:6]
        zmid = 0.5 * (zt + zb)
        dphx = np.repeat(mesh.dphx, L, axis=0)
        dphy = np.repeat(mesh.dphy, L, axis=0)
        self.dzmid = np.stack([(zmid * dphx).sum(axis=1), (zmid * dphy).sum(axis=1)], axis=-1)
        self.djz = np.stack([(self.jz * dphx).sum(axis=1), (self.jz * dphy).sum(axis=1)], axis=-1)
        self.dztop = np.stack([(zt * dphx).sum(axis=1), (zt * dphy).sum(axis=1)], axis=-1)
        self.dzbot = np.stack([(zb * dphx).sum(axis=1), (zb * dphy).sum(axis=1)], axis=-1)
        return self


def _check_conforming(mesh: Mesh2D, counts: np.ndarray) -> None:
    e, k = np.nonzero(mesh.nbr >= 0)
    j = mesh.nbr[e, k]
    bad = counts[e] != counts[j]
    if np.any(bad):
        i = int(np.argmax(bad))
        raise NonConforming(
            f"columns {e[i]} and {j[i]} share an edge but have "
            f"{counts[e[i]]} vs {counts[j[i]]} layers"
        )


def extrude(mesh: Mesh2D, policy: LayerPolicy, eta=None) -> ColumnGrid:
    """Build the sigma column grid for free surface `eta` (default 0).

    Interface l (0..L) of column c sits at  z = eta - frac_l (eta - b)
    per corner, so frac_0 = 0 is the surface and frac_L = 1 the bed.
    """
    nt = mesh.nt
    eta = np.zeros((nt, 3)) if eta is None else np.asarray(eta, dtype=float)
    counts = policy.counts(mesh, eta)
    _check_conforming(mesh, counts)
    if counts.size and counts.min() != counts.max():
        raise NonConforming("layer counts differ between mesh components")
    depth = eta - mesh.b
    if np.any(depth <= 0.0):
        c = int(np.argmin(depth.min(axis=1)))
        raise DryColumn(c, float(depth[c].min()))
    L = int(counts[0])
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    fracs = np.linspace(0.0, 1.0, L + 1)
    # interface z per column corner: (nt, L+1, 3)
    zi = eta[:, None, :] - fracs[None, :, None] * depth[:, None, :]
    zt = zi[:, :-1, :].reshape(nt * L, 3)
    zb = zi[:, 1:, :].reshape(nt * L, 3)
    z = np.concatenate([zt, zb], axis=1)
    jz = 0.5 * (zt - zb)
    if np.any(jz <= 0.0):
        raise DegenerateLayer("non-positive layer thickness after extrusion")
    grid = ColumnGrid(
        mesh=mesh,
        layers=counts,
        offsets=offsets,
        fracs=fracs,
        eta=eta.copy(),
        z=z,
        jz=jz,
        w_m=np.zeros((nt * L, 6)),
    )
    return grid._finish()


def update_moving_mesh(grid: ColumnGrid, eta_new, dt: float) -> ColumnGrid:
    """New grid following eta_new, with nodal mesh velocity (z_new - z_old)/dt.

    The bed interface does not move, so w_m is exactly zero there.
    """
    policy = LayerPolicy(mode="uniform", count=grid.n_layers)
    new = extrude(grid.mesh, policy, np.asarray(eta_new, dtype=float))
    new.w_m = (new.z - grid.z) / float(dt)
    return new


def total_thickness(grid: ColumnGrid) -> np.ndarray:
    """(nt, 3) sum over layers of 2 Jz per corner (should equal eta - b)."""
    nt = grid.mesh.nt
    L = grid.n_layers
    return 2.0 * grid.jz.reshape(nt, L, 3).sum(axis=1)
