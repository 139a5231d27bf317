"""Column-local vertical solvers.

All vertical operators couple only along a prism column, so each solve is a
small structured system per column, batched over columns (the lanes of a
cell block).  Unknowns are ordered layer-major, top layer first, the three
top-face nodes before the three bottom-face nodes of each layer.

Three operator families appear:

* the baroclinic-gradient operator (integrates downward from the surface;
  lower triangular in layers, solved by a single top-down sweep),
* the continuity operator (integrates upward from the bed; solved bottom-up),
* the implicit vertical advection-diffusion matrix (block tridiagonal-ish:
  the top three rows of a layer couple to the six nodes of the layer above,
  the bottom three rows to the layer below), eliminated layer by layer with
  a matrix working set of one 6x6 tile (36 scalars).

Every routine works in the dtype of its right-hand side, so fp32 and fp64
paths share the code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeMismatch, SingularMass, ZeroPivot
from .layout import CellBlock, cell_view

# 2D P1 mass matrix on a triangle with jacobian J2D (= 2 area):
#   Mh = (J2D / 24) [[2,1,1],[1,2,1],[1,1,2]],
#   Mh^-1 = (6 / J2D) [[3,-1,-1],[-1,3,-1],[-1,-1,3]].
MH_PATTERN = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 24.0
MH_INV_PATTERN = np.array([[3.0, -1.0, -1.0], [-1.0, 3.0, -1.0], [-1.0, -1.0, 3.0]]) * 6.0


def mh_matrix(j2d):
    """(..., 3, 3) triangle mass matrix."""
    j2d = np.asarray(j2d, dtype=float)
    return j2d[..., None, None] * MH_PATTERN


def apply_mh(values, j2d):
    """Mh @ values for values (..., 3) or (..., 3, nc); j2d broadcasts over leading dims."""
    v = np.asarray(values)
    j2d = np.asarray(j2d, dtype=v.dtype)
    vec = v.ndim >= 1 and v.shape[-1] == 3
    if not vec:
        s = v.sum(axis=-2)
        out = (v + s[..., None, :]) * (j2d[..., None, None] / 24.0)
    else:
        s = v.sum(axis=-1)
        out = (v + s[..., None]) * (j2d[..., None] / 24.0)
    return out


def apply_mh_inv(values, j2d):
    """Mh^-1 @ values; the component axis, if any, is last."""
    v = np.asarray(values)
    j2d = np.asarray(j2d, dtype=v.dtype)
    if np.any(j2d <= 0.0):
        raise SingularMass("J2D must be positive")
    if v.shape[-1] == 3:
        s = v.sum(axis=-1)
        return (4.0 * v - s[..., None]) * (6.0 / j2d)[..., None]
    s = v.sum(axis=-2)
    return (4.0 * v - s[..., None, :]) * (6.0 / j2d)[..., None, None]


def _norm_rhs(rhs):
    """Normalize to (ncol, L, 6, nc); return (arr, had_comp_axis)."""
    arr = np.asarray(rhs)
    if arr.ndim == 3:
        return arr[..., None], False
    if arr.ndim != 4 or arr.shape[2] != 6:
        raise ShapeMismatch(f"column RHS must be (ncol, L, 6[, nc]), got {arr.shape}")
    return arr, True


def _active(layers, ncol, L, dtype):
    if layers is None:
        return None
    layers = np.asarray(layers)
    mask = np.arange(L)[None, :] < layers[:, None]
    return mask.astype(dtype)


# ---------------------------------------------------------------------------
# sweep solvers
# ---------------------------------------------------------------------------


def solve_r_column(rhs, j2d, layers=None):
    """Top-down sweep for the surface-anchored operator.

    rhs: (ncol, L, 6[, nc]) weak right-hand side, j2d: (ncol,).
    Per layer (top first): g = Mh^-1 f, then with the running sum s,
        s += g_top + g_bot;  r_top = -s + 2 g_bot;  r_bot = -s.
    Layers at or below a column's `layers` count are returned as zeros.
    """
    f, had = _norm_rhs(rhs)
    ncol, L = f.shape[0], f.shape[1]
    out = np.zeros_like(f)
    act = _active(layers, ncol, L, f.dtype)
    s = np.zeros((ncol, 3, f.shape[3]), dtype=f.dtype)
    for l in range(L):
        g_t = apply_mh_inv(f[:, l, 0:3], j2d)
        g_b = apply_mh_inv(f[:, l, 3:6], j2d)
        inc = g_t + g_b
        if act is not None:
            inc = inc * act[:, l, None, None]
        s = s + inc
        r_t = -s + 2.0 * g_b
        r_b = -s
        if act is not None:
            r_t = r_t * act[:, l, None, None]
            r_b = r_b * act[:, l, None, None]
        out[:, l, 0:3] = r_t
        out[:, l, 3:6] = r_b
    return out if had else out[..., 0]


def solve_w_column(rhs, j2d, layers=None):
    """Bottom-up sweep for the bed-anchored operator.

    Per layer (bottom first): g = Mh^-1 f, then with s the top value of the
    layer below (0 at the bed),
        w_bot = s + g_bot - g_top;  w_top = s + g_bot + g_top;  s = w_top.
    """
    f, had = _norm_rhs(rhs)
    ncol, L = f.shape[0], f.shape[1]
    out = np.zeros_like(f)
    act = _active(layers, ncol, L, f.dtype)
    s = np.zeros((ncol, 3, f.shape[3]), dtype=f.dtype)
    for l in range(L - 1, -1, -1):
        g_t = apply_mh_inv(f[:, l, 0:3], j2d)
        g_b = apply_mh_inv(f[:, l, 3:6], j2d)
        w_b = s + g_b - g_t
        w_t = s + g_b + g_t
        if act is not None:
            a = act[:, l, None, None]
            w_b = w_b * a
            w_t = w_t * a
            s = np.where(a > 0, w_t, s)
        else:
            s = w_t
        out[:, l, 0:3] = w_t
        out[:, l, 3:6] = w_b
    return out if had else out[..., 0]


def assemble_dense_oracle(kind: str, layers: int, mh: np.ndarray) -> np.ndarray:
    """Literal dense form of the two sweep operators (reference only).

    kind "r": surface-anchored; kind "w": bed-anchored.  `mh` is the 3x3
    triangle mass matrix.  Unknown/equation order is layer-major, top layer
    first, top nodes before bottom nodes.
    """
    L = int(layers)
    n = 6 * L
    a = np.zeros((n, n))

    def blk(r, c, m):
        a[3 * r : 3 * r + 3, 3 * c : 3 * c + 3] += m

    if kind == "r":
        for l in range(L):
            t, b = 2 * l, 2 * l + 1
            blk(t, t, -0.5 * mh)
            blk(t, b, -0.5 * mh)
            blk(b, t, 0.5 * mh)
            blk(b, b, -0.5 * mh)
            if l > 0:
                blk(t, 2 * l - 1, mh)  # coupling to the layer above's bottom nodes
    elif kind == "w":
        for l in range(L):
            t, b = 2 * l, 2 * l + 1
            blk(t, t, 0.5 * mh)
            blk(t, b, -0.5 * mh)
            blk(b, t, 0.5 * mh)
            blk(b, b, 0.5 * mh)
            if l < L - 1:
                blk(b, 2 * (l + 1), -mh)  # coupling to the layer below's top nodes
    else:
        raise ValueError(f"unknown oracle kind '{kind}'")
    return a


# ---------------------------------------------------------------------------
# banded implicit systems
# ---------------------------------------------------------------------------


@dataclass
class BandedColumnMatrix:
    """Blocks of the implicit vertical system, batched over columns.

    d: (ncol, L, 6, 6) diagonal blocks,
    u: (ncol, L, 3, 6) coupling of a layer's top rows to the layer above,
    w: (ncol, L, 3, 6) coupling of a layer's bottom rows to the layer below.
    u[:, 0] and w[:, L-1] are ignored.  `layers` gives the active layer count
    per column; padded layers must hold identity diagonal blocks and zero
    couplings so padded lanes solve to zero.
    """

    d: np.ndarray
    u: np.ndarray
    w: np.ndarray
    layers: Optional[np.ndarray] = None

    @property
    def ncol(self) -> int:
        return self.d.shape[0]

    @property
    def nlay(self) -> int:
        return self.d.shape[1]

    def copy(self) -> "BandedColumnMatrix":
        return BandedColumnMatrix(
            d=self.d.copy(),
            u=self.u.copy(),
            w=self.w.copy(),
            layers=None if self.layers is None else self.layers.copy(),
        )


def make_identity_banded(ncol: int, nlay: int, dtype=np.float64) -> BandedColumnMatrix:
    d = np.zeros((ncol, nlay, 6, 6), dtype=dtype)
    d[:, :] = np.eye(6, dtype=dtype)
    return BandedColumnMatrix(
        d=d,
        u=np.zeros((ncol, nlay, 3, 6), dtype=dtype),
        w=np.zeros((ncol, nlay, 3, 6), dtype=dtype),
    )


def pad_banded(mat: BandedColumnMatrix) -> BandedColumnMatrix:
    """Overwrite inactive layers with identity systems (zero couplings)."""
    if mat.layers is None:
        return mat
    L = mat.nlay
    inactive = np.arange(L)[None, :] >= np.asarray(mat.layers)[:, None]
    mat.d[inactive] = np.eye(6, dtype=mat.d.dtype)
    mat.u[inactive] = 0.0
    mat.w[inactive] = 0.0
    return mat


def banded_to_dense(mat: BandedColumnMatrix, col: int) -> np.ndarray:
    L = mat.nlay
    n = 6 * L
    a = np.zeros((n, n), dtype=mat.d.dtype)
    for l in range(L):
        r0 = 6 * l
        a[r0 : r0 + 6, r0 : r0 + 6] = mat.d[col, l]
        if l > 0:
            a[r0 : r0 + 3, r0 - 6 : r0] = mat.u[col, l]
        if l < L - 1:
            a[r0 + 3 : r0 + 6, r0 + 6 : r0 + 12] = mat.w[col, l]
    return a


def _lu6_factor(a, l_idx):
    """No-pivot in-place LU of (ncol, 6, 6) blocks; raises ZeroPivot."""
    for k in range(6):
        piv = a[:, k, k]
        if np.any(piv == 0.0):
            raise ZeroPivot(l_idx, k)
        inv = 1.0 / piv
        for i in range(k + 1, 6):
            a[:, i, k] = a[:, i, k] * inv
            for j in range(k + 1, 6):
                a[:, i, j] = a[:, i, j] - a[:, i, k] * a[:, k, j]
    return a


def _lu6_solve(a, b):
    """Solve with factored blocks; b is (ncol, 6, nrhs), overwritten."""
    for i in range(1, 6):
        for j in range(i):
            b[:, i] = b[:, i] - a[:, i, j, None] * b[:, j]
    for i in range(5, -1, -1):
        for j in range(i + 1, 6):
            b[:, i] = b[:, i] - a[:, i, j, None] * b[:, j]
        b[:, i] = b[:, i] / a[:, i, i, None]
    return b


def solve_banded_column(mat: BandedColumnMatrix, rhs, overwrite: bool = False):
    """Layer-by-layer elimination of the banded vertical system.

    Forward pass, top layer first: fold the layer-above coupling into the
    diagonal block, factor it, and replace the (u, w) blocks of the layer by
    the 6x6 propagation tile G_l = Dtilde_l^-1 [0; W_l].  Backward pass:
    x_l = g_l - G_l x_{l+1}.  Only one 6x6 tile of derived matrix data is
    live at any time; everything else stays in the stored blocks.

    rhs: (ncol, L, 6[, nc]).  Returns the same shape.
    """
    f, had = _norm_rhs(rhs)
    m = mat if overwrite else mat.copy()
    ncol, L = m.ncol, m.nlay
    nc = f.shape[3]
    if f.shape[0] != ncol or f.shape[1] != L:
        raise ShapeMismatch(f"rhs shape {f.shape} does not match matrix ({ncol}, {L})")
    g = f.astype(m.d.dtype).copy()

    buf = np.empty((ncol, 6, 6), dtype=m.d.dtype)
    for l in range(L):
        buf[:] = m.d[:, l]
        if l > 0:
            gp = _g_prev(m, l - 1)  # (ncol, 6, 6) view of the stored tile
            for i in range(3):
                for j in range(6):
                    acc = np.zeros(ncol, dtype=m.d.dtype)
                    for k in range(6):
                        acc = acc + m.u[:, l, i, k] * gp[:, k, j]
                    buf[:, i, j] = buf[:, i, j] - acc
            for i in range(3):
                for c in range(nc):
                    acc = np.zeros(ncol, dtype=m.d.dtype)
                    for k in range(6):
                        acc = acc + m.u[:, l, i, k] * g[:, l - 1, k, c]
                    g[:, l, i, c] = g[:, l, i, c] - acc
        _lu6_factor(buf, l)
        if l < L - 1:
            # propagation tile: rows 0:3 come from a zero RHS block, rows 3:6 from W
            gtile = np.zeros((ncol, 6, 6), dtype=m.d.dtype)
            gtile[:, 3:6, :] = m.w[:, l]
            _lu6_solve(buf, gtile)
            m.u[:, l] = gtile[:, 0:3]
            m.w[:, l] = gtile[:, 3:6]
        _lu6_solve(buf, g[:, l])

    x = np.zeros_like(g)
    x[:, L - 1] = g[:, L - 1]
    for l in range(L - 2, -1, -1):
        gp = _g_prev(m, l)
        for i in range(6):
            for c in range(nc):
                acc = np.zeros(ncol, dtype=m.d.dtype)
                for k in range(6):
                    acc = acc + gp[:, i, k] * x[:, l + 1, k, c]
                x[:, l, i, c] = g[:, l, i, c] - acc
    return x if had else x[..., 0]


def _g_prev(m: BandedColumnMatrix, l: int):
    """The stored propagation tile of layer l as (ncol, 6, 6)."""
    return np.concatenate([m.u[:, l], m.w[:, l]], axis=1)


def apply_banded(mat: BandedColumnMatrix, x):
    """Banded matvec  y = A x  for x of shape (ncol, L, 6[, nc])."""
    f, had = _norm_rhs(x)
    ncol, L = mat.ncol, mat.nlay
    if f.shape[0] != ncol or f.shape[1] != L:
        raise ShapeMismatch(f"operand shape {f.shape} does not match matrix ({ncol}, {L})")
    y = np.einsum("clij,cljn->clin", mat.d, f)
    if L > 1:
        y[:, 1:, 0:3] += np.einsum("clij,cljn->clin", mat.u[:, 1:], f[:, :-1])
        y[:, :-1, 3:6] += np.einsum("clij,cljn->clin", mat.w[:, :-1], f[:, 1:])
    return y if had else y[..., 0]


# ---------------------------------------------------------------------------
# instrumented sequential variant (working-set proof)
# ---------------------------------------------------------------------------


@dataclass
class AccessStats:
    max_live: int = 0
    loads: int = 0
    stores: int = 0
    touched: set = field(default_factory=set)


class _Tile36:
    """A working buffer of exactly 36 scalars; refuses to grow past that."""

    def __init__(self, stats: AccessStats, dtype=np.float64):
        self.slots = np.zeros(36, dtype=dtype)
        self.live = 0
        self.stats = stats

    def load(self, block: np.ndarray, key):
        flat = block.ravel()
        if flat.size > 36:
            raise AssertionError("tile buffer overflow")
        self.slots[: flat.size] = flat
        self.live = flat.size
        self.stats.max_live = max(self.stats.max_live, self.live)
        self.stats.loads += 1
        self.stats.touched.add(key)

    def as_matrix(self):
        return self.slots.reshape(6, 6)


def solve_banded_sequential(mat: BandedColumnMatrix, rhs, col: int, stats: Optional[AccessStats] = None):
    """One-column reference elimination through an explicit 36-scalar tile.

    Performs the same arithmetic in the same order as solve_banded_column,
    so results agree bitwise.  `stats`, if given, records the maximum number
    of live working-buffer scalars and which stored blocks were touched.
    """
    f, had = _norm_rhs(rhs)
    if f.shape[0] != 1:
        raise ShapeMismatch("sequential solver expects a single-column RHS")
    stats = stats if stats is not None else AccessStats()
    L = mat.nlay
    nc = f.shape[3]
    g = f[0].astype(mat.d.dtype).copy()  # (L, 6, nc) RHS registers
    ustore = mat.u[col].copy()
    wstore = mat.w[col].copy()
    dstore = mat.d[col].copy()
    tile = _Tile36(stats, dtype=mat.d.dtype)

    def read_u(l, i, k):
        stats.touched.add(("u", l))
        return ustore[l, i, k]

    def read_w(l, i, k):
        stats.touched.add(("w", l))
        return wstore[l, i, k]

    factors = dstore  # factored diagonals live back in the d slots

    for l in range(L):
        tile.load(dstore[l], ("d", l))
        a = tile.as_matrix()
        if l > 0:
            for i in range(3):
                for j in range(6):
                    acc = 0.0
                    for k in range(3):
                        acc = acc + read_u(l, i, k) * ustore[l - 1, k, j]
                    for k in range(3):
                        acc = acc + read_u(l, i, k + 3) * wstore[l - 1, k, j]
                    a[i, j] = a[i, j] - acc
            for i in range(3):
                for c in range(nc):
                    acc = 0.0
                    for k in range(6):
                        acc = acc + read_u(l, i, k) * g[l - 1, k, c]
                    g[l, i, c] = g[l, i, c] - acc
        # factor in place (same loop order as the batched kernel)
        for k in range(6):
            piv = a[k, k]
            if piv == 0.0:
                raise ZeroPivot(l, k)
            inv = 1.0 / piv
            for i in range(k + 1, 6):
                a[i, k] = a[i, k] * inv
                for j in range(k + 1, 6):
                    a[i, j] = a[i, j] - a[i, k] * a[k, j]
        if l < L - 1:
            gtile = np.zeros((6, 6), dtype=mat.d.dtype)
            for i in range(3):
                for j in range(6):
                    gtile[i + 3, j] = read_w(l, i, j)
            _seq_lu_solve(a, gtile)
            ustore[l] = gtile[0:3]
            wstore[l] = gtile[3:6]
            stats.stores += 2
        _seq_lu_solve(a, g[l])
        factors[l] = a
        stats.stores += 1

    x = np.zeros_like(g)
    x[L - 1] = g[L - 1]
    for l in range(L - 2, -1, -1):
        gp = np.concatenate([ustore[l], wstore[l]], axis=0)
        for i in range(6):
            for c in range(nc):
                acc = 0.0
                for k in range(6):
                    acc = acc + gp[i, k] * x[l + 1, k, c]
                x[l, i, c] = g[l, i, c] - acc
    out = x[None]
    return (out if had else out[..., 0]), stats


def _seq_lu_solve(a, b):
    """b (6, nrhs) or (6,) solved in place against the factored 6x6 a."""
    two_d = b.ndim == 2
    bb = b if two_d else b[:, None]
    for i in range(1, 6):
        for j in range(i):
            bb[i] = bb[i] - a[i, j] * bb[j]
    for i in range(5, -1, -1):
        for j in range(i + 1, 6):
            bb[i] = bb[i] - a[i, j] * bb[j]
        bb[i] = bb[i] / a[i, i]
    return b


# ---------------------------------------------------------------------------
# scalar tridiagonal solver (vertical profile relaxation)
# ---------------------------------------------------------------------------


def solve_tridiagonal(lower, diag, upper, rhs):
    """Thomas algorithm, batched over leading dimensions.

    lower/diag/upper/rhs: (..., n); lower[..., 0] and upper[..., n-1] unused.
    """
    a = np.asarray(lower, dtype=float)
    b = np.asarray(diag, dtype=float).copy()
    c = np.asarray(upper, dtype=float)
    d = np.asarray(rhs, dtype=float).copy()
    n = b.shape[-1]
    for i in range(1, n):
        piv = b[..., i - 1]
        if np.any(piv == 0.0):
            raise ZeroPivot(i - 1, 0)
        m = a[..., i] / piv
        b[..., i] = b[..., i] - m * c[..., i - 1]
        d[..., i] = d[..., i] - m * d[..., i - 1]
    piv = b[..., n - 1]
    if np.any(piv == 0.0):
        raise ZeroPivot(n - 1, 0)
    x = np.empty_like(d)
    x[..., n - 1] = d[..., n - 1] / b[..., n - 1]
    for i in range(n - 2, -1, -1):
        x[..., i] = (d[..., i] - c[..., i] * x[..., i + 1]) / b[..., i]
    return x


# ---------------------------------------------------------------------------
# cell-block wrappers
# ---------------------------------------------------------------------------


def _block_lanes(block: CellBlock, ncomp: int):
    view = cell_view(block)  # (width, L, 6, ncomp)
    if view.shape[3] != ncomp:
        raise ShapeMismatch(f"cell block holds {view.shape[3]} components, expected {ncomp}")
    return view


def solve_r_cell(block: CellBlock, j2d_cols, j2d_pad: float = 1.0) -> CellBlock:
    """solve_r_column on a cell block; padded lanes come back zero."""
    view = _block_lanes(block, block.ncomp)
    w = block.width
    j2d = np.full(w, j2d_pad, dtype=block.data.dtype)
    j2d[: block.columns.size] = np.asarray(j2d_cols, dtype=block.data.dtype)
    layers = np.zeros(w, dtype=np.int64)
    layers[: block.columns.size] = block.layers
    x = solve_r_column(np.ascontiguousarray(view), j2d, layers=layers)
    out = CellBlock(
        data=np.zeros_like(block.data),
        columns=block.columns.copy(),
        layers=block.layers.copy(),
        ncomp=block.ncomp,
    )
    cell_view(out)[:] = x
    return out


def solve_w_cell(block: CellBlock, j2d_cols, j2d_pad: float = 1.0) -> CellBlock:
    view = _block_lanes(block, block.ncomp)
    w = block.width
    j2d = np.full(w, j2d_pad, dtype=block.data.dtype)
    j2d[: block.columns.size] = np.asarray(j2d_cols, dtype=block.data.dtype)
    layers = np.zeros(w, dtype=np.int64)
    layers[: block.columns.size] = block.layers
    x = solve_w_column(np.ascontiguousarray(view), j2d, layers=layers)
    out = CellBlock(
        data=np.zeros_like(block.data),
        columns=block.columns.copy(),
        layers=block.layers.copy(),
        ncomp=block.ncomp,
    )
    cell_view(out)[:] = x
    return out
