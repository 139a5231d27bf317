"""Field storage layouts and the transposition between them.

Two layouts are used:

* FieldSoA -- structure-of-arrays over the whole domain, ordered
  field component -> prism node (0..5) -> column -> layer, i.e. flat address
  (f * 6 + k) * P + offsets[c] + l.  This is the snapshot/file order.

* CellBlock -- a dense matrix per group ("cell") of up to C columns, one
  matrix column per prism column, rows ordered layer -> node -> field
  (row = (l * 6 + k) * ncomp + f).  Shallow columns are padded with zeros
  down to the deepest column of the cell; missing trailing columns of the
  last cell are all-zero lanes.  Column solvers sweep this layout.

Both directions of the transposition are pure data movement and therefore
bit-exact for any dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import ShapeMismatch

NODES = 6
DEFAULT_CELL_WIDTH = 128


@dataclass
class FieldSoA:
    data: np.ndarray       # flat, length ncomp * 6 * P
    ncomp: int
    offsets: np.ndarray    # (ncol + 1,) prism row offsets per column

    @property
    def n_prisms(self) -> int:
        return int(self.offsets[-1])

    @property
    def n_columns(self) -> int:
        return self.offsets.shape[0] - 1

    @property
    def layers(self) -> np.ndarray:
        return np.diff(self.offsets)

    def address(self, f: int, k: int, c: int, l: int) -> int:
        return (f * NODES + k) * self.n_prisms + int(self.offsets[c]) + l

    @staticmethod
    def from_native(native: np.ndarray, offsets) -> "FieldSoA":
        """native is (P, 6) or (P, 6, ncomp) with p = offsets[c] + l."""
        offsets = np.asarray(offsets, dtype=np.int64)
        arr = np.asarray(native)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[1] != NODES:
            raise ShapeMismatch(f"native field must be (P, 6[, ncomp]), got {arr.shape}")
        if arr.shape[0] != offsets[-1]:
            raise ShapeMismatch(
                f"native field has {arr.shape[0]} prisms, offsets end at {offsets[-1]}"
            )
        flat = np.ascontiguousarray(arr.transpose(2, 1, 0)).ravel()
        return FieldSoA(data=flat, ncomp=arr.shape[2], offsets=offsets)

    def to_native(self) -> np.ndarray:
        """Return (P, 6, ncomp)."""
        p = self.n_prisms
        cube = self.data.reshape(self.ncomp, NODES, p)
        return np.ascontiguousarray(cube.transpose(2, 1, 0))


@dataclass
class CellBlock:
    data: np.ndarray       # (rows, width) with rows = max_layers * 6 * ncomp
    columns: np.ndarray    # (n_real,) global column ids held by this cell
    layers: np.ndarray     # (n_real,) real layer count per held column
    ncomp: int

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def max_layers(self) -> int:
        return self.data.shape[0] // (NODES * self.ncomp)

    def lane_mask(self) -> np.ndarray:
        """(max_layers, width) True where a lane holds a real layer."""
        lm = np.zeros((self.max_layers, self.width), dtype=bool)
        for i, lc in enumerate(self.layers):
            lm[: int(lc), i] = True
        return lm


def soa_to_cell(field: FieldSoA, width: int = DEFAULT_CELL_WIDTH) -> List[CellBlock]:
    """Split the domain into cells of `width` consecutive columns each."""
    if width < 1:
        raise ShapeMismatch("cell width must be >= 1")
    native = field.to_native()
    nf = field.ncomp
    layers = field.layers
    blocks: List[CellBlock] = []
    for c0 in range(0, field.n_columns, width):
        cols = np.arange(c0, min(c0 + width, field.n_columns), dtype=np.int64)
        lmax = int(layers[cols].max())
        data = np.zeros((lmax * NODES * nf, width), dtype=native.dtype)
        for i, c in enumerate(cols):
            lc = int(layers[c])
            off = int(field.offsets[c])
            data[: lc * NODES * nf, i] = native[off : off + lc].ravel()
        blocks.append(
            CellBlock(data=data, columns=cols, layers=layers[cols].astype(np.int64), ncomp=nf)
        )
    return blocks


def cell_to_soa(blocks: Sequence[CellBlock], offsets) -> FieldSoA:
    """Inverse of soa_to_cell; padded entries are never read."""
    offsets = np.asarray(offsets, dtype=np.int64)
    if not blocks:
        raise ShapeMismatch("no cell blocks given")
    nf = blocks[0].ncomp
    p = int(offsets[-1])
    native = np.zeros((p, NODES, nf), dtype=blocks[0].data.dtype)
    for blk in blocks:
        for i, c in enumerate(blk.columns):
            lc = int(blk.layers[i])
            off = int(offsets[c])
            native[off : off + lc] = blk.data[: lc * NODES * nf, i].reshape(lc, NODES, nf)
    return FieldSoA.from_native(native, offsets)


def cell_view(block: CellBlock) -> np.ndarray:
    """Zero-copy view of a cell as (width, max_layers, 6, ncomp).

    This is the shape the column solvers sweep; the transpose is a view, so
    writes through it land in the cell matrix.
    """
    rows, w = block.data.shape
    cube = block.data.reshape(block.max_layers, NODES, block.ncomp, w)
    return cube.transpose(3, 0, 1, 2)


# ---------------------------------------------------------------------------
# block shape selection for the solver sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockShape:
    n: int            # columns advanced per pass (write chunk)
    read_chunk: int   # layers visible per pass
    lanes: int        # active lanes n * min(layers, read_chunk)
    utilization: float

    @property
    def write_chunk(self) -> int:
        return self.n


def choose_block_shape(max_layers: int, width: int = DEFAULT_CELL_WIDTH) -> BlockShape:
    """Pick how many columns to advance together when sweeping a cell.

    A pass holds n columns times read_chunk = width // n layers; the winner
    maximizes the number of active lanes n * min(max_layers, width // n),
    preferring the smaller n (deeper vertical window) on ties.  n is capped
    at 32 so a pass always spans at least a few layers.
    """
    if max_layers < 1:
        raise ShapeMismatch("max_layers must be >= 1")
    best = None
    for n in range(1, min(32, width) + 1):
        if width % n != 0:
            continue
        rc = width // n
        lanes = n * min(max_layers, rc)
        if best is None or lanes > best.lanes:
            best = BlockShape(n=n, read_chunk=rc, lanes=lanes, utilization=lanes / width)
    return best


def block_shape_table(layer_counts: Sequence[int], width: int = DEFAULT_CELL_WIDTH):
    """Rows for the layout CSV: layout,n,columns,layers,read_chunk,write_chunk,utilization."""
    rows = []
    for L in layer_counts:
        bs = choose_block_shape(int(L), width)
        rows.append(
            {
                "layout": "cell",
                "n": bs.n,
                "columns": width,
                "layers": int(L),
                "read_chunk": bs.read_chunk,
                "write_chunk": bs.write_chunk,
                "utilization": bs.utilization,
            }
        )
    return rows
