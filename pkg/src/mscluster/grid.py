"""Structured grids on the unit square and bilinear-element assembly.

The fine grid resolves the coefficient heterogeneity; the coarse grid is a
conforming coarsening by an integer factor.  Every coarse node owns a patch
(the union of coarse cells touching it) on which local problems are posed.
All objects are immutable after construction and safe for concurrent reads.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatchError

__all__ = [
    "FineGrid",
    "CoarseGrid",
    "Neighborhood",
    "PartitionOfUnity",
    "build_grids",
    "neighborhood",
    "all_neighborhoods",
    "partition_of_unity",
    "assemble_form",
    "mass_matrix",
    "load_vector",
    "hat_gradient_sq_cells",
]


@dataclass(frozen=True)
class FineGrid:
    """Uniform quadrilateral mesh of the unit square, nodes row-major."""

    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise DimensionMismatchError(f"cell counts must be >= 1, got {self.nx}x{self.ny}")

    @property
    def hx(self) -> float:
        return 1.0 / self.nx

    @property
    def hy(self) -> float:
        return 1.0 / self.ny

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    def node_id(self, i, j):
        return j * (self.nx + 1) + i

    def cell_id(self, i, j):
        return j * self.nx + i

    def cell_corner_nodes(self, cells: np.ndarray) -> np.ndarray:
        """Global node ids (SW, SE, NW, NE) for each cell id, shape (len, 4)."""
        cells = np.asarray(cells)
        ci = cells % self.nx
        cj = cells // self.nx
        sw = cj * (self.nx + 1) + ci
        return np.stack([sw, sw + 1, sw + self.nx + 1, sw + self.nx + 2], axis=-1)

    def cell_centers(self) -> np.ndarray:
        """(n_cells, 2) coordinates of cell centers, row-major cell order."""
        xc = (np.arange(self.nx) + 0.5) * self.hx
        yc = (np.arange(self.ny) + 0.5) * self.hy
        xx, yy = np.meshgrid(xc, yc)
        return np.column_stack([xx.ravel(), yy.ravel()])

    def node_coords(self) -> np.ndarray:
        x = np.arange(self.nx + 1) * self.hx
        y = np.arange(self.ny + 1) * self.hy
        xx, yy = np.meshgrid(x, y)
        return np.column_stack([xx.ravel(), yy.ravel()])

    def boundary_node_mask(self) -> np.ndarray:
        """Boolean mask over nodes, True on the outer boundary of the square."""
        i = np.arange(self.n_nodes) % (self.nx + 1)
        j = np.arange(self.n_nodes) // (self.nx + 1)
        return (i == 0) | (i == self.nx) | (j == 0) | (j == self.ny)


@dataclass(frozen=True)
class CoarseGrid:
    """Coarse partition whose cells are factor x factor blocks of fine cells."""

    nx: int
    ny: int
    factor: int
    fine: FineGrid

    def __post_init__(self):
        if self.fine.nx != self.nx * self.factor or self.fine.ny != self.ny * self.factor:
            raise DimensionMismatchError(
                f"fine grid {self.fine.nx}x{self.fine.ny} is not a factor-{self.factor} "
                f"refinement of {self.nx}x{self.ny}"
            )

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def hx(self) -> float:
        return 1.0 / self.nx

    @property
    def hy(self) -> float:
        return 1.0 / self.ny

    def node_id(self, i, j):
        return j * (self.nx + 1) + i


def build_grids(nx: int, factor: int) -> CoarseGrid:
    """Build the fine grid and its coarse overlay for a square domain.

    ``nx`` is the fine cell count per axis; ``factor`` fine cells merge into
    one coarse cell per axis and must divide ``nx`` exactly.
    """
    if factor < 1 or nx < 1:
        raise DimensionMismatchError(f"nx={nx} and factor={factor} must be positive")
    if nx % factor != 0:
        raise DimensionMismatchError(f"factor {factor} does not divide fine cell count {nx}")
    fine = FineGrid(nx, nx)
    return CoarseGrid(nx // factor, nx // factor, factor, fine)


@dataclass(frozen=True, eq=False)
class Neighborhood:
    """Patch of a coarse node: the coarse cells sharing that node.

    ``fine_nodes`` doubles as the local-to-global node map; local node order
    is row-major over the patch rectangle.  ``boundary_local`` walks the
    patch perimeter counterclockwise starting at the lowest-left node.
    """

    coarse_node: int
    grid: CoarseGrid
    cell_origin: tuple[int, int]   # fine-cell (i, j) of the patch corner
    cells_shape: tuple[int, int]   # (rows, cols) of fine cells
    fine_cells: np.ndarray = dataclass_field(repr=False)
    fine_nodes: np.ndarray = dataclass_field(repr=False)
    boundary_local: np.ndarray = dataclass_field(repr=False)
    interior_local: np.ndarray = dataclass_field(repr=False)

    @property
    def nodes_shape(self) -> tuple[int, int]:
        return (self.cells_shape[0] + 1, self.cells_shape[1] + 1)

    @property
    def n_cells(self) -> int:
        return len(self.fine_cells)

    @property
    def n_nodes(self) -> int:
        return len(self.fine_nodes)

    def local_cell_corners(self) -> np.ndarray:
        """Local node indices (SW, SE, NW, NE) per patch cell, shape (n_cells, 4)."""
        rows, cols = self.cells_shape
        nnx = cols + 1
        ci = np.arange(self.n_cells) % cols
        cj = np.arange(self.n_cells) // cols
        sw = cj * nnx + ci
        return np.stack([sw, sw + 1, sw + nnx, sw + nnx + 1], axis=-1)

    def dirichlet_local(self) -> np.ndarray:
        """Local indices of patch nodes lying on the outer domain boundary."""
        mask = self.grid.fine.boundary_node_mask()[self.fine_nodes]
        return np.nonzero(mask)[0]


def neighborhood(grid: CoarseGrid, coarse_node: int) -> Neighborhood:
    """Patch index sets for one coarse node (4/2/1 coarse cells for
    interior/edge/corner nodes)."""
    if not 0 <= coarse_node < grid.n_nodes:
        raise DimensionMismatchError(f"coarse node {coarse_node} out of range 0..{grid.n_nodes - 1}")
    ci = coarse_node % (grid.nx + 1)
    cj = coarse_node // (grid.nx + 1)
    f = grid.factor
    c_lo_x, c_hi_x = max(ci - 1, 0), min(ci, grid.nx - 1)
    c_lo_y, c_hi_y = max(cj - 1, 0), min(cj, grid.ny - 1)

    i0, i1 = c_lo_x * f, (c_hi_x + 1) * f   # fine-cell index range [i0, i1)
    j0, j1 = c_lo_y * f, (c_hi_y + 1) * f
    cols, rows = i1 - i0, j1 - j0

    fnx = grid.fine.nx
    ci_f, cj_f = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1))
    fine_cells = (cj_f * fnx + ci_f).ravel()

    ni, nj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1))
    fine_nodes = (nj * (fnx + 1) + ni).ravel()

    nnx, nny = cols + 1, rows + 1
    bottom = np.arange(nnx)
    right = nnx - 1 + nnx * np.arange(1, nny)
    top = nnx * nny - 2 - np.arange(nnx - 1)
    left = nnx * np.arange(nny - 2, 0, -1)
    boundary_local = np.concatenate([bottom, right, top, left]) if nny > 1 else bottom
    is_boundary = np.zeros(nnx * nny, dtype=bool)
    is_boundary[boundary_local] = True
    interior_local = np.nonzero(~is_boundary)[0]

    return Neighborhood(
        coarse_node=coarse_node,
        grid=grid,
        cell_origin=(i0, j0),
        cells_shape=(rows, cols),
        fine_cells=fine_cells,
        fine_nodes=fine_nodes,
        boundary_local=boundary_local,
        interior_local=interior_local,
    )


def all_neighborhoods(grid: CoarseGrid) -> list[Neighborhood]:
    return [neighborhood(grid, i) for i in range(grid.n_nodes)]


@dataclass(frozen=True, eq=False)
class PartitionOfUnity:
    """Coarse hat functions sampled at fine nodes.

    ``hats`` is sparse (n_coarse_nodes x n_fine_nodes); row i is the bilinear
    hat of coarse node i, supported on its patch.  ``grad_sq_cells`` holds
    the per-fine-cell sum of squared hat gradients evaluated at cell centers
    (the weight entering the weighted-mass form).
    """

    grid: CoarseGrid
    hats: sp.csr_matrix = dataclass_field(repr=False)
    grad_sq_cells: np.ndarray = dataclass_field(repr=False)

    def hat_values(self, coarse_node: int) -> np.ndarray:
        return np.asarray(self.hats.getrow(coarse_node).todense()).ravel()

    def hat_on(self, nbhd: Neighborhood) -> np.ndarray:
        """Hat of the patch's own coarse node, restricted to patch nodes."""
        return self.hat_values(nbhd.coarse_node)[nbhd.fine_nodes]


def hat_gradient_sq_cells(grid: CoarseGrid) -> np.ndarray:
    """Sum over all coarse hats of |grad hat|^2 at each fine-cell center."""
    fine = grid.fine
    centers = fine.cell_centers()
    Hx, Hy = grid.hx, grid.hy
    # local coordinates of each fine-cell center within its coarse cell
    xi = np.mod(centers[:, 0], Hx) / Hx
    eta = np.mod(centers[:, 1], Hy) / Hy
    return 2.0 * ((1 - eta) ** 2 + eta**2) / Hx**2 + 2.0 * ((1 - xi) ** 2 + xi**2) / Hy**2


def partition_of_unity(grid: CoarseGrid) -> PartitionOfUnity:
    """Bilinear coarse hat functions; rows sum to one at every fine node."""
    fine = grid.fine
    coords = fine.node_coords()
    Hx, Hy = grid.hx, grid.hy
    rows, cols, vals = [], [], []
    for cj in range(grid.ny + 1):
        for ci in range(grid.nx + 1):
            node = grid.node_id(ci, cj)
            tx = 1.0 - np.abs(coords[:, 0] - ci * Hx) / Hx
            ty = 1.0 - np.abs(coords[:, 1] - cj * Hy) / Hy
            v = np.maximum(tx, 0.0) * np.maximum(ty, 0.0)
            nz = np.nonzero(v > 0.0)[0]
            rows.append(np.full(len(nz), node))
            cols.append(nz)
            vals.append(v[nz])
    hats = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.n_nodes, fine.n_nodes),
    )
    return PartitionOfUnity(grid=grid, hats=hats, grad_sq_cells=hat_gradient_sq_cells(grid))


def _reference_stiffness(hx: float, hy: float) -> np.ndarray:
    """Exact bilinear-element stiffness on an hx-by-hy rectangle, unit
    coefficient, node order (SW, SE, NW, NE)."""
    kxx = np.array(
        [[2, -2, 1, -1], [-2, 2, -1, 1], [1, -1, 2, -2], [-1, 1, -2, 2]], dtype=float
    ) / 6.0
    kyy = np.array(
        [[2, 1, -2, -1], [1, 2, -1, -2], [-2, -1, 2, 1], [-1, -2, 1, 2]], dtype=float
    ) / 6.0
    return (hy / hx) * kxx + (hx / hy) * kyy


def _reference_mass(hx: float, hy: float) -> np.ndarray:
    """Exact bilinear-element mass matrix, node order (SW, SE, NW, NE)."""
    m = np.array([[4, 2, 2, 1], [2, 4, 1, 2], [2, 1, 4, 2], [1, 2, 2, 4]], dtype=float)
    return (hx * hy / 36.0) * m


def assemble_form(field, region, kind: str) -> sp.csr_matrix:
    """Assemble a symmetric bilinear form over a region's fine nodes.

    ``kind="stiffness"`` integrates coeff * grad(v).grad(w); coefficients are
    the per-cell field values.  ``kind="weighted_mass"`` integrates
    ktilde * v * w where ktilde is the field scaled per cell by the summed
    squared coarse-hat gradients (evaluated at cell centers).  ``region`` is
    a Neighborhood (local node numbering) or a CoarseGrid (whole domain).
    """
    if isinstance(region, Neighborhood):
        grid = region.grid
        fine = grid.fine
        n_nodes = region.n_nodes
        corners = region.local_cell_corners()
        cell_ids = region.fine_cells
    elif isinstance(region, (CoarseGrid, FineGrid)):
        grid = region if isinstance(region, CoarseGrid) else None
        fine = region.fine if isinstance(region, CoarseGrid) else region
        n_nodes = fine.n_nodes
        cell_ids = np.arange(fine.n_cells)
        corners = fine.cell_corner_nodes(cell_ids)
    else:
        raise DimensionMismatchError(f"unsupported region type {type(region).__name__}")
    if kind == "weighted_mass" and grid is None:
        raise ValueError("weighted_mass assembly needs coarse-grid structure")

    raw = np.asarray(getattr(field, "values", field), dtype=float).ravel()
    if len(raw) == len(cell_ids):
        values = raw
    elif len(raw) == fine.n_cells:
        values = raw[cell_ids]
    else:
        raise DimensionMismatchError(
            f"field has {len(raw)} values; expected {len(cell_ids)} (region) "
            f"or {fine.n_cells} (whole grid)"
        )
    if not np.all(np.isfinite(values)):
        raise DimensionMismatchError("field values must be finite")

    if kind == "stiffness":
        ref = _reference_stiffness(fine.hx, fine.hy)
        coeff = values
    elif kind == "weighted_mass":
        ref = _reference_mass(fine.hx, fine.hy)
        coeff = values * hat_gradient_sq_cells(grid)[cell_ids]
    else:
        raise ValueError(f"unknown form kind {kind!r}")

    data = coeff[:, None, None] * ref[None, :, :]
    rows = np.repeat(corners, 4, axis=1).ravel()
    cols = np.tile(corners, (1, 4)).ravel()
    mat = sp.csr_matrix((data.ravel(), (rows, cols)), shape=(n_nodes, n_nodes))
    return mat


def mass_matrix(fine: FineGrid) -> sp.csr_matrix:
    """Consistent (unlumped) bilinear mass matrix of the whole fine grid."""
    ref = _reference_mass(fine.hx, fine.hy)
    corners = fine.cell_corner_nodes(np.arange(fine.n_cells))
    data = np.broadcast_to(ref, (fine.n_cells, 4, 4))
    rows = np.repeat(corners, 4, axis=1).ravel()
    cols = np.tile(corners, (1, 4)).ravel()
    return sp.csr_matrix((data.ravel(), (rows, cols)), shape=(fine.n_nodes, fine.n_nodes))


def load_vector(fine: FineGrid, source_cells) -> np.ndarray:
    """Nodal load for a per-cell-constant source: each cell spreads
    f * hx * hy / 4 to its four corners."""
    f = np.asarray(source_cells, dtype=float).ravel()
    if len(f) != fine.n_cells:
        raise DimensionMismatchError(f"source has {len(f)} values, grid has {fine.n_cells} cells")
    if not np.all(np.isfinite(f)):
        raise DimensionMismatchError("source values must be finite")
    corners = fine.cell_corner_nodes(np.arange(fine.n_cells))
    b = np.zeros(fine.n_nodes)
    np.add.at(b, corners.ravel(), np.repeat(f * (fine.hx * fine.hy / 4.0), 4))
    return b
