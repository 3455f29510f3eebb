"""Fine-grid Galerkin solver (the reference) and the reported error metric."""
from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla

from .errors import DimensionMismatchError, SolverError
from .field import PermeabilityField
from .grid import FineGrid, assemble_form, load_vector, mass_matrix

__all__ = ["Solution", "solve_fine", "error_ratio", "write_solution", "read_solution"]

RESIDUAL_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Solution:
    """Per-fine-node values with zero trace on the domain boundary."""

    grid: FineGrid
    values: np.ndarray = dataclass_field(repr=False)


def solve_fine(field: PermeabilityField, source_cells) -> Solution:
    """Bilinear Galerkin solve of -div(k grad u) = f with u = 0 on the boundary.

    Direct sparse factorization; the relative residual on the interior block
    must come out below 1e-10 or the solve is reported as failed.
    """
    if np.any(field.values <= 0):
        raise DimensionMismatchError("coefficient must be strictly positive")
    fine = field.grid
    A = assemble_form(field, fine, "stiffness")
    b = load_vector(fine, source_cells)

    interior = np.nonzero(~fine.boundary_node_mask())[0]
    u = np.zeros(fine.n_nodes)
    if len(interior) > 0:
        Aii = A[interior][:, interior].tocsc()
        bi = b[interior]
        ui = spla.spsolve(Aii, bi)
        bnorm = np.linalg.norm(bi)
        if bnorm > 0:
            residual = np.linalg.norm(Aii @ ui - bi) / bnorm
            if not np.isfinite(residual) or residual > RESIDUAL_TOL:
                raise SolverError(
                    f"fine solve residual {residual:.3e} exceeds {RESIDUAL_TOL:.0e}",
                    residual=float(residual),
                )
        u[interior] = ui
    return Solution(grid=fine, values=u)


def error_ratio(u: Solution, u_h: Solution) -> float:
    """Squared-L2 mismatch over squared-L2 size: int (u - u_h)^2 / int u^2.

    Both integrals use the consistent fine-grid mass matrix, which is exact
    for nodal bilinear functions.  Reported as the ratio itself, without a
    square root.
    """
    if u.grid.nx != u_h.grid.nx or u.grid.ny != u_h.grid.ny:
        raise DimensionMismatchError("solutions live on different grids")
    M = mass_matrix(u.grid)
    diff = u.values - u_h.values
    denom = float(u.values @ (M @ u.values))
    if denom <= 0.0:
        raise ValueError("reference solution is identically zero")
    return float(diff @ (M @ diff)) / denom


def write_solution(sol: Solution, path: str | Path) -> None:
    """Text format: header ``SOL nx ny`` then row-major node values."""
    path = Path(path)
    nx, ny = sol.grid.nx, sol.grid.ny
    with path.open("w") as fh:
        fh.write(f"SOL {nx} {ny}\n")
        for j in range(ny + 1):
            row = sol.values[j * (nx + 1) : (j + 1) * (nx + 1)]
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_solution(path: str | Path) -> Solution:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "SOL":
            raise ValueError(f"{path}: not a solution file")
        nx, ny = int(header[1]), int(header[2])
        values = np.array(fh.read().split(), dtype=float)
    if len(values) != (nx + 1) * (ny + 1):
        raise DimensionMismatchError(
            f"{path}: expected {(nx + 1) * (ny + 1)} values, found {len(values)}"
        )
    return Solution(grid=FineGrid(nx, ny), values=values)
