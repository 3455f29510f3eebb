"""Per-patch snapshot spaces, spectral offline bases, and the coarse solve.

Snapshots are coefficient-harmonic extensions of nodal delta data on the
patch perimeter.  The offline basis keeps the eigenvectors of the projected
stiffness-vs-weighted-mass pencil with the smallest eigenvalues, combined
back into fine-node vectors and (by default) multiplied by the patch's hat
function so the global space conforms and carries a zero boundary trace.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import (
    DimensionMismatchError,
    EigenError,
    RankDeficiencyError,
    SolverError,
)
from .fem import Solution
from .field import PermeabilityField
from .grid import (
    CoarseGrid,
    Neighborhood,
    PartitionOfUnity,
    assemble_form,
    load_vector,
)

__all__ = [
    "SnapshotSpace",
    "OfflineBasis",
    "snapshot_space",
    "offline_basis",
    "solve_coarse",
    "reduced_solve",
    "offline_basis_calls",
    "write_basis",
    "read_basis",
]

# instrumentation: test-time solves must never trigger new spectral problems
_OFFLINE_CALLS = 0


def offline_basis_calls() -> int:
    return _OFFLINE_CALLS


@dataclass(frozen=True, eq=False)
class SnapshotSpace:
    """Columns are patch-node vectors, one per perimeter node, in the
    perimeter's fixed counterclockwise order."""

    nbhd: Neighborhood
    columns: np.ndarray = dataclass_field(repr=False)  # (n_patch_nodes, n_boundary)

    @property
    def n_snapshots(self) -> int:
        return self.columns.shape[1]


@dataclass(frozen=True, eq=False)
class OfflineBasis:
    """Selected spectral basis of one patch.

    ``vectors`` is (n_patch_nodes, L) with eigenvalues ascending.  When
    ``pou_applied`` is True the columns were multiplied by the patch hat
    function and zeroed on the domain boundary, making them globally
    conforming; otherwise they are the raw snapshot combinations, which are
    orthonormal in the weighted-mass inner product.
    """

    nbhd: Neighborhood
    eigenvalues: np.ndarray
    vectors: np.ndarray = dataclass_field(repr=False)
    pou_applied: bool = True

    @property
    def n_basis(self) -> int:
        return self.vectors.shape[1]


def snapshot_space(field, nbhd: Neighborhood) -> SnapshotSpace:
    """Harmonic-extension snapshots: for each perimeter node, the discrete
    solution that is 1 there, 0 at other perimeter nodes."""
    A = assemble_form(field, nbhd, "stiffness").toarray()
    boundary = nbhd.boundary_local
    interior = nbhd.interior_local
    n = nbhd.n_nodes
    nb = len(boundary)
    columns = np.zeros((n, nb))
    columns[boundary, np.arange(nb)] = 1.0
    if len(interior) > 0:
        try:
            lu = sla.lu_factor(A[np.ix_(interior, interior)])
        except sla.LinAlgError as exc:  # pragma: no cover - positive fields keep this SPD
            raise SolverError(f"singular local system on patch {nbhd.coarse_node}") from exc
        rhs = -A[np.ix_(interior, boundary)]
        columns[interior, :] = sla.lu_solve(lu, rhs)
    return SnapshotSpace(nbhd=nbhd, columns=columns)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Per column: flip so the entry of largest magnitude is positive."""
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def offline_basis(
    snap: SnapshotSpace,
    field,
    pou: PartitionOfUnity,
    n_basis: int,
    apply_pou: bool = True,
) -> OfflineBasis:
    """Keep the ``n_basis`` smallest eigenpairs of the projected pencil."""
    global _OFFLINE_CALLS
    if not 1 <= n_basis <= snap.n_snapshots:
        raise ValueError(f"basis count {n_basis} not in 1..{snap.n_snapshots}")
    nbhd = snap.nbhd
    A = assemble_form(field, nbhd, "stiffness").toarray()
    S = assemble_form(field, nbhd, "weighted_mass").toarray()
    Psi = snap.columns
    Ap = Psi.T @ A @ Psi
    Sp = Psi.T @ S @ Psi
    Ap = 0.5 * (Ap + Ap.T)
    Sp = 0.5 * (Sp + Sp.T)
    try:
        eigenvalues, eigenvectors = sla.eigh(Ap, Sp)
    except sla.LinAlgError as exc:
        raise EigenError(f"spectral problem failed on patch {nbhd.coarse_node}") from exc
    _OFFLINE_CALLS += 1
    vectors = Psi @ eigenvectors[:, :n_basis]
    if apply_pou:
        vectors = vectors * pou.hat_on(nbhd)[:, None]
        vectors[nbhd.dirichlet_local(), :] = 0.0
    vectors = _fix_signs(vectors)
    return OfflineBasis(
        nbhd=nbhd,
        eigenvalues=eigenvalues[:n_basis].copy(),
        vectors=vectors,
        pou_applied=apply_pou,
    )


def _stack_columns(columns_by_node: dict[int, tuple[Neighborhood, np.ndarray]], n_fine_nodes: int):
    rows, cols, vals = [], [], []
    col_offset = 0
    spans = {}
    for node_id in sorted(columns_by_node):
        nbhd, vectors = columns_by_node[node_id]
        n_vec = vectors.shape[1]
        rows.append(np.tile(nbhd.fine_nodes, n_vec))
        cols.append(np.repeat(col_offset + np.arange(n_vec), nbhd.n_nodes))
        vals.append(vectors.T.ravel())
        spans[node_id] = (col_offset, col_offset + n_vec)
        col_offset += n_vec
    B = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_fine_nodes, col_offset),
    )
    return B, spans


def reduced_solve(
    columns_by_node: dict[int, tuple[Neighborhood, np.ndarray]],
    grid: CoarseGrid,
    field,
    source_cells,
) -> Solution:
    """Galerkin solve in the span of the given per-patch column blocks.

    Columns must vanish on the domain boundary; the reduced operator is the
    fine stiffness projected onto the stacked columns.
    """
    fine = grid.fine
    B, spans = _stack_columns(columns_by_node, fine.n_nodes)
    A = assemble_form(field, grid, "stiffness")
    b = load_vector(fine, source_cells)
    K = (B.T @ (A @ B)).toarray()
    rhs = B.T @ b
    try:
        c = sla.cho_solve(sla.cho_factor(K), rhs)
    except sla.LinAlgError:
        worst, worst_val = None, np.inf
        for node_id, (lo, hi) in spans.items():
            block = K[lo:hi, lo:hi]
            smallest = float(np.min(sla.eigvalsh(block))) if hi > lo else 0.0
            if smallest < worst_val:
                worst, worst_val = node_id, smallest
        raise RankDeficiencyError(
            f"reduced system is rank deficient (worst patch {worst}, "
            f"local pivot {worst_val:.3e})",
            coarse_node=worst,
        )
    u = np.asarray(B @ c).ravel()
    return Solution(grid=fine, values=u)


def solve_coarse(bases: dict[int, OfflineBasis], field, source_cells) -> Solution:
    """Coarse Galerkin solve using the offline basis of every coarse node,
    prolonged to fine nodes."""
    if not bases:
        raise ValueError("no bases given")
    grid = next(iter(bases.values())).nbhd.grid
    missing = [i for i in range(grid.n_nodes) if i not in bases]
    if missing:
        raise DimensionMismatchError(f"bases missing for coarse nodes {missing[:5]}")
    for i, basis in bases.items():
        if not basis.pou_applied:
            raise ValueError(f"basis of coarse node {i} lacks hat multiplication")
    columns = {i: (b.nbhd, b.vectors) for i, b in bases.items()}
    return reduced_solve(columns, grid, field, source_cells)


def write_basis(basis: OfflineBasis, path: str | Path) -> None:
    """Text format: ``BASIS coarse_node L patch_nodes`` then one row per
    basis vector."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"BASIS {basis.nbhd.coarse_node} {basis.n_basis} {basis.nbhd.n_nodes}\n")
        for k in range(basis.n_basis):
            fh.write(" ".join(f"{v:.17g}" for v in basis.vectors[:, k]) + "\n")


def read_basis(path: str | Path) -> tuple[int, np.ndarray]:
    """Returns (coarse_node, vectors) with vectors shaped (patch_nodes, L)."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "BASIS":
            raise ValueError(f"{path}: not a basis file")
        coarse_node, n_basis, n_nodes = (int(t) for t in header[1:])
        values = np.array(fh.read().split(), dtype=float)
    if len(values) != n_basis * n_nodes:
        raise DimensionMismatchError(
            f"{path}: expected {n_basis * n_nodes} values, found {len(values)}"
        )
    return coarse_node, values.reshape(n_basis, n_nodes).T
