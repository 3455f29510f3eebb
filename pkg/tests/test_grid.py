"""Grid geometry, patches, partition of unity, and assembly."""
import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from mscluster.errors import DimensionMismatchError
from mscluster.grid import (
    all_neighborhoods,
    assemble_form,
    build_grids,
    hat_gradient_sq_cells,
    load_vector,
    mass_matrix,
    neighborhood,
    partition_of_unity,
)


def quad_element_matrices(hx, hy, kappa=1.0, weight=1.0):
    """Independent oracle: 3x3 Gauss quadrature of the bilinear shape
    functions on one rectangle (exact for these integrands)."""
    gauss = np.array([-np.sqrt(3.0 / 5.0), 0.0, np.sqrt(3.0 / 5.0)])
    w = np.array([5.0, 8.0, 5.0]) / 9.0
    stiff = np.zeros((4, 4))
    mass = np.zeros((4, 4))

    def shapes(xi, eta):  # (SW, SE, NW, NE) on [0,1]^2
        n = np.array([(1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta])
        dx = np.array([-(1 - eta), (1 - eta), -eta, eta]) / hx
        dy = np.array([-(1 - xi), -xi, (1 - xi), xi]) / hy
        return n, dx, dy

    for a, wa in zip(gauss, w):
        for b, wb in zip(gauss, w):
            xi, eta = (a + 1) / 2, (b + 1) / 2
            n, dx, dy = shapes(xi, eta)
            scale = wa * wb * hx * hy / 4.0
            stiff += scale * kappa * (np.outer(dx, dx) + np.outer(dy, dy))
            mass += scale * weight * np.outer(n, n)
    return stiff, mass


class TestBuildGrids:
    def test_paper_scale(self):
        grid = build_grids(100, 5)
        assert (grid.nx, grid.ny) == (20, 20)
        assert grid.n_nodes == 21 * 21

    def test_degenerate_single_cell(self):
        grid = build_grids(10, 10)
        assert grid.n_cells == 1
        assert grid.n_nodes == 4

    def test_desk_scale(self):
        grid = build_grids(40, 5)
        assert grid.n_cells == 64
        assert grid.n_nodes == 81

    def test_indivisible_factor_rejected(self):
        with pytest.raises(DimensionMismatchError):
            build_grids(40, 7)

    @given(st.integers(1, 6), st.integers(1, 8))
    def test_counts(self, coarse, factor):
        grid = build_grids(coarse * factor, factor)
        assert grid.nx == coarse
        assert grid.fine.n_nodes == (coarse * factor + 1) ** 2


class TestNeighborhood:
    def test_interior(self):
        grid = build_grids(40, 5)
        nbhd = neighborhood(grid, grid.node_id(3, 4))
        assert nbhd.n_cells == 100
        assert nbhd.n_nodes == 121
        assert len(nbhd.boundary_local) == 40

    def test_corner(self):
        grid = build_grids(40, 5)
        nbhd = neighborhood(grid, grid.node_id(0, 0))
        assert nbhd.n_cells == 25
        assert nbhd.n_nodes == 36

    def test_edge(self):
        grid = build_grids(40, 5)
        nbhd = neighborhood(grid, grid.node_id(3, 0))
        assert nbhd.n_cells == 50

    def test_invalid_index_rejected(self):
        grid = build_grids(20, 5)
        with pytest.raises(DimensionMismatchError):
            neighborhood(grid, grid.n_nodes)

    def test_boundary_walk_is_counterclockwise_from_lowest_left(self):
        grid = build_grids(20, 5)
        nbhd = neighborhood(grid, grid.node_id(1, 1))
        nnx = nbhd.nodes_shape[1]
        walk = nbhd.boundary_local
        assert walk[0] == 0                      # lowest-left patch node
        assert walk[1] == 1                      # moves right along the bottom
        assert len(walk) == len(set(walk.tolist()))
        # perimeter length of an (r+1)x(c+1) node rectangle
        rows, cols = nbhd.nodes_shape
        assert len(walk) == 2 * (rows + cols) - 4
        assert walk[nnx - 1] == nnx - 1          # bottom-right corner reached

    def test_partition_into_boundary_and_interior(self):
        grid = build_grids(20, 5)
        for node in range(grid.n_nodes):
            nbhd = neighborhood(grid, node)
            both = np.concatenate([nbhd.boundary_local, nbhd.interior_local])
            assert sorted(both.tolist()) == list(range(nbhd.n_nodes))

    def test_membership_matches_hat_support(self):
        grid = build_grids(20, 5)
        pou = partition_of_unity(grid)
        member_count = np.zeros(grid.fine.n_nodes, dtype=int)
        for nbhd in all_neighborhoods(grid):
            member_count[nbhd.fine_nodes] += 1
        support_count = np.asarray((pou.hats > 0).sum(axis=0)).ravel()
        # every fine node sits in the patches of exactly the coarse nodes
        # whose hats are nonzero there; patch membership also includes the
        # patch perimeter where the hat vanishes
        for nbhd in all_neighborhoods(grid):
            hat = pou.hat_values(nbhd.coarse_node)
            inside = np.zeros(grid.fine.n_nodes, dtype=bool)
            inside[nbhd.fine_nodes] = True
            assert np.all(inside[hat > 0])


class TestPartitionOfUnity:
    def test_apex_and_support(self):
        grid = build_grids(20, 5)
        pou = partition_of_unity(grid)
        for node in [0, grid.node_id(2, 2), grid.node_id(4, 1)]:
            hat = pou.hat_values(node)
            ci, cj = node % (grid.nx + 1), node // (grid.nx + 1)
            fine_node = grid.fine.node_id(ci * grid.factor, cj * grid.factor)
            assert hat[fine_node] == 1.0
            for other in range(grid.n_nodes):
                if other == node:
                    continue
                oi, oj = other % (grid.nx + 1), other // (grid.nx + 1)
                at_other = grid.fine.node_id(oi * grid.factor, oj * grid.factor)
                assert hat[at_other] == 0.0

    def test_sums_to_one_everywhere(self):
        grid = build_grids(20, 4)
        pou = partition_of_unity(grid)
        sums = np.asarray(pou.hats.sum(axis=0)).ravel()
        assert np.max(np.abs(sums - 1.0)) < 1e-12

    @given(st.integers(2, 5), st.integers(2, 6))
    @settings(max_examples=20)
    def test_sums_to_one_random_sizes(self, coarse, factor):
        grid = build_grids(coarse * factor, factor)
        pou = partition_of_unity(grid)
        sums = np.asarray(pou.hats.sum(axis=0)).ravel()
        assert np.max(np.abs(sums - 1.0)) < 1e-12

    def test_range(self):
        grid = build_grids(12, 3)
        pou = partition_of_unity(grid)
        assert pou.hats.min() >= 0.0
        assert pou.hats.max() <= 1.0

    def test_gradient_sq_against_quadrature(self):
        # hat gradients are piecewise linear; compare the closed form at a
        # cell center with a direct finite-difference of the hat product
        grid = build_grids(12, 3)
        vals = hat_gradient_sq_cells(grid)
        H = grid.hx
        centers = grid.fine.cell_centers()
        eps = 1e-7

        def hat(ci, cj, x, y):
            tx = max(0.0, 1.0 - abs(x - ci * H) / H)
            ty = max(0.0, 1.0 - abs(y - cj * H) / H)
            return tx * ty

        for cell in [0, 5, 17, 40, grid.fine.n_cells - 1]:
            x, y = centers[cell]
            total = 0.0
            for cj in range(grid.ny + 1):
                for ci in range(grid.nx + 1):
                    gx = (hat(ci, cj, x + eps, y) - hat(ci, cj, x - eps, y)) / (2 * eps)
                    gy = (hat(ci, cj, x, y + eps) - hat(ci, cj, x, y - eps)) / (2 * eps)
                    total += gx * gx + gy * gy
            assert vals[cell] == pytest.approx(total, rel=1e-6)


class TestAssembly:
    def test_unit_cell_stiffness_values(self):
        grid = build_grids(1, 1)
        mat = assemble_form(np.ones(1), grid, "stiffness").toarray()
        expect = np.full((4, 4), -1.0 / 6.0)
        np.fill_diagonal(expect, 2.0 / 3.0)
        expect[0, 3] = expect[3, 0] = expect[1, 2] = expect[2, 1] = -1.0 / 3.0
        assert np.allclose(mat, expect, atol=1e-14)

    def test_element_matrices_match_quadrature_oracle(self):
        grid = build_grids(4, 2)
        rng = np.random.default_rng(3)
        kappa = rng.uniform(0.5, 4.0, grid.fine.n_cells)
        stiff = assemble_form(kappa, grid, "stiffness").toarray()
        weighted = assemble_form(kappa, grid, "weighted_mass").toarray()
        weight = hat_gradient_sq_cells(grid)

        n = grid.fine.n_nodes
        stiff_oracle = np.zeros((n, n))
        mass_oracle = np.zeros((n, n))
        hx, hy = grid.fine.hx, grid.fine.hy
        for cell in range(grid.fine.n_cells):
            ke, me = quad_element_matrices(hx, hy, kappa[cell], kappa[cell] * weight[cell])
            nodes = grid.fine.cell_corner_nodes(np.array([cell]))[0]
            for a in range(4):
                for b in range(4):
                    stiff_oracle[nodes[a], nodes[b]] += ke[a, b]
                    mass_oracle[nodes[a], nodes[b]] += me[a, b]
        assert np.allclose(stiff, stiff_oracle, atol=1e-12)
        assert np.allclose(weighted, mass_oracle, atol=1e-12)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=15, deadline=None)
    def test_stiffness_row_sums_vanish(self, seed):
        grid = build_grids(10, 2)
        kappa = np.random.default_rng(seed).uniform(0.1, 1000.0, grid.fine.n_cells)
        mat = assemble_form(kappa, grid, "stiffness")
        row_sums = np.asarray(mat.sum(axis=1)).ravel()
        assert np.max(np.abs(row_sums)) < 1e-12 * np.max(np.abs(mat.data))

    def test_weighted_mass_is_spd(self):
        grid = build_grids(10, 5)
        rng = np.random.default_rng(11)
        kappa = rng.uniform(0.5, 100.0, grid.fine.n_cells)
        mat = assemble_form(kappa, grid, "weighted_mass")
        for _ in range(100):
            x = rng.normal(size=grid.fine.n_nodes)
            assert x @ (mat @ x) > 0

    def test_stiffness_energy_zero_iff_constant(self):
        grid = build_grids(8, 2)
        kappa = np.random.default_rng(0).uniform(0.5, 2.0, grid.fine.n_cells)
        mat = assemble_form(kappa, grid, "stiffness")
        ones = np.ones(grid.fine.n_nodes)
        assert abs(ones @ (mat @ ones)) < 1e-12
        x = np.random.default_rng(1).normal(size=grid.fine.n_nodes)
        x -= x.mean()
        if np.linalg.norm(x) > 0:
            assert x @ (mat @ x) > 1e-8

    def test_patch_assembly_additivity(self):
        # every fine cell belongs to the patches of exactly the 4 corners of
        # its coarse cell, so patch stiffness matrices sum to 4x the global
        grid = build_grids(12, 3)
        kappa = np.random.default_rng(5).uniform(0.5, 3.0, grid.fine.n_cells)
        total = sp.csr_matrix((grid.fine.n_nodes, grid.fine.n_nodes))
        for nbhd in all_neighborhoods(grid):
            local = assemble_form(kappa, nbhd, "stiffness")
            scatter = sp.csr_matrix(
                (np.ones(nbhd.n_nodes), (nbhd.fine_nodes, np.arange(nbhd.n_nodes))),
                shape=(grid.fine.n_nodes, nbhd.n_nodes),
            )
            total = total + scatter @ local @ scatter.T
        full = assemble_form(kappa, grid, "stiffness")
        diff = (total - 4.0 * full).toarray()
        assert np.max(np.abs(diff)) < 1e-10

    def test_region_size_mismatch_rejected(self):
        grid = build_grids(10, 5)
        nbhd = neighborhood(grid, grid.node_id(1, 1))
        with pytest.raises(DimensionMismatchError):
            assemble_form(np.ones(nbhd.n_cells + 3), nbhd, "stiffness")

    def test_load_vector_constant_source(self):
        grid = build_grids(4, 2)
        b = load_vector(grid.fine, np.ones(grid.fine.n_cells))
        # integral of the partition of nodal shape functions = cell area each
        assert b.sum() == pytest.approx(1.0)
        interior = ~grid.fine.boundary_node_mask()
        hxhy = grid.fine.hx * grid.fine.hy
        assert np.allclose(b[interior], hxhy)

    def test_mass_matrix_integrates_one(self):
        grid = build_grids(6, 3)
        M = mass_matrix(grid.fine)
        ones = np.ones(grid.fine.n_nodes)
        assert ones @ (M @ ones) == pytest.approx(1.0)
