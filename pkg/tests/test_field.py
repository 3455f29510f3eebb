"""Channelized field sampling, restriction, averaging, file format."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mscluster.errors import DimensionMismatchError
from mscluster.field import (
    ChannelTemplate,
    FieldConfig,
    Patch,
    default_channels,
    mean_field,
    read_field,
    restrict,
    sample_field,
    write_field,
)
from mscluster.grid import FineGrid, build_grids, neighborhood


def make_config(nx=40, **kw):
    return FieldConfig(grid=FineGrid(nx, nx), **kw)


class TestSampleField:
    def test_background_formula_zero_amplitude(self):
        config = make_config(nx=50, channels=())
        for seed in range(40):
            field = sample_field(config, seed)
            if field.amp == 0.0:
                break
        else:
            pytest.fail("no zero-amplitude draw in 40 seeds")
        centers = config.grid.cell_centers()
        expect = np.exp(np.sin(10 * np.pi * centers[:, 0]) * np.sin(12 * np.pi * centers[:, 1]))
        assert np.allclose(field.values, expect, rtol=1e-14)
        assert field.values.min() >= np.exp(-1.0) - 1e-12
        assert field.values.max() <= np.exp(1.0) + 1e-12

    def test_background_formula_general_amplitude(self):
        config = make_config(nx=30, channels=())
        field = sample_field(config, 3)
        centers = config.grid.cell_centers()
        x, y = centers[:, 0], centers[:, 1]
        expect = np.exp(
            field.amp * np.sin(7 * np.pi * x) * np.sin(8 * np.pi * y)
            + np.sin(10 * np.pi * x) * np.sin(12 * np.pi * y)
        )
        assert np.allclose(field.values, expect, rtol=1e-14)

    def test_channel_cells_take_channel_value(self):
        config = make_config(nx=40)
        found_active = False
        for seed in range(30):
            field = sample_field(config, seed)
            if any(d.active for d in field.draws):
                found_active = True
                assert field.values.max() == config.channel_value
        assert found_active

    def test_channel_mask_against_direct_rasterization(self):
        config = make_config(nx=40)
        field = sample_field(config, 12)
        centers = config.grid.cell_centers()
        values = np.exp(
            field.amp * np.sin(7 * np.pi * centers[:, 0]) * np.sin(8 * np.pi * centers[:, 1])
            + np.sin(10 * np.pi * centers[:, 0]) * np.sin(12 * np.pi * centers[:, 1])
        )
        n = 40
        for tpl, draw in zip(config.channels, field.draws):
            if not draw.active:
                continue
            start = round(tpl.pos * n - draw.width / 2) + draw.jitter
            lo = round(tpl.span[0] * n) + draw.span_jitter
            hi = round(tpl.span[1] * n) + draw.span_jitter
            for c in range(n * n):
                i, j = c % n, c // n
                across, along = (i, j) if tpl.axis == "v" else (j, i)
                if start <= across < start + draw.width and lo <= along < hi:
                    values[c] = config.channel_value
        assert np.array_equal(values, field.values)

    def test_active_channel_covers_expected_cell_count(self):
        config = make_config(nx=40)
        for seed in range(200):
            field = sample_field(config, seed)
            tpl, draw = config.channels[0], field.draws[0]
            if draw.active and not field.draws[1].active and not field.draws[2].active:
                # a full-height vertical strip covers width * ny cells
                n_channel = int(np.sum(field.values == config.channel_value))
                assert n_channel == draw.width * 40
                return
        pytest.fail("no isolated vertical-channel draw in 200 seeds")

    def test_determinism(self):
        config = make_config()
        a = sample_field(config, 123)
        b = sample_field(config, 123)
        assert np.array_equal(a.values, b.values)
        assert a.amp == b.amp and a.draws == b.draws

    def test_different_seeds_differ(self):
        config = make_config()
        a = sample_field(config, 1)
        b = sample_field(config, 2)
        assert not np.array_equal(a.values, b.values)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_positivity(self, seed):
        config = make_config(nx=20)
        field = sample_field(config, seed)
        assert np.all(field.values > 0)

    def test_contrast_with_active_channel(self):
        config = make_config()
        for seed in range(30):
            field = sample_field(config, seed)
            if any(d.active for d in field.draws):
                assert field.values.max() / field.values.min() >= 1000.0 / np.e**2
                return
        pytest.fail("no active channel in 30 seeds")

    def test_amplitude_levels_uniform(self):
        config = make_config(nx=2, channels=())
        n = 10_000
        counts = np.zeros(config.amp_levels, dtype=int)
        levels = np.round(np.linspace(0.0, 1.0, config.amp_levels), 12)
        for seed in range(n):
            field = sample_field(config, seed)
            idx = int(np.argmin(np.abs(levels - field.amp)))
            assert abs(levels[idx] - field.amp) < 1e-12
            counts[idx] += 1
        p = 1.0 / config.amp_levels
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= 3 * sigma)

    def test_short_strip_appears_and_disappears(self):
        config = make_config()
        states = {sample_field(config, s).draws[2].active for s in range(40)}
        assert states == {True, False}


class TestRestrict:
    def test_interior_patch_length(self):
        grid = build_grids(40, 5)
        config = FieldConfig(grid=grid.fine)
        field = sample_field(config, 0)
        nbhd = neighborhood(grid, grid.node_id(2, 3))
        patch = restrict(field, nbhd)
        assert len(patch.values) == 100
        assert patch.cells_shape == (10, 10)

    def test_constant_field(self):
        grid = build_grids(20, 5)
        field = sample_field(FieldConfig(grid=grid.fine, channels=()), 0)
        const = type(field)(grid=grid.fine, values=np.full(grid.fine.n_cells, 3.5))
        patch = restrict(const, neighborhood(grid, 0))
        assert np.all(patch.values == 3.5)

    def test_matches_direct_indexing(self):
        grid = build_grids(40, 5)
        field = sample_field(FieldConfig(grid=grid.fine), 7)
        nbhd = neighborhood(grid, grid.node_id(3, 2))
        patch = restrict(field, nbhd)
        rng = np.random.default_rng(0)
        i0, j0 = nbhd.cell_origin
        rows, cols = nbhd.cells_shape
        for _ in range(10):
            li = int(rng.integers(cols))
            lj = int(rng.integers(rows))
            global_cell = (j0 + lj) * grid.fine.nx + (i0 + li)
            assert patch.values[lj * cols + li] == field.values[global_cell]

    def test_grid_mismatch_rejected(self):
        grid = build_grids(40, 5)
        other = sample_field(FieldConfig(grid=FineGrid(20, 20)), 0)
        with pytest.raises(DimensionMismatchError):
            restrict(other, neighborhood(grid, 0))


class TestMeanField:
    def test_mean_of_identical(self):
        p = Patch(values=np.arange(6.0), cells_shape=(2, 3))
        out = mean_field([p, p])
        assert np.array_equal(out.values, p.values)

    def test_arithmetic(self):
        ones = Patch(values=np.ones(4), cells_shape=(2, 2))
        threes = Patch(values=3 * np.ones(4), cells_shape=(2, 2))
        assert np.array_equal(mean_field([ones, threes]).values, 2 * np.ones(4))

    def test_against_naive_sum_oracle(self):
        rng = np.random.default_rng(4)
        patches = [Patch(values=rng.normal(size=12), cells_shape=(3, 4)) for _ in range(5)]
        out = mean_field(patches)
        oracle = np.zeros(12)
        for p in patches:
            for i in range(12):
                oracle[i] += p.values[i]
        oracle /= len(patches)
        assert np.max(np.abs(out.values - oracle)) < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mean_field([])

    def test_shape_mismatch_rejected(self):
        a = Patch(values=np.ones(4), cells_shape=(2, 2))
        b = Patch(values=np.ones(6), cells_shape=(2, 3))
        with pytest.raises(DimensionMismatchError):
            mean_field([a, b])


class TestFieldFile:
    def test_round_trip(self, tmp_path):
        config = make_config(nx=20)
        field = sample_field(config, 5)
        path = tmp_path / "x.field"
        write_field(field, path)
        back = read_field(path)
        assert back.grid.nx == 20 and back.grid.ny == 20
        assert np.array_equal(back.values, field.values)

    def test_header(self, tmp_path):
        field = sample_field(make_config(nx=10), 0)
        path = tmp_path / "x.field"
        write_field(field, path)
        assert path.read_text().splitlines()[0] == "FIELD 10 10"

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.field"
        path.write_text("NOPE 3 3\n1 2 3\n")
        with pytest.raises(ValueError):
            read_field(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "short.field"
        path.write_text("FIELD 2 2\n1.0 2.0 3.0\n")
        with pytest.raises(DimensionMismatchError):
            read_field(path)


def test_config_validation():
    with pytest.raises(ValueError):
        make_config(amp_levels=1)
    with pytest.raises(ValueError):
        make_config(channel_value=-5.0)
    with pytest.raises(ValueError):
        ChannelTemplate(axis="d", pos=0.5)
    with pytest.raises(ValueError):
        ChannelTemplate(axis="v", pos=0.5, width_cells=(0, 1))


def test_default_channel_family():
    channels = default_channels()
    assert len(channels) == 3
    assert channels[0].axis == "v" and channels[0].pos == pytest.approx(0.30)
    assert channels[1].axis == "h" and channels[1].pos == pytest.approx(0.40)
    assert channels[2].span != (0.0, 1.0)
