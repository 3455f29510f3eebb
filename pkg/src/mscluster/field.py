"""Channelized high-contrast permeability realizations.

A realization is a smooth oscillatory background, exp of a two-mode sine
product with a randomly drawn discrete amplitude, overprinted with thin
high-value channels whose presence, position and width are random.  Values
live on fine-grid cells, row-major.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError
from .grid import FineGrid, Neighborhood

__all__ = [
    "ChannelTemplate",
    "FieldConfig",
    "PermeabilityField",
    "Patch",
    "default_channels",
    "sample_field",
    "restrict",
    "mean_field",
    "write_field",
    "read_field",
]


@dataclass(frozen=True)
class ChannelTemplate:
    """One randomized strip: vertical ("v") or horizontal ("h").

    ``pos`` is the across-strip center coordinate, ``span`` the along-strip
    extent, both in unit-square coordinates.  Width is drawn uniformly from
    ``width_cells`` (inclusive); the center jitters by up to ``jitter_cells``
    fine cells and the span endpoints by up to ``span_jitter_cells``.
    """

    axis: str
    pos: float
    span: tuple[float, float] = (0.0, 1.0)
    width_cells: tuple[int, int] = (1, 2)
    prob: float = 0.7
    jitter_cells: int = 2
    span_jitter_cells: int = 0

    def __post_init__(self):
        if self.axis not in ("v", "h"):
            raise ValueError(f"axis must be 'v' or 'h', got {self.axis!r}")
        if self.width_cells[0] < 1:
            raise ValueError("channel width must be at least one fine cell")


def default_channels() -> tuple[ChannelTemplate, ...]:
    """Template family: a vertical strip near x=0.3 that can intersect a
    horizontal strip near y=0.4, plus a short strip near (0.75, 0.25) that
    appears and disappears between realizations."""
    return (
        ChannelTemplate(axis="v", pos=0.30),
        ChannelTemplate(axis="h", pos=0.40),
        ChannelTemplate(axis="h", pos=0.25, span=(0.625, 0.875), span_jitter_cells=2),
    )


@dataclass(frozen=True)
class FieldConfig:
    """Sampler parameters; the grid is part of the configuration."""

    grid: FineGrid
    amp_levels: int = 11
    channel_value: float = 1000.0
    channels: tuple[ChannelTemplate, ...] = dataclass_field(default_factory=default_channels)
    base_seed: int = 0

    def __post_init__(self):
        if self.amp_levels < 2:
            raise ValueError(f"need at least 2 amplitude levels, got {self.amp_levels}")
        if self.channel_value <= 0:
            raise ValueError("channel value must be positive")


@dataclass(frozen=True)
class ChannelDraw:
    """Realized parameters of one template."""

    active: bool
    jitter: int
    width: int
    span_jitter: int


@dataclass(frozen=True, eq=False)
class PermeabilityField:
    """Per-fine-cell coefficient values of one realization."""

    grid: FineGrid
    values: np.ndarray = dataclass_field(repr=False)
    amp: float = 0.0
    draws: tuple[ChannelDraw, ...] = ()
    seed: int = 0

    def as_image(self) -> np.ndarray:
        return self.values.reshape(self.grid.ny, self.grid.nx)


@dataclass(frozen=True, eq=False)
class Patch:
    """Local per-cell values of one neighborhood, row-major over the patch."""

    values: np.ndarray
    cells_shape: tuple[int, int]

    def __post_init__(self):
        if len(self.values) != self.cells_shape[0] * self.cells_shape[1]:
            raise DimensionMismatchError(
                f"patch has {len(self.values)} values, shape {self.cells_shape}"
            )

    def as_image(self) -> np.ndarray:
        return self.values.reshape(self.cells_shape)


def _background(grid: FineGrid, amp: float) -> np.ndarray:
    centers = grid.cell_centers()
    x, y = centers[:, 0], centers[:, 1]
    expo = amp * np.sin(7 * np.pi * x) * np.sin(8 * np.pi * y) + np.sin(10 * np.pi * x) * np.sin(
        12 * np.pi * y
    )
    return np.exp(expo)


def _channel_mask(grid: FineGrid, tpl: ChannelTemplate, draw: ChannelDraw) -> np.ndarray:
    """Covered cells as integer index ranges: ``width`` contiguous columns
    (rows) across the strip, span endpoints rounded to cell boundaries."""
    cell_i = np.arange(grid.n_cells) % grid.nx
    cell_j = np.arange(grid.n_cells) // grid.nx
    if tpl.axis == "v":
        across, along = cell_i, cell_j
        n_across, n_along = grid.nx, grid.ny
    else:
        across, along = cell_j, cell_i
        n_across, n_along = grid.ny, grid.nx
    start = int(round(tpl.pos * n_across - draw.width / 2.0)) + draw.jitter
    lo = int(round(tpl.span[0] * n_along)) + draw.span_jitter
    hi = int(round(tpl.span[1] * n_along)) + draw.span_jitter
    return (across >= start) & (across < start + draw.width) & (along >= lo) & (along < hi)


def sample_field(config: FieldConfig, seed: int) -> PermeabilityField:
    """Draw one realization; bit-identical for equal (config, seed)."""
    rng = np.random.default_rng([config.base_seed, int(seed)])
    level = int(rng.integers(0, config.amp_levels))
    amp = level / (config.amp_levels - 1)
    values = _background(config.grid, amp)
    draws = []
    for tpl in config.channels:
        draw = ChannelDraw(
            active=bool(rng.random() < tpl.prob),
            jitter=int(rng.integers(-tpl.jitter_cells, tpl.jitter_cells + 1)),
            width=int(rng.integers(tpl.width_cells[0], tpl.width_cells[1] + 1)),
            span_jitter=int(rng.integers(-tpl.span_jitter_cells, tpl.span_jitter_cells + 1)),
        )
        draws.append(draw)
        if draw.active:
            values[_channel_mask(config.grid, tpl, draw)] = config.channel_value
    return PermeabilityField(
        grid=config.grid, values=values, amp=amp, draws=tuple(draws), seed=int(seed)
    )


def restrict(field: PermeabilityField, nbhd: Neighborhood) -> Patch:
    """Copy a neighborhood's cell values in local (row-major) order."""
    if field.grid.nx != nbhd.grid.fine.nx or field.grid.ny != nbhd.grid.fine.ny:
        raise DimensionMismatchError(
            f"field grid {field.grid.nx}x{field.grid.ny} does not match neighborhood grid "
            f"{nbhd.grid.fine.nx}x{nbhd.grid.fine.ny}"
        )
    return Patch(values=field.values[nbhd.fine_cells].copy(), cells_shape=nbhd.cells_shape)


def mean_field(patches: list[Patch]) -> Patch:
    """Pointwise arithmetic mean of equally-shaped patches."""
    if not patches:
        raise ValueError("cannot average an empty list of patches")
    shape = patches[0].cells_shape
    if any(p.cells_shape != shape for p in patches):
        raise DimensionMismatchError("patches have mismatched shapes")
    stacked = np.stack([p.values for p in patches])
    return Patch(values=stacked.mean(axis=0), cells_shape=shape)


def write_field(field: PermeabilityField, path: str | Path) -> None:
    """Text format: header ``FIELD nx ny`` then row-major cell values."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"FIELD {field.grid.nx} {field.grid.ny}\n")
        for j in range(field.grid.ny):
            row = field.values[j * field.grid.nx : (j + 1) * field.grid.nx]
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_field(path: str | Path) -> PermeabilityField:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "FIELD":
            raise ValueError(f"{path}: not a field file")
        nx, ny = int(header[1]), int(header[2])
        values = np.array(fh.read().split(), dtype=float)
    if len(values) != nx * ny:
        raise DimensionMismatchError(f"{path}: expected {nx * ny} values, found {len(values)}")
    return PermeabilityField(grid=FineGrid(nx, ny), values=values)
