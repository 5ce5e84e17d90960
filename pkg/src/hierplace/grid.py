"""Aligned multi-level planar grids and the region-grouped place vocabulary.

Cells are addressed by integer ``(col, row)`` at a named level.  Level 0 is the
coarsest; the last level holds the places (the tokens of the sequence model).
Every coarser cell size is an integer multiple of every finer one, so each fine
cell has exactly one parent per coarser level.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ConfigError, DataError

EARTH_RADIUS_M = 6_371_008.8


class Level(NamedTuple):
    name: str
    cell_size: float


class CellIndex(NamedTuple):
    level: str
    col: int
    row: int


DEFAULT_LEVELS = (Level("10km", 10_000.0), Level("1km", 1_000.0), Level("125m", 125.0))


@dataclass(frozen=True)
class GridSpec:
    origin_x: float = 0.0
    origin_y: float = 0.0
    levels: tuple[Level, ...] = DEFAULT_LEVELS
    _index: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        levels = tuple(Level(str(n), float(s)) for n, s in self.levels)
        if not levels:
            raise ConfigError("grid needs at least one level")
        names = [lv.name for lv in levels]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate level names: {names}")
        for coarse, fine in zip(levels, levels[1:]):
            if not coarse.cell_size > fine.cell_size:
                raise ConfigError(
                    f"levels must shrink: {coarse.name}={coarse.cell_size} "
                    f"then {fine.name}={fine.cell_size}"
                )
            ratio = coarse.cell_size / fine.cell_size
            if abs(ratio - round(ratio)) > 1e-9 * ratio:
                raise ConfigError(
                    f"{coarse.name} is not an integer multiple of {fine.name}"
                )
        if any(lv.cell_size <= 0 for lv in levels):
            raise ConfigError("cell sizes must be positive")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "_index", {lv.name: i for i, lv in enumerate(levels)})

    @property
    def finest(self) -> Level:
        return self.levels[-1]

    @property
    def upper_levels(self) -> tuple[Level, ...]:
        return self.levels[:-1]

    def level_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ConfigError(f"unknown level {name!r}; have {list(self._index)}") from None

    def cell_size(self, name: str) -> float:
        return self.levels[self.level_index(name)].cell_size

    def ratio(self, coarse: str, fine: str) -> int:
        """Number of ``fine`` cells along one side of a ``coarse`` cell."""
        ci, fi = self.level_index(coarse), self.level_index(fine)
        if ci >= fi:
            raise ConfigError(f"{coarse} is not coarser than {fine}")
        return int(round(self.levels[ci].cell_size / self.levels[fi].cell_size))


def cell_of(x: float, y: float, level: str, spec: GridSpec) -> CellIndex:
    """Cell containing point ``(x, y)``; cells are half-open ``[start, start + size)``."""
    size = spec.cell_size(level)
    dx, dy = x - spec.origin_x, y - spec.origin_y
    if dx < 0 or dy < 0:
        raise DataError(f"point ({x}, {y}) lies below the grid origin")
    return CellIndex(level, int(math.floor(dx / size)), int(math.floor(dy / size)))


def parent(cell: CellIndex, to_level: str, spec: GridSpec) -> CellIndex:
    k = spec.ratio(to_level, cell.level)
    return CellIndex(to_level, cell.col // k, cell.row // k)


def lonlat_to_meters(lon, lat, ref_lon: float, ref_lat: float):
    """Equirectangular projection around ``(ref_lon, ref_lat)``.

    Good to well under a cell width over a city-sized extent; the grid origin
    should be placed south-west of every projected point.
    """
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    k = math.pi / 180.0
    x = EARTH_RADIUS_M * (lon - ref_lon) * k * math.cos(ref_lat * k)
    y = EARTH_RADIUS_M * (lat - ref_lat) * k
    return x, y


class HierarchicalVocabulary:
    """Bijection between finest-level cells and token IDs.

    Tokens are sorted by (level-0 parent, level-1 parent, ..., cell), each
    component ordered by (row, col).  Places sharing a region at any upper
    level therefore occupy one contiguous block of IDs, nested across levels,
    which lets per-region operations work on plain array slices.
    """

    def __init__(self, tokens: list[CellIndex], spec: GridSpec):
        self.spec = spec
        self.tokens = list(tokens)
        self.id_of = {c: i for i, c in enumerate(self.tokens)}
        if len(self.id_of) != len(self.tokens):
            raise DataError("duplicate cells in vocabulary")
        self.region_ranges: dict[str, dict[CellIndex, tuple[int, int]]] = {}
        for lv in spec.upper_levels:
            ranges: dict[CellIndex, tuple[int, int]] = {}
            for i, cell in enumerate(self.tokens):
                reg = parent(cell, lv.name, spec)
                start, end = ranges.get(reg, (i, i))
                if end != i:
                    raise DataError(
                        f"region {reg} is not contiguous in the token order"
                    )
                ranges[reg] = (start, i + 1)
            self.region_ranges[lv.name] = ranges

    def __len__(self) -> int:
        return len(self.tokens)

    def intervals(self, level: str) -> tuple[np.ndarray, np.ndarray]:
        """Sorted ``(starts, ends)`` arrays of all region intervals at ``level``."""
        spans = sorted(self.region_ranges[level].values())
        arr = np.array(spans, dtype=np.int64).reshape(-1, 2)
        return arr[:, 0].copy(), arr[:, 1].copy()

    def coords(self) -> np.ndarray:
        """``(|V|, 2)`` int array of finest-cell ``(col, row)``."""
        return np.array([(c.col, c.row) for c in self.tokens], dtype=np.int64).reshape(-1, 2)

    @classmethod
    def from_coords(cls, coords, spec: GridSpec) -> "HierarchicalVocabulary":
        """Rebuild from stored ``(col, row)`` pairs, keeping their order."""
        name = spec.finest.name
        tokens = [CellIndex(name, int(c), int(r)) for c, r in coords]
        return cls(tokens, spec)


def _sort_key(cell: CellIndex, spec: GridSpec) -> tuple:
    key: list[int] = []
    for lv in spec.upper_levels:
        p = parent(cell, lv.name, spec)
        key += (p.row, p.col)
    key += (cell.row, cell.col)
    return tuple(key)


def build_vocabulary(observed_cells: Iterable[CellIndex], spec: GridSpec) -> HierarchicalVocabulary:
    cells = set(observed_cells)
    if not cells:
        raise DataError("cannot build a vocabulary from no cells")
    finest = spec.finest.name
    for c in cells:
        if c.level != finest:
            raise DataError(f"vocabulary cells must be at level {finest}, got {c}")
    tokens = sorted(cells, key=lambda c: _sort_key(c, spec))
    return HierarchicalVocabulary(tokens, spec)


def region_interval(vocab: HierarchicalVocabulary, level: str, region: CellIndex) -> range:
    try:
        start, end = vocab.region_ranges[level][region]
    except KeyError:
        raise DataError(f"no region {region} at level {level!r}") from None
    return range(start, end)
