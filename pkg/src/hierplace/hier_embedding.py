"""Place-embedding matrix whose leading columns are shared per region.

Each upper grid level owns a block of columns ("slice").  Periodically every
place's slice for level ``l`` is replaced by the mean slice over all places in
the same level-``l`` region, so those columns carry region information that
rarely-visited places get for free.  Because the vocabulary keeps each region's
places in one contiguous run of rows, a region's slice is a plain 2-D block of
the matrix and the averaging is one read and one write per block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .engine import Parameter
from .errors import ConfigError, DataError
from .grid import HierarchicalVocabulary

METHODS = ("hier", "hier1km", "hier10km", "nonhier")

# column widths at d = 64, keyed by index into the grid's upper levels
_METHOD_WIDTHS = {
    "hier": {0: 12, 1: 20},
    "hier1km": {1: 20},
    "hier10km": {0: 12},
    "nonhier": {},
}


@dataclass(frozen=True)
class SlicePartition:
    d: int
    slices: tuple[tuple[str, int], ...] = ()  # (level name, width), coarse first

    def __post_init__(self):
        object.__setattr__(self, "slices", tuple((str(n), int(w)) for n, w in self.slices))
        if any(w <= 0 for _, w in self.slices):
            raise ConfigError(f"slice widths must be positive: {self.slices}")
        if self.place_width <= 0:
            raise ConfigError(
                f"level slices {[w for _, w in self.slices]} leave no room for the place "
                f"slice in d={self.d}"
            )

    @property
    def place_width(self) -> int:
        return self.d - sum(w for _, w in self.slices)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(w for _, w in self.slices) + (self.place_width,)

    def columns(self, level: str) -> tuple[int, int]:
        start = 0
        for name, w in self.slices:
            if name == level:
                return start, start + w
            start += w
        raise KeyError(level)

    def describe(self) -> str:
        return ",".join(str(w) for w in self.widths)


def make_partition(method: str, d: int = 64, upper_levels=("10km", "1km")) -> SlicePartition:
    """Column layout for one of the four comparison methods.

    At ``d = 64``: hier -> 12 | 20 | 32, hier1km -> 20 | 44, hier10km -> 12 | 52,
    nonhier -> 64.  Other ``d`` scale the level widths proportionally.
    """
    if method not in _METHOD_WIDTHS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    upper_levels = tuple(upper_levels)
    slices = []
    for idx, w64 in sorted(_METHOD_WIDTHS[method].items()):
        if idx >= len(upper_levels):
            raise ConfigError(f"method {method} needs {idx + 1} upper levels, grid has {len(upper_levels)}")
        w = w64 if d == 64 else max(1, round(w64 * d / 64))
        slices.append((upper_levels[idx], w))
    return SlicePartition(d, tuple(slices))


class HierEmbeddingMatrix:
    def __init__(self, param: Parameter, partition: SlicePartition, vocab: HierarchicalVocabulary):
        n, d = param.value.shape
        if n != len(vocab) or d != partition.d:
            raise ConfigError(f"matrix {param.value.shape} does not match |V|={len(vocab)}, d={partition.d}")
        self.param = param
        self.partition = partition
        self.vocab = vocab
        self._blocks = []
        for level, _ in partition.slices:
            if level not in vocab.region_ranges:
                raise ConfigError(f"partition level {level!r} is not an upper grid level")
            starts, ends = vocab.intervals(level)
            _check_tiling(starts, ends, n, level)
            c0, c1 = partition.columns(level)
            self._blocks.append((level, starts, ends, c0, c1))

    @property
    def matrix(self) -> np.ndarray:
        return self.param.value

    def average_slices(self):
        mat = self.param.value
        for _, starts, ends, c0, c1 in self._blocks:
            kernels.average_intervals(mat, starts, ends, c0, c1)


def _check_tiling(starts, ends, n, level):
    ok = (
        len(starts) > 0
        and starts[0] == 0
        and ends[-1] == n
        and np.all(ends > starts)
        and np.array_equal(starts[1:], ends[:-1])
    )
    if not ok:
        raise ValueError(f"regions at level {level!r} do not tile the token range contiguously")


def average_slices(emb: HierEmbeddingMatrix):
    emb.average_slices()


# ---------------------------------------------------------------------------
# text export

def write_embedding_text(fh, coords, matrix, partition: SlicePartition):
    """``token_count d partition`` header, then ``col row v0 ... v{d-1}`` per token."""
    matrix = np.asarray(matrix)
    fh.write(f"{matrix.shape[0]} {matrix.shape[1]} {partition.describe()}\n")
    for (col, row), vec in zip(coords, matrix):
        fh.write(f"{int(col)} {int(row)} " + " ".join(f"{v:.9g}" for v in vec.tolist()) + "\n")


def read_embedding_text(fh):
    """Returns ``(coords, matrix, widths)``."""
    header = fh.readline().split()
    if len(header) != 3:
        raise DataError("embedding export header must be 'token_count d partition'")
    n, d = int(header[0]), int(header[1])
    widths = tuple(int(w) for w in header[2].split(","))
    if sum(widths) != d:
        raise DataError(f"partition {widths} does not sum to d={d}")
    coords = np.empty((n, 2), dtype=np.int64)
    matrix = np.empty((n, d), dtype=np.float64)
    for i in range(n):
        parts = fh.readline().split()
        if len(parts) != d + 2:
            raise DataError(f"embedding line {i + 2}: expected {d + 2} fields, got {len(parts)}")
        coords[i] = int(parts[0]), int(parts[1])
        matrix[i] = [float(v) for v in parts[2:]]
    return coords, matrix, widths
