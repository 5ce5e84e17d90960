import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_cells
from hierplace.engine import Parameter
from hierplace.errors import ConfigError, DataError
from hierplace.grid import CellIndex, GridSpec, Level, build_vocabulary, parent
from hierplace.hier_embedding import (
    HierEmbeddingMatrix, SlicePartition, average_slices, make_partition, read_embedding_text,
    write_embedding_text,
)

SPEC = GridSpec()


def brute_force_average(mat, vocab, partition):
    """Per-element loop over region member sets found by parent() filtering."""
    out = mat.astype(np.float64).copy()
    for level, _ in partition.slices:
        c0, c1 = partition.columns(level)
        regions = {}
        for i, cell in enumerate(vocab.tokens):
            regions.setdefault(parent(cell, level, vocab.spec), []).append(i)
        for members in regions.values():
            members = sorted(members)
            for k in range(c0, c1):
                base = out[members[0], k]
                acc = 0.0
                for j in members:
                    acc += out[j, k] - base
                mean = base + acc / len(members)
                for j in members:
                    out[j, k] = mean
    return out.astype(mat.dtype)


def make_emb(vocab, method="hier", d=64, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    part = make_partition(method, d, [lv.name for lv in vocab.spec.upper_levels])
    p = Parameter(rng.normal(size=(len(vocab), d)).astype(dtype))
    return HierEmbeddingMatrix(p, part, vocab)


def test_partitions_at_64():
    assert make_partition("hier").describe() == "12,20,32"
    assert make_partition("hier1km").describe() == "20,44"
    assert make_partition("hier10km").describe() == "12,52"
    assert make_partition("nonhier").describe() == "64"
    assert make_partition("hier").columns("10km") == (0, 12)
    assert make_partition("hier").columns("1km") == (12, 32)
    assert make_partition("hier1km").columns("1km") == (0, 20)


def test_partition_small_and_guards():
    assert make_partition("hier", 8).widths == (2, 2, 4)
    with pytest.raises(ConfigError):
        SlicePartition(64, (("10km", 40), ("1km", 40)))
    with pytest.raises(ConfigError):
        make_partition("hier5km")
    with pytest.raises(ConfigError):
        make_partition("hier", 64, ["10km"])


def test_single_place_region_unchanged():
    vocab = build_vocabulary({CellIndex("125m", 0, 0), CellIndex("125m", 100, 100)}, SPEC)
    emb = make_emb(vocab)
    before = emb.matrix.copy()
    emb.average_slices()
    assert np.array_equal(before, emb.matrix)


def test_two_place_mean():
    vocab = build_vocabulary({CellIndex("125m", 0, 0), CellIndex("125m", 1, 0)}, SPEC)
    emb = make_emb(vocab)
    emb.matrix[0, :32] = 1.0
    emb.matrix[1, :32] = 3.0
    average_slices(emb)
    assert (emb.matrix[:, :32] == 2.0).all()


def test_bulk_equals_brute_force_300():
    rng = np.random.default_rng(11)
    vocab = build_vocabulary(random_cells(rng, 300, extent=200), SPEC)
    emb = make_emb(vocab, seed=3)
    expected = brute_force_average(emb.matrix, vocab, emb.partition)
    emb.average_slices()
    assert np.array_equal(emb.matrix, expected)


@pytest.mark.parametrize("method", ["hier", "hier1km", "hier10km", "nonhier"])
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 400))
def test_averaging_properties(method, seed, n):
    rng = np.random.default_rng(seed)
    vocab = build_vocabulary(random_cells(rng, n, extent=200), SPEC)
    emb = make_emb(vocab, method, seed=seed)
    before = emb.matrix.copy()
    emb.average_slices()
    after = emb.matrix.copy()
    place0 = emb.partition.d - emb.partition.place_width
    assert before[:, place0:].tobytes() == after[:, place0:].tobytes()
    if method == "nonhier":
        assert before.tobytes() == after.tobytes()
    for level, _ in emb.partition.slices:
        c0, c1 = emb.partition.columns(level)
        for s, e in vocab.region_ranges[level].values():
            block = after[s:e, c0:c1]
            assert np.abs(block - block[0]).max() == 0.0
            np.testing.assert_allclose(block.mean(axis=0), before[s:e, c0:c1].mean(axis=0), rtol=1e-12, atol=1e-12)
    emb.average_slices()
    assert emb.matrix.tobytes() == after.tobytes()


def test_float32_within_one_ulp_of_brute_force():
    rng = np.random.default_rng(12)
    vocab = build_vocabulary(random_cells(rng, 300, extent=200), SPEC)
    emb = make_emb(vocab, seed=4, dtype=np.float32)
    expected = brute_force_average(emb.matrix, vocab, emb.partition)
    emb.average_slices()
    assert np.all(np.abs(emb.matrix - expected) <= np.spacing(np.abs(expected)))


def test_mismatched_shapes_rejected():
    vocab = build_vocabulary({CellIndex("125m", 0, 0)}, SPEC)
    with pytest.raises(ConfigError):
        HierEmbeddingMatrix(Parameter(np.zeros((2, 64))), make_partition("hier"), vocab)
    with pytest.raises(ConfigError):
        HierEmbeddingMatrix(Parameter(np.zeros((1, 64))), SlicePartition(64, (("5km", 4),)), vocab)


def test_export_round_trip():
    rng = np.random.default_rng(0)
    vocab = build_vocabulary(random_cells(rng, 50), SPEC)
    emb = make_emb(vocab, "hier10km", dtype=np.float32)
    buf = io.StringIO()
    write_embedding_text(buf, vocab.coords(), emb.matrix, emb.partition)
    buf.seek(0)
    assert buf.readline() == f"50 64 12,52\n"
    buf.seek(0)
    coords, mat, widths = read_embedding_text(buf)
    assert np.array_equal(coords, vocab.coords()) and widths == (12, 52)
    np.testing.assert_allclose(mat, emb.matrix, rtol=1e-6)
    assert np.array_equal(mat.astype(np.float32), emb.matrix)  # 9 digits round-trip float32 exactly


def test_export_parse_errors():
    with pytest.raises(DataError):
        read_embedding_text(io.StringIO("1 64\n"))
    with pytest.raises(DataError):
        read_embedding_text(io.StringIO("1 4 2,3\n0 0 1 2 3 4\n"))
    with pytest.raises(DataError):
        read_embedding_text(io.StringIO("1 4 4\n0 0 1 2 3\n"))
