import numpy as np
import pytest

from conftest import random_cells
from hierplace.checkpoint import MAGIC, decode, encode, load_model, save_model
from hierplace.errors import DataError
from hierplace.grid import GridSpec, build_vocabulary
from hierplace.model import ModelConfig, NextPlaceModel


def model(method="hier10km", seed=3):
    vocab = build_vocabulary(random_cells(np.random.default_rng(0), 40), GridSpec())
    return NextPlaceModel(ModelConfig(method=method, hidden=8), vocab, seed=seed)


def test_round_trip(tmp_path):
    m = model()
    m.place.value[...] = np.random.default_rng(1).normal(size=m.place.value.shape)
    path = tmp_path / "m.ckpt"
    save_model(path, m, "abc123", extra={"selected_epoch": 4})
    m2, meta, h = load_model(path)
    assert h == "abc123" and meta["selected_epoch"] == 4 and meta["partition"] == "12,52"
    assert m2.cfg == m.cfg and m2.seed == 3
    assert m2.vocab.tokens == m.vocab.tokens
    for k, v in m.state_dict().items():
        assert m2.state_dict()[k].tobytes() == v.tobytes()
    assert m2.output_weight is m2.place


def test_layout_is_little_endian_and_stable():
    raw = encode({"a": np.array([1.5], np.float32), "b": np.array([[1, 2]], np.int32)}, {"x": 1}, "h")
    assert raw[:4] == MAGIC and raw[4:8] == b"\x01\x00\x00\x00"
    assert raw.endswith(np.array([1, 2], "<i4").tobytes())
    tensors, meta, h = decode(raw)
    assert meta == {"x": 1} and h == "h"
    assert tensors["a"].dtype == np.float32 and tensors["b"].tolist() == [[1, 2]]


@pytest.mark.parametrize("mutate", [
    lambda r: b"XXXX" + r[4:],
    lambda r: r[:4] + b"\x09\x00\x00\x00" + r[8:],
    lambda r: r[:-3],
    lambda r: r + b"\x00",
])
def test_corruption_detected(mutate):
    raw = encode({"a": np.arange(4, dtype=np.float32)}, {}, "h")
    with pytest.raises(DataError):
        decode(mutate(raw))


def test_missing_and_empty(tmp_path):
    with pytest.raises(DataError, match="nope"):
        load_model(tmp_path / "nope.ckpt")
    m = model()
    path = tmp_path / "e.ckpt"
    save_model(path, m)
    tensors, meta, h = decode(path.read_bytes())
    tensors["vocab.coords"] = np.zeros((0, 2), np.int32)
    path.write_bytes(encode(tensors, meta, h))
    with pytest.raises(DataError, match="empty vocabulary"):
        load_model(path)
