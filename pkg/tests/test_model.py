import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from conftest import random_cells
from hierplace import engine as E
from hierplace.errors import ConfigError, DivergenceError
from hierplace.experiment import run_experiment, summarize, summary_csv, welch_p
from hierplace.grid import CellIndex, GridSpec, build_vocabulary
from hierplace.model import ModelConfig, NextPlaceModel, evaluate, make_batch, make_batches, train
from hierplace.trajectories import DatasetSplit, TokenizedTrajectory

SPEC = GridSpec()


def vocab_of(n, seed=0):
    return build_vocabulary(random_cells(np.random.default_rng(seed), n, extent=200), SPEC)


def seq(places, rng=None):
    n = len(places)
    z = np.zeros(n, dtype=np.int64)
    return TokenizedTrajectory(np.asarray(places, dtype=np.int64), z, z + 3, z + 1)


def cycle_data(V, n_seq, length, seed=0):
    rng = np.random.default_rng(seed)
    return [seq((int(rng.integers(V)) + np.arange(length)) % V) for _ in range(n_seq)]


def test_parameter_count_closed_form():
    V = 1000
    m = NextPlaceModel(ModelConfig(), vocab_of(V))
    d, H, In = 64, 128, 64 + 4 + 8 + 4
    expected = (V * d + 7 * 4 + 24 * 8 + 8 * 4
                + (In * 4 * H + H * 4 * H + 4 * H)
                + (H * 4 * H + H * 4 * H + 4 * H)
                + (2 * H * d + d) + V)
    assert m.n_parameters() == expected
    hier = NextPlaceModel(ModelConfig(method="hier"), vocab_of(V))
    non = NextPlaceModel(ModelConfig(method="nonhier"), vocab_of(V))
    assert hier.n_parameters() == non.n_parameters()


def test_config_guards():
    with pytest.raises(ConfigError):
        ModelConfig(readout=32)
    with pytest.raises(ConfigError):
        ModelConfig(method="flat")
    with pytest.raises(ConfigError):
        ModelConfig(dtype="float16")


def test_weight_tying_identity_and_effect():
    vocab = vocab_of(30)
    m = NextPlaceModel(ModelConfig(hidden=8, method="nonhier"), vocab)
    assert m.output_weight is m.place
    b = make_batch([seq([3, 5, 7])])
    r0, _ = m.readout(b)
    logits0 = r0.value @ m.place.value.T
    m.place.value[3] += 0.5   # row 3 is an input of step 1 and also output logit 3
    r1, _ = m.readout(b)
    logits1 = r1.value @ m.place.value.T
    assert not np.allclose(r0.value, r1.value)
    assert not np.allclose(logits0[:, 3], logits1[:, 3])


def test_uniform_logits_give_log_v():
    vocab = vocab_of(50)
    m = NextPlaceModel(ModelConfig(hidden=8), vocab)
    m.readout_w.value[...] = 0
    m.readout_b.value[...] = 0
    data = cycle_data(50, 7, 5)
    a = evaluate(m, data)
    assert math.isclose(a, math.log(50), rel_tol=1e-6)
    assert evaluate(m, data) == a


def test_padding_does_not_leak():
    vocab = vocab_of(40)
    m = NextPlaceModel(ModelConfig(hidden=8, dtype="float64"), vocab)
    seqs = [seq([1, 2, 3, 4, 5]), seq([7, 8]), seq([9, 10, 11])]
    batch_loss = float(m.loss(make_batch(seqs)).value)
    per = [(float(m.loss(make_batch([s])).value), len(s) - 1) for s in seqs]
    expected = sum(l * n for l, n in per) / sum(n for _, n in per)
    assert math.isclose(batch_loss, expected, rel_tol=1e-12)


def test_make_batches_cover_once():
    data = [seq(list(range(n % 7 + 2))) for n in range(100)]
    batches = make_batches(data, 8, np.random.default_rng(0))
    assert sum(len(b.lengths) for b in batches) == 100
    assert sorted(int(x) for b in batches for x in b.lengths) == sorted(len(s) for s in data)
    assert all(len(b.lengths) <= 8 for b in batches)


def test_single_place_vocabulary_loss_is_zero():
    vocab = build_vocabulary({CellIndex("125m", 0, 0)}, SPEC)
    data = [seq([0, 0, 0, 0]) for _ in range(12)]
    m = NextPlaceModel(ModelConfig(hidden=8, epochs=5), vocab)
    r = train(m, DatasetSplit(data, data[:2], data[:2]))
    assert r.train_loss[-1] < 1e-6 and r.test_loss < 1e-6


def test_overfit_fixture():
    V = 20
    data = cycle_data(V, 50, 8)
    cfg = ModelConfig(epochs=40, batch_size=8, lr=1e-2, method="nonhier")
    m = NextPlaceModel(cfg, vocab_of(V))
    r = train(m, DatasetSplit(data, data[:5], data[:5]))
    assert min(r.train_loss) < 0.1


def small_setup(method="hier", epochs=3, seed=0):
    V = 60
    vocab = vocab_of(V, seed=1)
    data = cycle_data(V, 80, 6, seed=2)
    cfg = ModelConfig(method=method, hidden=16, epochs=epochs, batch_size=8, lr=5e-3, avg_interval=3)
    return NextPlaceModel(cfg, vocab, seed=seed), DatasetSplit(data[:60], data[60:70], data[70:])


def test_training_invariants():
    m, split = small_setup()
    seen = []

    def check(epoch, metrics):
        for level, _ in m.partition.slices:
            c0, c1 = m.partition.columns(level)
            for s, e in m.vocab.region_ranges[level].values():
                blk = m.place.value[s:e, c0:c1]
                assert (blk == blk[0]).all()
        seen.append(epoch)

    r = train(m, split, on_epoch=check)
    assert seen == [1, 2, 3]
    assert m.output_weight is m.place
    assert r.selected_epoch == int(np.argmin(r.val_loss)) + 1
    assert math.isclose(r.test_loss, evaluate(m, split.test), rel_tol=0, abs_tol=0)


def test_training_deterministic():
    runs = []
    for _ in range(2):
        m, split = small_setup(seed=4)
        r = train(m, split)
        runs.append((list(r.records()), {k: v.tobytes() for k, v in m.state_dict().items()}))
    assert runs[0] == runs[1]


def test_divergence_is_reported():
    m, split = small_setup(epochs=1)
    m.readout_w.value[0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train(m, split)


# -- statistics ------------------------------------------------------------

def test_welch_conventions():
    assert welch_p([1.0, 1.0, 1.0], [1.0, 1.0, 1.0]) == 1.0
    assert welch_p([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0
    a = np.linspace(0, 1, 10)
    assert welch_p(a, a + 10) < 1e-6


def test_welch_matches_hand_formula():
    rng = np.random.default_rng(8)
    a = rng.normal(7.84, 0.01, 10)
    b = rng.normal(7.85, 0.02, 10)
    va, vb = a.var(ddof=1) / 10, b.var(ddof=1) / 10
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / 9 + vb ** 2 / 9)
    p = 2 * stats.t.sf(abs(t), df)
    assert math.isclose(welch_p(a, b), p, rel_tol=1e-9)


def test_summary_order_and_csv():
    rows = summarize({"nonhier": [3.0, 3.1], "hier": [1.0, 1.1], "hier1km": [2.0, 2.2]})
    assert [r.method for r in rows] == ["hier", "hier1km", "nonhier"]
    text = summary_csv(rows)
    lines = text.splitlines()
    assert lines[0] == "method,mean,std,p_vs_next"
    assert lines[1].startswith("hier,1.050000,0.070711,")
    assert lines[3].endswith(",")  # last row has no successor


def test_run_experiment_counts():
    m, split = small_setup(epochs=1)
    from hierplace.experiment import PreparedData

    data = PreparedData(m.vocab, split)
    runs, rows = run_experiment(data, replace(m.cfg), ["hier", "nonhier"], [0, 1, 2])
    assert [(r.method, r.seed) for r in runs] == [(mm, s) for mm in ("hier", "nonhier") for s in (0, 1, 2)]
    assert {r.method for r in rows} == {"hier", "nonhier"}
