"""Acceptance criteria 1-8, each at its stated tolerance.

Every test records one PASS/FAIL line, printed in the "acceptance criteria"
section of the pytest summary.  Criteria 4-6 train real models and take about
half an hour together on one core; they are marked ``slow`` but run by default.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, random_cells
from test_hier_embedding import brute_force_average, make_emb

from hierplace import cli
from hierplace import probe as P
from hierplace.checkpoint import load_model
from hierplace.config import RunConfig
from hierplace.experiment import prepare, run_experiment, welch_p
from hierplace.grid import GridSpec, Level, build_vocabulary, parent
from hierplace.model import gradcheck_instance
from hierplace.synth import synth_generate

ROOT = Path(__file__).resolve().parents[1]
METHODS = ("hier", "hier1km", "hier10km", "nonhier")


def record(n, ok, text):
    ACCEPTANCE_LINES[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {text}"
    assert ok, ACCEPTANCE_LINES[n]


def test_criterion_1_gradient_check():
    t = time.perf_counter()
    worst = max(gradcheck_instance(seed).max_rel_error for seed in range(20))
    dt = time.perf_counter() - t
    record(1, worst < 1e-4 and dt < 60,
           f"full-model gradcheck, 20 instances at float64: max rel error {worst:.2e} (< 1e-4) in {dt:.1f}s (< 60s)")


TWO_LEVEL = GridSpec(levels=(Level("10km", 10000), Level("1km", 1000), Level("125m", 125)))


def test_criterion_2_averaging_oracle():
    t = time.perf_counter()
    ok = True
    for k in range(50):
        rng = np.random.default_rng(1000 + k)
        vocab = build_vocabulary(random_cells(rng, int(rng.integers(1, 501)), extent=240), TWO_LEVEL)
        emb = make_emb(vocab, "hier", seed=k)
        before = emb.matrix.copy()
        expected = brute_force_average(before, vocab, emb.partition)
        emb.average_slices()
        once = emb.matrix.copy()
        emb.average_slices()
        place0 = emb.partition.d - emb.partition.place_width
        ok &= np.array_equal(once, expected)
        ok &= once.tobytes() == emb.matrix.tobytes()
        ok &= once[:, place0:].tobytes() == before[:, place0:].tobytes()
    dt = time.perf_counter() - t
    record(2, bool(ok) and dt < 10,
           f"bulk averaging == brute force exactly, idempotent, place slice fixed on 50 vocabularies in {dt:.1f}s (< 10s)")


def test_criterion_3_layout():
    t = time.perf_counter()
    ok = True
    for k in range(100):
        rng = np.random.default_rng(2000 + k)
        v = build_vocabulary(random_cells(rng, int(rng.integers(1, 400)), extent=240), TWO_LEVEL)
        for lv in TWO_LEVEL.upper_levels:
            # members by direct parent filtering, independent of the token order
            members = {}
            for i, cell in enumerate(v.tokens):
                members.setdefault(parent(cell, lv.name, TWO_LEVEL), set()).add(i)
            ok &= members.keys() == v.region_ranges[lv.name].keys()
            covered = []
            for region, (s, e) in v.region_ranges[lv.name].items():
                ok &= set(range(s, e)) == members.get(region)
                covered += range(s, e)
            ok &= sorted(covered) == list(range(len(v)))
        for region, (s, e) in v.region_ranges["1km"].items():
            ps, pe = v.region_ranges["10km"][parent(region, "10km", TWO_LEVEL)]
            ok &= ps <= s and e <= pe
    dt = time.perf_counter() - t
    record(3, bool(ok) and dt < 10,
           f"region intervals contiguous, nested and partitioning on 100 cell sets in {dt:.1f}s (< 10s)")


def _data(conf):
    cfg = RunConfig.load(ROOT / "configs" / conf).validate()
    trajs, truth, _ = synth_generate(cfg.synth())
    data = prepare(trajs, cfg.grid(), cfg.buckets(), cfg["data.split_seed"], max_len=cfg["data.max_len"])
    return cfg, data, truth


@pytest.mark.slow
def test_criterion_4_entropy_calibration():
    cfg, data, _ = _data("entropy.conf")
    ln_v = math.log(len(data.vocab))
    parts, ok = [], 1900 <= len(data.vocab) <= 2100
    for m in METHODS:
        t = time.perf_counter()
        (run,), _ = run_experiment(data, cfg.model(), [m], cfg["run.seeds"])
        dt = time.perf_counter() - t
        rel = abs(run.test_loss - ln_v) / ln_v
        ok &= rel < 0.02 and dt < 15 * 60
        parts.append(f"{m} {run.test_loss:.4f} ({100 * rel:.2f}%, {dt:.0f}s)")
    record(4, ok, f"alpha=0, |V|={len(data.vocab)}, ln|V|={ln_v:.4f}: " + ", ".join(parts) + " (each within 2%)")


@pytest.fixture(scope="module")
def ordering(tmp_path_factory):
    cfg, data, truth = _data("ordering.conf")
    out = tmp_path_factory.mktemp("ordering")
    t = time.perf_counter()
    runs, rows = run_experiment(data, cfg.model(), cfg["run.methods"], cfg["run.seeds"], str(out), config_hash=cfg.hash())
    return cfg, data, truth, runs, time.perf_counter() - t, out


@pytest.mark.slow
def test_criterion_5_ordering(ordering):
    cfg, data, _, runs, dt, _ = ordering
    loss = {m: [r.test_loss for r in runs if r.method == m] for m in METHODS}
    mean = {m: float(np.mean(v)) for m, v in loss.items()}
    p = welch_p(loss["hier"], loss["nonhier"])
    shape = 3900 <= len(data.vocab) <= 4100 and all(len(v) == 10 for v in loss.values())
    order = mean["hier"] < mean["hier1km"] <= mean["hier10km"] < mean["nonhier"]
    means = ", ".join(f"{m} {mean[m]:.4f}±{np.std(loss[m], ddof=1):.4f}" for m in METHODS)
    record(5, shape and order and p < 0.05,
           f"|V|={len(data.vocab)}, 10 seeds: {means}; hier<hier1km<=hier10km<nonhier {order}, "
           f"Welch p(hier, nonhier)={p:.2e} (< 0.05), {dt / 60:.0f} min")


@pytest.mark.slow
def test_criterion_6_probe_gain(ordering):
    cfg, data, truth, runs, _, out_dir = ordering
    labels = P.token_labels_from_cells(data.vocab.coords(), truth)
    visits = data.visit_counts()
    rural, slowest = {}, 0.0
    for r in runs:
        if r.method not in ("hier", "nonhier"):
            continue
        model, _, _ = load_model(out_dir / f"{r.run_id}.ckpt")
        t = time.perf_counter()
        out = P.run_probe(model.place.value.astype(np.float64), labels, visits, cfg["probe.split_seed"],
                          cfg["probe.epochs"], cfg["probe.lr"], cfg["probe.seed"], cfg["probe.rural_percentile"],
                          cfg["synth.n_classes"])
        slowest = max(slowest, time.perf_counter() - t)
        rural.setdefault(r.method, []).append(out.accuracy["rural"])
    gain = float(np.mean(rural["hier"]) - np.mean(rural["nonhier"]))
    record(6, gain >= 0.03 and slowest < 60,
           f"rural probe accuracy hier {np.mean(rural['hier']):.3f} vs nonhier {np.mean(rural['nonhier']):.3f}: "
           f"gain {100 * gain:+.1f} points (>= +3), slowest probe {slowest:.1f}s (< 60s)")


TINY = """
synth.regions_per_side = 1
synth.ratios = 3,4
synth.places_per_leaf = 12
synth.n_users = 400
synth.mean_length = 6
model.d = 8
model.readout = 8
model.hidden = 6
model.epochs = 2
model.batch_size = 16
model.lr = 0.01
grid.levels = 1500m:1500,500m:500,125m:125
run.seeds = 0,1
"""


def _run_all_commands(workdir: Path, monkeypatch):
    monkeypatch.chdir(workdir)
    Path("tiny.conf").write_text(TINY)
    common = ["--config", "tiny.conf", "--out", "out", "--threads", "1"]
    for cmd in ("synth", "train", "evaluate", "probe", "export"):
        assert cli.main([cmd, *common]) == 0, cmd
    return {p.name: p.read_bytes() for p in sorted(Path("out").iterdir())}


def test_criterion_7_determinism(tmp_path, monkeypatch):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first = _run_all_commands(tmp_path / "a", monkeypatch)
    second = _run_all_commands(tmp_path / "b", monkeypatch)
    metrics = [n for n in first if n.endswith(".metrics.jsonl")]
    differ = sorted(n for n in first if first[n] != second.get(n))
    ok = first.keys() == second.keys() and not differ and len(metrics) == 8
    record(7, ok, f"synth/train/evaluate/probe/export rerun at 1 thread: {len(first)} output files "
                  f"({len(metrics)} metrics streams) bit-identical" + (f"; differing: {differ}" if differ else ""))


def test_criterion_8_documented_reference_values():
    readme = (ROOT / "README.md").read_text(encoding="utf-8")
    needles = ["7.8406", "0.0097", "0.725", "0.015", "not publicly available"]
    missing = [s for s in needles if s not in readme]
    record(8, not missing, "README states reference loss 7.8406 ± 0.0097 and probe accuracy 0.725 ± 0.015 "
                           "with a data-unavailability note" + (f"; missing {missing}" if missing else ""))
