"""Data preparation and the multi-seed experiment runner.

One session trains one (method, seed) pair and writes a checkpoint plus a
metrics stream.  Sessions are independent, so they can run in a process pool;
results are always collected in (method, seed) order.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from . import trajectories as tj
from .checkpoint import atomic_write, save_model
from .grid import GridSpec, HierarchicalVocabulary, build_vocabulary
from .model import ModelConfig, NextPlaceModel, RunMetrics, train


@dataclass
class PreparedData:
    vocab: HierarchicalVocabulary
    split: tj.DatasetSplit  # of TokenizedTrajectory chunks

    @property
    def spec(self) -> GridSpec:
        return self.vocab.spec

    def visit_counts(self) -> np.ndarray:
        """Per-place visit counts from the training split only."""
        return tj.visit_counts(self.split.train, len(self.vocab))


def prepare(raw, spec: GridSpec, buckets: tj.BucketConfig = tj.BucketConfig(), split_seed: int = 0,
            ratios=(0.8, 0.1, 0.1), max_len: int = 64, vocab: HierarchicalVocabulary | None = None) -> PreparedData:
    """Split users, build the closed vocabulary over all splits, tokenize and chunk.

    Passing ``vocab`` (e.g. from a checkpoint) reuses it; any cell outside it is a
    :class:`DataError`.
    """
    split = tj.split_dataset(raw, ratios, split_seed)
    if vocab is None:
        vocab = build_vocabulary(tj.observed_cells(raw, spec), spec)

    def tok(trajs):
        return [c for t in trajs for c in tj.chunk(tj.tokenize(t, vocab, spec, buckets), max_len)]

    return PreparedData(vocab, tj.DatasetSplit(tok(split.train), tok(split.validation), tok(split.test)))


def welch_p(a, b) -> float:
    """Two-sided Welch t-test p-value.

    Degenerate zero-variance samples give p = 1 for equal means and p = 0
    otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        return float("nan")
    if a.var() == 0 and b.var() == 0:
        return 1.0 if a.mean() == b.mean() else 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


@dataclass
class MethodSummary:
    method: str
    losses: list
    p_vs_next: float = float("nan")

    @property
    def mean(self) -> float:
        return float(np.mean(self.losses))

    @property
    def std(self) -> float:
        return float(np.std(self.losses, ddof=1)) if len(self.losses) > 1 else 0.0


def summarize(results: dict) -> list[MethodSummary]:
    """``results`` maps method to test losses.  Rows come sorted by mean loss;
    each row's p-value compares it with the next row in that ordering."""
    rows = sorted((MethodSummary(m, list(v)) for m, v in results.items()), key=lambda r: (r.mean, r.method))
    for a, b in zip(rows, rows[1:]):
        a.p_vs_next = welch_p(a.losses, b.losses)
    return rows


def summary_csv(rows) -> str:
    lines = ["method,mean,std,p_vs_next"]
    for r in rows:
        p = "" if math.isnan(r.p_vs_next) else f"{r.p_vs_next:.6g}"
        lines.append(f"{r.method},{r.mean:.6f},{r.std:.6f},{p}")
    return "\n".join(lines) + "\n"


def metrics_jsonl(metrics: RunMetrics) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in metrics.records())


def run_session(data: PreparedData, cfg: ModelConfig, seed: int, out_dir=None, config_hash: str = "",
                threads: int = 1) -> RunMetrics:
    model = NextPlaceModel(cfg, data.vocab, seed=seed)
    metrics = train(model, data.split, cfg, config_hash=config_hash, threads=threads)
    if out_dir is not None:
        stem = os.path.join(out_dir, metrics.run_id)
        save_model(stem + ".ckpt", model, config_hash, extra={"selected_epoch": metrics.selected_epoch})
        atomic_write(stem + ".metrics.jsonl", metrics_jsonl(metrics))
    return metrics


def _session_job(args):
    data, cfg, seed, out_dir, config_hash, threads = args
    from .threads import limit_threads

    with limit_threads(threads):
        return run_session(data, cfg, seed, out_dir, config_hash, threads)


def run_experiment(data: PreparedData, base: ModelConfig, methods, seeds, out_dir=None, workers: int = 1,
                   config_hash: str = "", threads: int = 1):
    """Train every (method, seed) pair; returns ``(metrics list, summary rows)``.

    The summary CSV is written to ``out_dir/summary.csv`` when ``out_dir`` is set.
    """
    jobs = [(data, replace(base, method=m), s, out_dir, config_hash, threads) for m in methods for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_session_job, jobs))
    else:
        runs = [_session_job(j) for j in jobs]
    results: dict[str, list] = {m: [] for m in methods}
    for r in runs:
        results[r.method].append(r.test_loss)
    rows = summarize(results)
    if out_dir is not None:
        atomic_write(os.path.join(out_dir, "summary.csv"), summary_csv(rows))
    return runs, rows
