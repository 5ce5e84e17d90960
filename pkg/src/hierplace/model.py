"""Next-place prediction model and its training protocol.

Each step's input is the place embedding concatenated with day-of-week,
time-of-day and duration embeddings.  It feeds a stack of LSTM layers; a tanh
readout over all layers' hidden states is projected onto the place embedding
matrix (weights tied with the input embedding, separate per-place output bias)
to give next-place logits.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine as E
from . import kernels
from .errors import ConfigError, DivergenceError
from .grid import HierarchicalVocabulary
from .hier_embedding import METHODS, HierEmbeddingMatrix, make_partition

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    method: str = "hier"
    d: int = 64
    hidden: int = 128
    layers: int = 2
    readout: int = 64
    dow_dim: int = 4
    tod_dim: int = 8
    dur_dim: int = 4
    n_dow: int = 7
    n_tod: int = 24
    n_dur: int = 8
    epochs: int = 40
    avg_interval: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    embed_init: float = 0.05
    dtype: str = "float32"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.readout != self.d:
            raise ConfigError("readout width must equal d for the tied output layer")
        if min(self.d, self.hidden, self.layers, self.epochs, self.avg_interval, self.batch_size) < 1:
            raise ConfigError("model sizes and counts must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def input_width(self) -> int:
        return self.d + self.dow_dim + self.tod_dim + self.dur_dim


@dataclass
class Batch:
    places: np.ndarray  # (T, B) padded with 0
    dow: np.ndarray
    tod: np.ndarray
    dur: np.ndarray
    lengths: np.ndarray  # (B,)

    @property
    def n_targets(self) -> int:
        return int((self.lengths - 1).sum())


def make_batch(trajs) -> Batch:
    lengths = np.array([len(t) for t in trajs], dtype=np.int64)
    T, B = int(lengths.max()), len(trajs)
    arrs = [np.zeros((T, B), np.int64) for _ in range(4)]
    for b, t in enumerate(trajs):
        n = len(t)
        for a, src in zip(arrs, (t.places, t.dow, t.tod, t.dur)):
            a[:n, b] = src
    return Batch(*arrs, lengths)


def make_batches(trajs, batch_size: int, rng=None, pool: int = 20) -> list[Batch]:
    """Batches of similar-length sequences.

    Sequences are shuffled (when ``rng`` is given), sorted by length inside
    pools of ``pool`` batches to cut padding, and the batch order is shuffled.
    """
    n = len(trajs)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    span = batch_size * pool
    batches = []
    for s in range(0, n, span):
        chunk = order[s:s + span]
        lens = np.array([len(trajs[i]) for i in chunk])
        chunk = chunk[np.argsort(lens, kind="stable")]
        for b in range(0, len(chunk), batch_size):
            batches.append(make_batch([trajs[i] for i in chunk[b:b + batch_size]]))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


class NextPlaceModel:
    def __init__(self, cfg: ModelConfig, vocab: HierarchicalVocabulary, seed: int = 0):
        self.cfg = cfg
        self.vocab = vocab
        self.seed = seed
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        V = len(vocab)
        a = cfg.embed_init
        upper = [lv.name for lv in vocab.spec.upper_levels]
        self.partition = make_partition(cfg.method, cfg.d, upper)
        self.place = E.Parameter(rng.uniform(-a, a, (V, cfg.d)).astype(dt), "embedding.place")
        self.embedding = HierEmbeddingMatrix(self.place, self.partition, vocab)
        self.dow = E.Parameter(rng.uniform(-a, a, (cfg.n_dow, cfg.dow_dim)).astype(dt), "embedding.dow")
        self.tod = E.Parameter(rng.uniform(-a, a, (cfg.n_tod, cfg.tod_dim)).astype(dt), "embedding.tod")
        self.dur = E.Parameter(rng.uniform(-a, a, (cfg.n_dur, cfg.dur_dim)).astype(dt), "embedding.dur")
        self.lstms = []
        n_in = cfg.input_width
        for k in range(cfg.layers):
            self.lstms.append(E.LstmParams.init(n_in, cfg.hidden, rng, dt, f"lstm{k}"))
            n_in = cfg.hidden
        lim = 1.0 / math.sqrt(cfg.hidden * cfg.layers)
        self.readout_w = E.Parameter(
            rng.uniform(-lim, lim, (cfg.hidden * cfg.layers, cfg.readout)).astype(dt), "readout.w")
        self.readout_b = E.Parameter(np.zeros(cfg.readout, dt), "readout.b")
        self.out_bias = E.Parameter(np.zeros(V, dt), "output.bias")

    @property
    def output_weight(self) -> E.Parameter:
        """The tied output projection: the very same object as the place table."""
        return self.place

    def parameters(self) -> list[E.Parameter]:
        ps = [self.place, self.dow, self.tod, self.dur]
        for lp in self.lstms:
            ps += lp.parameters()
        return ps + [self.readout_w, self.readout_b, self.out_bias]

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def state_dict(self) -> dict:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict):
        for p in self.parameters():
            v = state[p.name]
            if v.shape != p.value.shape:
                raise ConfigError(f"{p.name}: stored shape {v.shape} != model shape {p.value.shape}")
            p.value[...] = v

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- forward ---------------------------------------------------------
    def readout(self, batch: Batch, tape=None):
        """Readout vectors for every predicted step, plus their target IDs."""
        T = batch.places.shape[0] - 1
        B = batch.places.shape[1]
        parts = [
            E.embedding_lookup(self.place, batch.places[:-1].ravel(), tape),
            E.embedding_lookup(self.dow, batch.dow[:-1].ravel(), tape),
            E.embedding_lookup(self.tod, batch.tod[:-1].ravel(), tape),
            E.embedding_lookup(self.dur, batch.dur[:-1].ravel(), tape),
        ]
        x = E.reshape(E.concat(parts, axis=1, tape=tape), (T, B, self.cfg.input_width), tape)
        hs = []
        for lp in self.lstms:
            x = E.lstm_layer(x, lp, tape)
            hs.append(x)
        h = hs[0] if len(hs) == 1 else E.concat(hs, axis=2, tape=tape)
        h = E.reshape(h, (T * B, self.cfg.hidden * self.cfg.layers), tape)
        steps = np.arange(T)[:, None]
        valid = np.flatnonzero((steps + 1 < batch.lengths[None, :]).ravel())
        h = E.gather_rows(h, valid, tape)
        r = E.tanh(E.affine(h, self.readout_w, self.readout_b, tape), tape)
        return r, batch.places[1:].ravel()[valid]

    def loss(self, batch: Batch, tape=None) -> E.Node:
        r, targets = self.readout(batch, tape)
        logits = E.affine(r, self.output_weight, self.out_bias, tape, transpose=True)
        return E.softmax_cross_entropy(logits, targets, tape=tape, overwrite_logits=True)


def evaluate(model: NextPlaceModel, trajs, batch_size: int = 256) -> float:
    """Mean natural-log cross entropy per predicted step (log-perplexity)."""
    total, count = 0.0, 0
    for batch in make_batches(trajs, batch_size):
        n = batch.n_targets
        if n == 0:
            continue
        total += float(model.loss(batch).value) * n
        count += n
    if count == 0:
        raise ValueError("no predicted steps to evaluate")
    return total / count


@dataclass
class RunMetrics:
    method: str
    seed: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    selected_epoch: int = 0
    test_loss: float = float("nan")
    wall_time: float = 0.0
    config_hash: str = ""
    threads: int = 1
    backend: str = kernels.BACKEND

    @property
    def run_id(self) -> str:
        return f"{self.method}_s{self.seed}"

    def records(self):
        """Line-delimited JSON records for the metrics stream (no timing, so reruns match)."""
        for ep, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), 1):
            yield {"run_id": self.run_id, "method": self.method, "seed": self.seed, "epoch": ep,
                   "train_loss": tr, "val_loss": va}
        yield {"run_id": self.run_id, "method": self.method, "seed": self.seed,
               "selected_epoch": self.selected_epoch, "test_loss": self.test_loss,
               "config_hash": self.config_hash, "threads": self.threads, "backend": self.backend}


def train(model: NextPlaceModel, split, cfg: ModelConfig | None = None, config_hash: str = "",
          threads: int = 1, on_epoch=None) -> RunMetrics:
    """Teacher-forced training with per-epoch validation; keeps the best epoch.

    Slice averaging runs once after initialisation, every ``avg_interval``
    optimizer steps, and at the end of each epoch so the validated (and
    checkpointed) weights always satisfy the region-uniformity invariant.
    """
    cfg = cfg or model.cfg
    if not split.train:
        raise ValueError("empty training split")
    t0 = time.perf_counter()
    rng = np.random.default_rng([model.seed, 1])
    params = model.parameters()
    metrics = RunMetrics(cfg.method, model.seed, config_hash=config_hash, threads=threads)
    model.embedding.average_slices()
    best_val, best_state = math.inf, None
    iteration = 0
    for epoch in range(1, cfg.epochs + 1):
        tot, cnt = 0.0, 0
        for batch in make_batches(split.train, cfg.batch_size, rng):
            n = batch.n_targets
            if n == 0:
                continue
            model.zero_grad()
            tape = E.Tape()
            loss = model.loss(batch, tape)
            lv = float(loss.value)
            if not math.isfinite(lv):
                raise DivergenceError(f"non-finite loss {lv} at epoch {epoch}, iteration {iteration + 1}")
            tape.backward(loss)
            E.clip_global_norm(params, cfg.clip_norm)
            E.adam_step(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            iteration += 1
            if iteration % cfg.avg_interval == 0:
                model.embedding.average_slices()
            tot += lv * n
            cnt += n
        model.embedding.average_slices()
        val = evaluate(model, split.validation) if split.validation else tot / max(cnt, 1)
        metrics.train_loss.append(tot / max(cnt, 1))
        metrics.val_loss.append(val)
        log.info("%s seed=%d epoch %d train %.4f val %.4f", cfg.method, model.seed, epoch,
                 metrics.train_loss[-1], val)
        if val < best_val:
            best_val, best_state = val, model.state_dict()
            metrics.selected_epoch = epoch
        if on_epoch is not None:
            on_epoch(epoch, metrics)
    model.load_state_dict(best_state)
    if split.test:
        metrics.test_loss = evaluate(model, split.test)
    metrics.wall_time = time.perf_counter() - t0
    return metrics


def gradcheck_instance(seed: int, n_places: int = 12, steps: int = 3, batch: int = 2,
                       method: str = "hier", max_entries: int | None = None) -> E.GradCheckReport:
    """Finite-difference check of the full model on one random small float64 instance.

    The instance has ``n_places`` random places over two top-level regions,
    ``batch`` sequences of ``steps`` steps, and small widths so the check is quick.
    """
    from .grid import GridSpec, Level, build_vocabulary, CellIndex

    rng = np.random.default_rng(seed)
    spec = GridSpec(0.0, 0.0, (Level("top", 1000.0), Level("mid", 250.0), Level("place", 125.0)))
    cells = set()
    while len(cells) < n_places:
        cells.add(CellIndex("place", int(rng.integers(0, 16)), int(rng.integers(0, 8))))
    vocab = build_vocabulary(cells, spec)
    cfg = ModelConfig(method=method, d=8, hidden=6, layers=2, readout=8, dow_dim=2, tod_dim=3, dur_dim=2,
                      n_dow=7, n_tod=24, n_dur=8, dtype="float64", embed_init=0.5)
    model = NextPlaceModel(cfg, vocab, seed=seed)
    for p in model.parameters():
        p.value[...] = rng.normal(0.0, 0.5, p.value.shape)
    b = Batch(rng.integers(0, len(vocab), (steps, batch)), rng.integers(0, 7, (steps, batch)),
              rng.integers(0, 24, (steps, batch)), rng.integers(0, 8, (steps, batch)),
              np.full(batch, steps, dtype=np.int64))
    return E.finite_difference_check(lambda tape: model.loss(b, tape), model.parameters(),
                                     max_entries=max_entries, seed=seed)
