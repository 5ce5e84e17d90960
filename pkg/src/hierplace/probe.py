"""Land-use labels and the linear probe on frozen place embeddings.

Raw labels are 100 m mesh codes 1-17.  They are merged to 15 classes,
aggregated to 500 m cells by majority vote and attached to every 125 m place
whose 500 m parent carries a label.  A single affine layer trained with softmax
cross entropy then measures how linearly separable the classes are.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .errors import DataError

CLASS_NAMES = (
    "farmland", "forest", "waste", "high-rise", "factories", "low-rise", "roads",
    "railroads", "public", "vacant", "parks", "rivers-lakes", "seashore", "sea", "golf",
)
N_CLASSES = len(CLASS_NAMES)

# Source categories in code order: paddy, other farmland, forest, wasteland,
# high-rise, factories, low-rise, dense low-rise, roads, railroads, public
# facilities, vacant ground, parks, rivers and lakes, seashore, sea, golf.
DEFAULT_MERGE = {
    1: 0, 2: 0, 3: 1, 4: 2, 5: 3, 6: 4, 7: 5, 8: 5, 9: 6, 10: 7,
    11: 8, 12: 9, 13: 10, 14: 11, 15: 12, 16: 13, 17: 14,
}


def merge_labels(raw: int, mapping: dict | None = None) -> int:
    mapping = DEFAULT_MERGE if mapping is None else mapping
    try:
        return mapping[int(raw)]
    except KeyError:
        raise DataError(f"unknown land-use code {raw}") from None


def read_merge_map(fh) -> dict:
    """``code<TAB>class`` lines; must cover codes 1-17 onto classes 0-14."""
    mapping = {}
    for line in fh:
        line = line.split("#", 1)[0].strip()
        if line:
            code, cls = line.split()
            mapping[int(code)] = int(cls)
    if sorted(mapping) != list(range(1, 18)) or set(mapping.values()) != set(range(N_CLASSES)):
        raise DataError("merge map must send codes 1..17 onto all classes 0..14")
    return mapping


def read_landuse(fh) -> dict:
    """``col<TAB>row<TAB>code`` lines at 100 m resolution."""
    grid = {}
    for lineno, line in enumerate(fh, 1):
        if not line.strip():
            continue
        try:
            col, row, code = (int(v) for v in line.split())
        except ValueError:
            raise DataError(f"land-use line {lineno}: expected 'col row code'") from None
        if not 1 <= code <= 17:
            raise DataError(f"land-use line {lineno}: code {code} outside 1..17")
        grid[col, row] = code
    return grid


def aggregate_to_500m(grid: dict, factor: int = 5, mapping: dict | None = None) -> dict:
    """Majority merged class per ``factor x factor`` block; ties go to the smaller class."""
    if not grid:
        raise DataError("empty land-use grid")
    votes: dict[tuple, Counter] = {}
    for (col, row), code in grid.items():
        votes.setdefault((col // factor, row // factor), Counter())[merge_labels(code, mapping)] += 1
    return {cell: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for cell, c in votes.items()}


def token_labels_from_blocks(coords, labels: dict, factor: int = 4) -> np.ndarray:
    """Class of each place's enclosing label block (``factor`` places per side), or -1."""
    out = np.full(len(coords), -1, dtype=np.int64)
    for i, (col, row) in enumerate(np.asarray(coords)):
        out[i] = labels.get((int(col) // factor, int(row) // factor), -1)
    return out


def token_labels_from_cells(coords, labels: dict) -> np.ndarray:
    """Per-place labels keyed directly by finest ``(col, row)``, or -1."""
    return np.array([labels.get((int(c), int(r)), -1) for c, r in np.asarray(coords)], dtype=np.int64)


@dataclass
class ProbeDataset:
    token_ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    visits: np.ndarray
    split: np.ndarray  # 0 train, 1 validation, 2 test

    def part(self, k: int):
        m = self.split == k
        return self.features[m], self.labels[m]


def probe_split(token_ids, seed: int = 0, ratios=(0.8, 0.1, 0.1)) -> np.ndarray:
    """Split assignment depending only on the labelled token IDs and ``seed``."""
    n = len(token_ids)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    split = np.zeros(n, dtype=np.int64)
    split[order[n - n_val - n_test:n - n_test]] = 1
    split[order[n - n_test:]] = 2
    return split


def build_probe_dataset(embeddings, token_labels, visits, seed: int = 0) -> ProbeDataset:
    embeddings = np.asarray(embeddings)
    token_labels = np.asarray(token_labels)
    ids = np.flatnonzero(token_labels >= 0)
    if len(ids) == 0:
        raise DataError("no place has a land-use label")
    return ProbeDataset(
        ids, embeddings[ids].astype(np.float64), token_labels[ids],
        np.asarray(visits)[ids], probe_split(ids, seed),
    )


@dataclass
class ProbeResult:
    weight: np.ndarray
    bias: np.ndarray
    best_epoch: int
    val_accuracy: float
    n_classes: int


def _predict(weight, bias, X):
    return np.argmax(X @ weight + bias, axis=1)


def train_probe(ds: ProbeDataset, n_classes: int = N_CLASSES, epochs: int = 200, lr: float = 1e-2,
                seed: int = 0) -> ProbeResult:
    """Full-batch Adam on one affine layer; keeps the epoch with the best validation accuracy."""
    Xtr, ytr = ds.part(0)
    Xva, yva = ds.part(1)
    if len(ytr) == 0 or len(yva) == 0:
        raise DataError("probe needs non-empty train and validation splits")
    if ds.labels.max() >= n_classes:
        raise DataError(f"label {ds.labels.max()} outside {n_classes} classes")
    rng = np.random.default_rng(seed)
    d = Xtr.shape[1]
    # start from the smoothed class prior with near-zero weights, so epoch 0
    # is the majority-class baseline and any later epoch must beat it
    W = E.Parameter(rng.normal(0.0, 1e-3, (d, n_classes)), "probe.w")
    prior = np.bincount(ytr, minlength=n_classes) + 1.0
    b = E.Parameter(np.log(prior / prior.sum()), "probe.b")
    params = [W, b]
    best = (float(np.mean(_predict(W.value, b.value, Xva) == yva)), 0, W.value.copy(), b.value.copy())
    for epoch in range(1, epochs + 1):
        W.zero_grad()
        b.zero_grad()
        tape = E.Tape()
        loss = E.softmax_cross_entropy(E.affine(E.Node(Xtr), W, b, tape), ytr, tape=tape,
                                       overwrite_logits=True)
        tape.backward(loss)
        E.adam_step(params, lr)
        acc = float(np.mean(_predict(W.value, b.value, Xva) == yva))
        if acc > best[0]:
            best = (acc, epoch, W.value.copy(), b.value.copy())
    return ProbeResult(best[2], best[3], best[1], best[0], n_classes)


def rural_mask(ds: ProbeDataset, percentile: float = 30.0) -> np.ndarray:
    """Places whose visit count is at or below the percentile over all dataset places."""
    thr = np.percentile(ds.visits, percentile)
    return ds.visits <= thr


def evaluate_probe(result: ProbeResult, ds: ProbeDataset, stratum: str = "all", split: int = 2,
                   percentile: float = 30.0):
    """Accuracy and confusion matrix (rows truth, columns prediction) on one stratum."""
    m = ds.split == split
    if stratum == "rural":
        m &= rural_mask(ds, percentile)
    elif stratum != "all":
        raise ValueError(f"unknown stratum {stratum!r}")
    if not m.any():
        raise DataError(f"empty {stratum} stratum")
    y = ds.labels[m]
    pred = _predict(result.weight, result.bias, ds.features[m])
    cm = np.zeros((result.n_classes, result.n_classes), dtype=np.int64)
    np.add.at(cm, (y, pred), 1)
    return float(np.mean(pred == y)), cm


@dataclass
class ProbeOutcome:
    result: ProbeResult
    accuracy: dict      # stratum -> test accuracy
    confusion: dict     # stratum -> confusion matrix


def run_probe(embeddings, token_labels, visits, split_seed: int = 0, epochs: int = 200, lr: float = 1e-2,
              seed: int = 0, percentile: float = 30.0, n_classes: int = N_CLASSES) -> ProbeOutcome:
    """Build the dataset, train the probe and evaluate both strata on the test split."""
    ds = build_probe_dataset(embeddings, token_labels, visits, split_seed)
    res = train_probe(ds, n_classes, epochs, lr, seed)
    acc, cms = {}, {}
    for stratum in ("all", "rural"):
        acc[stratum], cms[stratum] = evaluate_probe(res, ds, stratum, percentile=percentile)
    return ProbeOutcome(res, acc, cms)


def default_merge_map() -> dict:
    from importlib.resources import files

    with files("hierplace").joinpath("data/landuse_merge.tsv").open("r", encoding="utf-8") as fh:
        return read_merge_map(fh)


def confusion_csv(cm: np.ndarray, names=CLASS_NAMES) -> str:
    lines = ["truth\\pred," + ",".join(names)]
    for name, row in zip(names, cm):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def accuracy_csv(rows) -> str:
    """``rows`` of ``(city, method, stratum, accuracies)``; one line per row with mean and std."""
    lines = ["city,method,stratum,mean,std"]
    for city, method, stratum, accs in rows:
        a = np.asarray(accs, dtype=np.float64)
        std = float(a.std(ddof=1)) if len(a) > 1 else 0.0
        lines.append(f"{city},{method},{stratum},{a.mean():.6f},{std:.6f}")
    return "\n".join(lines) + "\n"


def prediction_tsv(result: ProbeResult, embeddings, coords) -> str:
    """Predicted class for every place, as ``col<TAB>row<TAB>class`` lines."""
    pred = _predict(result.weight, result.bias, np.asarray(embeddings, dtype=np.float64))
    return "".join(f"{int(c)}\t{int(r)}\t{int(p)}\n" for (c, r), p in zip(np.asarray(coords), pred))
