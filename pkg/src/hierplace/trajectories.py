"""Staypoint trajectories: parsing, tokenization and train/val/test splitting.

Staypoint file format, one record per line (UTF-8)::

    user_id <TAB> t_entry <TAB> t_exit <TAB> x <TAB> y

with integer unix seconds and planar meters.
"""
from __future__ import annotations

import bisect
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .errors import DataError
from .grid import CellIndex, GridSpec, HierarchicalVocabulary, cell_of

log = logging.getLogger(__name__)


class Staypoint(NamedTuple):
    x: float
    y: float
    t_entry: int
    t_exit: int


@dataclass
class RawTrajectory:
    user_id: str
    stays: list[Staypoint] = field(default_factory=list)


@dataclass(frozen=True)
class BucketConfig:
    n_tod: int = 24
    dur_edges: tuple[int, ...] = (600, 1800, 3600, 7200, 14400, 28800, 57600)
    utc_offset_hours: float = 9.0

    @property
    def n_dow(self) -> int:
        return 7

    @property
    def n_dur(self) -> int:
        return len(self.dur_edges) + 1

    def dow(self, t: int) -> int:
        local = int(t + self.utc_offset_hours * 3600)
        # 1970-01-01 was a Thursday; Monday is 0
        return (local // 86400 + 3) % 7

    def tod(self, t: int) -> int:
        local = int(t + self.utc_offset_hours * 3600)
        return (local % 86400) * self.n_tod // 86400

    def dur(self, seconds: int) -> int:
        return bisect.bisect_right(self.dur_edges, seconds)


@dataclass
class TokenizedTrajectory:
    places: np.ndarray
    dow: np.ndarray
    tod: np.ndarray
    dur: np.ndarray
    user_id: str = ""

    def __len__(self):
        return len(self.places)

    @property
    def steps(self):
        return [
            {"place": int(p), "dow": int(a), "tod": int(b), "dur": int(c)}
            for p, a, b, c in zip(self.places, self.dow, self.tod, self.dur)
        ]


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list


def parse_staypoints(lines: Iterable[str], max_malformed: int = 0, stats: dict | None = None) -> list[RawTrajectory]:
    """Group staypoint records by user, each sorted by entry time.

    Malformed lines are skipped and counted (``stats["malformed"]``); more than
    ``max_malformed`` of them raises :class:`DataError`.
    """
    by_user: dict[str, list[Staypoint]] = defaultdict(list)
    bad = 0
    total = 0
    try:
        for lineno, line in enumerate(lines, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            total += 1
            parts = line.split("\t")
            try:
                if len(parts) != 5:
                    raise ValueError("field count")
                uid = parts[0]
                t0, t1 = int(parts[1]), int(parts[2])
                x, y = float(parts[3]), float(parts[4])
                if t1 < t0 or not (np.isfinite(x) and np.isfinite(y)) or not uid:
                    raise ValueError("bad values")
            except ValueError:
                bad += 1
                log.debug("malformed staypoint line %d: %r", lineno, line)
                continue
            by_user[uid].append(Staypoint(x, y, t0, t1))
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read staypoint stream: {exc}") from exc
    if stats is not None:
        stats.update(records=total, malformed=bad, users=len(by_user))
    if bad:
        log.warning("skipped %d malformed staypoint lines of %d", bad, total)
    if bad > max_malformed:
        raise DataError(f"{bad} malformed staypoint lines exceed the limit of {max_malformed}")
    return [
        RawTrajectory(uid, sorted(stays, key=lambda s: (s.t_entry, s.t_exit)))
        for uid, stays in sorted(by_user.items())
    ]


def write_staypoints(fh, trajectories: Iterable[RawTrajectory]):
    for traj in trajectories:
        for s in traj.stays:
            fh.write(f"{traj.user_id}\t{s.t_entry}\t{s.t_exit}\t{s.x:.2f}\t{s.y:.2f}\n")


def observed_cells(trajectories: Iterable[RawTrajectory], spec: GridSpec) -> set[CellIndex]:
    level = spec.finest.name
    return {cell_of(s.x, s.y, level, spec) for t in trajectories for s in t.stays}


def tokenize(traj: RawTrajectory, vocab: HierarchicalVocabulary, spec: GridSpec,
             buckets: BucketConfig = BucketConfig()) -> TokenizedTrajectory:
    level = spec.finest.name
    n = len(traj.stays)
    places = np.empty(n, np.int64)
    dow = np.empty(n, np.int64)
    tod = np.empty(n, np.int64)
    dur = np.empty(n, np.int64)
    for i, s in enumerate(traj.stays):
        cell = cell_of(s.x, s.y, level, spec)
        try:
            places[i] = vocab.id_of[cell]
        except KeyError:
            raise DataError(f"user {traj.user_id}: cell {cell} is not in the vocabulary") from None
        dow[i] = buckets.dow(s.t_entry)
        tod[i] = buckets.tod(s.t_entry)
        dur[i] = buckets.dur(s.t_exit - s.t_entry)
    return TokenizedTrajectory(places, dow, tod, dur, traj.user_id)


def chunk(tt: TokenizedTrajectory, max_len: int = 64) -> list[TokenizedTrajectory]:
    """Split into pieces of at most ``max_len`` steps; pieces shorter than 2 are dropped."""
    out = []
    for s in range(0, len(tt), max_len):
        e = min(s + max_len, len(tt))
        if e - s >= 2:
            out.append(TokenizedTrajectory(tt.places[s:e], tt.dow[s:e], tt.tod[s:e], tt.dur[s:e], tt.user_id))
    return out


def split_dataset(trajs: list, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Shuffle whole trajectories with ``seed`` and cut by ``ratios``."""
    n = len(trajs)
    if n < 10:
        raise DataError(f"need at least 10 trajectories to split, got {n}")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"bad split ratios {ratios}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    n_train = n - n_val - n_test
    pick = lambda idx: [trajs[i] for i in idx]  # noqa: E731
    return DatasetSplit(
        pick(order[:n_train]),
        pick(order[n_train:n_train + n_val]),
        pick(order[n_train + n_val:]),
    )


def visit_counts(tokenized: Iterable[TokenizedTrajectory], vocab_size: int) -> np.ndarray:
    counts = np.zeros(vocab_size, dtype=np.int64)
    for tt in tokenized:
        np.add.at(counts, tt.places, 1)
    return counts
