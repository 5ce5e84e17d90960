"""Synthetic staypoint trajectories with planted hierarchical structure.

Generative model
----------------
* The city is ``regions_per_side**2`` top-level regions, each split into
  ``ratios[0]**2`` leaf regions, each holding ``places_per_leaf`` places drawn
  from its ``ratios[1]**2`` finest cells.
* Every top-level region draws a class mix and a class-to-class transition
  profile.  Every leaf region draws a dominant class from its region's mix; a
  place takes the leaf's class with probability ``alpha`` and a uniform class
  otherwise.
* Place popularity follows a Zipf law over ranks.  Ranks are spatially
  clustered (dense regions and leaves take the top ranks) so the long tail is
  concentrated in sparse areas.
* A move is uniform over all places with probability ``1 - alpha``.  Otherwise
  the next class is drawn from the current region's transition profile, the
  next region is the current one with probability ``stay_prob`` (uniform
  otherwise), and the place is drawn by popularity among that region's places
  of that class.

Everything is a deterministic function of ``SynthConfig``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .grid import GridSpec, Level
from .trajectories import RawTrajectory, Staypoint

MONDAY_2019_10_07_JST = 1570374000  # 2019-10-07 00:00 +09:00


def level_name(size: float) -> str:
    return f"{size / 1000:g}km" if size >= 1000 else f"{size:g}m"


@dataclass(frozen=True)
class SynthConfig:
    regions_per_side: int = 2
    ratios: tuple[int, int] = (10, 8)
    places_per_leaf: int = 10
    n_users: int = 20_000
    mean_length: float = 10.0
    zipf_exponent: float = 1.0
    alpha: float = 0.9
    n_classes: int = 8
    stay_prob: float = 0.8
    class_concentration: float = 0.5
    density_sigma: float = 1.0
    place_size: float = 125.0
    seed: int = 0

    def __post_init__(self):
        counts = (self.regions_per_side, self.places_per_leaf, self.n_users, self.n_classes, *self.ratios)
        if min(counts) < 1:
            raise ConfigError("synthetic counts must be >= 1")
        if len(self.ratios) != 2:
            raise ConfigError("ratios must give (top->leaf, leaf->place)")
        if self.places_per_leaf > self.ratios[1] ** 2:
            raise ConfigError("places_per_leaf exceeds cells per leaf region")
        if not 0.0 <= self.alpha <= 1.0 or not 0.0 <= self.stay_prob <= 1.0:
            raise ConfigError("alpha and stay_prob must lie in [0, 1]")
        if self.mean_length < 2:
            raise ConfigError("mean_length must be >= 2")
        if self.zipf_exponent < 0 or self.place_size <= 0:
            raise ConfigError("zipf_exponent must be >= 0 and place_size > 0")

    def grid_spec(self) -> GridSpec:
        leaf = self.place_size * self.ratios[1]
        top = leaf * self.ratios[0]
        return GridSpec(0.0, 0.0, tuple(Level(level_name(s), s) for s in (top, leaf, self.place_size)))


@dataclass
class SynthWorld:
    """Static structure: places, their regions, classes and popularity."""
    cols: np.ndarray       # finest-cell column per place
    rows: np.ndarray
    region: np.ndarray     # top-level region index per place
    leaf: np.ndarray       # leaf region index per place
    klass: np.ndarray      # ground-truth class per place
    popularity: np.ndarray  # normalised Zipf weights
    transition: np.ndarray  # (regions, K, K) class transition profiles
    leaf_class: np.ndarray


def zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def _dirichlet_rows(rng, conc, shape):
    g = rng.gamma(conc, 1.0, size=shape)
    g += 1e-12
    return g / g.sum(axis=-1, keepdims=True)


def build_world(cfg: SynthConfig, rng) -> SynthWorld:
    n1, (r1, r2), K = cfg.regions_per_side, cfg.ratios, cfg.n_classes
    n_regions = n1 * n1
    region_mix = _dirichlet_rows(rng, cfg.class_concentration, (n_regions, K))
    transition = _dirichlet_rows(rng, cfg.class_concentration, (n_regions, K, K))
    region_density = rng.normal(0.0, cfg.density_sigma, n_regions)

    cols, rows, region, leaf, klass, score = [], [], [], [], [], []
    leaf_class = []
    leaf_id = 0
    for ry in range(n1):
        for rx in range(n1):
            reg = ry * n1 + rx
            for ly in range(r1):
                for lx in range(r1):
                    dominant = rng.choice(K, p=region_mix[reg])
                    leaf_class.append(dominant)
                    density = region_density[reg] + rng.normal(0.0, cfg.density_sigma)
                    cells = np.sort(rng.choice(r2 * r2, cfg.places_per_leaf, replace=False))
                    for cell in cells:
                        cy, cx = divmod(int(cell), r2)
                        cols.append((rx * r1 + lx) * r2 + cx)
                        rows.append((ry * r1 + ly) * r2 + cy)
                        region.append(reg)
                        leaf.append(leaf_id)
                        klass.append(dominant if rng.random() < cfg.alpha else rng.integers(K))
                        # fixed place-level noise, so density_sigma sets how
                        # strongly popularity ranks cluster in space
                        score.append(density + rng.normal(0.0, 0.5))
                    leaf_id += 1
    score = np.asarray(score)
    rank = np.empty(len(score), dtype=np.int64)
    rank[np.argsort(-score, kind="stable")] = np.arange(len(score))
    popularity = zipf_weights(len(score), cfg.zipf_exponent)[rank]
    return SynthWorld(
        np.asarray(cols, np.int64), np.asarray(rows, np.int64), np.asarray(region, np.int64),
        np.asarray(leaf, np.int64), np.asarray(klass, np.int64), popularity, transition,
        np.asarray(leaf_class, np.int64),
    )


class _Sampler:
    """Popularity-weighted draws from fixed candidate sets via cumulative sums."""

    def __init__(self, world: SynthWorld, n_regions: int, K: int):
        w = world.popularity
        self.all_cdf = np.cumsum(w)
        self.sets = {}
        for reg in range(n_regions):
            in_reg = np.flatnonzero(world.region == reg)
            for c in range(K):
                ids = in_reg[world.klass[in_reg] == c]
                if len(ids) == 0:
                    ids = np.flatnonzero(world.klass == c)
                if len(ids) == 0:
                    ids = in_reg
                self.sets[reg, c] = (ids, np.cumsum(w[ids]))

    @staticmethod
    def draw(ids, cdf, u):
        i = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
        return int(ids[min(i, len(ids) - 1)])


def synth_generate(cfg: SynthConfig):
    """Returns ``(trajectories, ground_truth, world)``.

    ``ground_truth`` maps finest ``(col, row)`` to the place's class.
    """
    rng = np.random.default_rng(cfg.seed)
    world = build_world(cfg, rng)
    n_places = len(world.klass)
    n_regions = cfg.regions_per_side ** 2
    K = cfg.n_classes
    sampler = _Sampler(world, n_regions, K)
    all_ids = np.arange(n_places)
    trans_cdf = np.cumsum(world.transition, axis=-1)
    size = cfg.place_size

    lengths = 2 + rng.poisson(cfg.mean_length - 2.0, cfg.n_users)
    trajectories = []
    width = len(str(cfg.n_users - 1))
    for u in range(cfg.n_users):
        n = int(lengths[u])
        uni = rng.random((n, 5))
        if uni[0, 0] < cfg.alpha:
            cur = sampler.draw(all_ids, sampler.all_cdf, uni[0, 1])
        else:
            cur = int(uni[0, 1] * n_places) % n_places
        visits = [cur]
        for t in range(1, n):
            a, b, c, d, _ = uni[t]
            if a >= cfg.alpha:
                cur = int(b * n_places) % n_places
            else:
                reg = int(world.region[cur])
                k = int(np.searchsorted(trans_cdf[reg, world.klass[cur]], c * trans_cdf[reg, world.klass[cur], -1], side="right"))
                k = min(k, K - 1)
                if n_regions > 1 and b >= cfg.stay_prob:
                    other = int((b - cfg.stay_prob) / max(1e-12, 1.0 - cfg.stay_prob) * (n_regions - 1))
                    other = min(other, n_regions - 2)
                    reg = other if other < reg else other + 1
                ids, cdf = sampler.sets[reg, k]
                cur = sampler.draw(ids, cdf, d)
            visits.append(cur)
        t = MONDAY_2019_10_07_JST + int(rng.integers(0, 28)) * 86400 + int(rng.integers(6 * 3600, 10 * 3600))
        durs = np.exp(rng.normal(np.log(3600.0), 1.0, n)).astype(np.int64)
        gaps = rng.integers(300, 3600, n)
        offs = rng.uniform(0.05, 0.95, (n, 2))
        stays = []
        for i, p in enumerate(visits):
            x = (world.cols[p] + offs[i, 0]) * size
            y = (world.rows[p] + offs[i, 1]) * size
            stays.append(Staypoint(round(x, 2), round(y, 2), int(t), int(t + durs[i])))
            t += int(durs[i] + gaps[i])
        trajectories.append(RawTrajectory(f"u{u:0{width}d}", stays))
    truth = {(int(c), int(r)): int(k) for c, r, k in zip(world.cols, world.rows, world.klass)}
    return trajectories, truth, world


def write_ground_truth(fh, truth: dict):
    for (col, row), k in sorted(truth.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        fh.write(f"{col}\t{row}\t{k}\n")


def read_ground_truth(fh) -> dict:
    truth = {}
    for line in fh:
        if line.strip():
            col, row, k = line.split("\t")
            truth[int(col), int(row)] = int(k)
    return truth
