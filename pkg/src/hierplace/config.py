"""Run configuration: a flat ``section.key = value`` text file.

Example::

    # comments start with '#'
    synth.alpha = 0.9
    model.epochs = 6
    run.methods = hier,nonhier
    run.seeds = 0,1,2
    paths.out = runs/alpha09

Every key has a default, unknown keys are rejected, and values are parsed by
the type of their default.  The config hash covers everything that can change
a session's numbers; output locations, worker counts and thread counts are
left out of it.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .grid import DEFAULT_LEVELS, GridSpec, Level
from .hier_embedding import METHODS
from .model import ModelConfig
from .synth import SynthConfig
from .trajectories import BucketConfig

UNHASHED = ("paths.", "run.workers", "run.threads", "run.seeds", "run.methods")


def _dc_defaults(prefix, cls, skip=()):
    return {f"{prefix}.{f.name}": getattr(cls(), f.name) for f in dataclasses.fields(cls) if f.name not in skip}


def default_values() -> dict:
    v = {
        "grid.origin_x": 0.0,
        "grid.origin_y": 0.0,
        "grid.levels": tuple(f"{lv.name}:{lv.cell_size:g}" for lv in DEFAULT_LEVELS),
    }
    v.update(_dc_defaults("synth", SynthConfig))
    v.update(_dc_defaults("buckets", BucketConfig))
    v.update(_dc_defaults("model", ModelConfig, skip=("method", "n_dow", "n_tod", "n_dur")))
    v.update({
        "data.split_seed": 0,
        "data.max_len": 64,
        "data.max_malformed": 0,
        "run.methods": METHODS,
        "run.seeds": tuple(range(10)),
        "run.workers": 1,
        "run.threads": 1,
        "probe.epochs": 200,
        "probe.lr": 1e-2,
        "probe.seed": 0,
        "probe.split_seed": 0,
        "probe.rural_percentile": 30.0,
        "probe.city": "synthetic",
        "probe.labels": "truth",
        "paths.staypoints": "",
        "paths.truth": "",
        "paths.landuse": "",
        "paths.merge_map": "",
        "paths.out": "out",
    })
    return v


def _parse(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


@dataclass
class RunConfig:
    values: dict = field(default_factory=default_values)

    # -- loading ---------------------------------------------------------
    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
            key, val = line.split("=", 1)
            cfg.set(key.strip(), val)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, str(path))

    def set(self, key: str, raw):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, raw, self.values[key]) if isinstance(raw, str) else raw

    def __getitem__(self, key):
        return self.values[key]

    # -- typed views -------------------------------------------------------
    def _section(self, prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def grid(self) -> GridSpec:
        levels = []
        for item in self["grid.levels"]:
            name, _, size = item.partition(":")
            try:
                levels.append(Level(name, float(size)))
            except ValueError:
                raise ConfigError(f"grid.levels: bad entry {item!r}; want name:size") from None
        return GridSpec(self["grid.origin_x"], self["grid.origin_y"], tuple(levels))

    def synth(self) -> SynthConfig:
        return SynthConfig(**self._section("synth"))

    def buckets(self) -> BucketConfig:
        return BucketConfig(**self._section("buckets"))

    def model(self, method: str = "hier") -> ModelConfig:
        b = self.buckets()
        return ModelConfig(method=method, n_dow=b.n_dow, n_tod=b.n_tod, n_dur=b.n_dur, **self._section("model"))

    def validate(self) -> "RunConfig":
        self.grid()
        self.synth()
        self.buckets()
        for m in self["run.methods"]:
            self.model(m)
        if not self["run.seeds"]:
            raise ConfigError("run.seeds is empty")
        if self["data.max_len"] < 2:
            raise ConfigError("data.max_len must be >= 2")
        if self["probe.labels"] not in ("truth", "landuse"):
            raise ConfigError("probe.labels must be 'truth' or 'landuse'")
        if min(self["run.workers"], self["run.threads"], self["probe.epochs"]) < 1:
            raise ConfigError("run.workers, run.threads and probe.epochs must be >= 1")
        return self

    # -- hashing ---------------------------------------------------------
    def canonical(self) -> str:
        keep = {k: v for k, v in sorted(self.values.items()) if not k.startswith(UNHASHED)}
        return json.dumps(keep, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def dump(self) -> str:
        def fmt(v):
            return ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)

        return "".join(f"{k} = {fmt(v)}\n" for k, v in sorted(self.values.items()))
