"""``hierplace`` command line.

Subcommands: synth, train, evaluate, probe, export, gradcheck.  Every run is
driven by a :class:`~hierplace.config.RunConfig`; flags override config keys.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence (or a failed gradient check).
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys

import numpy as np

from . import probe as P
from . import trajectories as tj
from .checkpoint import atomic_write, load_model
from .config import RunConfig
from .errors import ConfigError, DataError, DivergenceError, HierPlaceError
from .threads import limit_threads

log = logging.getLogger("hierplace")


# ---------------------------------------------------------------------------
# helpers

def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _out(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg["paths.out"], name)


def _read_text(path, what: str) -> str:
    if not path:
        raise ConfigError(f"no {what} path configured")
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except FileNotFoundError:
        raise DataError(f"{what} not found: {path}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from None


def _staypoints_path(cfg: RunConfig) -> str:
    return cfg["paths.staypoints"] or _out(cfg, "staypoints.tsv")


def _prepare(cfg: RunConfig, vocab=None):
    from .experiment import prepare

    stats = {}
    text = _read_text(_staypoints_path(cfg), "staypoint file")
    raw = tj.parse_staypoints(io.StringIO(text), cfg["data.max_malformed"], stats)
    log.info("read %d staypoints for %d users", stats["records"], stats["users"])
    return prepare(raw, vocab.spec if vocab is not None else cfg.grid(), cfg.buckets(),
                   cfg["data.split_seed"], max_len=cfg["data.max_len"], vocab=vocab)


def _same_vocab(a, b) -> bool:
    return np.array_equal(a.coords(), b.coords())


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(cfg: RunConfig, args) -> int:
    from .synth import synth_generate, write_ground_truth

    scfg = cfg.synth()
    trajs, truth, _ = synth_generate(scfg)
    buf = io.StringIO()
    tj.write_staypoints(buf, trajs)
    atomic_write(_out(cfg, "staypoints.tsv"), buf.getvalue())
    buf = io.StringIO()
    write_ground_truth(buf, truth)
    atomic_write(_out(cfg, "truth.tsv"), buf.getvalue())
    n = sum(len(t.stays) for t in trajs)
    atomic_write(_out(cfg, "synth.json"), _json({
        "config_hash": cfg.hash(), "seed": scfg.seed, "users": len(trajs), "staypoints": n,
        "places": len(truth)}))
    print(f"wrote {len(trajs)} trajectories ({n} staypoints) and {len(truth)} place labels to {cfg['paths.out']}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    from .experiment import run_experiment, summary_csv

    data = _prepare(cfg)
    log.info("|V| = %d, %d training sequences", len(data.vocab), len(data.split.train))
    os.makedirs(cfg["paths.out"], exist_ok=True)
    atomic_write(_out(cfg, "config.txt"), f"# config_hash = {cfg.hash()}\n" + cfg.dump())
    runs, rows = run_experiment(data, cfg.model(), cfg["run.methods"], cfg["run.seeds"], cfg["paths.out"],
                                cfg["run.workers"], cfg.hash(), cfg["run.threads"])
    for r in runs:
        print(f"{r.run_id}: test {r.test_loss:.4f} (epoch {r.selected_epoch}, {r.wall_time:.1f}s)")
    sys.stdout.write(summary_csv(rows))
    return 0


def _checkpoints(cfg: RunConfig, args) -> list[str]:
    if args.checkpoint:
        paths = list(args.checkpoint)
    else:
        paths = [os.path.join(cfg["paths.out"], f"{m}_s{s}.ckpt") for m in cfg["run.methods"] for s in cfg["run.seeds"]]
    for p in paths:
        if not os.path.exists(p):
            raise DataError(f"checkpoint not found: {p}")
    return paths


def cmd_evaluate(cfg: RunConfig, args) -> int:
    from .model import evaluate

    out, data = [], None
    for path in _checkpoints(cfg, args):
        model, meta, h = load_model(path)
        if data is None or not _same_vocab(data.vocab, model.vocab):
            data = _prepare(cfg, vocab=model.vocab)
        if not data.split.test:
            raise DataError("empty test split")
        loss = evaluate(model, data.split.test)
        out.append({"checkpoint": os.path.basename(path), "method": model.cfg.method, "seed": model.seed,
                    "config_hash": h, "test_loss": loss})
        print(f"{os.path.basename(path)}: test log-perplexity {loss:.6f}")
    atomic_write(_out(cfg, "evaluate.json"), _json(out))
    return 0


def _token_labels(cfg: RunConfig, coords, finest_size: float) -> np.ndarray:
    if cfg["probe.labels"] == "truth":
        from .synth import read_ground_truth

        text = _read_text(cfg["paths.truth"] or _out(cfg, "truth.tsv"), "ground-truth file")
        return P.token_labels_from_cells(coords, read_ground_truth(io.StringIO(text)))
    mapping = None
    if cfg["paths.merge_map"]:
        mapping = P.read_merge_map(io.StringIO(_read_text(cfg["paths.merge_map"], "merge map")))
    grid = P.read_landuse(io.StringIO(_read_text(cfg["paths.landuse"], "land-use file")))
    labels = P.aggregate_to_500m(grid, 5, mapping)
    factor = 500.0 / finest_size
    if abs(factor - round(factor)) > 1e-9:
        raise ConfigError(f"500 m label cells do not nest {finest_size:g} m places")
    return P.token_labels_from_blocks(coords, labels, int(round(factor)))


def _class_names(cfg: RunConfig) -> tuple:
    # synthetic ground truth uses the generator's classes, named by index
    if cfg["probe.labels"] == "truth":
        return tuple(f"class{k}" for k in range(cfg["synth.n_classes"]))
    return P.CLASS_NAMES


def cmd_probe(cfg: RunConfig, args) -> int:
    paths = _checkpoints(cfg, args)
    names = _class_names(cfg)
    data = labels = None
    per_run, acc = [], {}
    for path in paths:
        model, meta, h = load_model(path)
        if data is None or not _same_vocab(data.vocab, model.vocab):
            data = _prepare(cfg, vocab=model.vocab)
            coords = model.vocab.coords()
            labels = _token_labels(cfg, coords, model.vocab.spec.finest.cell_size)
            visits = data.visit_counts()
        emb = model.place.value.astype(np.float64)
        res = P.run_probe(emb, labels, visits, cfg["probe.split_seed"], cfg["probe.epochs"], cfg["probe.lr"],
                          cfg["probe.seed"], cfg["probe.rural_percentile"], len(names))
        run_id = f"{model.cfg.method}_s{model.seed}"
        for stratum, a in res.accuracy.items():
            acc.setdefault((model.cfg.method, stratum), []).append(a)
            atomic_write(_out(cfg, f"confusion_{run_id}_{stratum}.csv"),
                         P.confusion_csv(res.confusion[stratum], names))
        atomic_write(_out(cfg, f"predictions_{run_id}.tsv"), P.prediction_tsv(res.result, emb, coords))
        per_run.append({"run_id": run_id, "method": model.cfg.method, "seed": model.seed, "config_hash": h,
                        "best_epoch": res.result.best_epoch, "val_accuracy": res.result.val_accuracy,
                        **{f"accuracy_{k}": v for k, v in res.accuracy.items()}})
        print(f"{run_id}: all {res.accuracy['all']:.4f} rural {res.accuracy['rural']:.4f}")
    city = cfg["probe.city"]
    table = P.accuracy_csv([(city, m, s, v) for (m, s), v in sorted(acc.items())])
    atomic_write(_out(cfg, "probe_accuracy.csv"), table)
    atomic_write(_out(cfg, "probe_runs.jsonl"), "".join(json.dumps(r, sort_keys=True) + "\n" for r in per_run))
    sys.stdout.write(table)
    return 0


def cmd_export(cfg: RunConfig, args) -> int:
    from .hier_embedding import write_embedding_text

    for path in _checkpoints(cfg, args):
        model, meta, h = load_model(path)
        buf = io.StringIO()
        write_embedding_text(buf, model.vocab.coords(), model.place.value, model.partition)
        name = os.path.splitext(os.path.basename(path))[0] + ".emb.txt"
        atomic_write(_out(cfg, name), buf.getvalue())
        print(f"exported {len(model.vocab)} x {model.cfg.d} embeddings to {_out(cfg, name)}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .model import gradcheck_instance

    worst = 0.0
    seeds = range(args.seed if args.seed is not None else 0, (args.seed or 0) + args.instances)
    for s in seeds:
        rep = gradcheck_instance(s)
        worst = max(worst, rep.max_rel_error)
        log.info("instance %d: max relative error %.3e over %d entries", s, rep.max_rel_error, rep.n_checked)
    ok = worst < args.tol
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: {len(seeds)} instances, max relative error {worst:.3e} (tol {args.tol:g})")
    return 0 if ok else DivergenceError.exit_code


COMMANDS = {
    "synth": (cmd_synth, "generate synthetic staypoints and ground-truth place classes"),
    "train": (cmd_train, "train every (method, seed) pair and write checkpoints, metrics and summary.csv"),
    "evaluate": (cmd_evaluate, "test log-perplexity of checkpoints"),
    "probe": (cmd_probe, "land-use linear probe on checkpoint embeddings"),
    "export": (cmd_export, "write checkpoint embeddings in the text export format"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the full model at float64"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--seed", type=int, help="synth seed (synth) or the single training seed (others)")
    common.add_argument("--threads", type=int, help="BLAS threads per session")
    common.add_argument("--out", metavar="DIR", help="output directory (paths.out)")
    common.add_argument("--method", choices=("hier", "hier1km", "hier10km", "nonhier"), help="single method")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="hierplace", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_, description=help_)
        if name in ("evaluate", "probe", "export"):
            p.add_argument("--checkpoint", nargs="+", metavar="PATH",
                           help="checkpoint files (default: every method/seed under --out)")
        if name == "gradcheck":
            p.add_argument("--instances", type=int, default=20)
            p.add_argument("--tol", type=float, default=1e-4)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), val)
    if args.out:
        cfg.set("paths.out", args.out)
    if args.threads is not None:
        cfg.set("run.threads", str(args.threads))
    if args.method:
        cfg.set("run.methods", args.method)
    if args.seed is not None:
        cfg.set("synth.seed" if args.command == "synth" else "run.seeds", str(args.seed))
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with limit_threads(cfg["run.threads"]):
            return COMMANDS[args.command][0](cfg, args)
    except HierPlaceError as exc:
        print(f"hierplace {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
