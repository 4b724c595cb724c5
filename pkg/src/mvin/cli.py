"""Command-line entry point: ``mvin {train,eval,sweep,synth,stats}``.

Diagnostics go to stderr; every artifact is written under the output directory.
Exit status is 0 on success, 2 for usage errors and missing files, 1 for any
other failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics
from .config import ABLATION_NAMES, ConfigError, RunConfig, load_config, parse_bool
from .kg import DataError, dataset_stats, load_dataset, split_interactions
from .model import count_parameters
from .synth import synth_dataset, write_dataset
from .trainer import (
    Checkpoint,
    Dataset,
    TrainingError,
    eval_seed,
    evaluate_ctr,
    tables_for,
    train_regular,
    train_stagewise,
)

logger = logging.getLogger("mvin")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


# -- pipeline pieces ---------------------------------------------------------

def load_data(cfg: RunConfig) -> Dataset:
    cfg.check_files()
    kg, inter = load_dataset(cfg.kg_path, cfg.ratings_path, cfg.item_map_path, cfg.rating_threshold, cfg.g_core)
    return Dataset(kg, *split_interactions(inter, cfg.split))


class _TextLog:
    def __init__(self, path: Path):
        self.fh = open(path, "w", encoding="utf-8")

    def line(self, text: str) -> None:
        self.fh.write(text + "\n")
        self.fh.flush()
        logger.info(text)

    def close(self):
        self.fh.close()


def run_training(cfg: RunConfig, data: Dataset, out_dir: Path) -> Checkpoint:
    """Train per ``cfg`` and write train_log.csv, train.log and checkpoint.bin."""
    out_dir.mkdir(parents=True, exist_ok=True)
    hp = cfg.hp
    model = data.model(hp)
    text = _TextLog(out_dir / "train.log")
    with open(out_dir / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, ["epoch", "stage", "train_loss", "valid_auc", "valid_acc"], lineterminator="\n")
        writer.writeheader()

        def log(row):
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            fh.flush()
            text.line(f"stage={row['stage']} epoch={row['epoch']} train_loss={row['train_loss']:.6f} "
                      f"valid_auc={row['valid_auc']:.4f} valid_acc={row['valid_acc']:.4f}")

        shapes = model.param_shapes()
        text.line(f"parameter_count={count_parameters(shapes)} tensors={','.join(sorted(shapes))}")
        stagewise = cfg.stagewise and hp.ablation.sw
        text.line(f"mode={'stagewise' if stagewise else 'regular'} seed={cfg.train.seed}")
        if stagewise:
            ckpt = train_stagewise(data, cfg.train, hp, log=log)
        else:
            ckpt = train_regular(data, cfg.train, hp, log=log)
    text.line(f"best stage={ckpt.stage} epoch={ckpt.epoch} valid_auc={ckpt.valid_auc:.6f}")
    text.close()
    ckpt.save(out_dir / "checkpoint.bin")
    return ckpt


def evaluate(cfg: RunConfig, data: Dataset, ckpt: Checkpoint, precision_ns=None) -> list:
    """Metric rows (metric, value, split, n) for a trained checkpoint.

    The checkpoint must match the shapes implied by ``cfg``.
    """
    hp = cfg.hp
    model = data.model(hp)
    model.check_params(ckpt.params)
    nbrs, prefs = tables_for(data, hp, ckpt)
    base = ckpt.seeds.get("base", cfg.train.seed)
    rows = []
    for name, split in (("valid", data.valid), ("test", data.test)):
        a, c, arrays = evaluate_ctr(model, ckpt.params, split, data, prefs, nbrs, eval_seed(base, name))
        rows += [("auc", a, name, len(arrays[2])), ("acc", c, name, len(arrays[2]))]
    if precision_ns:
        seen = {u: set(data.train.items_of(u)) | set(data.valid.items_of(u)) for u in range(data.train.num_users)}
        all_items = np.arange(data.train.num_items)
        users = [u for u in range(data.test.num_users) if data.test.items_of(u)]

        def score(u, items):
            return model.predict(ckpt.params, np.full(len(items), u), items, prefs, nbrs)

        def candidates(u):
            return np.setdiff1d(all_items, np.fromiter(seen[u], np.int64, len(seen[u])))

        prec = metrics.mean_precision_at_n(score, users, candidates, lambda u: set(data.test.items_of(u)), precision_ns)
        rows += [(f"precision@{n}", prec[n], "test", len(users)) for n in precision_ns]
    return rows


def write_report(rows, out_dir: Path, stem: str) -> None:
    with open(out_dir / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value", "split", "n"])
        for metric, value, split, n in rows:
            w.writerow([metric, repr(float(value)), split, n])
    payload = [{"metric": m, "value": float(v), "split": s, "n": n} for m, v, s, n in rows]
    (out_dir / f"{stem}.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


# -- commands ----------------------------------------------------------------

def cmd_train(cfg: RunConfig, args) -> int:
    data = load_data(cfg)
    ckpt = run_training(cfg, data, cfg.out_dir)
    write_report(evaluate(cfg, data, ckpt), cfg.out_dir, "metrics")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    data = load_data(cfg)
    path = Path(args.checkpoint) if args.checkpoint else cfg.out_dir / "checkpoint.bin"
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint file not found: {path}")
    ckpt = Checkpoint.load(path)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_report(evaluate(cfg, data, ckpt, cfg.precision_ns), cfg.out_dir, "eval_report")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    cfg.check_sweep()
    data = load_data(cfg)
    param = cfg.sweep_param
    results = []
    for value in cfg.sweep_values:
        run_cfg = replace(cfg, hp=replace(cfg.hp, **{param: value}))
        run_dir = cfg.out_dir / f"{param}={value}"
        ckpt = run_training(run_cfg, data, run_dir)
        rows = evaluate(run_cfg, data, ckpt)
        write_report(rows, run_dir, "metrics")
        got = {(m, s): v for m, v, s, _ in rows}
        results.append((value, ckpt.valid_auc, got[("auc", "test")], got[("acc", "test")]))
    with open(cfg.out_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "value", "best_valid_auc", "test_auc", "test_acc"])
        for value, va, ta, tc in results:
            w.writerow([param, value, repr(va), repr(ta), repr(tc)])
    # wide layout: one column per grid value
    width = max(8, *(len(str(r[0])) + 2 for r in results))
    header = f"{param:<8}" + "".join(f"{r[0]:>{width}}" for r in results)
    auc_row = f"{'AUC':<8}" + "".join(f"{r[2]:>{width}.4f}" for r in results)
    (cfg.out_dir / "sweep_table.txt").write_text(header + "\n" + auc_row + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, args) -> int:
    ds = synth_dataset(cfg.synth, cfg.synth_seed)
    paths = write_dataset(ds, cfg.out_dir)
    dataset_stats(ds.kg, ds.interactions).write(cfg.out_dir / "stats.txt", cfg.out_dir / "stats.json")
    logger.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def cmd_stats(cfg: RunConfig, args) -> int:
    cfg.check_files()
    kg, inter = load_dataset(cfg.kg_path, cfg.ratings_path, cfg.item_map_path, cfg.rating_threshold, cfg.g_core)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    dataset_stats(kg, inter).write(cfg.out_dir / "stats.txt", cfg.out_dir / "stats.json")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "synth": cmd_synth, "stats": cmd_stats}


def _bool_arg(text):
    try:
        return parse_bool(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvin", description="Knowledge-graph recommender: train, evaluate, sweep.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "synth", help="INI run configuration")
        p.add_argument("--seed", type=int, help="override [train] seed (and [synth] seed)")
        p.add_argument("--ablate", action="append", default=[], choices=ABLATION_NAMES,
                       help="disable one component; repeatable")
        p.add_argument("--stagewise", type=_bool_arg, help="true/false; override [train] stagewise")
        p.add_argument("--out", help="output directory; overrides [output] dir")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint file (default: <out>/checkpoint.bin)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(args.seed, args.ablate, args.stagewise, args.out)
        return COMMANDS[args.command](cfg, args)
    except (FileNotFoundError, ConfigError) as exc:
        print(f"mvin {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TrainingError, ValueError) as exc:
        print(f"mvin {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
