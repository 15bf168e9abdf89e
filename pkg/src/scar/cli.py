"""Command-line pipeline over the library.

Subcommands: precompute (build score caches), train (fit and checkpoint),
evaluate (metrics through any graph), augment (dump an augmented view as
TSV), inspect (per-user score report), sweep (Cartesian hyperparameter grid
with a CSV summary). Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.
"""

import argparse
import csv
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

from . import augmentation, data, effectiveness, encoder, evaluation, reports, trainer
from .augmentation import epoch_rng
from .trainer import HyperParams, TrainingDiverged

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_HYPER_FLAGS = {
    "dim": int,
    "num_layers": int,
    "learning_rate": float,
    "batch_size": int,
    "max_epochs": int,
    "patience": int,
    "lambda_infonce": float,
    "lambda_reg": float,
    "lambda_l2": float,
    "tau": float,
    "rho_add": float,
    "rho_rep": float,
    "k": int,
    "seed": int,
}
_HYPER_CHOICES = {"metric": ("aa", "jc", "cn"), "criterion_policy": ("random", "user", "item")}
_HYPER_BOOLS = ("full_softmax", "full_l2")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; usage errors are exit 1 here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_data_flags(parser, require_train=True):
    parser.add_argument("--train", required=require_train, help="training interactions TSV")
    parser.add_argument("--val", help="validation interactions TSV")
    parser.add_argument("--test", help="test interactions TSV")


def _add_cache_flag(parser):
    parser.add_argument(
        "--cache-dir",
        help="score cache directory (default: $SCAR_CACHE_DIR or .scar-cache)",
    )


def _add_hyper_flags(parser):
    parser.add_argument("--config", help="JSON file of hyperparameter keys; flags override")
    for name, typ in _HYPER_FLAGS.items():
        parser.add_argument("--" + name.replace("_", "-"), type=typ, default=None)
    for name, choices in _HYPER_CHOICES.items():
        parser.add_argument("--" + name.replace("_", "-"), choices=choices, default=None)
    for name in _HYPER_BOOLS:
        parser.add_argument(
            "--" + name.replace("_", "-"),
            action=argparse.BooleanOptionalAction,
            default=None,
        )


def _load_hyper(args):
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        values.update(loaded)
    for name in list(_HYPER_FLAGS) + list(_HYPER_CHOICES) + list(_HYPER_BOOLS):
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    try:
        return HyperParams.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


def _load_dataset(args):
    return data.load_interactions(
        args.train, getattr(args, "val", None), getattr(args, "test", None)
    )


def _cache_dir(args):
    return (
        getattr(args, "cache_dir", None)
        or os.environ.get("SCAR_CACHE_DIR")
        or ".scar-cache"
    )


def _scores(rel, hyper, args):
    return effectiveness.precompute_all(rel, hyper.metric, _cache_dir(args))


def _build_graph(kind, rel, hyper, scores, seed, epoch):
    if kind == "original":
        return augmentation.original_graph(rel, epoch)
    user_sim, item_sim, eff_user, eff_item = scores
    eff = {"user": eff_user, "item": eff_item}
    cfg = hyper.augmentation_config()
    crit_add, crit_rep = augmentation.select_criteria(seed, epoch, hyper.criterion_policy)
    if kind == "add":
        return augmentation.col_add(
            rel, eff[crit_add], cfg, epoch_rng(seed, epoch, augmentation.STREAM_ADD), epoch
        )
    return augmentation.col_rep(
        rel, eff[crit_rep], item_sim, cfg,
        epoch_rng(seed, epoch, augmentation.STREAM_REP), epoch,
    )


def cmd_precompute(args):
    dataset = _load_dataset(args)
    rel = data.build_relation_matrix(dataset).matrix
    hyper = _load_hyper(args)
    tic = time.perf_counter()
    _, _, eff_user, eff_item = _scores(rel, hyper, args)
    took = time.perf_counter() - tic
    print(f"alpha[user] = {eff_user.add.nnz} (nnz of addition scores, user criterion)")
    print(f"alpha[item] = {eff_item.add.nnz} (nnz of addition scores, item criterion)")
    print(f"precompute finished in {took:.2f} s; caches in {_cache_dir(args)}")
    return EXIT_OK


def cmd_train(args):
    dataset = _load_dataset(args)
    hyper = _load_hyper(args)
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(hyper.to_dict(), fh, indent=2)
    state, history = trainer.train(dataset, hyper, out_dir=out_dir, cache_dir=_cache_dir(args))
    reports.training_curves(history, os.path.join(out_dir, "training-curves.png"))
    print(f"trained {len(history)} epoch(s); best epoch {state.best_epoch}")
    if state.best_metric > -float("inf"):
        print(f"best validation recall@10 = {state.best_metric:.4f}")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_evaluate(args):
    dataset = _load_dataset(args)
    ckpt = encoder.load_checkpoint(args.checkpoint)
    if (ckpt.num_users, ckpt.num_items) != (dataset.num_users, dataset.num_items):
        raise data.DataError(
            f"checkpoint is {ckpt.num_users}x{ckpt.num_items} but dataset is "
            f"{dataset.num_users}x{dataset.num_items}"
        )
    hyper = _load_hyper(args)
    rel = data.build_relation_matrix(dataset).matrix
    if args.graph == "original":
        graph = augmentation.original_graph(rel)
    else:
        seed = hyper.seed if args.graph_seed is None else args.graph_seed
        graph = _build_graph(
            args.graph, rel, hyper, _scores(rel, hyper, args), seed, args.graph_epoch
        )
    ks = tuple(int(part) for part in args.ks.split(","))
    thresholds = tuple(int(t) for t in args.group_thresholds.split(",")) if args.group_thresholds else ()
    grouping = data.assign_sparsity_groups(dataset, thresholds)
    report = evaluation.evaluate_with_graph(
        ckpt.e0, graph, dataset, ckpt.num_layers,
        split=args.split, ks=ks, grouping=grouping, per_user=bool(args.per_user),
    )
    os.makedirs(args.out_dir, exist_ok=True)
    metrics_path = os.path.join(args.out_dir, "metrics.json")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    reports.group_metrics(report, os.path.join(args.out_dir, "group-metrics.png"))
    if args.per_user:
        with open(args.per_user, "w", encoding="utf-8", newline="") as fh:
            names = sorted(next(iter(report.per_user.values())).keys()) if report.per_user else []
            writer = csv.writer(fh)
            writer.writerow(["user"] + names)
            for user in sorted(report.per_user):
                writer.writerow([user] + [report.per_user[user][k] for k in names])
    for n in ks:
        print(f"recall@{n} = {report.recall[n]:.4f}  ndcg@{n} = {report.ndcg[n]:.4f}")
    print(f"evaluated {report.num_users} user(s) on {args.split}; wrote {metrics_path}")
    return EXIT_OK


def cmd_augment(args):
    dataset = _load_dataset(args)
    hyper = _load_hyper(args)
    rel = data.build_relation_matrix(dataset).matrix
    scores = None
    if args.kind != "original":
        scores = _scores(rel, hyper, args)
    seed = hyper.seed if args.graph_seed is None else args.graph_seed
    graph = _build_graph(args.kind, rel, hyper, scores, seed, args.graph_epoch)
    augmentation.dump_relation_tsv(graph.relation, args.out)
    print(
        f"{args.kind} view: {rel.nnz} -> {graph.relation.nnz} edges"
        + (f" (criterion {graph.criterion})" if graph.criterion else "")
    )
    print(f"wrote {args.out}")
    return EXIT_OK


def _format_scored(pairs, id_of):
    return ", ".join(f"{id_of[i]}:{s:.4f}" for i, s in pairs) or "(none)"


def cmd_inspect(args):
    dataset = _load_dataset(args)
    hyper = _load_hyper(args)
    rel = data.build_relation_matrix(dataset).matrix
    _, _, eff_user, eff_item = _scores(rel, hyper, args)
    item_of = {v: k for k, v in dataset.item_ids.items()}
    for raw in args.users.split(","):
        if raw not in dataset.user_ids:
            log.warning("unknown user %r, skipped", raw)
            continue
        u = dataset.user_ids[raw]
        lo, hi = rel.indptr[u], rel.indptr[u + 1]
        items = rel.indices[lo:hi]
        print(f"user {raw} (index {u}), {len(items)} train item(s)")
        for eff in (eff_user, eff_item):
            rep_scores = augmentation.aligned_row_scores(eff.rep, u, items)
            kept = list(zip(items.tolist(), rep_scores.tolist()))
            add_row = eff.add.getrow(u).tocoo()
            order = sorted(
                zip(add_row.col.tolist(), add_row.data.tolist()),
                key=lambda pair: (-pair[1], pair[0]),
            )[: args.top_k]
            print(f"  criterion {eff.criterion}:")
            print(f"    train items (replacement scores): {_format_scored(kept, item_of)}")
            print(f"    top-{args.top_k} add candidates: {_format_scored(order, item_of)}")
    return EXIT_OK


def _sweep_run(payload):
    dataset, hyper_dict, cache_dir = payload
    hyper = HyperParams.from_dict(hyper_dict)
    state, history = trainer.train(dataset, hyper, cache_dir=cache_dir)
    return {
        "rho_add": hyper.rho_add,
        "rho_rep": hyper.rho_rep,
        "k": hyper.k,
        "lambda_reg": hyper.lambda_reg,
        "epochs_run": len(history),
        "best_epoch": state.best_epoch,
        "val_recall@10": state.best_metric if state.best_metric > -float("inf") else None,
    }


def _grid_values(text, typ, fallback):
    if text is None:
        return [fallback]
    return [typ(part) for part in text.split(",")]


def cmd_sweep(args):
    dataset = _load_dataset(args)
    hyper = _load_hyper(args)
    if not len(dataset.val):
        raise data.DataError("sweep ranks configurations by validation recall; --val is required")
    rel = data.build_relation_matrix(dataset).matrix
    effectiveness.precompute_all(rel, hyper.metric, _cache_dir(args))  # warm the cache once
    grid = {
        "rho_add": _grid_values(args.grid_rho_add, float, hyper.rho_add),
        "rho_rep": _grid_values(args.grid_rho_rep, float, hyper.rho_rep),
        "k": _grid_values(args.grid_k, int, hyper.k),
        "lambda_reg": _grid_values(args.grid_lambda_reg, float, hyper.lambda_reg),
    }
    combos = [
        dict(zip(grid, values)) for values in itertools.product(*grid.values())
    ]
    payloads = [
        (dataset, {**hyper.to_dict(), **combo}, _cache_dir(args)) for combo in combos
    ]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            rows = list(pool.map(_sweep_run, payloads))
    else:
        rows = [_sweep_run(p) for p in payloads]

    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "sweep.csv")
    names = ["rho_add", "rho_rep", "k", "lambda_reg", "epochs_run", "best_epoch", "val_recall@10"]
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        writer.writerows(rows)
    reports.sweep_summary(
        rows, ["rho_add", "rho_rep", "k", "lambda_reg"], "val_recall@10",
        os.path.join(args.out_dir, "sweep.png"),
    )
    best = max(rows, key=lambda r: r["val_recall@10"])
    print(f"ran {len(rows)} configuration(s); best val recall@10 = {best['val_recall@10']:.4f}")
    print(
        "best grid point: "
        + ", ".join(f"{k}={best[k]}" for k in ("rho_add", "rho_rep", "k", "lambda_reg"))
    )
    print(f"wrote {csv_path}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="scar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("precompute", help="build similarity and effectiveness caches")
    _add_data_flags(p)
    _add_cache_flag(p)
    _add_hyper_flags(p)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("train", help="fit an embedding table and checkpoint it")
    _add_data_flags(p)
    _add_cache_flag(p)
    _add_hyper_flags(p)
    p.add_argument("--out-dir", default="scar-run", help="artifact directory")
    p.add_argument(
        "--deterministic", action="store_true",
        help="force sequential execution (runs are sequential regardless)",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank and score a trained checkpoint")
    _add_data_flags(p)
    _add_cache_flag(p)
    _add_hyper_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--graph", choices=("original", "add", "rep"), default="original",
                   help="adjacency used to recompute the readout")
    p.add_argument("--graph-seed", type=int, default=None)
    p.add_argument("--graph-epoch", type=int, default=0)
    p.add_argument("--ks", default="10,20,40", help="comma-separated cutoffs")
    p.add_argument("--group-thresholds", default="5,10",
                   help="sparsity band cut points (empty string disables)")
    p.add_argument("--per-user", help="optional per-user metrics CSV path")
    p.add_argument("--out-dir", default=".", help="where metrics.json lands")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("augment", help="dump an augmented interaction graph as TSV")
    _add_data_flags(p)
    _add_cache_flag(p)
    _add_hyper_flags(p)
    p.add_argument("--kind", choices=("add", "rep", "original"), required=True)
    p.add_argument("--graph-seed", type=int, default=None)
    p.add_argument("--graph-epoch", type=int, default=0)
    p.add_argument("--out", required=True, help="output TSV path")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("inspect", help="per-user effectiveness score report")
    _add_data_flags(p)
    _add_cache_flag(p)
    _add_hyper_flags(p)
    p.add_argument("--users", required=True, help="comma-separated raw user ids")
    p.add_argument("--top-k", type=int, default=5)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("sweep", help="Cartesian grid over (rho_add, rho_rep, k, lambda_reg)")
    _add_data_flags(p)
    _add_cache_flag(p)
    _add_hyper_flags(p)
    p.add_argument("--grid-rho-add", help="comma-separated values, e.g. 0.1,0.2,0.4")
    p.add_argument("--grid-rho-rep", help="comma-separated values")
    p.add_argument("--grid-k", help="comma-separated values, e.g. 3,5,7,9")
    p.add_argument("--grid-lambda-reg", help="comma-separated values, e.g. 1e-2,1e-3")
    p.add_argument("--parallel", type=int, default=1, help="concurrent runs")
    p.add_argument("--out-dir", default="scar-sweep")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except data.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
