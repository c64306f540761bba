"""Command-line interface: synth, bench, train, eval, search, plot."""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import warnings
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import config as config_mod
from .backbone import build_model, build_resnet101_reference, format_plan, load_checkpoint, save_checkpoint
from .cost import benchmark_interleaved, count_macs, modeled_speed, write_cost_csv
from .data import ManifestError, generate_synthetic, load_folder_dataset, write_folder_dataset
from .engine import NumericalError, precision
from .nas import (
    SearchSpace,
    TrainEvalContext,
    derive_rules_report,
    fit_plan,
    prune_design_space,
    rank_trials,
    read_trials_csv,
    search_combinations,
    split_anchors,
    sweep_single_positions,
    write_trials_csv,
)
from .reporting import plot_csv
from .retrieval import evaluate_model, write_results_csv
from .training import train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int, help="base random seed")
    g.add_argument("--threads", type=int, help="BLAS threads")
    g.add_argument("--set", dest="set_items", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="attnreid", description="Attention placement search for person re-identification.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic dataset folder")
    p.add_argument("--domain", choices=("source", "target"))

    p = sub.add_parser("bench", parents=[common], help="MACs, parameters and latency of a plan")
    p.add_argument("--plan")
    p.add_argument("--deep", action="store_true", default=None, help="add baseline and deep reference rows")
    p.add_argument("--timing", choices=("measured", "modeled"))
    p.add_argument("--iters", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("train", parents=[common], help="train one plan, one checkpoint per seed")
    p.add_argument("--plan")
    p.add_argument("--loss", choices=("ce", "circle", "circle_only"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seeds", type=int, help="number of consecutive seeds to train")
    p.add_argument("--data", help="'synthetic' or a dataset folder")
    p.add_argument("--manifest")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on query/gallery")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--manifest")
    p.add_argument("--protocol", choices=("standard", "roreas-shape"))
    p.add_argument("--metric", choices=("cosine", "euclidean"))

    p = sub.add_parser("search", parents=[common], help="sweep, prune and combine attention placements")
    p.add_argument("--budget", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--loss", choices=("ce", "circle", "circle_only"))
    p.add_argument("--workers", type=int)
    p.add_argument("--data")
    p.add_argument("--manifest")

    p = sub.add_parser("plot", parents=[common], help="SVG scatter of mAP against speed")
    p.add_argument("csv", nargs="?", help="trials CSV (default: <out>/trials.csv)")
    p.add_argument("--output", help="SVG path (default: <out>/scatter.svg)")
    return parser


def _resolve(args) -> dict:
    overrides = {"out": args.out, "seed": args.seed, "threads": args.threads}
    for key in ("plan", "deep", "timing", "iters", "warmup", "batch_size", "loss", "epochs", "seeds",
                "data", "manifest", "checkpoint", "protocol", "metric", "budget", "workers", "domain"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    return config_mod.resolve(args.config, overrides, args.set_items)


def _out(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _load_data(cfg, domain: str | None = None):
    if cfg["data"] == "synthetic":
        ds, _ = generate_synthetic(cfg["n_train_ids"], cfg["n_test_ids"], cfg["imgs_per_id"], cfg["n_cams"],
                                   tuple(cfg["input_hw"]), seed=cfg["data_seed"], domain=domain or cfg["domain"])
        return ds
    try:
        return load_folder_dataset(cfg["data"], cfg["manifest"], tuple(cfg["input_hw"]),
                                   tuple(cfg["mean"]), tuple(cfg["std"]))
    except (FileNotFoundError, ManifestError, OSError) as exc:
        raise DataError(str(exc)) from None


def _plan(cfg):
    from .backbone import parse_plan

    try:
        return parse_plan(cfg["plan"], r=cfg["r"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg) -> int:
    out = _out(cfg)
    ds = _load_data({**cfg, "data": "synthetic"})
    manifest = write_folder_dataset(ds, out)
    counts = ds.manifest.counts()
    print(f"wrote {len(ds)} images to {out} ({', '.join(f'{k} {v}' for k, v in counts.items())})")
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_bench(cfg) -> int:
    out = _out(cfg)
    bcfg = config_mod.backbone_config(cfg, 751)
    plan = _plan(cfg)
    try:
        plan = fit_plan(plan, bcfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = [(format_plan(plan), lambda: build_model(bcfg, plan, cfg["seed"]))]
    if cfg["deep"]:
        if plan.entries:
            rows.insert(0, ("none", lambda: build_model(bcfg, None, cfg["seed"])))
        rows.append(("resnet101", lambda: build_resnet101_reference(bcfg, cfg["seed"])))
    with precision(cfg["dtype"]):
        models = {config_id: make() for config_id, make in rows}
        if cfg["timing"] == "modeled":
            reports = [modeled_speed(count_macs(m, config_id=k), cfg["batch_size"]) for k, m in models.items()]
        else:
            measured = benchmark_interleaved(models, cfg["batch_size"], cfg["warmup"], cfg["iters"], cfg["seed"],
                                             cfg["threads"])
            reports = list(measured.values())
    for rep in reports:
        print(f"{rep.config_id:<24} MACs {rep.total_macs:>14,d}  params {rep.total_params:>11,d}  "
              f"{rep.batches_per_second:9.3f} batches/s  {rep.ms_per_batch:9.3f} ms/batch")
    with open(out / "bench.csv", "w", encoding="utf-8", newline="") as fh:
        write_cost_csv(reports, fh)
    _write(out / "bench.json", json.dumps({"schema": 1, "reports": [r.to_dict() for r in reports]},
                                          sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def _check_protocol(ds, protocol: str) -> None:
    test = set(ds.pids[ds.indices("query")].tolist()) | set(ds.pids[ds.indices("gallery")].tolist())
    if not set(ds.pids[ds.indices("query")].tolist()) & set(ds.pids[ds.indices("gallery")].tolist()):
        raise DataError("query and gallery identities do not overlap; nothing to evaluate")
    if protocol == "roreas-shape":
        shared = set(ds.pids[ds.indices("train")].tolist()) & test
        if shared:
            raise DataError(f"train and test identities overlap ({len(shared)} shared ids)")


def cmd_train(cfg) -> int:
    out = _out(cfg)
    ds = _load_data(cfg)
    n_ids = ds.num_ids("train")
    if n_ids == 0:
        raise DataError("dataset has no training identities")
    bcfg = config_mod.backbone_config(cfg, n_ids)
    plan = fit_plan(_plan(cfg), bcfg)
    has_test = len(ds.indices("query")) > 0 and len(ds.indices("gallery")) > 0
    results = []
    for k in range(cfg["seeds"]):
        seed = cfg["seed"] + k
        tcfg = config_mod.train_config(cfg, seed)
        with precision(cfg["dtype"]):
            model = build_model(bcfg, plan, seed)
            model, log = train(model, ds, tcfg)
        run_dir = out / f"seed{seed}"
        run_dir.mkdir(exist_ok=True)
        save_checkpoint(model, run_dir / "checkpoint.npz")
        with open(run_dir / "train_log.csv", "w", encoding="utf-8", newline="") as fh:
            log.write_csv(fh)
        _write(run_dir / "train_log.json", log.to_json() + "\n")
        line = f"seed {seed}: final loss {log.losses[-1]:.4f}"
        if has_test:
            _check_protocol(ds, cfg["protocol"])
            res = evaluate_model(model, ds, cfg["metric"], config_id=f"{format_plan(plan)}|seed{seed}")
            results.append(res)
            line += f"  mAP {res.mAP:.4f}  rank-1 {res.rank(1):.4f}"
        print(line)
    summary = {"schema": 1, "plan": format_plan(plan), "loss": cfg["loss"],
               "seeds": [cfg["seed"] + k for k in range(cfg["seeds"])]}
    if results:
        maps = [r.mAP for r in results]
        std = statistics.stdev(maps) if len(maps) > 1 else 0.0
        summary.update({"map_values": maps, "map_mean": statistics.fmean(maps), "map_std": std})
        with open(out / "eval.csv", "w", encoding="utf-8", newline="") as fh:
            write_results_csv(results, fh)
        print(f"mAP {statistics.fmean(maps):.4f} ± {std:.4f} over {len(maps)} seed(s)")
    _write(out / "summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_eval(cfg) -> int:
    out = _out(cfg)
    if not cfg["checkpoint"]:
        raise UsageError("eval needs --checkpoint")
    ckpt = Path(cfg["checkpoint"])
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    ds = _load_data({**cfg, "input_hw": list(model.cfg.input_hw)})
    _check_protocol(ds, cfg["protocol"])
    res = evaluate_model(model, ds, cfg["metric"], config_id=format_plan(model.plan))
    print(f"mAP {res.mAP:.4f}  rank-1 {res.rank(1):.4f}  rank-5 {res.rank(5):.4f}  "
          f"({len(res.valid_queries)} valid queries)")
    _write(out / "eval.json", res.to_json() + "\n")
    with open(out / "eval.csv", "w", encoding="utf-8", newline="") as fh:
        write_results_csv([res], fh)
    return EXIT_OK


def cmd_search(cfg) -> int:
    out = _out(cfg)
    ds = _load_data(cfg)
    bcfg = config_mod.backbone_config(cfg, ds.num_ids("train"))
    positions = tuple(cfg["positions"]) or tuple(range(1, bcfg.num_positions + 1))
    space = SearchSpace(kinds=tuple(cfg["kinds"]), positions=positions, max_blocks=cfg["max_blocks"],
                        seeds=tuple(cfg["seed"] + k for k in range(cfg["search_seeds"])), r=cfg["r"])
    ctx = TrainEvalContext(ds, bcfg, config_mod.train_config(cfg), lr_grid=cfg["lr_grid"],
                           batch_size=cfg["batch_size"], dtype=cfg["dtype"])
    trials_path = out / "trials.csv"
    done = {}
    if trials_path.exists():
        with open(trials_path, newline="", encoding="utf-8") as fh:
            done = {t.key: t for t in read_trials_csv(fh, r=cfg["r"])}
        print(f"resuming: {len(done)} completed trial(s) in {trials_path}")
    finished = dict(done)

    def record(trial):
        finished[trial.key] = trial
        with open(trials_path, "w", encoding="utf-8", newline="") as fh:
            write_trials_csv(sorted(finished.values(), key=lambda t: t.key), fh)
        print(f"  {trial.key:<32} mAP {trial.map_mean:.4f} ± {trial.map_std:.4f}  {trial.speed:.3f} batches/s")

    singles = sweep_single_positions(space, ctx, cfg["workers"], done, record)
    base, deep, _ = split_anchors(singles)
    pruned = prune_design_space(singles, (base, deep), space)
    print(f"{len(pruned.pairs())} of {len(space.pairs())} (kind, position) pairs survive pruning")
    ranked = []
    if not pruned.empty:
        ranked = search_combinations(pruned, ctx, singles, cfg["budget"], cfg["mixed"], cfg["workers"], done, record)
    else:
        print("warning: every candidate was pruned; no combinations to search", file=sys.stderr)
    everything = list(finished.values())
    with open(trials_path, "w", encoding="utf-8", newline="") as fh:
        write_trials_csv(sorted(everything, key=lambda t: t.key), fh)
    report = derive_rules_report(rank_trials(everything), bcfg)
    _write(out / "rules.json", report.to_json() + "\n")
    _write(out / "rules.txt", report.to_text())
    print(report.to_text(), end="")
    if ranked:
        print(f"best plan: {ranked[0].key}  mAP {ranked[0].map_mean:.4f}")
    return EXIT_OK


def cmd_plot(cfg, args) -> int:
    out = Path(cfg["out"])
    src = Path(args.csv) if args.csv else out / "trials.csv"
    if not src.exists():
        raise DataError(f"CSV not found: {src}")
    dst = Path(args.output) if args.output else out / "scatter.svg"
    dst.parent.mkdir(parents=True, exist_ok=True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        n = plot_csv(src, dst)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(f"wrote {dst} ({n} points)")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "bench": cmd_bench, "train": cmd_train, "eval": cmd_eval, "search": cmd_search}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve(args)
        with threadpool_limits(limits=cfg["threads"]):
            if args.command == "plot":
                return cmd_plot(cfg, args)
            return COMMANDS[args.command](cfg)
    except (UsageError, config_mod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ManifestError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
