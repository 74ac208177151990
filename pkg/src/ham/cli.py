"""Command-line pipeline: gen-synth, preprocess, split, train, evaluate, bench.

Config is a JSON file; ``--set key.path=value`` and the named flags
override it.  Keys (all optional, defaults shown by ``ham show-config``)::

    paths.raw          raw interaction log
    paths.dataset      preprocessed dataset file
    paths.out_dir      directory for checkpoints and reports
    raw_format         {delimiter, columns, skip_header}
    preprocess         {min_user_interactions, min_item_interactions, positive_threshold}
    setting            80-20-cut | 80-3-cut | 3-los
    hyper              HyperParams fields (d, n_h, n_l, n_p, p, pooling, ablation, reg, ...)
    grid               {hyper field: [values, ...]}; train iterates the cross-product
    ks                 metric cutoffs
    exclude_seen       drop previously seen items from the ranking
    retrain            evaluate: retrain on train+validation before testing
"""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import logging
import os
import sys

import numpy as np

from . import data as D
from .evaluation import EvalResult, NoEvaluableUsersError, bench_latency, evaluate, format_latency
from .model import HyperParams, ModelParams, load_checkpoint, save_checkpoint
from .synth import generate, to_records, write_log
from .training import TrainingError, train

log = logging.getLogger("ham")

DEFAULT_CONFIG = {
    "paths": {"raw": None, "dataset": "dataset.txt", "out_dir": "run"},
    "raw_format": {"delimiter": ",", "columns": list(D.COLUMNS), "skip_header": False},
    "preprocess": {"min_user_interactions": 10, "min_item_interactions": 5, "positive_threshold": 4.0},
    "setting": "80-20-cut",
    "hyper": HyperParams().to_dict(),
    "grid": None,
    "ks": [5, 10],
    "exclude_seen": False,
    "retrain": False,
}

EXIT = {"usage": 2, "config": 2, "input": 3, "data": 4, "training": 5, "shape": 6}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        self.category = category
        super().__init__(message)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(cfg, dotted, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise CliError("config", f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise CliError("input", f"config file not found: {args.config}")
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = _merge(cfg, json.load(fh))
        except json.JSONDecodeError as e:
            raise CliError("config", f"{args.config}: {e}") from None
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise CliError("config", f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(cfg, key.strip(), value)
    if getattr(args, "setting", None):
        cfg["setting"] = args.setting
    if getattr(args, "seed", None) is not None:
        cfg["hyper"]["seed"] = args.seed
    if getattr(args, "exclude_seen", False):
        cfg["exclude_seen"] = True
    if getattr(args, "out_dir", None):
        cfg["paths"]["out_dir"] = args.out_dir
    try:
        D.SplitSetting.parse(cfg["setting"])
        HyperParams.from_dict(cfg["hyper"])
    except (ValueError, TypeError) as e:
        raise CliError("config", str(e)) from None
    if cfg.get("grid"):
        for k, vals in cfg["grid"].items():
            if k not in cfg["hyper"]:
                raise CliError("config", f"grid key {k!r} is not a hyperparameter")
            if not isinstance(vals, list) or not vals:
                raise CliError("config", f"grid values for {k!r} must be a non-empty list")
    return cfg


def config_line(cfg) -> str:
    return "config: " + json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def _out(cfg, name):
    out_dir = cfg["paths"]["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _load_dataset(cfg):
    path = cfg["paths"]["dataset"]
    if not path or not os.path.exists(path):
        raise CliError("input", f"dataset file not found: {path}")
    try:
        return D.load_dataset(path)
    except D.DataError as e:
        raise CliError("data", str(e)) from None


# --- subcommands ----------------------------------------------------------

def cmd_gen_synth(args, cfg):
    seqs = generate(args.kind, args.users, args.items, args.length, seed=args.seed or 0,
                    noise=args.noise, pref_size=args.pref_size)
    write_log(args.output, to_records(seqs))
    print(f"wrote {args.users * args.length} interactions to {args.output}")


def cmd_preprocess(args, cfg):
    raw = cfg["paths"]["raw"]
    if not raw or not os.path.exists(raw):
        raise CliError("input", f"raw log not found: {raw}")
    fmt = cfg["raw_format"]
    try:
        records = D.parse_interactions(raw, delimiter=fmt["delimiter"], columns=fmt["columns"],
                                       skip_header=fmt["skip_header"])
        dataset = D.preprocess(records, **cfg["preprocess"])
    except D.DataError as e:
        raise CliError("data", str(e)) from None
    out = cfg["paths"]["dataset"]
    if os.path.dirname(out):
        os.makedirs(os.path.dirname(out), exist_ok=True)
    D.save_dataset(dataset, out, header_comments=[config_line(cfg)])
    summary = dataset.summary()
    _write(out + ".summary", "".join(f"{k}={_fmt(v)}\n" for k, v in summary.items()))
    print("#users  #items  #intrns  #intrns/u  #u/i  density")
    print(f"{summary['users']}  {summary['items']}  {summary['interactions']}  "
          f"{summary['intrns_per_user']:.1f}  {summary['users_per_item']:.1f}  {summary['density']:.4%}")


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def cmd_split(args, cfg):
    dataset = _load_dataset(cfg)
    plan = D.split(dataset, cfg["setting"])
    lines = [f"# {config_line(cfg)}", "user,train_end,valid_end,test_end"]
    lines += [f"{u},{a},{b},{c}" for u, (a, b, c) in enumerate(zip(plan.train_end, plan.valid_end, plan.test_end))]
    path = _out(cfg, "split.csv")
    _write(path, "\n".join(lines) + "\n")
    print(f"wrote {path}")


def _train_one(dataset, plan, hyper):
    try:
        return train(dataset, plan, hyper)
    except TrainingError as e:
        raise CliError("training", str(e)) from None
    except ValueError as e:
        raise CliError("config", str(e)) from None


def cmd_train(args, cfg):
    dataset = _load_dataset(cfg)
    plan = D.split(dataset, cfg["setting"])
    base = cfg["hyper"]
    grid = cfg.get("grid") or {}
    names = sorted(grid)
    combos = list(itertools.product(*(grid[k] for k in names))) if names else [()]

    results = []
    best = None
    for combo in combos:
        values = dict(base, **dict(zip(names, combo)))
        hyper = HyperParams.from_dict(values)
        log.info("training %s", {k: values[k] for k in names} or "base config")
        params, report = _train_one(dataset, plan, hyper)
        score = next((c["recall@10"] for c in report.checkpoints if c["epoch"] == report.best_epoch),
                     float("nan"))
        results.append((combo, hyper, report, score))
        if best is None or score > best[3]:
            best = (combo, hyper, report, score, params)

    combo, hyper, report, score, params = best
    header = [config_line(cfg), "hyper: " + json.dumps(hyper.to_dict(), sort_keys=True)]
    save_checkpoint(_out(cfg, "model.ckpt"), params, hyper,
                    meta={"config": cfg, "best_epoch": report.best_epoch, "setting": cfg["setting"]})
    _write(_out(cfg, "train_report.csv"), report.to_text(header))
    if names:
        lines = [f"# {config_line(cfg)}", ",".join(names + ["best_epoch", "recall@10", "best"])]
        for c, h, r, s in results:
            mark = "1" if c == combo else "0"
            lines.append(",".join([json.dumps(v) for v in c] + [str(r.best_epoch), f"{s:.6f}", mark]))
        _write(_out(cfg, "grid.csv"), "\n".join(lines) + "\n")
    print(f"best epoch {report.best_epoch}, validation recall@10 {score:.4f}"
          + (f", grid point {dict(zip(names, combo))}" if names else ""))


def _check_shapes(params: ModelParams, dataset: D.Dataset):
    for what, a, b in (("users (m)", params.num_users, dataset.num_users),
                       ("items (n)", params.num_items, dataset.num_items)):
        if a != b:
            raise CliError("shape", f"checkpoint {what}={a} but dataset has {b}")


def cmd_evaluate(args, cfg):
    dataset = _load_dataset(cfg)
    ckpt = args.checkpoint or _out(cfg, "model.ckpt")
    if not os.path.exists(ckpt):
        raise CliError("input", f"checkpoint not found: {ckpt}")
    params, hyper, meta = load_checkpoint(ckpt)
    _check_shapes(params, dataset)
    plan = D.split(dataset, cfg["setting"])
    if cfg.get("retrain"):
        epochs = meta.get("best_epoch") or hyper.max_epochs
        rehyper = HyperParams.from_dict(dict(hyper.to_dict(), max_epochs=epochs))
        try:
            params, _ = train(dataset, plan, rehyper, include_validation=True)
        except TrainingError as e:
            raise CliError("training", str(e)) from None
    try:
        res = evaluate(params, dataset, plan, hyper, ks=cfg["ks"], measure_latency=args.bench,
                       exclude_seen=cfg["exclude_seen"])
    except NoEvaluableUsersError as e:
        raise CliError("data", str(e)) from None
    header = [config_line(cfg), "hyper: " + json.dumps(hyper.to_dict(), sort_keys=True),
              f"setting={res.meta['setting']} exclude_seen={res.meta['exclude_seen']} "
              f"users={res.num_users_evaluated}"]
    _write(_out(cfg, "metrics.csv"), res.to_csv(header))
    if args.bench:
        _write(_out(cfg, "latency.txt"), f"per_user_latency_seconds,{format_latency(res.per_user_latency_mean)}\n")
    print(res.to_table())


def cmd_bench(args, cfg):
    """Per-user score_all + top_k latency.  With a checkpoint, over the
    dataset's users; otherwise a sweep over synthetic item counts."""
    if args.checkpoint:
        dataset = _load_dataset(cfg)
        params, hyper, _ = load_checkpoint(args.checkpoint)
        _check_shapes(params, dataset)
        plan = D.split(dataset, cfg["setting"])
        res = evaluate(params, dataset, plan, hyper, ks=cfg["ks"], measure_latency=True,
                       exclude_seen=cfg["exclude_seen"])
        print(f"per-user latency: {format_latency(res.per_user_latency_mean)} s "
              f"over {res.num_users_evaluated} users")
        return
    hyper = HyperParams.from_dict(cfg["hyper"])
    print("items,per_user_latency_seconds")
    for n in args.items:
        lat = synthetic_latency(n, hyper, users=args.users, seed=hyper.seed)
        print(f"{n},{format_latency(lat)}")


def synthetic_latency(num_items: int, hyper: HyperParams, users: int = 200, seed: int = 0, k: int = 10,
                      repeats: int = 3) -> float:
    """Best-of-``repeats`` mean per-user latency on random parameters."""
    rng = np.random.default_rng(seed)
    params = ModelParams.init(users, num_items, hyper.d, rng)
    contexts = rng.integers(num_items, size=(users, hyper.n_h))
    uids = np.arange(users)
    bench_latency(params, hyper, contexts[:10], uids[:10], k)  # warm-up
    return min(bench_latency(params, hyper, contexts, uids, k) for _ in range(repeats))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. hyper.d=32 (value parsed as JSON)")
    common.add_argument("--setting", choices=[s.value for s in D.SplitSetting])
    common.add_argument("--seed", type=int)
    common.add_argument("--exclude-seen", action="store_true")
    common.add_argument("--out-dir")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="ham", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", parents=[common], help="write a synthetic interaction log")
    g.add_argument("--kind", choices=["markov", "preference"], default="markov")
    g.add_argument("--users", type=int, default=200)
    g.add_argument("--items", type=int, default=50)
    g.add_argument("--length", type=int, default=60)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--pref-size", type=int, default=5)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_gen_synth)

    sub.add_parser("preprocess", parents=[common], help="filter, binarize and remap a raw log").set_defaults(
        func=cmd_preprocess)
    sub.add_parser("split", parents=[common], help="write per-user split boundaries").set_defaults(func=cmd_split)
    sub.add_parser("train", parents=[common], help="train (or grid-search) and keep the best checkpoint").set_defaults(
        func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="score the test items of a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--bench", action="store_true", help="also measure per-user latency")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", parents=[common], help="per-user inference latency")
    b.add_argument("--checkpoint")
    b.add_argument("--items", type=int, nargs="+", default=[1000, 10000, 100000])
    b.add_argument("--users", type=int, default=200)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("show-config", parents=[common], help="print the effective config")
    s.set_defaults(func=lambda args, cfg: print(json.dumps(cfg, indent=2, sort_keys=True)))
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args)
        args.func(args, cfg)
    except CliError as e:
        print(f"ham: error[{e.category}]: {e}", file=sys.stderr)
        return EXIT[e.category]
    except OSError as e:
        print(f"ham: error[input]: {e}", file=sys.stderr)
        return EXIT["input"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
