"""``adaptau`` command line: prepare data, train, sweep tau, noise studies, diagnostics."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import logging
import os
import sys
from dataclasses import fields, replace

import numpy as np

from .dataset import (
    EmptyDataError,
    ParseError,
    SplitPair,
    inject_noise_grouped,
    inject_noise_uniform,
    k_core_filter,
    latent_interactions,
    load_split,
    parse_interactions,
    popularity_grouping,
    train_test_split,
    write_adjacency_list,
    zipf_interactions,
)
from .embedding import magnitude_report, save_checkpoint
from .evaluation import default_tau_grid, evaluate, tau_sensitivity_sweep, threads_from_env
from .losses import grad_sweep, write_grad_sweep_csv
from .oracles import (
    condition_scan,
    finite_difference_suite,
    lambert_w_report,
    random_superloss_draws,
    superloss_report,
    write_oracle_reports,
)
from .temperature import BracketError, estimate_mu, estimate_mu_plus, estimate_sigmas, tau0_full, tau0_oracle_bisect, tau0_simplified
from .trainer import TrainConfig, train

logger = logging.getLogger("adaptau")

# flag dest -> TrainConfig field
FLAG_TO_CONFIG = {
    "strategy": "strategy",
    "tau": "tau",
    "epochs": "epochs",
    "dim": "d",
    "lr": "lr",
    "l2": "l2",
    "negatives": "negatives",
    "batch": "batch_size",
    "seed": "seed",
    "backbone": "backbone",
    "layers": "layers",
    "beta": "beta",
    "dtype": "dtype",
    "eval_interval": "eval_interval",
}
RUN_KEYS = ("dataset", "format", "out", "grid", "noise_mode", "ratios", "k_core", "split", "checkpoint")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------


def read_config_file(path):
    """``key = value`` lines, ``#`` comments. Dotted keys keep their last component."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.rsplit(".", 1)[-1].replace("-", "_")] = value
    return out


def _coerce(value, kind):
    if not isinstance(value, str):
        return value
    if value.lower() in ("none", ""):
        return None
    if kind is bool or kind == "bool":
        return value.lower() in ("1", "true", "yes", "on")
    for conv in (int, float):
        try:
            return conv(value)
        except ValueError:
            pass
    return value


def resolve(args):
    """Merge config-file values under explicit flags; returns ``(TrainConfig, run options dict)``."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    config_names = set(TrainConfig.field_names())
    cfg_kwargs, run = {}, {}
    for key, value in file_values.items():
        key = FLAG_TO_CONFIG.get(key, key)
        if key in config_names:
            cfg_kwargs[key] = _coerce(value, None)
        elif key in RUN_KEYS:
            run[key] = value
        else:
            raise UsageError(f"unknown config key {key!r}")
    for dest, value in vars(args).items():
        if value is None or dest in ("command", "config", "func", "verbose"):
            continue
        if dest in FLAG_TO_CONFIG:
            cfg_kwargs[FLAG_TO_CONFIG[dest]] = value
        else:
            run[dest] = value
    for f in fields(TrainConfig):
        if f.name in cfg_kwargs and f.type in ("bool", bool):
            cfg_kwargs[f.name] = _coerce(cfg_kwargs[f.name], bool)
    try:
        return TrainConfig(**cfg_kwargs), run
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def make_run_dir(out, command):
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = os.path.join(out, f"{command}-{stamp}")
    os.makedirs(path, exist_ok=False)
    return path


def write_resolved_config(path, command, config, run):
    with open(os.path.join(path, "config.txt"), "w") as fh:
        fh.write(f"# resolved configuration for `adaptau {command}`\n")
        for f in fields(config):
            fh.write(f"train.{f.name} = {getattr(config, f.name)}\n")
        for key in sorted(run):
            fh.write(f"run.{key} = {run[key]}\n")


def parse_grid(text):
    """``start:stop:step`` (inclusive) or a comma list; ``None`` gives the default grid."""
    if text is None:
        return default_tau_grid()
    text = str(text)
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            count = int(round((stop - start) / step)) + 1
            return [round(start + j * step, 10) for j in range(count)]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad grid {text!r}") from exc


def parse_ratios(text):
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad ratios {text!r}") from exc


def load_dataset(run, seed):
    """A directory with ``train.txt``/``test.txt`` or a single interaction file (split on the fly)."""
    path = run.get("dataset")
    if not path:
        raise UsageError("--dataset is required")
    fmt = run.get("format") or "adjacency-list"
    if os.path.isdir(path):
        tr, te = os.path.join(path, "train.txt"), os.path.join(path, "test.txt")
        if not (os.path.isfile(tr) and os.path.isfile(te)):
            raise UsageError(f"{path}: expected train.txt and test.txt")
        return load_split(tr, te, fmt)
    if not os.path.isfile(path):
        raise UsageError(f"dataset not found: {path}")
    data = parse_interactions(path, fmt)
    k = int(run.get("k_core") or 1)
    if k > 1:
        data = k_core_filter(data, k)
    return train_test_split(data, float(run.get("split") or 0.8), seed=seed)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_user_taus(path, result, group=None):
    state = result.state
    g = np.zeros(state.n, np.int64) if group is None else group
    _write_rows(
        path,
        ["user", "group", "tau_u", "loss_u"],
        ([u, int(g[u]), float(state.tau_user[u]), float(state.user_loss[u])] for u in range(state.n)),
    )


def write_training_outputs(directory, result, split, group=None):
    result.write_history(os.path.join(directory, "history.csv"))
    result.write_temperature_log(os.path.join(directory, "temperature_log.csv"))
    write_user_taus(os.path.join(directory, "user_tau.csv"), result, group)
    save_checkpoint(result.table, os.path.join(directory, "checkpoint_final.bin"))
    report = evaluate(result.scoring_table(), split.train, split.test, 20, popularity_grouping(split.train, min(10, split.train.m)))
    report.write(directory)
    return report


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_prepare(args):
    _, run = resolve(args)
    path = run.get("dataset")
    if not path or not os.path.isfile(path):
        raise UsageError(f"dataset not found: {path}")
    out = run.get("out") or "."
    os.makedirs(out, exist_ok=True)
    data = parse_interactions(path, run.get("format") or "adjacency-list")
    data = k_core_filter(data, int(run.get("k_core") or 10))
    seed = int(args.seed or 0)
    split = train_test_split(data, float(run.get("split") or 0.8), seed=seed)
    write_adjacency_list(split.train, os.path.join(out, "train.txt"))
    write_adjacency_list(split.test, os.path.join(out, "test.txt"))
    stats = data.stats()
    _write_rows(os.path.join(out, "stats.csv"), ["key", "value"], stats.items())
    print(f"n={stats['n']} m={stats['m']} interactions={stats['interactions']} density={stats['density']:.6f}")
    return 0


def cmd_synth(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    seed = int(args.seed or 0)
    data = zipf_interactions(seed=seed) if args.kind == "zipf" else latent_interactions(seed=seed)
    path = os.path.join(out, f"{args.kind}.txt")
    write_adjacency_list(data, path)
    print(path)
    return 0


def cmd_train(args):
    config, run = resolve(args)
    split = load_dataset(run, config.seed)
    directory = make_run_dir(run.get("out") or "runs", "train")
    write_resolved_config(directory, "train", config, run)
    result = train(split, config)
    report = write_training_outputs(directory, result, split)
    if config.adaptive:
        last = result.temperature_log[-1] if result.temperature_log else None
        if last is not None:
            print(f"tau0={last.tau0:.4f} tau_u min/mean/max={last.min_tau_u:.4f}/{last.mean_tau_u:.4f}/{last.max_tau_u:.4f}")
    print(f"recall@20={report.recall_at_k:.4f} ndcg@20={report.ndcg_at_k:.4f} -> {directory}")
    return 0


def cmd_sweep_tau(args):
    config, run = resolve(args)
    split = load_dataset(run, config.seed)
    grid = parse_grid(run.get("grid"))
    directory = make_run_dir(run.get("out") or "runs", "sweep-tau")
    write_resolved_config(directory, "sweep-tau", config, run)
    sweep = tau_sensitivity_sweep(split, config, grid, n_jobs=threads_from_env())
    sweep.write_csv(os.path.join(directory, "sweep.csv"))
    _write_rows(os.path.join(directory, "best.csv"), ["best_tau", "best_recall", "relative_spread"], [[sweep.best_tau, sweep.best_recall, sweep.relative_spread]])
    print(f"best tau={sweep.best_tau:g} recall@20={sweep.best_recall:.4f} spread={sweep.relative_spread:.3f} -> {directory}")
    return 0


def _best_fixed(split, config, grid):
    sweep = tau_sensitivity_sweep(split, config, grid, n_jobs=threads_from_env())
    return sweep.best_tau, sweep.best_recall, sweep


def cmd_noise(args):
    config, run = resolve(args)
    split = load_dataset(run, config.seed)
    mode = run.get("noise_mode") or "uniform"
    ratios = parse_ratios(run.get("ratios") or "0.2")
    grid = parse_grid(run["grid"]) if run.get("grid") else [config.tau]
    directory = make_run_dir(run.get("out") or "runs", "noise")
    write_resolved_config(directory, "noise", config, run)
    rows = []
    adaptive = replace(config, strategy="adap-tau")

    def noisy_split(train_data):
        return SplitPair(train_data, split.test)

    if mode == "uniform":
        for ratio in ratios:
            noisy = noisy_split(inject_noise_uniform(split.train, ratio, seed=config.seed))
            tau, rec, _ = _best_fixed(noisy, config, grid)
            res = train(noisy, adaptive)
            rows.append(["uniform", ratio, "fixed-tau", tau, rec, ""])
            rows.append(["uniform", ratio, "adap-tau", res.state.tau0, res.report.recall_at_k, res.report.ndcg_at_k])
            sub = os.path.join(directory, f"ratio_{ratio:g}")
            os.makedirs(sub)
            write_training_outputs(sub, res, noisy)
    elif mode == "grouped":
        data, group = inject_noise_grouped(split.train, ratios, seed=config.seed)
        noisy = noisy_split(data)
        tau, rec, _ = _best_fixed(noisy, config, grid)
        res = train(noisy, adaptive)
        rows.append(["grouped", ",".join(f"{r:g}" for r in ratios), "fixed-tau", tau, rec, ""])
        rows.append(["grouped", ",".join(f"{r:g}" for r in ratios), "adap-tau", res.state.tau0, res.report.recall_at_k, res.report.ndcg_at_k])
        write_training_outputs(directory, res, noisy, group)
        taus = res.state.tau_user
        _write_rows(
            os.path.join(directory, "group_tau.csv"),
            ["group", "ratio", "mean_tau_u", "median_tau_u"],
            ([g, r, float(taus[group == g].mean()), float(np.median(taus[group == g]))] for g, r in enumerate(ratios)),
        )
    else:
        raise UsageError(f"--noise-mode must be 'uniform' or 'grouped', got {mode!r}")
    _write_rows(os.path.join(directory, "noise_report.csv"), ["mode", "ratio", "strategy", "tau", "recall", "ndcg"], rows)
    for row in rows:
        print(" ".join(str(x) for x in row))
    return 0


def cmd_diagnose(args):
    config, run = resolve(args)
    split = load_dataset(run, config.seed)
    directory = make_run_dir(run.get("out") or "runs", "diagnose")
    write_resolved_config(directory, "diagnose", config, run)
    train_data = split.train
    result = train(split, config)
    table = result.scoring_table()

    mu_plus, mu = estimate_mu_plus(table, train_data), estimate_mu(table)
    s2, s2p = estimate_sigmas(table, train_data)
    args_ = (train_data.n, train_data.m, len(train_data), config.tau_min, config.tau_max)
    simplified = tau0_simplified(mu_plus, mu, *args_)
    full = tau0_full(mu_plus, mu, s2p, s2, *args_)
    try:
        oracle = tau0_oracle_bisect(table, train_data, tau_min=config.tau_min, tau_max=config.tau_max)
    except BracketError as exc:
        logger.warning("tau0 oracle: %s", exc)
        oracle = float("nan")
    _write_rows(
        os.path.join(directory, "tau0.csv"),
        ["mu_plus", "mu", "sigma2_plus", "sigma2", "tau0_simplified", "tau0_full", "tau0_oracle"],
        [[mu_plus, mu, s2p, s2, simplified, full, oracle]],
    )
    print(f"tau0 simplified={simplified:.6f} full={full:.6f} oracle={oracle:.6f}")

    grid = parse_grid(run.get("grid"))
    write_grad_sweep_csv(grad_sweep(table, train_data, grid), os.path.join(directory, "grad_sweep.csv"))
    _write_rows(os.path.join(directory, "condition_scan.csv"), ["tau", "mean_positive_mass", "bound"], condition_scan(table, train_data, grid, config.tau_min))
    grouping = popularity_grouping(train_data, min(10, train_data.m))
    _write_rows(os.path.join(directory, "magnitudes.csv"), ["group", "mean_item_norm"], enumerate(magnitude_report(result.table, grouping)))

    draws = random_superloss_draws(100, seed=config.seed)
    literal = superloss_report(draws, scaled=False)
    if not literal.passed:
        logger.warning(
            "per-user closed form differs from the unscaled SuperLoss minimiser by up to %.3g relative; "
            "it minimises the tau0-scaled objective (see superloss_literal.csv)",
            literal.max_rel_error,
        )
    write_oracle_reports([literal], os.path.join(directory, "superloss_literal.csv"))
    reports = [
        finite_difference_suite(config.seed),
        lambert_w_report(),
        superloss_report(draws, scaled=True, lower=lambda t: t / np.e),
    ]
    write_oracle_reports(reports, os.path.join(directory, "oracles.csv"))
    for r in reports:
        print(f"{r.name}: max_rel_err={r.max_rel_error:.3g} {'pass' if r.passed else 'FAIL'}")
    return 0 if all(r.passed for r in reports) else 1


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_common(p, *, training=True):
    p.add_argument("--dataset", help="directory with train.txt/test.txt, or one interaction file")
    p.add_argument("--format", choices=["adjacency-list", "pair-list"])
    p.add_argument("--out", help="output directory (run directories are created inside)")
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--k-core", dest="k_core", type=int)
    p.add_argument("--split", type=float, help="train fraction when splitting a single file")
    if not training:
        return
    p.add_argument("--strategy", choices=["no-norm", "fixed-tau", "adap-tau0", "adap-tau"])
    p.add_argument("--tau", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--negatives", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--backbone", choices=["MF", "LightGCN"])
    p.add_argument("--layers", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--dtype", choices=["float64", "float32"])
    p.add_argument("--eval-interval", dest="eval_interval", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="adaptau", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse, k-core filter and split an interaction file")
    _add_common(p, training=False)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="write a synthetic interaction file")
    p.add_argument("--kind", choices=["latent", "zipf"], default="latent")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-tau", help="fixed-tau grid search")
    _add_common(p)
    p.add_argument("--grid", help="start:stop:step or comma list (default 0.05:1.0:0.05)")
    p.set_defaults(func=cmd_sweep_tau)

    p = sub.add_parser("noise", help="false-positive noise study")
    _add_common(p)
    p.add_argument("--noise-mode", dest="noise_mode", choices=["uniform", "grouped"])
    p.add_argument("--ratios", help="comma list of noise ratios")
    p.add_argument("--grid", help="tau grid for the fixed-tau baseline (default: --tau only)")
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("diagnose", help="tau0 estimators, oracle checks, gradient sweep, magnitudes")
    _add_common(p)
    p.add_argument("--grid")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ParseError, EmptyDataError, OSError) as exc:
        print(f"adaptau: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
