"""Command-line interface: synth, train, eval, report, gradcheck, ablation.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NumericError, inject_adjoint_fault
from .data import (SchemaError, SynthConfig, generate_synthetic, parse_keypoint_file, prepare_clips,
                   split_by_participant, stack_clips, synth_summary, write_keypoint_file)
from .experiment import (SYNTHETIC_LR, VARIANTS, StreamTrainer, get_variant, run_ablation,
                         variant_logits)
from .graph import build_hand_graph, graph_to_json, partition_adjacency
from .network import ModelConfig
from .risk import RiskConfig
from .stats import bootstrap_eval, compute_metrics, friedman_test
from .training import CheckpointError, TrainConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("pulsar_pd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RISK_MODES = {"pn": "pn", "pu": "pu_unbiased", "pu-nn": "pu_nonneg"}


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config


def load_config(path):
    """Read a TOML or JSON config file into a dict of sections."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_bytes()
    try:
        if p.suffix.lower() == ".json":
            cfg = json.loads(text)
        else:
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib

            cfg = tomllib.loads(text.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a table/object of sections")
    known = {"synth", "model", "train", "risk", "data", "eval"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _section(cfg, name):
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section [{name}] must be a table")
    return dict(sec)


def _build(cls, values, what):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what} configuration: {exc}") from None


def _build_synth(values):
    try:
        return SynthConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synth configuration: {exc}") from None


def parse_bootstrap(text):
    try:
        n, r = text.lower().split("x")
        n, r = int(n), int(r)
    except ValueError:
        raise ConfigError(f"--bootstrap expects NxR, e.g. 120x20; got {text!r}") from None
    if n < 1 or r < 1:
        raise ConfigError("--bootstrap sizes must be positive")
    return n, r


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_dataset(path):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"dataset not found: {p}")
    try:
        return parse_keypoint_file(p)
    except SchemaError as exc:
        raise DataError(str(exc)) from None


# ---------------------------------------------------------------- synth


def cmd_synth(args):
    cfg = load_config(args.config)
    values = _section(cfg, "synth")
    if args.seed is not None:
        values["seed"] = args.seed
    if args.contamination is not None:
        values["contamination"] = args.contamination
    synth = _build_synth(values)
    seqs = generate_synthetic(synth)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.test_out:
        frac = _section(cfg, "data").get("test_fraction", args.test_fraction)
        train, test = split_by_participant(seqs, frac, synth.seed)
        write_keypoint_file(train, out)
        write_keypoint_file(test, args.test_out)
        parts = {"train": synth_summary(train), "test": synth_summary(test)}
    else:
        write_keypoint_file(seqs, out)
        parts = {"all": synth_summary(seqs)}
    print(f"{'split':<6} {'seqs':>5} {'positive':>9} {'unlabeled':>10} {'hidden+':>8} {'true+':>6}")
    for name, s in parts.items():
        print(f"{name:<6} {s['sequences']:>5} {s['positive']:>9} {s['unlabeled']:>10} "
              f"{s['hidden_positive']:>8} {s['true_positive_class']:>6}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def resolve_plan(args, cfg):
    """Model, training and risk settings for a variant: defaults < config < flags."""
    variant = get_variant(args.variant)
    model_values = _section(cfg, "model")
    model_values.setdefault("dtype", "float32")
    model_values["adaptive"] = variant.adaptive
    model = _build(ModelConfig, model_values, "model")

    risk_values = _section(cfg, "risk")
    mode = risk_values.pop("mode", None)
    if args.risk_mode is not None:
        mode = RISK_MODES[args.risk_mode]
    elif mode in RISK_MODES:
        mode = RISK_MODES[mode]
    if mode is None:
        mode = "pu_nonneg" if variant.pu else "pn"
    if (mode == "pn") == variant.pu:
        raise ConfigError(f"variant {variant.name} is {'PU' if variant.pu else 'PN'}; "
                          f"risk mode {mode!r} does not fit it")
    if args.prior is not None:
        risk_values["theta_p"] = args.prior
    risk = _build(RiskConfig, {**risk_values, "mode": mode}, "risk")

    train_values = _section(cfg, "train")
    if args.seed is not None:
        train_values["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        train_values["max_epochs"] = args.epochs
    train = _build(TrainConfig, {**train_values, "risk": risk}, "train")
    return variant, model, train


def cmd_train(args):
    cfg = load_config(args.config)
    variant, model, train = resolve_plan(args, cfg)
    data_cfg = _section(cfg, "data")
    seqs = _read_dataset(args.data)
    if not seqs:
        raise DataError("dataset is empty")
    if not any(s.label == "positive" for s in seqs):
        raise ConfigError(f"variant {variant.name} needs labeled positives; the dataset has none")
    val_fraction = data_cfg.get("val_fraction", 0.2)
    try:
        tr_seqs, va_seqs = split_by_participant(seqs, val_fraction, train.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    tr, tr_rep = prepare_clips(tr_seqs, augment=True)
    va, va_rep = prepare_clips(va_seqs, augment=False)
    if not tr:
        raise DataError("no 80-frame clips in the training split")
    train_arr, val_arr = stack_clips(tr), stack_clips(va)
    if not np.any(train_arr.observed == 0):
        raise ConfigError(f"{train.risk.mode} training needs unlabeled/negative clips; none found")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.jsonl", "w", encoding="utf-8", newline="\n") as log_fh:
        trainer = StreamTrainer(train_arr, val_arr, train, model, log_file=log_fh)
        checkpoints = trainer.fit(variant)
    files = {}
    for stream, ck in checkpoints.items():
        name = f"{stream}.ckpt"
        save_checkpoint(ck, out / name)
        files[stream] = name
    _write_json(out / "plan.json", {
        "variant": variant.name, "adaptive": variant.adaptive, "pu": variant.pu,
        "streams": list(variant.streams), "checkpoints": files,
        "model_config": model.to_dict(), "train_config": train.to_dict(),
        "data": {"path": Path(args.data).name, "val_fraction": val_fraction,
                 "train": tr_rep.to_dict(), "val": va_rep.to_dict()},
    })
    print(f"variant {variant.name}: {len(checkpoints)} checkpoint(s) in {out}")
    print(f"{'stream':<13} {'best_epoch':>10} {'val_acc':>8}")
    for stream, ck in checkpoints.items():
        print(f"{stream:<13} {ck.best_epoch:>10} {ck.best_val_accuracy:>8.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _load_plan(ckpt_dir):
    d = Path(ckpt_dir)
    plan_path = d / "plan.json"
    if not plan_path.is_file():
        raise DataError(f"no plan.json in {d}; expected the output directory of `train`")
    plan = json.loads(plan_path.read_text(encoding="utf-8"))
    checkpoints = {}
    for stream, name in plan["checkpoints"].items():
        path = d / name
        if not path.is_file():
            raise DataError(f"missing checkpoint {path}")
        try:
            checkpoints[stream] = load_checkpoint(path)
        except CheckpointError as exc:
            raise DataError(f"{path}: {exc}") from None
    return plan, checkpoints


def cmd_eval(args):
    cfg = load_config(args.config)
    eval_cfg = _section(cfg, "eval")
    plan, checkpoints = _load_plan(args.checkpoints)
    seqs = _read_dataset(args.data)
    clips, rep = prepare_clips(seqs, augment=False)
    if not clips:
        raise DataError("no 80-frame clips in the evaluation data")
    arr = stack_clips(clips)
    has_truth = all(s.true_label is not None for s in seqs)
    labels = arr.truth if has_truth else arr.observed
    if not has_truth:
        log.warning("dataset lacks true labels; scoring against observed labels")
    logits = variant_logits(checkpoints, arr)
    metrics = {k: compute_metrics(v, labels).to_dict() for k, v in logits.items()}
    seed = args.seed if args.seed is not None else eval_cfg.get("seed", 0)
    result = {"variant": plan["variant"], "clips": len(arr), "label_source": "true" if has_truth
              else "observed", "metrics": metrics, "prepare": rep.to_dict()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    boot_text = args.bootstrap or eval_cfg.get("bootstrap")
    if boot_text:
        n, r = parse_bootstrap(boot_text)
        boot = bootstrap_eval({"fused": logits["fused"]}, labels, arr.groups, n, r, seed)["fused"]
        result["bootstrap"] = {"n_participants": n, "reps": r, "seed": seed,
                               "mean": boot.mean, "std": boot.std}
        _write_json(out / "bootstrap.json", {"variant": plan["variant"], "n_participants": n,
                                             "reps": r, "seed": seed, "label_source":
                                                 result["label_source"], **boot.to_dict()})
    _write_json(out / "metrics.json", result)
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        names = list(next(iter(metrics.values())))
        w.writerow(["variant", "scope"] + names)
        for scope, m in metrics.items():
            w.writerow([plan["variant"], scope] + ["" if m[k] is None else repr(float(m[k]))
                                                   for k in names])
    print(f"variant {plan['variant']} on {len(arr)} clips ({result['label_source']} labels)")
    _print_metrics(metrics)
    if "bootstrap" in result:
        b = result["bootstrap"]
        print(f"bootstrap {b['n_participants']}x{b['reps']}: accuracy "
              f"{b['mean']['accuracy']:.4f} +/- {b['std']['accuracy']:.4f}")
    return EXIT_OK


def _print_metrics(metrics):
    cols = ["accuracy", "precision", "recall", "f1_macro", "f1_weighted", "auroc"]
    print(f"{'scope':<13}" + "".join(f"{c:>12}" for c in cols))
    for scope, m in metrics.items():
        cells = "".join(f"{'n/a':>12}" if m[c] is None else f"{m[c]:>12.4f}" for c in cols)
        print(f"{scope:<13}{cells}")


# ---------------------------------------------------------------- report


def cmd_report(args):
    if args.graph:
        graph = build_hand_graph()
        text = graph_to_json(graph, partition_adjacency(graph, "spatial"))
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(text + "\n", encoding="utf-8")
        else:
            print(text)
        return EXIT_OK
    if not args.inputs or len(args.inputs) < 2:
        raise ConfigError("report needs at least two eval outputs (bootstrap.json files or dirs)")
    names, columns, draws = [], [], set()
    for item in args.inputs:
        p = Path(item)
        if p.is_dir():
            p = p / "bootstrap.json"
        if not p.is_file():
            raise DataError(f"missing bootstrap report {p}; run eval with --bootstrap")
        rep = json.loads(p.read_text(encoding="utf-8"))
        draws.add((rep["n_participants"], rep["reps"], rep["seed"]))
        names.append(rep["variant"])
        columns.append([r["accuracy"] for r in rep["replicates"]])
    if len(draws) != 1:
        raise DataError("bootstrap reports use different draws; rerun eval with one --bootstrap/--seed")
    if len(set(names)) != len(names):
        names = [f"{n}#{i}" for i, n in enumerate(names)]
    matrix = np.column_stack(columns)
    alpha = args.alpha
    fr = friedman_test(matrix, names, alpha)
    ranks_per_rep = (matrix.shape[1] * (matrix.shape[1] + 1)) / 2
    holm = {a: {b: 1.0 for b in names} for a in names}
    for pr in fr.pairwise:
        holm[pr["a"]][pr["b"]] = holm[pr["b"]][pr["a"]] = pr["p_holm"]
    report = {**fr.to_dict(), "models": names, "replicates": matrix.shape[0],
              "rank_sum_per_replicate": ranks_per_rep, "holm_matrix": holm,
              "accuracy_matrix": matrix.tolist()}
    if args.out:
        _write_json(args.out, report)
    print(f"Friedman chi2 = {fr.statistic:.4f}, df = {fr.df}, p = {fr.p_value:.4g}, "
          f"critical({alpha}) = {fr.critical_value:.3f} -> "
          f"{'reject' if fr.reject else 'retain'} H0")
    print(f"{'model':<12} {'avg_rank':>9}")
    for n in sorted(names, key=lambda k: fr.average_ranks[k]):
        print(f"{n:<12} {fr.average_ranks[n]:>9.3f}")
    for pr in fr.pairwise:
        print(f"{pr['a']:>10} vs {pr['b']:<10} z={pr['z']:+.3f} p={pr['p']:.4g} "
              f"holm={pr['p_holm']:.4g}")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args):
    from .gradcheck import run_gradcheck

    seed = args.seed if args.seed is not None else 0
    if args.inject_fault:
        with inject_adjoint_fault(args.inject_fault):
            report = run_gradcheck(seed, args.seeds)
    else:
        report = run_gradcheck(seed, args.seeds)
    print(report.table())
    if args.out:
        _write_json(args.out, report.to_dict())
    if not report.passed:
        print(f"gradient check FAILED for: {', '.join(report.failing_primitives())}",
              file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(report.max_error)} cases pass at tolerance {report.tolerance:g} "
          f"over {len(report.seeds)} seeds")
    return EXIT_OK


# ---------------------------------------------------------------- ablation


def cmd_ablation(args):
    cfg = load_config(args.config)
    synth_values = _section(cfg, "synth")
    if args.seed is not None:
        synth_values["seed"] = args.seed
    seed = synth_values.get("seed", 0)
    if args.data:
        seqs = _read_dataset(args.data)
    else:
        seqs = generate_synthetic(_build_synth(synth_values))
    train_values = _section(cfg, "train")
    train_values.setdefault("seed", seed)
    train_values.setdefault("lr", SYNTHETIC_LR)
    if args.epochs is not None:
        train_values["max_epochs"] = args.epochs
    train = _build(TrainConfig, train_values, "train")
    model_values = _section(cfg, "model")
    model_values.setdefault("dtype", "float32")
    model = _build(ModelConfig, model_values, "model")
    n, r = parse_bootstrap(args.bootstrap)
    variants = args.variants or list(VARIANTS)
    result = run_ablation(seqs, variants, seed=seed, train_config=train, model_config=model,
                          bootstrap=(n, r))
    result.pop("results")
    out = Path(args.out)
    _write_json(out, result)
    print(f"{'variant':<10} {'test_acc':>9} {'auroc':>7} {'boot_acc':>9} {'boot_std':>9}")
    for v in variants:
        m = result["test_metrics"][v]["fused"]
        b = result["bootstrap"][v]
        print(f"{v:<10} {m['accuracy']:>9.4f} {m['auroc'] or float('nan'):>7.4f} "
              f"{b['mean']['accuracy']:>9.4f} {b['std']['accuracy']:>9.4f}")
    if result["friedman"]:
        f = result["friedman"]
        print(f"Friedman chi2 = {f['statistic']:.3f} (df {f['df']}, critical "
              f"{f['critical_value']:.3f}), p = {f['p_value']:.4g}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser():
    p = _Parser(prog="pulsar", description="Finger-tapping graph-convolution classifier with "
                                           "positive-unlabeled training.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help, out_default=None):
        sp.add_argument("--config", help="TOML or JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default=out_default, required=out_default is None and out_help
                        is not None, help=out_help)

    s = sub.add_parser("synth", help="generate a synthetic finger-tapping dataset")
    common(s, "output JSON-lines file")
    s.add_argument("--test-out", help="also hold out participants into this file")
    s.add_argument("--test-fraction", type=float, default=0.3)
    s.add_argument("--contamination", type=float, help="share of PD-like participants left unlabeled")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the stream model(s) of one variant")
    common(t, "output directory for checkpoints and logs")
    t.add_argument("--data", required=True, help="JSON-lines keypoint dataset")
    t.add_argument("--variant", required=True, choices=list(VARIANTS))
    t.add_argument("--prior", type=float, help="class prior theta_P")
    t.add_argument("--risk-mode", choices=list(RISK_MODES))
    t.add_argument("--epochs", type=int, help="override max_epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score trained checkpoints on a dataset")
    common(e, "output directory for metrics files")
    e.add_argument("--checkpoints", required=True, help="directory written by `train`")
    e.add_argument("--data", required=True)
    e.add_argument("--bootstrap", help="participant bootstrap NxR, e.g. 120x20")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="Friedman/Holm report over eval outputs, or the hand graph")
    r.add_argument("inputs", nargs="*", help="eval output dirs or bootstrap.json files")
    r.add_argument("--graph", action="store_true", help="emit the hand graph and adjacency as JSON")
    r.add_argument("--alpha", type=float, default=0.05)
    r.add_argument("--out")
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_report)

    g = sub.add_parser("gradcheck", help="finite-difference check of every adjoint")
    g.add_argument("--seed", type=int)
    g.add_argument("--seeds", type=int, default=10, help="number of consecutive seeds")
    g.add_argument("--out", help="write the error table as JSON")
    g.add_argument("--inject-fault", metavar="PRIMITIVE", help=argparse.SUPPRESS)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablation", help="train and compare all variants end to end")
    common(a, "output JSON report", "ablation.json")
    a.add_argument("--data", help="dataset to use instead of generating one")
    a.add_argument("--variants", nargs="+", choices=list(VARIANTS))
    a.add_argument("--epochs", type=int)
    a.add_argument("--bootstrap", default="120x20")
    a.set_defaults(func=cmd_ablation)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except KeyError as exc:
        if args.command == "gradcheck":
            print(f"configuration error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise


if __name__ == "__main__":
    sys.exit(main())
