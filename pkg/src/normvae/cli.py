"""``normvae`` command line: synth -> train -> deviate -> eval.

Pipeline state passes only through files. Exit codes: 0 success, 2 invalid
input, 3 numerical failure.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .data import (
    STAGES,
    SynthConfig,
    load_cohort,
    split_controls,
    synth_generate,
    truth_to_dict,
    write_cohort,
)
from .errors import InputError, NormVAEError, NumericalError
from .estimators import NormVAE
from .evaluation import STAGE_METRICS, evaluate
from .normative import METHODS
from .serialization import load_model, load_nams, save_model, save_nams, save_report

logger = logging.getLogger("normvae")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


def _stem(path):
    root, ext = os.path.splitext(path)
    return root if ext else path


def _require_file(path, what):
    if not os.path.isfile(path):
        raise InputError(f"{what} not found: {path}")


def _require_writable(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise InputError(f"output directory does not exist: {parent}")
    if not os.access(parent, os.W_OK):
        raise InputError(f"output directory is not writable: {parent}")


def _read_json(path):
    _require_file(path, "config file")
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InputError(f"{path} must contain a JSON object")
    return data


def _dump_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------- synth

def cmd_synth(args):
    _require_writable(args.out)
    overrides = _read_json(args.config) if args.config else {}
    overrides["seed"] = args.seed
    if args.stages_null:
        overrides["severity"] = {s: 0.0 for s in STAGES}
    config = SynthConfig.from_dict(overrides)
    cohort, truth = synth_generate(config)
    write_cohort(cohort, args.out)
    truth_path = _stem(args.out) + ".truth.json"
    _dump_json(truth_path, truth_to_dict(config, truth))
    logger.info("wrote %d subjects to %s (truth: %s)", len(cohort), args.out, truth_path)
    return EXIT_OK


# --------------------------------------------------------------------------- train

def cmd_train(args):
    _require_file(args.cohort, "cohort")
    _require_writable(args.out)
    cohort = load_cohort(args.cohort)
    controls = cohort.controls()
    if len(controls) == 0:
        raise InputError("cohort contains no CN (control) rows to train on")
    train_part, held = split_controls(controls, args.holdout_fraction, args.seed)
    est = NormVAE(
        latent_dim=args.latent_dim, hidden_dim=args.hidden_dim,
        hidden_layers=args.hidden_layers, batch_size=args.batch_size,
        learning_rate=args.learning_rate, epochs=args.epochs, kl_weight=args.kl_weight,
        mc_samples=args.mc_samples, random_state=args.seed,
    )
    logger.info("training on %d controls, %d held out for normative variance",
                len(train_part), len(held))
    est.fit(train_part.normalized(), age=train_part.age,
            X_holdout=held.normalized(), age_holdout=held.age, holdout_ids=held.ids)
    save_model(args.out, est, extra={
        "train_ids": train_part.ids,
        "holdout_ids": held.ids,
        "holdout_fraction": args.holdout_fraction,
    })
    loss_path = _stem(args.out) + ".loss.csv"
    with open(loss_path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# seed={args.seed}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "recon", "kl", "total"])
        for i, (recon, kl, total) in enumerate(est.loss_curve_, start=1):
            writer.writerow([i, repr(float(recon)), repr(float(kl)), repr(float(total))])
    logger.info("final loss %.5f (initial %.5f); model written to %s",
                est.loss_curve_[-1, 2], est.loss_curve_[0, 2], args.out)
    return EXIT_OK


# --------------------------------------------------------------------------- deviate

def cmd_deviate(args):
    _require_file(args.model, "model file")
    _require_file(args.cohort, "cohort")
    _require_writable(args.out)
    est, extra = load_model(args.model)
    cohort = load_cohort(args.cohort)
    if cohort.n_regions != est.n_features_in_:
        raise InputError(
            f"cohort has {cohort.n_regions} regions but the model expects {est.n_features_in_}"
        )
    if args.seed is not None:
        est.random_state = args.seed
    trained = set(extra.get("train_ids", []))
    subjects = cohort.subset(np.array([sid not in trained for sid in cohort.ids], dtype=bool))
    order = np.argsort(np.array(subjects.ids), kind="stable")
    subjects = subjects.subset(order)
    methods = METHODS if args.method == "both" else (args.method,)
    nams = []
    for method in methods:
        nams.extend(est.nams(subjects.normalized(), age=subjects.age, ids=subjects.ids,
                             method=method, q=args.q, fdr_scope=args.fdr_scope))
    save_nams(args.out, nams, header={
        "q": args.q, "seed": est.random_state, "fdr_scope": args.fdr_scope,
        "methods": ",".join(methods), "regions": est.n_features_in_,
    })
    logger.info("wrote NAMs for %d subjects x %d methods to %s",
                len(subjects), len(methods), args.out)
    return EXIT_OK


# --------------------------------------------------------------------------- eval

def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _cell(x):
    return "" if x is None else repr(float(x)) if isinstance(x, float) else x


def write_panels(stem, report, groups_by_subject):
    methods = report["methods"]
    for key, panel in (("panel_a_stage_means", "panel_a"), ("panel_b_stage_means", "panel_b")):
        means = report[key] or {}
        slope_method = "normvae" if panel == "panel_a" else "baseline"
        fit = report["slope"].get(slope_method) or {}
        _write_rows(f"{stem}.{panel}.csv", ["stage", "code", "mean_abs_z", "fitted"], [
            [s, i, _cell(means.get(s)),
             _cell(fit["intercept"] + fit["slope"] * i) if fit.get("slope") is not None else ""]
            for i, s in enumerate(STAGES)
        ])
    weights = report["svm"]["weights"]
    freq = report["panel_d_region_freq"]
    counts = report["region_counts"]
    _write_rows(f"{stem}.panel_c.csv",
                ["region_index", "abs_svm_weight", *[f"count_{m}" for m in methods]],
                [[j, _cell(abs(w)), *[counts[m][j] for m in methods]]
                 for j, w in enumerate(weights)])
    _write_rows(f"{stem}.panel_d.csv", ["region_index", *[f"freq_{m}" for m in methods]],
                [[j, *[_cell(freq[m][j]) for m in methods]] for j in range(len(weights))])
    counts = report["panel_e_subject_counts"]
    subjects = sorted(set().union(*[counts[m].keys() for m in methods]))
    _write_rows(f"{stem}.panel_e.csv", ["subject", "group", *[f"count_{m}" for m in methods]],
                [[s, groups_by_subject[s], *[counts[m].get(s, "") for m in methods]]
                 for s in subjects])


def cmd_eval(args):
    _require_file(args.nams, "NAM file")
    _require_file(args.cohort, "cohort")
    _require_file(args.model, "model file")
    if args.truth:
        _require_file(args.truth, "truth file")
    _require_writable(args.out)
    nams, header = load_nams(args.nams)
    cohort = load_cohort(args.cohort)
    est, _ = load_model(args.model)
    groups_by_subject = dict(zip(cohort.ids, cohort.groups))
    by_method = {}
    for nam in nams:
        by_method.setdefault(nam.method, []).append(nam)
    present = {groups_by_subject.get(n.subject) for n in nams}
    missing = [s for s in STAGES if s not in present]
    if missing:
        logger.warning("no NAMs for stage(s) %s; reported as missing", ", ".join(missing))

    svm_rows = np.array([g in ("CN", "AD") for g in cohort.groups], dtype=bool)
    svm = cohort.subset(svm_rows)
    svm_X = est.scaler_.transform(svm.normalized())
    svm_y = np.where(np.array(svm.groups) == "AD", 1, -1)
    truth_mask = None
    if args.truth:
        with open(args.truth, encoding="utf-8") as fh:
            truth = json.load(fh)
        truth_mask = np.zeros(cohort.n_regions, dtype=bool)
        truth_mask[truth["disease_regions"]] = True

    q = float(header.get("q", "nan"))
    report = evaluate(by_method, groups_by_subject, svm_X, svm_y, q=q, seed=args.seed,
                      metric=args.stage_metric, truth_mask=truth_mask,
                      svm_lambda=args.svm_lambda, svm_epochs=args.svm_epochs)
    report["nam_header"] = header
    save_report(args.out, report)
    write_panels(_stem(args.out), report, groups_by_subject)
    for method, fit in report["slope"].items():
        logger.info("%s: slope %s (stderr %s), correlation %s", method, fit["slope"],
                    fit["stderr"], report["panel_c_correlation"][method])
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def _common(p, out_default, seed_default=0):
    p.add_argument("--seed", type=int, default=seed_default, help="random seed (u64)")
    p.add_argument("--out", "-o", default=out_default, help="output path")
    p.add_argument("--config", default=None,
                   help="JSON file overriding defaults (keys as in the long flag names)")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="normvae", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.set_defaults(subcommands=sub.choices)

    p = sub.add_parser("synth", help="generate a synthetic cohort with planted atrophy",
                       formatter_class=fmt)
    _common(p, "cohort.csv")
    p.add_argument("--stages-null", action="store_true",
                   help="set every stage severity to 0 (null cohort)")
    p.set_defaults(func=cmd_synth, config_is_synth=True)

    p = sub.add_parser("train", help="train the normative model on control rows",
                       formatter_class=fmt)
    p.add_argument("cohort", help="cohort CSV")
    _common(p, "model.ndev")
    p.add_argument("--epochs", type=int, default=500, help="passes over the training controls")
    p.add_argument("--lr", "--learning-rate", dest="learning_rate", type=float, default=1e-4,
                   help="Adam step size")
    p.add_argument("--batch-size", type=int, default=32, help="mini-batch size")
    p.add_argument("--latent-dim", type=int, default=64, help="latent dimension")
    p.add_argument("--hidden-dim", type=int, default=512, help="width of hidden layers")
    p.add_argument("--hidden-layers", type=int, default=3, help="hidden layers per coder")
    p.add_argument("--kl-weight", type=float, default=1.0, help="weight of the KL term")
    p.add_argument("--mc-samples", type=int, default=100,
                   help="latent samples per subject for predictive statistics")
    p.add_argument("--holdout-fraction", type=float, default=0.2,
                   help="share of controls held out to estimate normative variance")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("deviate", help="compute NAMs for all non-training subjects",
                       formatter_class=fmt)
    p.add_argument("model", help="model file written by train")
    p.add_argument("cohort", help="cohort CSV")
    _common(p, "nams.csv", seed_default=None)
    p.add_argument("--method", choices=("normvae", "baseline", "both"), default="both")
    p.add_argument("--q", type=float, default=0.05, help="FDR level")
    p.add_argument("--fdr-scope", choices=("subject", "cohort"), default="subject")
    p.set_defaults(func=cmd_deviate)

    p = sub.add_parser("eval", help="stage-stratified comparison report",
                       formatter_class=fmt)
    p.add_argument("nams", help="NAM CSV written by deviate")
    p.add_argument("cohort", help="cohort CSV")
    p.add_argument("--model", required=True, help="model file (for feature scaling)")
    _common(p, "report.json")
    p.add_argument("--truth", default=None, help="truth sidecar from synth (planted regions)")
    p.add_argument("--stage-metric", choices=STAGE_METRICS, default="abs")
    p.add_argument("--svm-lambda", type=float, default=1e-3)
    p.add_argument("--svm-epochs", type=int, default=50)
    p.set_defaults(func=cmd_eval)
    return parser


def parse_args(argv, parser=None):
    parser = parser or build_parser()
    args = parser.parse_args(argv)
    if args.config and not getattr(args, "config_is_synth", False):
        overrides = _read_json(args.config)
        sub = args.subcommands[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(overrides) - known
        if unknown:
            raise InputError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except InputError as exc:
        print(f"normvae: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"normvae: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, NormVAEError) as exc:
        print(f"normvae: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
