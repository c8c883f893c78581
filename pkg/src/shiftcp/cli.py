"""Command-line interface.

Exit codes: 0 success, 1 input or validation error, 2 numerical failure,
3 I/O error.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .datasets import Dataset, align_logits, ingest_dataset, read_logits, write_dataset
from .energy import EnergyConfig, EnergyMlp, train_ebm
from .errors import InputError, ShiftCPError
from .evaluation import coverage_report
from .pipeline import (
    FILTERS,
    KDE_INPUTS,
    SPLITS,
    WEIGHTINGS,
    Calibration,
    PipelineConfig,
    calibrate,
    emit_report,
    inputs_from_labeled,
    inputs_from_synthetic,
    model_outputs,
    predict,
    read_points,
    run_pipeline,
    split_dataset,
)
from .synthetic import gen_synthetic, shift_spec

logger = logging.getLogger("shiftcp")


def _bandwidth(text):
    if text == "cv":
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected 'cv' or a positive number") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("bandwidth must be positive")
    return value


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--alpha", type=float, action="append",
                   help="miscoverage level; repeat for several (default 0.1)")
    p.add_argument("--weighting", choices=WEIGHTINGS, default="kde-energy")
    p.add_argument("--kde-input", choices=KDE_INPUTS, default="logits")
    p.add_argument("--split", choices=SPLITS, default="random")
    p.add_argument("--test-frac", type=float, default=0.15)
    p.add_argument("--cal-frac", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.01)
    p.add_argument("--m-in", type=float, default=-5.0)
    p.add_argument("--m-out", type=float, default=-35.0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--bandwidth", type=_bandwidth, default="cv")
    p.add_argument("--weight-cap", type=float, default=None)
    p.add_argument("--min-cal", type=int, default=10,
                   help="warn when a class has fewer calibration points")
    p.add_argument("--unlabeled-filter", choices=FILTERS, default="none")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def energy_config(args):
    return EnergyConfig(lam=args.lam, m_in=args.m_in, m_out=args.m_out,
                        learning_rate=args.learning_rate, epochs=args.epochs,
                        batch_size=args.batch_size, seed=args.seed,
                        temperature=args.temperature)


def pipeline_config(args):
    return PipelineConfig(
        weighting=args.weighting, kde_input=args.kde_input, alphas=tuple(args.alpha or (0.1,)),
        split=args.split, test_frac=args.test_frac, cal_frac=args.cal_frac,
        energy=energy_config(args), bandwidth=args.bandwidth, folds=args.folds,
        weight_cap=args.weight_cap, seed=args.seed, min_cal_per_class=args.min_cal,
        unlabeled_filter=args.unlabeled_filter,
    )


def _read_any(path):
    """Labeled file if it has a label column, else unlabeled."""
    with open(path, encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().split(",")]
    return ingest_dataset(path, labeled="label" in header)


def _outputs(args, data: Dataset):
    if args.model:
        return model_outputs(EnergyMlp.load(args.model), data.x)
    if args.logits:
        ids, logits = read_logits(args.logits)
        return model_outputs(None, logits=align_logits(data.ids, ids, logits),
                             temperature=args.temperature)
    raise InputError("give --model or --logits")


def cmd_synth(args):
    spec = shift_spec(shift=args.shift, n_train=args.n_train, n_cal=args.n_cal,
                      n_test=args.n_test, n_unlabeled=args.n_unlabeled, seed=args.seed)
    data = gen_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_tr = len(data.train_x)
    labeled = Dataset(
        ids=[f"train{i}" for i in range(n_tr)] + [f"cal{i}" for i in range(len(data.cal_x))],
        x=np.vstack([data.train_x, data.cal_x]),
        y=np.concatenate([data.train_y, data.cal_y]),
    )
    write_dataset(out / "labeled.csv", labeled)
    write_dataset(out / "test.csv", Dataset([f"test{i}" for i in range(len(data.test_x))],
                                            data.test_x, data.test_y))
    write_dataset(out / "unlabeled.csv", Dataset([f"unl{i}" for i in range(len(data.unlabeled_x))],
                                                 data.unlabeled_x))
    print(f"wrote labeled.csv, test.csv, unlabeled.csv to {out}")


def cmd_split(args):
    data = ingest_dataset(args.data)
    split = split_dataset(data, pipeline_config(args))
    names = split.labels()
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "partition"])
        for ident, name in zip(data.ids, names):
            writer.writerow([ident, name])
    print(f"train {split.train_idx.size}, cal {split.cal_idx.size}, test {split.test_idx.size}")


def cmd_train(args):
    data = ingest_dataset(args.data)
    config = energy_config(args)
    pool = ingest_dataset(args.unlabeled, labeled=False).x if args.unlabeled else None
    result = train_ebm(data.x, data.y, pool, config)
    result.model.save(args.out)
    print(f"final loss {result.loss_trace[-1]:.5f}" if result.loss_trace else "no epochs run")


def cmd_calibrate(args):
    data = ingest_dataset(args.data)
    config = pipeline_config(args)
    cal = calibrate(_outputs(args, data), data.y, config.density_space)
    Path(args.out).write_text(json.dumps(cal.to_dict(config.density_space)) + "\n",
                              encoding="utf-8")
    print(f"calibrated on {len(data)} points")


def cmd_predict(args):
    config = pipeline_config(args)
    stored = json.loads(Path(args.calibration).read_text(encoding="utf-8"))
    if stored.get("space") != config.density_space:
        raise InputError(f"calibration file holds {stored.get('space')!r} points but the "
                         f"weighting needs {config.density_space!r}")
    if config.weighting == "oracle":
        raise InputError("oracle weighting is only available with --synthetic pipelines")
    cal = Calibration.from_dict(stored)
    data = _read_any(args.data)
    result = predict(cal, _outputs(args, data), config, data.ids, data.y)
    report, points = emit_report(result, args.out)
    print(f"wrote {report} and {points}")


def cmd_evaluate(args):
    ids, labels, members = read_points(args.points)
    if labels is None:
        raise InputError("the dump has no labels to evaluate against")
    wanted = args.alpha or list(members)
    out = {"alpha_results": []}
    for alpha in wanted:
        if alpha not in members:
            raise InputError(f"no sets for alpha {alpha} in {args.points}")
        out["alpha_results"].append(coverage_report(members[alpha], labels, alpha).to_dict())
    Path(args.out).write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")
    for r in out["alpha_results"]:
        print(f"alpha {r['alpha']}: coverage {r['overall_coverage']:.4f}, "
              f"mean set size {r['mean_set_size']:.3f}")


def cmd_pipeline(args):
    config = pipeline_config(args)
    if args.synthetic:
        spec = shift_spec(shift=args.shift, n_train=args.n_train, n_cal=args.n_cal,
                          n_test=args.n_test, n_unlabeled=args.n_unlabeled, seed=args.seed)
        inputs = inputs_from_synthetic(gen_synthetic(spec))
    else:
        if not args.data:
            raise InputError("give --data or --synthetic")
        data = ingest_dataset(args.data)
        test = _read_any(args.test) if args.test else None
        unlabeled = ingest_dataset(args.unlabeled, labeled=False) if args.unlabeled else None
        inputs = inputs_from_labeled(data, config, test=test, unlabeled=unlabeled)
        if args.logits:
            ids, logits = read_logits(args.logits)
            inputs.logits = (align_logits(inputs.cal.ids, ids, logits),
                             align_logits(inputs.test.ids, ids, logits))
    result = run_pipeline(config, inputs)
    report, points = emit_report(result, args.out)
    if result.model is not None:
        result.model.save(Path(args.out) / "model.json")
    for entry in result.report_dict()["alpha_results"]:
        if "overall_coverage" in entry:
            print(f"alpha {entry['alpha']}: coverage {entry['overall_coverage']:.4f}, "
                  f"mean set size {entry['mean_set_size']:.3f}")
    print(f"wrote {report} and {points}")


def _synthetic_flags(p):
    p.add_argument("--shift", type=float, default=1.5)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-cal", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--n-unlabeled", type=int, default=2000)


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(
        prog="shiftcp", description="Conformal prediction sets under covariate shift.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic shift dataset")
    _synthetic_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", parents=[common], help="assign rows to train/cal/test")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="train the energy-regularized MLP")
    p.add_argument("--data", required=True)
    p.add_argument("--unlabeled")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (("calibrate", cmd_calibrate, "score a calibration set"),
                                  ("predict", cmd_predict, "build prediction sets")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--data", required=True)
        src = p.add_mutually_exclusive_group()
        src.add_argument("--model")
        src.add_argument("--logits")
        if name == "predict":
            p.add_argument("--calibration", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", parents=[common], help="coverage of a per-point dump")
    p.add_argument("--points", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", parents=[common], help="run everything end to end")
    p.add_argument("--data")
    p.add_argument("--test")
    p.add_argument("--unlabeled")
    p.add_argument("--logits")
    p.add_argument("--synthetic", action="store_true")
    _synthetic_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ShiftCPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
