"""Command-line entry point: the whole workflow as one executable.

Exit codes: 0 success, 2 config/format error, 3 numerical abort,
4 data/model mismatch.
"""

import argparse
import os
import sys

import numpy as np

from . import config as config_mod
from . import control as control_mod
from . import data as data_mod
from . import metrics as metrics_mod
from . import plots
from . import tensor as T
from . import training as training_mod
from .backbone import SegmentationModel
from .data import SpecError
from .metrics import FormatError
from .moe import DMoEConfig, RoutingError
from .tensor import ConfigError, Tensor

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_MISMATCH = 4


def cmd_gen_data(args):
    if args.spec:
        spec = config_mod.load_dataset_spec(args.spec)
    else:
        spec = data_mod.DatasetSpec(seed=config_mod.env_seed(0))
    dataset = data_mod.generate(spec)
    data_mod.save(dataset, args.out)
    counts = dataset.counts()
    print("wrote %d samples to %s" % (len(dataset), args.out))
    for a in dataset.attrs:
        print("  %-10s %d" % (a, counts[a]))
    return 0


def cmd_train(args):
    dataset = data_mod.load(args.data)
    file_values = config_mod.parse_kv_file(args.config) if args.config else {}
    overrides = {}
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    elif "train.seed" not in file_values and os.environ.get("DMOE_SEED"):
        overrides["train.seed"] = config_mod.env_seed()
    if args.epochs is not None:
        overrides["train.epochs"] = args.epochs
    h, w, c = dataset[0].image.shape
    tc, bc = config_mod.run_config_from_kv(
        file_values, args.mode, dataset.attrs, (h, w), c, overrides)

    if tc.val_frac > 0 and len(dataset) >= 2 * len(dataset.attrs):
        train_set, val_set = data_mod.split(dataset, 1.0 - tc.val_frac, tc.seed)
    else:
        train_set, val_set = dataset, None

    model = SegmentationModel(bc, seed=tc.seed)
    log, rng_state = training_mod.train(model, train_set, tc, val_set)
    training_mod.save_checkpoint(args.out, model,
                                 epoch=tc.epochs, rng_state=rng_state)
    log_path = args.out + ".log.csv"
    training_mod.write_train_log(log_path, log, dataset.attrs)
    plots.training_curve_figure(log, args.out + ".log.png")
    final = log[-1]
    print("trained %s mode for %d epochs; final loss %.5f; checkpoint %s"
          % (args.mode, tc.epochs, final["loss"], args.out))
    if "dice_overall" in final:
        print("held-out Dice %.4f" % final["dice_overall"])
    return 0


def _emit_report(report, scores, report_path):
    metrics_mod.write_report_csv(report_path, report)
    base = report_path[:-4] if report_path.endswith(".csv") else report_path
    by_attr = {a: [s.dice for s in scores if s.attr == a] for a in report.attrs}
    metrics_mod.write_violin_csv(base + "_violin.csv",
                                 metrics_mod.violin_summary(by_attr))
    plots.violin_figure(by_attr, base + "_violin.svg")
    print("ES-Dice %.4f  Dice %.4f  ES-IoU %.4f  IoU %.4f"
          % (report.es_dice, report.overall["dice"],
             report.es_iou, report.overall["iou"]))
    for a in report.attrs:
        if a in report.per_attr:
            g = report.per_attr[a]
            print("  %-10s n=%-4d Dice %.4f  IoU %.4f" % (a, g["n"], g["dice"], g["iou"]))


def cmd_eval(args):
    dataset = data_mod.load(args.data)
    model, _ = training_mod.load_checkpoint(args.ckpt)
    if model.cfg.mode != "plain":
        unknown = set(dataset.attrs) - set(model.cfg.attr_map)
        if unknown:
            raise RoutingError("dataset attributes %s unknown to the checkpoint"
                               % sorted(unknown))
    scores, report = training_mod.evaluate(model, dataset)
    _emit_report(report, scores, args.report)
    return 0


def cmd_metrics(args):
    scores = metrics_mod.read_scores_csv(args.scores)
    report = metrics_mod.aggregate(scores)
    _emit_report(report, scores, args.report)
    return 0


def cmd_gradcheck(args):
    seed = args.seed if args.seed is not None else config_mod.env_seed(0)
    cfg = DMoEConfig(d_model=8, d_hidden=8, n_experts=4, top_k=2,
                     dropout_p=0.0, attributes=("a", "b"))
    from .moe import DMoELayer
    layer = DMoELayer(cfg, seed=seed)
    rng = np.random.default_rng([seed, 1])
    tokens = Tensor(rng.standard_normal((5, 8)))
    target = rng.standard_normal((5, 8))

    def loss_fn():
        noise_rng = np.random.default_rng([seed, 2])
        out = layer(tokens, "a", training=True, rng=noise_rng)
        diff = out - Tensor(target)
        return T.reduce_mean(T.mul(diff, diff))

    report = T.grad_check(loss_fn, layer.parameters(),
                          step=1e-5, tolerance=args.tolerance)
    print("gradcheck max relative error %.3e (tolerance %g): %s"
          % (report.max_rel_err, report.tolerance,
             "PASS" if report.passed else "FAIL"))
    return 0 if report.passed else 1


def cmd_control_demo(args):
    seed = args.seed if args.seed is not None else config_mod.env_seed(0)
    costs = control_mod.mode_switch_demo(seed=seed)
    control_mod.write_cost_table(args.out, costs)
    print("open_loop       %.6f" % costs["open_loop"])
    print("single_feedback %.6f" % costs["single_feedback"])
    print("mode_switching  %.6f" % costs["mode_switching"])
    ok = (costs["mode_switching"] <= costs["single_feedback"] + 1e-6
          and costs["single_feedback"] <= costs["open_loop"] + 1e-6)
    print("cost ordering: %s" % ("PASS" if ok else "FAIL"))
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dmoe-seg",
        description="Attribute-routed mixture-of-experts segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", help="key=value dataset spec file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a segmentation model")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("plain", "moe", "dmoe"), default="dmoe")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True, help="report CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", help="subgroup report from a score CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("control-demo", help="mode-switching control cost table")
    p.add_argument("--out", required=True, help="cost table CSV path")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_control_demo)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SpecError, FormatError, T.ShapeError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except (training_mod.TrainingDiverged, FloatingPointError, T.DegenerateGatingError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_NUMERIC
    except RoutingError as exc:
        print("error: %s" % (exc.args[0] if exc.args else exc), file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
