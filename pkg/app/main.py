import argparse
import json
import logging
import os
import traceback

from dotenv import load_dotenv
from pydantic import ValidationError

from app.brain import Brain
from app.dataset import load_manifest
from app.exceptions import ExplanationError, ModelError, PipelineError, UsageError
from app.models import (CLASS_NAMES, SPLITS, CannyConfig, LimeConfig, RunConfig, ShapConfig,
                        TrainingConfig)
from app.run import Run
from app.tools import hardware_info, loadEnvVars
from app.training import parse_grid
from modules.architectures import ARCHITECTURES
from modules.explainers import EXPLAINERS
from modules.optimizers import OPTIMIZERS

load_dotenv()
loadEnvVars()

logging.basicConfig(level=os.environ["LOG_LEVEL"])

brain = Brain()


def parse_ratios(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"ratios must be comma-separated numbers, got {text!r}")


def require_data(args):
    if not args.data:
        raise UsageError("no dataset root: pass --data or set RICE_DATA_ROOT")
    return args.data


def training_config(args):
    return TrainingConfig(
        batch_size=args.batch, optimizer=args.optimizer, learning_rate=args.lr, l2=args.l2,
        max_epochs=args.epochs, patience=args.patience, seed=args.seed,
        augment=args.augment == "on", preprocess=args.preprocess, depth=args.depth,
        filters=args.filters, dense_layers=args.dense_layers, dense_units=args.dense_units,
        dropout=args.dropout, workers=args.workers)


def explain_config(args, method):
    if method == "lime":
        return LimeConfig(samples=args.samples or 1000, kernel_width=args.kernel_width,
                          ridge=args.ridge, top_k=args.top_k, seed=args.seed)
    return ShapConfig(mode=args.shap_mode, samples=args.samples or 2048, seed=args.seed)


def cmd_stats(args, run):
    stats = brain.entryStats(require_data(args), run, dimensions=args.dimensions)
    for name, count in stats.counts.items():
        print(f"{name}\t{count}")
    print(f"total\t{stats.total}")


def cmd_split(args, run):
    manifest_path = args.manifest or run.artifactPath("manifest.json")
    manifest = brain.entrySplit(require_data(args), args.seed, parse_ratios(args.ratios), manifest_path, run)
    for split in SPLITS:
        print(f"{split}\t{sum(manifest.counts(split).values())}")


def cmd_train(args, run):
    config = training_config(args)
    data = require_data(args)
    manifest = brain.resolveManifest(data, args.manifest, args.seed, run)
    out = args.out or run.artifactPath("model.rgc")
    result = brain.entryTrain(config, data, manifest, out, run, subset=args.subset, progress=args.progress)
    best = result.best_report
    print(f"best epoch {result.best_epoch}: val_loss {best.val_loss:.4f} val_acc {best.val_acc:.4f}")
    print(f"saved {result.model.parameter_count()} parameters to {out}")


def cmd_eval(args, run):
    data = require_data(args)
    manifest = load_manifest(args.manifest)
    report = brain.entryEval(args.model, data, manifest, args.split, run, args.preprocess,
                             workers=args.workers)
    print(f"{args.split}: {report.n_evaluated} samples, accuracy {report.accuracy:.4f}")


def cmd_explain(args, run):
    brain.entryExplain(args.model, args.image, args.method, explain_config(args, args.method), run,
                       target=args.target, grid=args.grid, segmentation=args.segmentation,
                       preprocess=args.preprocess)
    print(f"wrote explain_{args.method} artifacts to {run.config.outdir}")


def load_grid(text):
    if os.path.isfile(text):
        with open(text, "r", encoding="utf-8") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise UsageError(f"grid file {text} is not valid JSON: {e}")
        if not isinstance(raw, dict):
            raise UsageError("grid JSON must be an object of axis: [values]")
        text = ";".join(f"{axis}={','.join(str(v) for v in values)}" for axis, values in raw.items())
    grid = parse_grid(text)
    if any(len(values) == 0 for values in grid.values()):
        raise UsageError("sweep grid has an axis without values")
    return grid


def cmd_sweep(args, run):
    grid = load_grid(args.grid)
    data = require_data(args)
    manifest = brain.resolveManifest(data, args.manifest, args.seed, run)
    rows = brain.entrySweep(grid, data, manifest, training_config(args), run, subset=args.subset,
                            progress=args.progress)
    for rank, row in enumerate(rows, start=1):
        accuracy = "-" if row.val_accuracy is None else f"{row.val_accuracy:.4f}"
        print(f"{rank}\t{row.config}\t{accuracy}\t{row.status}")


def cmd_preprocess(args, run):
    canny = CannyConfig(low=args.canny_low, high=args.canny_high, sigma=args.sigma)
    for name in brain.entryPreprocess(args.image, run, canny):
        print(run.artifactPath(name))


def cmd_run(args, run):
    configs = {method: explain_config(args, method) for method in EXPLAINERS}
    report = brain.entryRun(training_config(args), require_data(args), run, subset=args.subset,
                            xai=args.xai, explain_count=args.explain_count, explain_configs=configs,
                            grid=args.grid, progress=args.progress)
    print(f"test accuracy {report.accuracy:.4f}")


def add_common(parser):
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--outdir", default=os.environ.get("RICE_OUTDIR", "./runs/"))
    parser.add_argument("--workers", type=int, default=int(os.environ.get("RICE_WORKERS", "0")))
    parser.add_argument("--log-level", default=None)


def add_data(parser):
    parser.add_argument("--data", default=os.environ.get("RICE_DATA_ROOT"))


def add_training(parser):
    parser.add_argument("--manifest")
    parser.add_argument("--epochs", type=int, default=15)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--lr", type=float, default=0.001)
    parser.add_argument("--optimizer", choices=list(OPTIMIZERS), default="adamax")
    parser.add_argument("--l2", type=float, default=1e-4)
    parser.add_argument("--patience", type=int, default=3)
    parser.add_argument("--augment", choices=["on", "off"], default="on")
    parser.add_argument("--preprocess", choices=["raw", "mask", "edges"], default="raw")
    parser.add_argument("--depth", choices=list(ARCHITECTURES), default="canonical")
    parser.add_argument("--filters", type=int, default=32)
    parser.add_argument("--dense-layers", type=int, default=2)
    parser.add_argument("--dense-units", type=int, default=32)
    parser.add_argument("--dropout", type=float, default=0.0)
    parser.add_argument("--subset", type=int)
    parser.add_argument("--progress", action="store_true")


def add_explain(parser):
    parser.add_argument("--grid", type=int, default=6)
    parser.add_argument("--samples", type=int)
    parser.add_argument("--segmentation", choices=["mask", "grid"], default="mask")
    parser.add_argument("--kernel-width", type=float, default=0.25)
    parser.add_argument("--ridge", type=float, default=1.0)
    parser.add_argument("--top-k", type=int, default=5)
    parser.add_argument("--shap-mode", choices=["auto", "exact", "sampled"], default="auto")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ricegrain",
        description="Rice grain variety classification: CNN training with LIME/SHAP explanations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="per-class image counts")
    add_common(p)
    add_data(p)
    p.add_argument("--dimensions", action="store_true")
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("split", help="seeded stratified train/val/test manifest")
    add_common(p)
    add_data(p)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--manifest")
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("train", help="train the CNN")
    add_common(p)
    add_data(p)
    add_training(p)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="metrics, confusion matrix and ROC curves")
    add_common(p)
    add_data(p)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=list(SPLITS), default="test")
    p.add_argument("--preprocess", choices=["raw", "mask", "edges"], default="raw")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("explain", help="LIME or SHAP explanation of single images")
    add_common(p)
    add_explain(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, nargs="+")
    p.add_argument("--method", choices=list(EXPLAINERS), default="lime")
    p.add_argument("--class", dest="target", default="auto",
                   help="auto or one of " + ", ".join(CLASS_NAMES))
    p.add_argument("--preprocess", choices=["raw", "mask", "edges"], default="raw")
    p.set_defaults(handler=cmd_explain)

    p = sub.add_parser("sweep", help="hyperparameter grid on a reduced subset")
    add_common(p)
    add_data(p)
    add_training(p)
    p.add_argument("--grid", required=True, help="grid JSON file or 'lr=0.001,0.01;batch=16,32'")
    p.set_defaults(handler=cmd_sweep, subset=200)

    p = sub.add_parser("preprocess", help="dump preprocessing stages as PNG")
    add_common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--canny-low", type=float, default=50.0)
    p.add_argument("--canny-high", type=float, default=150.0)
    p.add_argument("--sigma", type=float, default=1.4)
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser("run", help="split, train, evaluate and explain in one go")
    add_common(p)
    add_data(p)
    add_training(p)
    add_explain(p)
    p.add_argument("--xai", choices=["none", "lime", "shap", "both"], default="both")
    p.add_argument("--explain-count", type=int, default=3)
    p.set_defaults(handler=cmd_run)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.log_level:
        logging.getLogger().setLevel(args.log_level.upper())

    params = {k: v for k, v in vars(args).items() if k != "handler"}
    try:
        config = RunConfig(command=args.command, args=params, outdir=args.outdir, seed=args.seed,
                           data_root=getattr(args, "data", None), hardware=hardware_info())
        run = Run()
        run.boot(config)
        args.handler(args, run)
    except PipelineError as e:
        logging.error(e)
        traceback.print_tb(e.__traceback__)
        return e.exit_code
    except (ValidationError, ModelError, ExplanationError, ValueError, OSError) as e:
        logging.error(e)
        traceback.print_tb(e.__traceback__)
        return UsageError.exit_code
    return 0
