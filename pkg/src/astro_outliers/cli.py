"""``astro-outliers`` command-line entry point."""

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import datasets
from .cae import TrainConfig, sweep_embedding_dim
from .exceptions import AstroOutliersError, ConfigError
from .metrics import write_roc
from .persistence import load_model, save_model
from .pipeline import (
    METHODS,
    ExperimentConfig,
    RunReport,
    directory_lock,
    embed,
    emit_report,
    evaluate_scores,
    flatten_images,
    load_config,
    load_scores_for,
    prepare_dataset,
    run_experiment,
    score_points,
    train_model,
)
from .knn import write_scores


def _fractions(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad fraction list {text!r}") from None


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from None


def _common(p):
    p.add_argument("--config", help="JSON experiment config; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--subset", choices=sorted(datasets.SUBSETS))
    p.add_argument("--fractions", type=_fractions, help="comma-separated, e.g. 0.05,0.1,0.15")
    p.add_argument("--out", help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--embedding-dim", type=int)
    p.add_argument("--output-head", choices=("softmax3", "sigmoid"))
    p.add_argument("--scale", type=float, help="fraction of the full subset size")
    p.add_argument("--noise", type=float, help="synthetic pixel noise sigma")
    p.add_argument("--data", help="dataset cache directory (from prepare/synth)")


def _resolve(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = {}
    for key in ("seed", "method", "subset", "fractions", "out", "embedding_dim", "output_head", "scale", "noise"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if getattr(args, "data", None):
        over.update(source="cache", dataset_dir=args.data)
    train = asdict(cfg.train)
    if getattr(args, "epochs", None) is not None:
        train["epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        train["batch_size"] = args.batch_size
    over["train"] = TrainConfig(**train)
    return replace(cfg, **over)


def cmd_prepare(args):
    spec = datasets.SUBSETS[args.subset or "subset1"]
    if args.scale:
        spec = spec.scaled(args.scale)
    catalog = datasets.read_catalog(args.catalog)
    ds = datasets.build_subset(catalog, datasets.ImageDirectory(args.images), spec, args.seed or 0)
    datasets.save_dataset(ds, args.out)
    return {"dataset": args.out, "count": len(ds), "outliers": int(ds.labels.sum())}


def cmd_synth(args):
    cfg = _resolve(args)
    if not args.out:
        raise ConfigError("synth needs --out")
    ds = datasets.synth_dataset(cfg.subset_spec, cfg.seed, cfg.noise)
    datasets.save_dataset(ds, args.out)
    return {"dataset": args.out, "count": len(ds), "outliers": int(ds.labels.sum())}


def _split(cfg):
    ds = datasets.load_dataset(cfg.dataset_dir)
    return datasets.split(ds, cfg.split_ratio, cfg.seed)


def cmd_train(args):
    cfg = _resolve(args)
    if cfg.method == "knn_raw":
        raise AstroOutliersError("knn_raw has no training phase")
    train_ds, _ = _split(cfg)
    out = Path(cfg.out)
    with directory_lock(out):
        model, history = train_model(cfg, train_ds.images)
        save_model(model, out / "model.bin")
        (out / "loss.json").write_text(json.dumps({"epoch_losses": history.epoch_losses}, indent=2) + "\n")
    return {"model": str(out / "model.bin"), "final_loss": history.epoch_losses[-1] if len(history) else None}


def cmd_score(args):
    cfg = _resolve(args)
    _, test_ds = _split(cfg)
    if args.model:
        points = embed(load_model(args.model), test_ds.images)
    else:
        points = flatten_images(test_ds.images)
    scores = score_points(points, cfg.knn)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scores(out / "scores.csv", scores, test_ds.ids)
    return {"scores": str(out / "scores.csv"), "n": len(scores)}


def cmd_evaluate(args):
    cfg = _resolve(args)
    ds = datasets.load_dataset(cfg.dataset_dir)
    scores, labels = load_scores_for(ds, args.scores)
    reports, _, curve = evaluate_scores(scores, labels, cfg.fractions)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_roc(out / "roc.csv", curve)
    report = RunReport(cfg.to_dict(), reports, [], None, {},
                       {"scores": str(args.scores), "roc": str(out / "roc.csv")},
                       0, len(scores), int(labels.sum()))
    emit_report(report, out / "report.json")
    return {"report": str(out / "report.json"), "metrics": [r.to_dict() for r in reports]}


def cmd_experiment(args):
    report = run_experiment(_resolve(args))
    return {"report": report.artifacts["report"], "metrics": [m.to_dict() for m in report.metrics],
            "timings": report.timings}


def cmd_sweep(args):
    cfg = _resolve(args)
    ds = prepare_dataset(cfg)
    rows = sweep_embedding_dim(args.dims, ds.images, ds.labels, args.trials, cfg.train, cfg.knn,
                               use_attention=cfg.method == "attcae_knn", output_head=cfg.output_head,
                               fraction=cfg.fractions[0], split_ratio=cfg.split_ratio, seed=cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w") as fh:
        fh.write("embedding_dim,mean_auc,std_auc\n")
        for dim, mean, std in rows:
            fh.write(f"{dim},{mean!r},{std!r}\n")
    return {"sweep": str(out / "sweep.csv"), "rows": rows}


def build_parser():
    parser = argparse.ArgumentParser(prog="astro-outliers",
                                     description="k-NN / CAE / attention-CAE outlier detection on galaxy images")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="catalog + image directory -> dataset cache")
    p.add_argument("--catalog", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--subset", choices=sorted(datasets.SUBSETS))
    p.add_argument("--scale", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="render a synthetic dataset cache")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a CAE on the training split of a dataset cache")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="k-NN scores for the test split (embedded if --model is given)")
    _common(p)
    p.add_argument("--model")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="metrics and ROC for a scores file")
    _common(p)
    p.add_argument("--scores", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="full pipeline: data, split, train, score, evaluate")
    _common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("sweep", help="test AUC versus embedding width")
    _common(p)
    p.add_argument("--dims", type=_ints, default=[10, 20, 30, 40])
    p.add_argument("--trials", type=int, default=3)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    needs_data = args.command in ("train", "score", "evaluate")
    if needs_data and not args.data:
        print(f"error: {args.command} needs --data", file=sys.stderr)
        return 2
    try:
        result = args.func(args)
    except AstroOutliersError as e:
        phase = getattr(e, "phase", None)
        where = f" (phase {phase})" if phase else ""
        print(f"error{where}: {e}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
