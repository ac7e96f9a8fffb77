import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional

import numpy as np

import classify
import clinical
import deepnet
import reduce
import runner
from errors import ConfigError, PrognosisError
from intensity import CatalogConfig, build_catalog, build_feature_table, read_feature_table, write_feature_table
from models import ACTIVATIONS, PADDINGS, NetworkSpec
from synthio import generate_cohort, load_manifest, permute_labels_within_pairs, write_manifest
from utils import format_report, save_config_echo, save_report, write_csv, write_json

logger = logging.getLogger(__name__)

# Configuration Constants
N_PAIRS = 24
PHANTOM_DIMS = (64, 64, 16)
TRAIN_DEFAULTS = deepnet.TrainConfig()


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved parameters of one run, echoed as run_config.json next to its outputs."""
    command: str
    seed: int
    inputs: Dict[str, Optional[str]] = field(default_factory=dict)
    output: Optional[str] = None
    params: Dict[str, Any] = field(default_factory=dict)

    def echo(self, output_dir: str) -> str:
        return save_config_echo(self, output_dir)


def _banner(title: str) -> None:
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


def _pipeline_name(value: str) -> str:
    try:
        runner.parse_pipeline(value)
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e))
    return value


def _int_list(value: str):
    try:
        return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'")


def _float_list(value: str):
    try:
        return tuple(float(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{value}'")


def _activation_list(value: str):
    names = tuple(v.strip() for v in value.split(",") if v.strip())
    unknown = [n for n in names if n not in ACTIVATIONS]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown activation(s) {unknown}; choose from {ACTIVATIONS}")
    return names


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

def catalog_config(args) -> CatalogConfig:
    return CatalogConfig(
        n_levels=args.levels,
        hist_bins=args.hist_bins,
        glcm_distance=args.glcm_distance,
        connectivity=args.connectivity,
        mglszm_levels=args.mglszm_levels,
        mglszm_weights=args.mglszm_weights,
        texture_window=tuple(args.texture_window) if args.texture_window else None,
        per_direction=args.per_direction,
        scores=clinical.ClinicalScoreConfig(
            emphysema_threshold=args.emphysema_threshold,
            calcium_threshold=args.calcium_threshold,
            calcium_weight_bands=tuple(args.calcium_bands),
            min_lesion_area=args.min_lesion_area,
        ),
    )


def pipeline_specs(args, names: List[str]) -> List[runner.PipelineSpec]:
    clf_params = {"C": args.C, "gamma": args.gamma, "rbf_form": args.rbf_form,
                  "n_trees": args.trees, "nodesize": args.nodesize, "mtry": args.mtry, "vote": args.vote}
    lam = args.lam if args.lam == "auto" else float(args.lam)
    network = NetworkSpec(filters=args.filters, kernel=args.kernel, pool=args.pool, padding=args.padding,
                          fc_units=args.fc_units, dropout=args.dropout, activations=args.activations or ())
    train_cfg = deepnet.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
        lr_initial=args.lr_initial, lr_final=args.lr_final,
        lr_hold_until=args.lr_hold_until, lr_decay_until=args.lr_decay_until,
        rho=args.rho, eps=args.eps, stop_at_accuracy=args.stop_at_accuracy,
    )
    specs = []
    for name in names:
        spec = runner.parse_pipeline(name)
        if spec.is_deepnet:
            spec = replace(spec, network=network, train=train_cfg, downsample=args.downsample)
        else:
            spec = replace(spec, lam=lam, n_components=args.components,
                           variance_fraction=args.variance_fraction, classifier_params=clf_params)
        specs.append(spec)
    return specs


def _load_inputs(args):
    """(studies, table) from --manifest and/or --table."""
    studies = load_manifest(args.manifest, args.threads) if getattr(args, "manifest", None) else None
    table = read_feature_table(args.table) if getattr(args, "table", None) else None
    if studies is None and table is None:
        raise ConfigError("Pass --manifest or --table")
    return studies, table


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def run_phantom(args) -> Dict[str, Any]:
    studies = generate_cohort(args.n_pairs, tuple(args.dims), tuple(args.spacing), args.seed,
                              signal=not args.no_signal, threads=args.threads)
    if args.permute_labels:
        studies = permute_labels_within_pairs(studies, args.seed)
    manifest = write_manifest(studies, args.out)
    RunConfig("phantom", args.seed, output=args.out,
              params={"n_pairs": args.n_pairs, "dims": args.dims, "spacing": args.spacing,
                      "signal": not args.no_signal, "permute_labels": args.permute_labels}).echo(args.out)
    return {"manifest": manifest, "studies": len(studies)}


def run_extract(args) -> Dict[str, Any]:
    catalog = build_catalog(catalog_config(args))
    studies = load_manifest(args.manifest, args.threads)
    table = build_feature_table(studies, catalog, args.threads)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_feature_table(table, args.out)
    RunConfig("extract", args.seed, {"manifest": args.manifest}, args.out,
              {"catalog": catalog_config(args), "catalog_version": catalog.version}).echo(out_dir)
    return {"table": args.out, "studies": table.shape[0], "features": table.shape[1],
            "catalog_version": catalog.version}


def run_reduce(args) -> Dict[str, Any]:
    table = read_feature_table(args.table)
    if table.labels is None:
        raise ConfigError("Feature table has no labels; reduction needs them")
    lam = args.lam if args.lam == "auto" else float(args.lam)
    transform = reduce.fit_reduction(args.reduction, table.values, table.labels, lam=lam,
                                     n_components=args.components,
                                     variance_fraction=args.variance_fraction if args.components is None else None)
    reduced = reduce.reduce_apply(transform, table.values)
    if transform.kind == "lasso":
        names = [table.column_names[j] for j in transform.selected]
    elif transform.kind == "pca":
        names = [f"pc{j + 1}" for j in range(reduced.shape[1])]
    else:
        names = list(table.column_names)
    os.makedirs(args.out, exist_ok=True)
    write_json(transform.to_dict(), os.path.join(args.out, "transform.json"))
    write_csv(os.path.join(args.out, "reduced.csv"), ["study_id"] + names,
              ([sid] + [float(v) for v in row] for sid, row in zip(table.study_ids, reduced)))
    RunConfig("reduce", args.seed, {"table": args.table}, args.out,
              {"reduction": args.reduction, "lam": args.lam, "components": args.components,
               "variance_fraction": args.variance_fraction}).echo(args.out)
    return {"outputs": reduced.shape[1], "lambda": transform.lam}


def run_train(args) -> Dict[str, Any]:
    pipeline = pipeline_specs(args, [args.pipeline])[0]
    studies, table = _load_inputs(args)
    os.makedirs(args.out, exist_ok=True)
    if pipeline.is_deepnet:
        if studies is None:
            raise ConfigError("The deepnet pipeline needs --manifest")
        X = np.stack([deepnet.prepare_input(s, pipeline.downsample) for s in studies])
        spec = replace(pipeline.network, input_dims=tuple(X.shape[1:4]), channels=X.shape[4])
        net, optimizer, log = deepnet.train(spec, X, [s.label for s in studies], pipeline.train)
        deepnet.save_network(os.path.join(args.out, "network.npz"), net, optimizer, pipeline.train)
        deepnet.write_training_log(log, os.path.join(args.out, "training_log.csv"))
        result = {"model": "network.npz", "parameters": spec.parameter_count(), "epochs": len(log),
                  "final_loss": log[-1].mean_loss}
    else:
        if table is None:
            table = build_feature_table(studies, build_catalog(catalog_config(args)), args.threads)
        if table.labels is None:
            raise ConfigError("Feature table has no labels; training needs them")
        y = np.asarray(table.labels)
        transform = reduce.fit_reduction(pipeline.reduction, table.values, y, standardize=pipeline.standardize,
                                         lam=pipeline.lam, n_components=pipeline.n_components,
                                         variance_fraction=pipeline.variance_fraction if pipeline.n_components is None else None)
        Z = reduce.reduce_apply(transform, table.values)
        params = dict(pipeline.classifier_params)
        params["mtry"] = min(params.get("mtry", classify.RF_MTRY), Z.shape[1])
        clf = classify.train_classifier(pipeline.classifier, Z, y, params, args.seed, args.threads)
        model = classify.RadiomicsModel(transform, clf, table.catalog_version)
        classify.save_model(model, os.path.join(args.out, "model.json"))
        train_acc = float(np.mean((model.predict_table(table) >= 0.5) == (y == 1)))
        result = {"model": "model.json", "features": Z.shape[1], "train_accuracy": train_acc}
    RunConfig("train", args.seed, {"manifest": args.manifest, "table": args.table}, args.out,
              {"pipeline": pipeline.to_dict(), "catalog": catalog_config(args)}).echo(args.out)
    return result


def run_crossval(args) -> Dict[str, Any]:
    pipelines = pipeline_specs(args, args.pipeline or list(runner.DEFAULT_PIPELINES))
    studies, table = _load_inputs(args)
    catalog = build_catalog(catalog_config(args)) if table is None else None
    report = runner.run_crossval(pipelines, seed=args.seed, k=args.folds, table=table, studies=studies,
                                 catalog=catalog, threads=args.threads)
    doc = report.to_dict()
    save_report(doc, args.out)
    RunConfig("crossval", args.seed, {"manifest": args.manifest, "table": args.table}, args.out,
              {"folds": args.folds, "catalog": None if catalog is None else catalog_config(args),
               "pipelines": [p.to_dict() for p in pipelines]}).echo(args.out)
    return doc


def run_report(args) -> Dict[str, Any]:
    with open(args.report) as f:
        doc = json.load(f)
    if doc.get("format") != "prognosis-report":
        raise PrognosisError(f"{args.report} is not an evaluation report")
    if args.out:
        save_report(doc, args.out)
        RunConfig("report", args.seed, {"report": args.report}, args.out).echo(args.out)
    return doc


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_catalog_flags(p):
    g = p.add_argument_group("feature catalog")
    g.add_argument("--levels", type=int, default=32, help="Gray levels for GLCM/GLRLM/GLSZM")
    g.add_argument("--hist-bins", type=int, default=64, help="Histogram bins for energy/entropy")
    g.add_argument("--glcm-distance", type=int, default=1)
    g.add_argument("--connectivity", choices=("slice8", "3d26"), default="slice8")
    g.add_argument("--mglszm-levels", type=_int_list, default=(8, 16, 32, 64))
    g.add_argument("--mglszm-weights", type=_float_list, default=None, help="One per level count; default uniform")
    g.add_argument("--texture-window", type=float, nargs=2, metavar=("LO", "HI"), default=None)
    g.add_argument("--per-direction", action="store_true", help="Also emit per-direction texture features")
    s = p.add_argument_group("clinical scores")
    s.add_argument("--emphysema-threshold", type=float, default=clinical.EMPHYSEMA_THRESHOLD, help="LAA cutoff (HU)")
    s.add_argument("--calcium-threshold", type=float, default=clinical.CALCIUM_THRESHOLD, help="Lesion cutoff (HU)")
    s.add_argument("--calcium-bands", type=float, nargs=3, default=clinical.CALCIUM_WEIGHT_BANDS,
                   metavar=("W2", "W3", "W4"), help="Peak HU at which the Agatston weight steps to 2, 3, 4")
    s.add_argument("--min-lesion-area", type=float, default=clinical.MIN_LESION_AREA_MM2, help="mm^2")


def _add_pipeline_flags(p):
    g = p.add_argument_group("radiomics pipeline")
    g.add_argument("--lam", default="auto", help="LASSO lambda or 'auto' (inner 3-fold CV)")
    g.add_argument("--components", type=int, default=None, help="PCA component count")
    g.add_argument("--variance-fraction", type=float, default=runner.PCA_VARIANCE)
    g.add_argument("--C", type=float, default=classify.SVM_C)
    g.add_argument("--gamma", type=float, default=classify.SVM_GAMMA, help="RBF parameter")
    g.add_argument("--rbf-form", choices=classify.RBF_FORMS, default="gamma")
    g.add_argument("--trees", type=int, default=classify.RF_TREES)
    g.add_argument("--nodesize", type=int, default=classify.RF_NODESIZE)
    g.add_argument("--mtry", type=int, default=classify.RF_MTRY)
    g.add_argument("--vote", choices=classify.RF_VOTES, default="hard")
    d = p.add_argument_group("deepnet pipeline")
    d.add_argument("--epochs", type=int, default=120)
    d.add_argument("--batch-size", type=int, default=8)
    d.add_argument("--filters", type=_int_list, default=(50, 100, 100, 100))
    d.add_argument("--kernel", type=_int_list, default=(5, 5, 2))
    d.add_argument("--pool", type=int, default=2)
    d.add_argument("--padding", choices=PADDINGS, default="valid")
    d.add_argument("--fc-units", type=int, default=6000)
    d.add_argument("--dropout", type=float, default=0.35)
    d.add_argument("--activations", type=_activation_list, default=None,
                   help="Comma-separated, one per conv layer plus the dense layer; default all relu")
    d.add_argument("--downsample", type=_int_list, default=(1, 1, 1))
    d.add_argument("--lr-initial", type=float, default=TRAIN_DEFAULTS.lr_initial)
    d.add_argument("--lr-final", type=float, default=TRAIN_DEFAULTS.lr_final)
    d.add_argument("--lr-hold-until", type=int, default=TRAIN_DEFAULTS.lr_hold_until, help="Last epoch at lr-initial")
    d.add_argument("--lr-decay-until", type=int, default=TRAIN_DEFAULTS.lr_decay_until, help="First epoch at lr-final")
    d.add_argument("--rho", type=float, default=TRAIN_DEFAULTS.rho, help="RMSprop decay")
    d.add_argument("--eps", type=float, default=TRAIN_DEFAULTS.eps, help="RMSprop epsilon")
    d.add_argument("--stop-at-accuracy", type=float, default=None, help="Stop once training accuracy reaches this")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Volumetric CT prognosis toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="Single source of all randomness")
    common.add_argument("--threads", type=int, default=1, help="Worker threads (results do not depend on it)")
    common.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="Generate a matched phantom cohort")
    p.add_argument("--n-pairs", type=int, default=N_PAIRS)
    p.add_argument("--dims", type=int, nargs=3, default=PHANTOM_DIMS, metavar=("W", "H", "D"))
    p.add_argument("--spacing", type=float, nargs=3, default=(0.7, 0.7, 5.0), metavar=("SX", "SY", "SZ"))
    p.add_argument("--no-signal", action="store_true", help="Cases carry no disease signatures")
    p.add_argument("--permute-labels", action="store_true", help="Swap labels within pairs at random")
    p.add_argument("--out", required=True)

    p = sub.add_parser("extract", parents=[common], help="Extract the feature table from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="Feature table CSV")
    _add_catalog_flags(p)

    p = sub.add_parser("reduce", parents=[common], help="Fit a reduction on a feature table")
    p.add_argument("--table", required=True)
    p.add_argument("--reduction", choices=reduce.REDUCTIONS, default="lasso")
    p.add_argument("--lam", default="auto")
    p.add_argument("--components", type=int, default=None)
    p.add_argument("--variance-fraction", type=float, default=runner.PCA_VARIANCE)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="Train one pipeline on a whole cohort")
    p.add_argument("--manifest")
    p.add_argument("--table")
    p.add_argument("--pipeline", type=_pipeline_name, default="lasso+nlsvm")
    p.add_argument("--out", required=True)
    _add_catalog_flags(p)
    _add_pipeline_flags(p)

    p = sub.add_parser("crossval", parents=[common], help="Matched k-fold cross-validation")
    p.add_argument("--manifest")
    p.add_argument("--table")
    p.add_argument("--pipeline", type=_pipeline_name, action="append",
                   help=f"Repeatable; default {', '.join(runner.DEFAULT_PIPELINES)}")
    p.add_argument("--folds", type=int, default=runner.N_FOLDS)
    p.add_argument("--out", required=True)
    _add_catalog_flags(p)
    _add_pipeline_flags(p)

    p = sub.add_parser("report", parents=[common], help="Re-render a stored evaluation report")
    p.add_argument("--report", required=True, help="report.json written by crossval")
    p.add_argument("--out", default=None, help="Rewrite CSV/summary files here")
    return parser


COMMAND_RUNNERS = {
    "phantom": run_phantom,
    "extract": run_extract,
    "reduce": run_reduce,
    "train": run_train,
    "crossval": run_crossval,
    "report": run_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stdout)

    _banner(f"PROGNOSIS TOOLKIT: {args.command.upper()}")
    print(f"Seed: {args.seed}")
    print(f"Threads: {args.threads}")

    try:
        result = COMMAND_RUNNERS[args.command](args)
    except (PrognosisError, OSError) as e:
        print(f"{args.command} failed: {e}")
        return 1

    if args.command in ("crossval", "report"):
        _banner("CROSS-VALIDATION SUMMARY")
        print(format_report(result), end="")
    else:
        _banner("RESULT")
        for key, value in result.items():
            print(f"{key}: {value}")
    print("\nDone.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
