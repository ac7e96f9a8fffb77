"""
Matched k-fold cross-validation: fold planning, per-fold fitting of a
pipeline on training rows only, scoring of the held-out rows, and
assembly of the evaluation report.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import classify
import deepnet
import metrics
import reduce
from errors import ConfigError, FoldPlanError, PrognosisError
from intensity import FeatureCatalog, build_catalog, build_feature_table
from models import NetworkSpec
from utils import derive_seed
from volume import FeatureTable, StudyRecord

logger = logging.getLogger(__name__)

N_FOLDS = 6
DEFAULT_PIPELINES = ("lasso+nlsvm", "identity+rf", "lasso+lsvm")
PCA_VARIANCE = 0.9


# ---------------------------------------------------------------------------
# Fold planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Fold:
    index: int
    train_ids: Tuple[str, ...]
    test_ids: Tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    folds: Tuple[Fold, ...]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "folds": [asdict(f) for f in self.folds]}


def make_folds(study_ids: Sequence[str], labels: Sequence[int], match_groups: Sequence[int],
               k: int = N_FOLDS, seed: int = 0) -> FoldPlan:
    """
    Match groups are shuffled by seed and dealt round-robin into k test
    folds, so a case and its matched control always land in the same fold.
    Within a fold, ids keep cohort order.
    """
    if not len(study_ids) == len(labels) == len(match_groups):
        raise FoldPlanError("study_ids, labels and match_groups must have equal lengths")
    if len(set(study_ids)) != len(study_ids):
        raise FoldPlanError("Duplicate study ids in cohort")
    if k < 2:
        raise FoldPlanError(f"Need at least 2 folds, got {k}")

    members: Dict[int, List[int]] = {}
    for pos, g in enumerate(match_groups):
        members.setdefault(int(g), []).append(pos)
    for g, pos in members.items():
        if sorted(int(labels[p]) for p in pos) != [0, 1]:
            raise FoldPlanError(f"Match group {g} must hold exactly one case and one control")
    n_pairs = len(members)
    if n_pairs == 0 or n_pairs % k:
        raise FoldPlanError(f"{n_pairs} matched pairs cannot be split evenly into {k} folds")

    groups = sorted(members)
    rng = np.random.default_rng(derive_seed(seed, "folds"))
    shuffled = [groups[i] for i in rng.permutation(n_pairs)]
    fold_of = {g: pos % k for pos, g in enumerate(shuffled)}

    folds = []
    for f in range(k):
        test = tuple(sid for sid, g in zip(study_ids, match_groups) if fold_of[int(g)] == f)
        train = tuple(sid for sid, g in zip(study_ids, match_groups) if fold_of[int(g)] != f)
        folds.append(Fold(f, train, test))
    return FoldPlan(tuple(folds), seed)


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineSpec:
    name: str
    reduction: str = "lasso"
    classifier: str = "nlsvm"
    standardize: bool = True
    lam: Union[float, str] = "auto"
    n_components: Optional[int] = None
    variance_fraction: Optional[float] = PCA_VARIANCE
    classifier_params: Dict[str, Any] = field(default_factory=dict)
    network: Optional[NetworkSpec] = None
    train: deepnet.TrainConfig = field(default_factory=deepnet.TrainConfig)
    downsample: Tuple[int, int, int] = (1, 1, 1)

    @property
    def is_deepnet(self) -> bool:
        return self.classifier == "deepnet"

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["network"] = None if self.network is None else self.network.to_dict()
        return doc


def parse_pipeline(name: str, **overrides) -> PipelineSpec:
    """'deepnet' or '<reduction>+<classifier>', e.g. 'lasso+nlsvm', 'identity+rf', 'pca+lsvm'."""
    if name == "deepnet":
        return PipelineSpec(name=name, reduction="identity", classifier="deepnet", standardize=False, **overrides)
    parts = name.split("+")
    if len(parts) != 2 or parts[0] not in reduce.REDUCTIONS or parts[1] not in classify.CLASSIFIERS:
        raise ConfigError(f"Unknown pipeline '{name}': expected deepnet or <{'|'.join(reduce.REDUCTIONS)}>"
                          f"+<{'|'.join(classify.CLASSIFIERS)}>")
    reduction, clf = parts
    # trees split on raw feature values; everything else sees standardized rows
    standardize = not (reduction == "identity" and clf == "rf")
    return PipelineSpec(name=name, reduction=reduction, classifier=clf, standardize=standardize, **overrides)


@dataclass(frozen=True, eq=False)
class Cohort:
    """Everything a fold needs, indexed by study id."""
    study_ids: Tuple[str, ...]
    labels: np.ndarray
    match_groups: Tuple[int, ...]
    table: Optional[FeatureTable] = None
    inputs: Optional[np.ndarray] = None  # prepared ConvNet inputs, cohort order

    def positions(self, ids: Sequence[str]) -> np.ndarray:
        lookup = {sid: i for i, sid in enumerate(self.study_ids)}
        return np.array([lookup[sid] for sid in ids], dtype=np.int64)


def build_cohort(pipelines: Sequence[PipelineSpec], table: Optional[FeatureTable] = None,
                 studies: Optional[Sequence[StudyRecord]] = None, catalog: Optional[FeatureCatalog] = None,
                 threads: int = 1) -> Cohort:
    radiomics = any(not p.is_deepnet for p in pipelines)
    deep = [p for p in pipelines if p.is_deepnet]
    if table is None and studies is None:
        raise ConfigError("Cross-validation needs studies or a feature table")
    if table is None and radiomics:
        table = build_feature_table(studies, catalog or build_catalog(), threads)
    inputs = None
    if deep:
        if studies is None:
            raise ConfigError("The deepnet pipeline needs study volumes, not only a feature table")
        downsample = {p.downsample for p in deep}
        if len(downsample) > 1:
            raise ConfigError("All deepnet pipelines in one run must share the downsampling factors")
        inputs = np.stack([deepnet.prepare_input(s, deep[0].downsample) for s in studies])

    if studies is not None:
        ids = tuple(s.id for s in studies)
        labels = np.array([s.label for s in studies], dtype=np.int64)
        groups = tuple(s.match_group for s in studies)
        if table is not None and table.study_ids != ids:
            raise ConfigError("Feature table rows do not match the study order")
    else:
        if table.labels is None or table.match_groups is None:
            raise ConfigError("Feature table carries no labels/match groups; pass the manifest instead")
        ids, labels, groups = table.study_ids, np.asarray(table.labels, dtype=np.int64), table.match_groups
    return Cohort(ids, labels, tuple(int(g) for g in groups), table, inputs)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FoldModel:
    fold: int
    pipeline: PipelineSpec
    radiomics: Optional[classify.RadiomicsModel] = None
    network: Optional[Any] = None
    training_log: Tuple[deepnet.EpochLog, ...] = ()

    def predict(self, cohort: Cohort, ids: Sequence[str]) -> np.ndarray:
        idx = cohort.positions(ids)
        if self.radiomics is not None:
            return self.radiomics.predict_table(
                FeatureTable(cohort.table.column_names, cohort.table.values[idx], tuple(ids),
                             cohort.table.catalog_version))
        return deepnet.predict_proba(self.network, cohort.inputs[idx])


def fit_fold(pipeline: PipelineSpec, fold: Fold, cohort: Cohort, seed: int = 0, threads: int = 1) -> FoldModel:
    """Fit the pipeline on the fold's training rows; test rows are never read."""
    train_idx = cohort.positions(fold.train_ids)
    y = cohort.labels[train_idx]

    if pipeline.is_deepnet:
        X = cohort.inputs[train_idx]
        spec = pipeline.network or NetworkSpec()
        spec = replace(spec, input_dims=tuple(X.shape[1:4]), channels=X.shape[4])
        cfg = replace(pipeline.train, seed=derive_seed(seed, pipeline.name, fold.index))
        net, _, log = deepnet.train(spec, X, y, cfg)
        return FoldModel(fold.index, pipeline, network=net, training_log=tuple(log))

    X = cohort.table.values[train_idx]
    transform = reduce.fit_reduction(pipeline.reduction, X, y, standardize=pipeline.standardize,
                                     lam=pipeline.lam, n_components=pipeline.n_components,
                                     variance_fraction=pipeline.variance_fraction if pipeline.n_components is None else None,
                                     fold_id=fold.index)
    Z = reduce.reduce_apply(transform, X)
    params = dict(pipeline.classifier_params)
    if pipeline.classifier == "rf":
        mtry = params.get("mtry", classify.RF_MTRY)
        if mtry > Z.shape[1]:
            logger.debug("Fold %d: mtry %d clipped to %d reduced features", fold.index, mtry, Z.shape[1])
            params["mtry"] = Z.shape[1]
    clf = classify.train_classifier(pipeline.classifier, Z, y, params,
                                    seed=derive_seed(seed, pipeline.name, fold.index), threads=threads)
    model = classify.RadiomicsModel(transform, clf, cohort.table.catalog_version)
    return FoldModel(fold.index, pipeline, radiomics=model)


def audit_fold(model: FoldModel, fold: Fold) -> None:
    """Every fitted transform must carry the id of the fold it was fitted for."""
    if model.fold != fold.index:
        raise PrognosisError(f"Fold audit: model fitted for fold {model.fold} scored on fold {fold.index}")
    if model.radiomics is not None and model.radiomics.transform.fold_id != fold.index:
        raise PrognosisError(f"Fold audit: transform fitted for fold {model.radiomics.transform.fold_id} "
                             f"used on fold {fold.index}")


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class ModelResult:
    name: str
    pipeline: Dict[str, Any]
    fold_accuracy: List[float] = field(default_factory=list)
    fold_auc: List[float] = field(default_factory=list)
    fold_confusion: List[Dict[str, int]] = field(default_factory=list)
    fold_roc: List[metrics.RocCurve] = field(default_factory=list)
    mean_roc: Optional[metrics.AverageRoc] = None
    predictions: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "pipeline": self.pipeline,
            "fold_accuracy": self.fold_accuracy,
            "fold_auc": self.fold_auc,
            "fold_confusion": self.fold_confusion,
            "fold_roc": [r.to_dict() for r in self.fold_roc],
            "mean_roc": {"grid": self.mean_roc.grid.tolist(), "mean": self.mean_roc.mean.tolist(),
                         "std": self.mean_roc.std.tolist()},
            "predictions": self.predictions,
        }


@dataclass
class EvalReport:
    seed: int
    n_studies: int
    plan: FoldPlan
    models: List[ModelResult]
    tests: List[metrics.TTestResult]

    def model(self, name: str) -> ModelResult:
        for m in self.models:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "format": "prognosis-report",
            "version": 1,
            "seed": self.seed,
            "n_studies": self.n_studies,
            "plan": self.plan.to_dict(),
            "models": [m.to_dict() for m in self.models],
            "tests": [t.to_dict() for t in self.tests],
        }


def compare_models(models: Sequence[ModelResult]) -> List[metrics.TTestResult]:
    """Paired t-tests for every model pair, and each model against chance (0.5)."""
    tests = []
    for metric in ("accuracy", "auc"):
        for a, b in combinations(models, 2):
            tests.append(metrics.paired_ttest(getattr(a, f"fold_{metric}"), getattr(b, f"fold_{metric}"),
                                              f"{metric}: {a.name} vs {b.name} (paired)"))
        for m in models:
            tests.append(metrics.one_sample_ttest(getattr(m, f"fold_{metric}"), 0.5,
                                                  f"{metric}: {m.name} vs 0.5"))
    return tests


def run_crossval(pipelines: Sequence[PipelineSpec], seed: int = 0, k: int = N_FOLDS,
                 table: Optional[FeatureTable] = None, studies: Optional[Sequence[StudyRecord]] = None,
                 catalog: Optional[FeatureCatalog] = None, threads: int = 1) -> EvalReport:
    """
    Evaluate every pipeline on one shared fold plan. Folds run concurrently
    (up to `threads`); results are assembled in fold order.
    """
    if not pipelines:
        raise ConfigError("No pipelines to evaluate")
    names = [p.name for p in pipelines]
    if len(set(names)) != len(names):
        raise ConfigError(f"Duplicate pipeline names: {names}")
    cohort = build_cohort(pipelines, table, studies, catalog, threads)
    plan = make_folds(cohort.study_ids, cohort.labels, cohort.match_groups, k, seed)
    logger.info("Cross-validating %d pipelines over %d folds (%d studies)",
                len(pipelines), plan.k, len(cohort.study_ids))

    results = []
    for pipeline in pipelines:
        def run_fold(fold: Fold):
            try:
                model = fit_fold(pipeline, fold, cohort, seed)
                audit_fold(model, fold)
                return model.predict(cohort, fold.test_ids)
            except PrognosisError as e:
                raise PrognosisError(f"Pipeline {pipeline.name}, fold {fold.index}: {e}") from e

        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            fold_scores = list(pool.map(run_fold, plan.folds))

        result = ModelResult(pipeline.name, pipeline.to_dict())
        for fold, scores in zip(plan.folds, fold_scores):
            y = cohort.labels[cohort.positions(fold.test_ids)]
            acc, counts = metrics.accuracy(scores, y)
            roc = metrics.roc_and_auc(scores, y)
            result.fold_accuracy.append(acc)
            result.fold_auc.append(roc.auc)
            result.fold_confusion.append(asdict(counts))
            result.fold_roc.append(roc)
            result.predictions += [
                {"fold": fold.index, "study_id": sid, "label": int(label), "probability": float(p)}
                for sid, label, p in zip(fold.test_ids, y, scores)
            ]
        result.mean_roc = metrics.average_roc(result.fold_roc)
        logger.info("%s: accuracy %.3f +- %.3f, AUC %.3f +- %.3f", pipeline.name,
                    np.mean(result.fold_accuracy), np.std(result.fold_accuracy),
                    np.mean(result.fold_auc), np.std(result.fold_auc))
        results.append(result)

    return EvalReport(seed, len(cohort.study_ids), plan, results, compare_models(results))
