from dataclasses import replace

import numpy as np
import pytest

from deepnet import TrainConfig
from errors import ConfigError, FoldPlanError, PrognosisError
from models import NetworkSpec
from runner import (
    Cohort,
    FoldModel,
    audit_fold,
    build_cohort,
    fit_fold,
    make_folds,
    parse_pipeline,
    run_crossval,
)
from synthio import generate_cohort
from volume import FeatureTable


def _paired_table(n_pairs=12, d=8, signal=3.0, seed=0):
    rng = np.random.default_rng(seed)
    ids, labels, groups = [], [], []
    for g in range(n_pairs):
        for label in (0, 1):
            ids.append(f"pair{g:03d}_{'case' if label else 'control'}")
            labels.append(label)
            groups.append(g)
    labels = np.array(labels)
    X = rng.normal(size=(len(ids), d))
    X[:, 0] += signal * labels
    X[:, 1] -= signal * labels
    return FeatureTable(tuple(f"f{j}" for j in range(d)), X, tuple(ids), catalog_version="cat1-test",
                        labels=tuple(labels), match_groups=tuple(groups))


FAST = [
    parse_pipeline("lasso+lsvm", lam=0.05),
    parse_pipeline("identity+rf", classifier_params={"n_trees": 15, "nodesize": 2}),
]


def test_folds_keep_pairs_together_and_partition_the_cohort():
    table = _paired_table()
    plan = make_folds(table.study_ids, table.labels, table.match_groups, k=6, seed=3)
    assert plan.k == 6
    seen = []
    for fold in plan.folds:
        assert len(fold.test_ids) == 4
        assert not set(fold.test_ids) & set(fold.train_ids)
        assert len(fold.train_ids) + len(fold.test_ids) == 24
        groups = {table.match_groups[table.study_ids.index(s)] for s in fold.test_ids}
        assert len(groups) == 2
        seen += fold.test_ids
    assert sorted(seen) == sorted(table.study_ids)


def test_fold_plan_depends_only_on_seed():
    table = _paired_table()
    a = make_folds(table.study_ids, table.labels, table.match_groups, 6, seed=1)
    b = make_folds(table.study_ids, table.labels, table.match_groups, 6, seed=1)
    assert a == b
    plans = {make_folds(table.study_ids, table.labels, table.match_groups, 6, seed=s).folds for s in range(5)}
    assert len(plans) > 1


def test_fold_plan_errors():
    table = _paired_table(n_pairs=5)
    with pytest.raises(FoldPlanError):
        make_folds(table.study_ids, table.labels, table.match_groups, k=6)
    with pytest.raises(FoldPlanError):
        make_folds(["a", "b"], [0, 0], [0, 0], k=2)
    with pytest.raises(FoldPlanError):
        make_folds(["a", "a"], [0, 1], [0, 0], k=2)
    with pytest.raises(FoldPlanError):
        make_folds(["a", "b"], [0, 1], [0, 0], k=1)


def test_parse_pipeline():
    p = parse_pipeline("lasso+nlsvm")
    assert (p.reduction, p.classifier, p.standardize) == ("lasso", "nlsvm", True)
    assert parse_pipeline("identity+rf").standardize is False
    assert parse_pipeline("pca+lsvm").reduction == "pca"
    assert parse_pipeline("deepnet").is_deepnet
    for bad in ("lasso", "lasso+knn", "ica+rf", "a+b+c"):
        with pytest.raises(ConfigError):
            parse_pipeline(bad)


def test_fit_fold_never_reads_test_rows():
    table = _paired_table()
    plan = make_folds(table.study_ids, table.labels, table.match_groups, 6, seed=0)
    fold = plan.folds[2]
    cohort = build_cohort(FAST, table=table)

    values = np.array(table.values)
    test_pos = cohort.positions(fold.test_ids)
    values[test_pos] = 1e6
    tampered = build_cohort(FAST, table=replace(table, values=values))

    for pipeline in FAST:
        a = fit_fold(pipeline, fold, cohort, seed=4)
        b = fit_fold(pipeline, fold, tampered, seed=4)
        assert a.radiomics.transform.to_dict() == b.radiomics.transform.to_dict()
        assert a.radiomics.classifier.to_dict() == b.radiomics.classifier.to_dict()
        assert a.radiomics.transform.fold_id == fold.index


def test_audit_fold_catches_mismatched_models():
    table = _paired_table()
    plan = make_folds(table.study_ids, table.labels, table.match_groups, 6, seed=0)
    cohort = build_cohort(FAST, table=table)
    model = fit_fold(FAST[0], plan.folds[0], cohort)
    audit_fold(model, plan.folds[0])
    with pytest.raises(PrognosisError):
        audit_fold(model, plan.folds[1])
    relabelled = FoldModel(1, model.pipeline, radiomics=model.radiomics)
    with pytest.raises(PrognosisError):
        audit_fold(relabelled, plan.folds[1])


def test_crossval_report_structure():
    table = _paired_table()
    report = run_crossval(FAST, seed=0, k=6, table=table)
    assert report.n_studies == 24
    assert [m.name for m in report.models] == ["lasso+lsvm", "identity+rf"]
    for m in report.models:
        assert len(m.fold_accuracy) == len(m.fold_auc) == len(m.fold_roc) == 6
        assert sorted(p["study_id"] for p in m.predictions) == sorted(table.study_ids)
        assert all(0.0 <= p["probability"] <= 1.0 for p in m.predictions)
        assert len(m.mean_roc.grid) == 101
        assert np.mean(m.fold_auc) > 0.8
    # accuracy and AUC: one paired test plus one test per model against chance
    assert len(report.tests) == 2 * (1 + 2)
    doc = report.to_dict()
    assert doc["format"] == "prognosis-report"
    assert len(doc["plan"]["folds"]) == 6


def test_crossval_is_thread_count_invariant():
    table = _paired_table(seed=1)
    serial = run_crossval(FAST, seed=5, k=3, table=table, threads=1).to_dict()
    parallel = run_crossval(FAST, seed=5, k=3, table=table, threads=3).to_dict()
    assert serial == parallel


def test_crossval_rejects_bad_inputs():
    table = _paired_table()
    with pytest.raises(ConfigError):
        run_crossval([], table=table)
    with pytest.raises(ConfigError):
        run_crossval([FAST[0], FAST[0]], table=table)
    with pytest.raises(ConfigError):
        run_crossval(FAST)
    unlabeled = replace(table, labels=None)
    with pytest.raises(ConfigError):
        run_crossval(FAST, table=unlabeled)
    with pytest.raises(ConfigError):
        run_crossval([parse_pipeline("deepnet")], table=table)


def test_cohort_checks_table_order_against_studies():
    studies = generate_cohort(1, dims=(32, 32, 4), seed=0)
    table = FeatureTable(("f0",), [[0.0], [1.0]], (studies[1].id, studies[0].id))
    with pytest.raises(ConfigError):
        build_cohort(FAST, table=table, studies=studies)


def test_crossval_deepnet_on_tiny_phantoms():
    studies = generate_cohort(4, dims=(32, 32, 4), seed=2)
    network = NetworkSpec(filters=(2,), kernel=(3, 3, 1), fc_units=4)
    deep = parse_pipeline("deepnet", network=network, train=TrainConfig(epochs=2, batch_size=4),
                          downsample=(4, 4, 2))
    report = run_crossval([deep], seed=0, k=2, studies=studies)
    model = report.models[0]
    assert len(model.fold_auc) == 2
    assert len(model.predictions) == 8
    assert isinstance(build_cohort([deep], studies=studies), Cohort)


def test_radiomics_and_deepnet_share_one_plan():
    studies = generate_cohort(2, dims=(32, 32, 4), seed=3)
    table = _paired_table(n_pairs=2)
    table = replace(table, study_ids=tuple(s.id for s in studies))
    deep = parse_pipeline("deepnet", network=NetworkSpec(filters=(2,), kernel=(3, 3, 1), fc_units=2),
                          train=TrainConfig(epochs=1), downsample=(4, 4, 2))
    report = run_crossval([FAST[0], deep], seed=1, k=2, table=table, studies=studies)
    folds = {m.name: [p["fold"] for p in sorted(m.predictions, key=lambda p: p["study_id"])] for m in report.models}
    assert folds["lasso+lsvm"] == folds["deepnet"]


@pytest.mark.slow
def test_signal_cohort_is_detected_and_permuted_labels_are_not():
    """24 matched pairs, 6 folds, LASSO + RBF SVM on the full feature catalog."""
    from intensity import build_catalog, build_feature_table
    from synthio import permute_labels_within_pairs

    studies = generate_cohort(24, seed=0, threads=4)
    table = build_feature_table(studies, build_catalog(), threads=4)
    pipeline = [parse_pipeline("lasso+nlsvm")]

    report = run_crossval(pipeline, seed=0, k=6, table=table, threads=3)
    assert np.mean(report.models[0].fold_auc) >= 0.85

    null_aucs = []
    for seed in range(5):
        permuted = permute_labels_within_pairs(studies, seed)
        null_table = replace(table, labels=tuple(s.label for s in permuted))
        null_aucs.append(np.mean(run_crossval(pipeline, seed=seed, k=6, table=null_table, threads=3)
                                 .models[0].fold_auc))
    assert 0.35 <= np.mean(null_aucs) <= 0.65
