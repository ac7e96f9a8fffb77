"""
Classical classifiers over reduced feature rows, each returning a
confidence in [0, 1] for the positive (mortality) class:

- lsvm / nlsvm: soft-margin SVM trained by SMO (maximal violating pair
  working set), with a Platt sigmoid fitted on the training decision values.
- rf: random forest of Gini trees on bootstrap samples.

Models are saved as versioned JSON together with their reduction
transform and the feature catalog version they were trained against.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from errors import CatalogMismatchError, ConfigError, EmptyInputError, PrognosisError, SingleClassError
from reduce import ReductionTransform, reduce_apply
from utils import derive_seed
from volume import FeatureTable

logger = logging.getLogger(__name__)

CLASSIFIERS = ("lsvm", "nlsvm", "rf")
MODEL_FORMAT = "prognosis-model"
MODEL_VERSION = 1

SVM_C = 100.0
SVM_GAMMA = 0.01
SVM_TOL = 1e-4
SVM_MAX_ITER = 100_000
RBF_FORMS = ("gamma", "bandwidth")

RF_TREES = 900
RF_NODESIZE = 5
RF_MTRY = 3
RF_VOTES = ("hard", "proportion")

_TAU = 1e-12


def _check_xy(X, y) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyInputError(f"Classifier needs a non-empty 2D training matrix, got shape {X.shape}")
    if len(y) != X.shape[0]:
        raise PrognosisError(f"{X.shape[0]} training rows but {len(y)} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise PrognosisError("Labels must be 0 or 1")
    if not np.all(np.isfinite(X)):
        raise PrognosisError("Non-finite values in training rows")
    return X, y


# ---------------------------------------------------------------------------
# SVM
# ---------------------------------------------------------------------------

def rbf_gamma(param: float, form: str = "gamma") -> float:
    """exp(-gamma ||x - x'||^2); the bandwidth form maps sigma to 1 / (2 sigma^2)."""
    if form not in RBF_FORMS:
        raise ConfigError(f"Unknown RBF form '{form}', expected one of {RBF_FORMS}")
    if param <= 0:
        raise ConfigError(f"RBF parameter must be positive, got {param}")
    return float(param) if form == "gamma" else 1.0 / (2.0 * float(param) ** 2)


def kernel_matrix(A: np.ndarray, B: np.ndarray, kernel: str, gamma: float = SVM_GAMMA) -> np.ndarray:
    if kernel == "linear":
        return A @ B.T
    if kernel == "rbf":
        return np.exp(-gamma * cdist(A, B, "sqeuclidean"))
    raise ConfigError(f"Unknown kernel '{kernel}'")


def _smo(K: np.ndarray, ys: np.ndarray, C: float, tol: float, max_iter: int):
    """
    Solve min 1/2 a^T Q a - e^T a, 0 <= a <= C, y^T a = 0 with Q = y y^T K.
    Returns (alpha, rho); the decision function is sum a_i y_i K(x_i, x) - rho.
    """
    n = len(ys)
    Q = (ys[:, None] * ys[None, :]) * K
    QD = np.diag(Q).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)

    for it in range(max_iter):
        up = ((ys > 0) & (alpha < C)) | ((ys < 0) & (alpha > 0))
        low = ((ys > 0) & (alpha > 0)) | ((ys < 0) & (alpha < C))
        score = -ys * G
        if not up.any() or not low.any():
            break
        i = int(np.flatnonzero(up)[np.argmax(score[up])])
        j = int(np.flatnonzero(low)[np.argmin(score[low])])
        if score[i] - score[j] < tol:
            break

        ai, aj = alpha[i], alpha[j]
        if ys[i] != ys[j]:
            quad = QD[i] + QD[j] + 2 * Q[i, j]
            delta = (-G[i] - G[j]) / (quad if quad > 0 else _TAU)
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            elif nj > C:
                nj, ni = C, C + diff
        else:
            quad = QD[i] + QD[j] - 2 * Q[i, j]
            delta = (G[i] - G[j]) / (quad if quad > 0 else _TAU)
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > C:
                if ni > C:
                    ni, nj = C, total - C
            elif nj < 0:
                nj, ni = 0.0, total
            if total > C:
                if nj > C:
                    nj, ni = C, total - C
            elif ni < 0:
                ni, nj = 0.0, total

        G += Q[:, i] * (ni - ai) + Q[:, j] * (nj - aj)
        alpha[i], alpha[j] = ni, nj
    else:
        logger.warning("SMO reached %d iterations before the KKT tolerance %.1e", max_iter, tol)

    yG = ys * G
    at_upper = alpha >= C
    at_lower = alpha <= 0
    free = ~at_upper & ~at_lower
    if free.any():
        rho = float(yG[free].mean())
    else:
        ub_set = (at_upper & (ys < 0)) | (at_lower & (ys > 0))
        lb_set = (at_upper & (ys > 0)) | (at_lower & (ys < 0))
        ub = float(yG[ub_set].min()) if ub_set.any() else np.inf
        lb = float(yG[lb_set].max()) if lb_set.any() else -np.inf
        rho = (ub + lb) / 2
    return alpha, rho


def _sigmoid_nll(f: np.ndarray, t: np.ndarray, A: float, B: float) -> float:
    z = f * A + B
    return float(np.where(z >= 0, t * z + np.log1p(np.exp(-np.abs(z))),
                          (t - 1) * z + np.log1p(np.exp(-np.abs(z)))).sum())


def fit_sigmoid(decision: np.ndarray, y: np.ndarray, max_iter: int = 100) -> Tuple[float, float]:
    """
    Platt scaling P(y=1|f) = 1 / (1 + exp(A f + B)) by Newton's method with
    backtracking on smoothed targets.
    """
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    hi = (n_pos + 1.0) / (n_pos + 2.0)
    lo = 1.0 / (n_neg + 2.0)
    t = np.where(y == 1, hi, lo)
    f = np.asarray(decision, dtype=np.float64)

    A, B = 0.0, float(np.log((n_neg + 1.0) / (n_pos + 1.0)))
    fval = _sigmoid_nll(f, t, A, B)
    for _ in range(max_iter):
        z = f * A + B
        e = np.exp(-np.abs(z))
        p = np.where(z >= 0, e / (1 + e), 1 / (1 + e))
        q = 1 - p
        d2 = p * q
        h11 = 1e-12 + float((f * f * d2).sum())
        h22 = 1e-12 + float(d2.sum())
        h21 = float((f * d2).sum())
        d1 = t - p
        g1 = float((f * d1).sum())
        g2 = float(d1.sum())
        if abs(g1) < 1e-5 and abs(g2) < 1e-5:
            break
        det = h11 * h22 - h21 * h21
        dA = -(h22 * g1 - h21 * g2) / det
        dB = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * dA + g2 * dB
        step = 1.0
        while step >= 1e-10:
            nA, nB = A + step * dA, B + step * dB
            nf = _sigmoid_nll(f, t, nA, nB)
            if nf < fval + 1e-4 * step * gd:
                A, B, fval = nA, nB, nf
                break
            step /= 2
        else:
            logger.debug("Sigmoid fit: line search failed")
            break
    return A, B


def _sigmoid(decision, A: float, B: float) -> np.ndarray:
    z = A * np.asarray(decision, dtype=np.float64) + B
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, e / (1 + e), 1 / (1 + e))


# ---------------------------------------------------------------------------
# Random forest
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Flat node arrays; a node is a leaf when feature == -1. Left child takes x <= threshold."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, 2) training class counts

    def leaf(self, row: np.ndarray) -> int:
        node = 0
        while self.feature[node] >= 0:
            node = self.left[node] if row[self.feature[node]] <= self.threshold[node] else self.right[node]
        return node

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DecisionTree":
        return cls(np.asarray(doc["feature"], dtype=np.int64),
                   np.asarray(doc["threshold"], dtype=np.float64),
                   np.asarray(doc["left"], dtype=np.int64),
                   np.asarray(doc["right"], dtype=np.int64),
                   np.asarray(doc["counts"], dtype=np.int64).reshape(-1, 2))


def _gini(n0: np.ndarray, n1: np.ndarray) -> np.ndarray:
    n = n0 + n1
    return 1.0 - (n0 / n) ** 2 - (n1 / n) ** 2


def _best_split(X: np.ndarray, y: np.ndarray, features: np.ndarray, nodesize: int):
    """Lowest weighted Gini; ties go to the earliest entry of features, then the lowest threshold."""
    n = len(y)
    best = (np.inf, -1, 0.0)
    total1 = int(y.sum())
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cum1 = np.cumsum(y[order])
        m = np.arange(nodesize, n - nodesize + 1)
        m = m[xs[m - 1] < xs[m]]
        if m.size == 0:
            continue
        l1 = cum1[m - 1]
        l0 = m - l1
        r1 = total1 - l1
        r0 = (n - m) - r1
        impurity = (m * _gini(l0, l1) + (n - m) * _gini(r0, r1)) / n
        k = int(np.argmin(impurity))
        if impurity[k] < best[0]:
            best = (float(impurity[k]), int(f), float((xs[m[k] - 1] + xs[m[k]]) / 2))
    return best


def _grow_tree(X: np.ndarray, y: np.ndarray, nodesize: int, mtry: int, rng: np.random.Generator,
               by_rank: np.ndarray) -> DecisionTree:
    """by_rank[r] is the column holding tie-break rank r; candidates are drawn as ranks."""
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        n1 = int(y[idx].sum())
        counts.append((len(idx) - n1, n1))
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)))]
    while stack:
        node, idx = stack.pop()
        n0, n1 = counts[node]
        if n0 == 0 or n1 == 0 or len(idx) < 2 * nodesize:
            continue
        cand = by_rank[np.sort(rng.choice(X.shape[1], size=mtry, replace=False))]
        _, f, thr = _best_split(X[idx], y[idx], cand, nodesize)
        if f < 0:
            continue
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node], right[node] = new_node(li), new_node(ri)
        stack.append((right[node], ri))
        stack.append((left[node], li))

    return DecisionTree(np.asarray(feature, dtype=np.int64), np.asarray(threshold, dtype=np.float64),
                        np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                        np.asarray(counts, dtype=np.int64).reshape(-1, 2))


# ---------------------------------------------------------------------------
# Trained model
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrainedClassifier:
    kind: str
    n_features: int
    params: Dict[str, object] = field(default_factory=dict)
    # svm
    support: Optional[np.ndarray] = None
    dual_coef: Optional[np.ndarray] = None  # alpha_i * y_i for each support vector
    bias: float = 0.0
    sigmoid: Tuple[float, float] = (0.0, 0.0)
    # rf
    trees: Tuple[DecisionTree, ...] = ()

    @property
    def kernel(self) -> str:
        return "linear" if self.kind == "lsvm" else "rbf"

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        K = kernel_matrix(X, self.support, self.kernel, self.params.get("gamma", SVM_GAMMA))
        return K @ self.dual_coef + self.bias

    def to_dict(self) -> dict:
        doc = {"kind": self.kind, "n_features": self.n_features, "params": dict(self.params)}
        if self.kind == "rf":
            doc["trees"] = [t.to_dict() for t in self.trees]
        else:
            doc.update(support=self.support.tolist(), dual_coef=self.dual_coef.tolist(),
                       bias=self.bias, sigmoid=list(self.sigmoid))
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainedClassifier":
        kind = doc["kind"]
        n_features = int(doc["n_features"])
        if kind == "rf":
            return cls(kind, n_features, doc["params"], trees=tuple(DecisionTree.from_dict(t) for t in doc["trees"]))
        support = np.asarray(doc["support"], dtype=np.float64).reshape(-1, n_features)
        return cls(kind, n_features, doc["params"], support=support,
                   dual_coef=np.asarray(doc["dual_coef"], dtype=np.float64),
                   bias=float(doc["bias"]), sigmoid=tuple(doc["sigmoid"]))


def svm_train(X, y, kernel: str = "rbf", C: float = SVM_C, gamma: float = SVM_GAMMA,
              rbf_form: str = "gamma", tol: float = SVM_TOL, max_iter: int = SVM_MAX_ITER) -> TrainedClassifier:
    """Soft-margin SVM on 0/1 labels (mapped to -1/+1)."""
    X, y = _check_xy(X, y)
    if len(np.unique(y)) < 2:
        raise SingleClassError("SVM training needs both classes")
    if C <= 0:
        raise ConfigError(f"SVM C must be positive, got {C}")
    g = rbf_gamma(gamma, rbf_form) if kernel == "rbf" else 0.0
    ys = np.where(y == 1, 1.0, -1.0)
    K = kernel_matrix(X, X, kernel, g)
    alpha, rho = _smo(K, ys, float(C), tol, max_iter)

    sv = alpha > 0
    dual_coef = alpha[sv] * ys[sv]
    decision = K[:, sv] @ dual_coef - rho
    A, B = fit_sigmoid(decision, y)
    kind = "lsvm" if kernel == "linear" else "nlsvm"
    params = {"C": float(C), "kernel": kernel, "tol": tol}
    if kernel == "rbf":
        params.update(gamma=g, rbf_param=float(gamma), rbf_form=rbf_form)
    logger.debug("%s trained: %d support vectors, rho=%.4g, sigmoid=(%.4g, %.4g)",
                 kind, int(sv.sum()), rho, A, B)
    return TrainedClassifier(kind, X.shape[1], params, support=X[sv].copy(), dual_coef=dual_coef,
                             bias=-rho, sigmoid=(A, B))


def rf_train(X, y, n_trees: int = RF_TREES, nodesize: int = RF_NODESIZE, mtry: int = RF_MTRY,
             seed: int = 0, vote: str = "hard", threads: int = 1,
             feature_order: Optional[Sequence[int]] = None) -> TrainedClassifier:
    """
    Tree t grows on a bootstrap sample drawn from a generator seeded by
    (seed, t), so the forest does not depend on the thread count.

    feature_order gives each column its tie-break rank (default: the
    column index). Training on X[:, perm] with feature_order=perm grows
    the same trees as training on X, with columns relabelled.
    """
    X, y = _check_xy(X, y)
    n, d = X.shape
    if not 1 <= mtry <= d:
        raise ConfigError(f"mtry must be in [1, {d}], got {mtry}")
    if nodesize < 1 or n < nodesize:
        raise ConfigError(f"nodesize must be in [1, {n}], got {nodesize}")
    if n_trees < 1:
        raise ConfigError("n_trees must be positive")
    if vote not in RF_VOTES:
        raise ConfigError(f"Unknown vote rule '{vote}', expected one of {RF_VOTES}")
    ranks = np.arange(d) if feature_order is None else np.asarray(feature_order, dtype=np.int64)
    if ranks.shape != (d,) or not np.array_equal(np.sort(ranks), np.arange(d)):
        raise ConfigError(f"feature_order must be a permutation of 0..{d - 1}")
    by_rank = np.argsort(ranks)

    def grow(t: int) -> DecisionTree:
        rng = np.random.default_rng(derive_seed(seed, "rf-tree", t))
        boot = rng.integers(0, n, size=n)
        return _grow_tree(X[boot], y[boot], nodesize, mtry, rng, by_rank)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        trees = tuple(pool.map(grow, range(n_trees)))
    params = {"n_trees": n_trees, "nodesize": nodesize, "mtry": mtry, "seed": seed, "vote": vote}
    return TrainedClassifier("rf", d, params, trees=trees)


def train_classifier(kind: str, X, y, params: Optional[dict] = None, seed: int = 0,
                     threads: int = 1) -> TrainedClassifier:
    params = dict(params or {})
    if kind == "lsvm":
        return svm_train(X, y, "linear", C=params.get("C", SVM_C))
    if kind == "nlsvm":
        return svm_train(X, y, "rbf", C=params.get("C", SVM_C), gamma=params.get("gamma", SVM_GAMMA),
                         rbf_form=params.get("rbf_form", "gamma"))
    if kind == "rf":
        return rf_train(X, y, params.get("n_trees", RF_TREES), params.get("nodesize", RF_NODESIZE),
                        params.get("mtry", RF_MTRY), seed, params.get("vote", "hard"), threads)
    raise ConfigError(f"Unknown classifier '{kind}', expected one of {CLASSIFIERS}")


def predict_proba(model: TrainedClassifier, X) -> np.ndarray:
    """Positive-class confidence for each row."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise PrognosisError(f"Classifier expects {model.n_features} features, got {X.shape[1]}")
    if model.kind in ("lsvm", "nlsvm"):
        return _sigmoid(model.decision_function(X), *model.sigmoid)

    proportion = model.params.get("vote") == "proportion"
    out = np.empty(X.shape[0])
    for r, row in enumerate(X):
        votes = []
        for tree in model.trees:
            n0, n1 = tree.counts[tree.leaf(row)]
            votes.append(n1 / (n0 + n1) if proportion else float(n1 > n0))
        out[r] = sum(votes) / len(votes)
    return out


def classify(model: TrainedClassifier, row) -> float:
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise PrognosisError(f"classify expects a single row, got shape {row.shape}")
    return float(predict_proba(model, row[None, :])[0])


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RadiomicsModel:
    transform: ReductionTransform
    classifier: TrainedClassifier
    catalog_version: str = ""

    def predict_table(self, table: FeatureTable) -> np.ndarray:
        if table.catalog_version != self.catalog_version:
            raise CatalogMismatchError(self.catalog_version, table.catalog_version)
        return predict_proba(self.classifier, reduce_apply(self.transform, table.values))


def save_model(model: RadiomicsModel, path: str) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "catalog_version": model.catalog_version,
        "transform": model.transform.to_dict(),
        "classifier": model.classifier.to_dict(),
    }
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")


def load_model(path: str) -> RadiomicsModel:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != MODEL_FORMAT:
        raise PrognosisError(f"{path} is not a radiomics model file")
    if doc.get("version") != MODEL_VERSION:
        raise PrognosisError(f"{path}: unsupported model version {doc.get('version')}")
    return RadiomicsModel(ReductionTransform.from_dict(doc["transform"]),
                          TrainedClassifier.from_dict(doc["classifier"]),
                          doc.get("catalog_version", ""))
