import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, is_dataclass
from typing import Any, Dict, Iterable, Sequence, Union

import numpy as np

CONFIG_ECHO = "run_config.json"


def derive_seed(seed: int, *keys: Union[int, str]) -> int:
    """
    Independent 63-bit seed for a sub-task, e.g. derive_seed(seed, "fold", 3).
    Depends only on (seed, keys), never on scheduling order.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            key = int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
        entropy.append(int(key) & 0xFFFFFFFFFFFFFFFF)
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def _jsonable(obj: Any) -> Any:
    """Plain JSON types; non-finite floats become null."""
    if is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(data: Any, path: str) -> None:
    """Sorted keys, no timestamps: identical inputs give identical bytes."""
    with open(path, "w") as f:
        json.dump(_jsonable(data), f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def save_config_echo(config: Any, output_dir: str) -> str:
    """Write the fully resolved run parameters next to the run's outputs."""
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, CONFIG_ECHO)
    write_json(config, path)
    return path


def _number(value: Any, spec: str) -> str:
    if value is None:
        return format("n/a", spec.split(".")[0])
    return format(value, spec)


def _floats(values: Sequence[Any]) -> np.ndarray:
    return np.array([np.nan if v is None else v for v in values], dtype=np.float64)


def format_report(report: Dict[str, Any]) -> str:
    """Human-readable summary of an evaluation report document."""
    # render what report.json holds, so a reloaded report prints the same
    report = _jsonable(report)
    lines = [
        "PROGNOSIS CROSS-VALIDATION REPORT",
        "=================================",
        "",
        f"Seed: {report.get('seed')}",
        f"Folds: {len(report.get('plan', {}).get('folds', []))}",
        f"Studies: {report.get('n_studies')}",
        "",
        f"{'Model':<16} {'Accuracy':>18} {'AUC':>18}",
        f"{'-' * 16} {'-' * 18} {'-' * 18}",
    ]
    for m in report.get("models", []):
        acc = _floats(m["fold_accuracy"])
        auc = _floats(m["fold_auc"])
        lines.append(f"{m['name']:<16} {acc.mean():>9.3f} +- {acc.std():<5.3f} {auc.mean():>9.3f} +- {auc.std():<5.3f}")

    tests = report.get("tests", [])
    if tests:
        lines += ["", "T-TESTS", "-------"]
        for t in tests:
            flag = " (degenerate)" if t["degenerate"] else ""
            lines.append(f"{t['description']:<44} t = {_number(t['statistic'], '>9.4f')}  p = {_number(t['p_value'], '.4g')}{flag}")
    return "\n".join(lines) + "\n"


def save_report(report: Dict[str, Any], output_dir: str = "reports") -> Dict[str, str]:
    """
    Write an evaluation report document as:
      report.json      full document (re-rendered by the `report` command)
      metrics.csv      model, fold, accuracy, auc
      roc.csv          model, fpr, mean_tpr, std_tpr
      predictions.csv  model, fold, study_id, label, probability
      summary.txt      table of mean +- std accuracy and AUC, then t-tests
    """
    os.makedirs(output_dir, exist_ok=True)
    paths = {name: os.path.join(output_dir, name) for name in
             ("report.json", "metrics.csv", "roc.csv", "predictions.csv", "summary.txt")}

    write_json(report, paths["report.json"])

    models = report.get("models", [])
    write_csv(paths["metrics.csv"], ("model", "fold", "accuracy", "auc"), (
        (m["name"], fold, acc, auc)
        for m in models
        for fold, (acc, auc) in enumerate(zip(m["fold_accuracy"], m["fold_auc"]))
    ))
    write_csv(paths["roc.csv"], ("model", "fpr", "mean_tpr", "std_tpr"), (
        (m["name"], fpr, mean, std)
        for m in models
        for fpr, mean, std in zip(m["mean_roc"]["grid"], m["mean_roc"]["mean"], m["mean_roc"]["std"])
    ))
    write_csv(paths["predictions.csv"], ("model", "fold", "study_id", "label", "probability"), (
        (m["name"], p["fold"], p["study_id"], p["label"], p["probability"])
        for m in models
        for p in m["predictions"]
    ))
    with open(paths["summary.txt"], "w") as f:
        f.write(format_report(report))
    return paths
