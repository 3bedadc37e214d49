"""ZSL / GZSL metrics, round reports and the metrics CSV."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from fedzsl.data import AttributeTable, SampleSet, SplitSpec
from fedzsl.model import ZslParams, encode

CSV_COLUMNS = (
    "round",
    "scope",
    "acc_zsl",
    "acc_unseen",
    "acc_seen",
    "acc_h",
    "backdoor_acc",
    "loss_sce",
    "loss_kl",
    "loss_con",
    "n_discarded",
)


@dataclass
class RoundReport:
    round: int
    scope: str  # "global" or "client:<id>"
    acc_zsl: float | None = None
    acc_unseen: float | None = None
    acc_seen: float | None = None
    acc_h: float | None = None
    backdoor_acc: float | None = None
    loss_sce: float | None = None
    loss_kl: float | None = None
    loss_con: float | None = None
    n_discarded: int | None = None
    extras: dict[str, Any] = field(default_factory=dict)

    def row(self) -> list[str]:
        out = []
        for col in CSV_COLUMNS:
            v = getattr(self, col)
            if v is None:
                out.append("")
            elif isinstance(v, (float, np.floating)):
                out.append(repr(float(v)))
            elif isinstance(v, (int, np.integer)):
                out.append(str(int(v)))
            else:
                out.append(str(v))
        return out


def _sorted_space(table: AttributeTable, space: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array(sorted({int(c) for c in space}), dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty class space")
    return ids, table.positions(ids)


def predict_batch(params: ZslParams, X: np.ndarray, table: AttributeTable, space: Sequence[int]) -> np.ndarray:
    """Predicted class ids; ties go to the lowest class id."""
    ids, pos = _sorted_space(table, space)
    a_hat = encode(params, np.atleast_2d(X)) @ params.w_g + params.b_g
    scores = a_hat @ table.rows[pos].T
    return ids[np.argmax(scores, axis=1)]


def predict(params: ZslParams, x: np.ndarray, table: AttributeTable, space: Sequence[int]) -> int:
    return int(predict_batch(params, np.asarray(x)[None, :], table, space)[0])


def per_class_accuracy(labels: np.ndarray, predictions: np.ndarray) -> float:
    """Mean over classes of the within-class hit rate."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.size == 0:
        raise ValueError("empty evaluation set")
    classes = np.unique(labels)
    rates = [np.mean(predictions[labels == c] == c) for c in classes]
    return float(np.mean(rates))


def per_class_top1(params: ZslParams, samples: SampleSet, table: AttributeTable, space: Sequence[int]) -> float:
    if len(samples) == 0:
        raise ValueError("empty evaluation set")
    return per_class_accuracy(samples.labels, predict_batch(params, samples.features, table, space))


def zsl_accuracy(params: ZslParams, test_unseen: SampleSet, table: AttributeTable, split: SplitSpec) -> float:
    """Conventional ZSL: unseen test samples, search space restricted to unseen classes."""
    return per_class_top1(params, test_unseen, table, split.unseen)


def gzsl_accuracies(
    params: ZslParams, test_seen: SampleSet, test_unseen: SampleSet, table: AttributeTable, split: SplitSpec
) -> tuple[float, float]:
    """(seen, unseen) per-class accuracy with the joint seen + unseen search space."""
    space = split.all_classes
    return per_class_top1(params, test_seen, table, space), per_class_top1(params, test_unseen, table, space)


def harmonic_mean(acc_s: float, acc_u: float) -> float:
    if acc_s + acc_u == 0:
        return 0.0
    return 2 * acc_s * acc_u / (acc_s + acc_u)


def backdoor_accuracy(
    params: ZslParams, malicious_test: SampleSet, target: int, table: AttributeTable, space: Sequence[int]
) -> float:
    """Fraction of malicious test samples classified as ``target``."""
    if len(malicious_test) == 0:
        raise ValueError("empty malicious test set")
    return float(np.mean(predict_batch(params, malicious_test.features, table, space) == target))


@dataclass(eq=False)
class Evaluator:
    """Computes the accuracy columns of a RoundReport for a parameter set.

    ``backdoor_sets`` maps an attack name to ``(malicious test set, target)``;
    the CSV column carries the mean over attacks, ``extras`` each one.
    """

    table: AttributeTable
    split: SplitSpec
    test_seen: SampleSet
    test_unseen: SampleSet
    backdoor_sets: dict[str, tuple[SampleSet, int]] = field(default_factory=dict)

    def __call__(self, params: ZslParams) -> dict[str, Any]:
        acc_zsl = zsl_accuracy(params, self.test_unseen, self.table, self.split)
        acc_s, acc_u = gzsl_accuracies(params, self.test_seen, self.test_unseen, self.table, self.split)
        out: dict[str, Any] = {
            "acc_zsl": acc_zsl,
            "acc_unseen": acc_u,
            "acc_seen": acc_s,
            "acc_h": harmonic_mean(acc_s, acc_u),
        }
        if self.backdoor_sets:
            per = {
                name: backdoor_accuracy(params, mal, target, self.table, self.split.all_classes)
                for name, (mal, target) in sorted(self.backdoor_sets.items())
            }
            out["backdoor_acc"] = float(np.mean(list(per.values())))
            out["extras"] = {f"backdoor:{k}": v for k, v in per.items()}
        return out


def write_metrics_csv(reports: Sequence[RoundReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow(r.row())


def read_metrics_csv(path: str | Path) -> list[dict[str, Any]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: no rows")
        missing = set(CSV_COLUMNS) - set(reader.fieldnames)
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows = []
        for raw in reader:
            row: dict[str, Any] = {}
            for k, v in raw.items():
                if k == "scope":
                    row[k] = v
                elif v == "":
                    row[k] = None
                elif k in ("round", "n_discarded"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no rows")
    return rows
