"""Datasets, synthetic zero-shot data, CSV ingestion and client partitioning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from fedzsl.rng import stream

PARTITION_MODES = ("pccd", "pccd_imbalanced", "iid", "noniid_dirichlet", "class_ratio")


class DataError(ValueError):
    pass


@dataclass(eq=False)
class AttributeTable:
    """Per-class attribute vectors shared by every party.

    ``rows[i]`` is the attribute vector of ``class_ids[i]``; all model code
    indexes classes by row position.
    """

    class_ids: np.ndarray
    rows: np.ndarray
    _index: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] == 0:
            raise DataError("attribute table needs at least one row")
        if self.class_ids.shape != (self.rows.shape[0],):
            raise DataError("one class id per attribute row required")
        if len(set(self.class_ids.tolist())) != len(self.class_ids):
            raise DataError("duplicate class id in attribute table")
        if not np.all(np.isfinite(self.rows)):
            raise DataError("non-finite attribute value")
        zero = np.flatnonzero(~np.any(self.rows != 0.0, axis=1))
        if zero.size:
            raise DataError(f"all-zero attribute row for class {self.class_ids[zero[0]]}")
        self._index = {int(c): i for i, c in enumerate(self.class_ids)}

    @property
    def n_classes(self) -> int:
        return self.rows.shape[0]

    @property
    def d_a(self) -> int:
        return self.rows.shape[1]

    def positions(self, class_ids: Sequence[int] | np.ndarray) -> np.ndarray:
        try:
            return np.array([self._index[int(c)] for c in np.asarray(class_ids).ravel()], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"unknown class {exc.args[0]}") from None

    def row(self, class_id: int) -> np.ndarray:
        return self.rows[self.positions([class_id])[0]]

    def __contains__(self, class_id: object) -> bool:
        return int(class_id) in self._index  # type: ignore[arg-type]


@dataclass(frozen=True)
class SplitSpec:
    seen: tuple[int, ...]
    unseen: tuple[int, ...]

    def __post_init__(self) -> None:
        if set(self.seen) & set(self.unseen):
            raise DataError("seen and unseen classes overlap")
        if len(set(self.seen)) != len(self.seen) or len(set(self.unseen)) != len(self.unseen):
            raise DataError("duplicate class in split")

    @property
    def disjoint(self) -> bool:
        return not set(self.seen) & set(self.unseen)

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.seen + self.unseen))

    def check(self, table: AttributeTable) -> None:
        if set(self.all_classes) != set(table.class_ids.tolist()):
            raise DataError("split does not cover exactly the classes of the attribute table")


@dataclass(eq=False)
class SampleSet:
    """Labelled feature vectors; ``labels`` hold class ids, not row positions."""

    ids: np.ndarray
    labels: np.ndarray
    features: np.ndarray

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-d array")
        n = self.features.shape[0]
        if self.ids.shape != (n,) or self.labels.shape != (n,):
            raise DataError("ids, labels and features disagree in length")
        if len(np.unique(self.ids)) != n:
            raise DataError("sample ids must be unique")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def classes(self) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.labels))

    def subset(self, indices: Sequence[int] | np.ndarray) -> SampleSet:
        idx = np.asarray(indices, dtype=np.int64)
        return SampleSet(self.ids[idx], self.labels[idx], self.features[idx])

    def check(self, table: AttributeTable) -> None:
        table.positions(self.labels)

    @classmethod
    def empty(cls, d_in: int) -> SampleSet:
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, d_in)))


@dataclass(frozen=True)
class ClientAssignment:
    classes: tuple[int, ...]
    indices: np.ndarray


@dataclass(frozen=True)
class PartitionPlan:
    K: int
    assignments: tuple[ClientAssignment, ...]
    mode: str
    params: dict[str, Any] = field(default_factory=dict)

    def sizes(self) -> list[int]:
        return [len(a.indices) for a in self.assignments]

    def total(self) -> int:
        return sum(self.sizes())


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 30
    n_seen: int = 25
    d_a: int = 16
    d_v: int = 32
    train_per_class: int = 40
    test_per_class: int = 20
    noise: float = 0.05
    block_size: int = 5
    block_spread: float = 0.6
    attr_norm: float | None = None  # None: sqrt(d_a)
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_classes", "n_seen", "d_a", "d_v", "train_per_class", "test_per_class", "block_size"):
            if getattr(self, name) < 1:
                raise DataError(f"degenerate dimension: {name}={getattr(self, name)}")
        if self.n_seen >= self.n_classes:
            raise DataError("n_seen must be smaller than n_classes")
        if self.attr_norm is not None and self.attr_norm <= 0:
            raise DataError("attr_norm must be positive")
        if self.noise < 0 or self.block_spread < 0:
            raise DataError("noise scales must be non-negative")


@dataclass(eq=False)
class SyntheticDataset:
    table: AttributeTable
    split: SplitSpec
    train: SampleSet
    test_seen: SampleSet
    test_unseen: SampleSet
    feature_map: np.ndarray  # hidden d_v x d_a map used to render features


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Draw block-correlated attributes and rectified linear features.

    Classes in the same block share a base attribute vector plus a
    ``block_spread``-scaled perturbation; rows are then rescaled to norm ``sqrt(d_a)``
    so dot-product scores carry no per-class norm bias. A sample of class ``y`` has feature
    ``max(H @ a_y + noise * eps, 0)`` with ``H`` the hidden feature map.
    """
    spec.validate()
    rng = stream(spec.seed, "data")
    n, d_a, d_v = spec.n_classes, spec.d_a, spec.d_v
    n_blocks = math.ceil(n / spec.block_size)
    bases = rng.normal(size=(n_blocks, d_a))
    rows = bases[np.arange(n) // spec.block_size] + spec.block_spread * rng.normal(size=(n, d_a))
    norm = math.sqrt(d_a) if spec.attr_norm is None else spec.attr_norm
    rows *= norm / np.linalg.norm(rows, axis=1, keepdims=True)
    feature_map = rng.normal(size=(d_v, d_a)) / norm
    table = AttributeTable(np.arange(n), rows)

    perm = stream(spec.seed, "split").permutation(n)
    split = SplitSpec(
        seen=tuple(sorted(int(c) for c in perm[: spec.n_seen])),
        unseen=tuple(sorted(int(c) for c in perm[spec.n_seen :])),
    )
    clean = rows @ feature_map.T  # (n, d_v)

    next_id = 0

    def render(classes: Sequence[int], per_class: int) -> SampleSet:
        nonlocal next_id
        labels = np.repeat(np.asarray(classes, dtype=np.int64), per_class)
        eps = rng.normal(size=(len(labels), d_v))
        feats = np.maximum(clean[labels] + spec.noise * eps, 0.0)
        ids = np.arange(next_id, next_id + len(labels))
        next_id += len(labels)
        return SampleSet(ids, labels, feats)

    train = render(split.seen, spec.train_per_class)
    test_seen = render(split.seen, spec.test_per_class)
    test_unseen = render(split.unseen, spec.test_per_class)
    return SyntheticDataset(table, split, train, test_seen, test_unseen, feature_map)


# ---------------------------------------------------------------- CSV formats


def _fmt(x: float) -> str:
    return repr(float(x))


def _read_rows(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [r for r in reader if r]
    if header is None or not rows:
        raise DataError(f"{path}: no rows")
    return header, rows


def _parse_float(value: str, path: str | Path, line: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise DataError(f"{path}:{line}: malformed numeric field {value!r}") from None


def _parse_int(value: str, path: str | Path, line: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise DataError(f"{path}:{line}: malformed integer field {value!r}") from None


def load_attribute_table(path: str | Path, d_a: int | None = None) -> AttributeTable:
    header, rows = _read_rows(path)
    if not header or header[0] != "class_id":
        raise DataError(f"{path}: header must start with class_id")
    width = len(header) - 1
    if d_a is not None and width != d_a:
        raise DataError(f"{path}: dimension mismatch, header has {width} attributes, expected {d_a}")
    ids, vals = [], []
    for line, row in enumerate(rows, start=2):
        if len(row) != width + 1:
            raise DataError(f"{path}:{line}: dimension mismatch, expected {width + 1} fields, got {len(row)}")
        ids.append(_parse_int(row[0], path, line))
        vals.append([_parse_float(v, path, line) for v in row[1:]])
    return AttributeTable(np.array(ids), np.array(vals, dtype=np.float64).reshape(len(ids), width))


def load_feature_set(path: str | Path, table: AttributeTable, d_in: int | None = None) -> SampleSet:
    header, rows = _read_rows(path)
    if header[:2] != ["sample_id", "class_id"]:
        raise DataError(f"{path}: header must start with sample_id,class_id")
    width = len(header) - 2
    if d_in is not None and width != d_in:
        raise DataError(f"{path}: dimension mismatch, header has {width} features, expected {d_in}")
    ids, labels, feats = [], [], []
    for line, row in enumerate(rows, start=2):
        if len(row) != width + 2:
            raise DataError(f"{path}:{line}: dimension mismatch, expected {width + 2} fields, got {len(row)}")
        cid = _parse_int(row[1], path, line)
        if cid not in table:
            raise DataError(f"{path}:{line}: unknown class {cid}")
        ids.append(_parse_int(row[0], path, line))
        labels.append(cid)
        feats.append([_parse_float(v, path, line) for v in row[2:]])
    return SampleSet(np.array(ids), np.array(labels), np.array(feats, dtype=np.float64).reshape(len(ids), width))


def load_split(path: str | Path, table: AttributeTable) -> SplitSpec:
    header, rows = _read_rows(path)
    if header != ["class_id", "split"]:
        raise DataError(f"{path}: header must be class_id,split")
    seen, unseen = [], []
    for line, row in enumerate(rows, start=2):
        cid = _parse_int(row[0], path, line)
        if cid not in table:
            raise DataError(f"{path}:{line}: unknown class {cid}")
        if row[1] == "seen":
            seen.append(cid)
        elif row[1] == "unseen":
            unseen.append(cid)
        else:
            raise DataError(f"{path}:{line}: split must be seen or unseen, got {row[1]!r}")
    split = SplitSpec(tuple(sorted(seen)), tuple(sorted(unseen)))
    split.check(table)
    return split


def load_matrix(path: str | Path) -> np.ndarray:
    header, rows = _read_rows(path)
    width = len(header)
    out = []
    for line, row in enumerate(rows, start=2):
        if len(row) != width:
            raise DataError(f"{path}:{line}: dimension mismatch")
        out.append([_parse_float(v, path, line) for v in row])
    return np.array(out, dtype=np.float64)


def write_attribute_table(table: AttributeTable, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id"] + [f"a_{i}" for i in range(table.d_a)])
        for cid, row in zip(table.class_ids, table.rows):
            w.writerow([int(cid)] + [_fmt(v) for v in row])


def write_feature_set(samples: SampleSet, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "class_id"] + [f"v_{i}" for i in range(samples.d_in)])
        for sid, cid, row in zip(samples.ids, samples.labels, samples.features):
            w.writerow([int(sid), int(cid)] + [_fmt(v) for v in row])


def write_split(split: SplitSpec, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id", "split"])
        for cid in split.all_classes:
            w.writerow([cid, "seen" if cid in split.seen else "unseen"])


def write_matrix(matrix: np.ndarray, path: str | Path, prefix: str = "c") -> None:
    m = np.atleast_2d(matrix)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"{prefix}_{i}" for i in range(m.shape[1])])
        for row in m:
            w.writerow([_fmt(v) for v in row])


# --------------------------------------------------------------- partitioning


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Round ``proportions * total`` to integers summing to ``total``.

    Leftover units go to the largest fractional parts, lower index first on ties.
    """
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _indices_by_class(train: SampleSet) -> dict[int, np.ndarray]:
    return {int(c): np.flatnonzero(train.labels == c) for c in np.unique(train.labels)}


def _deal_classes(train: SampleSet, class_sets: list[list[int]], mode: str, params: dict[str, Any]) -> PartitionPlan:
    by_class = _indices_by_class(train)
    assignments = []
    for classes in class_sets:
        cls = tuple(sorted(classes))
        parts = [by_class.get(c, np.zeros(0, np.int64)) for c in cls]
        idx = np.sort(np.concatenate(parts)) if parts else np.zeros(0, np.int64)
        assignments.append(ClientAssignment(cls, idx.astype(np.int64)))
    return PartitionPlan(len(class_sets), tuple(assignments), mode, params)


def partition_pccd(train: SampleSet, seen_classes: Sequence[int], K: int, seed: int) -> PartitionPlan:
    """Deal shuffled seen classes into ``K`` disjoint, near-equal sets.

    When ``K`` does not divide the class count the first ``n % K`` clients get
    one extra class. Every sample of a class goes to the class owner.
    """
    seen = sorted(int(c) for c in seen_classes)
    if K < 1 or K > len(seen):
        raise DataError(f"cannot split {len(seen)} seen classes over K={K} clients")
    order = stream(seed, "partition").permutation(len(seen))
    shuffled = [seen[i] for i in order]
    base, extra = divmod(len(seen), K)
    sets, start = [], 0
    for k in range(K):
        size = base + (1 if k < extra else 0)
        sets.append(shuffled[start : start + size])
        start += size
    return _deal_classes(train, sets, "pccd", {"K": K, "seed": seed})


def partition_pccd_imbalanced(
    train: SampleSet, seen_classes: Sequence[int], K: int, alpha: float, min_classes: int, seed: int
) -> PartitionPlan:
    seen = sorted(int(c) for c in seen_classes)
    if K < 1 or K * min_classes > len(seen):
        raise DataError(f"infeasible min_classes={min_classes} for {len(seen)} classes over K={K} clients")
    if alpha <= 0:
        raise DataError("alpha must be positive")
    rng = stream(seed, "partition")
    counts = largest_remainder(rng.dirichlet(np.full(K, float(alpha))), len(seen))
    while counts.min() < min_classes:
        needy = int(np.flatnonzero(counts < min_classes)[0])
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[needy] += 1
    order = rng.permutation(len(seen))
    shuffled = [seen[i] for i in order]
    sets, start = [], 0
    for c in counts:
        sets.append(shuffled[start : start + int(c)])
        start += int(c)
    params = {"K": K, "alpha": alpha, "min_classes": min_classes, "seed": seed}
    return _deal_classes(train, sets, "pccd_imbalanced", params)


def partition_class_ratio(train: SampleSet, seen_classes: Sequence[int], K: int, phi: float, seed: int) -> PartitionPlan:
    """Give every client an independent random ``phi`` fraction of the seen classes.

    Class sets may overlap; overlapping classes are duplicated on each owner.
    """
    seen = sorted(int(c) for c in seen_classes)
    if not 0 < phi <= 1:
        raise DataError("phi must be in (0, 1]")
    if K < 1:
        raise DataError("K must be at least 1")
    per = max(1, round(phi * len(seen)))
    rng = stream(seed, "partition")
    sets = [[seen[i] for i in rng.choice(len(seen), size=per, replace=False)] for _ in range(K)]
    return _deal_classes(train, sets, "class_ratio", {"K": K, "phi": phi, "seed": seed})


def _from_sample_lists(train: SampleSet, lists: list[list[int]], mode: str, params: dict[str, Any]) -> PartitionPlan:
    assignments = []
    for idx in lists:
        arr = np.sort(np.asarray(idx, dtype=np.int64))
        classes = tuple(sorted(int(c) for c in np.unique(train.labels[arr]))) if arr.size else ()
        assignments.append(ClientAssignment(classes, arr))
    return PartitionPlan(len(lists), tuple(assignments), mode, params)


def partition_iid(train: SampleSet, K: int, seed: int) -> PartitionPlan:
    """Round-robin every class's shuffled samples over the clients.

    The round-robin counter carries over between classes so leftovers spread
    across clients instead of piling onto client 0.
    """
    if K < 1:
        raise DataError("K must be at least 1")
    if len(train) == 0:
        raise DataError("empty training set")
    rng = stream(seed, "partition")
    lists: list[list[int]] = [[] for _ in range(K)]
    cursor = 0
    for _, idx in sorted(_indices_by_class(train).items()):
        for i in rng.permutation(idx):
            lists[cursor % K].append(int(i))
            cursor += 1
    return _from_sample_lists(train, lists, "iid", {"K": K, "seed": seed})


def partition_noniid_dirichlet(train: SampleSet, K: int, alpha: float, seed: int) -> PartitionPlan:
    if K < 1:
        raise DataError("K must be at least 1")
    if len(train) == 0:
        raise DataError("empty training set")
    if alpha <= 0:
        raise DataError("alpha must be positive")
    rng = stream(seed, "partition")
    lists: list[list[int]] = [[] for _ in range(K)]
    for _, idx in sorted(_indices_by_class(train).items()):
        counts = largest_remainder(rng.dirichlet(np.full(K, float(alpha))), len(idx))
        shuffled = rng.permutation(idx)
        start = 0
        for k, c in enumerate(counts):
            lists[k].extend(int(i) for i in shuffled[start : start + c])
            start += c
    return _from_sample_lists(train, lists, "noniid_dirichlet", {"K": K, "alpha": alpha, "seed": seed})


def subsample_ratio(plan: PartitionPlan, train: SampleSet, rho: float, seed: int) -> PartitionPlan:
    """Keep ``ceil(rho * n)`` samples of every (client, class) cell."""
    if not 0 < rho <= 1:
        raise DataError(f"rho must be in (0, 1], got {rho}")
    if rho == 1:
        return plan
    rng = stream(seed, "subsample")
    assignments = []
    for a in plan.assignments:
        kept = []
        labels = train.labels[a.indices]
        for c in np.unique(labels):
            cell = a.indices[labels == c]
            take = math.ceil(rho * len(cell))
            kept.append(rng.permutation(cell)[:take])
        idx = np.sort(np.concatenate(kept)) if kept else np.zeros(0, np.int64)
        assignments.append(ClientAssignment(a.classes, idx.astype(np.int64)))
    return PartitionPlan(plan.K, tuple(assignments), plan.mode, {**plan.params, "rho": rho})


def check_plan(plan: PartitionPlan, train: SampleSet, seen_classes: Sequence[int]) -> None:
    """Raise DataError when a plan breaks its mode's invariants."""
    if len(plan.assignments) != plan.K:
        raise DataError("assignment count differs from K")
    if plan.mode != "class_ratio":
        flat = np.concatenate([a.indices for a in plan.assignments]) if plan.K else np.zeros(0)
        if len(np.unique(flat)) != len(flat):
            raise DataError("sample assigned to more than one client")
    for a in plan.assignments:
        if a.indices.size and not set(train.labels[a.indices].tolist()) <= set(a.classes):
            raise DataError("client data outside its class set")
    if plan.mode in ("pccd", "pccd_imbalanced"):
        union: set[int] = set()
        for a in plan.assignments:
            if union & set(a.classes):
                raise DataError("class sets overlap")
            union |= set(a.classes)
        if union != {int(c) for c in seen_classes}:
            raise DataError("class sets do not cover the seen classes")
    if plan.mode == "pccd_imbalanced":
        floor = plan.params.get("min_classes", 2)
        if any(len(a.classes) < floor for a in plan.assignments):
            raise DataError("client below min_classes")
