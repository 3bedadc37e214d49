"""Backdoor attacks by batch poisoning and model replacement.

Three synthetic attack kinds stand in for image backdoors, ordered by how
strongly the malicious features correlate with the attribute manifold:

``background``
    rectified small noise; magnitude at most ``0.05 * clean median``.
``style``
    ``rect(0.3 * H @ a_y' + noise)`` for one random non-target class ``y'``.
``object``
    ``rect(H @ a_y'' + noise)`` for the class ``y''`` whose attributes are
    closest (cosine) to the target's.

All malicious samples carry the target label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedzsl.data import AttributeTable, SampleSet
from fedzsl.evaluation import backdoor_accuracy
from fedzsl.federation.client import ClientState, LocalResult, local_train
from fedzsl.model import Hyper, ZslParams
from fedzsl.rng import stream

ATTACK_KINDS = ("background", "style", "object")
WINDOW_MODES = ("single", "multi", "all_after")
BACKGROUND_FRACTION = 0.05
STYLE_SCALE = 0.3

__all__ = [
    "Attack",
    "AttackSpec",
    "AttackWindow",
    "backdoor_accuracy",
    "estimate_feature_map",
    "inject_into_batch",
    "make_malicious_set",
    "malicious_local_train",
    "replacement_beta",
]


@dataclass(frozen=True)
class AttackWindow:
    mode: str = "single"
    start: int = 20
    end: int | None = None  # inclusive, multi mode only

    def __post_init__(self) -> None:
        if self.mode not in WINDOW_MODES:
            raise ValueError(f"unknown attack window mode {self.mode!r}")
        if self.start < 1:
            raise ValueError("attack rounds are 1-based")
        if self.mode == "multi" and (self.end is None or self.end < self.start):
            raise ValueError("multi-round attack needs end >= start")

    def active(self, round_no: int) -> bool:
        if self.mode == "single":
            return round_no == self.start
        if self.mode == "multi":
            assert self.end is not None
            return self.start <= round_no <= self.end
        return round_no >= self.start


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    target: int
    beta: float | str = 1.0  # a number, or "replace" for 1 / (eta * p)
    window: AttackWindow = AttackWindow()
    p_rep: float = 0.5
    sigma: float = 0.05
    size: int = 50
    test_size: int = 50
    noise: float = 0.05

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if isinstance(self.beta, str):
            if self.beta != "replace":
                raise ValueError("beta must be a number or 'replace'")
        elif self.beta < 1:
            raise ValueError("beta must be >= 1")
        if not 0 < self.p_rep <= 1:
            raise ValueError("p_rep must be in (0, 1]")
        if self.size < 1 or self.test_size < 1:
            raise ValueError("malicious set sizes must be >= 1")
        if self.sigma < 0 or self.noise < 0:
            raise ValueError("noise scales must be non-negative")


@dataclass(eq=False)
class Attack:
    spec: AttackSpec
    train: SampleSet
    test: SampleSet


def estimate_feature_map(train: SampleSet, table: AttributeTable) -> np.ndarray:
    """Least-squares ``H`` (d_in x d_a) with class-mean features ~ H @ a_y."""
    classes = np.array(train.classes())
    means = np.stack([train.features[train.labels == c].mean(axis=0) for c in classes])
    A = table.rows[table.positions(classes)]
    Ht, *_ = np.linalg.lstsq(A, means, rcond=None)
    return Ht.T


def _nearest_class(table: AttributeTable, target: int) -> int:
    rows = table.rows / np.linalg.norm(table.rows, axis=1, keepdims=True)
    t = table.positions([target])[0]
    sims = rows @ rows[t]
    sims[t] = -np.inf
    return int(table.class_ids[int(np.argmax(sims))])


def make_malicious_set(
    spec: AttackSpec,
    d_in: int,
    table: AttributeTable,
    seed: int,
    *,
    clean_median: float,
    feature_map: np.ndarray | None = None,
    id_offset: int = 10**9,
    stream_key: int = 0,
) -> tuple[SampleSet, SampleSet]:
    """Generate ``(train, test)`` malicious sets labelled with the target.

    ``clean_median`` is the median feature magnitude of clean training data and
    sets the background scale. ``style``/``object`` need ``feature_map``.
    """
    if spec.target not in table:
        raise ValueError(f"target class {spec.target} not in attribute table")
    rng = stream(seed, "malicious", stream_key)
    n = spec.size + spec.test_size
    if spec.kind == "background":
        raw = np.maximum(rng.normal(size=(n, d_in)), 0.0)
        mags = raw.sum(axis=1, keepdims=True)
        goal = BACKGROUND_FRACTION * clean_median * rng.uniform(0.5, 1.0, size=(n, 1))
        feats = np.where(mags > 0, raw * goal / np.where(mags > 0, mags, 1.0), 0.0)
    else:
        if feature_map is None or feature_map.shape != (d_in, table.d_a):
            raise ValueError(f"{spec.kind} attack needs a {d_in}x{table.d_a} feature map")
        if spec.kind == "style":
            others = [int(c) for c in table.class_ids if int(c) != spec.target]
            source = others[int(rng.integers(len(others)))]
            base = STYLE_SCALE * feature_map @ table.row(source)
        else:
            base = feature_map @ table.row(_nearest_class(table, spec.target))
        feats = np.maximum(base[None, :] + spec.noise * rng.normal(size=(n, d_in)), 0.0)
    ids = np.arange(id_offset, id_offset + n)
    labels = np.full(n, spec.target, dtype=np.int64)
    full = SampleSet(ids, labels, feats)
    return full.subset(np.arange(spec.size)), full.subset(np.arange(spec.size, n))


def inject_into_batch(
    X: np.ndarray,
    labels: np.ndarray,
    malicious_features: np.ndarray,
    target: int,
    p_rep: float,
    sigma: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Replace each slot with probability ``p_rep`` by a noisy malicious sample.

    Returns ``(features, labels, replaced_mask)``; the batch size is unchanged
    and injected features are re-rectified after the Gaussian noise.
    """
    B = X.shape[0]
    replaced = rng.random(B) < p_rep
    k = int(replaced.sum())
    picks = rng.integers(0, len(malicious_features), size=k)
    noise = rng.normal(size=(k, X.shape[1]))
    X = X.copy()
    labels = np.array(labels, copy=True)
    X[replaced] = np.maximum(malicious_features[picks] + sigma * noise, 0.0)
    labels[replaced] = target
    return X, labels, replaced


def replacement_beta(eta: float, weight: float) -> float:
    """Scale that turns ``w + eta * p * beta * (w_hat - w)`` into ``w_hat``."""
    return 1.0 / (eta * weight)


def malicious_local_train(
    client: ClientState,
    global_params: ZslParams,
    hyper: Hyper,
    sigma: np.ndarray | None,
    table: AttributeTable,
    space_pos: np.ndarray,
    *,
    seed: int,
    round_no: int,
    beta: float | None = None,
) -> LocalResult:
    """Local training on clean plus injected malicious data, scaled by ``beta``.

    Outside the attack window this is exactly honest ``local_train``. ``beta``
    overrides the spec's value (needed when the spec asks for "replace").
    """
    attack = client.attack
    if attack is None:
        raise ValueError(f"client {client.client_id} is not malicious")
    spec = attack.spec
    if not spec.window.active(round_no):
        return local_train(client, global_params, hyper, sigma, table, space_pos, seed=seed, round_no=round_no)
    if beta is None:
        if isinstance(spec.beta, str):
            raise ValueError("beta='replace' must be resolved by the server")
        beta = float(spec.beta)
    target_pos = int(table.positions([spec.target])[0])
    mal = attack.train.features

    def injector(X: np.ndarray, pos: np.ndarray, rng: np.random.Generator):
        return inject_into_batch(X, pos, mal, target_pos, spec.p_rep, spec.sigma, rng)

    return local_train(
        client,
        global_params,
        hyper,
        sigma,
        table,
        space_pos,
        seed=seed,
        round_no=round_no,
        injector=injector,
        inject_rng=stream(seed, "inject", client.client_id, round_no),
        beta=beta,
    )
