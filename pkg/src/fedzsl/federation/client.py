"""Client-side local training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

import numpy as np

from fedzsl.data import AttributeTable, SampleSet
from fedzsl.defense import FmdConfig, auto_threshold, feature_magnitudes, fmd_filter
from fedzsl.model import Hyper, LossBreakdown, ZslParams, encode, grad_positions, sgd_step
from fedzsl.rng import stream

if TYPE_CHECKING:
    from fedzsl.adversary import Attack

log = logging.getLogger(__name__)

# (features, label positions, rng) -> (features, label positions, malicious mask)
Injector = Callable[[np.ndarray, np.ndarray, np.random.Generator], tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass(eq=False)
class ClientState:
    client_id: int
    classes: tuple[int, ...]
    data: SampleSet
    fmd: FmdConfig = field(default_factory=FmdConfig)
    attack: Attack | None = None
    join_round: int = 1
    suspend_round: int | None = None
    fmd_threshold: float | None = None
    momentum: ZslParams | None = None
    space_pos: np.ndarray | None = None  # overrides the run-wide SCE space

    def __post_init__(self) -> None:
        if len(self.data) and not set(self.data.classes()) <= set(self.classes):
            raise ValueError(f"client {self.client_id}: data classes outside its class set")

    def active(self, round_no: int) -> bool:
        if round_no < self.join_round:
            return False
        return self.suspend_round is None or round_no < self.suspend_round

    @property
    def n_samples(self) -> int:
        return len(self.data)

    def threshold(self) -> float | None:
        if self.fmd.mode == "fixed":
            return self.fmd.threshold
        if self.fmd.mode == "auto":
            if self.fmd_threshold is None:
                raise RuntimeError(f"client {self.client_id}: auto FMD threshold not calibrated")
            return self.fmd_threshold
        return None


@dataclass(eq=False)
class LocalResult:
    client_id: int
    delta: ZslParams
    params: ZslParams
    losses: LossBreakdown | None
    n_steps: int = 0
    n_discarded: int = 0
    n_injected: int = 0
    n_injected_discarded: int = 0
    n_empty_batches: int = 0
    warnings: list[str] = field(default_factory=list)


def calibrate_threshold(client: ClientState, params: ZslParams, hyper: Hyper, seed: int) -> float | None:
    """Set the auto-mode threshold from warmup batches of the client's own data.

    Magnitudes come from ``params``' encoder; the local data is presumed clean.
    No-op unless the client runs auto FMD without a threshold yet.
    """
    if client.fmd.mode != "auto" or client.fmd_threshold is not None:
        return client.fmd_threshold
    if client.n_samples == 0:
        raise ValueError(f"client {client.client_id}: empty warmup")
    order = stream(seed, "warmup", client.client_id).permutation(client.n_samples)
    take = order[: client.fmd.warmup_batches * hyper.batch_size]
    mags = feature_magnitudes(encode(params, client.data.features[take]))
    client.fmd_threshold = auto_threshold(mags, client.fmd.c)
    return client.fmd_threshold


def local_train(
    client: ClientState,
    global_params: ZslParams,
    hyper: Hyper,
    sigma: np.ndarray | None,
    table: AttributeTable,
    space_pos: np.ndarray,
    *,
    seed: int,
    round_no: int,
    injector: Injector | None = None,
    inject_rng: np.random.Generator | None = None,
    beta: float = 1.0,
) -> LocalResult:
    """Run ``local_epochs`` of mini-batch SGD from ``global_params``.

    Each batch is optionally poisoned by ``injector``, then screened by the
    client's FMD threshold (computed on the current local encoder), then used
    for one momentum step. Returns ``beta * (local - global)``.
    """
    params = global_params.copy()
    momentum = params.zeros_like()
    client.momentum = momentum
    X_all = client.data.features
    pos_all = table.positions(client.data.labels)
    n = len(X_all)
    threshold = client.threshold()
    if client.space_pos is not None:
        space_pos = client.space_pos
    rng = stream(seed, "shuffle", client.client_id, round_no)
    res = LocalResult(client.client_id, params.zeros_like(), params, None)
    sums = np.zeros(4)

    for _ in range(hyper.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            X, pos = X_all[idx], pos_all[idx]
            malicious = np.zeros(len(idx), dtype=bool)
            if injector is not None:
                X, pos, malicious = injector(X, pos, inject_rng)
                res.n_injected += int(malicious.sum())
            if threshold is not None:
                kept, dropped = fmd_filter(encode(params, X), threshold)
                res.n_discarded += len(dropped)
                res.n_injected_discarded += int(malicious[dropped].sum())
                if len(kept) == 0:
                    res.n_empty_batches += 1
                    continue
                X, pos = X[kept], pos[kept]
            g, losses = grad_positions(params, X, pos, table, sigma, hyper, space_pos)
            sgd_step(params, momentum, g.params, hyper)
            res.n_steps += 1
            sums += (losses.total, losses.sce, losses.kl, losses.con)

    if res.n_steps:
        res.losses = LossBreakdown(*(sums / res.n_steps))
    elif res.n_empty_batches:
        msg = f"client {client.client_id} round {round_no}: every batch discarded by FMD, zero update"
        log.warning(msg)
        res.warnings.append(msg)
    res.delta = (params - global_params) * beta
    return res
