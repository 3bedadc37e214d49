"""Server-side orchestration: client sampling, weighted aggregation, round loop."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from fedzsl import adversary
from fedzsl.data import AttributeTable
from fedzsl.evaluation import RoundReport
from fedzsl.federation.client import ClientState, LocalResult, calibrate_threshold, local_train
from fedzsl.model import Hyper, ZslParams
from fedzsl.rng import stream

log = logging.getLogger(__name__)

AGGREGATION_RULES = ("class_ratio", "uniform", "data_size")


@dataclass(frozen=True)
class AggregationConfig:
    """``class_ratio``: |Y_k| / |Y^s|; ``uniform``: FedAvg; ``data_size``: N_k / sum N.

    ``decay > 0`` gives the server step ``eta / (1 + decay * (round - 1))``.
    """

    rule: str = "class_ratio"
    eta: float = 1.0
    decay: float = 0.0
    renormalize: bool = True

    def __post_init__(self) -> None:
        if self.rule not in AGGREGATION_RULES:
            raise ValueError(f"unknown aggregation rule {self.rule!r}")
        if self.eta <= 0 or self.decay < 0:
            raise ValueError("need eta > 0 and decay >= 0")


@dataclass(frozen=True)
class RoundSchedule:
    rounds: int
    fraction: float = 1.0

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if not 0 < self.fraction <= 1:
            raise ValueError("sampling fraction must be in (0, 1]")


@dataclass(eq=False)
class FederationResult:
    reports: list[RoundReport]
    params: ZslParams
    events: list[str] = field(default_factory=list)
    sampled: list[tuple[int, ...]] = field(default_factory=list)
    n_injected: int = 0
    n_injected_discarded: int = 0


def server_lr(config: AggregationConfig, round_no: int) -> float:
    if config.decay == 0:
        return config.eta
    return config.eta / (1.0 + config.decay * (round_no - 1))


def aggregation_weights(
    clients: Sequence[ClientState], config: AggregationConfig, n_seen: int | None = None
) -> dict[int, float]:
    """Aggregation weight per sampled client, keyed by client id.

    Renormalised weights sum to one over ``clients``. Without renormalisation
    the class-ratio rule divides by ``n_seen`` (the full seen-class count).
    """
    if not clients:
        raise ValueError("no clients to weight")
    if config.rule == "uniform":
        raw = {c.client_id: 1.0 for c in clients}
    elif config.rule == "class_ratio":
        raw = {c.client_id: float(len(c.classes)) for c in clients}
    else:
        raw = {c.client_id: float(c.n_samples) for c in clients}
    if config.renormalize or config.rule != "class_ratio":
        denom = math.fsum(raw.values())
    else:
        if not n_seen:
            raise ValueError("raw class ratios need the seen-class count")
        denom = float(n_seen)
    if denom == 0:
        raise ValueError("aggregation weights sum to zero")
    return {k: v / denom for k, v in sorted(raw.items())}


def aggregate(w_t: ZslParams, updates: dict[int, ZslParams], weights: dict[int, float], eta: float) -> ZslParams:
    """``w_t + eta * sum_k p_k * delta_k``, summed in ascending client id."""
    if not updates:
        raise ValueError("no updates to aggregate")
    if math.fsum(weights[k] for k in updates) == 0:
        raise ValueError("aggregation weights sum to zero")
    total = w_t.zeros_like()
    for k in sorted(updates):
        total = total + updates[k] * weights[k]
    return w_t + total * eta


def sample_clients(active: Sequence[int], fraction: float, seed: int, round_no: int) -> tuple[int, ...]:
    """Seeded choice of ``max(1, round(fraction * n))`` active clients, ascending."""
    ids = sorted(active)
    if not ids:
        return ()
    m = max(1, int(math.floor(fraction * len(ids) + 0.5)))
    if m >= len(ids):
        return tuple(ids)
    picks = stream(seed, "sample", round_no).choice(len(ids), size=m, replace=False)
    return tuple(sorted(ids[i] for i in picks))


def run_federation(
    clients: Sequence[ClientState],
    global_params: ZslParams,
    schedule: RoundSchedule,
    agg: AggregationConfig,
    hyper: Hyper,
    sigma: np.ndarray | None,
    table: AttributeTable,
    space_pos: np.ndarray,
    evaluator: Callable[[ZslParams], dict[str, Any]] | None = None,
    *,
    seed: int,
    n_seen: int | None = None,
    threads: int = 1,
    eval_clients: bool = True,
    on_round: Callable[[int, ZslParams, dict[int, LocalResult]], None] | None = None,
) -> FederationResult:
    """Run ``schedule.rounds`` rounds of sample -> local training -> aggregation.

    Rounds are numbered from 1. Each round yields a ``global`` report for the
    aggregated model and, with ``eval_clients``, one report per trained client
    for its pre-aggregation local model.
    """
    by_id = {c.client_id: c for c in clients}
    if len(by_id) != len(clients):
        raise ValueError("duplicate client id")
    if schedule.rounds > 0 and not any(c.active(1) for c in clients):
        raise ValueError("no client is active at round 1")
    w = global_params.copy()
    result = FederationResult([], w)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for r in range(1, schedule.rounds + 1):
            active = [c.client_id for c in clients if c.active(r)]
            sampled = sample_clients(active, schedule.fraction, seed, r)
            result.sampled.append(sampled)
            if not sampled:
                msg = f"round {r}: no active client, round skipped"
                log.warning(msg)
                result.events.append(msg)
                continue
            cohort = [by_id[k] for k in sampled]
            weights = aggregation_weights(cohort, agg, n_seen)
            eta = server_lr(agg, r)
            for c in cohort:
                calibrate_threshold(c, w, hyper, seed)

            def train(c: ClientState, w_t: ZslParams = w, r: int = r, eta: float = eta) -> LocalResult:
                if c.attack is not None:
                    beta = None
                    if c.attack.spec.beta == "replace":
                        beta = adversary.replacement_beta(eta, weights[c.client_id])
                    return adversary.malicious_local_train(
                        c, w_t, hyper, sigma, table, space_pos, seed=seed, round_no=r, beta=beta
                    )
                return local_train(c, w_t, hyper, sigma, table, space_pos, seed=seed, round_no=r)

            if pool is None:
                outs = [train(c) for c in cohort]
            else:
                outs = list(pool.map(train, cohort))
            local = {o.client_id: o for o in outs}
            for o in outs:
                result.events.extend(o.warnings)
                result.n_injected += o.n_injected
                result.n_injected_discarded += o.n_injected_discarded

            w = aggregate(w, {k: o.delta for k, o in local.items()}, weights, eta)
            if not w.is_finite():
                raise FloatingPointError(f"round {r}: non-finite global parameters")

            result.reports.append(_global_report(r, w, local, evaluator, eta))
            if eval_clients:
                for k in sorted(local):
                    result.reports.append(_client_report(r, local[k], weights[k], evaluator))
            if on_round is not None:
                on_round(r, w, local)
    finally:
        if pool is not None:
            pool.shutdown()
    result.params = w
    return result


def _losses_mean(outs: Sequence[LocalResult]) -> tuple[float | None, float | None, float | None]:
    ls = [o.losses for o in outs if o.losses is not None]
    if not ls:
        return None, None, None
    return (
        math.fsum(x.sce for x in ls) / len(ls),
        math.fsum(x.kl for x in ls) / len(ls),
        math.fsum(x.con for x in ls) / len(ls),
    )


def _apply(report: RoundReport, metrics: dict[str, Any]) -> RoundReport:
    for k, v in metrics.items():
        if k == "extras":
            report.extras.update(v)
        else:
            setattr(report, k, v)
    return report


def _global_report(
    r: int, w: ZslParams, local: dict[int, LocalResult], evaluator: Callable | None, eta: float
) -> RoundReport:
    outs = [local[k] for k in sorted(local)]
    sce, kl, con = _losses_mean(outs)
    rep = RoundReport(r, "global", loss_sce=sce, loss_kl=kl, loss_con=con, n_discarded=sum(o.n_discarded for o in outs))
    rep.extras.update({"eta": eta, "sampled": tuple(sorted(local))})
    return _apply(rep, evaluator(w)) if evaluator else rep


def _client_report(r: int, out: LocalResult, weight: float, evaluator: Callable | None) -> RoundReport:
    l = out.losses
    rep = RoundReport(
        r,
        f"client:{out.client_id}",
        loss_sce=None if l is None else l.sce,
        loss_kl=None if l is None else l.kl,
        loss_con=None if l is None else l.con,
        n_discarded=out.n_discarded,
    )
    rep.extras.update(
        {"weight": weight, "n_injected": out.n_injected, "n_injected_discarded": out.n_injected_discarded}
    )
    return _apply(rep, evaluator(out.params)) if evaluator else rep
