"""End-to-end run: data -> partition -> similarity -> federation -> artifacts."""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from fedzsl import __version__
from fedzsl.adversary import Attack, estimate_feature_map, make_malicious_set
from fedzsl.config import ConfigError, RunConfig, resolve_output_dir
from fedzsl.data import (
    AttributeTable,
    PartitionPlan,
    SampleSet,
    SplitSpec,
    generate_synthetic,
    load_attribute_table,
    load_feature_set,
    load_split,
    partition_class_ratio,
    partition_iid,
    partition_noniid_dirichlet,
    partition_pccd,
    partition_pccd_imbalanced,
    subsample_ratio,
    write_matrix,
)
from fedzsl.defense import feature_magnitudes
from fedzsl.evaluation import Evaluator, write_metrics_csv
from fedzsl.federation import ClientState, FederationResult, LocalResult, run_federation
from fedzsl.glasso import ConvergenceWarning, SimilarityEstimate, estimate_similarity
from fedzsl.model import ZslParams, init_params, save_params

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
METRICS = "metrics.csv"
MODEL = "model.npz"
MANIFEST_FORMAT = "fedzsl-run/1"


@dataclass(eq=False)
class Materials:
    """Everything a run needs before the first round."""

    table: AttributeTable
    split: SplitSpec
    train: SampleSet
    test_seen: SampleSet
    test_unseen: SampleSet
    plan: PartitionPlan
    similarity: SimilarityEstimate
    clients: list[ClientState]
    attacks: dict[int, Attack]
    evaluator: Evaluator
    init: ZslParams


@dataclass(eq=False)
class ExperimentResult:
    config: RunConfig
    materials: Materials
    federation: FederationResult
    output_dir: Path | None = None
    manifest: dict[str, Any] = field(default_factory=dict)

    @property
    def reports(self):
        return self.federation.reports

    def global_reports(self):
        return [r for r in self.federation.reports if r.scope == "global"]


def load_dataset(cfg: RunConfig) -> tuple[AttributeTable, SplitSpec, SampleSet, SampleSet, SampleSet]:
    if cfg.dataset.files is not None:
        f = cfg.dataset.files
        table = load_attribute_table(f.attributes)
        split = load_split(f.split, table)
        train = load_feature_set(f.train, table)
        d_in = train.d_in
        test_seen = load_feature_set(f.test_seen, table, d_in)
        test_unseen = load_feature_set(f.test_unseen, table, d_in)
        return table, split, train, test_seen, test_unseen
    ds = generate_synthetic(cfg.dataset.synthetic)
    return ds.table, ds.split, ds.train, ds.test_seen, ds.test_unseen


def build_partition(cfg: RunConfig, train: SampleSet, split: SplitSpec) -> PartitionPlan:
    p, seed = cfg.partition, cfg.seed
    if p.mode == "pccd":
        plan = partition_pccd(train, split.seen, p.K, seed)
    elif p.mode == "pccd_imbalanced":
        plan = partition_pccd_imbalanced(train, split.seen, p.K, p.alpha, p.min_classes, seed)
    elif p.mode == "class_ratio":
        assert p.phi is not None
        plan = partition_class_ratio(train, split.seen, p.K, p.phi, seed)
    elif p.mode == "iid":
        plan = partition_iid(train, p.K, seed)
    else:
        plan = partition_noniid_dirichlet(train, p.K, p.alpha, seed)
    if p.rho < 1:
        plan = subsample_ratio(plan, train, p.rho, seed)
    return plan


def prepare(cfg: RunConfig) -> Materials:
    table, split, train, test_seen, test_unseen = load_dataset(cfg)
    split.check(table)
    plan = build_partition(cfg, train, split)

    c = cfg.card
    with warnings.catch_warnings():
        warnings.simplefilter("error" if c.fatal_nonconvergence else "default", ConvergenceWarning)
        try:
            sim = estimate_similarity(table, c.delta, tol=c.tol, max_iter=c.max_iter, penalize_diagonal=c.penalize_diagonal)
        except ConvergenceWarning as exc:
            raise RuntimeError(f"graphical lasso did not converge: {exc}") from None

    sched = cfg.schedule
    clients = [
        ClientState(
            k,
            a.classes,
            train.subset(a.indices),
            fmd=cfg.defense,
            join_round=sched.joins.get(k, 1),
            suspend_round=sched.suspensions.get(k),
        )
        for k, a in enumerate(plan.assignments)
    ]
    if cfg.training.sce_space == "local":
        for cl in clients:
            cl.space_pos = np.unique(table.positions(cl.classes)) if cl.classes else None

    attacks: dict[int, Attack] = {}
    backdoor_sets: dict[str, tuple[SampleSet, int]] = {}
    if cfg.attacks:
        clean_median = float(np.median(feature_magnitudes(train.features)))
        fmap = estimate_feature_map(train, table)
        for i, ac in enumerate(cfg.attacks):
            target = min(split.seen) if ac.target is None else ac.target
            if target not in table:
                raise ConfigError(f"attacks[{i}].target: class {target} does not exist")
            spec = ac.spec(target)
            mal_train, mal_test = make_malicious_set(
                spec,
                train.d_in,
                table,
                cfg.seed,
                clean_median=clean_median,
                feature_map=fmap,
                id_offset=10**9 + 10**6 * ac.client,
                stream_key=ac.client,
            )
            attacks[ac.client] = clients[ac.client].attack = Attack(spec, mal_train, mal_test)
            backdoor_sets[f"client{ac.client}:{spec.kind}"] = (mal_test, target)

    d_in = train.d_in
    d_v = cfg.training.d_v or d_in
    init = init_params(d_in, d_v, table.d_a, cfg.seed, cfg.training.init_scale)
    evaluator = Evaluator(table, split, test_seen, test_unseen, backdoor_sets)
    return Materials(table, split, train, test_seen, test_unseen, plan, sim, clients, attacks, evaluator, init)


def space_positions(cfg: RunConfig, m: Materials) -> np.ndarray:
    if cfg.training.sce_space == "all":
        return np.arange(m.table.n_classes)
    return np.unique(m.table.positions(m.split.seen))


def _software() -> dict[str, str]:
    return {"fedzsl": __version__, "python": platform.python_version(), "numpy": np.__version__}


def _write_json(path: Path, payload: dict[str, Any]) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_experiment(
    cfg: RunConfig,
    *,
    output_dir: str | Path | None = None,
    write: bool = True,
    threads: int = 1,
    on_round: Callable[[int, ZslParams, dict[int, LocalResult]], None] | None = None,
    materials: Materials | None = None,
) -> ExperimentResult:
    """Run one configured experiment.

    With ``write`` the output directory receives ``manifest.json`` (written
    before training and finalised after), ``metrics.csv`` and ``model.npz``.
    """
    out = resolve_output_dir(cfg, output_dir) if write else None
    manifest: dict[str, Any] = {
        "format": MANIFEST_FORMAT,
        "status": "running",
        "config": cfg.to_dict(),
        "software": _software(),
        "seed_rule": "PCG64(SeedSequence([seed, crc32(purpose), *keys]))",
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / MANIFEST, manifest)

    m = materials if materials is not None else prepare(cfg)
    fed = run_federation(
        m.clients,
        m.init,
        cfg.round_schedule(),
        cfg.aggregation(),
        cfg.hyper(),
        m.similarity.Sigma,
        m.table,
        space_positions(cfg, m),
        m.evaluator,
        seed=cfg.seed,
        n_seen=len(m.split.seen),
        threads=threads,
        eval_clients=cfg.training.eval_clients,
        on_round=on_round,
    )
    manifest.update(
        {
            "status": "complete",
            "glasso": {
                "n_iter": m.similarity.n_iter,
                "residual": m.similarity.residual,
                "converged": m.similarity.converged,
            },
            "fmd_thresholds": {str(c.client_id): c.fmd_threshold for c in m.clients if c.fmd_threshold is not None},
            "n_injected": fed.n_injected,
            "n_injected_discarded": fed.n_injected_discarded,
            "events": fed.events,
        }
    )
    if out is not None:
        write_metrics_csv(fed.reports, out / METRICS)
        save_params(fed.params, out / MODEL)
        outputs = {"metrics": METRICS, "model": MODEL}
        if cfg.card.dump:
            for name, mat in (("S", m.similarity.S), ("Theta", m.similarity.Theta), ("Sigma", m.similarity.Sigma)):
                write_matrix(mat, out / f"glasso_{name}.csv")
                outputs[f"glasso_{name}"] = f"glasso_{name}.csv"
        manifest["outputs"] = outputs
        manifest["metrics_sha256"] = hashlib.sha256((out / METRICS).read_bytes()).hexdigest()
        _write_json(out / MANIFEST, manifest)
    return ExperimentResult(cfg, m, fed, out, manifest)
