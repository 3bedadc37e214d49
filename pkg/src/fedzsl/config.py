"""Run configuration: a single YAML (or JSON) document with one block per concern.

Schema (every key optional; defaults shown)::

    seed: 0
    output_dir: runs/fedzsl          # FEDZSL_OUTPUT_DIR overrides
    dataset:
      synthetic: {n_classes: 30, n_seen: 25, d_a: 16, d_v: 32, train_per_class: 40,
                  test_per_class: 20, noise: 0.05, block_size: 5, block_spread: 0.6,
                  attr_norm: null, seed: <master seed>}
      # or, instead of synthetic:
      files: {attributes: a.csv, split: split.csv, train: train.csv,
              test_seen: test_seen.csv, test_unseen: test_unseen.csv}
    partition: {mode: pccd, K: 10, phi: null, rho: 1.0, alpha: 0.5, min_classes: 2}
    training: {rounds: 50, lr: 0.01, momentum: 0.9, weight_decay: 1.0e-5, batch_size: 64,
               local_epochs: 2, train_encoder: true, eta: 1.0, aggregation: class_ratio,
               decay: 0.0, renormalize: true, d_v: null, init_scale: 0.1, eval_clients: true,
               sce_space: seen}
    card: {mu: 3.0, tau: 10.0, delta: 0.01, tol: 1.0e-5, max_iter: 500,
           penalize_diagonal: true, fatal_nonconvergence: false, dump: false}
    defense: {mode: "off", threshold: 0.0, c: 0.1, warmup_batches: 3}
    attacks:
      - {client: 0, kind: background, target: null, beta: replace,
         window: {mode: single, start: 20, end: null},
         p_rep: 0.5, sigma: 0.05, size: 50, test_size: 50, noise: 0.05}
    schedule: {fraction: 1.0, joins: {}, suspensions: {}}   # client id -> round

A run manifest (``{"config": {...}, ...}``) is accepted wherever a config is.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from fedzsl.adversary import ATTACK_KINDS, AttackSpec, AttackWindow
from fedzsl.data import PARTITION_MODES, SyntheticSpec
from fedzsl.defense import FmdConfig
from fedzsl.federation import AggregationConfig, RoundSchedule
from fedzsl.model import Hyper

OUTPUT_ENV = "FEDZSL_OUTPUT_DIR"
SCE_SPACES = ("seen", "local", "all")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataFiles:
    attributes: str
    split: str
    train: str
    test_seen: str
    test_unseen: str


@dataclass(frozen=True)
class DatasetConfig:
    synthetic: SyntheticSpec | None = None
    files: DataFiles | None = None


@dataclass(frozen=True)
class PartitionConfig:
    mode: str = "pccd"
    K: int = 10
    phi: float | None = None
    rho: float = 1.0
    alpha: float = 0.5
    min_classes: int = 2


@dataclass(frozen=True)
class TrainingConfig:
    rounds: int = 50
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64
    local_epochs: int = 2
    train_encoder: bool = True
    eta: float = 1.0
    aggregation: str = "class_ratio"
    decay: float = 0.0
    renormalize: bool = True
    d_v: int | None = None  # encoder width; None keeps the input width
    init_scale: float = 0.1
    eval_clients: bool = True
    sce_space: str = "seen"  # seen | local | all


@dataclass(frozen=True)
class CardConfig:
    mu: float = 3.0
    tau: float = 10.0
    delta: float = 0.01
    tol: float = 1e-5
    max_iter: int = 500
    penalize_diagonal: bool = True
    fatal_nonconvergence: bool = False
    dump: bool = False  # write S / Theta / Sigma CSVs next to the metrics


@dataclass(frozen=True)
class AttackConfig:
    client: int
    kind: str
    target: int | None = None  # None: lowest seen class id
    beta: float | str = 1.0
    window: AttackWindow = AttackWindow()
    p_rep: float = 0.5
    sigma: float = 0.05
    size: int = 50
    test_size: int = 50
    noise: float = 0.05

    def spec(self, target: int) -> AttackSpec:
        return AttackSpec(
            self.kind, target, self.beta, self.window, self.p_rep, self.sigma, self.size, self.test_size, self.noise
        )


@dataclass(frozen=True)
class ScheduleConfig:
    fraction: float = 1.0
    joins: dict[int, int] = field(default_factory=dict)
    suspensions: dict[int, int] = field(default_factory=dict)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/fedzsl"
    dataset: DatasetConfig = DatasetConfig()
    partition: PartitionConfig = PartitionConfig()
    training: TrainingConfig = TrainingConfig()
    card: CardConfig = CardConfig()
    defense: FmdConfig = FmdConfig()
    attacks: tuple[AttackConfig, ...] = ()
    schedule: ScheduleConfig = ScheduleConfig()

    def hyper(self) -> Hyper:
        t = self.training
        return Hyper(
            lr=t.lr,
            momentum=t.momentum,
            weight_decay=t.weight_decay,
            mu=self.card.mu,
            tau=self.card.tau,
            batch_size=t.batch_size,
            local_epochs=t.local_epochs,
            train_encoder=t.train_encoder,
        )

    def aggregation(self) -> AggregationConfig:
        t = self.training
        return AggregationConfig(t.aggregation, t.eta, t.decay, t.renormalize)

    def round_schedule(self) -> RoundSchedule:
        return RoundSchedule(self.training.rounds, self.schedule.fraction)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["attacks"] = [dict(a) for a in out["attacks"]]
        return out


# ------------------------------------------------------------------ loading


def _coerce(value: Any, hint: Any, where: str) -> Any:
    """Check a scalar against a field annotation; ints widen to float."""
    options = typing.get_args(hint) if isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union else (hint,)
    if value is None:
        if type(None) in options:
            return None
        raise ConfigError(f"{where}: value required")
    for opt in options:
        if opt is bool and isinstance(value, bool):
            return value
        if opt is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if opt is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if opt is str and isinstance(value, str):
            return value
        if opt not in (bool, int, float, str, type(None)):
            return value  # structured fields are built by the caller
    names = "/".join(getattr(o, "__name__", str(o)) for o in options if o is not type(None))
    raise ConfigError(f"{where}: expected {names}, got {value!r}")


def _build(cls: type, raw: Any, where: str) -> Any:
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(str, unknown))}")
    hints = typing.get_type_hints(cls)
    raw = {k: _coerce(v, hints[k], f"{where}.{k}") for k, v in raw.items()}
    try:
        return cls(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _int_map(raw: Any, where: str) -> dict[int, int]:
    if raw is None:
        return {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where}: expected a mapping of client id to round")
    try:
        return {int(k): int(v) for k, v in sorted(raw.items(), key=lambda kv: int(kv[0]))}
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: client ids and rounds must be integers") from None


def config_from_dict(raw: Mapping[str, Any]) -> RunConfig:
    """Build and validate a RunConfig from plain data; manifests are unwrapped."""
    if not isinstance(raw, Mapping):
        raise ConfigError("config: expected a mapping at top level")
    if "config" in raw and isinstance(raw["config"], Mapping):
        raw = raw["config"]
    raw = dict(raw)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed: must be a non-negative integer")

    ds_raw = raw.get("dataset") or {}
    if not isinstance(ds_raw, Mapping):
        raise ConfigError("dataset: expected a mapping")
    unknown = sorted(set(ds_raw) - {"synthetic", "files"})
    if unknown:
        raise ConfigError(f"dataset: unknown key(s) {', '.join(unknown)}")
    if ds_raw.get("synthetic") is not None and ds_raw.get("files") is not None:
        raise ConfigError("dataset: give either synthetic or files, not both")
    if ds_raw.get("files") is not None:
        dataset = DatasetConfig(files=_build(DataFiles, ds_raw["files"], "dataset.files"))
    else:
        syn = dict(ds_raw.get("synthetic") or {})
        syn.setdefault("seed", seed)
        dataset = DatasetConfig(synthetic=_build(SyntheticSpec, syn, "dataset.synthetic"))

    attacks = []
    raw_attacks = raw.get("attacks") or []
    if not isinstance(raw_attacks, list):
        raise ConfigError("attacks: expected a list")
    for i, a in enumerate(raw_attacks):
        if not isinstance(a, Mapping):
            raise ConfigError(f"attacks[{i}]: expected a mapping")
        a = dict(a)
        a["window"] = _build(AttackWindow, a.get("window"), f"attacks[{i}].window")
        if "client" not in a or "kind" not in a:
            raise ConfigError(f"attacks[{i}]: client and kind are required")
        attacks.append(_build(AttackConfig, a, f"attacks[{i}]"))

    sched_raw = dict(raw.get("schedule") or {})
    sched_raw["joins"] = _int_map(sched_raw.get("joins"), "schedule.joins")
    sched_raw["suspensions"] = _int_map(sched_raw.get("suspensions"), "schedule.suspensions")

    cfg = RunConfig(
        seed=seed,
        output_dir=str(raw.get("output_dir", RunConfig.output_dir)),
        dataset=dataset,
        partition=_build(PartitionConfig, raw.get("partition"), "partition"),
        training=_build(TrainingConfig, raw.get("training"), "training"),
        card=_build(CardConfig, raw.get("card"), "card"),
        defense=_build(FmdConfig, raw.get("defense"), "defense"),
        attacks=tuple(attacks),
        schedule=_build(ScheduleConfig, sched_raw, "schedule"),
    )
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Cross-field checks; raises ConfigError before any computation."""

    def check(ok: bool, msg: str) -> None:
        if not ok:
            raise ConfigError(msg)

    p, t, s = cfg.partition, cfg.training, cfg.schedule
    check(p.mode in PARTITION_MODES, f"partition.mode: unknown mode {p.mode!r}")
    check(p.K >= 1, "partition.K: must be at least 1")
    check(0 < p.rho <= 1, "partition.rho: must be in (0, 1]")
    check(p.alpha > 0, "partition.alpha: must be positive")
    check(p.min_classes >= 1, "partition.min_classes: must be at least 1")
    if p.mode == "class_ratio":
        check(p.phi is not None and 0 < p.phi <= 1, "partition.phi: class_ratio mode needs phi in (0, 1]")
    syn = cfg.dataset.synthetic
    if syn is not None and p.mode == "pccd":
        check(p.K <= syn.n_seen, f"partition.K: {p.K} clients exceed {syn.n_seen} seen classes")
    if syn is not None and p.mode == "pccd_imbalanced":
        check(p.K * p.min_classes <= syn.n_seen, f"partition.min_classes: {p.K} x {p.min_classes} exceeds {syn.n_seen} seen classes")
    check(t.sce_space in SCE_SPACES, f"training.sce_space: expected one of {', '.join(SCE_SPACES)}")
    check(t.rounds >= 0, "training.rounds: must be non-negative")
    check(t.d_v is None or t.d_v >= 1, "training.d_v: must be positive")
    check(t.init_scale > 0, "training.init_scale: must be positive")
    check(t.eta > 0, "training.eta: must be positive")
    check(cfg.card.delta >= 0, "card.delta: must be non-negative")
    check(cfg.card.tol > 0 and cfg.card.max_iter >= 1, "card: need tol > 0 and max_iter >= 1")
    try:
        cfg.hyper()
        cfg.aggregation()
        cfg.round_schedule()
    except ValueError as exc:
        raise ConfigError(f"training: {exc}") from None

    seen_clients = set()
    for i, a in enumerate(cfg.attacks):
        check(0 <= a.client < p.K, f"attacks[{i}].client: id {a.client} outside 0..{p.K - 1}")
        check(a.client not in seen_clients, f"attacks[{i}].client: client {a.client} attacked twice")
        seen_clients.add(a.client)
        check(a.kind in ATTACK_KINDS, f"attacks[{i}].kind: unknown kind {a.kind!r}")
        if syn is not None and a.target is not None:
            check(0 <= a.target < syn.n_classes, f"attacks[{i}].target: class {a.target} does not exist")
        try:
            a.spec(0 if a.target is None else a.target)
        except ValueError as exc:
            raise ConfigError(f"attacks[{i}]: {exc}") from None

    for name, mapping in (("joins", s.joins), ("suspensions", s.suspensions)):
        for cid, r in mapping.items():
            check(0 <= cid < p.K, f"schedule.{name}: client {cid} outside 0..{p.K - 1}")
            check(r >= 1, f"schedule.{name}: rounds are numbered from 1")
    for cid, r in s.suspensions.items():
        check(r > s.joins.get(cid, 1), f"schedule.suspensions: client {cid} suspended before it joins")
    if t.rounds > 0:
        check(any(s.joins.get(k, 1) <= 1 for k in range(p.K)), "schedule.joins: no client active at round 1")


def _set_path(raw: dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = raw
    for k in keys[:-1]:
        if k.isdigit() and isinstance(node, list):
            idx = int(k)
            if idx >= len(node):
                raise ConfigError(f"--set {dotted}: index {idx} out of range")
            node = node[idx]
            continue
        nxt = node.get(k)
        if nxt is None:
            nxt = node[k] = {}
        if not isinstance(nxt, (dict, list)):
            raise ConfigError(f"--set {dotted}: {k} is not a block")
        node = nxt
    leaf = keys[-1]
    if isinstance(node.get(leaf), (dict, list)) or isinstance(value, (dict, list)):
        raise ConfigError(f"--set {dotted}: only scalar fields can be overridden")
    node[leaf] = value


def _parse_scalar(text: str) -> Any:
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return yaml.safe_load(text)


def apply_overrides(raw: Mapping[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``key.path=value`` strings; values are parsed as YAML scalars."""
    if isinstance(raw.get("config"), Mapping):
        raw = raw["config"]
    out = copy.deepcopy(dict(raw))
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set {item}: expected key=value")
        _set_path(out, key.strip(), _parse_scalar(text))
    return out


def read_config_file(path: str | Path) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        # JSON first: YAML 1.1 would read exponent floats such as 1e-05 as strings
        raw = json.loads(text) if text.lstrip().startswith("{") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: malformed config ({type(exc).__name__})") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Load, override and validate. ``None`` gives the default configuration.

    Relative dataset file paths resolve against the config file's directory.
    """
    raw = read_config_file(path) if path is not None else {}
    raw = apply_overrides(raw, overrides or [])
    files = (raw.get("dataset") or {}).get("files")
    if path is not None and isinstance(files, dict):
        base = Path(path).resolve().parent
        raw["dataset"]["files"] = {k: str(base / v) if isinstance(v, str) else v for k, v in files.items()}
    return config_from_dict(raw)


def resolve_output_dir(cfg: RunConfig, override: str | Path | None = None) -> Path:
    """Explicit override, then the environment variable, then the config value."""
    if override is not None:
        return Path(override)
    env = os.environ.get(OUTPUT_ENV)
    return Path(env) if env else Path(cfg.output_dir)
