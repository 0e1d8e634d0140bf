"""Federated averaging across clustered clients.

One global model per consumption cluster: every round the coordinator picks
a client subset, each selected client runs local SGD from the current global
parameters, and the coordinator replaces the global parameters with the
unweighted mean of the returned ones. The round loop is executor-agnostic —
the in-process simulator and the TCP coordinator both drive it, so equal
configs and seeds give bit-identical results in either mode.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .cluster import ClusterModel, KSweepResult, fit_kmeans, sweep_k
from .data import (
    ConsumptionSeries,
    WindowedDataset,
    consumption_summary,
    train_test_split,
    windowed_dataset,
)
from .errors import ConfigError, DataError, ProtocolError
from .evaluation import (
    ClientReport,
    FederatedEval,
    evaluate_global,
    persistence_report,
)
from .neural import ModelConfig, SgdConfig, init_params, train_local

logger = logging.getLogger(__name__)

LOSS_NAMES = ("ew_mse", "mse")


def derive_train_seed(seed: int, cluster_id: int, round_idx: int, client_id: str) -> int:
    """Per-(round, client) SGD seed, stable across process boundaries.

    Hash-derived so the coordinator and a remote client compute the same
    value from the same four fields without sharing generator state.
    """
    text = f"{seed}|{cluster_id}|{round_idx}|{client_id}"
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def select_clients(
    client_ids: list[str],
    clients_per_round: int,
    seed: int,
    cluster_id: int,
    round_idx: int,
) -> list[str]:
    """Uniform sample (without replacement) for one round, returned sorted.

    ``clients_per_round`` of 0 means everyone; a value above the population
    size is clamped with a warning.
    """
    ids = sorted(client_ids)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate client ids in selection pool")
    if not ids:
        raise DataError("no clients to select from")
    if clients_per_round < 0:
        raise ConfigError("clients_per_round must be >= 0")
    m = len(ids) if clients_per_round == 0 else clients_per_round
    if m > len(ids):
        logger.warning(
            "clients_per_round=%d exceeds pool of %d; using all", m, len(ids)
        )
        m = len(ids)
    rng = np.random.default_rng(np.random.SeedSequence([seed, cluster_id, round_idx]))
    picked = rng.choice(len(ids), size=m, replace=False)
    return sorted(ids[i] for i in picked)


def aggregate(param_sets: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Unweighted per-tensor mean of client parameter sets."""
    if not param_sets:
        raise DataError("nothing to aggregate")
    names = set(param_sets[0])
    for p in param_sets[1:]:
        if set(p) != names:
            raise DataError("client parameter sets disagree on tensor names")
    out: dict[str, np.ndarray] = {}
    for name in sorted(names):
        stack = np.stack([p[name] for p in param_sets])
        out[name] = stack.mean(axis=0)
    return out


@dataclass(frozen=True)
class ClientUpdate:
    """One client's contribution to a round."""

    params: dict[str, np.ndarray]
    loss: float
    n_samples: int


class RoundExecutor(Protocol):
    def __call__(
        self,
        round_idx: int,
        params: dict[str, np.ndarray],
        selected: list[str],
    ) -> dict[str, ClientUpdate]: ...


@dataclass(frozen=True)
class RoundRecord:
    round_idx: int
    selected: tuple[str, ...]
    mean_loss: float


@dataclass(frozen=True)
class ClusterTraining:
    """Outcome of the full round loop for one cluster."""

    cluster_id: int
    params: dict[str, np.ndarray]
    history: tuple[RoundRecord, ...]


def run_cluster_rounds(
    cfg: ModelConfig,
    client_ids: list[str],
    executor: RoundExecutor,
    *,
    rounds: int,
    clients_per_round: int,
    seed: int,
    cluster_id: int,
    init: dict[str, np.ndarray] | None = None,
) -> ClusterTraining:
    """Drive the synchronous round loop for one cluster.

    Aggregation order is fixed (clients sorted by id), so the result does
    not depend on arrival order. All clusters sharing a base seed start from
    the same initial parameters; selection and SGD seeds fold in the cluster
    id, so their trajectories diverge immediately.
    """
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    params = init_params(cfg, seed) if init is None else init
    records: list[RoundRecord] = []
    for round_idx in range(rounds):
        selected = select_clients(
            client_ids, clients_per_round, seed, cluster_id, round_idx
        )
        updates = executor(round_idx, params, selected)
        if set(updates) != set(selected):
            raise ProtocolError(
                f"round {round_idx}: updates from {sorted(updates)} "
                f"do not match selection {selected}"
            )
        params = aggregate([updates[cid].params for cid in selected])
        mean_loss = float(np.mean([updates[cid].loss for cid in selected]))
        records.append(
            RoundRecord(round_idx=round_idx, selected=tuple(selected), mean_loss=mean_loss)
        )
    return ClusterTraining(cluster_id=cluster_id, params=params, history=tuple(records))


class InProcessExecutor:
    """Runs selected clients' local updates in this process (simulation mode)."""

    def __init__(
        self,
        cfg: ModelConfig,
        sgd: SgdConfig,
        clients: dict[str, tuple[np.ndarray, np.ndarray]],
        seed: int,
        cluster_id: int,
    ):
        self.cfg = cfg
        self.sgd = sgd
        self.clients = clients
        self.seed = seed
        self.cluster_id = cluster_id

    def __call__(
        self,
        round_idx: int,
        params: dict[str, np.ndarray],
        selected: list[str],
    ) -> dict[str, ClientUpdate]:
        out: dict[str, ClientUpdate] = {}
        for cid in selected:
            if cid not in self.clients:
                raise DataError(f"selected unknown client '{cid}'")
            X, Y = self.clients[cid]
            train_seed = derive_train_seed(self.seed, self.cluster_id, round_idx, cid)
            new_params, stats = train_local(self.cfg, params, X, Y, self.sgd, train_seed)
            out[cid] = ClientUpdate(
                params=new_params, loss=stats.mean_loss, n_samples=stats.n_samples
            )
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to run clustering + federated training + scoring."""

    model: ModelConfig
    sgd: SgdConfig
    rounds: int
    clients_per_round: int = 0
    seed: int = 0
    k: int | None = None
    k_min: int = 2
    k_max: int = 10
    period_days: int = 30
    train_fraction: float = 0.75
    mape_floor: float = 0.01
    holdout_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.clients_per_round < 0:
            raise ConfigError("clients_per_round must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.period_days < 1:
            raise ConfigError("period_days must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.mape_floor <= 0.0:
            raise ConfigError("mape_floor must be positive")

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        """Parse the JSON config document; unknown keys are rejected."""
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        sections = {"model", "training", "federated", "clustering", "evaluation"}
        unknown = set(raw) - sections
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")

        def section(name: str, allowed: set[str]) -> dict:
            sec = raw.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"config section '{name}' must be an object")
            bad = set(sec) - allowed
            if bad:
                raise ConfigError(f"unknown keys in '{name}': {sorted(bad)}")
            return sec

        m = section("model", {"cell", "hidden_size", "lookback", "horizon"})
        if "cell" not in m or "hidden_size" not in m:
            raise ConfigError("config section 'model' needs cell and hidden_size")
        model = ModelConfig(
            cell=str(m["cell"]),
            hidden_size=int(m["hidden_size"]),
            lookback=int(m.get("lookback", 8)),
            horizon=int(m.get("horizon", 4)),
        )

        t = section(
            "training",
            {"learning_rate", "batch_size", "local_epochs", "loss", "ew_base"},
        )
        loss = str(t.get("loss", "ew_mse"))
        if loss not in LOSS_NAMES:
            raise ConfigError(f"loss must be one of {LOSS_NAMES}, got {loss!r}")
        ew_base = float(t.get("ew_base", 1.0))
        if loss == "mse":
            if "ew_base" in t and ew_base != 1.0:
                raise ConfigError("loss 'mse' does not take ew_base != 1")
            ew_base = 1.0
        sgd = SgdConfig(
            learning_rate=float(t.get("learning_rate", 0.01)),
            batch_size=int(t.get("batch_size", 32)),
            local_epochs=int(t.get("local_epochs", 1)),
            ew_base=ew_base,
        )

        f = section(
            "federated", {"rounds", "clients_per_round", "seed", "holdout_ids"}
        )
        holdout = f.get("holdout_ids", [])
        if not isinstance(holdout, list) or not all(isinstance(h, str) for h in holdout):
            raise ConfigError("holdout_ids must be a list of building ids")

        c = section("clustering", {"k", "k_min", "k_max", "period_days"})
        k = c.get("k")
        if k is not None and ("k_min" in c or "k_max" in c):
            raise ConfigError("give either fixed k or a k_min/k_max sweep, not both")

        e = section("evaluation", {"train_fraction", "mape_floor"})
        return ExperimentConfig(
            model=model,
            sgd=sgd,
            rounds=int(f.get("rounds", 10)),
            clients_per_round=int(f.get("clients_per_round", 0)),
            seed=int(f.get("seed", 0)),
            k=None if k is None else int(k),
            k_min=int(c.get("k_min", 2)),
            k_max=int(c.get("k_max", 10)),
            period_days=int(c.get("period_days", 30)),
            train_fraction=float(e.get("train_fraction", 0.75)),
            mape_floor=float(e.get("mape_floor", 0.01)),
            holdout_ids=tuple(holdout),
        )


@dataclass(frozen=True)
class ExperimentResult:
    """Trained per-cluster models plus the full evaluation."""

    config: ExperimentConfig
    cluster_model: ClusterModel
    sweep: KSweepResult | None
    membership: dict[str, int]
    trainings: dict[int, ClusterTraining]
    evaluation: FederatedEval
    persistence_per_client: tuple[ClientReport, ...]

    @property
    def params_by_cluster(self) -> dict[int, dict[str, np.ndarray]]:
        return {cid: t.params for cid, t in self.trainings.items()}


def prepare_clients(
    population: list[tuple[ConsumptionSeries, str]],
    cfg: ExperimentConfig,
) -> tuple[dict[str, WindowedDataset], dict[str, WindowedDataset]]:
    """Window + split every building; returns (train rows, test rows) by id."""
    train_sets: dict[str, WindowedDataset] = {}
    test_sets: dict[str, WindowedDataset] = {}
    for series, _state in population:
        ds = windowed_dataset(series, cfg.model.lookback, cfg.model.horizon)
        tr, te = train_test_split(ds, cfg.train_fraction)
        if tr.n_samples == 0 or te.n_samples == 0:
            raise DataError(
                f"building '{series.building_id}' has too few samples to split"
            )
        train_sets[series.building_id] = tr
        test_sets[series.building_id] = te
    return train_sets, test_sets


def cluster_population(
    population: list[tuple[ConsumptionSeries, str]],
    cfg: ExperimentConfig,
) -> tuple[ClusterModel, KSweepResult | None, dict[str, int]]:
    """Fit k-means on non-holdout buildings; assign holdouts to nearest centroid."""
    holdout = set(cfg.holdout_ids)
    ids = {series.building_id for series, _ in population}
    missing = holdout - ids
    if missing:
        raise ConfigError(f"holdout ids not in population: {sorted(missing)}")
    summaries = {
        series.building_id: consumption_summary(series, cfg.period_days)
        for series, _ in population
    }
    fit_ids = sorted(ids - holdout)
    if not fit_ids:
        raise ConfigError("every building is held out; nothing to train on")
    fit_summaries = [summaries[bid] for bid in fit_ids]
    sweep: KSweepResult | None = None
    if cfg.k is not None:
        model = fit_kmeans(fit_summaries, cfg.k, seed=cfg.seed)
    else:
        sweep = sweep_k(fit_summaries, cfg.k_min, cfg.k_max, seed=cfg.seed)
        model = sweep.models[sweep.best_k]
    membership = dict(model.labels)
    for bid in sorted(holdout):
        membership[bid] = model.assign(summaries[bid])
    return model, sweep, membership


def run_experiment(
    population: list[tuple[ConsumptionSeries, str]],
    cfg: ExperimentConfig,
) -> ExperimentResult:
    """Cluster, train one federated model per cluster, score everyone.

    Holdout buildings never train; they are assigned to the nearest centroid
    and scored under that cluster's model, alongside the training buildings.
    """
    if not population:
        raise DataError("empty population")
    seen = set()
    for series, _ in population:
        if series.building_id in seen:
            raise DataError(f"duplicate building_id '{series.building_id}'")
        seen.add(series.building_id)

    cluster_model, sweep, membership = cluster_population(population, cfg)
    train_sets, test_sets = prepare_clients(population, cfg)
    holdout = set(cfg.holdout_ids)

    trainings: dict[int, ClusterTraining] = {}
    for cid in range(cluster_model.k):
        members = sorted(
            bid for bid, c in membership.items() if c == cid and bid not in holdout
        )
        if not members:
            logger.warning("cluster %d has no training members; skipping", cid)
            continue
        executor = InProcessExecutor(
            cfg.model,
            cfg.sgd,
            {bid: (train_sets[bid].inputs, train_sets[bid].targets) for bid in members},
            seed=cfg.seed,
            cluster_id=cid,
        )
        trainings[cid] = run_cluster_rounds(
            cfg.model,
            members,
            executor,
            rounds=cfg.rounds,
            clients_per_round=cfg.clients_per_round,
            seed=cfg.seed,
            cluster_id=cid,
        )

    evaluation = evaluate_global(
        cfg.model,
        {cid: t.params for cid, t in trainings.items()},
        test_sets,
        membership,
        floor=cfg.mape_floor,
    )
    persistence = tuple(
        persistence_report(test_sets[bid], membership[bid], cfg.mape_floor)
        for bid in sorted(test_sets)
    )
    return ExperimentResult(
        config=cfg,
        cluster_model=cluster_model,
        sweep=sweep,
        membership=membership,
        trainings=trainings,
        evaluation=evaluation,
        persistence_per_client=persistence,
    )
