"""Forecast quality metrics.

All metrics are computed in denormalized kWh, per horizon step (15, 30, 45,
60 minutes ahead for the default horizon) and overall. Percentage errors use
a small absolute floor in the denominator so near-zero readings cannot blow
up the score, and reported accuracy is exactly ``100 - MAPE``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import INTERVAL_MINUTES, WindowedDataset
from .errors import DataError
from .neural import ModelConfig, forward

DEFAULT_MAPE_FLOOR = 0.01  # kWh


def step_minutes(horizon: int) -> tuple[int, ...]:
    """Lead time in minutes for each horizon step."""
    return tuple((j + 1) * INTERVAL_MINUTES for j in range(horizon))


def rmse(actual: np.ndarray, predicted: np.ndarray) -> float:
    actual = np.asarray(actual, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if actual.shape != predicted.shape:
        raise ValueError(f"shape mismatch: {actual.shape} vs {predicted.shape}")
    return float(np.sqrt(np.mean((actual - predicted) ** 2)))


def mape(
    actual: np.ndarray, predicted: np.ndarray, floor: float = DEFAULT_MAPE_FLOOR
) -> float:
    """Mean absolute percentage error with a floored denominator.

    Each term is ``|a - p| / max(|a|, floor)``, so a reading below the floor
    contributes a bounded (kWh-scaled) error instead of a division blow-up.
    """
    actual = np.asarray(actual, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if actual.shape != predicted.shape:
        raise ValueError(f"shape mismatch: {actual.shape} vs {predicted.shape}")
    if floor <= 0.0:
        raise ValueError("floor must be positive")
    denom = np.maximum(np.abs(actual), floor)
    return float(100.0 * np.mean(np.abs(actual - predicted) / denom))


def accuracy(
    actual: np.ndarray, predicted: np.ndarray, floor: float = DEFAULT_MAPE_FLOOR
) -> float:
    return 100.0 - mape(actual, predicted, floor)


@dataclass(frozen=True)
class MetricBlock:
    """RMSE/MAPE/accuracy per horizon step plus the all-step aggregate."""

    n_samples: int
    step_rmse: tuple[float, ...]
    step_mape: tuple[float, ...]
    step_accuracy: tuple[float, ...]
    rmse: float
    mape: float
    accuracy: float

    @property
    def horizon(self) -> int:
        return len(self.step_rmse)


def evaluate_forecasts(
    actual_kwh: np.ndarray,
    predicted_kwh: np.ndarray,
    floor: float = DEFAULT_MAPE_FLOOR,
) -> MetricBlock:
    """Score a (n_samples, horizon) matrix of forecasts against actuals."""
    actual = np.asarray(actual_kwh, dtype=np.float64)
    predicted = np.asarray(predicted_kwh, dtype=np.float64)
    if actual.ndim != 2 or actual.shape != predicted.shape:
        raise ValueError(
            f"expected matching (n, horizon) matrices, got {actual.shape} "
            f"and {predicted.shape}"
        )
    if actual.shape[0] == 0:
        raise DataError("cannot score zero samples")
    horizon = actual.shape[1]
    step_r = tuple(rmse(actual[:, j], predicted[:, j]) for j in range(horizon))
    step_m = tuple(mape(actual[:, j], predicted[:, j], floor) for j in range(horizon))
    return MetricBlock(
        n_samples=actual.shape[0],
        step_rmse=step_r,
        step_mape=step_m,
        step_accuracy=tuple(100.0 - m for m in step_m),
        rmse=rmse(actual, predicted),
        mape=mape(actual, predicted, floor),
        accuracy=accuracy(actual, predicted, floor),
    )


@dataclass(frozen=True)
class ClientReport:
    """One building's scores under one model."""

    building_id: str
    cluster_id: int
    metrics: MetricBlock


def model_forecasts(
    cfg: ModelConfig, params: dict[str, np.ndarray], ds: WindowedDataset
) -> tuple[np.ndarray, np.ndarray]:
    """(actual, predicted) kWh matrices for a dataset under a model."""
    pred_norm = forward(cfg, params, ds.inputs)
    return ds.norm.denormalize(ds.targets), ds.norm.denormalize(pred_norm)


def evaluate_client(
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    ds: WindowedDataset,
    cluster_id: int,
    floor: float = DEFAULT_MAPE_FLOOR,
) -> ClientReport:
    actual, predicted = model_forecasts(cfg, params, ds)
    return ClientReport(
        building_id=ds.building_id,
        cluster_id=cluster_id,
        metrics=evaluate_forecasts(actual, predicted, floor),
    )


def persistence_forecasts(ds: WindowedDataset) -> tuple[np.ndarray, np.ndarray]:
    """Naive baseline: hold the last observed value across the horizon."""
    pred_norm = np.repeat(ds.inputs[:, -1:], ds.horizon, axis=1)
    return ds.norm.denormalize(ds.targets), ds.norm.denormalize(pred_norm)


def persistence_report(
    ds: WindowedDataset, cluster_id: int = -1, floor: float = DEFAULT_MAPE_FLOOR
) -> ClientReport:
    actual, predicted = persistence_forecasts(ds)
    return ClientReport(
        building_id=ds.building_id,
        cluster_id=cluster_id,
        metrics=evaluate_forecasts(actual, predicted, floor),
    )


def pool_metrics(blocks: list[MetricBlock]) -> MetricBlock:
    """Sample-weighted pooling across clients.

    MAPE pools as the weighted mean and RMSE as the weighted root mean
    square, so pooled values equal the metrics computed over the union of
    all (sample, step) pairs. Accuracy stays 100 - pooled MAPE.
    """
    if not blocks:
        raise DataError("nothing to pool")
    horizons = {b.horizon for b in blocks}
    if len(horizons) != 1:
        raise DataError(f"mixed horizons in pooled metrics: {sorted(horizons)}")
    weights = np.asarray([b.n_samples for b in blocks], dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise DataError("pooled sample count is zero")

    def wmean(values: np.ndarray) -> np.ndarray:
        return (weights[:, None] * values).sum(axis=0) / total

    step_m = wmean(np.asarray([b.step_mape for b in blocks]))
    step_r = np.sqrt(wmean(np.asarray([b.step_rmse for b in blocks]) ** 2))
    overall_m = float((weights * [b.mape for b in blocks]).sum() / total)
    overall_r = float(
        np.sqrt((weights * np.asarray([b.rmse for b in blocks]) ** 2).sum() / total)
    )
    return MetricBlock(
        n_samples=int(total),
        step_rmse=tuple(step_r),
        step_mape=tuple(step_m),
        step_accuracy=tuple(100.0 - m for m in step_m),
        rmse=overall_r,
        mape=overall_m,
        accuracy=100.0 - overall_m,
    )


def client_mean_accuracy(reports: list[ClientReport]) -> tuple[float, ...]:
    """Unweighted per-step accuracy mean, each client counting once."""
    if not reports:
        raise DataError("nothing to average")
    acc = np.asarray([r.metrics.step_accuracy for r in reports])
    return tuple(acc.mean(axis=0))


@dataclass(frozen=True)
class FederatedEval:
    """Scores for a whole population under per-cluster models."""

    per_client: tuple[ClientReport, ...]
    per_cluster: dict[int, MetricBlock]
    cluster_client_mean: dict[int, tuple[float, ...]]
    overall: MetricBlock


def evaluate_global(
    cfg: ModelConfig,
    params_by_cluster: dict[int, dict[str, np.ndarray]],
    test_sets: dict[str, WindowedDataset],
    membership: dict[str, int],
    floor: float = DEFAULT_MAPE_FLOOR,
) -> FederatedEval:
    """Score every building against its cluster's model and pool the results."""
    if not test_sets:
        raise DataError("no test sets to evaluate")
    reports: list[ClientReport] = []
    for bid in sorted(test_sets):
        if bid not in membership:
            raise DataError(f"no cluster membership for building '{bid}'")
        cid = membership[bid]
        if cid not in params_by_cluster:
            raise DataError(f"no model for cluster {cid} (building '{bid}')")
        reports.append(
            evaluate_client(cfg, params_by_cluster[cid], test_sets[bid], cid, floor)
        )
    per_cluster: dict[int, MetricBlock] = {}
    cluster_client_mean: dict[int, tuple[float, ...]] = {}
    for cid in sorted({r.cluster_id for r in reports}):
        members = [r for r in reports if r.cluster_id == cid]
        per_cluster[cid] = pool_metrics([r.metrics for r in members])
        cluster_client_mean[cid] = client_mean_accuracy(members)
    return FederatedEval(
        per_client=tuple(reports),
        per_cluster=per_cluster,
        cluster_client_mean=cluster_client_mean,
        overall=pool_metrics([r.metrics for r in reports]),
    )
