"""Federated short-term power-demand forecasting.

Buildings are grouped by consumption profile, and each group trains a shared
recurrent forecaster by federated averaging — raw readings never leave the
client. Works fully in-process for experiments or over TCP for distributed
runs, with bit-identical results between the two modes.
"""

from .cluster import ClusterModel, fit_kmeans, silhouette_score, sweep_k
from .data import (
    ConsumptionSeries,
    GeneratorConfig,
    NormParams,
    SummaryVector,
    WindowedDataset,
    consumption_summary,
    ingest_csv,
    load_population,
    synth_population,
    train_test_split,
    windowed_dataset,
)
from .errors import (
    ConfigError,
    DataError,
    FedcastError,
    IngestError,
    NumericFault,
    ProtocolError,
)
from .evaluation import (
    FederatedEval,
    MetricBlock,
    accuracy,
    evaluate_global,
    mape,
    persistence_report,
    pool_metrics,
    rmse,
)
from .federated import (
    ExperimentConfig,
    ExperimentResult,
    aggregate,
    derive_train_seed,
    run_cluster_rounds,
    run_experiment,
    select_clients,
)
from .netproto import (
    CoordinatorServer,
    FederatedClient,
    deserialize_weights,
    serialize_weights,
)
from .neural import (
    ModelConfig,
    SgdConfig,
    ew_mse,
    forward,
    init_params,
    loss_and_grads,
    mse,
    param_count,
    sgd_step,
    train_local,
)

__version__ = "0.1.0"

__all__ = [
    "ClusterModel",
    "ConfigError",
    "ConsumptionSeries",
    "CoordinatorServer",
    "DataError",
    "ExperimentConfig",
    "ExperimentResult",
    "FedcastError",
    "FederatedClient",
    "FederatedEval",
    "GeneratorConfig",
    "IngestError",
    "MetricBlock",
    "ModelConfig",
    "NormParams",
    "NumericFault",
    "ProtocolError",
    "SgdConfig",
    "SummaryVector",
    "WindowedDataset",
    "accuracy",
    "aggregate",
    "consumption_summary",
    "derive_train_seed",
    "deserialize_weights",
    "evaluate_global",
    "ew_mse",
    "fit_kmeans",
    "forward",
    "ingest_csv",
    "init_params",
    "load_population",
    "loss_and_grads",
    "mape",
    "mse",
    "param_count",
    "persistence_report",
    "pool_metrics",
    "rmse",
    "run_cluster_rounds",
    "run_experiment",
    "select_clients",
    "serialize_weights",
    "sgd_step",
    "silhouette_score",
    "sweep_k",
    "synth_population",
    "train_local",
    "train_test_split",
    "windowed_dataset",
]
