"""Command-line front end.

Subcommands cover the whole workflow: generate a synthetic population,
cluster it, train federated models (in-process or over TCP), evaluate saved
weights, and run a remote client. Exit codes: 0 success, 1 configuration,
2 data, 3 numeric fault, 4 protocol.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import data as datamod
from .cluster import fit_kmeans, silhouette_score, sweep_k
from .data import GeneratorConfig, consumption_summary, load_population, synth_population
from .errors import ConfigError, FedcastError, ProtocolError
from .evaluation import (
    FederatedEval,
    evaluate_global,
    persistence_report,
    pool_metrics,
    step_minutes,
)
from .federated import ExperimentConfig, ExperimentResult, prepare_clients, run_experiment
from .netproto import (
    BLOB_V_F64,
    CoordinatorServer,
    FederatedClient,
    deserialize_weights,
    serialize_weights,
)

logger = logging.getLogger(__name__)

_DEFAULT_GENERATOR = {
    "days": 30,
    "seed": 7,
    "classes": [
        {"name": "home", "base_kwh": 0.6, "n_clients": 4, "amplitude": 0.3,
         "week_factor": 0.2, "noise_sigma": 0.05, "scale_jitter": 0.2},
        {"name": "office", "base_kwh": 3.0, "n_clients": 4, "amplitude": 1.2,
         "week_factor": 0.4, "noise_sigma": 0.2, "scale_jitter": 0.2},
        {"name": "plant", "base_kwh": 12.0, "n_clients": 4, "amplitude": 2.0,
         "week_factor": 0.1, "noise_sigma": 0.5, "scale_jitter": 0.2},
    ],
}


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the config exit code."""

    def error(self, message):
        raise ConfigError(message)


def _load_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with path.open() as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return raw


def _experiment_config(raw: dict) -> ExperimentConfig:
    return ExperimentConfig.from_dict({k: v for k, v in raw.items() if k != "generator"})


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _eval_dict(ev: FederatedEval) -> dict:
    return {
        "overall": dataclasses.asdict(ev.overall),
        "per_cluster": {str(c): dataclasses.asdict(b) for c, b in ev.per_cluster.items()},
        "cluster_client_mean_accuracy": {
            str(c): list(v) for c, v in ev.cluster_client_mean.items()
        },
        "per_client": [
            {
                "building_id": r.building_id,
                "cluster_id": r.cluster_id,
                "metrics": dataclasses.asdict(r.metrics),
            }
            for r in ev.per_client
        ],
    }


def _print_metrics(title: str, block, horizon: int) -> None:
    minutes = step_minutes(horizon)
    print(title)
    print(f"  samples: {block.n_samples}")
    acc = "  ".join(
        f"{m}min={a:6.2f}%" for m, a in zip(minutes, block.step_accuracy)
    )
    print(f"  accuracy: {acc}")
    print(f"  overall: accuracy={block.accuracy:.2f}%  mape={block.mape:.2f}%  "
          f"rmse={block.rmse:.4f} kWh")


def _save_training(out_dir: Path, cfg: ExperimentConfig, cluster_model, membership, trainings) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(
        out_dir / "membership.json",
        {
            "k": cluster_model.k,
            "inertia": cluster_model.inertia,
            "centroids": cluster_model.centroids.tolist(),
            "clusters": {bid: int(c) for bid, c in sorted(membership.items())},
        },
    )
    history = {
        str(cid): [
            {"round": r.round_idx, "selected": list(r.selected), "mean_loss": r.mean_loss}
            for r in t.history
        ]
        for cid, t in trainings.items()
    }
    _write_json(out_dir / "history.json", history)
    for cid, t in trainings.items():
        blob = serialize_weights(cfg.model, t.params, cfg.rounds, BLOB_V_F64)
        (out_dir / f"cluster_{cid}.weights").write_bytes(blob)


def _cmd_generate(args) -> int:
    raw = _load_json(args.config) if args.config else {"generator": _DEFAULT_GENERATOR}
    gen_raw = raw.get("generator")
    if gen_raw is None:
        raise ConfigError("config has no 'generator' section")
    gen = GeneratorConfig.from_dict(gen_raw)
    if args.seed is not None:
        gen = GeneratorConfig(classes=gen.classes, days=gen.days, seed=args.seed)
    if args.days is not None:
        gen = GeneratorConfig(classes=gen.classes, days=args.days, seed=gen.seed)
    population = synth_population(gen)
    manifest = datamod.write_population(population, args.out)
    print(f"wrote {len(population)} buildings, {gen.days} days each -> {manifest}")
    return 0


def _cmd_cluster(args) -> int:
    raw = _load_json(args.config)
    cfg = _experiment_config(raw)
    population = load_population(args.data)
    summaries = [consumption_summary(s, cfg.period_days) for s, _ in population]
    out: dict = {"period_days": cfg.period_days}
    if cfg.k is not None:
        model = fit_kmeans(summaries, cfg.k, seed=cfg.seed)
        out["silhouette"] = silhouette_score(summaries, model.labels)
    else:
        sweep = sweep_k(summaries, cfg.k_min, cfg.k_max, seed=cfg.seed)
        model = sweep.models[sweep.best_k]
        out["sweep"] = {
            "k": list(sweep.ks),
            "inertia": list(sweep.inertias),
            "silhouette": list(sweep.silhouettes),
        }
        out["silhouette"] = sweep.silhouettes[sweep.ks.index(sweep.best_k)]
    out.update(
        k=model.k,
        inertia=model.inertia,
        centroids=model.centroids.tolist(),
        clusters={bid: int(c) for bid, c in sorted(model.labels.items())},
    )
    _write_json(args.out, out)
    sizes = {c: sum(1 for v in model.labels.values() if v == c) for c in range(model.k)}
    print(f"k={model.k}  inertia={model.inertia:.4f}  silhouette={out['silhouette']:.4f}")
    print(f"cluster sizes: {sizes}")
    print(f"wrote {args.out}")
    return 0


def _run_and_report(population, cfg: ExperimentConfig, out_dir: Path) -> ExperimentResult:
    result = run_experiment(population, cfg)
    _save_training(out_dir, cfg, result.cluster_model, result.membership, result.trainings)
    persistence_overall = pool_metrics([r.metrics for r in result.persistence_per_client])
    payload = _eval_dict(result.evaluation)
    payload["persistence_overall"] = dataclasses.asdict(persistence_overall)
    _write_json(out_dir / "evaluation.json", payload)
    for cid in sorted(result.trainings):
        hist = result.trainings[cid].history
        print(
            f"cluster {cid}: {len(hist)} rounds, "
            f"final mean loss {hist[-1].mean_loss:.6f}"
        )
    _print_metrics("model (all buildings):", result.evaluation.overall, cfg.model.horizon)
    _print_metrics("persistence baseline:", persistence_overall, cfg.model.horizon)
    print(f"artifacts in {out_dir}")
    return result


def _cmd_train(args) -> int:
    raw = _load_json(args.config)
    cfg = _experiment_config(raw)
    population = load_population(args.data)
    _run_and_report(population, cfg, Path(args.out))
    return 0


def _cmd_evaluate(args) -> int:
    raw = _load_json(args.config)
    cfg = _experiment_config(raw)
    population = load_population(args.data)
    weights_dir = Path(args.weights)
    membership_file = weights_dir / "membership.json"
    if not membership_file.is_file():
        raise ConfigError(f"no membership.json under {weights_dir}")
    try:
        with membership_file.open() as fh:
            membership_doc = json.load(fh)
        membership = {bid: int(c) for bid, c in membership_doc["clusters"].items()}
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{membership_file}: unreadable membership ({exc})") from None
    params_by_cluster = {}
    for cid in sorted(set(membership.values())):
        blob_path = weights_dir / f"cluster_{cid}.weights"
        if not blob_path.is_file():
            raise ConfigError(f"missing weights file {blob_path}")
        msg = deserialize_weights(blob_path.read_bytes())
        if msg.model != cfg.model:
            raise ConfigError(
                f"{blob_path} was trained with a different architecture"
            )
        params_by_cluster[cid] = msg.params
    _, test_sets = prepare_clients(population, cfg)
    ev = evaluate_global(cfg.model, params_by_cluster, test_sets, membership, cfg.mape_floor)
    persistence_overall = pool_metrics(
        [
            persistence_report(test_sets[bid], membership[bid], cfg.mape_floor).metrics
            for bid in sorted(test_sets)
        ]
    )
    payload = _eval_dict(ev)
    payload["persistence_overall"] = dataclasses.asdict(persistence_overall)
    _write_json(args.out, payload)
    _print_metrics("model (all buildings):", ev.overall, cfg.model.horizon)
    _print_metrics("persistence baseline:", persistence_overall, cfg.model.horizon)
    print(f"wrote {args.out}")
    return 0


def _cmd_serve(args) -> int:
    raw = _load_json(args.config)
    cfg = _experiment_config(raw)
    server = CoordinatorServer(
        cfg,
        expected_clients=args.expected_clients,
        host=args.host,
        port=args.port,
        registration_timeout=args.registration_timeout,
    )
    host, port = server.address
    print(f"coordinator listening on {host}:{port} "
          f"for {args.expected_clients} clients")
    result = server.run()
    if result is None:
        raise ProtocolError("coordinator stopped before completing the run")
    _save_training(Path(args.out), cfg, result.cluster_model, result.membership,
                   result.trainings)
    for cid in sorted(result.trainings):
        hist = result.trainings[cid].history
        print(f"cluster {cid}: {len(hist)} rounds, "
              f"final mean loss {hist[-1].mean_loss:.6f}")
    print(f"artifacts in {args.out}")
    return 0


def _cmd_client(args) -> int:
    series = datamod.ingest_csv(args.csv)
    client = FederatedClient(
        host=args.host, port=args.port, series=series, client_id=args.id
    )
    client.run()
    print(f"client {client.client_id}: trained {client.rounds_trained} rounds")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedcast",
                     description="Clustered federated forecasting of building power demand")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for info, -vv for debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic population")
    p.add_argument("--config", help="JSON file with a 'generator' section")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override generator seed")
    p.add_argument("--days", type=int, help="override number of days")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("cluster", help="group buildings by consumption profile")
    p.add_argument("--data", required=True, help="manifest.json of the population")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output JSON file")
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("train", help="run federated training in-process")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="score saved weights against a population")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True, help="directory written by train/serve")
    p.add_argument("--out", required=True, help="output JSON file")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("serve", help="coordinate training over TCP")
    p.add_argument("--config", required=True)
    p.add_argument("--expected-clients", type=int, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--registration-timeout", type=float, default=120.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("client", help="participate as one building")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--csv", required=True, help="this building's readings")
    p.add_argument("--id", help="client id (default: CSV stem)")
    p.set_defaults(func=_cmd_client)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        level = logging.WARNING
        if args.verbose == 1:
            level = logging.INFO
        elif args.verbose >= 2:
            level = logging.DEBUG
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except FedcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
