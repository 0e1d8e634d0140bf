import numpy as np
import pytest

from fedcast.data import windowed_dataset
from fedcast.errors import ConfigError, DataError, ProtocolError
from fedcast.federated import (
    ClientUpdate,
    ExperimentConfig,
    InProcessExecutor,
    aggregate,
    derive_train_seed,
    run_cluster_rounds,
    run_experiment,
    select_clients,
)
from fedcast.neural import (
    ModelConfig,
    SgdConfig,
    init_params,
    loss_and_grads,
    train_local,
)

from conftest import two_class_population


def tiny_model():
    return ModelConfig(cell="lstm", hidden_size=4, lookback=6, horizon=3)


def tiny_sgd(**kw):
    base = dict(learning_rate=0.05, batch_size=16, local_epochs=1, ew_base=1.0)
    base.update(kw)
    return SgdConfig(**base)


def make_clients(rng, n, samples=40, lookback=6, horizon=3):
    clients = {}
    for i in range(n):
        X = rng.uniform(0, 1, size=(samples, lookback))
        Y = rng.uniform(0, 1, size=(samples, horizon))
        clients[f"c{i:02d}"] = (X, Y)
    return clients


# --- seeds and selection ----------------------------------------------------


def test_derive_train_seed_stable_and_sensitive():
    s = derive_train_seed(5, 0, 3, "building-7")
    assert s == derive_train_seed(5, 0, 3, "building-7")
    assert 0 <= s < 2**64
    others = {
        derive_train_seed(6, 0, 3, "building-7"),
        derive_train_seed(5, 1, 3, "building-7"),
        derive_train_seed(5, 0, 4, "building-7"),
        derive_train_seed(5, 0, 3, "building-8"),
    }
    assert s not in others and len(others) == 4


def test_select_clients_deterministic_subset():
    ids = [f"c{i}" for i in range(10)]
    pick1 = select_clients(ids, 4, seed=2, cluster_id=1, round_idx=7)
    pick2 = select_clients(list(reversed(ids)), 4, seed=2, cluster_id=1, round_idx=7)
    assert pick1 == pick2
    assert len(pick1) == 4 and pick1 == sorted(pick1)
    assert set(pick1) <= set(ids)
    # different rounds eventually give different subsets
    assert any(
        select_clients(ids, 4, 2, 1, r) != pick1 for r in range(8, 20)
    )


def test_select_clients_all_and_clamp(caplog):
    ids = ["a", "b", "c"]
    assert select_clients(ids, 0, 0, 0, 0) == ["a", "b", "c"]
    with caplog.at_level("WARNING"):
        assert select_clients(ids, 9, 0, 0, 0) == ["a", "b", "c"]
    assert "exceeds pool" in caplog.text
    with pytest.raises(DataError, match="duplicate"):
        select_clients(["a", "a"], 1, 0, 0, 0)
    with pytest.raises(DataError, match="no clients"):
        select_clients([], 1, 0, 0, 0)


# --- aggregation ------------------------------------------------------------


def test_aggregate_exact_mean():
    a = {"w": np.array([1.0, 3.0]), "b": np.array([[2.0]])}
    b = {"w": np.array([3.0, 5.0]), "b": np.array([[4.0]])}
    out = aggregate([a, b])
    np.testing.assert_array_equal(out["w"], [2.0, 4.0])
    np.testing.assert_array_equal(out["b"], [[3.0]])


def test_aggregate_single_is_identity():
    a = {"w": np.array([1.5, -2.0])}
    out = aggregate([a])
    np.testing.assert_array_equal(out["w"], a["w"])


def test_aggregate_validation():
    with pytest.raises(DataError, match="nothing"):
        aggregate([])
    with pytest.raises(DataError, match="disagree"):
        aggregate([{"w": np.ones(2)}, {"v": np.ones(2)}])


# --- round loop ---------------------------------------------------------


def test_one_round_full_batch_matches_fedavg_algebra(rng):
    """One round, one local epoch, full batches: the new global parameters
    must equal w0 - lr * mean(per-client gradient at w0)."""
    cfg = tiny_model()
    lr = 0.07
    sgd = tiny_sgd(learning_rate=lr, batch_size=1000, local_epochs=1, ew_base=2.0)
    clients = make_clients(rng, 4)
    executor = InProcessExecutor(cfg, sgd, clients, seed=3, cluster_id=0)
    result = run_cluster_rounds(
        cfg, sorted(clients), executor,
        rounds=1, clients_per_round=0, seed=3, cluster_id=0,
    )
    w0 = init_params(cfg, seed=3)
    grad_stack = {}
    for cid in sorted(clients):
        X, Y = clients[cid]
        _, g = loss_and_grads(cfg, w0, X, Y, ew_base=2.0)
        for name, arr in g.items():
            grad_stack.setdefault(name, []).append(arr)
    for name in w0:
        expected = w0[name] - lr * np.mean(grad_stack[name], axis=0)
        np.testing.assert_allclose(result.params[name], expected, atol=1e-10)


def test_round_loop_records_history(rng):
    cfg = tiny_model()
    clients = make_clients(rng, 5)
    executor = InProcessExecutor(cfg, tiny_sgd(), clients, seed=1, cluster_id=2)
    result = run_cluster_rounds(
        cfg, sorted(clients), executor,
        rounds=3, clients_per_round=2, seed=1, cluster_id=2,
    )
    assert len(result.history) == 3
    for r, rec in enumerate(result.history):
        assert rec.round_idx == r
        assert len(rec.selected) == 2
        assert list(rec.selected) == sorted(rec.selected)
        assert np.isfinite(rec.mean_loss)


def test_round_loop_rejects_mismatched_updates(rng):
    cfg = tiny_model()
    clients = make_clients(rng, 3)

    def rogue_executor(round_idx, params, selected):
        return {"someone-else": ClientUpdate(params=params, loss=0.0, n_samples=1)}

    with pytest.raises(ProtocolError, match="do not match"):
        run_cluster_rounds(
            cfg, sorted(clients), rogue_executor,
            rounds=1, clients_per_round=0, seed=0, cluster_id=0,
        )


def test_clusters_share_initial_parameters(rng):
    """Every cluster must start the round loop from the same seed-derived w0."""
    cfg = tiny_model()
    clients = make_clients(rng, 2)
    seen = {}

    def spy(cluster_id):
        def executor(round_idx, params, selected):
            seen[cluster_id] = {k: v.copy() for k, v in params.items()}
            return {
                cid: ClientUpdate(params=params, loss=0.0, n_samples=1)
                for cid in selected
            }
        return executor

    for cid in (0, 1):
        run_cluster_rounds(
            cfg, sorted(clients), spy(cid),
            rounds=1, clients_per_round=0, seed=9, cluster_id=cid,
        )
    for name in seen[0]:
        np.testing.assert_array_equal(seen[0][name], seen[1][name])


def test_simulated_training_is_reproducible(rng):
    cfg = tiny_model()
    clients = make_clients(rng, 4)

    def go():
        executor = InProcessExecutor(cfg, tiny_sgd(), clients, seed=5, cluster_id=0)
        return run_cluster_rounds(
            cfg, sorted(clients), executor,
            rounds=4, clients_per_round=2, seed=5, cluster_id=0,
        )

    r1, r2 = go(), go()
    for name in r1.params:
        np.testing.assert_array_equal(r1.params[name], r2.params[name])
    assert [rec.mean_loss for rec in r1.history] == [rec.mean_loss for rec in r2.history]


# --- config parsing ---------------------------------------------------------


def _raw_config(**overrides):
    raw = {
        "model": {"cell": "lstm", "hidden_size": 6, "lookback": 8, "horizon": 4},
        "training": {"learning_rate": 0.1, "batch_size": 32, "local_epochs": 1},
        "federated": {"rounds": 2, "seed": 3},
        "clustering": {"k": 2, "period_days": 5},
        "evaluation": {"train_fraction": 0.75},
    }
    for key, val in overrides.items():
        raw[key] = val
    return raw


def test_config_from_dict_round_trip():
    cfg = ExperimentConfig.from_dict(_raw_config())
    assert cfg.model.cell == "lstm"
    assert cfg.sgd.ew_base == 1.0
    assert cfg.rounds == 2 and cfg.k == 2 and cfg.period_days == 5


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config sections"):
        ExperimentConfig.from_dict(_raw_config(extras={}))
    with pytest.raises(ConfigError, match="unknown keys in 'training'"):
        ExperimentConfig.from_dict(
            _raw_config(training={"learning_rate": 0.1, "momentum": 0.9})
        )


def test_config_mse_loss_forces_base_one():
    raw = _raw_config(training={"learning_rate": 0.1, "loss": "mse"})
    assert ExperimentConfig.from_dict(raw).sgd.ew_base == 1.0
    raw = _raw_config(training={"learning_rate": 0.1, "loss": "mse", "ew_base": 2.0})
    with pytest.raises(ConfigError, match="does not take"):
        ExperimentConfig.from_dict(raw)
    raw = _raw_config(training={"learning_rate": 0.1, "loss": "huber"})
    with pytest.raises(ConfigError, match="loss must be"):
        ExperimentConfig.from_dict(raw)


def test_config_k_and_sweep_are_exclusive():
    raw = _raw_config(clustering={"k": 2, "k_min": 2, "k_max": 5})
    with pytest.raises(ConfigError, match="not both"):
        ExperimentConfig.from_dict(raw)


# --- whole experiment -------------------------------------------------------


def _experiment_cfg(pop, holdout=(), **kw):
    defaults = dict(
        model=ModelConfig(cell="lstm", hidden_size=5, lookback=8, horizon=4),
        sgd=SgdConfig(learning_rate=0.1, batch_size=32, local_epochs=1, ew_base=2.0),
        rounds=2,
        clients_per_round=0,
        seed=4,
        k=2,
        period_days=5,
        holdout_ids=tuple(holdout),
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


def test_run_experiment_small_population():
    pop = two_class_population()
    holdout = (pop[0][0].building_id, pop[-1][0].building_id)
    cfg = _experiment_cfg(pop, holdout)
    result = run_experiment(pop, cfg)

    all_ids = {s.building_id for s, _ in pop}
    assert set(result.membership) == all_ids
    assert set(result.evaluation.per_client) and len(result.evaluation.per_client) == len(all_ids)
    # holdout clients never participate in a round
    trained_ids = {
        cid
        for t in result.trainings.values()
        for rec in t.history
        for cid in rec.selected
    }
    assert trained_ids.isdisjoint(holdout)
    assert trained_ids <= all_ids - set(holdout)
    # the two consumption classes should separate cleanly
    low = {bid for bid in all_ids if bid.startswith("low")}
    assert len({result.membership[bid] for bid in low}) == 1
    assert len(result.persistence_per_client) == len(all_ids)


def test_run_experiment_reproducible():
    pop = two_class_population(days=5, n_per_class=2)
    cfg = _experiment_cfg(pop)
    r1 = run_experiment(pop, cfg)
    r2 = run_experiment(pop, cfg)
    for cid in r1.trainings:
        for name in r1.trainings[cid].params:
            np.testing.assert_array_equal(
                r1.trainings[cid].params[name], r2.trainings[cid].params[name]
            )
    assert r1.evaluation.overall == r2.evaluation.overall


def test_run_experiment_rejects_unknown_holdout():
    pop = two_class_population(days=5, n_per_class=2)
    cfg = _experiment_cfg(pop, holdout=("ghost",))
    with pytest.raises(ConfigError, match="ghost"):
        run_experiment(pop, cfg)


def test_run_experiment_duplicate_building():
    pop = two_class_population(days=5, n_per_class=2)
    pop.append(pop[0])
    cfg = _experiment_cfg(pop)
    with pytest.raises(DataError, match="duplicate"):
        run_experiment(pop, cfg)


def test_prepared_split_respects_fraction():
    pop = two_class_population(days=5, n_per_class=2)
    cfg = _experiment_cfg(pop, train_fraction=0.6)
    from fedcast.federated import prepare_clients

    train_sets, test_sets = prepare_clients(pop, cfg)
    for bid, tr in train_sets.items():
        ds = windowed_dataset(
            next(s for s, _ in pop if s.building_id == bid), 8, 4
        )
        assert tr.n_samples == int(ds.n_samples * 0.6)
        assert tr.n_samples + test_sets[bid].n_samples == ds.n_samples
