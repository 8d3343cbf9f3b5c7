import json
import math

import numpy as np
import pytest

from fedfac.datagen import ClientDataset, SynthConfig, generate_synthetic_federation
from fedfac.facsplit import FactorConfig
from fedfac.federation import (
    FederationConfig,
    aggregate_shared,
    apply_global_update,
    mask_group,
    predict_new_client_ensemble,
    predict_new_client_localtrain,
    repartition_dynamic,
    run_experiment,
    sample_clients,
    write_clients_csv,
    write_metrics_csv,
    write_partition_json,
    write_stability_csv,
)
from fedfac.model import ModelConfig, SplitParams, init_params, predict_score
from fedfac.numerics import ContractError, derive_rng


@pytest.fixture(scope="module")
def fed():
    return generate_synthetic_federation(SynthConfig(C=8, d=12, m=10, n_train=40, n_test=15, seed=5))


def small_cfg(**kw):
    base = dict(T=4, hidden_widths=(10,), eta_l=0.1, batch_size=20, init_local_epochs=2,
                init_scale=0.3, factor=FactorConfig(kappa=0.8, tau="q0.5"), seed=1)
    base.update(kw)
    return FederationConfig(**base)


def assert_same_params(p, q, atol=0.0):
    for A, B in zip(p.weights, q.weights):
        np.testing.assert_allclose(A, B, rtol=0, atol=atol)
    np.testing.assert_allclose(p.a, q.a, rtol=0, atol=atol)


# -- server primitives -------------------------------------------------------


def test_sample_clients_examples():
    assert sample_clients(5, 5, derive_rng(0)) == [0, 1, 2, 3, 4]
    assert sample_clients(1, 1, derive_rng(0)) == [0]
    s = sample_clients(20, 7, derive_rng(3))
    assert len(set(s)) == 7 and all(0 <= i < 20 for i in s)
    with pytest.raises(ContractError):
        sample_clients(3, 0, derive_rng(0))
    with pytest.raises(ContractError):
        sample_clients(3, 4, derive_rng(0))


def test_sample_clients_frequency():
    C, K, N = 10, 3, 10_000
    counts = np.zeros(C)
    for t in range(N):
        counts[sample_clients(C, K, derive_rng(0, [("sample", t)]))] += 1
    p = K / C
    sigma = math.sqrt(p * (1 - p) / N)
    assert np.all(np.abs(counts / N - p) <= 3 * sigma)


def test_aggregate_examples():
    D = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(aggregate_shared([D], [7]), D)
    np.testing.assert_array_equal(aggregate_shared([D, -D], [1, 1]), np.zeros_like(D))
    assert aggregate_shared([np.zeros(1), np.full(1, 4.0)], [1, 3])[0] == 3.0
    with pytest.raises(ContractError):
        aggregate_shared([np.zeros(2), np.zeros(3)], [1, 1])
    with pytest.raises(ContractError):
        aggregate_shared([], [])


def test_apply_global_update_examples():
    rng = np.random.default_rng(0)
    W, D = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    np.testing.assert_array_equal(apply_global_update(W, D, 0.0), W)
    np.testing.assert_array_equal(apply_global_update(W, -W, 1.0), np.zeros_like(W))
    np.testing.assert_allclose(apply_global_update(W, D, 2.0) - W, 2 * (apply_global_update(W, D, 1.0) - W), atol=1e-14)
    with pytest.raises(ContractError):
        apply_global_update(W, D[:2], 1.0)


def _structured_inputs(rng, n_clients=6, d_in=8, units=6):
    base = rng.standard_normal((d_in, 2)) @ rng.standard_normal((2, units))
    return [base + 0.1 * rng.standard_normal(base.shape) for _ in range(n_clients)]


def test_repartition_common_row_and_flips():
    rng = np.random.default_rng(1)
    fa = _structured_inputs(rng)
    units, d_in = 6, 8
    common = rng.standard_normal((units, d_in))
    base_rows = [common.copy() for _ in fa]
    prev = np.zeros(units, bool)
    server_W = rng.standard_normal((units, d_in))
    part, W, flips = repartition_dynamic(1, prev, fa, base_rows, [1.0] * len(fa), server_W, FactorConfig(kappa=0.8))
    joined = part.zeta & ~prev
    assert joined.any()
    np.testing.assert_allclose(W[joined], common[joined], atol=1e-14)
    np.testing.assert_array_equal(W[~joined], server_W[~joined])
    assert flips == int(np.sum(part.zeta != prev))


def test_repartition_weighted_base_and_no_change():
    rng = np.random.default_rng(2)
    fa = _structured_inputs(rng, n_clients=2)
    rows = [np.zeros((6, 8)), np.full((6, 8), 4.0)]
    part, W, _ = repartition_dynamic(1, np.zeros(6, bool), fa, rows, [1, 3], np.zeros((6, 8)), FactorConfig(kappa=0.8))
    np.testing.assert_array_equal(W[part.zeta], 3.0)
    # same mask as before: server matrix is left alone
    again, W2, flips = repartition_dynamic(1, part.zeta, fa, rows, [1, 3], W, FactorConfig(kappa=0.8))
    np.testing.assert_array_equal(again.zeta, part.zeta)
    assert flips == 0
    np.testing.assert_array_equal(W2, W)
    with pytest.raises(ContractError):
        repartition_dynamic(1, part.zeta, fa[:1], rows[:1], [1], W, FactorConfig())


# -- driver ------------------------------------------------------------------


def test_zero_rounds_is_initial_state(fed):
    clients, _ = fed
    res = run_experiment(small_cfg(algorithm="fedavg", T=0), clients)
    assert len(res) == 1 and res.records[0].t == 0
    init = init_params(res.model, [1], derive_rng(1, [("init", 0)]))
    assert_same_params(res.server, init)
    for p in res.clients.values():
        assert_same_params(p, init)


def test_records_and_weighted_accuracy(fed):
    clients, _ = fed
    res = run_experiment(small_cfg(algorithm="fedfac_static"), clients)
    assert [r.t for r in res] == list(range(5))
    for r in res.records[1:]:
        assert r.sampled == list(range(8))
        num = sum(r.client_n[c] * r.client_acc[c] for c in r.client_acc)
        assert r.weighted_acc == pytest.approx(num / sum(r.client_n[c] for c in r.client_acc), abs=1e-12)
        assert r.min_client_acc <= r.weighted_acc <= r.max_client_acc


@pytest.mark.parametrize("variant", [dict(factor=FactorConfig(tau="-inf")), dict(split_layers=())])
def test_reduces_to_fedavg(fed, variant):
    clients, _ = fed
    ref = run_experiment(small_cfg(algorithm="fedavg", participation_rate=0.5), clients)
    res = run_experiment(small_cfg(algorithm="fedfac_static", participation_rate=0.5, **variant), clients)
    for a, b in zip(ref, res):
        assert a.sampled == b.sampled
        assert abs(a.train_loss - b.train_loss) <= 1e-12
    assert_same_params(ref.server, res.server, atol=1e-12)
    for c in ref.clients:
        assert_same_params(ref.clients[c], res.clients[c], atol=1e-12)


def _perturb_client0(clients):
    out = list(clients)
    c0 = clients[0]
    out[0] = ClientDataset(0, c0.X_train * 1.7 + 0.3, 1.0 - c0.y_train, c0.X_test, c0.y_test)
    return out


def test_all_personalized_clients_are_isolated(fed):
    clients, _ = fed
    cfg = dict(algorithm="fedfac_static", hidden_widths=(10, 6), split_layers=(1, 2),
               factor=FactorConfig(kappa=0.8, tau="inf"), train_output_weights=False)
    a = run_experiment(small_cfg(**cfg), clients)
    b = run_experiment(small_cfg(**cfg), _perturb_client0(clients))
    assert not np.array_equal(a.clients[0].weights[0], b.clients[0].weights[0])
    for c in range(1, 8):
        assert_same_params(a.clients[c], b.clients[c])


def test_shared_units_propagate_changes(fed):
    # companion to the isolation test: with shared rows a client's data reaches the others
    clients, _ = fed
    a = run_experiment(small_cfg(algorithm="fedfac_static"), clients)
    b = run_experiment(small_cfg(algorithm="fedfac_static"), _perturb_client0(clients))
    assert not np.array_equal(a.clients[1].weights[0], b.clients[1].weights[0])


def test_local_only_never_mixes(fed):
    clients, _ = fed
    a = run_experiment(small_cfg(algorithm="local_only"), clients)
    b = run_experiment(small_cfg(algorithm="local_only"), _perturb_client0(clients))
    for c in range(1, 8):
        assert_same_params(a.clients[c], b.clients[c])


def test_worker_count_does_not_change_results(fed):
    clients, _ = fed
    runs = [run_experiment(small_cfg(algorithm="fedfac_dynamic", participation_rate=0.75, workers=w), clients)
            for w in (1, 4)]
    for r1, r4 in zip(*runs):
        assert r1.sampled == r4.sampled
        assert r1.train_loss == r4.train_loss
        assert r1.client_acc == r4.client_acc
        assert r1.stability == r4.stability
        for l in r1.partitions:
            np.testing.assert_array_equal(r1.partitions[l].zeta, r4.partitions[l].zeta)
    assert_same_params(runs[0].server, runs[1].server)


def test_sampled_clients_hold_server_shared_rows(fed):
    clients, _ = fed
    for alg in ("fedfac_static", "fedfac_dynamic", "fedavg"):
        res = run_experiment(small_cfg(algorithm=alg, participation_rate=0.5), clients)
        rows = res.server.shared_rows(1)
        for c in res.records[-1].sampled:
            np.testing.assert_array_equal(res.clients[c].weights[0][rows], res.server.weights[0][rows])
            np.testing.assert_array_equal(res.clients[c].shared[1], res.server.shared[1])


def test_dynamic_records_stability_and_flips(fed):
    clients, _ = fed
    res = run_experiment(small_cfg(algorithm="fedfac_dynamic", T=5), clients)
    prev = res.init_partitions[1].zeta
    for r in res.records[1:]:
        z = r.partitions[1].zeta
        assert r.flips[1] == int(np.sum(z != prev))
        assert r.stability[1] == pytest.approx(1 - r.flips[1] / z.size)
        prev = z


def test_random_split_matches_factor_count(fed):
    clients, _ = fed
    fac = run_experiment(small_cfg(algorithm="fedfac_static", T=0), clients)
    rnd = run_experiment(small_cfg(algorithm="random_split", T=0), clients)
    assert rnd.init_partitions[1].zeta.sum() == fac.init_partitions[1].zeta.sum()


def test_fedsplit_true_requires_partition(fed):
    clients, truth = fed
    with pytest.raises(ContractError):
        run_experiment(small_cfg(algorithm="fedsplit_true"), clients)
    res = run_experiment(small_cfg(algorithm="fedsplit_true", T=1), clients, true_partition={1: truth.shared_mask})
    np.testing.assert_array_equal(res.server.shared[1], truth.shared_mask)


def test_empty_clients_are_excluded(fed):
    clients, _ = fed
    empty = ClientDataset(99, np.zeros((0, 12)), [], clients[0].X_test, clients[0].y_test)
    with pytest.warns(UserWarning, match="client 99"):
        res = run_experiment(small_cfg(algorithm="fedavg", T=1), list(clients) + [empty])
    assert 99 not in res.clients
    with pytest.raises(ContractError), pytest.warns(UserWarning):
        run_experiment(small_cfg(algorithm="fedavg", T=1), [empty])


def test_invalid_config_rejected(fed):
    clients, _ = fed
    with pytest.raises(ContractError):
        run_experiment(small_cfg(algorithm="fedprox"), clients)
    with pytest.raises(ContractError):
        run_experiment(small_cfg(clients_per_round=9), clients)


# -- new clients and ablations -----------------------------------------------


def _trained_server(fed):
    clients, _ = fed
    return run_experiment(small_cfg(algorithm="fedfac_static"), clients)


def test_localtrain_baseline_and_freeze(fed):
    res = _trained_server(fed)
    new = fed[0][0]
    base, p0 = predict_new_client_localtrain(res.model, res.server, new, 0, 0.1, derive_rng(4))
    np.testing.assert_array_equal(base.scores, predict_score(res.model, p0, new.X_test))
    rows = res.server.shared_rows(1)
    np.testing.assert_array_equal(p0.weights[0][rows], res.server.weights[0][rows])
    pred, p = predict_new_client_localtrain(res.model, res.server, new, 5, 0.1, derive_rng(4))
    np.testing.assert_array_equal(p.weights[0][rows], res.server.weights[0][rows])
    assert not np.array_equal(p.weights[0][~rows], p0.weights[0][~rows])
    np.testing.assert_array_equal(pred.labels, (pred.scores > 0.5).astype(float))
    _, pu = predict_new_client_localtrain(res.model, res.server, new, 5, 0.1, derive_rng(4), freeze_shared=False)
    assert not np.array_equal(pu.weights[0][rows], res.server.weights[0][rows])


def test_localtrain_needs_training_data(fed):
    res = _trained_server(fed)
    c = fed[0][0]
    empty = ClientDataset(50, np.zeros((0, 12)), [], c.X_test, c.y_test)
    with pytest.raises(ContractError, match="ensemble"):
        predict_new_client_localtrain(res.model, res.server, empty, 3, 0.1, derive_rng(0))


def test_ensemble_single_model_identity(fed):
    res = _trained_server(fed)
    new = fed[0][3]
    pred = predict_new_client_ensemble(res.model, [res.clients[2]], new)
    np.testing.assert_array_equal(pred.scores, predict_score(res.model, res.clients[2], new.X_test))
    with pytest.raises(ContractError):
        predict_new_client_ensemble(res.model, [], new)


def test_ensemble_tie_goes_to_zero():
    cfg = ModelConfig([1, 1, 1])
    w = np.array([[math.log(9.0)]])
    hi = SplitParams([w.copy()], np.array([1.0]), {})
    lo = SplitParams([w.copy()], np.array([-1.0]), {})
    ds = ClientDataset(0, np.zeros((0, 1)), [], np.ones((1, 1)), [1.0])
    np.testing.assert_allclose(predict_score(cfg, hi, ds.X_test), [0.9], atol=1e-15)
    pred = predict_new_client_ensemble(cfg, [hi, lo], ds)
    assert pred.scores[0] == pytest.approx(0.5, abs=1e-15)
    assert pred.labels[0] == 0.0 and pred.accuracy == 0.0
    # zero pre-activation gives an exact 0.5 mean
    flat = SplitParams([np.zeros((1, 1))], np.array([1.0]), {})
    exact = predict_new_client_ensemble(cfg, [flat, flat], ds)
    assert exact.scores[0] == 0.5 and exact.labels[0] == 0.0


def test_mask_group_rows():
    cfg = ModelConfig([5, 6, 1], init_scale=0.5)
    shared = np.array([True, False, True, False, False, True])
    p = init_params(cfg, [1], derive_rng(0), shared={1: shared})
    for group, mask in (("shared", shared), ("personalized", ~shared)):
        q = mask_group(cfg, p, group, derive_rng(1))
        assert np.all(q.weights[0][mask] != p.weights[0][mask])
        np.testing.assert_array_equal(q.weights[0][~mask], p.weights[0][~mask])
        np.testing.assert_array_equal(q.a, p.a)
    none = init_params(cfg, [1], derive_rng(0), shared={1: np.zeros(6, bool)})
    assert_same_params(mask_group(cfg, none, "shared", derive_rng(1)), none)
    with pytest.raises(ContractError):
        mask_group(cfg, p, "bias", derive_rng(1))
    with pytest.raises(ContractError):
        mask_group(cfg, init_params(cfg, [], derive_rng(0)), "shared", derive_rng(1))


# -- artifacts ---------------------------------------------------------------


def test_writers(fed, tmp_path):
    clients, _ = fed
    res = run_experiment(small_cfg(algorithm="fedfac_dynamic", T=3), clients)
    write_metrics_csv(tmp_path / "m.csv", res)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "round,algorithm,seed,train_loss,weighted_acc,min_client_acc,max_client_acc"
    assert [l.split(",")[0] for l in lines[1:]] == ["1", "2", "3"]
    write_clients_csv(tmp_path / "c.csv", res)
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 1 + 3 * 8
    write_stability_csv(tmp_path / "s.csv", res)
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 4
    write_partition_json(tmp_path / "p.json", res)
    doc = json.loads((tmp_path / "p.json").read_text())
    assert doc["algorithm"] == "fedfac_dynamic" and doc["layers"] == [1]
    assert [r["round"] for r in doc["rounds"]] == [1, 2, 3]
    assert len(doc["rounds"][0]["layers"]["1"]["zeta"]) == 10
