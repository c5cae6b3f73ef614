import copy
import math

import numpy as np
import pytest

from binary_net import Model, TrainConfig, dense_architecture, sign_binarize, train_epoch
from data import partition_iid, partition_unbalanced
from errors import ConfigError, ShapeError
from federation import (
    BIML,
    FA_REAL,
    FULL,
    UP_DOWN,
    UP_ONLY,
    ClientState,
    Federation,
    aggregate_weighted_mean,
    hybrid_controller,
    ledger_charge,
    make_strategy,
    select_participants,
    update_mix,
)
from mlpu import MlpuEstimator, count_positive

DESK_N = 784 * 64 + 64 * 10


def _client(w_aux, client_id=0):
    model = Model.build(dense_architecture((1, len(w_aux)), hidden=2, num_classes=2),
                        rng=np.random.default_rng(0))
    layer = model.weight_layers[0]
    layer.w_aux = np.tile(np.asarray(w_aux, dtype=float)[:, None], (1, 2))
    layer.clip_and_binarize()
    return ClientState(client_id, model, np.arange(4), 1.0, np.random.default_rng(client_id))


def _federation(blobs, strategy, clients=4, participation=1.0, seed=0):
    train, test = blobs
    return Federation.create(
        dense_architecture((1, 8), hidden=6, num_classes=3), train, test,
        partition_iid(train, clients, seed=seed), strategy,
        TrainConfig(batch_size=16, learning_rate_schedule=[(0, 0.01)]),
        participation=participation, seed=seed,
    )


# ============================================================
# Aggregation
# ============================================================

def test_aggregate_examples():
    up = [np.array([1.0]), np.array([-1.0])]
    assert aggregate_weighted_mean(up, [1, 1])[0] == 0.0
    assert aggregate_weighted_mean(up, [3, 1])[0] == 0.5


def test_equal_shard_tally_is_exact():
    uploads = [np.array([1.0])] * 75 + [np.array([-1.0])] * 25
    w_tilde = aggregate_weighted_mean(uploads, [600] * 100)
    assert w_tilde[0] == 0.5
    assert count_positive(w_tilde[0], 100) == 75


def test_binary_aggregate_lies_on_lattice(rng):
    M = 7
    uploads = [sign_binarize(rng.uniform(-1, 1, size=50)) for _ in range(M)]
    w_tilde = aggregate_weighted_mean(uploads, [10] * M)
    k = (w_tilde * M + M) / 2
    np.testing.assert_allclose(k, np.rint(k), atol=1e-12)


def test_aggregate_shape_errors():
    with pytest.raises(ShapeError):
        aggregate_weighted_mean([np.zeros(2), np.zeros(3)], [1, 1])
    with pytest.raises(ShapeError):
        aggregate_weighted_mean([np.zeros(2)], [1, 1])
    with pytest.raises(ShapeError):
        aggregate_weighted_mean([], [])


# ============================================================
# Client updates
# ============================================================

def test_mix_endpoints_and_arithmetic():
    w_tilde = [np.full((3, 2), -0.4), np.zeros((2, 2))]

    client = _client([0.5, -0.2, 0.1])
    before = client.model.weight_layers[0].w_aux.copy()
    update_mix(client, w_tilde, 0.0)
    np.testing.assert_array_equal(client.model.weight_layers[0].w_aux, before)

    client = _client([0.5, -0.2, 0.1])
    update_mix(client, w_tilde, 1.0)
    np.testing.assert_array_equal(client.model.weight_layers[0].w_aux, -1.0)

    client = _client([0.5, 0.5, 0.5])
    update_mix(client, w_tilde, 0.3)
    np.testing.assert_allclose(client.model.weight_layers[0].w_aux, 0.05)
    np.testing.assert_array_equal(client.model.weight_layers[0].w_bin, 1.0)


def test_mix_rejects_beta_out_of_range():
    with pytest.raises(ConfigError):
        update_mix(_client([0.1]), [np.zeros((1, 2)), np.zeros((2, 2))], 1.5)


# ============================================================
# Strategy / controller / participation
# ============================================================

def test_biml_with_beta_is_rejected():
    with pytest.raises(ConfigError) as info:
        make_strategy(kind=BIML, alpha=1.25, beta=0.5)
    assert info.value.field.startswith("strategy")
    assert info.value.exit_code == 2


def test_strategy_parameter_rules():
    with pytest.raises(ConfigError):
        make_strategy(kind=UP_ONLY)
    with pytest.raises(ConfigError):
        make_strategy(kind=BIML, alpha=1.0)
    with pytest.raises(ConfigError):
        make_strategy(kind=FULL, hybrid_switch_epoch=5)
    assert make_strategy(kind=BIML, alpha=1.25, hybrid_switch_epoch=20).label == "hybrid-T20"
    assert make_strategy(kind=UP_DOWN, beta=0.1).label == UP_DOWN


def test_hybrid_controller_switches_after_T():
    assert hybrid_controller(1, 20) == BIML
    assert hybrid_controller(20, 20) == BIML
    assert hybrid_controller(21, 20) == FA_REAL
    assert hybrid_controller(500, None) == BIML


def test_select_participants(rng):
    clients = [_client([0.1], i) for i in range(10)]
    picked = select_participants(clients, 0.5, rng)
    ids = [c.client_id for c in picked]
    assert len(ids) == 5 and ids == sorted(set(ids))
    assert len(select_participants(clients, 1.0, rng)) == 10
    assert len(select_participants(clients, 0.05, rng)) == 1
    with pytest.raises(ConfigError):
        select_participants(clients, 0.0, rng)


# ============================================================
# Ledger
# ============================================================

def test_binary_upload_is_about_32_times_smaller():
    fa_up, _ = ledger_charge(FA_REAL, DESK_N, 2, 10, 10)
    biml_up, _ = ledger_charge(BIML, DESK_N, 2, 10, 10)
    assert biml_up == 10 * (DESK_N + 64)
    assert fa_up / biml_up == pytest.approx(31.96, abs=0.01)
    fa_up, _ = ledger_charge(FA_REAL, 10 ** 6, 0, 100, 100)
    biml_up, _ = ledger_charge(BIML, 10 ** 6, 0, 100, 100)
    assert fa_up / biml_up == 32


def test_lattice_downlink_bits():
    _, down = ledger_charge(BIML, 1000, 2, 100, 100)
    assert down == math.ceil(math.log2(101)) * 1000 + 64 == 7064
    _, down = ledger_charge(BIML, 1000, 2, 100, 100, equal_shards=False)
    assert down == 32 * 1000 + 64
    _, down = ledger_charge(UP_DOWN, 1000, 2, 100, 100)
    assert down == 1000 + 64
    up, down = ledger_charge(FULL, 1000, 2, 10, 4)
    assert (up, down) == (4 * 32064, 32064)


def test_ledger_rejects_bad_participant_count():
    with pytest.raises(ConfigError):
        ledger_charge(BIML, 10, 1, 10, 11)
    with pytest.raises(ConfigError):
        ledger_charge("BiFL-Other", 10, 1, 10, 5)


# ============================================================
# Rounds
# ============================================================

def test_identical_seeds_give_identical_runs(blobs):
    strategy = make_strategy(kind=BIML, alpha=1.25, estimator="exact")
    a = _federation(blobs, strategy).run(2)
    b = _federation(blobs, strategy).run(2)
    assert [r.test_accuracy for r in a] == [r.test_accuracy for r in b]
    assert [r.test_loss for r in a] == [r.test_loss for r in b]


def test_full_exchange_synchronizes_clients(blobs):
    fed = _federation(blobs, make_strategy(kind=FULL))
    fed.run(1)
    first = fed.clients[0].model.weight_layers
    for client in fed.clients[1:]:
        for a, b in zip(first, client.model.weight_layers):
            np.testing.assert_array_equal(a.w_aux, b.w_aux)
            assert a.amplitude == b.amplitude


def test_fa_real_runs_real_valued_models(blobs):
    fed = _federation(blobs, make_strategy(kind=FA_REAL))
    result = fed.run(1)[0]
    assert not fed.clients[0].model.binarized
    N = fed.clients[0].model.num_weight_params
    assert result.uplink_bits == 4 * 32 * N
    assert result.downlink_bits == 32 * N


def test_up_only_and_up_down_share_trajectory(blobs):
    up_only = _federation(blobs, make_strategy(kind=UP_ONLY, beta=0.5))
    up_down = _federation(blobs, make_strategy(kind=UP_DOWN, beta=0.5))
    a, b = up_only.run(2), up_down.run(2)
    assert [r.test_accuracy for r in a] == [r.test_accuracy for r in b]
    for x, y in zip(up_only.clients[0].model.weight_layers, up_down.clients[0].model.weight_layers):
        np.testing.assert_array_equal(x.w_aux, y.w_aux)
    assert a[0].uplink_bits == b[0].uplink_bits
    assert a[0].downlink_bits > b[0].downlink_bits


def test_biml_round_keeps_binary_invariants(blobs):
    fed = _federation(blobs, make_strategy(kind=BIML, alpha=1.25, estimator="exact"))
    result = fed.run(1)[0]
    assert result.strategy == BIML
    assert result.estimator.estimates + result.estimator.unanimous == 4 * fed.clients[0].model.num_weight_params
    for client in fed.clients:
        for layer in client.model.weight_layers:
            assert np.all(np.abs(layer.w_aux) <= 1.0)
            np.testing.assert_array_equal(layer.w_bin, sign_binarize(layer.w_aux))
    assert fed.ledger.uplink_total == result.uplink_bits_cum


def test_hybrid_switches_to_real_exchange(blobs):
    fed = _federation(blobs, make_strategy(kind=BIML, alpha=1.25, hybrid_switch_epoch=1,
                                           estimator="exact"))
    history = fed.run(2)
    assert [r.strategy for r in history] == [BIML, FA_REAL]
    assert not any(c.model.binarized for c in fed.clients)


def test_partial_participation(blobs):
    fed = _federation(blobs, make_strategy(kind=BIML, alpha=1.25, estimator="exact"),
                      participation=0.5)
    result = fed.run(1)[0]
    assert len(result.participants) == 2
    N, L = fed.clients[0].model.num_weight_params, fed.clients[0].model.num_weight_layers
    assert result.uplink_bits == 2 * (N + 32 * L)


def test_single_client_full_matches_centralized_training(blobs):
    train, _ = blobs
    fed = _federation(blobs, make_strategy(kind=FULL), clients=1)
    client = fed.clients[0]
    central = copy.deepcopy(client.model)
    rng = copy.deepcopy(client.rng)
    shard = client.shard
    fed.run(3)
    for epoch in range(3):
        train_epoch(central, train.images[shard], train.labels[shard], fed.ctx.train_cfg, epoch, rng)
    for a, b in zip(client.model.weight_layers, central.weight_layers):
        np.testing.assert_array_equal(a.w_aux, b.w_aux)
        np.testing.assert_array_equal(a.w_bin, b.w_bin)
        assert a.amplitude == b.amplitude


def test_unbalanced_biml_round_uses_virtual_client_counts(blobs):
    train, test = blobs
    partition = partition_unbalanced(train, 5, seed=0)
    fed = Federation.create(
        dense_architecture((1, 8), hidden=6, num_classes=3), train, test, partition,
        make_strategy(kind=BIML, alpha=1.25, estimator="exact"),
        TrainConfig(batch_size=16, learning_rate_schedule=[(0, 0.01)]), seed=0,
    )
    assert not fed.ctx.equal_shards
    mass = float(sum(c.shard_size for c in fed.clients))
    assert sorted({mass / c.shard_size for c in fed.clients}) == [2.5, 5.0, 10.0]

    # replay local training to recover each client's pre-download weights
    trained = []
    for c in fed.clients:
        model = copy.deepcopy(c.model)
        train_epoch(model, train.images[c.shard], train.labels[c.shard], fed.ctx.train_cfg, 0,
                    copy.deepcopy(c.rng))
        trained.append(model)
    result = fed.step()

    est = MlpuEstimator(alpha=1.25, mode="exact")
    for c, model in zip(fed.clients, trained):
        M_c = mass / c.shard_size
        for li, layer in enumerate(c.model.weight_layers):
            w_tilde = fed.server.aggregate[li]
            expected = est.update(model.weight_layers[li].w_aux, w_tilde, M_c,
                                  M_P=count_positive(w_tilde, M_c))
            np.testing.assert_allclose(layer.w_aux, expected, atol=1e-12)
            assert np.all(np.abs(layer.w_aux) <= 1.0)
            np.testing.assert_array_equal(layer.w_bin, sign_binarize(layer.w_aux))
    N = fed.clients[0].model.num_weight_params
    assert result.estimator.estimates + result.estimator.unanimous == 5 * N


def test_single_client_biml_is_alpha_scaling(blobs):
    fed = _federation(blobs, make_strategy(kind=BIML, alpha=1.25, estimator="exact"), clients=1)
    result = fed.run(1)[0]
    assert result.estimator.unanimous == fed.clients[0].model.num_weight_params
    assert result.estimator.estimates == 0
