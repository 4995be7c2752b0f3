import math
from dataclasses import replace

import numpy as np
import pytest

from app.core.exceptions import ProtocolError
from app.dictpfl import prme
from app.dictpfl.he import accounting_params, make_backend, modeled_ciphertext_bytes
from app.dictpfl.protocol import (
    METRICS_HEADER,
    RoundMetrics,
    ServerState,
    Upload,
    aggregate,
    build_federation,
    compare_strategies,
    load_task,
    metrics_csv,
    run_baseline_full,
    run_baseline_sae,
    run_baseline_topk,
    run_round,
    sae_sensitivity_indices,
    server_aggregate,
    simulate,
    split_train_test,
    summarize,
)
from app.dictpfl.trainer import local_train
from app.schemas.schemas import RunConfig, Strategy


def small_config(**overrides):
    values = {
        "clients": 3,
        "rounds": 4,
        "classes": 3,
        "dim": 6,
        "hidden": 8,
        "samples_per_class": 20,
        "rank": 2,
        "seed": 5,
    }
    values.update(overrides)
    return RunConfig(**values)


def mean_local_update(federation):
    flats = []
    for client in federation.clients:
        grads, _ = local_train(client.model, client.shard, federation.config.epochs, federation.config.lr)
        flats.append(client.model.flatten(grads))
    return np.mean(flats, axis=0)


# ===== AGGREGATION TESTS =====

@pytest.fixture(scope="module")
def toy():
    """Toy RLWE backend with keys"""
    backend = make_backend("toy-rlwe")
    return backend, backend.keygen(0)


def test_aggregate_identical_uploads(toy):
    """Test the mean of equal uploads is the upload"""
    backend, keys = toy
    v = np.linspace(-1, 1, 600)
    uploads = [backend.pack_encrypt(keys.public_key, v, np.random.default_rng(i)) for i in range(4)]
    mean = backend.decrypt_unpack(keys.secret_key, aggregate(backend, uploads), 600)
    assert np.max(np.abs(mean - v)) <= 1e-3


def test_aggregate_opposite_uploads(toy):
    """Test v and -v average to zero"""
    backend, keys = toy
    v = np.linspace(-1, 1, 50)
    uploads = [backend.pack_encrypt(keys.public_key, x, np.random.default_rng(1)) for x in (v, -v)]
    assert np.max(np.abs(backend.decrypt_unpack(keys.secret_key, aggregate(backend, uploads), 50))) <= 1e-4


def test_aggregate_random_mean(toy):
    """Test five random uploads average to the plaintext mean"""
    backend, keys = toy
    gen = np.random.default_rng(2)
    vectors = [gen.uniform(-2, 2, size=1500) for _ in range(5)]
    uploads = [backend.pack_encrypt(keys.public_key, v, gen) for v in vectors]
    mean = backend.decrypt_unpack(keys.secret_key, aggregate(backend, uploads), 1500)
    assert np.max(np.abs(mean - np.mean(vectors, axis=0))) <= 1e-3


def test_aggregate_chunk_mismatch_names_client(toy):
    """Test a client with a different chunk count aborts aggregation"""
    backend, keys = toy
    slots = backend.params.slots
    uploads = [
        backend.pack_encrypt(keys.public_key, np.ones(slots)),
        backend.pack_encrypt(keys.public_key, np.ones(slots + 1)),
    ]
    with pytest.raises(ProtocolError) as exc:
        aggregate(backend, uploads, client_ids=[7, 9])
    assert exc.value.client_id == 9


def test_server_rejects_plaintext_model_content():
    """Test the server refuses plaintext gradients under encrypted-only strategies"""
    backend = make_backend("mock")
    server = ServerState(clients=1, strategy=Strategy.DICTPFL, round=1)
    with pytest.raises(ProtocolError):
        server_aggregate(server, backend, [Upload(client_id=0, round=1, ciphertexts=(), plaintext=b"\x00" * 8)])


def test_server_rejects_stale_round():
    """Test uploads from another round"""
    backend = make_backend("mock")
    server = ServerState(clients=1, strategy=Strategy.FULL, round=2)
    with pytest.raises(ProtocolError):
        server_aggregate(server, backend, [Upload(client_id=0, round=1, ciphertexts=())])


def test_server_counts_uploads():
    """Test a missing client upload"""
    backend = make_backend("mock")
    server = ServerState(clients=2, strategy=Strategy.FULL, round=1)
    with pytest.raises(ProtocolError):
        server_aggregate(server, backend, [Upload(client_id=0, round=1, ciphertexts=())])


# ===== ROUND TESTS =====

def test_single_client_round_is_local_step():
    """Test K = 1 reproduces a local SGD step"""
    federation = build_federation(small_config(clients=1, strategy="full"))
    before = federation.clients[0].model.trainable_vector()
    expected = before - federation.config.lr * mean_local_update(federation)
    clients, server, metrics = run_round(federation)
    assert np.allclose(clients[0].model.trainable_vector(), expected, atol=1e-12)
    assert server.round == metrics.round == 1


def test_three_client_mean_with_mock():
    """Test the table update is the mean of local table gradients"""
    federation = build_federation(small_config(strategy="dictpfl"))
    before = federation.clients[0].model.trainable_vector()
    expected = mean_local_update(federation)
    federation.run_round()
    applied = (before - federation.clients[0].model.trainable_vector()) / federation.config.lr
    assert np.allclose(applied, expected, atol=1e-12)


def test_three_client_mean_with_toy_rlwe():
    """Test the same update survives real encryption"""
    federation = build_federation(small_config(strategy="dictpfl", backend="toy-rlwe"))
    before = federation.clients[0].model.trainable_vector()
    expected = mean_local_update(federation)
    federation.run_round()
    applied = (before - federation.clients[0].model.trainable_vector()) / federation.config.lr
    assert np.max(np.abs(applied - expected)) <= 1e-3


def test_clients_stay_identical():
    """Test every client holds the same model and mask after each round"""
    federation = build_federation(small_config(strategy="dictpfl", prune=0.5, tau=1, rounds=6))
    for _ in range(6):
        federation.run_round()
        reference = federation.clients[0]
        for client in federation.clients[1:]:
            assert np.array_equal(client.model.trainable_vector(), reference.model.trainable_vector())
            assert np.array_equal(client.prune.mask, reference.prune.mask)


def test_dictpfl_matches_plaintext_fedavg():
    """Test DictPFL without pruning follows FedAvg on the factorized model for 20 rounds"""
    config = small_config(strategy="dictpfl", prune=0.0, rounds=20)
    federation = build_federation(config)
    shards = [client.shard for client in federation.clients]
    model = federation.clients[0].model
    for _ in range(20):
        updates = []
        for shard in shards:
            grads, _ = local_train(model, shard, config.epochs, config.lr)
            updates.append(model.flatten(grads))
        model = model.apply_flat_update(np.mean(updates, axis=0), config.lr)
        federation.run_round()
        assert np.max(np.abs(federation.clients[0].model.trainable_vector() - model.trainable_vector())) <= 1e-10



def test_diverged_masks_abort_without_advancing_round():
    """Test a client whose mask drifted aborts the round and leaves the server round alone"""
    federation = build_federation(small_config(strategy="dictpfl", prune=0.5, tau=1, reactivation=False))
    drifted = federation.clients[1]
    history = prme.end_round(drifted.prune, np.arange(drifted.prune.size, dtype=float))
    federation.clients[1] = replace(drifted, prune=history)
    before = list(federation.clients)

    with pytest.raises(ProtocolError) as exc:
        federation.run_round()
    assert exc.value.client_id == 1
    assert federation.server.round == 0
    assert federation.clients == before
    assert federation.history == []

@pytest.mark.slow
def test_alignment_over_randomized_rounds():
    """Test 200 randomized DictPFL rounds never misalign uploads"""
    gen = np.random.default_rng(31)
    for run in range(10):
        config = small_config(
            strategy="dictpfl",
            seed=int(gen.integers(0, 2**31)),
            prune=float(gen.choice([0.2, 0.5, 0.7, 0.9])),
            tau=int(gen.integers(1, 4)),
            alpha=float(gen.choice([0.3, 1.0, math.inf])),
            clients=int(gen.integers(2, 5)),
            rounds=20,
        )
        rows = build_federation(config).run()
        assert len(rows) == 20


# ===== BASELINE TESTS =====

def test_full_baseline_counts():
    """Test ciphertext count and byte identities of the full baseline"""
    config = small_config(rounds=2)
    rows = run_baseline_full(config)
    params = 6 * 8 + 8 * 3 + 8 + 3
    per_client = math.ceil(params / accounting_params().slots)
    for row in rows:
        assert row.ct_count == per_client * 3 + per_client
        assert row.ciphertext_up == 3 * per_client * modeled_ciphertext_bytes(accounting_params())
        assert row.plaintext_up == row.plaintext_down == 0
        assert row.retained == params


def test_full_baseline_matches_plaintext():
    """Test encrypted full training follows unencrypted FedAvg"""
    config = small_config(rounds=3)
    full = run_baseline_full(config)
    plain = simulate(config.model_copy(update={"strategy": Strategy.PLAINTEXT}))[0]
    for a, b in zip(full, plain):
        assert a.loss == pytest.approx(b.loss, abs=1e-12)
        assert b.ciphertext_up == 0 and b.plaintext_up > 0


def test_topk_of_whole_model_equals_full():
    """Test top-k over every layer behaves like the full baseline"""
    config = small_config(rounds=3)
    assert run_baseline_topk(config, 2) == run_baseline_full(config)


def test_topk_zero_layers_is_idle():
    """Test top-0 neither communicates nor learns"""
    rows = run_baseline_topk(small_config(rounds=3), 0)
    assert all(row.ciphertext_up == 0 and row.ct_count == 0 for row in rows)
    assert len({row.loss for row in rows}) == 1


def test_sae_full_fraction_equals_full():
    """Test encrypting everything is the full baseline"""
    config = small_config(rounds=3)
    sae = run_baseline_sae(config, 1.0)
    full = run_baseline_full(config)
    for a, b in zip(sae, full):
        assert a.ciphertext_up == b.ciphertext_up
        assert a.plaintext_up == 0
        assert a.loss == pytest.approx(b.loss, abs=1e-12)


def test_sae_partial_fraction_leaks_plaintext():
    """Test SaE sends the unencrypted remainder in the clear"""
    rows = run_baseline_sae(small_config(rounds=1), 0.1)
    params = 6 * 8 + 8 * 3 + 8 + 3
    encrypted = math.ceil(0.1 * params)
    assert rows[0].plaintext_up == 3 * (params - encrypted) * 4
    assert rows[0].plaintext_down == rows[0].plaintext_up


def test_sensitivity_indices():
    """Test the SaE mask size and ordering"""
    config = small_config(strategy="sae")
    federation = build_federation(config)
    train, _ = split_train_test(load_task(config), config.test_fraction, config.seed)
    indices = sae_sensitivity_indices(federation.clients[0].model, train, 0.25, config.seed)
    params = sum(federation.clients[0].model.trainable_size())
    assert indices.size == math.ceil(0.25 * params)
    assert np.all(np.diff(indices) > 0)
    # the default 10% mask is a prefix of the 25% ranking
    assert set(federation.sae_indices.tolist()) <= set(indices.tolist())


def test_dictpfl_sends_no_plaintext():
    """Test the server never sees plaintext model content under DictPFL"""
    rows, _ = simulate(small_config(strategy="dictpfl", rounds=5))
    assert all(row.plaintext_up == 0 and row.plaintext_down == 0 for row in rows)


def test_dictpfl_prunes_after_warm_up():
    """Test retained parameters drop once tau rounds of history exist"""
    rows, _ = simulate(small_config(strategy="dictpfl", rounds=6, prune=0.7, tau=3, reactivation=False))
    table = 2 * 8 + 2 * 3
    assert [row.retained for row in rows[:3]] == [table] * 3
    assert all(row.retained < table for row in rows[3:])
    assert all(row.reactivated == 0 for row in rows)


def test_backend_accounting_shows_savings():
    """Test DictPFL moves fewer ciphertext bytes than Full after warm-up"""
    config = RunConfig(rounds=5, seed=2, accounting="backend")
    dictpfl = simulate(config.model_copy(update={"strategy": Strategy.DICTPFL}))[0]
    full = run_baseline_full(config)
    assert all(d.ciphertext_up < f.ciphertext_up for d, f in zip(dictpfl[3:], full[3:]))


# ===== METRICS TESTS =====

def test_metrics_header():
    """Test the CSV column order"""
    assert METRICS_HEADER == [
        "round", "local_train_s", "encrypt_s", "upload_s", "aggregate_s", "download_s", "decrypt_s",
        "update_s", "ciphertext_up", "ciphertext_down", "plaintext_up", "plaintext_down", "ct_count",
        "loss", "accuracy", "retained", "reactivated",
    ]


def test_metrics_totals_and_non_negative():
    """Test totals equal the sum of parts"""
    rows, summary = simulate(small_config(strategy="dictpfl", timing="measured", rounds=2))
    for row in rows:
        assert row.total_seconds == pytest.approx(sum(getattr(row, p) for p in RoundMetrics.PHASES))
        assert all(getattr(row, name) >= 0 for name in METRICS_HEADER)
    assert summary.total_ciphertext_bytes == sum(r.ciphertext_up + r.ciphertext_down for r in rows)


def test_metrics_csv_is_deterministic():
    """Test identical config and seed give byte-identical CSV"""
    config = small_config(strategy="dictpfl", rounds=5, prune=0.5, tau=1)
    first = metrics_csv(simulate(config)[0])
    second = metrics_csv(simulate(config)[0])
    threaded = metrics_csv(simulate(config.model_copy(update={"threads": 3}))[0])
    assert first == second == threaded
    assert first.count("\r\n") == 6


def test_summary_rounds_to_target():
    """Test the first round reaching the target accuracy"""
    rows = [RoundMetrics(round=i, accuracy=acc) for i, acc in enumerate([0.2, 0.6, 0.9, 0.95], start=1)]
    assert summarize(Strategy.FULL, rows, target=0.85).rounds_to_target == 3
    assert summarize(Strategy.FULL, rows, target=0.99).rounds_to_target is None
    assert summarize(Strategy.FULL, rows).final_accuracy == 0.95


@pytest.mark.slow
def test_plaintext_fedavg_fits_separable_blobs():
    """Test FedAvg reaches 99% on well-separated blobs within 30 rounds"""
    config = RunConfig(strategy="plaintext", rounds=30, margin=8.0, lr=0.05, seed=1)
    _, summary = simulate(config)
    assert summary.final_accuracy >= 0.99


@pytest.mark.slow
def test_dictpfl_accuracy_close_to_full():
    """Test DictPFL at r=8, s=0.2 stays within two points of Full over five seeds"""
    gaps = []
    for seed in range(5):
        config = RunConfig(rounds=30, rank=8, prune=0.2, margin=6.0, lr=0.05, seed=seed)
        summaries = compare_strategies(config, [Strategy.DICTPFL, Strategy.FULL])
        gaps.append(summaries[Strategy.FULL].final_accuracy - summaries[Strategy.DICTPFL].final_accuracy)
    assert np.mean(gaps) <= 0.02
