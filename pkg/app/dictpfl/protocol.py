"""Client/server round engine for DictPFL and the baselines.

One round:

    local training -> selection (PrME, DictPFL only) -> pack_encrypt -> upload
    -> slot-wise sum and 1/K scaling on the server -> broadcast
    -> decrypt -> reactivation feedback -> model update

Clients only exchange immutable messages with the server. Ciphertexts travel
in their wire form; the server holds no secret key.
"""

import csv
import io
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import settings
from app.core.exceptions import ProtocolError
from app.dictpfl import prme, rng
from app.dictpfl.he import (
    Ciphertext,
    HeBackend,
    KeyPair,
    accounting_params,
    ciphertext_count,
    make_backend,
    modeled_ciphertext_bytes,
)
from app.dictpfl.netsim import NetProfile, get_profile, transfer_time
from app.dictpfl.trainer import (
    DataShard,
    Dataset,
    ToyModel,
    TrainMode,
    build_model,
    dirichlet_partition,
    evaluate,
    factorize,
    freeze_all_but_last,
    load_dataset,
    local_train,
    synth_task,
)
from app.schemas.schemas import Accounting, Layout, RunConfig, Strategy, Timing

logger = logging.getLogger(__name__)

ENCRYPTED_ONLY = {Strategy.DICTPFL, Strategy.FULL, Strategy.TOPK}


# ===== Messages =====

@dataclass(frozen=True)
class Upload:
    client_id: int
    round: int
    ciphertexts: Tuple[bytes, ...]
    plaintext: Optional[bytes] = None


@dataclass(frozen=True)
class Broadcast:
    round: int
    ciphertexts: Tuple[bytes, ...]
    plaintext: Optional[bytes] = None


# ===== State =====

@dataclass
class ClientState:
    client_id: int
    model: ToyModel
    shard: DataShard
    keys: KeyPair
    prune: Optional[prme.PruneState] = None
    # flat indices uploaded this round (compact layout), set during the local phase
    selected: Optional[np.ndarray] = None


@dataclass
class ServerState:
    clients: int
    strategy: Strategy
    round: int = 0
    buffer: List[Ciphertext] = field(default_factory=list)


@dataclass
class RoundMetrics:
    round: int
    local_train_s: float = 0.0
    encrypt_s: float = 0.0
    upload_s: float = 0.0
    aggregate_s: float = 0.0
    download_s: float = 0.0
    decrypt_s: float = 0.0
    update_s: float = 0.0
    ciphertext_up: int = 0
    ciphertext_down: int = 0
    plaintext_up: int = 0
    plaintext_down: int = 0
    ct_count: int = 0
    loss: float = 0.0
    accuracy: float = 0.0
    retained: int = 0
    reactivated: int = 0

    PHASES = ("local_train_s", "encrypt_s", "upload_s", "aggregate_s", "download_s", "decrypt_s", "update_s")

    @property
    def total_seconds(self) -> float:
        return sum(getattr(self, phase) for phase in self.PHASES)

    @property
    def total_bytes(self) -> int:
        return self.ciphertext_up + self.ciphertext_down + self.plaintext_up + self.plaintext_down


METRICS_HEADER = [f.name for f in fields(RoundMetrics)]


def metrics_csv(rows: Sequence[RoundMetrics]) -> str:
    """RFC-4180 CSV, one row per round"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\r\n")
    writer.writerow(METRICS_HEADER)
    for row in rows:
        values = []
        for name in METRICS_HEADER:
            value = getattr(row, name)
            values.append(format(value, ".12g") if isinstance(value, float) else value)
        writer.writerow(values)
    return buffer.getvalue()


@dataclass(frozen=True)
class RunSummary:
    strategy: Strategy
    rounds: int
    final_loss: float
    final_accuracy: float
    total_ciphertext_bytes: int
    total_plaintext_bytes: int
    total_seconds: float
    rounds_to_target: Optional[int]

    def line(self) -> str:
        return (
            f"summary strategy={self.strategy.value} rounds={self.rounds} "
            f"accuracy={self.final_accuracy:.4f} loss={self.final_loss:.6f} "
            f"ciphertext_bytes={self.total_ciphertext_bytes} plaintext_bytes={self.total_plaintext_bytes} "
            f"seconds={self.total_seconds:.3f}"
        )


def summarize(strategy: Strategy, rows: Sequence[RoundMetrics], target: Optional[float] = None) -> RunSummary:
    reached = None
    if target is not None:
        reached = next((row.round for row in rows if row.accuracy >= target), None)
    last = rows[-1] if rows else RoundMetrics(round=0)
    return RunSummary(
        strategy=strategy,
        rounds=len(rows),
        final_loss=last.loss,
        final_accuracy=last.accuracy,
        total_ciphertext_bytes=sum(r.ciphertext_up + r.ciphertext_down for r in rows),
        total_plaintext_bytes=sum(r.plaintext_up + r.plaintext_down for r in rows),
        total_seconds=sum(r.total_seconds for r in rows),
        rounds_to_target=reached,
    )


# ===== Key authority and aggregation =====

class KeyAuthority:
    """Trusted party that hands every client the same key pair"""

    def __init__(self, backend: HeBackend, seed: int):
        self._keys = backend.keygen(seed)

    def issue(self) -> KeyPair:
        return self._keys


def aggregate(
    backend: HeBackend,
    uploads: Sequence[Sequence[Ciphertext]],
    client_ids: Optional[Sequence[int]] = None,
) -> List[Ciphertext]:
    """Slot-wise sum of every client's ciphertext list, scaled by 1/K"""
    if not uploads:
        raise ProtocolError("no uploads to aggregate")
    client_ids = list(client_ids) if client_ids is not None else list(range(len(uploads)))
    expected = len(uploads[0])
    for cid, cts in zip(client_ids, uploads):
        if len(cts) != expected:
            raise ProtocolError(
                f"client {cid} uploaded {len(cts)} ciphertexts, expected {expected}",
                client_id=cid,
            )
    k = len(uploads)
    result = []
    for chunk in range(expected):
        total = uploads[0][chunk]
        for cts in uploads[1:]:
            total = backend.add(total, cts[chunk])
        result.append(backend.scale_plain(total, 1.0 / k))
    return result


def server_aggregate(server: ServerState, backend: HeBackend, uploads: Sequence[Upload]) -> Tuple[ServerState, Broadcast]:
    """Average uploads of one round into a broadcast"""
    if len(uploads) != server.clients:
        raise ProtocolError(f"expected {server.clients} uploads, got {len(uploads)}")
    for up in uploads:
        if up.round != server.round:
            raise ProtocolError(f"client {up.client_id} sent round {up.round} during round {server.round}", client_id=up.client_id)
        if up.plaintext is not None and server.strategy in ENCRYPTED_ONLY:
            raise ProtocolError(f"client {up.client_id} sent plaintext model content", client_id=up.client_id)

    decoded = [[Ciphertext.from_bytes(blob, backend.params) for blob in up.ciphertexts] for up in uploads]
    averaged = aggregate(backend, decoded, [up.client_id for up in uploads]) if decoded[0] else []

    plaintext = None
    if any(up.plaintext is not None for up in uploads):
        parts = [np.frombuffer(up.plaintext or b"", dtype="<f8") for up in uploads]
        if len({p.size for p in parts}) != 1:
            raise ProtocolError("plaintext uploads differ in length")
        plaintext = (np.sum(parts, axis=0) / len(parts)).astype("<f8").tobytes()

    server = replace(server, buffer=averaged)
    return server, Broadcast(round=server.round, ciphertexts=tuple(ct.to_bytes() for ct in averaged), plaintext=plaintext)


# ===== Round engine =====

@dataclass
class _LocalResult:
    client: ClientState
    upload: Upload
    encrypted_elements: int
    plaintext_elements: int
    loss: float
    train_s: float
    encrypt_s: float


class Federation:
    """All clients, the server and the shared context of one simulated run"""

    def __init__(
        self,
        config: RunConfig,
        backend: HeBackend,
        clients: List[ClientState],
        server: ServerState,
        net: NetProfile,
        test_set: Optional[Dataset] = None,
        sae_indices: Optional[np.ndarray] = None,
    ):
        self.config = config
        self.strategy = config.strategy
        self.backend = backend
        self.clients = clients
        self.server = server
        self.net = net
        self.test_set = test_set
        self.sae_indices = sae_indices
        self.accounting = accounting_params() if config.accounting == Accounting.PRODUCTION else backend.params
        self.ct_bytes = modeled_ciphertext_bytes(self.accounting)
        self.threads = config.threads or min(len(clients), os.cpu_count() or 1)
        self.table_size = clients[0].model.trainable_size()[0] if self.strategy == Strategy.DICTPFL else 0
        self.history: List[RoundMetrics] = []

    # --- client side ---

    def _select(self, client: ClientState, flat: np.ndarray, round_index: int) -> Tuple[ClientState, np.ndarray, Optional[np.ndarray]]:
        """(client', encrypted payload, plaintext payload)"""
        if self.strategy == Strategy.PLAINTEXT:
            return client, np.zeros(0), flat
        if self.strategy == Strategy.SAE:
            keep = np.zeros(flat.size, dtype=bool)
            keep[self.sae_indices] = True
            return client, flat[keep], flat[~keep]
        if self.strategy != Strategy.DICTPFL:
            return client, flat, None

        table, bias = flat[:self.table_size], flat[self.table_size:]
        state = prme.begin_round(client.prune, round_index)
        indices, values, state = prme.accumulate_and_select(state, table)
        if self.config.layout == Layout.DENSE:
            dense = np.zeros(self.table_size)
            dense[indices] = values
            payload = np.concatenate([dense, bias])
        else:
            payload = np.concatenate([values, bias])
        return replace(client, prune=state, selected=indices), payload, None

    def _local_phase(self, client: ClientState, round_index: int) -> _LocalResult:
        started = time.perf_counter()
        grads, loss = local_train(
            client.model, client.shard, self.config.epochs, self.config.lr, self.config.batch_size,
        )
        flat = client.model.flatten(grads)
        train_s = time.perf_counter() - started

        started = time.perf_counter()
        client, encrypted, plaintext = self._select(client, flat, round_index)
        ciphertexts: Tuple[bytes, ...] = ()
        if encrypted.size:
            gen = rng.stream(self.config.seed, rng.ENCRYPTION, round_index, client.client_id)
            cts = self.backend.pack_encrypt(client.keys.public_key, encrypted, gen)
            ciphertexts = tuple(ct.to_bytes() for ct in cts)
        encrypt_s = time.perf_counter() - started

        upload = Upload(
            client_id=client.client_id,
            round=round_index,
            ciphertexts=ciphertexts,
            plaintext=plaintext.astype("<f8").tobytes() if plaintext is not None else None,
        )
        return _LocalResult(
            client=client, upload=upload,
            encrypted_elements=int(encrypted.size),
            plaintext_elements=0 if plaintext is None else int(plaintext.size),
            loss=loss, train_s=train_s, encrypt_s=encrypt_s,
        )

    def _global_gradient(self, client: ClientState, broadcast: Broadcast, encrypted_len: int) -> np.ndarray:
        """Decrypt the broadcast and scatter it back into the flat layout"""
        cts = [Ciphertext.from_bytes(blob, self.backend.params) for blob in broadcast.ciphertexts]
        averaged = self.backend.decrypt_unpack(client.keys.secret_key, cts, encrypted_len)
        plain = np.frombuffer(broadcast.plaintext, dtype="<f8") if broadcast.plaintext is not None else np.zeros(0)

        if self.strategy == Strategy.PLAINTEXT:
            return plain.copy()
        if self.strategy == Strategy.SAE:
            delta = np.zeros(averaged.size + plain.size)
            keep = np.zeros(delta.size, dtype=bool)
            keep[self.sae_indices] = True
            delta[keep] = averaged
            delta[~keep] = plain
            return delta
        if self.strategy != Strategy.DICTPFL or self.config.layout == Layout.DENSE:
            return averaged
        table = np.zeros(self.table_size)
        count = client.selected.size
        table[client.selected] = averaged[:count]
        return np.concatenate([table, averaged[count:]])

    def _download_phase(self, client: ClientState, broadcast: Broadcast, encrypted_len: int) -> Tuple[ClientState, float, float]:
        started = time.perf_counter()
        delta = self._global_gradient(client, broadcast, encrypted_len)
        decrypt_s = time.perf_counter() - started

        started = time.perf_counter()
        if self.strategy == Strategy.DICTPFL:
            client = replace(client, prune=prme.end_round(client.prune, delta[:self.table_size]))
        model = client.model.apply_flat_update(delta, self.config.lr)
        update_s = time.perf_counter() - started
        return replace(client, model=model), decrypt_s, update_s

    def _map(self, fn, items):
        if self.threads <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    # --- round ---

    def run_round(self) -> RoundMetrics:
        round_index = self.server.round + 1

        results = self._map(lambda c: self._local_phase(c, round_index), self.clients)
        sizes = {r.encrypted_elements for r in results}
        if len(sizes) != 1:
            offender = next(r.client.client_id for r in results if r.encrypted_elements != results[0].encrypted_elements)
            raise ProtocolError(f"round {round_index}: upload sizes diverged {sorted(sizes)}", client_id=offender)
        encrypted_len = results[0].encrypted_elements
        plaintext_len = results[0].plaintext_elements

        started = time.perf_counter()
        # the server only moves to the new round once aggregation succeeds
        server, broadcast = server_aggregate(
            replace(self.server, round=round_index), self.backend, [r.upload for r in results],
        )
        self.server = server
        aggregate_s = time.perf_counter() - started

        downloads = self._map(
            lambda r: self._download_phase(r.client, broadcast, encrypted_len), results,
        )
        self.clients = [client for client, _, _ in downloads]

        metrics = self._account(round_index, results, downloads, encrypted_len, plaintext_len, aggregate_s)
        self.history.append(metrics)
        logger.info(
            "round %d [%s]: ct=%d bytes=%d loss=%.5f acc=%.4f",
            round_index, self.strategy.value, metrics.ct_count, metrics.total_bytes, metrics.loss, metrics.accuracy,
        )
        return metrics

    def _account(self, round_index, results, downloads, encrypted_len, plaintext_len, aggregate_s) -> RoundMetrics:
        k = len(self.clients)
        n_ct = ciphertext_count(encrypted_len, self.accounting)
        per_client_ct_bytes = n_ct * self.ct_bytes
        per_client_plain_bytes = plaintext_len * settings.PLAINTEXT_BYTES_PER_ELEMENT
        per_client_bytes = per_client_ct_bytes + per_client_plain_bytes

        metrics = RoundMetrics(
            round=round_index,
            ciphertext_up=k * per_client_ct_bytes,
            ciphertext_down=k * per_client_ct_bytes,
            plaintext_up=k * per_client_plain_bytes,
            plaintext_down=k * per_client_plain_bytes,
            ct_count=k * n_ct + n_ct,
        )
        # clients move in parallel, so each phase costs as much as one client
        metrics.upload_s = transfer_time(per_client_bytes, self.net, "up") if per_client_bytes else 0.0
        metrics.download_s = transfer_time(per_client_bytes, self.net, "down") if per_client_bytes else 0.0

        if self.config.timing == Timing.MEASURED:
            metrics.local_train_s = max(r.train_s for r in results)
            metrics.encrypt_s = max(r.encrypt_s for r in results)
            metrics.aggregate_s = aggregate_s
            metrics.decrypt_s = max(d for _, d, _ in downloads)
            metrics.update_s = max(u for _, _, u in downloads)
        else:
            samples = max(len(c.shard) for c in self.clients)
            params = sum(self.clients[0].model.trainable_size())
            metrics.local_train_s = samples * self.config.epochs * settings.COST_TRAIN_SAMPLE_S
            metrics.encrypt_s = n_ct * settings.COST_ENCRYPT_S
            metrics.aggregate_s = n_ct * ((k - 1) * settings.COST_ADD_S + settings.COST_SCALE_S)
            metrics.decrypt_s = n_ct * settings.COST_DECRYPT_S
            metrics.update_s = params * settings.COST_UPDATE_PARAM_S

        if self.strategy == Strategy.DICTPFL:
            state = self.clients[0].prune
            metrics.retained = int(state.mask.sum())
            metrics.reactivated = int(state.reactivated.sum())
        else:
            metrics.retained = encrypted_len + plaintext_len

        if self.test_set is not None and len(self.test_set):
            metrics.loss, metrics.accuracy = evaluate(self.clients[0].model, self.test_set.features, self.test_set.labels)
        else:
            metrics.loss = float(np.mean([r.loss for r in results]))
        return metrics

    def run(self, rounds: Optional[int] = None) -> List[RoundMetrics]:
        for _ in range(rounds or self.config.rounds):
            self.run_round()
        return self.history


def run_round(federation: Federation) -> Tuple[List[ClientState], ServerState, RoundMetrics]:
    metrics = federation.run_round()
    return federation.clients, federation.server, metrics


# ===== Setup =====

def split_train_test(dataset: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    order = rng.stream(seed, rng.PARTITION, 0).permutation(len(dataset))
    cut = len(dataset) - int(math.floor(test_fraction * len(dataset)))
    train, test = order[:cut], order[cut:]
    return (
        Dataset(dataset.features[train], dataset.labels[train], dataset.num_classes),
        Dataset(dataset.features[test], dataset.labels[test], dataset.num_classes),
    )


def sae_sensitivity_indices(model: ToyModel, dataset: Dataset, fraction: float, seed: int, batch: int = 64) -> np.ndarray:
    """Indices of the most sensitive gradient entries on one shared calibration batch.

    Sensitivity is the mean absolute gradient over the batch, computed from
    the shared initial model; ties resolve by index.
    """
    gen = rng.stream(seed, rng.CALIBRATION)
    pick = np.sort(gen.permutation(len(dataset))[:min(batch, len(dataset))])
    x, y = dataset.features[pick], dataset.labels[pick]
    per_sample = []
    for i in range(x.shape[0]):
        _, gw, gb = model.loss_and_grads(x[i:i + 1], y[i:i + 1])
        parts = [g for g, layer in zip(gw, model.layers) if layer.mode != TrainMode.FROZEN]
        parts += [g for g, layer in zip(gb, model.layers) if layer.mode != TrainMode.FROZEN]
        per_sample.append(np.abs(np.concatenate([p.ravel() for p in parts])))
    sensitivity = np.mean(per_sample, axis=0)
    count = math.ceil(fraction * sensitivity.size)
    order = np.argsort(-sensitivity, kind="stable")
    return np.sort(order[:count])


def load_task(config: RunConfig) -> Dataset:
    if config.data_path:
        return load_dataset(config.data_path)
    return synth_task(config.classes, config.dim, config.samples_per_class, config.seed, margin=config.margin)


def build_federation(config: RunConfig, dataset: Optional[Dataset] = None) -> Federation:
    """Partition data, build the shared model and keys, and seat every client"""
    dataset = dataset if dataset is not None else load_task(config)
    train, test = split_train_test(dataset, config.test_fraction, config.seed)
    shards = dirichlet_partition(train, config.clients, config.alpha, config.seed)

    base = build_model([dataset.dim, config.hidden, dataset.num_classes], config.seed)
    if config.strategy == Strategy.DICTPFL:
        model = factorize(base, config.rank)
    elif config.strategy == Strategy.TOPK:
        model = freeze_all_but_last(base, config.top_k)
    else:
        model = base

    backend = make_backend(config.backend.value)
    keys = KeyAuthority(backend, config.seed).issue()

    prune_config = prme.PruneConfig(
        s=config.prune, tau=config.tau, beta=config.beta, seed=config.seed,
        reactivation=config.reactivation, accumulate=config.accumulate,
    )
    table_size = model.trainable_size()[0]
    clients = []
    for shard in shards:
        state = prme.new_prune_state(prune_config, table_size) if config.strategy == Strategy.DICTPFL else None
        clients.append(ClientState(client_id=shard.owner, model=model, shard=shard, keys=keys, prune=state))

    sae_indices = None
    if config.strategy == Strategy.SAE:
        sae_indices = sae_sensitivity_indices(model, train, config.sae_fraction, config.seed)

    logger.info(
        "federation: strategy=%s clients=%d shard=%d trainable=%d backend=%s",
        config.strategy.value, len(clients), len(shards[0]), sum(model.trainable_size()), config.backend.value,
    )
    return Federation(
        config=config,
        backend=backend,
        clients=clients,
        server=ServerState(clients=len(clients), strategy=config.strategy),
        net=get_profile(config.net.value),
        test_set=test,
        sae_indices=sae_indices,
    )


def simulate(config: RunConfig, dataset: Optional[Dataset] = None) -> Tuple[List[RoundMetrics], RunSummary]:
    federation = build_federation(config, dataset)
    rows = federation.run()
    summary = summarize(config.strategy, rows, config.target_accuracy)
    logger.info(summary.line())
    return rows, summary


def run_baseline_full(config: RunConfig, dataset: Optional[Dataset] = None) -> List[RoundMetrics]:
    """Train the whole model and encrypt every gradient"""
    return simulate(config.model_copy(update={"strategy": Strategy.FULL}), dataset)[0]


def run_baseline_topk(config: RunConfig, k_layers: int, dataset: Optional[Dataset] = None) -> List[RoundMetrics]:
    """Train and encrypt only the last k layers"""
    return simulate(config.model_copy(update={"strategy": Strategy.TOPK, "top_k": k_layers}), dataset)[0]


def run_baseline_sae(config: RunConfig, encrypt_fraction: float, dataset: Optional[Dataset] = None) -> List[RoundMetrics]:
    """Encrypt the most sensitive fraction; send the rest in plaintext"""
    return simulate(config.model_copy(update={"strategy": Strategy.SAE, "sae_fraction": encrypt_fraction}), dataset)[0]


def compare_strategies(config: RunConfig, strategies: Sequence[Strategy], dataset: Optional[Dataset] = None) -> Dict[Strategy, RunSummary]:
    dataset = dataset if dataset is not None else load_task(config)
    return {s: simulate(config.model_copy(update={"strategy": s}), dataset)[1] for s in strategies}
