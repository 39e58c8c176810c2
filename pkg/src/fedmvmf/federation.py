"""The three-party training protocol as deterministic state machines.

Clients hold their own interactions, features and user factor; the item
server holds the item features and its factor matrix; the aggregating
server holds only the versioned master model (q, u), a FIFO payload queue
and the Adam states. Nothing reachable from ServerState ever receives raw
interactions or raw user features, only GradientPayload messages stamped
with the signature of the model version they were computed against.

The server promotes a new model version once `theta` payloads have been
aggregated; everything still queued is then stale and dropped, and a fresh
signature implicitly tells clients to stop uploading against the old one.
"""

from __future__ import annotations

import enum
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from fedmvmf import kernels, wire
from fedmvmf.evaluation import MetricsSample, aggregate_user_metrics, user_metrics
from fedmvmf.model import (
    FeatureVector,
    HyperParams,
    InteractionRow,
    aggregate_q_grad,
    aggregate_u_grad,
    cost_dense,
    solve_v_all,
    update_p_local,
)
from fedmvmf.optimizer import AdamConfig, AdamState, adam_step
from fedmvmf.seeding import substream

SOURCE_CLIENT = "client"
SOURCE_ITEM_SERVER = "item_server"

_SOURCE_CODES = {SOURCE_CLIENT: wire.SOURCE_CLIENT, SOURCE_ITEM_SERVER: wire.SOURCE_ITEM_SERVER}
_SOURCE_NAMES = {code: name for name, code in _SOURCE_CODES.items()}

#: Master-model entries are initialized i.i.d. uniform in [0, INIT_SCALE].
INIT_SCALE = 0.1


@dataclass(eq=False)
class MasterModel:
    """Versioned (q, u) pair distributed to clients and the item server."""

    version: int
    signature: bytes
    q: np.ndarray
    u: np.ndarray

    def num_bytes(self) -> int:
        """Serialized size of a full model download."""
        return wire.payload_num_bytes(self.q.shape[0], self.u.shape[0], self.q.shape[1])


@dataclass(eq=False)
class GradientPayload:
    """One contributor's per-round gradient sums, stamped with the model
    signature it was computed against."""

    signature: bytes
    version: int
    q_grad: np.ndarray
    u_grad: np.ndarray | None
    source: str
    metrics: MetricsSample | None = None

    def num_bytes(self) -> int:
        d_u = self.u_grad.shape[0] if self.u_grad is not None else 0
        return wire.payload_num_bytes(self.q_grad.shape[0], d_u, self.q_grad.shape[1])


def payload_to_bytes(payload: GradientPayload) -> bytes:
    return wire.serialize_payload(
        payload.version,
        _SOURCE_CODES[payload.source],
        payload.signature,
        payload.q_grad,
        payload.u_grad,
    )


def payload_from_bytes(buf: bytes) -> GradientPayload:
    version, source, signature, q_grad, u_grad = wire.deserialize_payload(buf)
    return GradientPayload(
        signature=signature,
        version=version,
        q_grad=q_grad,
        u_grad=u_grad,
        source=_SOURCE_NAMES[source],
    )


@dataclass(eq=False)
class ClientState:
    """One user's private data plus their local factor vector."""

    user_id: str
    row: InteractionRow
    features: FeatureVector | None = None
    p: np.ndarray | None = None
    test_items: frozenset = frozenset()
    _x_dense: np.ndarray | None = None

    def x_dense(self) -> np.ndarray | None:
        if self.features is None:
            return None
        if self._x_dense is None:
            self._x_dense = self.features.to_dense()
        return self._x_dense


@dataclass(eq=False)
class ItemServerState:
    """Item features and the item-feature factor matrix they induce."""

    item_features: list
    v: np.ndarray | None = None
    last_seen_version: int = 0
    _y_dense: np.ndarray | None = None

    @property
    def n_items(self) -> int:
        return len(self.item_features)

    @property
    def feature_dim(self) -> int:
        return self.item_features[0].dim if self.item_features else 0

    def y_dense(self) -> np.ndarray:
        if self._y_dense is None:
            self._y_dense = np.stack([f.to_dense() for f in self.item_features])
        return self._y_dense

    def append_item(self, y_star: FeatureVector) -> None:
        if self.item_features and y_star.dim != self.feature_dim:
            raise ValueError(f"feature dim {y_star.dim} != existing {self.feature_dim}")
        self.item_features.append(y_star)
        self._y_dense = None


class SubmitResult(enum.Enum):
    ACCEPTED = "accepted"
    REJECTED_STALE = "stale"
    REJECTED_MALFORMED = "malformed"


class _KahanSum:
    """Compensated elementwise accumulator, near-insensitive to add order."""

    def __init__(self, shape):
        self.total = np.zeros(shape)
        self._comp = np.zeros(shape)

    def add(self, arr) -> None:
        y = arr - self._comp
        t = self.total + y
        self._comp = (t - self.total) - y
        self.total = t

    def reset(self) -> None:
        self.total.fill(0.0)
        self._comp.fill(0.0)


@dataclass(eq=False)
class PromotionRecord:
    """What went into the model version just promoted."""

    version: int
    payload_count: int
    upload_bytes: int
    metrics: MetricsSample | None


@dataclass(eq=False)
class ServerState:
    """Aggregator state: master model, payload queue, Adam moments."""

    model: MasterModel
    hp: HyperParams
    adam_q: AdamState
    adam_u: AdamState
    queue: deque = field(default_factory=deque)
    accepted_count: int = 0
    stale_dropped: int = 0
    malformed_dropped: int = 0
    last_promotion: PromotionRecord | None = None
    _sig_rng: np.random.Generator | None = None
    _sum_q_client: _KahanSum | None = None
    _sum_q_item: _KahanSum | None = None
    _sum_u: _KahanSum | None = None
    _window_metrics: list = field(default_factory=list)
    _window_upload_bytes: int = 0


def server_init(hp: HyperParams, n_items: int, n_user_features: int, seed: int) -> ServerState:
    """Fresh aggregator with a seeded uniform [0, 0.1] master model."""
    if n_items < 1 or n_user_features < 1:
        raise ValueError("n_items and n_user_features must be >= 1")
    init_rng = substream(seed, "init")
    sig_rng = substream(seed, "signature")
    q = init_rng.uniform(0.0, INIT_SCALE, size=(n_items, hp.k))
    u = init_rng.uniform(0.0, INIT_SCALE, size=(n_user_features, hp.k))
    model = MasterModel(version=1, signature=sig_rng.bytes(wire.SIGNATURE_BYTES), q=q, u=u)
    state = ServerState(
        model=model,
        hp=hp,
        adam_q=AdamState.zeros(q.shape),
        adam_u=AdamState.zeros(u.shape),
    )
    state._sig_rng = sig_rng
    _reset_accumulators(state)
    return state


def _reset_accumulators(state: ServerState) -> None:
    state._sum_q_client = _KahanSum(state.model.q.shape)
    state._sum_q_item = _KahanSum(state.model.q.shape)
    state._sum_u = _KahanSum(state.model.u.shape)
    state._window_metrics = []
    state._window_upload_bytes = 0


def client_round(
    client: ClientState,
    model: MasterModel,
    hp: HyperParams,
    *,
    grams=None,
    eval_k: int | None = None,
    normalize_metrics: bool = False,
) -> GradientPayload:
    """One client update pass against a model snapshot.

    Recomputes the client's factor from the received (q, u), emits its
    per-item q contributions (implicit zeros included) and, when the side
    view is active, its per-feature u contributions. Local test metrics
    ride along when eval_k is set and the client has held-out items.
    """
    side = hp.lambda1 > 0
    if side and client.features is not None and client.features.dim != model.u.shape[0]:
        raise ValueError(f"feature dim {client.features.dim} != model u rows {model.u.shape[0]}")
    qtq, utu = grams if grams is not None else (None, None)
    p = update_p_local(client.row, client.features, model.q, model.u if side else None, hp, qtq=qtq, utu=utu)
    client.p = p
    x_dense = None
    if side:
        # a client without features contributes an all-zero feature vector
        x_dense = client.x_dense()
        if x_dense is None:
            x_dense = np.zeros(model.u.shape[0])
    q_grad, u_grad, scores = kernels.client_gradients(
        p, model.q, client.row.item_idx, client.row.values, hp.alpha,
        u=model.u if side else None, x_dense=x_dense,
    )
    metrics = None
    if eval_k is not None and client.test_items:
        per_user = user_metrics(scores, client.row.item_idx, client.test_items, eval_k, normalize_metrics)
        if per_user is not None:
            metrics = MetricsSample(*per_user, user_count=1, round=model.version)
    return GradientPayload(
        signature=model.signature,
        version=model.version,
        q_grad=q_grad,
        u_grad=u_grad,
        source=SOURCE_CLIENT,
        metrics=metrics,
    )


def item_server_round(state: ItemServerState, model: MasterModel, hp: HyperParams) -> GradientPayload | None:
    """Item-server update pass: refit v against the received q, then emit
    per-item sums of the item-feature contributions. No-op (returns None)
    when the side view is disabled."""
    if hp.lambda1 == 0:
        return None
    y = state.y_dense()
    if y.shape[0] != model.q.shape[0]:
        raise ValueError(f"item server covers {y.shape[0]} items, model has {model.q.shape[0]}")
    v = solve_v_all(y, model.q, hp)
    state.v = v
    state.last_seen_version = model.version
    # row j of the payload: sum_d (y_jd - <q_j, v_d>) v_d
    q_grad = y @ v - model.q @ (v.T @ v)
    return GradientPayload(
        signature=model.signature,
        version=model.version,
        q_grad=q_grad,
        u_grad=None,
        source=SOURCE_ITEM_SERVER,
    )


def submit_payload(state: ServerState, payload: GradientPayload) -> SubmitResult:
    """Validate and enqueue; rejection reasons are returned, never raised."""
    if payload.signature != state.model.signature:
        state.stale_dropped += 1
        return SubmitResult.REJECTED_STALE
    if not _well_formed(state, payload):
        state.malformed_dropped += 1
        return SubmitResult.REJECTED_MALFORMED
    state.queue.append(payload)
    return SubmitResult.ACCEPTED


def _well_formed(state: ServerState, payload: GradientPayload) -> bool:
    if payload.source not in _SOURCE_CODES:
        return False
    if payload.q_grad.shape != state.model.q.shape:
        return False
    if not np.all(np.isfinite(payload.q_grad)):
        return False
    if payload.u_grad is not None:
        if payload.u_grad.shape != state.model.u.shape:
            return False
        if not np.all(np.isfinite(payload.u_grad)):
            return False
    return True


def server_pump(state: ServerState, cfg: AdamConfig) -> bool:
    """Drain the FIFO queue into the accumulators; promote when the
    threshold is reached. Returns whether a promotion happened."""
    while state.queue:
        payload = state.queue.popleft()
        if payload.signature != state.model.signature:  # defensive; queue is flushed on promotion
            state.stale_dropped += 1
            continue
        _accumulate(state, payload)
        state.accepted_count += 1
        if state.accepted_count >= state.hp.theta:
            _promote(state, cfg)
            return True
    return False


def _accumulate(state: ServerState, payload: GradientPayload) -> None:
    if payload.source == SOURCE_CLIENT:
        state._sum_q_client.add(payload.q_grad)
        if payload.u_grad is not None:
            state._sum_u.add(payload.u_grad)
    else:
        state._sum_q_item.add(payload.q_grad)
    if payload.metrics is not None:
        state._window_metrics.append(payload.metrics)
    state._window_upload_bytes += payload.num_bytes()


def _promote(state: ServerState, cfg: AdamConfig) -> None:
    hp = state.hp
    model = state.model
    item_sums = state._sum_q_item.total if hp.lambda1 > 0 else None
    grad_q = aggregate_q_grad(state._sum_q_client.total, item_sums, model.q, hp)
    new_q, _ = adam_step(model.q, grad_q, state.adam_q, cfg)
    if hp.lambda1 > 0:
        grad_u = aggregate_u_grad(state._sum_u.total, model.u, hp)
        new_u, _ = adam_step(model.u, grad_u, state.adam_u, cfg)
    else:
        # single-view mode: no client reports u contributions, u stays fixed
        new_u = model.u
    payload_count = state.accepted_count
    upload_bytes = state._window_upload_bytes
    window_metrics = state._window_metrics
    state.model = MasterModel(
        version=model.version + 1,
        signature=state._sig_rng.bytes(wire.SIGNATURE_BYTES),
        q=new_q,
        u=new_u,
    )
    state.stale_dropped += len(state.queue)
    state.queue.clear()
    state.accepted_count = 0
    _reset_accumulators(state)
    metrics = _mean_samples(window_metrics, state.model.version)
    state.last_promotion = PromotionRecord(
        version=state.model.version,
        payload_count=payload_count,
        upload_bytes=upload_bytes,
        metrics=metrics,
    )


def _mean_samples(samples, round_index: int) -> MetricsSample | None:
    """User-count-weighted mean of the samples that rode along in payloads."""
    rows = [(s.precision, s.recall, s.f1, s.map, s.nmr) for s in samples for _ in range(s.user_count)]
    return aggregate_user_metrics(rows, round_index) if rows else None


@dataclass(eq=False)
class TraceEntry:
    """One promotion's slice of the training trace."""

    promotion: int
    round: int
    cost: float | None
    metrics: MetricsSample | None
    upload_bytes: int
    download_bytes: int


@dataclass(eq=False)
class SimulationResult:
    trace: list
    server: ServerState
    clients: list
    item_server: ItemServerState | None
    promotions: int
    timings: dict


def simulate(
    clients: list,
    item_server: ItemServerState | None,
    rounds: int,
    participation_fraction: float,
    seed: int,
    hp: HyperParams,
    cfg: AdamConfig,
    *,
    server: ServerState | None = None,
    eval_k: int | None = 10,
    track_cost: bool = True,
    normalize_metrics: bool = False,
) -> SimulationResult:
    """Run the training loop: sampled clients (and the item server, once
    per model version) compute payloads against the current model, the
    server pumps its queue, and each promotion is recorded in the trace.

    Identical inputs and seed give an identical trace. The per-promotion
    cost is an omniscient simulator instrument assembled from every
    client's latest local factor; it never flows through the server.
    """
    if not 0.0 < participation_fraction <= 1.0:
        raise ValueError(f"participation_fraction must be in (0, 1], got {participation_fraction}")
    if not clients:
        raise ValueError("need at least one client")
    side = hp.lambda1 > 0
    if side and item_server is None:
        raise ValueError("lambda1 > 0 requires an item server")
    n_items = clients[0].row.n_items
    if server is None:
        d_u = clients[0].features.dim if clients[0].features is not None else 1
        server = server_init(hp, n_items, d_u, seed)

    part_rng = substream(seed, "participation")
    n_sample = max(1, int(round(participation_fraction * len(clients))))

    r_dense = x_dense = y_dense = None
    if track_cost:
        r_dense = np.zeros((len(clients), n_items))
        for i, client in enumerate(clients):
            r_dense[i, client.row.item_idx] = client.row.values
        if side:
            x_dense = np.stack([c.x_dense() for c in clients])
            y_dense = item_server.y_dense()

    trace: list[TraceEntry] = []
    timings = {"client_ms": 0.0, "client_rounds": 0, "server_ms": 0.0, "pumps": 0}
    download_window = 0
    model_bytes = server.model.num_bytes()
    item_model_bytes = wire.payload_num_bytes(n_items, 0, hp.k)

    for round_idx in range(1, rounds + 1):
        model = server.model
        qtq = model.q.T @ model.q
        utu = model.u.T @ model.u if side else None
        if side and item_server.last_seen_version < model.version:
            payload = item_server_round(item_server, model, hp)
            submit_payload(server, payload)
            download_window += item_model_bytes
        chosen = part_rng.choice(len(clients), size=n_sample, replace=False)
        start = time.perf_counter()
        for ci in chosen:
            payload = client_round(
                clients[int(ci)], model, hp,
                grams=(qtq, utu), eval_k=eval_k, normalize_metrics=normalize_metrics,
            )
            submit_payload(server, payload)
        timings["client_ms"] += 1e3 * (time.perf_counter() - start)
        timings["client_rounds"] += n_sample
        download_window += n_sample * model_bytes

        start = time.perf_counter()
        promoted = server_pump(server, cfg)
        timings["server_ms"] += 1e3 * (time.perf_counter() - start)
        timings["pumps"] += 1

        if promoted:
            record = server.last_promotion
            cost_value = None
            if track_cost:
                cost_value = _estimate_cost(server, clients, item_server, r_dense, x_dense, y_dense, hp)
            trace.append(
                TraceEntry(
                    promotion=len(trace) + 1,
                    round=round_idx,
                    cost=cost_value,
                    metrics=record.metrics,
                    upload_bytes=record.upload_bytes,
                    download_bytes=download_window,
                )
            )
            download_window = 0
            model_bytes = server.model.num_bytes()

    return SimulationResult(
        trace=trace,
        server=server,
        clients=clients,
        item_server=item_server,
        promotions=len(trace),
        timings=timings,
    )


def clients_from_dataset(dataset, test_map=None) -> list:
    """One ClientState per user of a (train) dataset; test_map carries the
    held-out item sets from the split."""
    test_map = test_map or {}
    clients = []
    for i, row in enumerate(dataset.interactions):
        features = dataset.user_features[i] if dataset.user_features is not None else None
        clients.append(
            ClientState(
                user_id=row.user_id,
                row=row,
                features=features,
                test_items=frozenset(test_map.get(i, frozenset())),
            )
        )
    return clients


def item_server_from_dataset(dataset) -> ItemServerState | None:
    if dataset.item_features is None:
        return None
    return ItemServerState(item_features=list(dataset.item_features))


def _estimate_cost(server, clients, item_server, r_dense, x_dense, y_dense, hp) -> float:
    k = server.model.q.shape[1]
    p = np.zeros((len(clients), k))
    for i, client in enumerate(clients):
        if client.p is not None:
            p[i] = client.p
    side = hp.lambda1 > 0
    return cost_dense(
        p,
        server.model.q,
        server.model.u if side else None,
        item_server.v if side and item_server is not None else None,
        r_dense,
        x_dense,
        y_dense,
        hp,
    )
