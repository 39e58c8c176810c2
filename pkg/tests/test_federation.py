import typing

import numpy as np
import pytest

from fedmvmf import wire
from fedmvmf.data import gen_synthetic, split_per_user
from fedmvmf.federation import (
    ClientState,
    GradientPayload,
    ItemServerState,
    SubmitResult,
    client_round,
    clients_from_dataset,
    item_server_from_dataset,
    item_server_round,
    payload_from_bytes,
    payload_to_bytes,
    server_init,
    server_pump,
    simulate,
    submit_payload,
)
from fedmvmf.model import FeatureVector, HyperParams, InteractionRow
from fedmvmf.optimizer import AdamConfig

from oracles import monolithic_q_grad, monolithic_u_grad, solve_p_direct, solve_v_direct
from util import feats_from_dense, rows_from_dense

HP = HyperParams(k=3, alpha=1.5, lambda1=0.5, lambda2=0.1, theta=4)
ADAM = AdamConfig(beta1=0.1, beta2=0.98, gamma=0.1, epsilon=1e-8)


def small_world(seed=0, n_u=5, n_v=6, d_u=4, d_v=3, hp=HP):
    rng = np.random.default_rng(seed)
    r = np.where(rng.random((n_u, n_v)) < 0.4, 1.0, 0.0)
    x = rng.uniform(0, 1, (n_u, d_u))
    y = rng.uniform(0, 1, (n_v, d_v))
    clients = [
        ClientState(user_id=f"u{i}", row=row, features=feat)
        for i, (row, feat) in enumerate(zip(rows_from_dense(r), feats_from_dense(x)))
    ]
    item_server = ItemServerState(item_features=feats_from_dense(y))
    server = server_init(hp, n_v, d_u, seed)
    return clients, item_server, server, (r, x, y)


class TestServerInit:
    def test_same_seed_bit_identical(self):
        hp = HP
        a = server_init(hp, 7, 5, seed=3)
        b = server_init(hp, 7, 5, seed=3)
        assert np.array_equal(a.model.q, b.model.q)
        assert np.array_equal(a.model.u, b.model.u)
        assert a.model.signature == b.model.signature

    def test_shapes_and_version(self):
        hp = HyperParams(k=25, alpha=4.0, lambda1=0.1, lambda2=1.0, theta=100)
        state = server_init(hp, 3064, 3434, seed=0)
        assert state.model.q.shape == (3064, 25)
        assert state.model.u.shape == (3434, 25)
        assert state.model.version == 1

    def test_entries_in_init_range(self):
        state = server_init(HP, 50, 20, seed=1)
        for mat in (state.model.q, state.model.u):
            assert mat.min() >= 0.0 and mat.max() <= 0.1


class TestClientRound:
    def test_zero_client_emits_zero_payload(self):
        clients, _, server, _ = small_world()
        empty = ClientState(
            user_id="empty",
            row=InteractionRow("empty", np.empty(0, dtype=np.int64), np.empty(0), n_items=6),
            features=FeatureVector(dim=4),
        )
        payload = client_round(empty, server.model, HP)
        np.testing.assert_array_equal(payload.q_grad, np.zeros_like(server.model.q))
        np.testing.assert_array_equal(payload.u_grad, np.zeros_like(server.model.u))

    def test_signature_stamped(self):
        clients, _, server, _ = small_world()
        payload = client_round(clients[0], server.model, HP)
        assert payload.signature == server.model.signature
        assert payload.version == server.model.version

    def test_single_client_payload_matches_direct_computation(self):
        clients, _, server, (r, x, y) = small_world()
        i = 2
        payload = client_round(clients[i], server.model, HP)
        q, u = server.model.q, server.model.u
        c_row = 1.0 + HP.alpha * r[i]
        p = solve_p_direct(r[i], c_row, x[i], q, u, HP.lambda1, HP.lambda2)
        np.testing.assert_allclose(clients[i].p, p, atol=1e-10)
        want_q = (c_row * (r[i] - q @ p))[:, None] * p[None, :]
        want_u = (x[i] - u @ p)[:, None] * p[None, :]
        np.testing.assert_allclose(payload.q_grad, want_q, atol=1e-12)
        np.testing.assert_allclose(payload.u_grad, want_u, atol=1e-12)

    def test_catalog_shrink_is_an_error(self):
        clients, _, server, _ = small_world()
        small_model = server.model
        small_model.q = small_model.q[:3]
        with pytest.raises(ValueError, match="catalog"):
            client_round(clients[0], small_model, HP)

    def test_no_u_grad_in_single_view_mode(self):
        clients, _, server, _ = small_world()
        fcf = HyperParams(k=HP.k, alpha=HP.alpha, lambda1=0.0, lambda2=HP.lambda2, theta=HP.theta)
        payload = client_round(clients[0], server.model, fcf)
        assert payload.u_grad is None


class TestItemServerRound:
    def test_zero_features_emit_zero(self):
        _, _, server, _ = small_world()
        item_server = ItemServerState(item_features=[FeatureVector(dim=3) for _ in range(6)])
        payload = item_server_round(item_server, server.model, HP)
        np.testing.assert_array_equal(item_server.v, np.zeros((3, HP.k)))
        np.testing.assert_allclose(payload.q_grad, np.zeros_like(server.model.q), atol=1e-15)

    def test_exact_fit_after_local_solve(self):
        hp = HyperParams(k=1, alpha=0.0, lambda1=0.5, lambda2=0.0, theta=1)
        server = server_init(hp, 1, 1, seed=0)
        server.model.q = np.array([[1.0]])
        item_server = ItemServerState(
            item_features=[FeatureVector(dim=1, idx=np.array([0]), values=np.array([2.0]))]
        )
        payload = item_server_round(item_server, server.model, hp)
        assert item_server.v[0, 0] == pytest.approx(2.0)
        np.testing.assert_allclose(payload.q_grad, np.zeros((1, 1)), atol=1e-12)

    def test_matches_monolithic_item_feature_block(self):
        _, item_server, server, (r, x, y) = small_world()
        payload = item_server_round(item_server, server.model, HP)
        v = solve_v_direct(y, server.model.q, HP.lambda1, HP.lambda2)
        want = np.zeros_like(server.model.q)
        for j in range(y.shape[0]):
            for d in range(y.shape[1]):
                want[j] += (y[j, d] - float(v[d] @ server.model.q[j])) * v[d]
        np.testing.assert_allclose(payload.q_grad, want, atol=1e-10)

    def test_inert_when_side_view_disabled(self):
        _, item_server, server, _ = small_world()
        fcf = HyperParams(k=HP.k, alpha=HP.alpha, lambda1=0.0, lambda2=HP.lambda2, theta=HP.theta)
        assert item_server_round(item_server, server.model, fcf) is None


class TestSubmit:
    def test_stale_rejected_without_side_effects(self):
        clients, _, server, _ = small_world()
        payload = client_round(clients[0], server.model, HP)
        stale = GradientPayload(
            signature=b"\x00" * 16,
            version=0,
            q_grad=payload.q_grad,
            u_grad=payload.u_grad,
            source=payload.source,
        )
        assert submit_payload(server, stale) is SubmitResult.REJECTED_STALE
        assert len(server.queue) == 0
        assert server.stale_dropped == 1

    def test_accept_current_signature(self):
        clients, _, server, _ = small_world()
        payload = client_round(clients[0], server.model, HP)
        assert submit_payload(server, payload) is SubmitResult.ACCEPTED
        assert len(server.queue) == 1

    def test_nan_rejected_as_malformed(self):
        clients, _, server, _ = small_world()
        payload = client_round(clients[0], server.model, HP)
        payload.q_grad[0, 0] = np.nan
        assert submit_payload(server, payload) is SubmitResult.REJECTED_MALFORMED
        assert len(server.queue) == 0

    def test_wrong_shape_rejected_as_malformed(self):
        clients, _, server, _ = small_world()
        payload = client_round(clients[0], server.model, HP)
        payload.q_grad = payload.q_grad[:-1]
        assert submit_payload(server, payload) is SubmitResult.REJECTED_MALFORMED


class TestPump:
    def make(self, theta):
        hp = HyperParams(k=HP.k, alpha=HP.alpha, lambda1=HP.lambda1, lambda2=HP.lambda2, theta=theta)
        return small_world(hp=hp), hp

    def test_threshold_promotes(self):
        (clients, _, server, _), hp = self.make(theta=2)
        for client in clients[:2]:
            submit_payload(server, client_round(client, server.model, hp))
        assert server_pump(server, ADAM) is True
        assert server.model.version == 2

    def test_below_threshold_no_promotion(self):
        (clients, _, server, _), hp = self.make(theta=2)
        submit_payload(server, client_round(clients[0], server.model, hp))
        assert server_pump(server, ADAM) is False
        assert server.model.version == 1
        assert server.accepted_count == 1

    def test_accumulation_spans_pumps(self):
        (clients, _, server, _), hp = self.make(theta=2)
        submit_payload(server, client_round(clients[0], server.model, hp))
        server_pump(server, ADAM)
        submit_payload(server, client_round(clients[1], server.model, hp))
        assert server_pump(server, ADAM) is True
        assert server.model.version == 2

    def test_excess_payloads_flushed_stale(self):
        (clients, _, server, _), hp = self.make(theta=2)
        for client in clients[:3]:
            submit_payload(server, client_round(client, server.model, hp))
        assert server_pump(server, ADAM) is True
        assert server.model.version == 2
        assert len(server.queue) == 0
        assert server.stale_dropped == 1
        # at most one promotion per pump
        assert server_pump(server, ADAM) is False

    def test_signature_changes_exactly_on_promotion(self):
        (clients, _, server, _), hp = self.make(theta=1)
        sig_before = server.model.signature
        submit_payload(server, client_round(clients[0], server.model, hp))
        server_pump(server, ADAM)
        assert server.model.signature != sig_before


def independent_adam_first_step(target, grad, cfg):
    # fresh-state update: m_hat = g, v_hat = g^2
    return target - cfg.gamma * grad / (np.abs(grad) + cfg.epsilon)


class TestFederatedEqualsCentralized:
    @pytest.mark.parametrize("seed", range(5))
    def test_one_promotion_matches_monolithic_step(self, seed):
        n_u, n_v, d_u, d_v = 6, 7, 4, 3
        hp = HyperParams(k=3, alpha=1.5, lambda1=0.5, lambda2=0.1, theta=n_u + 1)
        clients, item_server, server, (r, x, y) = small_world(
            seed=seed, n_u=n_u, n_v=n_v, d_u=d_u, d_v=d_v, hp=hp
        )
        q0, u0 = server.model.q.copy(), server.model.u.copy()

        submit_payload(server, item_server_round(item_server, server.model, hp))
        for client in clients:
            submit_payload(server, client_round(client, server.model, hp))
        assert server_pump(server, ADAM) is True

        # the monolithic route sees everything at once
        c = 1.0 + hp.alpha * r
        p = np.stack([
            solve_p_direct(r[i], c[i], x[i], q0, u0, hp.lambda1, hp.lambda2) for i in range(n_u)
        ])
        v = solve_v_direct(y, q0, hp.lambda1, hp.lambda2)
        grad_q = monolithic_q_grad(p, q0, v, r, y, hp.alpha, hp.lambda1, hp.lambda2)
        grad_u = monolithic_u_grad(p, u0, x, hp.lambda1, hp.lambda2)
        np.testing.assert_allclose(server.model.q, independent_adam_first_step(q0, grad_q, ADAM), atol=1e-10)
        np.testing.assert_allclose(server.model.u, independent_adam_first_step(u0, grad_u, ADAM), atol=1e-10)


def test_promotion_insensitive_to_payload_order():
    n_u = 8
    hp = HyperParams(k=3, alpha=1.0, lambda1=0.5, lambda2=0.1, theta=n_u + 1)
    clients, item_server, server_a, _ = small_world(seed=4, n_u=n_u, hp=hp)
    server_b = server_init(hp, clients[0].row.n_items, clients[0].features.dim, 4)
    assert server_a.model.signature == server_b.model.signature

    payloads = [item_server_round(item_server, server_a.model, hp)]
    payloads += [client_round(c, server_a.model, hp) for c in clients]
    for payload in payloads:
        submit_payload(server_a, payload)
    server_pump(server_a, ADAM)

    shuffled = [payloads[i] for i in np.random.default_rng(9).permutation(len(payloads))]
    for payload in shuffled:
        submit_payload(server_b, payload)
    server_pump(server_b, ADAM)

    np.testing.assert_allclose(server_a.model.q, server_b.model.q, atol=1e-9)
    np.testing.assert_allclose(server_a.model.u, server_b.model.u, atol=1e-9)


def test_liveness_full_participation():
    n_u = 5
    hp = HyperParams(k=2, alpha=1.0, lambda1=0.5, lambda2=0.1, theta=n_u + 1)
    clients, item_server, server, _ = small_world(seed=2, n_u=n_u, hp=hp)
    result = simulate(
        clients, item_server, rounds=6, participation_fraction=1.0, seed=11,
        hp=hp, cfg=ADAM, server=server, eval_k=None, track_cost=False,
    )
    assert result.promotions == 6
    assert [e.round for e in result.trace] == list(range(1, 7))
    assert result.server.model.version == 7


def test_simulate_is_deterministic():
    def run():
        ds = gen_synthetic(12, 9, 4, 4, 2, 0.0, seed=5, density=0.2)
        sp = split_per_user(ds, 0.8, seed=5)
        clients = clients_from_dataset(sp.train, sp.test)
        item_server = item_server_from_dataset(sp.train)
        hp = HyperParams(k=2, alpha=1.0, lambda1=0.5, lambda2=0.1, theta=5)
        return simulate(clients, item_server, rounds=8, participation_fraction=0.5,
                        seed=21, hp=hp, cfg=ADAM, eval_k=3)

    a, b = run(), run()
    assert a.promotions == b.promotions
    for ea, eb in zip(a.trace, b.trace):
        assert ea.round == eb.round
        assert ea.cost == eb.cost
        assert ea.upload_bytes == eb.upload_bytes
        if ea.metrics is None:
            assert eb.metrics is None
        else:
            assert ea.metrics == eb.metrics
    assert np.array_equal(a.server.model.q, b.server.model.q)


def test_version_monotone_and_stale_never_aggregated():
    clients, item_server, server, _ = small_world(seed=6)
    old_model = server.model
    versions = [server.model.version]
    # compute a payload against v1, promote past it, then try to replay it
    stale_payload = client_round(clients[0], old_model, HP)
    for _ in range(3):
        submit_payload(server, item_server_round(item_server, server.model, HP))
        for client in clients:
            submit_payload(server, client_round(client, server.model, HP))
        server_pump(server, ADAM)
        versions.append(server.model.version)
    assert versions == sorted(versions) and len(set(versions)) == len(versions)
    before = server.model.q.copy()
    assert submit_payload(server, stale_payload) is SubmitResult.REJECTED_STALE
    server_pump(server, ADAM)
    assert np.array_equal(server.model.q, before)


def test_server_surface_never_accepts_raw_user_data():
    import fedmvmf.federation as federation

    private_types = {"InteractionRow", "FeatureVector", "ClientState", "Dataset"}
    for fn in (server_init, submit_payload, server_pump):
        hints = typing.get_type_hints(fn)
        names = {getattr(t, "__name__", str(t)) for t in hints.values()}
        assert not names & private_types, f"{fn.__name__} exposes raw data types: {names}"
    # ServerState fields hold no raw-data containers either
    state_hints = typing.get_type_hints(federation.ServerState)
    names = {getattr(t, "__name__", str(t)) for t in state_hints.values()}
    assert not names & private_types


class TestWireFormat:
    def test_roundtrip(self):
        clients, _, server, _ = small_world()
        payload = client_round(clients[1], server.model, HP)
        back = payload_from_bytes(payload_to_bytes(payload))
        assert back.signature == payload.signature
        assert back.version == payload.version
        assert back.source == payload.source
        np.testing.assert_array_equal(back.q_grad, payload.q_grad)
        np.testing.assert_array_equal(back.u_grad, payload.u_grad)

    def test_client_payload_byte_formula(self):
        clients, _, server, _ = small_world()
        payload = client_round(clients[0], server.model, HP)
        n_v, k = server.model.q.shape
        d_u = server.model.u.shape[0]
        expected = 21 + 16 + 8 * (n_v + d_u) * k
        assert payload.num_bytes() == expected
        assert len(payload_to_bytes(payload)) == expected

    def test_item_payload_has_no_u_block(self):
        _, item_server, server, _ = small_world()
        payload = item_server_round(item_server, server.model, HP)
        n_v, k = server.model.q.shape
        assert payload.num_bytes() == 21 + 16 + 8 * n_v * k
        assert len(payload_to_bytes(payload)) == payload.num_bytes()

    def test_truncated_buffer_rejected(self):
        with pytest.raises(ValueError, match="truncated|bytes"):
            wire.deserialize_payload(b"\x00" * 10)
