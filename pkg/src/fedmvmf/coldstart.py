"""Cold-start inference from side features alone.

All three procedures work with zero interaction history for the new
entity: a new user's factor is projected from their features through u, a
new item's factor from its features through v (on the item server, which
then triggers a model promotion so every client receives the grown q),
and the combined case composes the two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedmvmf import wire
from fedmvmf.federation import ItemServerState, MasterModel, ServerState, _reset_accumulators
from fedmvmf.model import FeatureVector, HyperParams, predict_scores, solve_v_all
from fedmvmf.numerics import require_finite, solve_spd
from fedmvmf.optimizer import AdamState


@dataclass(frozen=True, eq=False)
class ColdStartResult:
    scores: np.ndarray
    new_factor: np.ndarray


def cold_start_user(x_star: FeatureVector, model: MasterModel, *, ridge: HyperParams | None = None) -> ColdStartResult:
    """Score all catalog items for a user with no interaction history.

    The induced factor is the plain projection p* = x* u. Passing
    hyper-parameters as `ridge` switches to the regularized regression
    p* = x* u (u^T u + (lambda2 / lambda1) I)^-1 instead (off by default).
    """
    if x_star.dim != model.u.shape[0]:
        raise ValueError(f"feature dim {x_star.dim} != model u rows {model.u.shape[0]}")
    p_star = x_star.values @ model.u[x_star.idx] if x_star.idx.size else np.zeros(model.u.shape[1])
    if ridge is not None:
        if ridge.lambda1 == 0:
            raise ValueError("ridge projection requires lambda1 > 0")
        a = model.u.T @ model.u
        a[np.diag_indices_from(a)] += ridge.lambda2 / ridge.lambda1
        p_star = solve_spd(a, p_star)
    require_finite(p_star, "cold-start user factor")
    return ColdStartResult(scores=predict_scores(p_star, model.q), new_factor=p_star)


def cold_start_item(y_star: FeatureVector, item_state: ItemServerState, server: ServerState) -> MasterModel:
    """Insert a brand-new item into the catalog from its features alone.

    The item server projects q* = y* v, appends it to q, and the server
    promotes a new model version so existing clients pick up the grown
    catalog. Existing rows of q are untouched; in-flight payloads against
    the old version become stale.
    """
    hp = server.hp
    if hp.lambda1 == 0:
        raise ValueError("side information disabled; V undefined")
    if y_star.dim != item_state.feature_dim:
        raise ValueError(f"feature dim {y_star.dim} != item server dim {item_state.feature_dim}")
    if item_state.v is None or item_state.last_seen_version < server.model.version:
        item_state.v = solve_v_all(item_state.y_dense(), server.model.q, hp)
        item_state.last_seen_version = server.model.version
    v = item_state.v
    q_star = y_star.values @ v[y_star.idx] if y_star.idx.size else np.zeros(v.shape[1])
    require_finite(q_star, "cold-start item factor")

    item_state.append_item(y_star)
    new_q = np.vstack([server.model.q, q_star[None, :]])
    server.model = MasterModel(
        version=server.model.version + 1,
        signature=server._sig_rng.bytes(wire.SIGNATURE_BYTES),
        q=new_q,
        u=server.model.u,
    )
    # grow the optimizer moments for the appended row and drop in-flight work
    server.adam_q = AdamState(
        m=np.vstack([server.adam_q.m, np.zeros((1, new_q.shape[1]))]),
        v=np.vstack([server.adam_q.v, np.zeros((1, new_q.shape[1]))]),
        step_count=server.adam_q.step_count,
    )
    server.stale_dropped += len(server.queue)
    server.queue.clear()
    server.accepted_count = 0
    _reset_accumulators(server)
    return server.model


def cold_start_user_item(
    x_star: FeatureVector,
    y_star: FeatureVector,
    item_state: ItemServerState,
    server: ServerState,
) -> ColdStartResult:
    """Out-of-matrix prediction: new user and new item at once.

    Inserts the item first, then scores the projected user against the
    grown catalog; the last score entry is the new user / new item pair.
    """
    model = cold_start_item(y_star, item_state, server)
    return cold_start_user(x_star, model)
