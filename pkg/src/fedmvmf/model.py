"""Multi-view matrix factorization core.

The model jointly factorizes an implicit-feedback interaction matrix and
two side-information matrices:

    interactions  R (users x items)         ~ P Q^T
    user features X (users x user feats)    ~ P U^T
    item features Y (items x item feats)    ~ Q V^T

sharing the user factors P and item factors Q. Unobserved interactions are
zeros with unit confidence; an observed value r carries confidence
1 + alpha * r. The objective is

    sum_ij c_ij (r_ij - p_i.q_j)^2
      + lambda1 * (||X - P U^T||_F^2 + ||Y - Q V^T||_F^2)
      + lambda2 * (||P||_F^2 + ||Q||_F^2 + ||U||_F^2 + ||V||_F^2)

This module holds the per-user / item-server gradient contributions, the
server-side aggregates, and the local closed-form solves for p and v. All
functions here are pure; per-user operations read only that user's data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedmvmf import kernels
from fedmvmf.numerics import as_matrix, require_finite, solve_spd


@dataclass(frozen=True)
class HyperParams:
    """Model and aggregation hyper-parameters.

    k        latent factor count
    alpha    implicit-feedback confidence weight, c = 1 + alpha * r
    lambda1  side-information strength in [0, 1]; 0 disables the side
             views entirely (single-view collaborative filtering)
    lambda2  L2 regularizer on all factor matrices
    theta    number of accepted payloads required before the server
             aggregates and promotes a new master model
    """

    k: int
    alpha: float
    lambda1: float
    lambda2: float
    theta: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ValueError(f"lambda1 must be in [0, 1], got {self.lambda1}")
        if self.lambda2 < 0:
            raise ValueError(f"lambda2 must be >= 0, got {self.lambda2}")
        if self.theta < 1:
            raise ValueError(f"theta must be >= 1, got {self.theta}")


def _index_value_arrays(indices, values, dim, what):
    idx = np.ascontiguousarray(indices, dtype=np.int64)
    val = np.ascontiguousarray(values, dtype=np.float64)
    if idx.ndim != 1 or val.ndim != 1 or idx.size != val.size:
        raise ValueError(f"{what}: indices and values must be 1-D and equal length")
    if idx.size:
        if idx.min() < 0 or idx.max() >= dim:
            raise ValueError(f"{what}: index out of range [0, {dim})")
        if np.unique(idx).size != idx.size:
            raise ValueError(f"{what}: duplicate indices")
    return idx, val


@dataclass(frozen=True, eq=False)
class InteractionRow:
    """One user's observed interactions over a catalog of n_items.

    Indices absent from item_idx are implicit zeros (r = 0, confidence 1).
    """

    user_id: str
    item_idx: np.ndarray
    values: np.ndarray
    n_items: int

    def __post_init__(self):
        idx, val = _index_value_arrays(self.item_idx, self.values, self.n_items, "interactions")
        if val.size and val.min() < 0:
            raise ValueError("interaction values must be >= 0")
        object.__setattr__(self, "item_idx", idx)
        object.__setattr__(self, "values", val)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.n_items)
        dense[self.item_idx] = self.values
        return dense


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Sparse non-negative feature vector of a user or an item."""

    dim: int
    idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        idx, val = _index_value_arrays(self.idx, self.values, self.dim, "features")
        object.__setattr__(self, "idx", idx)
        object.__setattr__(self, "values", val)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.dim)
        dense[self.idx] = self.values
        return dense


def confidence(r: float, alpha: float) -> float:
    """Implicit-feedback confidence c = 1 + alpha * r."""
    return 1.0 + alpha * r


def cost(p, q, u, v, interactions, user_features, item_features, hp: HyperParams) -> float:
    """Full objective over all (user, item) pairs, observed and implicit.

    u, v and the feature lists may be None when the side views are unused;
    any factor passed as None contributes nothing to the regularizer.
    Intended for tests and convergence monitoring: p is the stacked matrix
    of per-user factors, which only ever exists in such omniscient callers.
    """
    p = as_matrix(p, "p")
    q = as_matrix(q, "q")
    n_users, n_items = p.shape[0], q.shape[0]
    if len(interactions) != n_users:
        raise ValueError(f"{len(interactions)} interaction rows for {n_users} user factors")
    r = np.zeros((n_users, n_items))
    for i, row in enumerate(interactions):
        if row.n_items != n_items:
            raise ValueError(f"row {i} has catalog size {row.n_items}, expected {n_items}")
        r[i, row.item_idx] = row.values
    x = _stack_features(user_features, n_users) if user_features is not None else None
    y = _stack_features(item_features, n_items) if item_features is not None else None
    return cost_dense(p, q, u, v, r, x, y, hp)


def cost_dense(p, q, u, v, r, x, y, hp: HyperParams) -> float:
    """Objective on pre-assembled dense matrices; see `cost`."""
    c = 1.0 + hp.alpha * r
    e = r - p @ q.T
    total = float(np.sum(c * e * e))
    if hp.lambda1 > 0:
        if x is not None and u is not None:
            ex = x - p @ u.T
            total += hp.lambda1 * float(np.sum(ex * ex))
        if y is not None and v is not None:
            ey = y - q @ v.T
            total += hp.lambda1 * float(np.sum(ey * ey))
    if hp.lambda2 > 0:
        for factor in (p, q, u, v):
            if factor is not None:
                total += hp.lambda2 * float(np.sum(factor * factor))
    return total


def _stack_features(features, expected_rows) -> np.ndarray:
    if len(features) != expected_rows:
        raise ValueError(f"{len(features)} feature vectors for {expected_rows} entities")
    return np.stack([f.to_dense() for f in features]) if features else np.zeros((0, 0))


def client_q_grad(p_i, q_row_j, r_ij: float, hp: HyperParams) -> np.ndarray:
    """One user's gradient contribution for one item row of q.

    c_ij * (r_ij - <p_i, q_j>) * p_i; a full client pass emits this for
    every catalog item, implicit zeros included.
    """
    c = confidence(r_ij, hp.alpha)
    return c * (r_ij - float(np.dot(p_i, q_row_j))) * np.asarray(p_i, dtype=np.float64)


def client_u_grad(p_i, u_row, x_val: float) -> np.ndarray:
    """One user's contribution for one user-feature row of u:
    (x_val - <p_i, u_row>) * p_i."""
    return (x_val - float(np.dot(p_i, u_row))) * np.asarray(p_i, dtype=np.float64)


def item_server_q_grad(v_row, q_row_j, y_val: float) -> np.ndarray:
    """Item server's contribution for item j from one item feature:
    (y_val - <v_row, q_j>) * v_row."""
    return (y_val - float(np.dot(v_row, q_row_j))) * np.asarray(v_row, dtype=np.float64)


def aggregate_q_grad(client_sums, item_sums, q, hp: HyperParams) -> np.ndarray:
    """Objective gradient w.r.t. q from summed contributions.

    row j = -2 * sum_i f(j, i) - 2 * lambda1 * sum_d f(j, d) + 2 * lambda2 * q_j.
    item_sums may be None when the item-feature view is disabled.
    """
    q = as_matrix(q, "q")
    client_sums = as_matrix(client_sums, "client_sums")
    if client_sums.shape != q.shape:
        raise ValueError(f"client_sums shape {client_sums.shape} != q shape {q.shape}")
    grad = -2.0 * client_sums + 2.0 * hp.lambda2 * q
    if item_sums is not None:
        item_sums = as_matrix(item_sums, "item_sums")
        if item_sums.shape != q.shape:
            raise ValueError(f"item_sums shape {item_sums.shape} != q shape {q.shape}")
        grad -= 2.0 * hp.lambda1 * item_sums
    return grad


def aggregate_u_grad(client_sums, u, hp: HyperParams) -> np.ndarray:
    """Objective gradient w.r.t. u from summed client contributions.

    row d = -2 * lambda1 * sum_i f(i, d) + 2 * lambda2 * u_d.
    """
    u = as_matrix(u, "u")
    client_sums = as_matrix(client_sums, "client_sums")
    if client_sums.shape != u.shape:
        raise ValueError(f"client_sums shape {client_sums.shape} != u shape {u.shape}")
    return -2.0 * hp.lambda1 * client_sums + 2.0 * hp.lambda2 * u


def update_p_local(row: InteractionRow, x_i, q, u, hp: HyperParams, *, qtq=None, utu=None) -> np.ndarray:
    """Closed-form user factor minimizing the objective in p_i.

    p_i = (r C Q + lambda1 * x U) (Q^T C Q + lambda1 * U^T U + lambda2 I)^-1

    with C = diag(1 + alpha * r) over the full catalog. Only observed items
    contribute beyond Q^T Q because C - I vanishes on implicit zeros. Pass
    precomputed gram matrices qtq = Q^T Q and utu = U^T U to amortize work
    across the users of one round. x_i and u are ignored when lambda1 = 0.
    """
    q = as_matrix(q, "q")
    if row.n_items > q.shape[0]:
        # q may have extra rows (items appended after this row was built,
        # implicit zeros for this user), but never fewer.
        raise ValueError(f"row catalog size {row.n_items} exceeds q rows {q.shape[0]}")
    if qtq is None:
        qtq = q.T @ q
    a, b = kernels.p_normal_terms(q, row.item_idx, row.values, hp.alpha, qtq)
    if hp.lambda1 > 0:
        u = as_matrix(u, "u")
        if utu is None:
            utu = u.T @ u
        a = a + hp.lambda1 * utu
        if x_i is not None and x_i.idx.size:
            b = b + hp.lambda1 * (x_i.values @ u[x_i.idx])
    a[np.diag_indices_from(a)] += hp.lambda2
    return require_finite(solve_spd(a, b), "p factor")


def update_v_local(y_col: FeatureVector, q, hp: HyperParams, *, qtq=None) -> np.ndarray:
    """Closed-form item-feature factor for one feature column of Y.

    v_d = (y_col Q) (Q^T Q + (lambda2 / lambda1) I)^-1, where y_col holds
    that feature's value for every item. Requires lambda1 > 0.
    """
    if hp.lambda1 == 0:
        raise ValueError("side information disabled; V undefined")
    q = as_matrix(q, "q")
    if y_col.dim != q.shape[0]:
        raise ValueError(f"feature column length {y_col.dim} != q rows {q.shape[0]}")
    if qtq is None:
        qtq = q.T @ q
    a = qtq.copy()
    a[np.diag_indices_from(a)] += hp.lambda2 / hp.lambda1
    b = y_col.values @ q[y_col.idx] if y_col.idx.size else np.zeros(q.shape[1])
    return require_finite(solve_spd(a, b), "v factor")


def solve_v_all(y_dense, q, hp: HyperParams) -> np.ndarray:
    """All rows of V at once: V = Y^T Q (Q^T Q + (lambda2/lambda1) I)^-1."""
    if hp.lambda1 == 0:
        raise ValueError("side information disabled; V undefined")
    q = as_matrix(q, "q")
    y_dense = as_matrix(y_dense, "y")
    if y_dense.shape[0] != q.shape[0]:
        raise ValueError(f"y has {y_dense.shape[0]} item rows, q has {q.shape[0]}")
    a = q.T @ q
    a[np.diag_indices_from(a)] += hp.lambda2 / hp.lambda1
    return require_finite(solve_spd(a, q.T @ y_dense).T, "v factors")


def predict_scores(p_i, q) -> np.ndarray:
    """Predicted interaction scores of one user over the whole catalog."""
    q = as_matrix(q, "q")
    p_i = np.ascontiguousarray(p_i, dtype=np.float64)
    if p_i.ndim != 1 or p_i.size != q.shape[1]:
        raise ValueError(f"p has shape {p_i.shape}, expected ({q.shape[1]},)")
    return q @ p_i
