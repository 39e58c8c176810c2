"""Numpy implementations of the per-client hot kernels.

These are the fallback used when the compiled extension is unavailable.
Both backends implement exactly the same contracts; see `fedmvmf.kernels`.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def client_gradients(p, q, obs_idx, obs_val, alpha, u=None, x_dense=None):
    """Per-item and per-feature gradient contributions of one user.

    Returns (q_grad, u_grad, scores) where

      scores[j] = <p, q_j>
      q_grad[j] = (1 + alpha * r_j) * (r_j - scores[j]) * p   with r_j = 0
                  for items the user never interacted with,
      u_grad[d] = (x_d - <p, u_d>) * p, or None when u is None.
    """
    scores = q @ p
    resid = -scores
    coef = resid.copy()
    if obs_idx.size:
        r = obs_val
        resid_obs = r - scores[obs_idx]
        coef[obs_idx] = (1.0 + alpha * r) * resid_obs
    q_grad = np.outer(coef, p)
    u_grad = None
    if u is not None:
        u_grad = np.outer(x_dense - u @ p, p)
    return q_grad, u_grad, scores


def p_normal_terms(q, obs_idx, obs_val, alpha, qtq):
    """Interaction-only normal-equation terms for one user's factor solve.

    Returns (a, b) with

      a = Q^T C Q = qtq + sum_obs alpha * r_j * q_j q_j^T
      b = sum_obs (1 + alpha * r_j) * r_j * q_j

    where C = diag(1 + alpha * r) over the full catalog; only observed
    items contribute beyond the precomputed qtq because c - 1 = alpha * r.
    """
    a = qtq.copy()
    k = q.shape[1]
    if obs_idx.size == 0:
        return a, np.zeros(k)
    qo = q[obs_idx]
    w = alpha * obs_val
    a += (qo * w[:, None]).T @ qo
    b = ((1.0 + w) * obs_val) @ qo
    return a, b
