# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-client hot kernels; contracts match `_reference` exactly."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"


def client_gradients(double[::1] p, double[:, ::1] q, cnp.int64_t[::1] obs_idx,
                     double[::1] obs_val, double alpha, u=None, x_dense=None):
    """Per-item and per-feature gradient contributions of one user.

    See `fedmvmf.kernels._reference.client_gradients` for the contract.
    """
    cdef Py_ssize_t n_v = q.shape[0]
    cdef Py_ssize_t k = q.shape[1]
    cdef Py_ssize_t n_obs = obs_idx.shape[0]
    cdef Py_ssize_t i, j, t, d

    scores_arr = np.empty(n_v)
    q_grad_arr = np.empty((n_v, k))
    cdef double[::1] scores = scores_arr
    cdef double[:, ::1] q_grad = q_grad_arr
    cdef double s, coef, r

    for j in range(n_v):
        s = 0.0
        for t in range(k):
            s += q[j, t] * p[t]
        scores[j] = s
        coef = -s
        for t in range(k):
            q_grad[j, t] = coef * p[t]
    for i in range(n_obs):
        j = obs_idx[i]
        r = obs_val[i]
        coef = (1.0 + alpha * r) * (r - scores[j])
        for t in range(k):
            q_grad[j, t] = coef * p[t]

    if u is None:
        return q_grad_arr, None, scores_arr

    cdef double[:, ::1] u_view = u
    cdef double[::1] x_view = x_dense
    cdef Py_ssize_t d_u = u_view.shape[0]
    u_grad_arr = np.empty((d_u, k))
    cdef double[:, ::1] u_grad = u_grad_arr
    for d in range(d_u):
        s = 0.0
        for t in range(k):
            s += u_view[d, t] * p[t]
        coef = x_view[d] - s
        for t in range(k):
            u_grad[d, t] = coef * p[t]
    return q_grad_arr, u_grad_arr, scores_arr


def p_normal_terms(double[:, ::1] q, cnp.int64_t[::1] obs_idx, double[::1] obs_val,
                   double alpha, double[:, ::1] qtq):
    """Interaction-only normal-equation terms for one user's factor solve.

    See `fedmvmf.kernels._reference.p_normal_terms` for the contract.
    """
    cdef Py_ssize_t k = q.shape[1]
    cdef Py_ssize_t n_obs = obs_idx.shape[0]
    cdef Py_ssize_t i, j, t1, t2

    a_arr = np.array(qtq, copy=True)
    b_arr = np.zeros(k)
    cdef double[:, ::1] a = a_arr
    cdef double[::1] b = b_arr
    cdef double w, wr, r

    for i in range(n_obs):
        j = obs_idx[i]
        r = obs_val[i]
        w = alpha * r
        wr = (1.0 + w) * r
        for t1 in range(k):
            b[t1] += wr * q[j, t1]
            for t2 in range(k):
                a[t1, t2] += w * q[j, t1] * q[j, t2]
    return a_arr, b_arr
