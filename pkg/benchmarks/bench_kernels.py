"""Benchmark the compiled kernels against the numpy fallback.

The per-client update (factor solve terms + gradient payload assembly) is
the hot inner loop of the protocol simulation: it runs once per sampled
client per round. This script times both backends on representative client
shapes and a full simulated client round.

Usage: python benchmarks/bench_kernels.py [--items 200] [--k 4] [--obs 10]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fedmvmf.kernels import _reference

try:
    from fedmvmf.kernels import _fast
except ImportError:
    _fast = None


def time_us(fn, repeats=2000, warmup=50):
    for _ in range(warmup):
        fn()
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return 1e6 * (time.perf_counter() - start) / repeats


def bench_case(n_items, d_u, k, n_obs, alpha=2.0):
    rng = np.random.default_rng(0)
    p = rng.standard_normal(k)
    q = rng.standard_normal((n_items, k))
    u = rng.standard_normal((d_u, k))
    x = rng.standard_normal(d_u)
    obs_idx = np.sort(rng.choice(n_items, size=n_obs, replace=False)).astype(np.int64)
    obs_val = np.ones(n_obs)
    qtq = q.T @ q

    rows = []
    for name, impl in [("python", _reference)] + ([("compiled", _fast)] if _fast else []):
        grad_us = time_us(lambda: impl.client_gradients(p, q, obs_idx, obs_val, alpha, u=u, x_dense=x))
        terms_us = time_us(lambda: impl.p_normal_terms(q, obs_idx, obs_val, alpha, qtq))
        rows.append((name, grad_us, terms_us))
    return rows


def bench_client_round(n_items, d_u, k, n_obs):
    from fedmvmf.federation import ClientState, client_round, server_init
    from fedmvmf.model import FeatureVector, HyperParams, InteractionRow

    rng = np.random.default_rng(1)
    hp = HyperParams(k=k, alpha=2.0, lambda1=0.9, lambda2=0.1, theta=1)
    server = server_init(hp, n_items, d_u, seed=0)
    obs = np.sort(rng.choice(n_items, size=n_obs, replace=False)).astype(np.int64)
    client = ClientState(
        user_id="bench",
        row=InteractionRow("bench", obs, np.ones(n_obs), n_items),
        features=FeatureVector(d_u, np.arange(d_u, dtype=np.int64), rng.standard_normal(d_u)),
    )
    grams = (server.model.q.T @ server.model.q, server.model.u.T @ server.model.u)
    return time_us(lambda: client_round(client, server.model, hp, grams=grams), repeats=500)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--items", type=int, default=200)
    parser.add_argument("--user-features", type=int, default=16)
    parser.add_argument("--k", type=int, default=4)
    parser.add_argument("--obs", type=int, default=10)
    args = parser.parse_args()

    if _fast is None:
        print("compiled kernels not built; timing the numpy fallback only\n")

    print(f"client shapes: {args.items} items, {args.user_features} user features, "
          f"k={args.k}, {args.obs} observed\n")
    print(f"{'backend':10s} {'client_gradients':>18s} {'p_normal_terms':>16s}")
    rows = bench_case(args.items, args.user_features, args.k, args.obs)
    for name, grad_us, terms_us in rows:
        print(f"{name:10s} {grad_us:15.1f}us {terms_us:13.1f}us")
    if len(rows) == 2:
        speedup_g = rows[0][1] / rows[1][1]
        speedup_t = rows[0][2] / rows[1][2]
        print(f"{'speedup':10s} {speedup_g:15.1f}x  {speedup_t:13.1f}x")

    print(f"\nfull client round (selected backend): "
          f"{bench_client_round(args.items, args.user_features, args.k, args.obs):.1f}us")


if __name__ == "__main__":
    main()
