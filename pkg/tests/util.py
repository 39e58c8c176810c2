"""Shared converters between dense test arrays and the library's types."""

from __future__ import annotations

import numpy as np

from fedmvmf.model import FeatureVector, InteractionRow


def rows_from_dense(r):
    rows = []
    n_items = r.shape[1]
    for i in range(r.shape[0]):
        idx = np.flatnonzero(r[i]).astype(np.int64)
        rows.append(InteractionRow(user_id=f"u{i}", item_idx=idx, values=r[i][idx], n_items=n_items))
    return rows


def feats_from_dense(x):
    dim = x.shape[1]
    idx = np.arange(dim, dtype=np.int64)
    return [FeatureVector(dim=dim, idx=idx.copy(), values=x[i].copy()) for i in range(x.shape[0])]
