"""Ranking metrics over held-out interactions, plus payload accounting.

Metrics follow the usual top-k conventions: precision@k = hits / k,
recall@k = hits / |relevant|, F1 their harmonic mean, AP@k averaged over
users for MAP, and NMR the mean normalized rank of relevant items in the
full ranking (lower is better). Users with an empty relevant set are
skipped and contribute to no average.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from fedmvmf import wire
from fedmvmf.optimizer import AdamConfig, AdamState, adam_step

METRIC_NAMES = ("precision", "recall", "f1", "map", "nmr")


@dataclass(frozen=True)
class MetricsSample:
    """Per-round metric aggregate over the users that reported."""

    precision: float
    recall: float
    f1: float
    map: float
    nmr: float
    user_count: int
    round: int = 0

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_NAMES}


@dataclass(frozen=True)
class PayloadReport:
    """Byte counts from the wire format plus measured timings."""

    download_bytes: int
    upload_bytes: int
    client_update_ms: float
    server_update_ms: float


def rank_items(scores, mask=()) -> np.ndarray:
    """Item indices by descending score, ties broken by ascending index.

    Items listed in mask (typically the user's training items) are removed
    before ranking.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite entries")
    order = np.argsort(-scores, kind="stable")
    mask = np.fromiter(mask, dtype=np.int64) if not isinstance(mask, np.ndarray) else mask
    if mask.size:
        excluded = np.zeros(scores.size, dtype=bool)
        excluded[mask] = True
        order = order[~excluded[order]]
    return order


def precision_recall_f1_at_k(ranked, relevant, k: int):
    """(precision, recall, f1) over the top k, or None when the user has
    no relevant items and is skipped."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not relevant:
        return None
    hits = sum(1 for item in ranked[:k] if item in relevant)
    precision = hits / k
    recall = hits / len(relevant)
    f1 = 0.0 if hits == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def map_at_k(ranked, relevant, k: int):
    """Average precision over the top k for one user, or None if skipped.

    AP = (1 / min(k, |relevant|)) * sum over hit positions h of precision@h.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not relevant:
        return None
    hits = 0
    total = 0.0
    for pos, item in enumerate(ranked[:k], start=1):
        if item in relevant:
            hits += 1
            total += hits / pos
    return total / min(k, len(relevant))


def nmr(ranked_full, relevant):
    """Mean over relevant items of (1-based rank) / (ranking length), or
    None if the user is skipped. ranked_full must cover the whole
    evaluable catalog, so 1/N is the best value and 1.0 the worst."""
    if not relevant:
        return None
    n = len(ranked_full)
    ranks = [pos for pos, item in enumerate(ranked_full, start=1) if item in relevant]
    if not ranks:
        raise ValueError("ranking does not cover the relevant items")
    return sum(ranks) / (len(ranks) * n)


def user_metrics(scores, train_items, test_items, k: int, normalize: bool = False):
    """All per-user metrics in one pass, or None when the user is skipped.

    Training items are masked out of the ranking first. With normalize=True
    the precision/recall/F1 values are divided by the best achievable value
    given |relevant| and k (AP is already normalized; NMR stays raw).
    """
    relevant = set(test_items)
    if not relevant:
        return None
    ranked = rank_items(scores, mask=train_items)
    if ranked.size == 0:
        return None
    prf = precision_recall_f1_at_k(ranked, relevant, k)
    ap = map_at_k(ranked, relevant, k)
    rank_val = nmr(ranked, relevant)
    precision, recall, f1 = prf
    if normalize:
        best_hits = min(len(relevant), k)
        best_p = best_hits / k
        best_r = best_hits / len(relevant)
        best_f1 = 2 * best_p * best_r / (best_p + best_r)
        precision /= best_p
        recall /= best_r
        f1 = f1 / best_f1 if best_f1 > 0 else f1
    return precision, recall, f1, ap, rank_val


def aggregate_user_metrics(per_user, round_index: int = 0) -> MetricsSample | None:
    """Mean the per-user (p, r, f1, ap, nmr) tuples into a MetricsSample."""
    rows = [m for m in per_user if m is not None]
    if not rows:
        return None
    means = np.mean(np.asarray(rows, dtype=np.float64), axis=0)
    return MetricsSample(
        precision=float(means[0]),
        recall=float(means[1]),
        f1=float(means[2]),
        map=float(means[3]),
        nmr=float(means[4]),
        user_count=len(rows),
        round=round_index,
    )


def impr_pct(candidate_mean: float, baseline_mean: float) -> float:
    """Relative improvement of a candidate over a baseline, in percent."""
    if baseline_mean == 0:
        raise ZeroDivisionError("baseline mean is zero; improvement undefined")
    return 100.0 * (candidate_mean - baseline_mean) / baseline_mean


def convergence_value(trace, at_round: int, window: int) -> float:
    """Mean of a per-round metric series over rounds (at_round - window, at_round].

    Rounds are 1-based; window=1 returns the value at at_round. Averaging a
    trailing window smooths out the round-to-round sampling noise caused by
    partial participation.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if at_round < window or at_round > len(trace):
        raise ValueError(f"need rounds {at_round - window + 1}..{at_round}, trace has {len(trace)}")
    chunk = trace[at_round - window : at_round]
    return float(np.mean(np.asarray(chunk, dtype=np.float64)))


def payload_report(n_items: int, n_user_features: int, k: int, repeats: int = 5) -> PayloadReport:
    """Byte counts for one model/payload exchange plus measured timings.

    n_user_features=0 describes the single-view configuration whose
    payloads carry only the item-factor block. The client timing covers a
    serialize/deserialize round trip of one payload; the server timing
    covers the Adam updates of both master matrices.
    """
    if n_items < 1 or k < 1 or n_user_features < 0:
        raise ValueError("dimensions must be positive")
    nbytes = wire.payload_num_bytes(n_items, n_user_features, k)
    q_grad = np.zeros((n_items, k))
    u_grad = np.zeros((n_user_features, k)) if n_user_features else None
    signature = bytes(wire.SIGNATURE_BYTES)

    client_times = []
    for _ in range(repeats):
        start = time.perf_counter()
        buf = wire.serialize_payload(1, wire.SOURCE_CLIENT, signature, q_grad, u_grad)
        wire.deserialize_payload(buf)
        client_times.append(time.perf_counter() - start)
    assert len(buf) == nbytes

    cfg = AdamConfig(beta1=0.1, beta2=0.98, gamma=0.1, epsilon=1e-8)
    server_times = []
    for _ in range(repeats):
        states = [AdamState.zeros(q_grad.shape)]
        targets = [np.zeros(q_grad.shape)]
        if u_grad is not None:
            states.append(AdamState.zeros(u_grad.shape))
            targets.append(np.zeros(u_grad.shape))
        grads = [q_grad] + ([u_grad] if u_grad is not None else [])
        start = time.perf_counter()
        for target, grad, state in zip(targets, grads, states):
            adam_step(target, grad, state, cfg)
        server_times.append(time.perf_counter() - start)

    return PayloadReport(
        download_bytes=nbytes,
        upload_bytes=nbytes,
        client_update_ms=1e3 * min(client_times),
        server_update_ms=1e3 * min(server_times),
    )


def write_trace_csv(entries, path) -> None:
    """Long-format trace export: one row per (round, metric)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "metric", "value", "user_count"])
        for entry in entries:
            user_count = entry.metrics.user_count if entry.metrics else 0
            if entry.cost is not None:
                writer.writerow([entry.promotion, "cost", repr(entry.cost), user_count])
            if entry.metrics is not None:
                for name, value in entry.metrics.as_dict().items():
                    writer.writerow([entry.promotion, name, repr(value), user_count])
            writer.writerow([entry.promotion, "upload_bytes", entry.upload_bytes, user_count])
            writer.writerow([entry.promotion, "download_bytes", entry.download_bytes, user_count])
