"""Dataset ingestion, implicit conversion, feature hashing and splitting.

External formats are plain delimited text: interaction files carry
(user-id, item-id, value) lines; feature files carry an entity id followed
either by name=value pairs (hashed categorical features) or by a fixed
number of floats (dense real-valued features). A small JSON config names
the paths, delimiter, hash size/seed and declarative transforms.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedmvmf.model import FeatureVector, InteractionRow
from fedmvmf.seeding import substream

_logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211


@dataclass(eq=False)
class Dataset:
    """Immutable in-memory dataset with compact integer indices."""

    n_users: int
    n_items: int
    interactions: list
    user_features: list | None = None
    item_features: list | None = None
    user_ids: list = field(default_factory=list)
    item_ids: list = field(default_factory=list)
    provenance: str = ""

    def __post_init__(self):
        if len(self.interactions) != self.n_users:
            raise ValueError(f"{len(self.interactions)} rows for {self.n_users} users")
        for row in self.interactions:
            if row.n_items != self.n_items:
                raise ValueError(f"row catalog size {row.n_items} != {self.n_items}")
        if self.user_features is not None and len(self.user_features) != self.n_users:
            raise ValueError("every user must have a feature vector")
        if self.item_features is not None and len(self.item_features) != self.n_items:
            raise ValueError("every item must have a feature vector")

    @property
    def n_interactions(self) -> int:
        return sum(row.item_idx.size for row in self.interactions)

    def density(self) -> float:
        return self.n_interactions / (self.n_users * self.n_items)


@dataclass(eq=False)
class SplitDataset:
    """Training dataset plus the per-user held-out item sets."""

    train: Dataset
    test: dict


def load_interactions(path, delimiter: str = "\t", max_malformed_fraction: float = 0.0):
    """Parse (user-id, item-id, value) lines into string-id triples.

    Returns (triples, n_malformed). Malformed lines are counted and logged;
    more than max_malformed_fraction of them is an error.
    """
    triples = []
    n_malformed = 0
    n_lines = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            n_lines += 1
            parts = line.split(delimiter)
            if len(parts) != 3:
                n_malformed += 1
                continue
            try:
                value = float(parts[2])
            except ValueError:
                n_malformed += 1
                continue
            triples.append((parts[0], parts[1], value))
    if n_lines == 0:
        _logger.warning("interaction file %s is empty", path)
    if n_malformed:
        _logger.warning("%d of %d lines in %s were malformed", n_malformed, n_lines, path)
        if n_malformed > max_malformed_fraction * n_lines:
            raise ValueError(
                f"{n_malformed}/{n_lines} malformed lines in {path} "
                f"exceeds the allowed fraction {max_malformed_fraction}"
            )
    return triples, n_malformed


def to_implicit(triples):
    """Drop zero-valued rows and map every positive value to 1."""
    out = []
    for user, item, value in triples:
        if value < 0:
            raise ValueError(f"negative interaction value {value} for ({user}, {item})")
        if value == 0:
            continue
        out.append((user, item, 1.0))
    return out


def _hash64(text: str, seed: int) -> int:
    """Seeded FNV-1a over UTF-8 bytes; deterministic across platforms."""
    h = (_FNV_OFFSET ^ (seed * 0x9E3779B97F4A7C15)) & _MASK64
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def feature_hash_index(name: str, value: str, hash_size: int, hash_seed: int) -> int:
    """Bucket index of one categorical feature, hashing "{name}__{value}"."""
    return _hash64(f"{name}__{value}", hash_seed) % hash_size


def hash_features(features, hash_size: int, hash_seed: int) -> FeatureVector:
    """Hash (name, value) pairs into a fixed-size count vector.

    Each pair adds 1 at its bucket; collisions accumulate, so the total
    mass always equals the number of input pairs.
    """
    if hash_size < 1:
        raise ValueError(f"hash_size must be >= 1, got {hash_size}")
    counts: dict[int, float] = {}
    for name, value in features:
        idx = feature_hash_index(str(name), str(value), hash_size, hash_seed)
        counts[idx] = counts.get(idx, 0.0) + 1.0
    idx = np.fromiter(sorted(counts), dtype=np.int64, count=len(counts))
    values = np.array([counts[i] for i in idx], dtype=np.float64)
    return FeatureVector(dim=hash_size, idx=idx, values=values)


def split_per_user(dataset: Dataset, train_fraction: float, seed: int) -> SplitDataset:
    """Per-user random split: ceil(fraction * n) items to train, rest held out.

    Users with a single interaction keep it in train. The test map is
    user index -> frozenset of held-out item indices.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    train_rows = []
    test = {}
    for i, row in enumerate(dataset.interactions):
        n = row.item_idx.size
        if n == 0:
            train_rows.append(row)
            continue
        order = substream(seed, "split", i).permutation(n)
        n_train = math.ceil(train_fraction * n)
        keep = np.sort(order[:n_train])
        hold = order[n_train:]
        train_rows.append(
            InteractionRow(
                user_id=row.user_id,
                item_idx=row.item_idx[keep],
                values=row.values[keep],
                n_items=row.n_items,
            )
        )
        if hold.size:
            test[i] = frozenset(int(j) for j in row.item_idx[hold])
    train = Dataset(
        n_users=dataset.n_users,
        n_items=dataset.n_items,
        interactions=train_rows,
        user_features=dataset.user_features,
        item_features=dataset.item_features,
        user_ids=dataset.user_ids,
        item_ids=dataset.item_ids,
        provenance=f"{dataset.provenance} [train split {train_fraction}]",
    )
    return SplitDataset(train=train, test=test)


def gen_synthetic(
    n_users: int,
    n_items: int,
    d_u: int,
    d_v: int,
    k_true: int,
    noise: float,
    seed: int,
    density: float = 0.05,
) -> Dataset:
    """Low-rank synthetic dataset whose side features are informative.

    Ground-truth factors are sampled standard normal (signed, so the
    interaction structure is personalized rather than popularity-driven);
    the feature matrices are their exact low-rank products plus optional
    Gaussian noise, and interactions are the top `density` fraction of the
    score matrix.
    """
    if min(n_users, n_items, d_u, d_v, k_true) < 1:
        raise ValueError("all dimensions must be >= 1")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    if not 0.0 < density < 1.0:
        raise ValueError(f"density must be in (0, 1), got {density}")
    rng = substream(seed, "synthetic")
    scale = 1.0 / np.sqrt(k_true)
    p = scale * rng.standard_normal((n_users, k_true))
    q = scale * rng.standard_normal((n_items, k_true))
    u = rng.standard_normal((d_u, k_true))
    v = rng.standard_normal((d_v, k_true))
    x = p @ u.T
    y = q @ v.T
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
        y = y + noise * rng.standard_normal(y.shape)
    scores = p @ q.T
    threshold = np.quantile(scores, 1.0 - density)
    r = scores > threshold

    interactions = []
    for i in range(n_users):
        idx = np.flatnonzero(r[i]).astype(np.int64)
        interactions.append(
            InteractionRow(
                user_id=f"u{i}",
                item_idx=idx,
                values=np.ones(idx.size),
                n_items=n_items,
            )
        )
    dense_u = [FeatureVector(dim=d_u, idx=np.arange(d_u, dtype=np.int64), values=x[i]) for i in range(n_users)]
    dense_v = [FeatureVector(dim=d_v, idx=np.arange(d_v, dtype=np.int64), values=y[j]) for j in range(n_items)]
    return Dataset(
        n_users=n_users,
        n_items=n_items,
        interactions=interactions,
        user_features=dense_u,
        item_features=dense_v,
        user_ids=[f"u{i}" for i in range(n_users)],
        item_ids=[f"i{j}" for j in range(n_items)],
        provenance=(
            f"synthetic(n_users={n_users}, n_items={n_items}, d_u={d_u}, d_v={d_v}, "
            f"k_true={k_true}, noise={noise}, density={density}, seed={seed})"
        ),
    )


# -- declarative categorical transforms --------------------------------------

_ZIP_REGIONS = {
    "0": "northeast",
    "1": "northeast",
    "2": "midatlantic",
    "3": "southeast",
    "4": "midwest",
    "5": "midwest",
    "6": "south",
    "7": "south",
    "8": "mountain",
    "9": "west",
}


def apply_transforms(pairs, transforms):
    """Rewrite raw (name, value) feature pairs per the configured transforms.

    Supported ops: {"field", "op": "bucket", "width"} groups numeric values
    into fixed-width bins; {"op": "zip_region"} maps a ZIP code to a coarse
    US region; {"op": "keywords", "min_len"} splits free text into lowercase
    word tokens.
    """
    by_field = {t["field"]: t for t in transforms}
    out = []
    for name, value in pairs:
        spec = by_field.get(name)
        if spec is None:
            out.append((name, value))
            continue
        op = spec["op"]
        if op == "bucket":
            width = spec.get("width", 10)
            try:
                bucket = int(float(value) // width) * width
            except ValueError:
                continue
            out.append((name, str(bucket)))
        elif op == "zip_region":
            digits = str(value).strip()
            region = _ZIP_REGIONS.get(digits[:1])
            if region is not None:
                out.append((name, region))
        elif op == "keywords":
            min_len = spec.get("min_len", 3)
            for token in str(value).lower().split():
                token = "".join(ch for ch in token if ch.isalnum())
                if len(token) >= min_len:
                    out.append((name, token))
        else:
            raise ValueError(f"unknown transform op {op!r}")
    return out


# -- file formats and the dataset config --------------------------------------


def _load_categorical_features(path, delimiter, hash_size, hash_seed, transforms):
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(delimiter)
            pairs = []
            for chunk in parts[1:]:
                if not chunk:
                    continue
                name, _, value = chunk.partition("=")
                pairs.append((name, value))
            if transforms:
                pairs = apply_transforms(pairs, transforms)
            vectors[parts[0]] = hash_features(pairs, hash_size, hash_seed)
    return vectors


def _load_dense_features(path, delimiter, dim):
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(delimiter)
            values = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            if values.size != dim:
                raise ValueError(f"expected {dim} values for {parts[0]}, got {values.size}")
            vectors[parts[0]] = FeatureVector(dim=dim, idx=np.arange(dim, dtype=np.int64), values=values)
    return vectors


def _load_feature_block(block, base_dir, delimiter):
    path = base_dir / block["path"]
    fmt = block.get("format", "categorical")
    if fmt == "dense":
        return _load_dense_features(path, delimiter, int(block["dim"]))
    if fmt == "categorical":
        return _load_categorical_features(
            path,
            delimiter,
            int(block["hash_size"]),
            int(block.get("hash_seed", 0)),
            block.get("transforms", []),
        )
    raise ValueError(f"unknown feature format {fmt!r}")


def load_dataset(config_path) -> Dataset:
    """Load a dataset described by a JSON config file.

    Interactions lacking a featurized user or item are dropped when the
    corresponding feature block is configured, so every retained entity has
    a feature vector.
    """
    config_path = Path(config_path)
    with open(config_path, encoding="utf-8") as fh:
        config = json.load(fh)
    base_dir = config_path.parent
    delimiter = config.get("delimiter", "\t")
    triples, _ = load_interactions(
        base_dir / config["interactions"],
        delimiter,
        config.get("max_malformed_fraction", 0.0),
    )
    if config.get("implicit", True):
        triples = to_implicit(triples)

    user_vectors = item_vectors = None
    if "user_features" in config:
        user_vectors = _load_feature_block(config["user_features"], base_dir, delimiter)
        triples = [t for t in triples if t[0] in user_vectors]
    if "item_features" in config:
        item_vectors = _load_feature_block(config["item_features"], base_dir, delimiter)
        triples = [t for t in triples if t[1] in item_vectors]

    user_ids = sorted({t[0] for t in triples})
    item_ids = sorted({t[1] for t in triples})
    user_index = {uid: i for i, uid in enumerate(user_ids)}
    item_index = {iid: j for j, iid in enumerate(item_ids)}

    per_user: dict[int, dict[int, float]] = {i: {} for i in range(len(user_ids))}
    for uid, iid, value in triples:
        per_user[user_index[uid]][item_index[iid]] = value

    interactions = []
    for i, uid in enumerate(user_ids):
        items = per_user[i]
        idx = np.fromiter(sorted(items), dtype=np.int64, count=len(items))
        values = np.array([items[j] for j in idx], dtype=np.float64)
        interactions.append(InteractionRow(user_id=uid, item_idx=idx, values=values, n_items=len(item_ids)))

    return Dataset(
        n_users=len(user_ids),
        n_items=len(item_ids),
        interactions=interactions,
        user_features=[user_vectors[uid] for uid in user_ids] if user_vectors is not None else None,
        item_features=[item_vectors[iid] for iid in item_ids] if item_vectors is not None else None,
        user_ids=user_ids,
        item_ids=item_ids,
        provenance=str(config.get("provenance", config_path)),
    )


def write_dataset(dataset: Dataset, out_dir, delimiter: str = "\t") -> Path:
    """Write a dataset to the external file formats; returns the config path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "interactions.tsv", "w", encoding="utf-8") as fh:
        for row in dataset.interactions:
            for j, value in zip(row.item_idx, row.values):
                fh.write(f"{row.user_id}{delimiter}{dataset.item_ids[int(j)]}{delimiter}{value:g}\n")
    config = {
        "interactions": "interactions.tsv",
        "delimiter": delimiter,
        "implicit": True,
        "provenance": dataset.provenance,
    }
    if dataset.user_features is not None:
        _write_dense_features(out_dir / "user_features.tsv", dataset.user_ids, dataset.user_features, delimiter)
        config["user_features"] = {
            "path": "user_features.tsv",
            "format": "dense",
            "dim": dataset.user_features[0].dim,
        }
    if dataset.item_features is not None:
        _write_dense_features(out_dir / "item_features.tsv", dataset.item_ids, dataset.item_features, delimiter)
        config["item_features"] = {
            "path": "item_features.tsv",
            "format": "dense",
            "dim": dataset.item_features[0].dim,
        }
    config_path = out_dir / "dataset.json"
    with open(config_path, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return config_path


def _write_dense_features(path, ids, vectors, delimiter):
    with open(path, "w", encoding="utf-8") as fh:
        for entity_id, vec in zip(ids, vectors):
            dense = vec.to_dense()
            fh.write(entity_id + delimiter + delimiter.join(repr(float(x)) for x in dense) + "\n")
