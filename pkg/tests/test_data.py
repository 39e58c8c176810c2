import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmvmf.data import (
    apply_transforms,
    feature_hash_index,
    gen_synthetic,
    hash_features,
    load_dataset,
    load_interactions,
    split_per_user,
    to_implicit,
    write_dataset,
)


class TestLoadInteractions:
    def test_parses_triples(self, tmp_path):
        path = tmp_path / "r.tsv"
        path.write_text("u1\ti9\t4\nu2\ti3\t1\n")
        triples, malformed = load_interactions(path)
        assert triples == [("u1", "i9", 4.0), ("u2", "i3", 1.0)]
        assert malformed == 0

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.tsv"
        path.write_text("")
        triples, malformed = load_interactions(path)
        assert triples == [] and malformed == 0

    def test_malformed_counted_and_tolerated(self, tmp_path):
        path = tmp_path / "r.tsv"
        path.write_text("u1\ti1\t1\nbroken line\nu2\ti2\tnot-a-number\nu3\ti3\t2\n")
        triples, malformed = load_interactions(path, max_malformed_fraction=0.5)
        assert len(triples) == 2 and malformed == 2

    def test_malformed_over_limit_errors(self, tmp_path):
        path = tmp_path / "r.tsv"
        path.write_text("u1\ti1\t1\nbroken\n")
        with pytest.raises(ValueError, match="malformed"):
            load_interactions(path)

    def test_custom_delimiter(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("u1,i1,2.5\n")
        triples, _ = load_interactions(path, delimiter=",")
        assert triples == [("u1", "i1", 2.5)]

    def test_movielens_scale_line_count(self, tmp_path):
        # one triple per well-formed line at full benchmark scale
        n = 914676
        path = tmp_path / "big.tsv"
        with open(path, "w") as fh:
            for i in range(n):
                fh.write(f"u{i % 6040}\ti{i % 3064}\t{1 + i % 5}\n")
        triples, malformed = load_interactions(path)
        assert len(triples) == n and malformed == 0


class TestToImplicit:
    def test_positive_becomes_one(self):
        assert to_implicit([("u", "i", 4.0)]) == [("u", "i", 1.0)]

    def test_zero_dropped(self):
        assert to_implicit([("u", "i", 0.0)]) == []

    def test_all_zero_empty(self):
        assert to_implicit([("u", "a", 0.0), ("u", "b", 0.0)]) == []

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            to_implicit([("u", "i", -1.0)])


class TestHashFeatures:
    def test_empty_gives_zero_vector(self):
        fv = hash_features([], hash_size=8, hash_seed=0)
        assert fv.dim == 8 and fv.idx.size == 0
        assert np.array_equal(fv.to_dense(), np.zeros(8))

    def test_single_feature_single_unit_entry(self):
        fv = hash_features([("age", "30")], hash_size=8, hash_seed=0)
        dense = fv.to_dense()
        assert dense.sum() == 1.0
        assert (dense == 1.0).sum() == 1

    def test_engineered_collision_accumulates(self):
        hash_size, seed = 8, 0
        target = feature_hash_index("f", "0", hash_size, seed)
        other = next(
            v for v in range(1, 10_000)
            if feature_hash_index("f", str(v), hash_size, seed) == target
        )
        fv = hash_features([("f", "0"), ("f", str(other))], hash_size, seed)
        assert fv.to_dense()[target] == 2.0

    def test_deterministic_across_calls(self):
        pairs = [("a", "x"), ("b", "y"), ("c", "z")]
        one = hash_features(pairs, 32, 7)
        two = hash_features(pairs, 32, 7)
        assert np.array_equal(one.to_dense(), two.to_dense())

    def test_seed_changes_layout(self):
        pairs = [(f"f{i}", str(i)) for i in range(20)]
        a = hash_features(pairs, 1024, 1).to_dense()
        b = hash_features(pairs, 1024, 2).to_dense()
        assert not np.array_equal(a, b)

    @given(st.lists(st.tuples(st.text(max_size=8), st.text(max_size=8)), max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_total_mass_equals_input_count(self, pairs):
        fv = hash_features(pairs, hash_size=16, hash_seed=3)
        assert fv.to_dense().sum() == len(pairs)
        assert np.all(fv.values >= 1)


def ten_item_dataset():
    from fedmvmf.data import Dataset
    from fedmvmf.model import InteractionRow

    row = InteractionRow("u0", np.arange(10, dtype=np.int64), np.ones(10), n_items=10)
    return Dataset(n_users=1, n_items=10, interactions=[row], user_ids=["u0"], item_ids=[f"i{j}" for j in range(10)])


class TestSplitPerUser:
    def test_80_20(self):
        split = split_per_user(ten_item_dataset(), 0.8, seed=1)
        assert split.train.interactions[0].item_idx.size == 8
        assert len(split.test[0]) == 2

    def test_single_interaction_goes_to_train(self):
        ds = gen_synthetic(3, 40, 2, 2, 1, 0.0, seed=2, density=0.03)
        sizes = [row.item_idx.size for row in ds.interactions]
        split = split_per_user(ds, 0.8, seed=0)
        for i, n in enumerate(sizes):
            if n == 1:
                assert split.train.interactions[i].item_idx.size == 1
                assert i not in split.test

    def test_same_seed_same_split(self):
        ds = gen_synthetic(6, 30, 2, 2, 2, 0.0, seed=3, density=0.3)
        a = split_per_user(ds, 0.8, seed=9)
        b = split_per_user(ds, 0.8, seed=9)
        assert a.test == b.test
        for ra, rb in zip(a.train.interactions, b.train.interactions):
            assert np.array_equal(ra.item_idx, rb.item_idx)

    def test_partition_property(self):
        ds = gen_synthetic(10, 25, 2, 2, 2, 0.0, seed=4, density=0.4)
        split = split_per_user(ds, 0.7, seed=5)
        for i, row in enumerate(ds.interactions):
            train_items = set(split.train.interactions[i].item_idx.tolist())
            test_items = set(split.test.get(i, frozenset()))
            assert train_items | test_items == set(row.item_idx.tolist())
            assert not train_items & test_items

    def test_fraction_bounds(self):
        ds = gen_synthetic(2, 10, 2, 2, 1, 0.0, seed=0, density=0.3)
        with pytest.raises(ValueError):
            split_per_user(ds, 1.0, seed=0)


class TestGenSynthetic:
    def test_density_near_target(self):
        ds = gen_synthetic(60, 50, 4, 4, 3, 0.0, seed=6, density=0.05)
        assert abs(ds.density() - 0.05) <= 0.01

    def test_same_seed_identical(self):
        a = gen_synthetic(8, 9, 3, 3, 2, 0.1, seed=7)
        b = gen_synthetic(8, 9, 3, 3, 2, 0.1, seed=7)
        for ra, rb in zip(a.interactions, b.interactions):
            assert np.array_equal(ra.item_idx, rb.item_idx)
        for fa, fb in zip(a.user_features, b.user_features):
            assert np.array_equal(fa.values, fb.values)

    def test_zero_rank_rejected(self):
        with pytest.raises(ValueError, match="dimensions"):
            gen_synthetic(5, 5, 2, 2, 0, 0.0, seed=0)

    def test_features_are_low_rank_products(self):
        ds = gen_synthetic(10, 8, 5, 6, 2, 0.0, seed=8)
        x = np.stack([f.to_dense() for f in ds.user_features])
        assert np.linalg.matrix_rank(x, tol=1e-8) <= 2


class TestTransforms:
    def test_bucket(self):
        out = apply_transforms([("age", "37")], [{"field": "age", "op": "bucket", "width": 10}])
        assert out == [("age", "30")]

    def test_zip_region(self):
        out = apply_transforms([("zip", "90210")], [{"field": "zip", "op": "zip_region"}])
        assert out == [("zip", "west")]

    def test_keywords(self):
        out = apply_transforms(
            [("title", "The Art of WAR!")], [{"field": "title", "op": "keywords", "min_len": 3}]
        )
        assert out == [("title", "the"), ("title", "art"), ("title", "war")]

    def test_unknown_op_rejected(self):
        with pytest.raises(ValueError, match="unknown transform"):
            apply_transforms([("a", "b")], [{"field": "a", "op": "nope"}])


class TestDatasetFiles:
    def test_write_then_load_round_trip(self, tmp_path):
        ds = gen_synthetic(12, 10, 4, 5, 2, 0.0, seed=9, density=0.3)
        config_path = write_dataset(ds, tmp_path / "synth")
        loaded = load_dataset(config_path)
        # the loader's universe is the interacting entities, so users/items
        # with no interactions are dropped; everything else round-trips
        active_users = [row.user_id for row in ds.interactions if row.item_idx.size]
        assert loaded.user_ids == sorted(active_users)
        assert loaded.n_interactions == ds.n_interactions
        by_id = {row.user_id: row for row in ds.interactions}
        for row in loaded.interactions:
            orig = by_id[row.user_id]
            orig_items = {ds.item_ids[int(j)] for j in orig.item_idx}
            got_items = {loaded.item_ids[int(j)] for j in row.item_idx}
            assert got_items == orig_items
        for uid, fv in zip(loaded.user_ids, loaded.user_features):
            orig_fv = ds.user_features[ds.user_ids.index(uid)]
            np.testing.assert_array_equal(fv.to_dense(), orig_fv.to_dense())

    def test_categorical_loader_hashes(self, tmp_path):
        (tmp_path / "r.tsv").write_text("u1\ti1\t1\nu2\ti1\t1\n")
        (tmp_path / "uf.tsv").write_text("u1\tage=30\tjob=doctor\nu2\tage=40\n")
        config = tmp_path / "dataset.json"
        config.write_text(
            '{"interactions": "r.tsv", "delimiter": "\\t",'
            ' "user_features": {"path": "uf.tsv", "format": "categorical",'
            ' "hash_size": 16, "hash_seed": 1}}'
        )
        ds = load_dataset(config)
        assert ds.n_users == 2
        assert ds.user_features[0].dim == 16
        assert ds.user_features[0].to_dense().sum() == 2.0
        assert ds.user_features[1].to_dense().sum() == 1.0

    def test_missing_features_drop_interactions(self, tmp_path):
        (tmp_path / "r.tsv").write_text("u1\ti1\t1\nu2\ti1\t1\nu3\ti2\t1\n")
        (tmp_path / "uf.tsv").write_text("u1\tage=30\nu2\tage=40\n")
        config = tmp_path / "dataset.json"
        config.write_text(
            '{"interactions": "r.tsv",'
            ' "user_features": {"path": "uf.tsv", "format": "categorical",'
            ' "hash_size": 8, "hash_seed": 0}}'
        )
        ds = load_dataset(config)
        assert ds.n_users == 2  # u3 has no features and is excluded
        assert ds.user_ids == ["u1", "u2"]
