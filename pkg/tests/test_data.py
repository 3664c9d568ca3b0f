import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoprompt import data as dk
from protoprompt.errors import DataError, StoreError


def _store(matrix, labels, split="train"):
    return dk.EmbeddingStore(
        matrix=np.asarray(matrix, dtype=np.float64),
        classes=["a", "b"],
        labels=labels,
        split=split,
        encoder="test",
        l2_normalized=False,
    )


def test_store_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    matrix = rng.standard_normal((5, 3)).astype(np.float32).astype(np.float64)
    store = _store(matrix, [0, 0, 1, 1, 0])
    path = tmp_path / "x.ptpe"
    dk.save_store(path, store)
    loaded = dk.load_store(path)
    assert np.array_equal(loaded.matrix, matrix)
    assert loaded.labels == store.labels
    assert loaded.classes == store.classes
    assert loaded.split == "train"
    assert loaded.l2_normalized is False


@given(st.integers(0, 6), st.integers(1, 5))
@settings(max_examples=20, deadline=None)
def test_store_roundtrip_property(tmp_path_factory, rows, dim):
    tmp = tmp_path_factory.mktemp("store")
    rng = np.random.default_rng(rows * 7 + dim)
    matrix = rng.standard_normal((rows, dim)).astype(np.float32).astype(np.float64)
    store = dk.EmbeddingStore(matrix=matrix, classes=["c"], labels=[0] * rows,
                              split="test", encoder="e", l2_normalized=True)
    path = tmp / "s.ptpe"
    dk.save_store(path, store)
    loaded = dk.load_store(path)
    assert np.array_equal(loaded.matrix, matrix)
    assert loaded.l2_normalized is True


def test_store_empty_matrix_is_valid(tmp_path):
    path = tmp_path / "empty.ptpe"
    dk.save_store(path, _store(np.zeros((0, 4)), []))
    loaded = dk.load_store(path)
    assert loaded.matrix.shape == (0, 4)


def test_store_bad_magic(tmp_path):
    path = tmp_path / "bad.ptpe"
    dk.save_store(path, _store(np.zeros((1, 2)), [0]))
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(StoreError) as err:
        dk.load_store(path)
    assert err.value.code == "magic"


def test_store_version_mismatch(tmp_path):
    path = tmp_path / "v.ptpe"
    dk.save_store(path, _store(np.zeros((1, 2)), [0]))
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(StoreError) as err:
        dk.load_store(path)
    assert err.value.code == "version"


def test_store_truncation(tmp_path):
    path = tmp_path / "t.ptpe"
    dk.save_store(path, _store(np.zeros((3, 2)), [0, 1, 0]))
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(StoreError) as err:
        dk.load_store(path)
    assert err.value.code == "truncated"


def test_store_label_count_mismatch(tmp_path):
    path = tmp_path / "m.ptpe"
    with pytest.raises(StoreError) as err:
        dk.save_store(path, _store(np.zeros((3, 2)), [0, 1]))
    assert err.value.code == "mismatch"


def test_gmm_determinism_and_disjoint_ids():
    cfg = dk.PRESETS["tiny"]
    a = dk.gen_synthetic_gmm(cfg)
    b = dk.gen_synthetic_gmm(cfg)
    assert np.array_equal(a[0].latents, b[0].latents)
    assert np.array_equal(a[1].latents, b[1].latents)
    assert set(a[0].ids.tolist()).isdisjoint(a[1].ids.tolist())


def test_gmm_degenerate_noise_collapses_to_centroid():
    cfg = dk.SyntheticGmmConfig(clusters=2, categories=4, dim=8,
                                per_category=3, separation=6.0,
                                class_offset=0.0, noise=0.0, seed=3)
    train, _, _, cluster_of = dk.gen_synthetic_gmm(cfg)
    for j in range(4):
        rows = train.latents[train.labels == j]
        assert np.allclose(rows, rows[0])
    # same-cluster categories share the centroid when offsets are zero
    same = [j for j in range(4) if cluster_of[j] == cluster_of[0]]
    base = train.latents[train.labels == same[0]][0]
    for j in same[1:]:
        assert np.allclose(train.latents[train.labels == j][0], base)


def test_gmm_uneven_category_split_rejected():
    cfg = dk.SyntheticGmmConfig(clusters=3, categories=10)
    with pytest.raises(DataError, match="evenly"):
        dk.gen_synthetic_gmm(cfg)


def test_gmm_infeasible_separation_errors():
    cfg = dk.SyntheticGmmConfig(clusters=50, categories=50, dim=1,
                                per_category=1, separation=1e6)
    with pytest.raises(DataError, match="rejection"):
        dk.gen_synthetic_gmm(cfg)


def test_episode_balanced_and_seeded():
    train, test, _, _ = dk.gen_synthetic_gmm(dk.PRESETS["tiny"])
    ep1 = dk.sample_few_shot(train, 1, seed=5, test=test)
    ep2 = dk.sample_few_shot(train, 1, seed=5, test=test)
    assert len(ep1.support) == 4
    counts = np.bincount(ep1.support.labels, minlength=4)
    assert np.all(counts == 1)
    assert np.array_equal(ep1.support.ids, ep2.support.ids)
    assert ep1.test is test


def test_episode_insufficient_support_names_categories():
    train, test, _, _ = dk.gen_synthetic_gmm(dk.PRESETS["tiny"])
    with pytest.raises(DataError, match="deficient"):
        dk.sample_few_shot(train, 999, seed=0, test=test)


def test_dataset_dir_roundtrip(tmp_path):
    train, test, catalog, cluster_of = dk.gen_synthetic_gmm(dk.PRESETS["tiny"])
    dk.save_dataset(tmp_path, train, test, catalog, cluster_map=cluster_of)
    bundle = dk.load_dataset(tmp_path)
    assert bundle.catalog.names == catalog.names
    assert np.array_equal(
        bundle.train.latents, train.latents.astype(np.float32).astype(np.float64)
    )
    assert np.array_equal(bundle.train.labels, train.labels)
    assert set(bundle.train.ids.tolist()).isdisjoint(bundle.test.ids.tolist())


def test_catalog_rejects_duplicate_names():
    with pytest.raises(DataError, match="unique"):
        dk.CategoryCatalog.synthetic(["x", "x"])


def test_catalog_token_rule():
    cat = dk.CategoryCatalog.synthetic(["a", "b", "c"], vocab_size=8)
    assert cat.ids_for(0) == [3]
    assert cat.ids_for(2) == [5]
