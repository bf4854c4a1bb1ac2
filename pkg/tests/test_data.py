"""Procedural dataset generation, stratified splits, SMOTE."""

import numpy as np
import pytest

from neurolgp import data
from neurolgp.data import (
    ConfigError,
    DataConfig,
    InsufficientSamples,
    generate,
    load_dataset,
    save_dataset,
    smote,
)


def test_generation_is_deterministic():
    a = generate(DataConfig(seed=9))
    b = generate(DataConfig(seed=9))
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.labels, b.labels)
    for name in data.SPLIT_NAMES:
        assert np.array_equal(a.splits[name], b.splits[name])
    c = generate(DataConfig(seed=10))
    assert a.images.tobytes() != c.images.tobytes()


def test_default_split_sizes():
    ds = generate(DataConfig())  # 800 images, 2:1:1
    sizes = {name: len(ds.splits[name]) for name in data.SPLIT_NAMES}
    # stratified-rounding arithmetic: 508 train, remainder near-evenly split
    assert sizes["train"] == 508
    for name in ("validation", "test1", "test2"):
        assert abs(sizes[name] - 97.33) <= 1.5
    assert sum(sizes.values()) == 800


def test_splits_disjoint_exhaustive_stratified():
    ds = generate(DataConfig(n_images=400, seed=2))
    all_idx = np.concatenate([ds.splits[n] for n in data.SPLIT_NAMES])
    assert len(all_idx) == len(set(all_idx)) == 400
    # every split contains every class
    for name in data.SPLIT_NAMES:
        assert set(ds.labels[ds.splits[name]]) == {0, 1, 2}


def test_imbalance_ratio_respected():
    ds = generate(DataConfig(n_images=800))
    counts = np.bincount(ds.labels)
    assert counts.tolist() == [400, 200, 200]


def test_config_errors():
    with pytest.raises(ConfigError):
        generate(DataConfig(n_classes=1))
    with pytest.raises(ConfigError):
        DataConfig(n_classes=3, class_weights=(1,)).validate()


def test_noise_free_dataset_is_knn_learnable():
    ds = generate(
        DataConfig(
            n_images=400, noise=0.0, jitter=0.02, min_scale=0.34, max_scale=0.42, seed=4
        )
    )
    x_train, y_train = ds.split_arrays("train")
    x_val, y_val = ds.split_arrays("validation")
    a = x_train.reshape(len(x_train), -1)
    b = x_val.reshape(len(x_val), -1)
    d2 = ((b[:, None, :] - a[None, :, :]) ** 2).sum(axis=2)
    nn3 = np.argsort(d2, axis=1)[:, :3]
    votes = y_train[nn3]
    pred = np.array([np.bincount(v).argmax() for v in votes])
    assert (pred == y_val).mean() > 0.9


def test_pixel_range():
    ds = generate(DataConfig(seed=1))
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


# --------------------------------------------------------------------------
# SMOTE


def test_smote_balanced_input_unchanged():
    x = np.arange(12.0).reshape(6, 2)
    y = np.array([0, 0, 0, 1, 1, 1])
    bx, by = smote(x, y, k=2, rng=np.random.default_rng(0))
    assert np.array_equal(bx, x) and np.array_equal(by, y)


def test_smote_target_counts():
    x = np.random.default_rng(1).random((6, 3))
    y = np.array([0, 0, 0, 0, 1, 1])
    bx, by = smote(x, y, k=1, rng=np.random.default_rng(2))
    assert np.bincount(by).tolist() == [4, 4]
    assert np.array_equal(bx[:6], x)  # originals preserved, first


def test_smote_insufficient_samples():
    x = np.random.default_rng(3).random((7, 2))
    y = np.array([0, 0, 0, 0, 0, 1, 1])
    with pytest.raises(InsufficientSamples):
        smote(x, y, k=2, rng=np.random.default_rng(4))


def test_smote_synthetics_lie_on_neighbor_segments():
    rng = np.random.default_rng(5)
    x = rng.random((40, 8))
    y = np.array([0] * 28 + [1] * 12)
    k = 5
    bx, by = smote(x, y, k=k, rng=np.random.default_rng(6))
    minority = x[y == 1]
    d2 = ((minority[:, None, :] - minority[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    knn = np.argsort(d2, axis=1)[:, :k]
    for s in bx[len(x) :]:
        ok = False
        for i, xi in enumerate(minority):
            for j in knn[i]:
                seg = minority[j] - xi
                t = s - xi
                denom = seg @ seg
                u = (t @ seg) / denom if denom > 0 else 0.0
                residual = np.linalg.norm(t - u * seg)
                if residual < 1e-9 and -1e-12 <= u <= 1 + 1e-12:
                    ok = True
        assert ok, "synthetic sample not on any parent-neighbour segment"
    assert set(by[len(x) :]) == {1}


def test_train_balanced_touches_only_train_split():
    ds = generate(DataConfig(n_images=400, seed=7))
    val_before = ds.split_arrays("validation")[0].copy()
    bx, by = ds.train_balanced()
    counts = np.bincount(by)
    assert counts.min() == counts.max()
    assert len(bx) >= len(ds.splits["train"])
    assert np.array_equal(ds.split_arrays("validation")[0], val_before)
    # cached: identical object on second call
    assert ds.train_balanced()[0] is bx


def test_dataset_container_round_trip(tmp_path):
    ds = generate(DataConfig(n_images=200, seed=8))
    path = tmp_path / "ds.bin"
    save_dataset(ds, path)
    loaded = load_dataset(path)
    assert np.array_equal(loaded.images, ds.images)
    assert np.array_equal(loaded.labels, ds.labels)
    for name in data.SPLIT_NAMES:
        assert np.array_equal(loaded.splits[name], ds.splits[name])
    assert loaded.cfg == ds.cfg
