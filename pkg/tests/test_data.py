import struct

import numpy as np
import pytest

from tcx import data, nn


def write_idx_fixture(tmp_path):
    """Two 2x2 images with hand-picked bytes, plus labels [3, 1]."""
    images = tmp_path / "imgs.idx"
    labels = tmp_path / "lbls.idx"
    pix = bytes([0, 51, 102, 255, 10, 20, 30, 40])
    with open(images, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, 2, 2, 2))
        fh.write(pix)
    with open(labels, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, 2))
        fh.write(bytes([3, 1]))
    return images, labels


def test_load_idx_fixture_exact(tmp_path):
    images, labels = write_idx_fixture(tmp_path)
    ds = data.load_idx(images, labels)
    assert ds.features.shape == (2, 4)
    assert np.allclose(ds.features[0], np.array([0, 51, 102, 255]) / 255.0)
    assert np.allclose(ds.features[1], np.array([10, 20, 30, 40]) / 255.0)
    assert np.array_equal(ds.labels, [3, 1])


def test_load_idx_bad_magic(tmp_path):
    images, labels = write_idx_fixture(tmp_path)
    blob = bytearray(images.read_bytes())
    blob[3] = 0x99
    images.write_bytes(bytes(blob))
    with pytest.raises(data.DataError):
        data.load_idx(images, labels)


def test_load_idx_count_mismatch(tmp_path):
    images, labels = write_idx_fixture(tmp_path)
    with open(labels, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, 3))
        fh.write(bytes([3, 1, 0]))
    with pytest.raises(data.DataError):
        data.load_idx(images, labels)


def test_load_idx_truncated(tmp_path):
    images, labels = write_idx_fixture(tmp_path)
    blob = images.read_bytes()
    images.write_bytes(blob[:-3])
    with pytest.raises(data.DataError):
        data.load_idx(images, labels)


def test_idx_export_roundtrip(tmp_path):
    ds = data.make_synthetic_classification(seed=0, n=20, d=6, n_classes=4,
                                            separation=2.0)
    images, labels = tmp_path / "i.idx", tmp_path / "l.idx"
    data.save_idx(ds, images, labels)
    back = data.load_idx(images, labels)
    assert back.n == 20 and back.dim == 6
    assert np.array_equal(back.labels, ds.labels)
    # quantization keeps the geometry: correlation of features stays high
    corr = np.corrcoef(back.features.ravel(), ds.features.ravel())[0, 1]
    assert corr > 0.999


def test_grayscale_equal_channels():
    rgb = np.tile(np.array([[0.2, 0.8]]), (1, 3))
    assert np.allclose(data.to_grayscale(rgb), [[0.2, 0.8]])


def test_grayscale_single_channel_lit():
    rgb = np.array([[0.0, 0.0, 1.0]])     # one pixel, channel-major
    assert np.allclose(data.to_grayscale(rgb), [[1 / 3]])


def test_grayscale_matches_scalar_loop(rng):
    rgb = rng.random((4, 12))
    gray = data.to_grayscale(rgb)
    hw = 4
    for i in range(4):
        for p in range(hw):
            expected = (rgb[i, p] + rgb[i, hw + p] + rgb[i, 2 * hw + p]) / 3
            assert abs(gray[i, p] - expected) < 1e-12


def test_grayscale_rejects_bad_dim():
    with pytest.raises(data.DataError):
        data.to_grayscale(np.ones((2, 7)))


def test_synthetic_nearly_separated_is_linearly_solvable():
    ds = data.make_synthetic_classification(seed=1, n=200, d=8, n_classes=4,
                                            separation=100.0)
    centers = np.stack([ds.features[ds.labels == m].mean(axis=0)
                        for m in range(4)])
    d2 = ((ds.features[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    pred = np.argmin(d2, axis=1)
    assert np.array_equal(pred, ds.labels)


def test_synthetic_deterministic():
    a = data.make_synthetic_classification(seed=9, n=30, d=3, n_classes=3,
                                           separation=1.0)
    b = data.make_synthetic_classification(seed=9, n=30, d=3, n_classes=3,
                                           separation=1.0)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)


def test_synthetic_one_sample_per_class():
    ds = data.make_synthetic_classification(seed=0, n=5, d=2, n_classes=5,
                                            separation=1.0)
    assert sorted(ds.labels) == [0, 1, 2, 3, 4]


def test_synthetic_n_below_classes_rejected():
    with pytest.raises(data.DataError):
        data.make_synthetic_classification(seed=0, n=2, d=2, n_classes=3,
                                           separation=1.0)


def test_task_mlp_zero_relu_is_linear():
    net = data.make_task_mlp(0, width=16, seed=0, in_dim=8, out_dim=4)
    assert [l.kind for l in net.spec] == ["dense"]
    assert net.weights[0].shape == (4, 8)
    assert net.frozen


def test_task_mlp_deep_grid_supported():
    net = data.make_task_mlp(31, width=8, seed=1)
    assert sum(1 for l in net.spec if l.kind == "relu") == 31
    nn.validate_spec(net.spec)


def test_task_mlp_frozen_rejects_updates():
    net = data.make_task_mlp(2, width=4, seed=0)
    with pytest.raises(nn.FrozenNetworkError):
        nn.optimizer_step(net, nn.zero_gradients(net), nn.OptState(),
                          nn.OptConfig(lr=0.1))


def test_subsample_full_set_is_identity():
    ds = data.make_synthetic_classification(seed=2, n=40, d=3, n_classes=2,
                                            separation=1.0)
    sub, idx = data.subsample_analysis_set(ds, k=40, seed=0)
    assert np.array_equal(np.sort(idx), np.arange(40))
    assert np.array_equal(sub.features, ds.features)


def test_subsample_overlap_hypergeometric():
    ds = data.make_synthetic_classification(seed=3, n=1000, d=2, n_classes=2,
                                            separation=1.0)
    k = 400
    _, idx_a = data.subsample_analysis_set(ds, k=k, seed=1)
    _, idx_b = data.subsample_analysis_set(ds, k=k, seed=2)
    overlap = len(set(idx_a) & set(idx_b))
    n = 1000
    mean = k * k / n
    var = k * (k / n) * (1 - k / n) * (n - k) / (n - 1)
    assert abs(overlap - mean) < 3 * np.sqrt(var)


def test_subsample_zero_rejected():
    ds = data.make_synthetic_classification(seed=0, n=10, d=2, n_classes=2,
                                            separation=1.0)
    with pytest.raises(data.DataError):
        data.subsample_analysis_set(ds, k=0)


def test_subsample_deterministic():
    ds = data.make_synthetic_classification(seed=0, n=50, d=2, n_classes=2,
                                            separation=1.0)
    _, a = data.subsample_analysis_set(ds, k=20, seed=5)
    _, b = data.subsample_analysis_set(ds, k=20, seed=5)
    assert np.array_equal(a, b)


def test_normalize_roundtrip():
    ds = data.make_synthetic_classification(seed=4, n=30, d=5, n_classes=2,
                                            separation=3.0)
    norm = data.normalize(ds)
    back = data.denormalize(norm)
    assert np.max(np.abs(back.features - ds.features)) < 1e-12
    with pytest.raises(data.DataError):
        data.normalize(norm)
