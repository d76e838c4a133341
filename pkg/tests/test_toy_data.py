import numpy as np
import pytest

from src.core.errors import MissingArtifact
from src.core.network import Task, forward_deterministic, load_network
from src.core.toy_data import (
    far_field,
    gap_regression,
    gen_toy,
    load_dataset,
    rotate,
    rotated_shift,
    two_moons,
    write_dataset,
)


def test_two_moons_sizes_and_determinism():
    splits = two_moons(40, 30, 10, seed=1)
    assert splits["train"][0].shape == (40, 2) and splits["test"][0].shape == (30, 2)
    assert splits["ood"][0].shape == (10, 2) and splits["ood"][1] is None
    assert set(np.unique(splits["train"][1])) == {0, 1}
    again = two_moons(40, 30, 10, seed=1)
    assert np.array_equal(again["train"][0], splits["train"][0])
    assert not np.array_equal(two_moons(40, 30, 10, seed=2)["train"][0], splits["train"][0])


def test_far_field_lies_outside_three_radii(rng):
    X = rng.normal(size=(100, 2))
    far = far_field(X, 50, rng)
    center = X.mean(axis=0)
    radius = np.max(np.linalg.norm(X - center, axis=1))
    dist = np.linalg.norm(far - center, axis=1)
    assert np.all(dist >= 3 * radius) and np.all(dist <= 4 * radius)


def test_gap_regression_leaves_the_gap_empty():
    splits = gap_regression(200, 100, 50, seed=3)
    for name in ("train", "test"):
        x = splits[name][0][:, 0]
        assert np.all(np.abs(x) >= 1.0) and np.all(np.abs(x) <= 4.0)
    assert np.all(np.abs(splits["ood"][0]) < 1.0)
    assert splits["train"][1].shape == (200,)


def test_rotate_about_a_centre():
    assert np.allclose(rotate(np.array([[1.0, 0.0]]), 90, center=np.zeros(2)), [[0.0, 1.0]])
    X = np.random.default_rng(0).normal(size=(20, 2))
    c = np.array([0.5, -0.5])
    turned = rotate(rotate(X, 30, c), 60, c)
    assert np.allclose(turned, rotate(X, 90, c))
    assert np.allclose(np.linalg.norm(turned - c, axis=1), np.linalg.norm(X - c, axis=1))


def test_rotated_shift_splits():
    splits = rotated_shift(angles=(0, 45), n_train=30, n_test=20, seed=0)
    assert set(splits) == {"train", "test", "rotated_0", "rotated_45"}
    assert np.allclose(splits["rotated_0"][0], splits["test"][0])
    assert np.array_equal(splits["rotated_45"][1], splits["test"][1])


def test_dataset_csv_keeps_full_precision(tmp_path, rng):
    X, y = rng.normal(size=(5, 3)), rng.normal(size=5)
    path = write_dataset(tmp_path / "d.csv", X, y, target="y")
    X2, y2 = load_dataset(path)
    assert np.array_equal(X2, X) and np.array_equal(y2, y)
    X3, labels = load_dataset(write_dataset(tmp_path / "c.csv", X, np.array([0, 1, 1, 0, 1])))
    assert labels.dtype == np.int64
    assert load_dataset(write_dataset(tmp_path / "u.csv", X))[1] is None
    with pytest.raises(MissingArtifact):
        load_dataset(tmp_path / "missing.csv")


def test_gen_toy_reruns_byte_identical(tmp_path):
    sizes = dict(n_train=40, n_test=20, n_ood=10)
    first = gen_toy("two_moons", tmp_path / "a", seed=4, backbone=False, **sizes)
    second = gen_toy("two_moons", tmp_path / "b", seed=4, backbone=False, **sizes)
    assert set(first) == {"train", "test", "ood"}
    for name in first:
        assert first[name].read_bytes() == second[name].read_bytes()


@pytest.mark.slow
def test_gen_toy_backbone(tmp_path):
    paths = gen_toy("gap_regression", tmp_path, seed=0, hidden=(8,), n_train=60, n_test=20, n_ood=10)
    net = load_network(paths["backbone"])
    assert net.task is Task.REGRESSION
    X, _ = load_dataset(paths["test"])
    assert forward_deterministic(net, X[0]).shape == (1,)
