import math

import numpy as np
import pytest

import nearcollision as nc


def small_config(seed=3):
    cfg = nc.SimConfig()
    cfg.seed = seed
    cfg.image_width = 16
    cfg.image_height = 16
    cfg.duration_s = 8.0
    return cfg


def test_simulation_is_deterministic():
    a = nc.simulate_scene(small_config())
    b = nc.simulate_scene(small_config())
    assert len(a) == 80
    assert a.images().shape == (80, 16, 16)
    assert a.images().dtype == np.float32
    np.testing.assert_array_equal(a.images(), b.images())
    np.testing.assert_array_equal(a.states(), b.states())
    assert 0.0 <= a.images().min() and a.images().max() <= 1.0
    assert a.cloud(0).shape[1] == 3


def test_invalid_config_raises():
    cfg = small_config()
    cfg.n_pedestrians = 9
    with pytest.raises(ValueError):
        nc.simulate_scene(cfg)


def test_labels_match_ranges():
    scene = nc.simulate_scene(small_config())
    near, ranges = nc.label_frames(scene)
    np.testing.assert_array_equal(near, ranges <= nc.NEAR_COLLISION_RADIUS)
    assert near.any()


def test_time_to_near_collision_examples():
    flags = [False] * 10
    flags[5] = True
    assert nc.time_to_near_collision(flags, 2) == pytest.approx(0.3)
    assert nc.time_to_near_collision(flags, 5) is None
    assert nc.time_bins(0.3) == [1, 0, 0, 0]
    assert nc.time_bins(None) == [0, 0, 0, 1]


def test_constant_velocity_geometry():
    assert nc.time_to_radius((0.0, 5.0), (0.0, -1.0)) == pytest.approx(4.0)
    assert nc.time_to_radius((0.0, 5.0), (0.0, 1.0)) is None
    pos, vel = nc.fit_velocity([0.0, 0.1, 0.2], [(1.0, 2.0), (1.0, 1.9), (1.0, 1.8)])
    assert vel == pytest.approx((0.0, -1.0))
    assert pos == pytest.approx((1.0, 1.8))


def test_metrics():
    m = nc.regression_metrics([1.0, 2.0], [1.5, 1.0])
    assert m["mae"] == pytest.approx(0.75)
    assert m["std"] == pytest.approx(0.25)
    assert nc.f1_score(634, 36, 53, 2840) == pytest.approx(0.9344, abs=1e-4)
    assert nc.f1_score(0, 0, 0, 5) is None
    bins = nc.interval_report([0.5, 5.0], [0.2, 6.0])
    assert len(bins) == 6
    assert bins[5]["mae"] == pytest.approx(1.0)
    assert bins[2]["mae"] is None


def test_train_predict_checkpoint(tmp_path):
    scenes = nc.simulate_batch(small_config(), 4, seed=5)
    ds = nc.build_dataset(scenes, 0.25, seed=5, n_frames=2)
    x = ds.windows("train")
    assert x.ndim == 4 and x.shape[1:] == (2, 16, 16)
    net = nc.Network.build(n_frames=2, image_size=16, hidden_units=16, seed=1)
    losses = net.train(ds, epochs=2, lr=0.01, batch=8, seed=1)
    assert len(losses) == 2 and all(math.isfinite(v) for v in losses)
    preds = net.predict(ds, "test")
    assert len(preds) == len(ds.times("test"))
    assert all(0.0 <= p <= 6.0 for p in preds)
    path = tmp_path / "model.ncck"
    net.save(path)
    again = nc.Network.load(path)
    assert again.predict(ds, "test") == preds
    assert again.forward(x[0])[0] == pytest.approx(net.forward(x[0])[0])


def test_grad_check_passes():
    errors = nc.grad_check()
    assert errors and max(errors.values()) < 1e-4
