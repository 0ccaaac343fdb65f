import numpy as np
import pytest

from nrsfm.geometry import project, rotation_angle
from nrsfm.synthgen import SynthConfig, generate, generate_multiclass, generate_rigid, sweep_grid


def test_noiseless_views_are_exact_projections():
    ds = generate(SynthConfig(K=10, D_true=3, num_shapes=5, views_per_shape=4, seed=1))
    gt = ds.gt
    blocks = gt["basis"].reshape(3, 3, 10)
    for i in range(len(ds)):
        X = np.tensordot(gt["alphas"][i], blocks, axes=1)
        np.testing.assert_allclose(gt["structures"][i], gt["rotations"][i] @ X, atol=1e-13)
        assert np.abs(ds.Y[i] - project(gt["rotations"][i] @ X)).max() == 0.0


def test_visible_fraction_concentrates():
    ds = generate(SynthConfig(K=100, D_true=3, num_shapes=100, views_per_shape=10,
                              occlusion_prob=0.5, seed=2))
    assert ds.v.size == 100_000
    assert abs(ds.v.mean() - 0.5) < 0.01
    assert ds.has_occlusions
    assert ds.v.sum(axis=1).min() >= 1
    assert np.all(ds.Y[:, :, :][np.broadcast_to(ds.v[:, None, :] == 0, ds.Y.shape)] == 0.0)


def test_noise_level():
    cfg = SynthConfig(K=50, D_true=3, num_shapes=50, views_per_shape=20, seed=3)
    clean = generate(cfg)
    noisy = generate(SynthConfig(**{**cfg.__dict__, "noise_sigma": 0.01}))
    diff = noisy.Y - clean.Y
    assert diff.size == 100_000
    assert 0.009 <= diff.std() <= 0.011


def test_rigid_dataset_properties():
    ds = generate_rigid(SynthConfig(K=10, views_per_shape=8, seed=5, test_fraction=0.0))
    X0 = ds.gt["rotations"][0].T @ ds.gt["structures"][0]
    for R, X in zip(ds.gt["rotations"], ds.gt["structures"]):
        np.testing.assert_allclose(R.T @ X, X0, atol=1e-13)
    W = (ds.Y - ds.Y.mean(axis=2, keepdims=True)).reshape(-1, 10)
    s = np.linalg.svd(W, compute_uv=False)
    assert s[3] / s[0] < 1e-10


def test_split_is_by_shape():
    ds = generate(SynthConfig(K=8, D_true=2, num_shapes=20, views_per_shape=3, seed=6))
    train = set(ds.train().gt["shape_index"])
    test = set(ds.test().gt["shape_index"])
    assert train.isdisjoint(test)
    assert len(test) == 4


def test_seed_determinism_and_sensitivity():
    cfg = SynthConfig(K=8, D_true=2, num_shapes=3, views_per_shape=3, seed=7, occlusion_prob=0.3)
    a, b = generate(cfg), generate(cfg)
    np.testing.assert_array_equal(a.Y, b.Y)
    np.testing.assert_array_equal(a.v, b.v)
    c = generate(SynthConfig(**{**cfg.__dict__, "seed": 8}))
    assert not np.array_equal(a.Y, c.Y)


def test_view_angle_limit():
    ds = generate(SynthConfig(K=8, D_true=2, num_shapes=10, views_per_shape=10, seed=1,
                              max_view_angle=0.5))
    assert rotation_angle(ds.gt["rotations"]).max() <= 0.5
    with pytest.raises(ValueError):
        SynthConfig(max_view_angle=4.0)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(K=7, D_true=10)
    with pytest.raises(ValueError):
        SynthConfig(noise_sigma=-1.0)
    with pytest.raises(ValueError):
        SynthConfig(occlusion_prob=1.0)


def test_sweep_grid_cells():
    base = SynthConfig(K=8, D_true=2, num_shapes=3, views_per_shape=2, seed=9)
    cells = sweep_grid(base, [0.0, 0.01], [0.0, 0.2])
    assert len(cells) == 4
    first = cells[0].generate()
    ref = generate(base)
    np.testing.assert_array_equal(first.Y, ref.Y)
    np.testing.assert_array_equal(first.v, ref.v)
    # corruption only: shapes and viewpoints are shared across cells
    last = cells[-1].generate()
    np.testing.assert_array_equal(last.gt["structures"], ref.gt["structures"])
    with pytest.raises(ValueError):
        sweep_grid(base, [], [0.0])


def test_multiclass_layout():
    base = SynthConfig(K=6, D_true=2, num_shapes=4, views_per_shape=2, seed=1)
    ds = generate_multiclass(base, [6, 9])
    assert ds.K == 15 and ds.layout.class_count == 2
    for i in range(len(ds)):
        c = ds.class_ids[i]
        other = ~ds.layout.mask(c)
        assert ds.v[i, other].sum() == 0
        assert np.all(ds.Y[i][:, other] == 0)
        assert np.all(ds.gt["structures"][i][:, other] == 0)


def test_reprojection_loss_vanishes_at_ground_truth():
    from nrsfm.geometry import rot_log
    from nrsfm.losses import reprojection_loss_l1

    ds = generate(SynthConfig(K=10, D_true=3, num_shapes=4, views_per_shape=5, seed=2,
                              occlusion_prob=0.2))
    theta = np.array([rot_log(R) for R in ds.gt["rotations"]])
    value = reprojection_loss_l1(ds.Y, ds.v, ds.gt["alphas"], theta, ds.gt["basis"])
    assert value.item() < 1e-12
