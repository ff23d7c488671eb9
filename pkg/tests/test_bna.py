import numpy as np
import pytest

from gentrain.autodiff import Tape
from gentrain.bna import adapt_bn_statistics, bn_inputs, bn_shift_report
from gentrain.data import Dataset
from gentrain.nn import Classifier
from gentrain.pipeline import fill_dataset
from gentrain.trainer import TrainConfig, evaluate, train_fixed
from gentrain.world import WorldConfig, build_world, make_real_splits

from oracles import train_mode_bn_moments, within


@pytest.fixture(scope="module")
def trained():
    world = build_world()
    rng = np.random.default_rng(0)
    clf = Classifier.build(world.obs_dim, world.n_classes, hidden=(32, 32), rng=rng)
    data = fill_dataset(1000, False, world, rng)
    train_fixed(clf, data, TrainConfig(epochs=8), np.random.default_rng(1))
    return world, clf, data


def test_theta_frozen_omega_moves(trained):
    world, clf, _ = trained
    clf = clf.copy()
    real, _ = make_real_splits(world, 50, 1, seed=0)
    th, om = clf.theta_hash(), clf.omega_hash()
    adapt_bn_statistics(clf, real)
    assert clf.theta_hash() == th and clf.omega_hash() != om


def test_in_distribution_adaptation_changes_little(trained):
    world, clf, data = trained
    adapted = clf.copy()
    adapt_bn_statistics(adapted, fill_dataset(1000, False, world, np.random.default_rng(5)))
    for before, after in zip(clf.bn_layers, adapted.bn_layers):
        scale = np.sqrt(before.running_var)
        assert np.abs(after.running_mean - before.running_mean).max() < 0.1 * scale.max()
    test = fill_dataset(1000, False, world, np.random.default_rng(6))
    assert abs(evaluate(adapted, test) - evaluate(clf, test)) < 0.03


def test_shuffled_stream_converges_to_population_moments():
    """First BN layer only: its input is a fixed function of x. Deeper layers see
    inputs normalized with per-batch moments, so their batch moments differ
    from full-stream moments by a finite-batch effect, not just noise."""
    rng = np.random.default_rng(2)
    clf = Classifier.build(6, 3, hidden=(5, 5), rng=rng)
    x = rng.normal(1.5, 2.0, size=(20_000, 6))
    adapt_bn_statistics(clf, x, passes=5, batch_size=512, alpha=0.05, rng=np.random.default_rng(3))
    mu, var = train_mode_bn_moments(clf, x)[0]
    bn = clf.bn_layers[0]
    assert within(bn.running_mean, mu, np.sqrt(var), 0.02)
    assert within(bn.running_var, var, var, 0.02)


def test_labels_are_never_read(trained):
    world, clf, _ = trained
    real, _ = make_real_splits(world, 30, 1, seed=3)
    shuffled = Dataset(real.x, np.random.default_rng(0).permutation(real.y), real.kind)
    a, b, c = clf.copy(), clf.copy(), clf.copy()
    adapt_bn_statistics(a, real, rng=np.random.default_rng(9))
    adapt_bn_statistics(b, shuffled, rng=np.random.default_rng(9))
    adapt_bn_statistics(c, real.x, rng=np.random.default_rng(9))
    assert a.omega_hash() == b.omega_hash() == c.omega_hash()


def test_refuses_under_tape_and_restores_alpha(trained):
    _, clf, data = trained
    clf = clf.copy()
    with Tape():
        with pytest.raises(RuntimeError):
            adapt_bn_statistics(clf, data.x[:100], alpha=0.5)
    assert all(bn.alpha == 0.1 for bn in clf.bn_layers)


def test_argument_validation(trained):
    _, clf, data = trained
    with pytest.raises(ValueError):
        adapt_bn_statistics(clf.copy(), data.x[:1])
    with pytest.raises(ValueError):
        adapt_bn_statistics(clf.copy(), data.x, passes=0)
    with pytest.raises(ValueError):
        adapt_bn_statistics(clf.copy(), data.x, alpha=1.5)


def test_reset_starts_from_unit_moments():
    clf = Classifier.build(4, 2, rng=np.random.default_rng(0))
    x = np.random.default_rng(1).normal(3.0, 1.0, size=(64, 4))
    summary = adapt_bn_statistics(clf, x, passes=1, batch_size=64, reset=True, shuffle=False)
    mu, _ = train_mode_bn_moments(clf, x)[0]
    np.testing.assert_allclose(clf.bn_layers[0].running_mean, 0.1 * mu)
    assert len(summary["before"]) == len(summary["after"]) == 2


def test_bn_inputs_shapes(trained):
    _, clf, data = trained
    widths = [a.shape[1] for a in bn_inputs(clf, data.x[:10])]
    assert widths == [bn.width for bn in clf.bn_layers]


def test_shift_zero_for_identical_sets(trained):
    _, clf, data = trained
    for row in bn_shift_report(clf, data.x, data.x):
        assert row["mean_shift"] == 0 and row["log_var_ratio"] == 0


def test_no_perturbation_no_first_layer_shift():
    # untruncated latents on both sides, so only the perturbation could differ
    cfg = WorldConfig(truncation=1e6, real_noise_sigma=0.0, perturb_scale_range=(1.0, 1.0),
                      perturb_shift_range=(0.0, 0.0))
    world = build_world(cfg)
    clf = Classifier.build(world.obs_dim, world.n_classes, rng=np.random.default_rng(0))
    y = np.arange(5000) % 10
    gen = world.generate_batch(world.sample_latent(np.random.default_rng(1), 5000), y)
    real = world.sample_real_batch(y, np.random.default_rng(2))
    assert bn_shift_report(clf, gen, real)[0]["mean_shift"] < 0.05


def test_default_world_has_positive_shift(trained):
    world, clf, data = trained
    real, _ = make_real_splits(world, 100, 1, seed=0)
    report = bn_shift_report(clf, data, real)
    assert report[0]["mean_shift"] > 0.05
