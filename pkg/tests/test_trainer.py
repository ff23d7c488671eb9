import numpy as np
import pytest

from gentrain.autodiff import Tensor
from gentrain.data import Dataset
from gentrain.nn import Classifier
from gentrain.trainer import SGD, TrainConfig, Trainer, evaluate, lr_at, train_epoch, train_fixed


def scalar_param(value=0.0, grad=1.0):
    p = Tensor(np.array([value]), requires_grad=True)
    p.grad = np.array([grad])
    return p


def test_plain_step():
    p = scalar_param()
    SGD([p], lr=0.1, momentum=0.0, weight_decay=0.0).step()
    assert p.values[0] == pytest.approx(-0.1)


def test_two_momentum_steps():
    p = scalar_param()
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.0)
    opt.step()
    opt.step()
    assert p.values[0] == pytest.approx(-0.29)


def test_weight_decay_shrinks_geometrically():
    p = scalar_param(value=2.0, grad=0.0)
    opt = SGD([p], lr=0.1, momentum=0.0, weight_decay=1e-4)
    for _ in range(5):
        opt.step()
    assert p.values[0] == pytest.approx(2.0 * (1 - 0.1 * 1e-4) ** 5, rel=1e-14)


def test_batchnorm_parameters_skip_decay():
    clf = Classifier.build(4, 3, rng=np.random.default_rng(0))
    opt = SGD.for_classifier(clf, TrainConfig(momentum=0.0))
    for p in clf.params():
        p.grad = np.zeros_like(p.values)
    gamma = clf.bn_layers[0].gamma.values.copy()
    w = clf.layers[0].weight.values.copy()
    opt.step()
    np.testing.assert_array_equal(clf.bn_layers[0].gamma.values, gamma)
    np.testing.assert_allclose(clf.layers[0].weight.values, w * (1 - 0.1 * 1e-4))


def test_non_finite_gradient_skips_step():
    p = scalar_param(grad=np.nan)
    opt = SGD([p])
    assert opt.step() is False
    assert p.values[0] == 0.0 and opt.skipped_steps == 1


def test_lr_schedule():
    assert lr_at(0, 100) == 0.1
    assert lr_at(50, 100) == pytest.approx(0.01)
    assert lr_at(75, 100) == pytest.approx(0.001)
    assert lr_at(49, 100) == 0.1 and lr_at(74, 100) == pytest.approx(0.01)


def toy_dataset(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = (x[:, 0] + x[:, 1] > 0).astype(np.int64)
    x[:, 0] += np.where(y == 1, 0.5, -0.5)
    return Dataset(x, y, ["real"] * n, n_classes=2)


def test_zero_lr_changes_only_running_moments():
    clf = Classifier.build(2, 2, rng=np.random.default_rng(0))
    th, om = clf.theta_hash(), clf.omega_hash()
    opt = SGD.for_classifier(clf, TrainConfig(lr=0.0, weight_decay=0.0))
    opt.lr = 0.0
    train_epoch(clf, toy_dataset(), opt, np.random.default_rng(0))
    assert clf.theta_hash() == th and clf.omega_hash() != om


def test_training_is_deterministic():
    def run():
        clf = Classifier.build(2, 2, hidden=(8,), rng=np.random.default_rng(3))
        train_fixed(clf, toy_dataset(), TrainConfig(epochs=3, batch_size=16), np.random.default_rng(4))
        return clf.theta_hash(), clf.omega_hash()
    assert run() == run()


def test_loss_decreases_on_separable_toy():
    clf = Classifier.build(2, 2, hidden=(8,), rng=np.random.default_rng(0))
    history = train_fixed(clf, toy_dataset(), TrainConfig(epochs=5, batch_size=16, lr=0.05),
                          np.random.default_rng(1))
    losses = [h["train_loss"] for h in history]
    assert losses[-1] < losses[0]
    assert evaluate(clf, toy_dataset(seed=9)) > 0.9


def test_last_singleton_batch_dropped():
    clf = Classifier.build(2, 2, rng=np.random.default_rng(0))
    opt = SGD.for_classifier(clf, TrainConfig())
    loss = train_epoch(clf, toy_dataset(n=17), opt, np.random.default_rng(0), batch_size=16)
    assert np.isfinite(loss)


def test_trainer_uses_schedule_by_default():
    clf = Classifier.build(2, 2, rng=np.random.default_rng(0))
    t = Trainer(clf, TrainConfig(epochs=4), np.random.default_rng(0))
    data = toy_dataset(n=32)
    lrs = []
    for _ in range(4):
        t.train_epoch(data)
        lrs.append(t.opt.lr)
    assert lrs == pytest.approx([0.1, 0.1, 0.01, 0.001])


def test_constant_classifier_accuracy():
    clf = Classifier.build(3, 10, hidden=(), rng=np.random.default_rng(0), batchnorm=False)
    clf.layers[-1].weight.values[:] = 0
    clf.layers[-1].bias.values[:] = 0
    clf.layers[-1].bias.values[0] = 1
    y = np.repeat(np.arange(10), 5)
    data = Dataset(np.random.default_rng(0).normal(size=(50, 3)), y, ["real"] * 50)
    assert evaluate(clf, data) == pytest.approx(0.1)


def test_evaluate_is_pure():
    clf = Classifier.build(2, 2, rng=np.random.default_rng(0))
    data = toy_dataset()
    om = clf.omega_hash()
    assert evaluate(clf, data) == evaluate(clf, data)
    assert clf.omega_hash() == om
    with pytest.raises(ValueError):
        evaluate(clf, data.take([]))


def test_random_classifier_is_at_chance():
    rng = np.random.default_rng(0)
    K = 10
    y = np.repeat(np.arange(K), 100)
    accs = []
    for seed in range(20):
        clf = Classifier.build(5, K, rng=np.random.default_rng(seed))
        data = Dataset(rng.normal(size=(len(y), 5)), y, ["real"] * len(y))
        accs.append(evaluate(clf, data))
    accs = np.array(accs)
    se = accs.std(ddof=1) / np.sqrt(len(accs))
    assert abs(accs.mean() - 1 / K) <= 3 * se


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
