import numpy as np
import pytest

from gentrain.data import HSM, RANDOM, Dataset, Provenance, UidCounter
from gentrain.hsm import HSMConfig, mine_batch
from gentrain.nn import Classifier
from gentrain.pipeline import (SmoothingConfig, balanced_counts, collect_hsm_dataset, ds_epoch_update,
                               fill_dataset, round_robin, train_with_ds)
from gentrain.seeding import stream
from gentrain.trainer import TrainConfig, Trainer, train_fixed
from gentrain.world import WorldConfig, build_world


@pytest.fixture(scope="module")
def world():
    return build_world(WorldConfig())


@pytest.fixture(scope="module")
def small_world():
    return build_world(WorldConfig(n_classes=2, latent_dim=4, obs_dim=8, hidden_dim=6))


def make_clf(world, seed=0):
    return Classifier.build(world.obs_dim, world.n_classes, hidden=(16, 16), rng=np.random.default_rng(seed))


class CountingTrainer(Trainer):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.calls = 0

    def train_epoch(self, dataset, lr=None):
        self.calls += 1
        return super().train_epoch(dataset, lr)


def test_fill_dataset_balanced_random(small_world):
    d = fill_dataset(4, False, small_world, np.random.default_rng(0))
    assert d.class_counts().tolist() == [2, 2]
    assert all(s.provenance == Provenance(RANDOM) for s in d)


def test_fill_dataset_uneven_counts_go_to_low_classes(world):
    d = fill_dataset(23, False, world, np.random.default_rng(0))
    assert d.class_counts().tolist() == [3, 3, 3] + [2] * 7


def test_zero_step_mining_reproduces_random_samples(world):
    clf = make_clf(world)
    a = fill_dataset(20, False, world, np.random.default_rng(5))
    b = fill_dataset(20, True, world, np.random.default_rng(5), clf=clf, hsm_cfg=HSMConfig(steps=0))
    np.testing.assert_array_equal(a.x, b.x)


def test_mined_samples_carry_hsm_provenance(world):
    d = fill_dataset(10, True, world, np.random.default_rng(0), clf=make_clf(world), hsm_cfg=HSMConfig(steps=3))
    assert all(s.provenance == Provenance(HSM, 3) for s in d)


def test_mining_requires_classifier(world):
    with pytest.raises(ValueError):
        fill_dataset(10, True, world, np.random.default_rng(0))


def test_helpers():
    assert balanced_counts(7, 3).tolist() == [3, 2, 2]
    assert round_robin(np.array([2, 1, 0])).tolist() == [0, 1, 0]


def test_collection_rounds_and_census(world):
    trainer = CountingTrainer(make_clf(world), TrainConfig(epochs=4, batch_size=16), np.random.default_rng(0))
    d, aux = collect_hsm_dataset(world, trainer, N=100, M=20, seed=0)
    assert trainer.calls == 4
    assert len(d) == 100 and d.capacity == 100
    assert d.provenance_counts() == {RANDOM: 20, HSM: 80, "real": 0}
    assert len(set(d.uid.tolist())) == 100
    assert aux is trainer.clf


def test_collection_stops_exactly_at_n(world):
    trainer = CountingTrainer(make_clf(world), TrainConfig(epochs=4, batch_size=16), np.random.default_rng(0))
    d, _ = collect_hsm_dataset(world, trainer, N=50, M=20, seed=1)
    assert len(d) == 50 and trainer.calls == 2


def test_collection_rejects_m_not_below_n(world):
    trainer = Trainer(make_clf(world), TrainConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        collect_hsm_dataset(world, trainer, N=20, M=20)


def test_mining_changes_as_classifier_trains(world):
    """Same starting codes, mined after successive training rounds, land elsewhere."""
    clf = make_clf(world)
    trainer = Trainer(clf, TrainConfig(epochs=10, batch_size=16), np.random.default_rng(0))
    data = fill_dataset(100, False, world, np.random.default_rng(1))
    h0 = world.sample_latent(np.random.default_rng(2), 10)
    y = np.arange(10)
    trainer.train_epoch(data)
    first = mine_batch(h0, y, world, clf, HSMConfig()).h
    trainer.train_epoch(data)
    second = mine_batch(h0, y, world, clf, HSMConfig()).h
    assert not np.allclose(first, second)


def test_smoothing_counts_with_mining(world):
    d = fill_dataset(100, False, world, np.random.default_rng(0), capacity=100)
    cfg = SmoothingConfig(replacement_fraction=0.2, use_hsm=True, epoch_size=100)
    out = ds_epoch_update(d, cfg, world, np.random.default_rng(1), make_clf(world))
    survivors = np.isin(out.uid, d.uid)
    assert survivors.sum() == 80
    fresh = out.take(np.flatnonzero(~survivors))
    assert fresh.provenance_counts()[HSM] == 10 and fresh.provenance_counts()[RANDOM] == 10
    assert out.class_counts().tolist() == [10] * 10
    assert len(set(out.uid.tolist())) == 100


def test_smoothing_zero_is_identity(world):
    d = fill_dataset(100, False, world, np.random.default_rng(0))
    out = ds_epoch_update(d, SmoothingConfig(0.0, epoch_size=100), world, np.random.default_rng(1))
    assert out is d


def test_smoothing_one_replaces_everything(world):
    d = fill_dataset(100, False, world, np.random.default_rng(0))
    out = ds_epoch_update(d, SmoothingConfig(1.0, epoch_size=100), world, np.random.default_rng(1))
    assert len(out) == 100 and not np.isin(out.uid, d.uid).any()


def test_smoothing_rejects_wrong_size(world):
    d = fill_dataset(90, False, world, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ds_epoch_update(d, SmoothingConfig(0.5, epoch_size=100), world, np.random.default_rng(1))
    with pytest.raises(ValueError):
        SmoothingConfig(1.5)


def test_r_zero_matches_fixed_dataset_training(world):
    cfg = TrainConfig(epochs=3, batch_size=32)
    a, _ = train_with_ds(make_clf(world, 1), world, cfg, SmoothingConfig(0.0, epoch_size=200), seed=7)
    b = make_clf(world, 1)
    data = fill_dataset(200, False, world, stream(7, "data"), capacity=200)
    train_fixed(b, data, cfg, stream(7, "shuffle"))
    assert a.theta_hash() == b.theta_hash() and a.omega_hash() == b.omega_hash()


def test_r_one_gives_fresh_data_every_epoch(world):
    cfg = TrainConfig(epochs=4, batch_size=32)
    _, history = train_with_ds(make_clf(world), world, cfg, SmoothingConfig(1.0, epoch_size=100), seed=0)
    assert [h["turnover"] for h in history] == [100, 100, 100, 0]


def test_main_configuration_records_mining_stats(world):
    cfg = TrainConfig(epochs=2, batch_size=32)
    _, history = train_with_ds(make_clf(world), world, cfg, SmoothingConfig(0.5, True, 100),
                               HSMConfig(steps=2), seed=0)
    assert history[0]["turnover"] == 50 and "hsm" in history[0]


def test_dataset_round_trip_is_exact(world, tmp_path):
    d = fill_dataset(30, True, world, np.random.default_rng(0), clf=make_clf(world), capacity=40)
    d.save(tmp_path / "d.npz")
    back = Dataset.load(tmp_path / "d.npz")
    assert back.fingerprint() == d.fingerprint()
    assert back.capacity == 40 and back.n_classes == d.n_classes
    assert [s.provenance for s in back] == [s.provenance for s in d]


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), [0, 1, 0], ["real"] * 3, capacity=2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 2)), [0], ["bogus"])
    assert UidCounter(5).take(3).tolist() == [5, 6, 7]
