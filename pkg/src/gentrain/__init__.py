"""Training classifiers on generated data: hard sample mining, dataset
smoothing and batch-norm statistics adaptation on a synthetic world."""

from .autodiff import Tape, Tensor, backward, finite_difference_check
from .bna import adapt_bn_statistics, bn_shift_report
from .config import ExperimentConfig, load_config
from .data import Dataset, Provenance, Sample
from .hsm import HSMConfig, LatentCode, hsm_mining_stats, hsm_optimize, mine_batch, predicted_class
from .nn import BatchNorm, Classifier, DenseLayer, cross_entropy, load_checkpoint, save_checkpoint
from .pipeline import (SmoothingConfig, collect_hsm_dataset, ds_epoch_update, fill_dataset,
                       train_with_ds)
from .trainer import SGD, TrainConfig, Trainer, evaluate, lr_at, train_epoch
from .world import World, WorldConfig, build_world, make_real_splits

__version__ = "0.1.0"
