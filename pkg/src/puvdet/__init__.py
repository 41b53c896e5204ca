"""PU-learning pipeline for function-level vulnerability detection.

Submodules: corpus (ingestion, splits, PU labeling), embed (vectors and
the L1 distance), encoder (trainable scorer with exact gradients),
selection (prototype-distance negatives and progressive expansion),
losses (mixed-supervision objectives), evaluation (metrics, experiments,
mislabel report), config and cli.
"""

from .corpus import CodeSample, DatasetSplit, ScarConfig, apply_scar, load_corpus, split_dataset
from .embed import EmbedderConfig, EmbeddingMatrix, hash_embed, l1_distance, load_embedding_file
from .encoder import EncoderModel, TrainConfig, init_model, predict_proba, train
from .errors import PuvdetError
from .evaluation import MetricsReport, compute_metrics, mislabel_report, run_pu_experiment
from .losses import ContrastBatch, MrlConfig, build_contrast_batch, loss_ce, loss_metric, loss_self, loss_weak
from .selection import (
    ProgressiveConfig,
    PrototypeConfig,
    PseudoLabelLedger,
    epoch_weight,
    progressive_select,
    prototype_distances,
    select_hn,
)

__version__ = "0.1.0"
