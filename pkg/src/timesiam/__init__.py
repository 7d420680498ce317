"""Siamese pre-training for time series with lineage embeddings."""
from .autograd import Tensor, backward, no_grad
from .checkpoint import Checkpoint, load_checkpoint, load_model, save_checkpoint
from .config import FinetuneConfig, ModelConfig, PretrainConfig
from .data import (
    LabeledWindows,
    TimeSeriesFrame,
    load_csv,
    load_labeled_windows,
    make_pretrain_batch,
    sample_siamese_pair,
    synthetic_labeled_windows,
    synthetic_seasonal_ar,
)
from .embedding import lineage_matching
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    ShapeError,
    ShapeMismatchError,
    TimeSiamError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from .finetune import Downstream, evaluate_classify, evaluate_forecast, finetune, fuse_extended, fuse_fixed
from .masking import MaskSpec, make_mask
from .metrics import MetricsReport
from .model import SiameseModel
from .training import pretrain

__version__ = "0.1.0"
