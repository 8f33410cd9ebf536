"""Time-series classification foundation model: tokenizer + ViT encoder,
contrastive pre-training, fine-tuning regimes, channel adapters and
probability calibration, on a small numpy autodiff engine."""

from .adapters import ChannelAdapter, LinearCombiner
from .calibration import IsotonicCalibrator, TemperatureScaler, ece
from .data_io import TimeSeriesDataset, load_checkpoint, load_tsv, make_synthetic, \
    save_checkpoint
from .finetune import LinearProbe, MantisClassifier, MantisEmbedder, finetune
from .model import MantisConfig, MantisEncoder, count_parameters, get_config
from .pretrain import pretrain

__version__ = "0.1.0"

__all__ = [
    "ChannelAdapter", "IsotonicCalibrator", "LinearCombiner", "LinearProbe",
    "MantisClassifier", "MantisConfig", "MantisEmbedder", "MantisEncoder", "TemperatureScaler",
    "TimeSeriesDataset", "count_parameters", "ece", "finetune", "get_config", "load_checkpoint",
    "load_tsv", "make_synthetic", "pretrain", "save_checkpoint",
]
