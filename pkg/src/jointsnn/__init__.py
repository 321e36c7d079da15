"""Joint training of a ReLU network and a spiking network that share
SVD-factorized weights, coupled by multi-branch self-distillation."""

from .autodiff import Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config, parse_config
from .data import Dataset, load_dataset, make_synthetic
from .energy import build_report, compute_energy, emit_report, movement_energy
from .errors import (ConfigError, DataError, DimensionError, FormatError, JointSNNError, NumericError,
                     SerializationError, StatisticsError, TapeError)
from .lif import LifConfig, lif_forward, lif_sequence, lif_step
from .network import JointNetwork, build_mini_resnet, build_mini_vgg
from .svd import jacobi_svd, param_count
from .trainer import Trainer, evaluate, train_step

__version__ = "0.1.0"
