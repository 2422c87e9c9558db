"""Class-incremental learning with structural-similarity feature distillation.

A small numpy autodiff engine, a convolutional backbone with a multi-proxy
cosine head, SSIM-based and squared-norm feature distillation, herding
exemplar memory, forgetting metrics and an experiment runner.
"""

from .config import ExperimentConfig, format_config, load_config, parse_config
from .data import Dataset, generate_synthetic, read_dataset, write_dataset
from .distill import FDWeights, SSIMParams, baseline_fd_loss, s2il_loss, s2il_terms, ssim, ssim_components
from .engine import TrainConfig, build_stream, lambda_schedule, run_stream, train_task
from .errors import (ConfigError, ContractError, NumericGuardError, S2ILError, ShapeError,
                     TapeStateError)
from .exemplar import ExemplarStore, herding_select, rebalance
from .metrics import RunRecord, aia, bt, fgt, oracle_deviation
from .netlib import FeatureBundle, Model, gradcam_importance, lsc_loss
from .tensor import GradTape, Tensor

__version__ = "0.1.0"
