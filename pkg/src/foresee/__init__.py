"""Recurrent next-frame video prediction with attention on a small numpy autodiff engine."""
__version__ = "0.1.0"

from . import tensor
from .baselines import EncDecLSTM, copy_last_frame, encdec_lstm_predict, lstm_cell_step
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetSplit, FrameSequence, Window, load_dataset, split_dataset, window_count, window_sequences
from .errors import ContractError, DimensionError, FormatError, ForeseeError, ParseError, PathError
from .metrics import MetricsReport, evaluate, mse_images, ssim, ssim_x100
from .model import (AttnPlacement, AttnSteps, ForeseeModel, ModelConfig, attention_context, gru_cell_step,
                    predict_next_frame, reconstruct, rollout)
from .synthetic import SyntheticSceneConfig, generate_synthetic_dataset, generate_synthetic_video
from .training import TrainConfig, online_adapt_and_project, train, train_mm1, train_mm2
