"""Synthetic data, training loop, baseline suite and CLI."""

from .config import ExperimentConfig, Method, ROUTED_METHODS, toy_config
from .data import DataSettings, cipher_table, encode_image, gen_synthetic_batch
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .train import TrainResult, TrainingDiverged, build_model, plan_at, read_metrics, train
from .suite import SuiteResult, SuiteRow, accounted_ratio, run_baseline_suite
