"""Pretraining, experiment commands, ablations and reports."""
from .ablate import arm_setup, run_ablation
from .config import ConfigError, ExperimentConfig, load_config
from .pretrain import DivergenceError, PretrainConfig, pretrain
