"""Executable model of an edge-oriented decoder: MLA attention, ReLU^2 FFN with
activation sparsity, an exact cost model, preference losses, and a latency bench."""

from .config import CANDIDATES, PRESETS, ConfigError, ModelConfig, get_preset, load_config
from .model import Model, build_model, count_params, generate, load_weights, prefill, save_weights
from .tensor import OpCounter, kernel_backend, matmul

__version__ = "0.1.0"
