"""Hybrid Mamba / sliding-window-attention language model toolkit in numpy."""

from .checkpoint import Checkpoint, load, save
from .config import FULL, PRESETS, ModelConfig, preset, production_like_config
from .engine import SamplerParams, Session, chunked_prefill, decode, generate, prefill, render_chat
from .errors import (ConfigError, FormatError, HybridLMError, InputError, IntegrityError,
                     LoadError, NumericError, SchemaError, ShapeError, StateError)
from .model import extend_context, model_forward
from .params import init_params, param_count
from .state import AttnCache, MambaState, memory_footprint, session_memory_bytes

__version__ = "0.1.0"

__all__ = [
    "AttnCache", "Checkpoint", "ConfigError", "FULL", "FormatError", "HybridLMError",
    "InputError", "IntegrityError", "LoadError", "MambaState", "ModelConfig", "NumericError",
    "PRESETS", "SamplerParams", "SchemaError", "Session", "ShapeError", "StateError",
    "chunked_prefill", "decode", "extend_context", "generate", "init_params", "load",
    "memory_footprint", "model_forward", "param_count", "prefill", "preset",
    "production_like_config", "render_chat", "save", "session_memory_bytes",
]
