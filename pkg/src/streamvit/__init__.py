"""Streaming vision transformer with T2D memory attention, a dense clip oracle,
MAC accounting and a layer gradient checker, in numpy."""

from .attention import AttentionWeights, MemoryPool, memory_push, streaming_t2d_attention
from .config import ModelConfig, desk_config, load_config, paper_config, parse_config
from .encoder import EncoderState, FrameFeatures, encode_frame, encode_sequence, init_encoder_weights
from .errors import ConfigError, DimensionError, EmptyMemoryError, FormatError, MemoryOrderError, StreamViTError
from .io import gen_sequence, read_features, read_sequence, write_features, write_sequence
from .oracle import TemporalMask, clip_t2d_forward

__version__ = "0.1.0"

__all__ = [
    "AttentionWeights", "MemoryPool", "memory_push", "streaming_t2d_attention",
    "ModelConfig", "desk_config", "load_config", "paper_config", "parse_config",
    "EncoderState", "FrameFeatures", "encode_frame", "encode_sequence", "init_encoder_weights",
    "ConfigError", "DimensionError", "EmptyMemoryError", "FormatError", "MemoryOrderError", "StreamViTError",
    "gen_sequence", "read_features", "read_sequence", "write_features", "write_sequence",
    "TemporalMask", "clip_t2d_forward",
]
