"""Precomputed KV-cache knowledge packs for a small deterministic transformer."""
from .config import ModelConfig, RunConfig, load_run_config
from .errors import (BadMagic, FingerprintMismatch, FormatError, KvPackError, PositionOverflow,
                     SizeMismatch, SteeringError, TruncatedStream, UnknownDialect, UnknownRole,
                     UnsupportedVersion)
from .model import Model
from .pipeline import (BuildRequest, build_pack, compose_naive, compose_sequential,
                       query_with_pack)
from .steering import apply_delta, build_delta, compose_deltas, dual_channel_query
from .store import KnowledgePack, KvCache, caches_equal, slice_prefix

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "RunConfig", "load_run_config", "Model",
    "KvCache", "KnowledgePack", "caches_equal", "slice_prefix",
    "BuildRequest", "build_pack", "query_with_pack", "compose_sequential", "compose_naive",
    "build_delta", "apply_delta", "compose_deltas", "dual_channel_query",
    "KvPackError", "FingerprintMismatch", "PositionOverflow", "UnknownRole", "UnknownDialect",
    "SteeringError", "FormatError", "BadMagic", "UnsupportedVersion", "TruncatedStream", "SizeMismatch",
]
