"""Two-stage personalized image generation (layout, then retouch) with a toy backend."""

from .backends import (AdapterBackend, AttentionEntry, AttentionOverride, DenoiserBackend,
                       ToyBackendSpec, derive_conditions, make_toy_backend, make_toy_pair)
from .core import (BlendMask, LatentTensor, PipelineConfig, TextCondition, load_config)
from .pipeline import RunRecord, generate, generate_layout, retouch

__all__ = [
    "AdapterBackend", "AttentionEntry", "AttentionOverride", "BlendMask", "DenoiserBackend",
    "LatentTensor", "PipelineConfig", "RunRecord", "TextCondition", "ToyBackendSpec",
    "derive_conditions", "generate", "generate_layout", "load_config", "make_toy_backend",
    "make_toy_pair", "retouch",
]
__version__ = "0.1.0"
