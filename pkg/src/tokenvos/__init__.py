"""Single-backbone video object segmentation with layer-wise token memory.

A numpy implementation: a small reverse-mode autodiff engine, a transformer in
which reference tokens attend only among themselves while current-frame tokens
attend to memory, reference and themselves, per-layer token selectors that
decide which reference tokens are matched and stored, and a streaming
inference session with bounded memory.
"""

from .config import ConfigError, MemoryPolicy, ModelConfig, RunConfig, SynthConfig, TrainConfig

__version__ = "0.1.0"

__all__ = ["ConfigError", "MemoryPolicy", "ModelConfig", "RunConfig", "SynthConfig", "TrainConfig", "__version__"]
