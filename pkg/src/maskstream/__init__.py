"""Mask-CTC encoder pre-training for streaming ASR (Transformer-Transducer and
contextual block streaming), at desk scale on synthetic speech-like data."""

__version__ = "0.1.0"

from .estimators import ContextualBlockASR, MaskCTC, TransformerTransducer, load_estimator  # noqa: E402
from .streaming import Block, Chunk, Full  # noqa: E402

__all__ = ["MaskCTC", "TransformerTransducer", "ContextualBlockASR", "load_estimator",
           "Full", "Chunk", "Block", "__version__"]
