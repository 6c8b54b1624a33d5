"""Desk-scale masked generative transformer for instruction-driven image editing."""

from .codec import (Codebook, Image, InstructionTokens, MaskedGrid, TokenGrid, Vocab, dequantize, make_codebook,
                    quantize, tokenize_instruction)
from .consolidation import LocalizationMap, adaptive_filter, hold_set, localization_score
from .errors import (DomainError, MGTError, MissingFileError, ParseError, ShapeError, TokenIndexError, UsageError,
                     ValidationError)
from .masking import apply_mask, reveal_schedule, sample_mask_rate, train, training_loss
from .sampler import SamplerConfig, edit, vanilla_edit
from .transformer import ModelConfig, ModelWeights, forward, init_weights

__version__ = "0.1.0"

__all__ = [
    "Codebook", "Image", "InstructionTokens", "MaskedGrid", "TokenGrid", "Vocab", "dequantize", "make_codebook",
    "quantize", "tokenize_instruction", "LocalizationMap", "adaptive_filter", "hold_set", "localization_score",
    "DomainError", "MGTError", "MissingFileError", "ParseError", "ShapeError", "TokenIndexError", "UsageError",
    "ValidationError", "apply_mask", "reveal_schedule", "sample_mask_rate", "train", "training_loss",
    "SamplerConfig", "edit", "vanilla_edit", "ModelConfig", "ModelWeights", "forward", "init_weights",
]
