"""Edit-leakage metrics outside a protected region."""

from __future__ import annotations

import numpy as np

from .codec import Codebook, Image, quantize
from .errors import ValidationError


def token_outside_mask(region: np.ndarray, patch: int) -> np.ndarray:
    """Per-token flag: True when every pixel of the token's patch lies outside the region."""
    h, w = region.shape
    blocks = (region != 0).reshape(h // patch, patch, w // patch, patch)
    return ~blocks.any(axis=(1, 3)).ravel()


def eval_leakage(source: Image, edited: Image, region: np.ndarray, cb: Codebook) -> dict:
    """Mean absolute pixel change (in [0, 1]) and token-flip rate outside ``region``.

    ``region`` is a binary (0/255) mask; nonzero marks the editable area. A
    token counts as outside only if its whole patch is outside.
    """
    region = np.asarray(region)
    if source.pixels.shape != edited.pixels.shape:
        raise ValidationError(f"source is {source.width}x{source.height}, edited is {edited.width}x{edited.height}")
    if region.shape != source.pixels.shape[:2]:
        raise ValidationError(f"mask is {region.shape[1]}x{region.shape[0]}, images are {source.width}x{source.height}")
    if not np.all((region == 0) | (region == 255)):
        raise ValidationError("region mask must be binary (0 or 255)")
    outside = region == 0
    diff = np.abs(source.pixels.astype(np.int64) - edited.pixels.astype(np.int64))
    n_pix = int(outside.sum())
    pixel_l1 = float(diff[outside].sum() / (255.0 * 3 * n_pix)) if n_pix else 0.0

    src_tok = quantize(source, cb).tokens
    edt_tok = quantize(edited, cb).tokens
    tok_out = token_outside_mask(region, cb.patch)
    n_tok = int(tok_out.sum())
    flips = int(np.count_nonzero(src_tok[tok_out] != edt_tok[tok_out]))
    return {
        "pixel_l1_outside": pixel_l1,
        "token_flip_rate_outside": flips / n_tok if n_tok else 0.0,
        "outside_pixels": n_pix,
        "outside_tokens": n_tok,
        "flipped_tokens": flips,
    }
