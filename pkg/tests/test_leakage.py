"""Outside-region leakage metrics."""

import numpy as np
import pytest
from oracles import leakage_loops

from mgtedit.codec import Image, TokenGrid, dequantize, make_codebook, quantize
from mgtedit.errors import ValidationError
from mgtedit.leakage import eval_leakage, token_outside_mask


def region_mask(h, w, box):
    m = np.zeros((h, w), dtype=np.uint8)
    r0, c0, r1, c1 = box
    m[r0:r1, c0:c1] = 255
    return m


@pytest.fixture
def cb():
    return make_codebook(6, 4, np.random.default_rng(2))


def test_identical_images_leak_nothing(cb, rng):
    img = dequantize(TokenGrid(3, 3, rng.integers(0, 6, 9), 6), cb)
    out = eval_leakage(img, img, region_mask(12, 12, (0, 0, 5, 5)), cb)
    assert out["pixel_l1_outside"] == 0.0 and out["token_flip_rate_outside"] == 0.0


def test_edit_confined_to_region_leaks_nothing(cb, rng):
    src = dequantize(TokenGrid(3, 3, rng.integers(0, 6, 9), 6), cb)
    px = src.pixels.copy()
    px[4:8, 4:8] = 255 - px[4:8, 4:8]
    out = eval_leakage(src, Image(px), region_mask(12, 12, (4, 4, 8, 8)), cb)
    assert out["pixel_l1_outside"] == 0.0 and out["token_flip_rate_outside"] == 0.0
    assert out["outside_tokens"] == 8 and out["outside_pixels"] == 144 - 16


def test_matches_pixel_loop_oracle(cb):
    r = np.random.default_rng(8)
    for _ in range(20):
        a = Image(r.integers(0, 256, (8, 12, 3)))
        b = Image(np.where(r.random((8, 12, 3)) < 0.3, r.integers(0, 256, (8, 12, 3)), a.pixels))
        box = (int(r.integers(0, 4)), int(r.integers(0, 6)), int(r.integers(4, 9)), int(r.integers(6, 13)))
        mask = region_mask(8, 12, box)
        out = eval_leakage(a, b, mask, cb)
        l1, flip = leakage_loops(a.pixels, b.pixels, mask, quantize(a, cb).tokens, quantize(b, cb).tokens, 4)
        assert abs(out["pixel_l1_outside"] - l1) < 1e-12
        assert out["token_flip_rate_outside"] == flip


def test_partially_covered_patch_counts_as_inside():
    mask = np.zeros((4, 8), dtype=np.uint8)
    mask[0, 5] = 255
    assert token_outside_mask(mask, 4).tolist() == [True, False]


def test_full_region_has_no_outside(cb, rng):
    img = Image(rng.integers(0, 256, (4, 4, 3)))
    out = eval_leakage(img, Image(255 - img.pixels), np.full((4, 4), 255, dtype=np.uint8), cb)
    assert out["outside_pixels"] == 0 and out["pixel_l1_outside"] == 0.0 and out["token_flip_rate_outside"] == 0.0


def test_validation_errors(cb):
    a = Image(np.zeros((4, 4, 3)))
    with pytest.raises(ValidationError):
        eval_leakage(a, Image(np.zeros((4, 8, 3))), np.zeros((4, 4)), cb)
    with pytest.raises(ValidationError):
        eval_leakage(a, a, np.zeros((4, 8)), cb)
    with pytest.raises(ValidationError):
        eval_leakage(a, a, np.full((4, 4), 7), cb)
