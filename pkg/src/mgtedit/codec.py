"""Toy image and instruction tokenizers, plus the on-disk formats.

Images are binary PPM (P6, maxval 255); grayscale maps are PGM (P5).
Token grids, codebooks and vocabularies are canonical compact JSON: keys in a
fixed order, no spaces, one trailing newline.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ShapeError, TokenIndexError, UsageError, ValidationError

UNK_ID = 0


def canonical_json(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False) + "\n"


def write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def read_text(path) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


# --------------------------------------------------------------------------
# Data types


@dataclass(eq=False)
class Image:
    """8-bit RGB image; ``pixels`` has shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"image pixels must be (height, width, 3), got {px.shape}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise ValidationError("pixel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        self.pixels = np.ascontiguousarray(px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def rgb(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)


@dataclass(eq=False)
class Codebook:
    """K patch prototypes, each P x P RGB, stored flat as (K, P*P*3) uint8."""

    patch: int
    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries)
        if not _is_int(self.patch) or self.patch < 1:
            raise ValidationError(f"patch size must be a positive integer, got {self.patch!r}")
        if e.ndim != 2 or e.shape[1] != self.patch * self.patch * 3:
            raise ShapeError(f"codebook entries must be (K, {self.patch * self.patch * 3}), got {e.shape}")
        if e.shape[0] < 2:
            raise ValidationError("codebook needs at least 2 entries")
        if np.any(e < 0) or np.any(e > 255):
            raise ValidationError("codebook values must lie in [0, 255]")
        e = np.ascontiguousarray(e.astype(np.uint8))
        if len(np.unique(e, axis=0)) != len(e):
            raise ValidationError("codebook entries must be pairwise distinct")
        self.entries = e

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def patch_pixels(self, index: int) -> np.ndarray:
        return self.entries[index].reshape(self.patch, self.patch, 3)


def _validate_grid(h, w, tokens, codebook_size, allow_mask):
    if not (_is_int(h) and _is_int(w)) or h < 1 or w < 1:
        raise ValidationError(f"grid dimensions must be positive integers, got h={h!r}, w={w!r}")
    if not _is_int(codebook_size) or codebook_size < 2:
        raise ValidationError(f"codebook_size must be an integer >= 2, got {codebook_size!r}")
    t = np.asarray(tokens)
    if t.ndim != 1:
        t = t.reshape(-1)
    if t.size != h * w:
        raise ValidationError(f"h*w = {h * w} but {t.size} tokens given")
    if t.size and not np.issubdtype(t.dtype, np.integer):
        raise ValidationError("tokens must be integers")
    t = t.astype(np.int64)
    limit = codebook_size + 1 if allow_mask else codebook_size
    if t.size and (t.min() < 0 or t.max() >= limit):
        bad = int(t[(t < 0) | (t >= limit)][0])
        raise ValidationError(f"token {bad} outside [0, {limit})")
    return t


@dataclass(eq=False)
class TokenGrid:
    """h x w grid of codebook indices in row-major order."""

    h: int
    w: int
    tokens: np.ndarray
    codebook_size: int

    def __post_init__(self):
        self.tokens = _validate_grid(self.h, self.w, self.tokens, self.codebook_size, allow_mask=False)

    @property
    def n(self) -> int:
        return self.h * self.w

    @property
    def mask_id(self) -> int:
        return self.codebook_size

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.h, self.w, self.tokens.copy(), self.codebook_size)

    def __eq__(self, other):
        return (
            isinstance(other, TokenGrid)
            and (self.h, self.w, self.codebook_size) == (other.h, other.w, other.codebook_size)
            and np.array_equal(self.tokens, other.tokens)
        )


@dataclass(eq=False)
class MaskedGrid:
    """Token grid that may contain the MASK id (== codebook_size)."""

    h: int
    w: int
    tokens: np.ndarray
    codebook_size: int

    def __post_init__(self):
        self.tokens = _validate_grid(self.h, self.w, self.tokens, self.codebook_size, allow_mask=True)

    @property
    def n(self) -> int:
        return self.h * self.w

    @property
    def mask_id(self) -> int:
        return self.codebook_size

    @property
    def masked(self) -> np.ndarray:
        return np.flatnonzero(self.tokens == self.codebook_size)

    @classmethod
    def full(cls, h: int, w: int, codebook_size: int) -> "MaskedGrid":
        return cls(h, w, np.full(h * w, codebook_size, dtype=np.int64), codebook_size)

    def to_grid(self) -> TokenGrid:
        if np.any(self.tokens == self.codebook_size):
            raise ValidationError("grid still contains MASK tokens")
        return TokenGrid(self.h, self.w, self.tokens.copy(), self.codebook_size)


# --------------------------------------------------------------------------
# Image <-> tokens


def _patches(img: Image, patch: int) -> tuple[int, int, np.ndarray]:
    if img.width % patch or img.height % patch:
        raise ShapeError(f"image {img.width}x{img.height} is not divisible by patch size {patch}")
    h, w = img.height // patch, img.width // patch
    p = img.pixels.reshape(h, patch, w, patch, 3).transpose(0, 2, 1, 3, 4)
    return h, w, p.reshape(h * w, patch * patch * 3)


def quantize(img: Image, cb: Codebook) -> TokenGrid:
    """Map each patch to its nearest codebook entry (squared RGB distance).

    Ties go to the lowest index.
    """
    h, w, flat = _patches(img, cb.patch)
    a = flat.astype(np.int64)
    e = cb.entries.astype(np.int64)
    # exact integer distances; argmin returns the first minimum
    dist = (a * a).sum(1)[:, None] - 2 * a @ e.T + (e * e).sum(1)[None, :]
    return TokenGrid(h, w, np.argmin(dist, axis=1), cb.size)


def dequantize(grid: TokenGrid, cb: Codebook) -> Image:
    if grid.codebook_size != cb.size:
        raise ValidationError(f"grid expects {grid.codebook_size} codebook entries, codebook has {cb.size}")
    t = np.asarray(grid.tokens)
    if t.size and (t.min() < 0 or t.max() >= cb.size):
        raise TokenIndexError(f"token index outside [0, {cb.size})")
    p = cb.patch
    tiles = cb.entries[t].reshape(grid.h, grid.w, p, p, 3).transpose(0, 2, 1, 3, 4)
    return Image(tiles.reshape(grid.h * p, grid.w * p, 3))


def make_codebook(k: int, patch: int, rng: np.random.Generator, style: str = "random") -> Codebook:
    """Random codebook of ``k`` distinct entries.

    ``style="solid"`` paints each prototype a single color, which gives
    blocky but readable images.
    """
    if k < 2:
        raise UsageError("codebook needs at least 2 entries")
    size = patch * patch * 3
    entries = []
    seen = set()
    while len(entries) < k:
        if style == "solid":
            e = np.tile(rng.integers(0, 256, size=3, dtype=np.int64), patch * patch)
        elif style == "random":
            e = rng.integers(0, 256, size=size, dtype=np.int64)
        else:
            raise UsageError(f"unknown codebook style {style!r}")
        key = e.astype(np.uint8).tobytes()
        if key not in seen:
            seen.add(key)
            entries.append(e)
    return Codebook(patch, np.stack(entries).astype(np.uint8))


# --------------------------------------------------------------------------
# Instructions


@dataclass
class Vocab:
    """Word-level vocabulary. Id 0 is reserved for unknown words."""

    words: list[str]

    def __post_init__(self):
        if any(not isinstance(w, str) or not w or w != w.lower() or w.split() != [w] for w in self.words):
            raise ValidationError("vocabulary words must be non-empty lowercase strings without whitespace")
        if len(set(self.words)) != len(self.words):
            raise ValidationError("vocabulary words must be unique")
        self._index = {w: i + 1 for i, w in enumerate(self.words)}

    @property
    def size(self) -> int:
        return len(self.words) + 1

    def id(self, word: str) -> int:
        return self._index.get(word, UNK_ID)

    @classmethod
    def from_texts(cls, texts) -> "Vocab":
        return cls(sorted({w for t in texts for w in t.lower().split()}))


@dataclass
class InstructionTokens:
    ids: np.ndarray
    words: list[str]
    keyword_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.keyword_indices is None:
            self.keyword_indices = np.arange(len(self.ids))
        self.keyword_indices = np.asarray(self.keyword_indices, dtype=np.int64)
        if len(self.ids) == 0:
            raise UsageError("instruction has no tokens")
        if len(self.keyword_indices) == 0:
            raise UsageError("keyword set is empty")
        if self.keyword_indices.min() < 0 or self.keyword_indices.max() >= len(self.ids):
            raise ValidationError("keyword index outside the instruction")

    @property
    def m(self) -> int:
        return len(self.ids)


def tokenize_instruction(text: str, vocab: Vocab, keywords=None) -> InstructionTokens:
    """Whitespace-split, lowercase, map to vocabulary ids.

    With ``keywords`` the keyword set holds every position whose word matches
    one of them; otherwise it is every position.
    """
    words = text.lower().split()
    if not words:
        raise UsageError("instruction is empty")
    ids = [vocab.id(w) for w in words]
    if keywords:
        wanted = {k.lower() for k in keywords}
        positions = [i for i, w in enumerate(words) if w in wanted]
        if not positions:
            raise UsageError(f"none of the keywords {sorted(wanted)} occur in the instruction")
    else:
        positions = list(range(len(words)))
    return InstructionTokens(np.array(ids), words, np.array(positions))


# --------------------------------------------------------------------------
# Netpbm I/O

_WS = b" \t\n\r\x0b\x0c"


def _parse_netpbm(data: bytes, magic: bytes, channels: int, path=None):
    if data[:2] != magic:
        raise ParseError(f"expected magic {magic.decode()}, got {data[:2]!r}", offset=0, path=path)
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise ParseError("header ended early", offset=pos, path=path)
        c = data[pos : pos + 1]
        if c in (b"#",):
            end = data.find(b"\n", pos)
            if end < 0:
                raise ParseError("unterminated header comment", offset=pos, path=path)
            pos = end + 1
            continue
        if c in _WS:
            pos += 1
            continue
        m = re.compile(rb"[0-9]+").match(data, pos)
        if m is None:
            raise ParseError(f"expected a decimal header field, got {c!r}", offset=pos, path=path)
        fields.append(int(m.group()))
        pos = m.end()
        if pos >= len(data) or data[pos : pos + 1] not in _WS + b"#":
            raise ParseError("header field not followed by whitespace", offset=pos, path=path)
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ParseError(f"non-positive dimensions {width}x{height}", offset=pos, path=path)
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported, got {maxval}", offset=pos, path=path)
    pos += 1  # single whitespace byte before the payload
    expected = width * height * channels
    payload = data[pos:]
    if len(payload) < expected:
        raise ParseError(f"truncated payload: expected {expected} bytes, got {len(payload)}", offset=pos, path=path)
    if len(payload) > expected:
        raise ParseError(
            f"trailing data: expected {expected} payload bytes, got {len(payload)}",
            offset=pos + expected,
            path=path,
        )
    return width, height, np.frombuffer(payload, dtype=np.uint8)


def decode_ppm(data: bytes, path=None) -> Image:
    width, height, px = _parse_netpbm(data, b"P6", 3, path)
    return Image(px.reshape(height, width, 3).copy())


def encode_ppm(img: Image) -> bytes:
    return b"P6\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes()


def read_ppm(path) -> Image:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read(), path=os.fspath(path))


def write_ppm(img: Image, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def decode_pgm(data: bytes, path=None) -> np.ndarray:
    width, height, px = _parse_netpbm(data, b"P5", 1, path)
    return px.reshape(height, width).copy()


def encode_pgm(values: np.ndarray) -> bytes:
    v = np.asarray(values)
    if v.ndim != 2:
        raise ShapeError(f"PGM data must be 2-D, got {v.shape}")
    if v.dtype != np.uint8:
        if np.any(v < 0) or np.any(v > 255):
            raise ValidationError("PGM values must lie in [0, 255]")
        v = v.astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (v.shape[1], v.shape[0]) + np.ascontiguousarray(v).tobytes()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read(), path=os.fspath(path))


def write_pgm(values: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(values))


# --------------------------------------------------------------------------
# JSON formats


def serialize_grid(grid: TokenGrid) -> str:
    return canonical_json(
        {"h": grid.h, "w": grid.w, "codebook_size": grid.codebook_size, "tokens": [int(t) for t in grid.tokens]}
    )


def _load_json(text: str, what: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{what}: invalid JSON ({exc.msg})", offset=exc.pos) from None


def _check_keys(obj, keys, what):
    if not isinstance(obj, dict) or set(obj) != set(keys):
        got = sorted(obj) if isinstance(obj, dict) else type(obj).__name__
        raise ValidationError(f"{what}: expected keys {list(keys)}, got {got}")


def deserialize_grid(text: str) -> TokenGrid:
    obj = _load_json(text, "token grid")
    _check_keys(obj, ("h", "w", "codebook_size", "tokens"), "token grid")
    tokens = obj["tokens"]
    if not isinstance(tokens, list) or not all(_is_int(t) for t in tokens):
        raise ValidationError("token grid: tokens must be a list of integers")
    return TokenGrid(obj["h"], obj["w"], np.array(tokens, dtype=np.int64), obj["codebook_size"])


def serialize_codebook(cb: Codebook) -> str:
    return canonical_json({"patch": cb.patch, "entries": cb.entries.astype(int).tolist()})


def deserialize_codebook(text: str) -> Codebook:
    obj = _load_json(text, "codebook")
    _check_keys(obj, ("patch", "entries"), "codebook")
    entries = obj["entries"]
    if not isinstance(entries, list) or not all(
        isinstance(e, list) and all(_is_int(v) for v in e) for e in entries
    ):
        raise ValidationError("codebook: entries must be lists of integers")
    if len({len(e) for e in entries}) > 1:
        raise ValidationError("codebook: entries have different lengths")
    return Codebook(obj["patch"], np.array(entries, dtype=np.int64).reshape(len(entries), -1))


def serialize_vocab(vocab: Vocab) -> str:
    return canonical_json({"words": list(vocab.words)})


def deserialize_vocab(text: str) -> Vocab:
    obj = _load_json(text, "vocabulary")
    _check_keys(obj, ("words",), "vocabulary")
    if not isinstance(obj["words"], list):
        raise ValidationError("vocabulary: words must be a list")
    return Vocab(obj["words"])


def load_grid(path) -> TokenGrid:
    return deserialize_grid(read_text(path))


def load_codebook(path) -> Codebook:
    return deserialize_codebook(read_text(path))


def load_vocab(path) -> Vocab:
    return deserialize_vocab(read_text(path))
