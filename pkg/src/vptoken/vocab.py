"""Extended token vocabulary and perception-group detection.

Token ids are laid out as ``[text words | specials]``. Specials are appended
after the base range in this fixed order::

    <Region_Selection_Start> <Region_Selection_End>
    <x_0> ... <x_{k-1}>
    <y_0> ... <y_{k-1}>
    <Re-Encoding_Start> <Re-Encoding_Control> <Re-Encoding_End>
    <image> <eos> <pad>

so a vocabulary is fully determined by ``(base_size, k)`` plus the closed
word list used for text.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import InvalidConfigError, OutOfRangeError

GLYPH_NAMES = (
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta",
    "iota", "kappa", "lambda", "mu", "nu", "xi", "omicron", "pi",
)
COLOR_NAMES = ("red", "green", "blue", "yellow", "cyan", "magenta")
NUMBER_WORDS = (
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
)
DIGITS = tuple(str(d) for d in range(10))
TEMPLATE_WORDS = (
    "user", "assistant", "what", "symbol", "is", "on", "the", "tile", "tiles",
    "?", ".", ",", "how", "many", "are", "there", "please", "identify",
    "region", "that", "can", "help", "you", "answer", "question", "better",
    "and", "then", "require", "additional", "perception", "features", "in",
    "column", "row", "at", "a", "with", "image", "of", "colored", "scene",
    "nothing", "large", "small",
)

WORDS: tuple[str, ...] = TEMPLATE_WORDS + GLYPH_NAMES + COLOR_NAMES + NUMBER_WORDS + DIGITS

UTILITY_TOKENS = ("<image>", "<eos>", "<pad>")


class Kind(enum.Enum):
    TEXT = "Text"
    IMAGE = "ImagePlaceholder"
    REGION_START = "RegionStart"
    REGION_END = "RegionEnd"
    COORD_X = "CoordX"
    COORD_Y = "CoordY"
    REENC_START = "ReEncStart"
    REENC_CONTROL = "ReEncControl"
    REENC_END = "ReEncEnd"
    EOS = "EndOfSequence"
    PAD = "Pad"


@dataclass(frozen=True)
class TokenClass:
    kind: Kind
    index: int | None = None  # cell index for CoordX / CoordY


@dataclass(frozen=True)
class Vocabulary:
    """Immutable id map for text words and perception tokens."""

    base_size: int
    k: int
    words: tuple[str, ...] = field(repr=False)
    specials: tuple[str, ...] = field(repr=False)

    # -- ids -------------------------------------------------------------
    @property
    def total_size(self) -> int:
        return self.base_size + len(self.specials)

    def special_id(self, name: str) -> int:
        return self.base_size + self._special_index[name]

    @property
    def region_start(self) -> int:
        return self.special_id("<Region_Selection_Start>")

    @property
    def region_end(self) -> int:
        return self.special_id("<Region_Selection_End>")

    def x(self, i: int) -> int:
        if not 0 <= i < self.k:
            raise OutOfRangeError(f"x index {i} outside [0, {self.k - 1}]")
        return self.special_id(f"<x_{i}>")

    def y(self, j: int) -> int:
        if not 0 <= j < self.k:
            raise OutOfRangeError(f"y index {j} outside [0, {self.k - 1}]")
        return self.special_id(f"<y_{j}>")

    @property
    def reenc_start(self) -> int:
        return self.special_id("<Re-Encoding_Start>")

    @property
    def reenc_control(self) -> int:
        return self.special_id("<Re-Encoding_Control>")

    @property
    def reenc_end(self) -> int:
        return self.special_id("<Re-Encoding_End>")

    @property
    def image(self) -> int:
        return self.special_id("<image>")

    @property
    def eos(self) -> int:
        return self.special_id("<eos>")

    @property
    def pad(self) -> int:
        return self.special_id("<pad>")

    # -- lookup tables, built lazily and cached on the frozen instance --
    @property
    def _special_index(self) -> dict[str, int]:
        cache = self.__dict__.get("_special_cache")
        if cache is None:
            cache = {name: i for i, name in enumerate(self.specials)}
            object.__setattr__(self, "_special_cache", cache)
        return cache

    @property
    def _word_index(self) -> dict[str, int]:
        cache = self.__dict__.get("_word_cache")
        if cache is None:
            cache = {w: i for i, w in enumerate(self.words)}
            object.__setattr__(self, "_word_cache", cache)
        return cache

    @property
    def _classes(self) -> tuple[TokenClass, ...]:
        cache = self.__dict__.get("_class_cache")
        if cache is None:
            cache = tuple(_classify_name(n) for n in self.specials)
            object.__setattr__(self, "_class_cache", cache)
        return cache

    # -- text ------------------------------------------------------------
    def encode_text(self, text: str | Iterable[str]) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        try:
            return [self._word_index[w] for w in words]
        except KeyError as exc:
            raise OutOfRangeError(f"word {exc.args[0]!r} not in the closed word list") from None

    def token_str(self, t: int) -> str:
        if not 0 <= t < self.total_size:
            raise OutOfRangeError(f"token id {t} outside vocabulary of size {self.total_size}")
        if t < self.base_size:
            return self.words[t]
        return self.specials[t - self.base_size]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.token_str(t) for t in ids)

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "base_size": self.base_size,
            "k": self.k,
            "words": list(self.words),
            "specials": list(self.specials),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        vocab = extend_vocabulary(int(d["base_size"]), int(d["k"]), words=d.get("words"))
        if list(vocab.specials) != list(d["specials"]) or list(vocab.words) != list(d["words"]):
            raise InvalidConfigError("serialized vocabulary does not match the canonical layout")
        return vocab


def _special_names(k: int) -> tuple[str, ...]:
    return (
        ("<Region_Selection_Start>", "<Region_Selection_End>")
        + tuple(f"<x_{i}>" for i in range(k))
        + tuple(f"<y_{j}>" for j in range(k))
        + ("<Re-Encoding_Start>", "<Re-Encoding_Control>", "<Re-Encoding_End>")
        + UTILITY_TOKENS
    )


def _classify_name(name: str) -> TokenClass:
    fixed = {
        "<Region_Selection_Start>": Kind.REGION_START,
        "<Region_Selection_End>": Kind.REGION_END,
        "<Re-Encoding_Start>": Kind.REENC_START,
        "<Re-Encoding_Control>": Kind.REENC_CONTROL,
        "<Re-Encoding_End>": Kind.REENC_END,
        "<image>": Kind.IMAGE,
        "<eos>": Kind.EOS,
        "<pad>": Kind.PAD,
    }
    if name in fixed:
        return TokenClass(fixed[name])
    axis, idx = name[1:-1].split("_")
    return TokenClass(Kind.COORD_X if axis == "x" else Kind.COORD_Y, int(idx))


def extend_vocabulary(base_size: int = 256, k: int = 8, words: Sequence[str] | None = None) -> Vocabulary:
    """Build the vocabulary: ``base_size`` text ids followed by the specials.

    The closed word list fills the low ids; leftover base slots are named
    ``<unused_i>``.
    """
    if base_size < 1:
        raise InvalidConfigError(f"base_size must be >= 1, got {base_size}")
    if k < 2:
        raise InvalidConfigError(f"grid granularity k must be >= 2, got {k}")
    words = list(WORDS if words is None else words)[:base_size]
    if len(words) < base_size:
        words += [f"<unused_{i}>" for i in range(len(words), base_size)]
    return Vocabulary(base_size=base_size, k=k, words=tuple(words), specials=_special_names(k))


def classify(vocab: Vocabulary, t: int) -> TokenClass:
    if not 0 <= t < vocab.total_size:
        raise OutOfRangeError(f"token id {t} outside vocabulary of size {vocab.total_size}")
    if t < vocab.base_size:
        return TokenClass(Kind.TEXT)
    return vocab._classes[t - vocab.base_size]


# -- group detection --------------------------------------------------------


@dataclass(frozen=True)
class RegionTrigger:
    cells: "CellBox"
    start: int  # stream index of the start delimiter


@dataclass(frozen=True)
class ReEncodeTrigger:
    control_positions: tuple[int, ...]
    start: int

    @property
    def control_position(self) -> int:
        return self.control_positions[0]


@dataclass(frozen=True)
class MalformedGroup:
    kind: str  # "region-malformed", "region-inverted", "reencode-malformed", "raw-box-invalid"
    start: int


def scan_for_group(
    vocab: Vocabulary, stream: Sequence[int], n_control: int = 1
) -> RegionTrigger | ReEncodeTrigger | MalformedGroup | None:
    """Inspect the suffix of ``stream`` for a just-completed perception group.

    Only fires when the last token is a closing delimiter, so feeding tokens
    one at a time reports each group exactly once.
    """
    if not stream:
        return None
    last = stream[-1]
    if last == vocab.region_end:
        return _scan_region(vocab, stream)
    if last == vocab.reenc_end:
        return _scan_reencode(vocab, stream, n_control)
    return None


def _scan_region(vocab: Vocabulary, stream: Sequence[int]):
    from .grid_codec import CellBox

    n = len(stream)
    start = _last_index(stream, vocab.region_start, n - 1)
    if n < 6 or stream[n - 6] != vocab.region_start:
        return MalformedGroup("region-malformed", start if start is not None else n - 1)
    kinds = [classify(vocab, t) for t in stream[n - 5 : n - 1]]
    expected = (Kind.COORD_X, Kind.COORD_Y, Kind.COORD_X, Kind.COORD_Y)
    if tuple(c.kind for c in kinds) != expected:
        return MalformedGroup("region-malformed", n - 6)
    x0, y0, x1, y1 = (c.index for c in kinds)
    if x1 < x0 or y1 < y0:
        return MalformedGroup("region-inverted", n - 6)
    return RegionTrigger(CellBox(x0, y0, x1, y1), n - 6)


def _scan_reencode(vocab: Vocabulary, stream: Sequence[int], n_control: int):
    n = len(stream)
    span = n_control + 2
    start = n - span
    if (
        start >= 0
        and stream[start] == vocab.reenc_start
        and all(t == vocab.reenc_control for t in stream[start + 1 : n - 1])
    ):
        return ReEncodeTrigger(tuple(range(start + 1, n - 1)), start)
    found = _last_index(stream, vocab.reenc_start, n - 1)
    return MalformedGroup("reencode-malformed", found if found is not None else n - 1)


def _last_index(stream: Sequence[int], token: int, stop: int) -> int | None:
    for i in range(stop - 1, -1, -1):
        if stream[i] == token:
            return i
    return None
