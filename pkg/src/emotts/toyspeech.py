"""Deterministic toy stand-ins for the external speech models.

Four pure functions replace the heavyweight components of a real
pipeline: a rule-based grapheme-to-phoneme converter, an
emotion-conditioned token synthesizer, an inverse transcriber, and an
emotion embedder. The codec is injective by construction: audio token
ids encode (phoneme, emotion) pairs as ``phoneme_index * 7 +
emotion_index`` and every phoneme is emitted as four consecutive copies
of its id, so synthesis followed by transcription is an exact
round-trip on clean tokens and tolerant of per-run corruption via
majority voting.
"""

from __future__ import annotations

from collections import Counter
from enum import Enum
from typing import Iterable, Sequence

import numpy as np


class EmotionCategory(Enum):
    ANGRY = 0
    HAPPY = 1
    SAD = 2
    SURPRISED = 3
    FEARFUL = 4
    DISGUSTED = 5
    NEUTRAL = 6

    @classmethod
    def from_name(cls, name: str) -> "EmotionCategory":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown emotion category: {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


N_EMOTIONS = len(EmotionCategory)

# 26 single-letter pseudo-phonemes plus the word separator "_".
PHONEME_SYMBOLS = "abcdefghijklmnopqrstuvwxyz_"
WORD_SEP = PHONEME_SYMBOLS.index("_")
PHONEME_INVENTORY_SIZE = len(PHONEME_SYMBOLS)

# Each phoneme is rendered as 4 identical audio tokens. Four tokens per
# phoneme against a group size of 3 keeps the phoneme stream strictly
# shorter than the audio decode-step budget.
TOKENS_PER_PHONEME = 4

AUDIO_CONTENT_SIZE = PHONEME_INVENTORY_SIZE * N_EMOTIONS
AUDIO_EOS_REL = AUDIO_CONTENT_SIZE
AUDIO_PAD_REL = AUDIO_CONTENT_SIZE + 1
AUDIO_CODEBOOK_SIZE = AUDIO_CONTENT_SIZE + 2

# Nominal codec token rate used for duration bookkeeping.
TOKEN_RATE_HZ = 50

SPEAKERS = tuple(f"spk{i}" for i in range(5))


def normalize_text(text: str) -> str:
    """Case-fold, drop punctuation, collapse whitespace runs."""
    kept: list[str] = []
    for ch in text:
        if not 0x20 <= ord(ch) <= 0x7E:
            raise ValueError(f"unsupported character {ch!r} (U+{ord(ch):04X})")
        low = ch.lower()
        if "a" <= low <= "z":
            kept.append(low)
        elif ch == " ":
            kept.append(" ")
        # other printable characters (digits, punctuation) are dropped
    return " ".join("".join(kept).split())


def g2p(text: str) -> list[int]:
    """Map text to pseudo-phoneme indices, one per letter, "_" per space."""
    normalized = normalize_text(text)
    return [WORD_SEP if ch == " " else ord(ch) - ord("a") for ch in normalized]


def phonemes_to_str(phonemes: Sequence[int]) -> str:
    """Compact symbol form of a phoneme sequence, e.g. [7, 8] -> 'hi'."""
    out = []
    for p in phonemes:
        if not 0 <= p < PHONEME_INVENTORY_SIZE:
            raise ValueError(f"phoneme index {p} outside inventory")
        out.append(PHONEME_SYMBOLS[p])
    return "".join(out)


def str_to_phonemes(symbols: str) -> list[int]:
    out = []
    for ch in symbols:
        idx = PHONEME_SYMBOLS.find(ch)
        if idx < 0:
            raise ValueError(f"unknown phoneme symbol {ch!r}")
        out.append(idx)
    return out


def audio_id(phoneme: int, emotion: EmotionCategory) -> int:
    """Codec id for one (phoneme, emotion) pair; injective by construction."""
    if not 0 <= phoneme < PHONEME_INVENTORY_SIZE:
        raise ValueError(f"phoneme index {phoneme} outside inventory")
    return phoneme * N_EMOTIONS + emotion.value


def toy_synthesize(phonemes: Sequence[int], emotion: EmotionCategory) -> list[int]:
    """Emit TOKENS_PER_PHONEME copies of each phoneme's codec id."""
    tokens: list[int] = []
    for p in phonemes:
        tokens.extend([audio_id(p, emotion)] * TOKENS_PER_PHONEME)
    return tokens


def _content_tokens(tokens: Iterable[int]) -> list[int]:
    content = []
    for t in tokens:
        if not 0 <= t < AUDIO_CODEBOOK_SIZE:
            raise ValueError(f"token {t} outside the audio codebook")
        if t < AUDIO_CONTENT_SIZE:
            content.append(t)
    return content


def _majority(values: Sequence[int]) -> int:
    counts = Counter(values)
    best_count = max(counts.values())
    return min(v for v, c in counts.items() if c == best_count)


def toy_transcribe(tokens: Sequence[int]) -> str:
    """Invert the codec: majority-vote each 4-token run back to a phoneme.

    EOS/PAD ids are ignored. A corrupted token inside a run is outvoted
    by the remaining copies; a short final run is still decoded.
    """
    content = _content_tokens(tokens)
    chars: list[str] = []
    for start in range(0, len(content), TOKENS_PER_PHONEME):
        run = content[start : start + TOKENS_PER_PHONEME]
        phoneme = _majority([t // N_EMOTIONS for t in run])
        chars.append(" " if phoneme == WORD_SEP else PHONEME_SYMBOLS[phoneme])
    return "".join(chars)


def toy_emotion_embed(tokens: Sequence[int]) -> np.ndarray:
    """L2-normalized histogram over the emotion index of each token."""
    content = _content_tokens(tokens)
    if not content:
        raise ValueError("cannot embed an utterance with no content tokens")
    hist = np.zeros(N_EMOTIONS, dtype=np.float64)
    for t in content:
        hist[t % N_EMOTIONS] += 1.0
    return hist / np.linalg.norm(hist)


def classify_emotion(tokens: Sequence[int]) -> EmotionCategory:
    """Argmax of the emotion embedding; ties resolve to the lowest index."""
    return EmotionCategory(int(np.argmax(toy_emotion_embed(tokens))))


def duration_seconds(token_count: int) -> float:
    return token_count / TOKEN_RATE_HZ
