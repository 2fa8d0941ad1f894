"""Joint token space shared by every model variant.

The vocabulary is laid out as contiguous, disjoint partitions:

    [ text characters | phoneme block (optional) | audio codebook ]

Text tokens are single printable-ASCII characters plus two markers
(TEXT_EOS, BOUNDARY). The phoneme block holds the pseudo-phoneme
inventory plus PHONEME_EOS / PHONEME_PAD and is present only for
variants that emit a guidance stream. The audio codebook includes the
reserved AUDIO_EOS / AUDIO_PAD ids at its top. Logits produced over the
joint vocabulary can be split back into guidance and audio parts with
:func:`slice_logits`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

# Printable ASCII, 0x20 (space) through 0x7E (~). Character-level text
# tokenization keeps the prompt pipeline dependency-free and invertible.
CHARSET = "".join(chr(c) for c in range(0x20, 0x7F))
_CHAR_TO_ID = {ch: i for i, ch in enumerate(CHARSET)}

PROMPT_PREFIX_PRETRAIN = "<SYSTEM>: Say this sentence. \\n "
PROMPT_PREFIX_EMOTION = "<SYSTEM>: Say this sentence with emotion of "
# Literal backslash-n delimiter between the instruction and the text,
# frozen byte-for-byte.
PROMPT_DELIMITER = ". \\n "


class LayoutError(ValueError):
    """Raised for vocabulary geometry that cannot be constructed."""


@dataclass(frozen=True)
class VocabLayout:
    """Index geometry of the joint vocabulary.

    ``text_size`` counts the base text tokens (characters plus TEXT_EOS
    and BOUNDARY). ``phoneme_size`` counts the appended phoneme block
    including its two specials, or 0 for the base layout. ``audio_size``
    counts the audio codebook including AUDIO_EOS and AUDIO_PAD.
    """

    text_size: int
    phoneme_size: int
    audio_size: int

    def __post_init__(self) -> None:
        if self.text_size < 3:
            raise LayoutError(
                f"text partition needs >= 3 ids (content + TEXT_EOS + BOUNDARY), got {self.text_size}"
            )
        if self.phoneme_size not in (0,) and self.phoneme_size < 3:
            raise LayoutError(
                f"phoneme block needs >= 3 ids (content + PHONEME_EOS + PHONEME_PAD), got {self.phoneme_size}"
            )
        if self.audio_size < 3:
            raise LayoutError(
                f"audio partition needs >= 3 ids (content + AUDIO_EOS + AUDIO_PAD), got {self.audio_size}"
            )

    # Partition geometry. Guidance = text plus phoneme block; the audio
    # partition starts where guidance ends.
    @property
    def guidance_size(self) -> int:
        return self.text_size + self.phoneme_size

    @property
    def joint_size(self) -> int:
        return self.guidance_size + self.audio_size

    @property
    def audio_offset(self) -> int:
        return self.guidance_size

    @property
    def phoneme_offset(self) -> int:
        return self.text_size

    @property
    def has_phonemes(self) -> bool:
        return self.phoneme_size > 0

    # Reserved ids sit at the top of their partitions.
    @property
    def text_eos(self) -> int:
        return self.text_size - 2

    @property
    def boundary(self) -> int:
        return self.text_size - 1

    @property
    def phoneme_eos(self) -> int:
        if not self.has_phonemes:
            raise LayoutError("base layout has no phoneme block")
        return self.text_size + self.phoneme_size - 2

    @property
    def phoneme_pad(self) -> int:
        if not self.has_phonemes:
            raise LayoutError("base layout has no phoneme block")
        return self.text_size + self.phoneme_size - 1

    @property
    def audio_eos(self) -> int:
        return self.audio_offset + self.audio_size - 2

    @property
    def audio_pad(self) -> int:
        return self.audio_offset + self.audio_size - 1

    # Conversions between codec-relative audio ids and joint-vocab ids.
    def audio_abs(self, rel: int) -> int:
        if not 0 <= rel < self.audio_size:
            raise LayoutError(f"audio codec id {rel} outside [0, {self.audio_size})")
        return self.audio_offset + rel

    def audio_rel(self, abs_id: int) -> int:
        if not self.in_audio(abs_id):
            raise LayoutError(f"id {abs_id} not in audio partition [{self.audio_offset}, {self.joint_size})")
        return abs_id - self.audio_offset

    def phoneme_abs(self, rel: int) -> int:
        if not self.has_phonemes:
            raise LayoutError("base layout has no phoneme block")
        if not 0 <= rel < self.phoneme_size:
            raise LayoutError(f"phoneme id {rel} outside [0, {self.phoneme_size})")
        return self.phoneme_offset + rel

    def in_audio(self, token_id: int) -> bool:
        return self.audio_offset <= token_id < self.joint_size

    def in_guidance(self, token_id: int) -> bool:
        return 0 <= token_id < self.guidance_size

    def in_text(self, token_id: int) -> bool:
        return 0 <= token_id < self.text_size

    def to_json(self) -> str:
        return json.dumps(
            {
                "text_size": self.text_size,
                "phoneme_size": self.phoneme_size,
                "audio_size": self.audio_size,
                "special_ids": {
                    "text_eos": self.text_eos,
                    "boundary": self.boundary,
                    "phoneme_eos": self.phoneme_eos if self.has_phonemes else None,
                    "phoneme_pad": self.phoneme_pad if self.has_phonemes else None,
                    "audio_eos": self.audio_eos,
                    "audio_pad": self.audio_pad,
                },
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "VocabLayout":
        raw = json.loads(text)
        layout = cls(
            text_size=raw["text_size"],
            phoneme_size=raw["phoneme_size"],
            audio_size=raw["audio_size"],
        )
        specials = raw.get("special_ids")
        if specials is not None and specials["audio_eos"] != layout.audio_eos:
            raise LayoutError("special ids in descriptor do not match partition arithmetic")
        return layout


def build_layout(text_vocab_size: int, phoneme_inventory_size: int, audio_codebook_size: int) -> VocabLayout:
    """Build a layout from partition sizes.

    ``phoneme_inventory_size`` counts content phonemes only; the two
    phoneme specials are appended on top of it. ``audio_codebook_size``
    already includes the two reserved audio ids.
    """
    if phoneme_inventory_size < 0:
        raise LayoutError(f"negative phoneme inventory: {phoneme_inventory_size}")
    phoneme_size = phoneme_inventory_size + 2 if phoneme_inventory_size > 0 else 0
    return VocabLayout(
        text_size=text_vocab_size,
        phoneme_size=phoneme_size,
        audio_size=audio_codebook_size,
    )


def default_layout(with_phonemes: bool) -> VocabLayout:
    """Layout for the toy system: ASCII text, 27 pseudo-phonemes, 27x7 codec."""
    from . import toyspeech

    return build_layout(
        text_vocab_size=len(CHARSET) + 2,
        phoneme_inventory_size=toyspeech.PHONEME_INVENTORY_SIZE if with_phonemes else 0,
        audio_codebook_size=toyspeech.AUDIO_CODEBOOK_SIZE,
    )


class PromptError(ValueError):
    """Raised for prompt records that violate the template contract."""


@dataclass(frozen=True)
class PromptRecord:
    """One prompt: a mode, an optional emotion description, and the text."""

    mode: str
    description: str
    text: str

    def __post_init__(self) -> None:
        if self.mode not in ("pretrain", "emotion"):
            raise PromptError(f"unknown prompt mode: {self.mode!r}")
        if not self.text:
            raise PromptError("prompt text must be non-empty")
        if self.mode == "emotion" and not self.description:
            raise PromptError("emotion mode requires a non-empty description")
        if self.mode == "pretrain" and self.description:
            raise PromptError("pretrain mode takes no description")
        for field_name, value in (("description", self.description), ("text", self.text)):
            if "\\n" in value:
                raise PromptError(
                    f"{field_name} contains the reserved delimiter byte pair '\\n'"
                )


def render_prompt(record: PromptRecord) -> str:
    """Render the prompt string, byte-for-byte per the fixed templates."""
    if record.mode == "pretrain":
        return PROMPT_PREFIX_PRETRAIN + record.text
    return PROMPT_PREFIX_EMOTION + record.description + PROMPT_DELIMITER + record.text


def encode_text(text: str) -> list[int]:
    """Character-level tokenization over the printable-ASCII charset."""
    ids = []
    for ch in text:
        token = _CHAR_TO_ID.get(ch)
        if token is None:
            raise PromptError(f"unsupported character {ch!r} (U+{ord(ch):04X})")
        ids.append(token)
    return ids


def decode_text(ids: Sequence[int]) -> str:
    chars = []
    for token in ids:
        if not 0 <= token < len(CHARSET):
            raise PromptError(f"id {token} is not a character token")
        chars.append(CHARSET[token])
    return "".join(chars)


def format_prompt(record: PromptRecord) -> list[int]:
    """Render and tokenize a prompt record."""
    return encode_text(render_prompt(record))


def slice_logits(row, layout: VocabLayout):
    """Split one joint-vocabulary logits row into (guidance, audio) parts.

    Works on any sliceable 1-D vector (list, numpy array, torch tensor).
    Concatenating the two parts reconstructs the input row.
    """
    n = len(row)
    if n != layout.joint_size:
        raise LayoutError(f"logits row has length {n}, layout expects {layout.joint_size}")
    cut = layout.audio_offset
    return row[:cut], row[cut:]
