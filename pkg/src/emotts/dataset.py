"""Dataset model and the three-step construction pipeline.

Step 1 generates (text, description) pairs per emotion category under
strict constraints (15-25 words, at most two emphasized words;
descriptions are single-sentence present-participle phrases). Step 2
synthesizes audio tokens, cycling through five speakers. Step 3
transcribes each sample, stores its WER against the intended text and
drops entries above the filter threshold. External services (text
generator, synthesizer, transcriber, paraphraser) sit behind the
ClientSuite interface; the defaults are deterministic toy
implementations so the whole pipeline is reproducible from a seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics, toyspeech
from .toyspeech import SPEAKERS, EmotionCategory

log = logging.getLogger(__name__)

# Violation codes returned by the validators.
LENGTH = "length"
EMPHASIS = "emphasis"
PARTICIPLE = "participle"
BREVITY = "brevity"
SENTENCE = "sentence"

MIN_WORDS = 15
MAX_WORDS = 25
MAX_EMPHASIZED = 2
DEFAULT_WER_THRESHOLD = 0.05
DEFAULT_RETRY_CAP = 10


class DataError(ValueError):
    """A malformed dataset record, carrying the offending entry id."""


class PipelineError(RuntimeError):
    """Pipeline could not satisfy its per-emotion targets."""


@dataclass
class ManifestEntry:
    """One dataset record."""

    id: str
    text: str
    emotion: EmotionCategory
    description: str
    speaker: str
    phonemes: str
    audio_tokens: list[int]
    wer: Optional[float] = None
    split: str = "train"
    description_variants: list[str] = field(default_factory=list)

    @property
    def duration_seconds(self) -> float:
        return toyspeech.duration_seconds(len(self.audio_tokens))

    @property
    def all_descriptions(self) -> list[str]:
        return [self.description] + list(self.description_variants)

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "text": self.text,
                "emotion": self.emotion.label,
                "description": self.description,
                "speaker": self.speaker,
                "phonemes": self.phonemes,
                "audio_tokens": self.audio_tokens,
                "wer": self.wer,
                "split": self.split,
                "description_variants": self.description_variants,
            }
        )

    @classmethod
    def from_json_line(cls, line: str) -> "ManifestEntry":
        raw = json.loads(line)
        return cls(
            id=raw["id"],
            text=raw["text"],
            emotion=EmotionCategory.from_name(raw["emotion"]),
            description=raw["description"],
            speaker=raw["speaker"],
            phonemes=raw["phonemes"],
            audio_tokens=list(raw["audio_tokens"]),
            wer=raw.get("wer"),
            split=raw.get("split", "train"),
            description_variants=list(raw.get("description_variants", [])),
        )


def write_manifest(entries: Sequence[ManifestEntry], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for entry in entries:
            fh.write(entry.to_json_line())
            fh.write("\n")


def read_manifest(path: str) -> list[ManifestEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(ManifestEntry.from_json_line(line))
    return entries


def _is_emphasized(word: str) -> bool:
    letters = [ch for ch in word if ch.isalpha()]
    return len(letters) >= 2 and all(ch.isupper() for ch in letters)


def validate_text(text: str) -> list[str]:
    """Check the 15-25 word window and the two-emphasized-words cap."""
    violations = []
    words = text.split()
    if not MIN_WORDS <= len(words) <= MAX_WORDS:
        violations.append(LENGTH)
    if sum(1 for w in words if _is_emphasized(w)) > MAX_EMPHASIZED:
        violations.append(EMPHASIS)
    return violations


def validate_description(description: str) -> list[str]:
    """Present-participle opener, one sentence, at least three words."""
    violations = []
    words = description.split()
    first = words[0].strip(",.;:!?\"'") if words else ""
    if not first.lower().endswith("ing"):
        violations.append(PARTICIPLE)
    if len(words) < 3:
        violations.append(BREVITY)
    body = description.rstrip()
    interior = body[:-1] if body.endswith(".") else body
    if any(ch in interior for ch in ".!?"):
        violations.append(SENTENCE)
    return violations


# ---------------------------------------------------------------------------
# Toy clients

_PROSE = (
    "The {n1} {v1} through the {a1} {p1}, its voice {g1} like {m1} against the fading light of evening.",
    "A {a1} {n1} {v1} across the {p1} while the {n2} kept {g1} under a {a2} and unbroken sky.",
)
_DIALOG = (
    "I have {v2} you about the {n1} {c1} times already, so why is the {p1} still {a1} tonight?",
    "You said the {n1} was {a1}, but every {n2} in this {p1} keeps {g1} at me again.",
)
_OBSERVATIONAL = (
    "{n1c} {v1} the {p1} like it is {g1} the {m1}, {a1} and insistent through the whole {t1}.",
    "The {n1} over the {p1} turned {a1} by {t1}, {g1} softly while everyone pretended not to notice.",
)

_FLAVOR: dict[EmotionCategory, dict[str, tuple[str, ...]]] = {
    EmotionCategory.ANGRY: {
        "n": ("door", "kettle", "engine", "drum", "fist"),
        "a": ("furious", "seething", "burning", "raw"),
        "g": ("snarling", "pounding", "hammering"),
        "m": ("thunder", "gravel", "sparks"),
        "v": ("slammed", "tore", "burst"),
        "v2": ("warned", "asked", "told"),
        "p": ("kitchen", "hallway", "garage"),
        "t": ("evening", "argument", "hour"),
        "c": ("three", "four", "five"),
    },
    EmotionCategory.HAPPY: {
        "n": ("kite", "choir", "garden", "parade", "lantern"),
        "a": ("bright", "giddy", "golden", "buoyant"),
        "g": ("laughing", "sparkling", "dancing"),
        "m": ("confetti", "sunlight", "bells"),
        "v": ("sailed", "spun", "glowed"),
        "v2": ("promised", "told", "shown"),
        "p": ("courtyard", "meadow", "porch"),
        "t": ("morning", "festival", "afternoon"),
        "c": ("two", "three", "ten"),
    },
    EmotionCategory.SAD: {
        "n": ("letter", "photograph", "bench", "coat", "violin"),
        "a": ("hollow", "grey", "weary", "faded"),
        "g": ("sighing", "fading", "drifting"),
        "m": ("ashes", "rain", "dust"),
        "v": ("slipped", "sank", "faded"),
        "v2": ("reminded", "asked", "begged"),
        "p": ("station", "attic", "shoreline"),
        "t": ("winter", "evening", "goodbye"),
        "c": ("three", "seven", "many"),
    },
    EmotionCategory.SURPRISED: {
        "n": ("curtain", "telegram", "firework", "stranger", "mirror"),
        "a": ("impossible", "sudden", "dazzling", "unannounced"),
        "g": ("gasping", "blinking", "reeling"),
        "m": ("lightning", "applause", "glass"),
        "v": ("rose", "appeared", "erupted"),
        "v2": ("told", "warned", "asked"),
        "p": ("stage", "doorway", "plaza"),
        "t": ("instant", "midnight", "reveal"),
        "c": ("two", "three", "four"),
    },
    EmotionCategory.FEARFUL: {
        "n": ("knife", "shadow", "stairwell", "whisper", "latch"),
        "a": ("trembling", "cold", "breathless", "unlit"),
        "g": ("creaking", "crawling", "shivering"),
        "m": ("ghosts", "footsteps", "static"),
        "v": ("glinted", "crept", "flickered"),
        "v2": ("begged", "warned", "asked"),
        "p": ("cellar", "corridor", "woods"),
        "t": ("night", "blackout", "silence"),
        "c": ("three", "four", "six"),
    },
    EmotionCategory.DISGUSTED: {
        "n": ("casserole", "carpet", "drain", "sandwich", "wallpaper"),
        "a": ("rancid", "clammy", "curdled", "greasy"),
        "g": ("oozing", "reeking", "festering"),
        "m": ("mildew", "grease", "spoilage"),
        "v": ("squelched", "dripped", "slid"),
        "v2": ("told", "warned", "reminded"),
        "p": ("pantry", "basement", "sink"),
        "t": ("dinner", "week", "afternoon"),
        "c": ("two", "three", "five"),
    },
    EmotionCategory.NEUTRAL: {
        "n": ("leaf", "ledger", "streetlamp", "timetable", "teacup"),
        "a": ("even", "quiet", "steady", "plain"),
        "g": ("rustling", "ticking", "settling"),
        "m": ("paper", "breeze", "clockwork"),
        "v": ("rested", "moved", "turned"),
        "v2": ("told", "shown", "sent"),
        "p": ("office", "garden", "platform"),
        "t": ("evening", "weekday", "commute"),
        "c": ("two", "three", "four"),
    },
}

DESCRIPTION_BANK: dict[EmotionCategory, tuple[str, ...]] = {
    EmotionCategory.ANGRY: (
        "Expressing aggravated displeasure and discontent.",
        "Conveying barely restrained fury in a clipped, rising cadence.",
        "Projecting hot indignation through hard, biting consonants.",
    ),
    EmotionCategory.HAPPY: (
        "Expressing supportive joy and pride in someone's accomplishment.",
        "Conveying a contagious, joyful atmosphere.",
        "Radiating bright, buoyant delight in every phrase.",
    ),
    EmotionCategory.SAD: (
        "Conveying a pervasive sense of desolation and despair.",
        "Carrying a heavy, mournful slowness in the voice.",
        "Expressing quiet grief worn thin by time.",
    ),
    EmotionCategory.SURPRISED: (
        "Evoking an excited and bewildered wonder in a rising, quickened cadence.",
        "Conveying startled disbelief with sudden upward lifts.",
        "Expressing wide-eyed astonishment at an unexpected turn.",
    ),
    EmotionCategory.FEARFUL: (
        "Emanating a chilling foreboding, underscored by a quivering voice.",
        "Conveying tight, breathless apprehension of something unseen.",
        "Projecting trembling dread beneath a hushed delivery.",
    ),
    EmotionCategory.DISGUSTED: (
        "Expressing a moment of incredulous disdain and distaste.",
        "Conveying curling revulsion in a flattened, recoiling tone.",
        "Projecting contempt soured with physical repulsion.",
    ),
    EmotionCategory.NEUTRAL: (
        "Emanating a peaceful, contemplative atmosphere.",
        "Maintaining an even, unhurried reading voice.",
        "Keeping a steady, matter-of-fact delivery throughout.",
    ),
}

# Compact descriptions for toy training corpora: still validator-clean,
# but short enough to keep prompt sequences small.
SHORT_DESCRIPTIONS: dict[EmotionCategory, str] = {
    EmotionCategory.ANGRY: "Expressing hot anger.",
    EmotionCategory.HAPPY: "Expressing bright joy.",
    EmotionCategory.SAD: "Conveying heavy sorrow.",
    EmotionCategory.SURPRISED: "Conveying startled wonder.",
    EmotionCategory.FEARFUL: "Conveying quiet dread.",
    EmotionCategory.DISGUSTED: "Expressing curling distaste.",
    EmotionCategory.NEUTRAL: "Keeping an even tone.",
}


def toy_text_generator(emotion: EmotionCategory, rng: np.random.Generator) -> tuple[str, str]:
    """Template-bank text/description pair for one emotion category."""
    flavor = _FLAVOR[emotion]
    kind = int(rng.integers(0, 3))
    bank = (_PROSE, _DIALOG, _OBSERVATIONAL)[kind]
    template = bank[int(rng.integers(0, len(bank)))]

    def pick(key: str) -> str:
        options = flavor[key]
        return options[int(rng.integers(0, len(options)))]

    fills = {
        "n1": pick("n"),
        "n2": pick("n"),
        "a1": pick("a"),
        "a2": pick("a"),
        "g1": pick("g"),
        "m1": pick("m"),
        "v1": pick("v"),
        "v2": pick("v2"),
        "p1": pick("p"),
        "t1": pick("t"),
        "c1": pick("c"),
    }
    fills["n1c"] = fills["n1"].capitalize()
    text = template.format(**fills)
    # Occasionally upcase one filler word for prosodic emphasis.
    if rng.random() < 0.5:
        word = fills["n1"]
        text = text.replace(word, word.upper(), 1)
    descriptions = DESCRIPTION_BANK[emotion]
    description = descriptions[int(rng.integers(0, len(descriptions)))]
    return text, description


def toy_speech_synthesizer(
    text: str, description: str, emotion: EmotionCategory, speaker: str
) -> list[int]:
    """Deterministic synthesis through the toy codec; speaker is metadata."""
    return toyspeech.toy_synthesize(toyspeech.g2p(text), emotion)


_PARTICIPLE_SWAPS = {
    "expressing": "conveying",
    "conveying": "expressing",
    "emanating": "radiating",
    "radiating": "emanating",
    "projecting": "carrying",
    "carrying": "projecting",
    "evoking": "stirring",
    "keeping": "holding",
    "maintaining": "keeping",
}

_PARAPHRASE_TAILS = (
    ", plainly audible in the voice.",
    ", carried in the tone alone.",
    ", unmistakable in every word.",
)


def toy_paraphraser(description: str, k: int) -> list[str]:
    """Deterministic rephrasings that keep the description contract."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if k > 1 + len(_PARAPHRASE_TAILS):
        raise ValueError(f"toy paraphraser supports at most {1 + len(_PARAPHRASE_TAILS)} variants")
    variants = []
    words = description.split()
    swap = _PARTICIPLE_SWAPS.get(words[0].lower(), "conveying")
    variants.append(" ".join([swap.capitalize()] + words[1:]))
    stem = description.rstrip().rstrip(".")
    for tail in _PARAPHRASE_TAILS:
        variants.append(stem + tail)
    return variants[:k]


@dataclass
class ClientSuite:
    """Pluggable external services with deterministic toy defaults."""

    text_generator: Callable[[EmotionCategory, np.random.Generator], tuple[str, str]]
    speech_synthesizer: Callable[[str, str, EmotionCategory, str], list[int]]
    transcriber: Callable[[Sequence[int]], str]
    paraphraser: Callable[[str, int], list[str]]

    @classmethod
    def toy(cls) -> "ClientSuite":
        return cls(
            text_generator=toy_text_generator,
            speech_synthesizer=toy_speech_synthesizer,
            transcriber=toyspeech.toy_transcribe,
            paraphraser=toy_paraphraser,
        )


@dataclass
class PipelineConfig:
    per_emotion: int
    wer_threshold: float = DEFAULT_WER_THRESHOLD
    retry_cap: int = DEFAULT_RETRY_CAP
    seed: int = 0

    def __post_init__(self) -> None:
        if self.per_emotion < 1:
            raise ValueError("per_emotion must be >= 1")
        if self.wer_threshold < 0:
            raise ValueError("wer_threshold must be >= 0")
        if self.retry_cap < 1:
            raise ValueError("retry_cap must be >= 1")


def run_pipeline(config: PipelineConfig, clients: Optional[ClientSuite] = None) -> list[ManifestEntry]:
    """Generate, synthesize, transcribe and WER-filter a manifest."""
    clients = clients or ClientSuite.toy()
    rng = np.random.default_rng(config.seed)
    entries: list[ManifestEntry] = []
    dropped = 0
    speaker_cursor = 0
    for emotion in EmotionCategory:
        for index in range(config.per_emotion):
            for attempt in range(config.retry_cap):
                text, description = clients.text_generator(emotion, rng)
                if not validate_text(text) and not validate_description(description):
                    break
            else:
                raise PipelineError(
                    f"{emotion.label}: no valid (text, description) pair after "
                    f"{config.retry_cap} attempts for item {index}"
                )
            speaker = SPEAKERS[speaker_cursor % len(SPEAKERS)]
            speaker_cursor += 1
            tokens = clients.speech_synthesizer(text, description, emotion, speaker)
            transcript = clients.transcriber(tokens)
            sample_wer = metrics.wer(text, transcript)
            if sample_wer > config.wer_threshold:
                dropped += 1
                continue
            entries.append(
                ManifestEntry(
                    id=f"{emotion.label}-{index:04d}",
                    text=text,
                    emotion=emotion,
                    description=description,
                    speaker=speaker,
                    phonemes=toyspeech.phonemes_to_str(toyspeech.g2p(text)),
                    audio_tokens=tokens,
                    wer=sample_wer,
                )
            )
    if dropped:
        log.info("pipeline dropped %d entries above WER threshold %s", dropped, config.wer_threshold)
    entries.sort(key=lambda e: e.id)
    return entries


def augment_descriptions(
    entries: Sequence[ManifestEntry],
    paraphraser: Optional[Callable[[str, int], list[str]]] = None,
    k: int = 2,
) -> list[ManifestEntry]:
    """Attach up to ``k`` validated paraphrases to every entry."""
    paraphraser = paraphraser or toy_paraphraser
    out = []
    for entry in entries:
        if k == 0:
            out.append(entry)
            continue
        try:
            variants = paraphraser(entry.description, k)
        except Exception as exc:  # noqa: BLE001 - adapter boundary
            log.warning("paraphraser failed for %s: %s", entry.id, exc)
            variants = []
        kept = [v for v in variants if not validate_description(v)]
        if len(kept) < len(variants):
            log.warning("entry %s: %d paraphrases failed validation", entry.id, len(variants) - len(kept))
        out.append(replace(entry, description_variants=kept))
    return out


def stats(entries: Sequence[ManifestEntry]) -> dict[str, dict]:
    """Per-emotion counts and duration hours, with a total row."""
    table = {cat.label: {"count": 0, "hours": 0.0} for cat in EmotionCategory}
    for entry in entries:
        bucket = table[entry.emotion.label]
        bucket["count"] += 1
        bucket["hours"] += entry.duration_seconds / 3600.0
    table["total"] = {
        "count": sum(row["count"] for row in table.values()),
        "hours": sum(row["hours"] for row in table.values()),
    }
    return table


def format_stats_table(table: dict[str, dict]) -> str:
    header = ["Emotion", "Count", "Duration (h)"]
    body = [
        [label, str(row["count"]), f"{row['hours']:.2f}"]
        for label, row in table.items()
    ]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(3)]
    lines = ["  ".join(c.ljust(widths[i]) for i, c in enumerate(row)).rstrip() for row in [header] + body]
    lines.insert(1, "-" * len(lines[0]))
    lines.insert(len(lines) - 1, "-" * len(lines[0]))
    return "\n".join(lines)


def split(
    entries: Sequence[ManifestEntry],
    per_emotion_test: int = 100,
    per_emotion_val: int = 50,
    seed: int = 0,
) -> list[ManifestEntry]:
    """Assign disjoint test/val/train splits per emotion, seeded."""
    rng = np.random.default_rng(seed)
    out: list[ManifestEntry] = []
    by_emotion: dict[EmotionCategory, list[ManifestEntry]] = {cat: [] for cat in EmotionCategory}
    for entry in entries:
        by_emotion[entry.emotion].append(entry)
    need = per_emotion_test + per_emotion_val
    for emotion in EmotionCategory:
        group = sorted(by_emotion[emotion], key=lambda e: e.id)
        if not group:
            continue
        if len(group) < need:
            raise DataError(
                f"category {emotion.label!r} has {len(group)} entries, needs >= {need} for the split"
            )
        order = rng.permutation(len(group))
        for rank, idx in enumerate(order):
            if rank < per_emotion_test:
                assigned = "test"
            elif rank < need:
                assigned = "val"
            else:
                assigned = "train"
            out.append(replace(group[idx], split=assigned))
    out.sort(key=lambda e: e.id)
    return out


# ---------------------------------------------------------------------------
# Toy corpora for training and stress evaluation

WORD_BANK = (
    "cat", "dog", "sun", "moon", "rain", "wind", "star", "leaf",
    "bird", "song", "wave", "fire", "snow", "tree", "road", "stone",
    "cloud", "river", "night", "day", "sea", "hill", "grass", "lamp",
)


def _bank_text(rng: np.random.Generator, n_words: int) -> str:
    return " ".join(WORD_BANK[int(rng.integers(0, len(WORD_BANK)))] for _ in range(n_words))


def tiny_corpus(
    n_utterances: int,
    seed: int = 0,
    words_per_text: tuple[int, int] = (2, 3),
    emotions: Sequence[EmotionCategory] = tuple(EmotionCategory),
    prefix: str = "tiny",
) -> list[ManifestEntry]:
    """Small word-bank corpus for trainer demos and overfit checks."""
    rng = np.random.default_rng(seed)
    lo, hi = words_per_text
    entries = []
    for i in range(n_utterances):
        emotion = emotions[i % len(emotions)]
        text = _bank_text(rng, int(rng.integers(lo, hi + 1)))
        phonemes = toyspeech.g2p(text)
        entries.append(
            ManifestEntry(
                id=f"{prefix}-{i:04d}",
                text=text,
                emotion=emotion,
                description=SHORT_DESCRIPTIONS[emotion],
                speaker=SPEAKERS[i % len(SPEAKERS)],
                phonemes=toyspeech.phonemes_to_str(phonemes),
                audio_tokens=toyspeech.toy_synthesize(phonemes, emotion),
                wer=0.0,
            )
        )
    return entries


def hard_case_corpus(n_utterances: int = 16, seed: int = 1) -> list[ManifestEntry]:
    """Stress set: longer texts, immediate word repeats, mismatched descriptions."""
    rng = np.random.default_rng(seed)
    categories = list(EmotionCategory)
    entries = []
    for i in range(n_utterances):
        emotion = categories[i % len(categories)]
        words = [WORD_BANK[int(rng.integers(0, len(WORD_BANK)))] for _ in range(int(rng.integers(5, 8)))]
        # Force an immediate repetition, the classic decoder stumble.
        dup = int(rng.integers(0, len(words)))
        words.insert(dup, words[dup])
        text = " ".join(words)
        # Description deliberately borrowed from a different category.
        other = categories[(i + 3) % len(categories)]
        description = DESCRIPTION_BANK[other][int(rng.integers(0, len(DESCRIPTION_BANK[other])))]
        phonemes = toyspeech.g2p(text)
        entries.append(
            ManifestEntry(
                id=f"hard-{i:04d}",
                text=text,
                emotion=emotion,
                description=description,
                speaker=SPEAKERS[i % len(SPEAKERS)],
                phonemes=toyspeech.phonemes_to_str(phonemes),
                audio_tokens=toyspeech.toy_synthesize(phonemes, emotion),
                split="test",
            )
        )
    return entries
