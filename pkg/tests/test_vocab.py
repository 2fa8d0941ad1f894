import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emotts import vocab
from emotts.vocab import (
    CHARSET,
    LayoutError,
    PromptError,
    PromptRecord,
    VocabLayout,
    build_layout,
    decode_text,
    default_layout,
    encode_text,
    format_prompt,
    render_prompt,
    slice_logits,
)


class TestLayout:
    def test_guided_partition_arithmetic(self):
        # |V_t'| = 100 (71 text + 27 phonemes + 2 specials), |V_a| = 50
        layout = build_layout(71, 27, 50)
        assert layout.guidance_size == 100
        assert layout.audio_offset == 100
        assert layout.joint_size == 150

    def test_base_partition_arithmetic(self):
        layout = build_layout(10, 0, 4)
        assert layout.joint_size == 14
        assert layout.audio_offset == 10
        assert not layout.has_phonemes

    def test_zero_text_partition_rejected(self):
        with pytest.raises(LayoutError):
            build_layout(0, 27, 50)

    def test_undersized_audio_partition_rejected(self):
        with pytest.raises(LayoutError):
            build_layout(10, 0, 2)

    def test_negative_phoneme_inventory_rejected(self):
        with pytest.raises(LayoutError):
            build_layout(10, -1, 10)

    def test_special_ids_inside_their_partitions(self):
        layout = default_layout(with_phonemes=True)
        assert layout.in_text(layout.text_eos)
        assert layout.in_text(layout.boundary)
        assert layout.in_guidance(layout.phoneme_eos)
        assert layout.in_guidance(layout.phoneme_pad)
        assert layout.phoneme_eos >= layout.phoneme_offset
        assert layout.in_audio(layout.audio_eos)
        assert layout.in_audio(layout.audio_pad)

    def test_base_layout_has_no_phoneme_specials(self):
        layout = default_layout(with_phonemes=False)
        with pytest.raises(LayoutError):
            _ = layout.phoneme_eos

    def test_audio_id_conversions_round_trip(self):
        layout = default_layout(with_phonemes=True)
        for rel in (0, 7, layout.audio_size - 1):
            assert layout.audio_rel(layout.audio_abs(rel)) == rel
        with pytest.raises(LayoutError):
            layout.audio_abs(layout.audio_size)
        with pytest.raises(LayoutError):
            layout.audio_rel(0)

    def test_json_descriptor_round_trip(self):
        layout = default_layout(with_phonemes=True)
        again = VocabLayout.from_json(layout.to_json())
        assert again == layout
        descriptor = json.loads(layout.to_json())
        assert descriptor["special_ids"]["audio_eos"] == layout.audio_eos


class TestSliceLogits:
    def test_lengths(self):
        layout = build_layout(71, 27, 50)
        row = np.arange(150)
        guidance, audio = slice_logits(row, layout)
        assert len(guidance) == 100 and len(audio) == 50

    def test_base_variant_audio_scores(self):
        layout = build_layout(10, 0, 4)
        row = np.arange(14)
        _, audio = slice_logits(row, layout)
        assert audio.tolist() == [10, 11, 12, 13]

    def test_length_mismatch(self):
        layout = build_layout(71, 27, 50)
        with pytest.raises(LayoutError):
            slice_logits(np.zeros(149), layout)

    @given(st.integers(3, 40), st.integers(0, 10), st.integers(3, 40), st.data())
    @settings(max_examples=50, deadline=None)
    def test_partition_round_trip(self, text, phonemes, audio, data):
        layout = build_layout(text, phonemes, audio)
        row = data.draw(
            st.lists(st.floats(-10, 10), min_size=layout.joint_size, max_size=layout.joint_size)
        )
        row = np.array(row)
        guidance, audio_part = slice_logits(row, layout)
        assert np.concatenate([guidance, audio_part]).tolist() == row.tolist()


class TestTokenizer:
    @given(st.text(alphabet=CHARSET, max_size=60))
    @settings(max_examples=100, deadline=None)
    def test_round_trip_identity(self, text):
        assert decode_text(encode_text(text)) == text

    def test_unsupported_character_named(self):
        with pytest.raises(PromptError, match="U\\+00E9"):
            encode_text("café")


class TestPrompt:
    def test_emotion_template_bytes(self):
        record = PromptRecord(mode="emotion", description="Conveying calm", text="Hello there.")
        assert render_prompt(record) == (
            "<SYSTEM>: Say this sentence with emotion of Conveying calm. \\n Hello there."
        )

    def test_pretrain_template_bytes(self):
        record = PromptRecord(mode="pretrain", description="", text="Hello there.")
        assert render_prompt(record) == "<SYSTEM>: Say this sentence. \\n Hello there."

    def test_emotion_mode_requires_description(self):
        with pytest.raises(PromptError):
            PromptRecord(mode="emotion", description="", text="Hi")

    def test_text_required(self):
        with pytest.raises(PromptError):
            PromptRecord(mode="pretrain", description="", text="")

    def test_reserved_delimiter_rejected(self):
        with pytest.raises(PromptError):
            PromptRecord(mode="emotion", description="odd \\n thing", text="Hi")

    def test_format_prompt_tokenizes_rendering(self):
        record = PromptRecord(mode="pretrain", description="", text="Hi")
        assert decode_text(format_prompt(record)) == render_prompt(record)

    @given(
        st.sampled_from(["pretrain", "emotion"]),
        st.text(alphabet=CHARSET.replace("\\", ""), min_size=1, max_size=20),
        st.text(alphabet=CHARSET.replace("\\", ""), min_size=1, max_size=20),
    )
    @settings(max_examples=200, deadline=None)
    def test_rendering_injective(self, mode, description, text):
        seen = {}
        for m, d, t in [
            (mode, description if mode == "emotion" else "", text),
            ("emotion", text, description),
            ("pretrain", "", description + text),
        ]:
            if m == "emotion" and not d:
                continue
            rendered = render_prompt(PromptRecord(mode=m, description=d, text=t))
            key = (m, d, t)
            if rendered in seen:
                assert seen[rendered] == key
            seen[rendered] = key
