"""Autoregressive generation for every output-structure variant.

Grouped variants emit G audio tokens per forward pass (argmax per slot
after the repetition penalty) and stop when a group contains AUDIO_EOS;
tokens after the EOS are discarded. Parallel variants emit one guidance
token alongside each group and force PHONEME_PAD once the guidance
stream has closed with PHONEME_EOS. Serial variants run one joint-
vocabulary token per pass, switching from the guidance partition to the
audio partition at the BOUNDARY token; the interleaved variant switches
roles on the fixed text:audio run schedule. The repetition penalty
applies to audio scores only, over the full emitted audio history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .model import SpeechLm, StepLogits, VariantKind


@dataclass
class DecodeConfig:
    repetition_penalty: float = 1.2
    max_steps: int = 256
    audio_eos: Optional[int] = None      # override; defaults to the layout id
    guidance_eos: Optional[int] = None   # override; defaults to PHONEME_EOS

    def __post_init__(self) -> None:
        if self.repetition_penalty < 1.0:
            raise ValueError("repetition penalty must be >= 1.0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class GenerationResult:
    """One generated utterance.

    ``audio_tokens`` are joint-vocabulary ids with PAD stripped;
    ``guidance_tokens`` holds the phoneme/text stream (EOS/PAD stripped)
    when the variant produces one. For grouped variants ``step_count``
    is ceil(len(pre-EOS audio stream) / G); for single-stream variants
    it is the number of forward passes.
    """

    audio_tokens: list[int]
    guidance_tokens: Optional[list[int]]
    step_count: int
    stop_reason: str  # "eos" | "max_steps"


def apply_repetition_penalty(scores: np.ndarray, history: Iterable[int], penalty: float) -> np.ndarray:
    """Discount every id seen in the history.

    Positive scores are divided by the penalty, non-positive scores are
    multiplied by it; ids outside the history are untouched.
    """
    if penalty < 1.0:
        raise ValueError("penalty must be >= 1.0")
    out = np.array(scores, dtype=np.float64, copy=True)
    for token in set(history):
        if 0 <= token < len(out):
            if out[token] > 0:
                out[token] /= penalty
            else:
                out[token] *= penalty
    return out


def _argmax(scores: np.ndarray) -> int:
    # numpy argmax returns the first maximum: ties break toward the lowest id.
    return int(np.argmax(scores))


@dataclass
class GreedyChoice:
    audio_ids: list[int]            # codec-relative slot picks
    guidance_id: Optional[int]      # absolute id, parallel variants only


def greedy_step(
    step: StepLogits,
    audio_history: Sequence[int],
    config: DecodeConfig,
    force_guidance: Optional[int] = None,
) -> GreedyChoice:
    """Pick one group (plus optional guidance token) from step logits.

    ``audio_history`` holds codec-relative ids already emitted; all G
    slots share it. ``force_guidance`` overrides the guidance argmax
    (used to pin PHONEME_PAD after the guidance stream has ended).
    """
    if step.audio_slots is None:
        raise ValueError("greedy_step needs grouped audio slots; single-stream decoding selects directly")
    slots = step.audio_slots.detach().to(torch.float64).numpy()
    audio_ids = [
        _argmax(apply_repetition_penalty(slots[g], audio_history, config.repetition_penalty))
        for g in range(slots.shape[0])
    ]
    guidance_id = None
    if step.guidance is not None:
        if force_guidance is not None:
            guidance_id = force_guidance
        else:
            guidance_id = _argmax(step.guidance.detach().to(torch.float64).numpy())
    return GreedyChoice(audio_ids=audio_ids, guidance_id=guidance_id)


def _forward_last_row(model: SpeechLm, embeddings: list[torch.Tensor]) -> torch.Tensor:
    stacked = torch.stack(embeddings, dim=0).unsqueeze(0)
    logits = model(stacked)
    return logits[0, -1]


def generate(model: SpeechLm, prompt_ids: Sequence[int], config: Optional[DecodeConfig] = None) -> GenerationResult:
    """Greedy autoregressive generation from a tokenized prompt."""
    config = config or DecodeConfig()
    layout = model.layout
    for t in prompt_ids:
        if not 0 <= t < layout.joint_size:
            raise ValueError(f"prompt id {t} outside the joint vocabulary")
    if model.variant.single_stream:
        return _generate_single_stream(model, prompt_ids, config)
    return _generate_grouped(model, prompt_ids, config)


def _generate_grouped(model: SpeechLm, prompt_ids: Sequence[int], config: DecodeConfig) -> GenerationResult:
    layout = model.layout
    g = model.config.group_size
    audio_eos_rel = (config.audio_eos if config.audio_eos is not None else layout.audio_eos) - layout.audio_offset
    parallel = model.variant.is_parallel
    guidance_eos = config.guidance_eos if config.guidance_eos is not None else (
        layout.phoneme_eos if parallel else None
    )

    embeddings = [row for row in model.embed_tokens(torch.tensor(list(prompt_ids)))]
    emitted_rel: list[int] = []
    guidance_emitted: list[int] = []
    guidance_done = False
    stop_reason = "max_steps"

    with torch.no_grad():
        for _ in range(config.max_steps):
            row = _forward_last_row(model, embeddings)
            step = model.step_logits(row)
            force = layout.phoneme_pad if (parallel and guidance_done) else None
            choice = greedy_step(step, emitted_rel, config, force_guidance=force)
            emitted_rel.extend(choice.audio_ids)
            if parallel:
                guidance_emitted.append(choice.guidance_id)
                if choice.guidance_id == guidance_eos:
                    guidance_done = True
            if audio_eos_rel in choice.audio_ids:
                stop_reason = "eos"
                break
            group_abs = [layout.audio_offset + r for r in choice.audio_ids]
            embeddings.append(model.embed_step(group_abs, choice.guidance_id if parallel else None))

    if stop_reason == "eos":
        pre_eos = emitted_rel[: emitted_rel.index(audio_eos_rel)]
    else:
        pre_eos = emitted_rel
    audio_pad_rel = layout.audio_pad - layout.audio_offset
    audio_tokens = [layout.audio_offset + r for r in pre_eos if r != audio_pad_rel]
    guidance_tokens = None
    if parallel:
        drop = {guidance_eos, layout.phoneme_pad}
        guidance_tokens = [t for t in guidance_emitted if t not in drop]
    return GenerationResult(
        audio_tokens=audio_tokens,
        guidance_tokens=guidance_tokens,
        step_count=math.ceil(len(pre_eos) / g),
        stop_reason=stop_reason,
    )


def _generate_single_stream(model: SpeechLm, prompt_ids: Sequence[int], config: DecodeConfig) -> GenerationResult:
    layout = model.layout
    variant = model.variant
    audio_eos = config.audio_eos if config.audio_eos is not None else layout.audio_eos
    interleaved = variant.kind is VariantKind.INTERLEAVED

    embeddings = [row for row in model.embed_tokens(torch.tensor(list(prompt_ids)))]
    guidance_out: list[int] = []
    audio_out_abs: list[int] = []
    audio_phase = False          # serial: before/after BOUNDARY
    text_done = False            # interleaved: TEXT_EOS seen
    run_left = variant.text_run  # interleaved run budget
    role_is_text = True
    steps = 0
    stop_reason = "max_steps"

    with torch.no_grad():
        for _ in range(config.max_steps):
            row = _forward_last_row(model, embeddings)
            scores = row.detach().to(torch.float64).numpy()
            if interleaved:
                text_role = role_is_text and not text_done
            else:
                text_role = not audio_phase
            if text_role:
                allowed = slice(0, layout.guidance_size if variant.is_serial else layout.text_size)
            else:
                allowed = slice(layout.audio_offset, layout.joint_size)
                scores = apply_repetition_penalty(scores, audio_out_abs, config.repetition_penalty)
            masked = np.full_like(scores, -np.inf)
            masked[allowed] = scores[allowed]
            token = _argmax(masked)
            steps += 1

            if interleaved:
                run_left -= 1
                if run_left == 0:
                    role_is_text = not role_is_text
                    run_left = variant.text_run if role_is_text else variant.audio_run
                if token == layout.text_eos:
                    text_done = True
                elif token == audio_eos:
                    stop_reason = "eos"
                    break
                elif layout.in_audio(token):
                    audio_out_abs.append(token)
                else:
                    guidance_out.append(token)
            else:
                if not audio_phase and token == layout.boundary:
                    audio_phase = True
                elif token == audio_eos:
                    stop_reason = "eos"
                    break
                elif audio_phase:
                    audio_out_abs.append(token)
                else:
                    guidance_out.append(token)
            embeddings.append(model.embed_tokens(torch.tensor([token]))[0])

    audio_tokens = [t for t in audio_out_abs if t != layout.audio_pad]
    return GenerationResult(
        audio_tokens=audio_tokens,
        guidance_tokens=guidance_out,
        step_count=steps,
        stop_reason=stop_reason,
    )
