"""Teacher-forcing targets, multi-stream loss, schedule and training loop.

Grouped variants (audio / pp / pt) train on a sequence of decode steps:
``ceil(L/G)`` content groups followed by one stop group whose first slot
is AUDIO_EOS. Parallel variants add a guidance stream (phonemes or text
characters, then PHONEME_EOS, then PHONEME_PAD padding) aligned one
guidance token per decode step. Single-stream variants (sp / st / i)
train as plain next-token prediction over their concatenated stream
plus a terminal AUDIO_EOS.

The loss is mean cross-entropy over unmasked positions per stream;
parallel variants add the two stream means under configurable weights
(1.0 / 1.0 by default). ``grad_check`` verifies the whole computation
against central finite differences in float64.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import DataError, ManifestEntry
from .model import ModelConfig, SpeechLm, Variant, save_checkpoint
from .toyspeech import str_to_phonemes
from .vocab import PromptRecord, VocabLayout, encode_text, format_prompt

PHASES = ("pretrain", "finetune")
DEFAULT_PEAK_LR = {"pretrain": 1e-4, "finetune": 1e-5}


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, batch_ids: Sequence[str], value: float):
        super().__init__(f"non-finite loss {value} at step {step}; batch entries: {list(batch_ids)}")
        self.step = step
        self.batch_ids = list(batch_ids)


@dataclass
class TrainConfig:
    phase: str
    total_steps: int
    peak_lr: Optional[float] = None
    warmup_steps: int = 1000
    batch_size: int = 6
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0
    stream_weights: tuple[float, float] = (1.0, 1.0)
    checkpoint_interval: Optional[int] = None
    checkpoint_dir: Optional[str] = None
    log_path: Optional[str] = None

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.peak_lr is None:
            self.peak_lr = DEFAULT_PEAK_LR[self.phase]
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def lr_at(step: int, config: TrainConfig) -> float:
    """Piecewise-linear schedule: 0 -> peak over warmup, peak -> 0 after."""
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    peak = config.peak_lr
    if step <= config.warmup_steps:
        if config.warmup_steps == 0:
            return peak
        return peak * step / config.warmup_steps
    return peak * (config.total_steps - step) / (config.total_steps - config.warmup_steps)


# ---------------------------------------------------------------------------
# Target construction


@dataclass
class TokenStreams:
    """Per-utterance teacher-forcing streams (joint-vocabulary ids).

    ``audio_groups`` holds exactly ceil(L/G) content groups with an
    AUDIO_PAD tail; the trained stop group is appended by
    :func:`step_targets`, not stored here. ``guidance`` is padded to the
    full decode-step count (content steps plus the stop step).
    ``serial_stream`` holds the single concatenated stream for serial
    and interleaved variants, without the terminal AUDIO_EOS.
    """

    audio_groups: Optional[list[list[int]]] = None
    audio_mask: Optional[list[list[bool]]] = None
    guidance: Optional[list[int]] = None
    guidance_mask: Optional[list[bool]] = None
    serial_stream: Optional[list[int]] = None

    @property
    def n_decode_steps(self) -> int:
        """Content groups plus the stop step, which shares the final group
        whenever that group has a free (padded) slot for AUDIO_EOS."""
        if self.audio_groups is None:
            raise ValueError("single-stream targets have no decode-step count")
        if self.audio_groups and not all(self.audio_mask[-1]):
            return len(self.audio_groups)
        return len(self.audio_groups) + 1


def _interleave(text_ids: list[int], audio_ids: list[int], text_run: int, audio_run: int) -> list[int]:
    """Alternate runs of text and audio ids; dump the remainder when one side ends."""
    out: list[int] = []
    ti, ai = 0, 0
    take_text = True
    while ti < len(text_ids) and ai < len(audio_ids):
        if take_text:
            out.extend(text_ids[ti : ti + text_run])
            ti += text_run
        else:
            out.extend(audio_ids[ai : ai + audio_run])
            ai += audio_run
        take_text = not take_text
    out.extend(text_ids[ti:])
    out.extend(audio_ids[ai:])
    return out


def build_targets(entry: ManifestEntry, variant: Variant, layout: VocabLayout, group_size: int) -> TokenStreams:
    """Teacher-forcing streams for one manifest entry under one variant."""
    audio_abs = [layout.audio_abs(t) for t in entry.audio_tokens]

    if variant.guidance == "phoneme":
        guidance_content = [layout.phoneme_abs(p) for p in str_to_phonemes(entry.phonemes)]
    elif variant.guidance == "text":
        guidance_content = encode_text(entry.text)
    else:
        guidance_content = []

    if variant.single_stream:
        if variant.is_serial:
            stream = guidance_content + [layout.boundary] + audio_abs
        else:
            stream = _interleave(
                guidance_content + [layout.text_eos],
                audio_abs,
                variant.text_run,
                variant.audio_run,
            )
        return TokenStreams(serial_stream=stream)

    n_groups = math.ceil(len(audio_abs) / group_size)
    groups: list[list[int]] = []
    mask: list[list[bool]] = []
    for g in range(n_groups):
        chunk = audio_abs[g * group_size : (g + 1) * group_size]
        pad = group_size - len(chunk)
        groups.append(chunk + [layout.audio_pad] * pad)
        mask.append([True] * len(chunk) + [False] * pad)

    guidance = None
    guidance_mask = None
    if variant.is_parallel:
        budget = n_groups + 1 if len(audio_abs) % group_size == 0 else n_groups
        with_eos = guidance_content + [layout.phoneme_eos]
        if len(with_eos) > budget:
            raise DataError(
                f"entry {entry.id}: guidance stream of {len(with_eos)} ids exceeds "
                f"the decode-step budget {budget}"
            )
        guidance = with_eos + [layout.phoneme_pad] * (budget - len(with_eos))
        guidance_mask = [True] * len(with_eos) + [False] * (budget - len(with_eos))

    return TokenStreams(
        audio_groups=groups,
        audio_mask=mask,
        guidance=guidance,
        guidance_mask=guidance_mask,
    )


@dataclass
class StepTargets:
    """Dense target arrays, stop signal included."""

    groups: Optional[np.ndarray] = None          # (S+1, G) absolute ids
    audio_mask: Optional[np.ndarray] = None      # (S+1, G) bool
    guidance: Optional[np.ndarray] = None        # (S+1,) absolute ids
    guidance_mask: Optional[np.ndarray] = None   # (S+1,) bool
    stream: Optional[np.ndarray] = None          # (K,) absolute ids incl. AUDIO_EOS


def step_targets(streams: TokenStreams, layout: VocabLayout, group_size: int) -> StepTargets:
    if streams.serial_stream is not None:
        stream = np.array(streams.serial_stream + [layout.audio_eos], dtype=np.int64)
        return StepTargets(stream=stream)
    assert streams.audio_groups is not None and streams.audio_mask is not None
    groups = [list(g) for g in streams.audio_groups]
    mask = [list(m) for m in streams.audio_mask]
    # AUDIO_EOS takes the first free slot of the final group. Any slot
    # after the EOS stays masked: generation discards everything past the
    # EOS inside a group, so those positions never surface.
    if groups and not all(mask[-1]):
        slot = mask[-1].index(False)
        groups[-1][slot] = layout.audio_eos
        mask[-1][slot] = True
    else:
        groups.append([layout.audio_eos] + [layout.audio_pad] * (group_size - 1))
        mask.append([True] + [False] * (group_size - 1))
    guidance = guidance_mask = None
    if streams.guidance is not None:
        guidance = np.array(streams.guidance, dtype=np.int64)
        guidance_mask = np.array(streams.guidance_mask, dtype=bool)
    return StepTargets(
        groups=np.array(groups, dtype=np.int64),
        audio_mask=np.array(mask, dtype=bool),
        guidance=guidance,
        guidance_mask=guidance_mask,
    )


def prompt_token_ids(text: str, description: str, phase: str, layout: VocabLayout) -> list[int]:
    """Prompt ids for one utterance: rendered template plus TEXT_EOS."""
    if phase == "pretrain":
        record = PromptRecord(mode="pretrain", description="", text=text)
    else:
        record = PromptRecord(mode="emotion", description=description, text=text)
    return format_prompt(record) + [layout.text_eos]


@dataclass
class Example:
    """Everything the trainer needs for one utterance."""

    entry_id: str
    prompts: list[np.ndarray]  # one per description variant; index 0 primary
    streams: TokenStreams
    targets: StepTargets


def build_example(
    entry: ManifestEntry,
    variant: Variant,
    layout: VocabLayout,
    group_size: int,
    phase: str,
) -> Example:
    streams = build_targets(entry, variant, layout, group_size)
    descriptions = entry.all_descriptions if phase == "finetune" else [entry.description]
    prompts = [
        np.array(prompt_token_ids(entry.text, d, phase, layout), dtype=np.int64)
        for d in descriptions
    ]
    return Example(
        entry_id=entry.id,
        prompts=prompts,
        streams=streams,
        targets=step_targets(streams, layout, group_size),
    )


def build_examples(
    entries: Sequence[ManifestEntry],
    variant: Variant,
    layout: VocabLayout,
    group_size: int,
    phase: str,
) -> list[Example]:
    return [build_example(e, variant, layout, group_size, phase) for e in entries]


# ---------------------------------------------------------------------------
# Loss


@dataclass
class StepOutputs:
    """Model outputs aligned to one example's decode steps."""

    audio_slots: Optional[torch.Tensor] = None  # (S+1, G, |V_a|)
    guidance: Optional[torch.Tensor] = None     # (S+1, |V_t'|)
    stream: Optional[torch.Tensor] = None       # (K, |V_j|)


@dataclass
class LossParts:
    total: torch.Tensor
    streams: dict[str, float]


def _masked_ce(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Sum cross-entropy over masked-in positions; returns (sum, count)."""
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_targets = targets.reshape(-1)
    flat_mask = mask.reshape(-1)
    count = int(flat_mask.sum().item())
    if count == 0:
        return logits.new_zeros(()), 0
    picked = flat_mask.nonzero(as_tuple=True)[0]
    ce = F.cross_entropy(flat_logits[picked], flat_targets[picked], reduction="sum")
    return ce, count


def multi_stream_loss(
    outputs: Sequence[StepOutputs],
    examples: Sequence[Example],
    layout: VocabLayout,
    weights: tuple[float, float] = (1.0, 1.0),
) -> LossParts:
    """Mean cross-entropy per stream over a batch, combined by weight.

    Audio targets are scored against the G slot distributions (codec-
    relative ids), guidance targets against the guidance slice, and
    single-stream targets against the full joint vocabulary. PAD
    positions are masked out. An all-masked batch is an error.
    """
    audio_sum = guidance_sum = stream_sum = None
    audio_n = guidance_n = stream_n = 0
    for out, ex in zip(outputs, examples):
        t = ex.targets
        if t.stream is not None:
            assert out.stream is not None
            targets = torch.from_numpy(t.stream)
            ce = F.cross_entropy(out.stream, targets, reduction="sum")
            stream_sum = ce if stream_sum is None else stream_sum + ce
            stream_n += len(t.stream)
            continue
        assert out.audio_slots is not None and t.groups is not None
        rel = torch.from_numpy(t.groups - layout.audio_offset)
        ce, n = _masked_ce(out.audio_slots, rel, torch.from_numpy(t.audio_mask))
        audio_sum = ce if audio_sum is None else audio_sum + ce
        audio_n += n
        if t.guidance is not None:
            assert out.guidance is not None
            ce, n = _masked_ce(out.guidance, torch.from_numpy(t.guidance), torch.from_numpy(t.guidance_mask))
            guidance_sum = ce if guidance_sum is None else guidance_sum + ce
            guidance_n += n

    if stream_n:
        mean = stream_sum / stream_n
        return LossParts(total=mean, streams={"serial": float(mean.item())})
    if audio_n == 0:
        raise ValueError("all audio targets in the batch are masked out")
    w_audio, w_guidance = weights
    audio_mean = audio_sum / audio_n
    total = w_audio * audio_mean
    streams = {"audio": float(audio_mean.item())}
    if guidance_n:
        guidance_mean = guidance_sum / guidance_n
        total = total + w_guidance * guidance_mean
        streams["guidance"] = float(guidance_mean.item())
    return LossParts(total=total, streams=streams)


def _assemble_embeddings(model: SpeechLm, example: Example, prompt_idx: int) -> tuple[torch.Tensor, int, int]:
    """Input embedding sequence for one example.

    Returns (embeddings (T, d), first prediction position, step count).
    Prediction positions are contiguous starting at len(prompt) - 1.
    """
    prompt = torch.from_numpy(example.prompts[prompt_idx])
    parts = [model.embed_tokens(prompt)]
    t = example.targets
    if t.stream is not None:
        n_pred = len(t.stream)
        if n_pred > 1:
            parts.append(model.embed_tokens(torch.from_numpy(t.stream[:-1])))
    else:
        n_pred = t.groups.shape[0]
        content = t.groups[:-1]
        if len(content):
            group_emb = model.embed_tokens(torch.from_numpy(content)).mean(dim=1)
            if t.guidance is not None:
                g = model.config.group_size
                guid_emb = model.embed_tokens(torch.from_numpy(t.guidance[: len(content)]))
                group_emb = (group_emb * g + guid_emb) / (g + 1)
            parts.append(group_emb)
    emb = torch.cat(parts, dim=0)
    return emb, len(prompt) - 1, n_pred


def teacher_forced_outputs(
    model: SpeechLm,
    examples: Sequence[Example],
    prompt_choices: Optional[Sequence[int]] = None,
) -> list[StepOutputs]:
    """Batched forward pass; returns per-example step-aligned outputs."""
    if not examples:
        raise ValueError("empty batch")
    choices = list(prompt_choices) if prompt_choices is not None else [0] * len(examples)
    assembled = [_assemble_embeddings(model, ex, idx) for ex, idx in zip(examples, choices)]
    t_max = max(emb.shape[0] for emb, _, _ in assembled)
    batch = torch.zeros(len(examples), t_max, model.config.d_model, dtype=model.config.torch_dtype)
    for i, (emb, _, _) in enumerate(assembled):
        batch[i, : emb.shape[0]] = emb
    logits = model(batch)
    outputs = []
    for i, (ex, (_, start, n_pred)) in enumerate(zip(examples, assembled)):
        rows = logits[i, start : start + n_pred]
        if ex.targets.stream is not None:
            outputs.append(StepOutputs(stream=rows))
        else:
            slots = model.audio_slot_logits(rows)
            guidance = rows[..., : model.layout.guidance_size] if ex.targets.guidance is not None else None
            outputs.append(StepOutputs(audio_slots=slots, guidance=guidance))
    return outputs


def teacher_forced_loss(
    model: SpeechLm,
    examples: Sequence[Example],
    prompt_choices: Optional[Sequence[int]] = None,
    weights: tuple[float, float] = (1.0, 1.0),
) -> LossParts:
    outputs = teacher_forced_outputs(model, examples, prompt_choices)
    return multi_stream_loss(outputs, examples, model.layout, weights)


def token_accuracy(model: SpeechLm, examples: Sequence[Example]) -> float:
    """Teacher-forced exact-match rate over unmasked target positions."""
    correct = 0
    total = 0
    with torch.no_grad():
        for chunk_start in range(0, len(examples), 16):
            chunk = examples[chunk_start : chunk_start + 16]
            outputs = teacher_forced_outputs(model, chunk)
            for out, ex in zip(outputs, chunk):
                t = ex.targets
                if t.stream is not None:
                    pred = out.stream.argmax(dim=-1).numpy()
                    correct += int((pred == t.stream).sum())
                    total += len(t.stream)
                else:
                    pred = out.audio_slots.argmax(dim=-1).numpy()
                    rel = t.groups - model.layout.audio_offset
                    hit = (pred == rel) & t.audio_mask
                    correct += int(hit.sum())
                    total += int(t.audio_mask.sum())
    return correct / total if total else 0.0


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for record in self.records:
                fh.write(json.dumps(record))
                fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "TrainLog":
        records = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
        return cls(records=records)

    @property
    def final_loss(self) -> float:
        return self.records[-1]["loss"]


def fit(
    model: SpeechLm,
    examples: Sequence[Example],
    config: TrainConfig,
    callbacks: Sequence[Callable[[int, dict], None]] = (),
) -> TrainLog:
    """Train with AdamW under the linear warmup/decay schedule.

    Deterministic given the seed: batch order, description sampling and
    optimizer state all derive from ``config.seed``. Raises
    TrainingDiverged on a non-finite loss.
    """
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    model.train()
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=config.peak_lr,
        betas=config.betas,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    order: list[int] = []
    log = TrainLog()
    for step in range(1, config.total_steps + 1):
        while len(order) < config.batch_size:
            order.extend(rng.permutation(len(examples)).tolist())
        batch_idx = [order.pop(0) for _ in range(config.batch_size)]
        batch = [examples[i] for i in batch_idx]
        choices = [
            int(rng.integers(0, len(ex.prompts))) if len(ex.prompts) > 1 else 0
            for ex in batch
        ]
        lr = lr_at(step, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        parts = teacher_forced_loss(model, batch, choices, config.stream_weights)
        loss_value = float(parts.total.item())
        if not math.isfinite(loss_value):
            raise TrainingDiverged(step, [b.entry_id for b in batch], loss_value)
        optimizer.zero_grad()
        parts.total.backward()
        optimizer.step()
        record = {"step": step, "lr": lr, "loss": loss_value, "streams": parts.streams}
        log.records.append(record)
        for cb in callbacks:
            cb(step, record)
        if (
            config.checkpoint_interval
            and config.checkpoint_dir
            and (step % config.checkpoint_interval == 0 or step == config.total_steps)
        ):
            os.makedirs(config.checkpoint_dir, exist_ok=True)
            path = os.path.join(config.checkpoint_dir, f"{config.phase}-{step}.ckpt")
            save_checkpoint(model, path, extra={"step": step, "phase": config.phase})
    model.eval()
    if config.log_path:
        log.save(config.log_path)
    return log


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_coord: tuple[int, ...]
    analytic: float
    numeric: float
    checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    epsilon: float

    @property
    def max_rel_err(self) -> float:
        return max(e.max_rel_err for e in self.entries)

    @property
    def worst(self) -> GradCheckEntry:
        return max(self.entries, key=lambda e: e.max_rel_err)

    def summary(self) -> str:
        w = self.worst
        return (
            f"max rel err {self.max_rel_err:.3e} at {w.name}{list(w.worst_coord)} "
            f"(analytic {w.analytic:.6e}, numeric {w.numeric:.6e}, eps {self.epsilon:g})"
        )


# Relative error floor: keeps finite-difference noise on near-zero
# coordinates from registering while leaving real sign/scale errors
# (which sit orders of magnitude higher) detectable.
_REL_ERR_FLOOR = 1e-2


def grad_check(
    model: SpeechLm,
    examples: Sequence[Example],
    epsilon: float = 1e-4,
    max_coords_per_tensor: Optional[int] = None,
    weights: tuple[float, float] = (1.0, 1.0),
    tamper: Optional[tuple[str, float]] = None,
) -> GradCheckReport:
    """Compare autograd gradients to central finite differences.

    Every parameter tensor is checked, either at all coordinates or at a
    deterministic sample of ``max_coords_per_tensor``. ``tamper`` scales
    one tensor's analytic gradient and exists for mutation-testing the
    checker itself.
    """
    if model.config.dtype != "float64":
        raise ValueError("gradient checks require a float64 model")

    def loss_value() -> torch.Tensor:
        return teacher_forced_loss(model, examples, weights=weights).total

    model.zero_grad()
    loss_value().backward()
    analytic = {
        name: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        for name, p in model.named_parameters()
    }
    if tamper is not None:
        name, scale = tamper
        if name not in analytic:
            raise KeyError(f"no parameter named {name!r}")
        analytic[name] = analytic[name] * scale

    rng = np.random.default_rng(0)
    entries = []
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            n = flat.numel()
            if max_coords_per_tensor is not None and n > max_coords_per_tensor:
                coords = sorted(rng.choice(n, size=max_coords_per_tensor, replace=False).tolist())
            else:
                coords = range(n)
            grad_flat = analytic[name].view(-1)
            worst = (0.0, (0,), 0.0, 0.0)
            checked = 0
            for c in coords:
                original = flat[c].item()
                flat[c] = original + epsilon
                up = loss_value().item()
                flat[c] = original - epsilon
                down = loss_value().item()
                flat[c] = original
                numeric = (up - down) / (2 * epsilon)
                a = grad_flat[c].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), _REL_ERR_FLOOR)
                checked += 1
                if rel > worst[0]:
                    worst = (rel, np.unravel_index(c, p.shape), a, numeric)
            entries.append(
                GradCheckEntry(
                    name=name,
                    max_rel_err=worst[0],
                    worst_coord=tuple(int(i) for i in np.atleast_1d(worst[1])),
                    analytic=worst[2],
                    numeric=worst[3],
                    checked=checked,
                )
            )
    return GradCheckReport(entries=entries, epsilon=epsilon)
