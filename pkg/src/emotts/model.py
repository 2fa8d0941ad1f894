"""Causal transformer with grouped audio prediction and output-structure variants.

One backbone serves six output structures:

* ``audio``  - audio token groups only
* ``pp``/``pt`` - audio groups plus a parallel phoneme/text guidance head
* ``sp``/``st`` - a single stream of guidance ids, BOUNDARY, then audio ids
* ``i``      - a single stream interleaving text and audio runs (12:36)

Grouped variants predict G audio tokens per step by projecting the audio
slice of the logits through a linear group head; the input at each step
is the mean embedding of the previous group (plus the previous guidance
token for parallel variants). Single-stream variants predict one joint
vocabulary token per step and ignore the group head entirely.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence

import torch
from torch import nn

from .vocab import LayoutError, VocabLayout, slice_logits


class VariantKind(Enum):
    AUDIO_ONLY = "audio"
    PARALLEL_PHONEME = "pp"
    PARALLEL_TEXT = "pt"
    SERIAL_PHONEME = "sp"
    SERIAL_TEXT = "st"
    INTERLEAVED = "i"


@dataclass(frozen=True)
class Variant:
    """Output structure plus the interleave run lengths where relevant."""

    kind: VariantKind
    text_run: int = 12
    audio_run: int = 36

    def __post_init__(self) -> None:
        if self.kind is VariantKind.INTERLEAVED and (self.text_run <= 0 or self.audio_run <= 0):
            raise ValueError("interleave run lengths must be positive")

    @classmethod
    def parse(cls, name: str) -> "Variant":
        key = name.strip().lower()
        aliases = {
            "audio": VariantKind.AUDIO_ONLY,
            "audio-only": VariantKind.AUDIO_ONLY,
            "pp": VariantKind.PARALLEL_PHONEME,
            "pt": VariantKind.PARALLEL_TEXT,
            "sp": VariantKind.SERIAL_PHONEME,
            "st": VariantKind.SERIAL_TEXT,
            "i": VariantKind.INTERLEAVED,
            "interleaved": VariantKind.INTERLEAVED,
        }
        if key not in aliases:
            raise ValueError(f"unknown variant {name!r} (expected one of {sorted(aliases)})")
        return cls(kind=aliases[key])

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def is_parallel(self) -> bool:
        return self.kind in (VariantKind.PARALLEL_PHONEME, VariantKind.PARALLEL_TEXT)

    @property
    def is_serial(self) -> bool:
        return self.kind in (VariantKind.SERIAL_PHONEME, VariantKind.SERIAL_TEXT)

    @property
    def single_stream(self) -> bool:
        return self.is_serial or self.kind is VariantKind.INTERLEAVED

    @property
    def uses_group_head(self) -> bool:
        return not self.single_stream

    @property
    def guidance(self) -> str:
        """Content of the guidance stream: 'none', 'phoneme' or 'text'."""
        return {
            VariantKind.AUDIO_ONLY: "none",
            VariantKind.PARALLEL_PHONEME: "phoneme",
            VariantKind.PARALLEL_TEXT: "text",
            VariantKind.SERIAL_PHONEME: "phoneme",
            VariantKind.SERIAL_TEXT: "text",
            VariantKind.INTERLEAVED: "text",
        }[self.kind]

    @property
    def needs_phoneme_block(self) -> bool:
        return self.kind is not VariantKind.AUDIO_ONLY


@dataclass
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    feedforward_dim: int
    group_size: int
    variant: Variant
    layout: VocabLayout
    max_seq_len: int = 512
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.d_model, self.n_layers, self.n_heads, self.feedforward_dim) < 1:
            raise ValueError("model dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        if self.variant.needs_phoneme_block and not self.layout.has_phonemes:
            raise LayoutError(f"variant {self.variant.name!r} needs a layout with a phoneme block")
        if not self.variant.needs_phoneme_block and self.layout.has_phonemes:
            raise LayoutError("audio-only variant uses the base layout (no phoneme block)")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "feedforward_dim": self.feedforward_dim,
            "group_size": self.group_size,
            "variant": {
                "kind": self.variant.kind.value,
                "text_run": self.variant.text_run,
                "audio_run": self.variant.audio_run,
            },
            "layout": json.loads(self.layout.to_json()),
            "max_seq_len": self.max_seq_len,
            "dtype": self.dtype,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        variant = Variant(
            kind=VariantKind(raw["variant"]["kind"]),
            text_run=raw["variant"]["text_run"],
            audio_run=raw["variant"]["audio_run"],
        )
        layout = VocabLayout.from_json(json.dumps(raw["layout"]))
        return cls(
            d_model=raw["d_model"],
            n_layers=raw["n_layers"],
            n_heads=raw["n_heads"],
            feedforward_dim=raw["feedforward_dim"],
            group_size=raw["group_size"],
            variant=variant,
            layout=layout,
            max_seq_len=raw["max_seq_len"],
            dtype=raw["dtype"],
            seed=raw["seed"],
        )


@dataclass
class StepLogits:
    """Per-step prediction scores, split according to the variant."""

    audio_slots: Optional[torch.Tensor] = None  # (G, |V_a|)
    guidance: Optional[torch.Tensor] = None     # (|V_t'|,)
    joint: Optional[torch.Tensor] = None        # (|V_j|,) for single-stream variants


class GroupHead(nn.Module):
    """Linear map from audio logits of length |V_a| to G slot distributions."""

    def __init__(self, audio_size: int, group_size: int, dtype: torch.dtype):
        super().__init__()
        self.audio_size = audio_size
        self.group_size = group_size
        self.proj = nn.Linear(audio_size, audio_size * group_size, dtype=dtype)

    def forward(self, audio_logits: torch.Tensor) -> torch.Tensor:
        """(..., |V_a|) -> (..., G, |V_a|), slot g in row g."""
        if audio_logits.shape[-1] != self.audio_size:
            raise LayoutError(
                f"audio logits have size {audio_logits.shape[-1]}, expected {self.audio_size}"
            )
        out = self.proj(audio_logits)
        return out.view(*audio_logits.shape[:-1], self.group_size, self.audio_size)

    def project(self, audio_logits: torch.Tensor) -> torch.Tensor:
        """Single-vector form: (|V_a|,) -> (|V_a|, G) with slots as columns."""
        return self.forward(audio_logits).transpose(-1, -2)


class _Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dtype: torch.dtype):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model, dtype=dtype)
        self.out = nn.Linear(d_model, d_model, dtype=dtype)

    def forward(self, x: torch.Tensor, causal_mask: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(causal_mask[:t, :t], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(y)


class _Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d_model: int, n_heads: int, ff_dim: int, dtype: torch.dtype):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model, dtype=dtype)
        self.attn = _Attention(d_model, n_heads, dtype)
        self.ln2 = nn.LayerNorm(d_model, dtype=dtype)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_dim, dtype=dtype),
            nn.GELU(),
            nn.Linear(ff_dim, d_model, dtype=dtype),
        )

    def forward(self, x: torch.Tensor, causal_mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), causal_mask)
        x = x + self.ff(self.ln2(x))
        return x


class SpeechLm(nn.Module):
    """Toy causal LM over the joint vocabulary with an optional group head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.layout = config.layout
        self.variant = config.variant
        dtype = config.torch_dtype
        joint = config.layout.joint_size
        self.embed = nn.Embedding(joint, config.d_model, dtype=dtype)
        self.pos = nn.Embedding(config.max_seq_len, config.d_model, dtype=dtype)
        self.blocks = nn.ModuleList(
            _Block(config.d_model, config.n_heads, config.feedforward_dim, dtype)
            for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(config.d_model, dtype=dtype)
        self.lm_head = nn.Linear(config.d_model, joint, dtype=dtype)
        self.group_head = (
            GroupHead(config.layout.audio_size, config.group_size, dtype)
            if config.variant.uses_group_head
            else None
        )
        mask = torch.triu(torch.ones(config.max_seq_len, config.max_seq_len, dtype=torch.bool), 1)
        self.register_buffer("causal_mask", mask)
        self._init_parameters(config.seed)

    def _init_parameters(self, seed: int) -> None:
        # Fan-in scaled uniform init from a dedicated generator so that
        # construction never touches global RNG state.
        gen = torch.Generator().manual_seed(seed)

        def uniform_(tensor: torch.Tensor, fan_in: int) -> None:
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                tensor.copy_(
                    (torch.rand(tensor.shape, generator=gen, dtype=torch.float64) * 2 - 1)
                    .mul(bound)
                    .to(tensor.dtype)
                )

        for name, p in self.named_parameters():
            if "ln" in name or "norm" in name.lower():
                with torch.no_grad():
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                with torch.no_grad():
                    p.zero_()
            elif p.dim() == 2:
                uniform_(p, p.shape[1])
            else:
                uniform_(p, self.config.d_model)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        """(B, T, d) input embeddings -> (B, T, |V_j|) logits, causal."""
        if embeddings.dim() != 3 or embeddings.shape[-1] != self.config.d_model:
            raise LayoutError(f"expected (B, T, {self.config.d_model}) embeddings")
        t = embeddings.shape[1]
        if t > self.config.max_seq_len:
            raise LayoutError(f"sequence length {t} exceeds max_seq_len {self.config.max_seq_len}")
        positions = torch.arange(t)
        x = embeddings + self.pos(positions)[None, :, :]
        for block in self.blocks:
            x = block(x, self.causal_mask)
        return self.lm_head(self.ln_f(x))

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.layout.joint_size):
            raise LayoutError("token id outside the joint vocabulary")
        return self.embed(ids)

    def embed_step(self, audio_group: Sequence[int], guidance_token: Optional[int] = None) -> torch.Tensor:
        """Fused input embedding for one decode step.

        Mean over the G audio-token embeddings, and over G+1 vectors when
        a guidance token is supplied (parallel variants).
        """
        for t in audio_group:
            if not self.layout.in_audio(t):
                raise LayoutError(f"id {t} not in the audio partition")
        vectors = [self.embed(torch.tensor(list(audio_group)))]
        if guidance_token is not None:
            if not self.layout.in_guidance(guidance_token):
                raise LayoutError(f"id {guidance_token} not in the guidance partition")
            vectors.append(self.embed(torch.tensor([guidance_token])))
        stacked = torch.cat(vectors, dim=0)
        return stacked.mean(dim=0)

    def audio_slot_logits(self, logits: torch.Tensor) -> torch.Tensor:
        """(..., |V_j|) -> (..., G, |V_a|) through the group head."""
        if self.group_head is None:
            raise LayoutError(f"variant {self.variant.name!r} has no group head")
        return self.group_head(logits[..., self.layout.audio_offset :])

    def step_logits(self, row: torch.Tensor) -> StepLogits:
        """Split one position's logits row according to the variant."""
        if row.shape != (self.layout.joint_size,):
            raise LayoutError(f"expected a ({self.layout.joint_size},) logits row, got {tuple(row.shape)}")
        if self.variant.single_stream:
            return StepLogits(joint=row)
        guidance_part, audio_part = slice_logits(row, self.layout)
        assert self.group_head is not None
        slots = self.group_head(audio_part)
        guidance = guidance_part if self.variant.is_parallel else None
        return StepLogits(audio_slots=slots, guidance=guidance)

    def snapshot(self) -> "SpeechLm":
        """Deep copy for sharing an immutable model across generations."""
        clone = SpeechLm(replace(self.config))
        clone.load_state_dict(self.state_dict())
        clone.eval()
        return clone


CHECKPOINT_FORMAT = "emotts-ckpt-v1"


def save_checkpoint(model: SpeechLm, path: str, extra: Optional[dict] = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str) -> tuple[SpeechLm, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    config = ModelConfig.from_dict(payload["config"])
    model = SpeechLm(config)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload.get("extra", {})


def check_layout_compatible(model: SpeechLm, layout: VocabLayout) -> None:
    """Fail fast when a checkpoint and a dataset disagree on geometry."""
    if model.layout != layout:
        raise LayoutError(
            "checkpoint layout "
            f"(text={model.layout.text_size}, phoneme={model.layout.phoneme_size}, audio={model.layout.audio_size}) "
            f"does not match expected (text={layout.text_size}, phoneme={layout.phoneme_size}, audio={layout.audio_size})"
        )
