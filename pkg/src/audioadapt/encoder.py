"""Stage-1 audio-adaptive encoder.

Small trainable per-clip networks for audio and visual features plus a
transformer attention module that turns the audio clip sequence into a
(0,1) channel gate applied to every visual clip feature before pooling
and classification.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


class EncoderError(ValueError):
    pass


def _probs(logits: torch.Tensor, multilabel: bool) -> torch.Tensor:
    return torch.sigmoid(logits) if multilabel else torch.softmax(logits, dim=-1)


def _transformer(dim: int, depth: int, heads: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        d_model=dim, nhead=heads, dim_feedforward=2 * dim,
        dropout=0.0, activation="gelu", batch_first=True, norm_first=True)
    return nn.TransformerEncoder(layer, num_layers=depth, enable_nested_tensor=False)


class AudioEncoder(nn.Module):
    """Two-layer per-clip audio network with a pooled classification head."""

    def __init__(self, in_dim: int, hidden: int, num_classes: int, multilabel: bool = False):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.head = nn.Linear(hidden, num_classes)
        self.in_dim = in_dim
        self.multilabel = multilabel

    def clip_features(self, clips: torch.Tensor) -> torch.Tensor:
        if clips.shape[-1] != self.in_dim:
            raise EncoderError(f"audio clips have dim {clips.shape[-1]}, expected {self.in_dim}")
        return torch.tanh(self.fc2(torch.tanh(self.fc1(clips))))

    def forward(self, clips: torch.Tensor):
        """(B, n, C_a) -> per-clip features (B, n, H), pooled (B, H), probabilities (B, K)."""
        if clips.dim() != 3 or clips.shape[1] < 1:
            raise EncoderError(f"expected (B, n, C_a) with n >= 1, got shape {tuple(clips.shape)}")
        feats = self.clip_features(clips)
        pooled = feats.mean(dim=1)
        return feats, pooled, _probs(self.head(pooled), self.multilabel)


class VisualEncoder(nn.Module):
    """Two-layer per-clip visual network; classifies attention-modulated, clip-averaged features."""

    def __init__(self, in_dim: int, hidden: int, num_classes: int, multilabel: bool = False):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.head = nn.Linear(hidden, num_classes)
        self.in_dim = in_dim
        self.hidden = hidden
        self.multilabel = multilabel

    def clip_features(self, clips: torch.Tensor) -> torch.Tensor:
        if clips.shape[-1] != self.in_dim:
            raise EncoderError(f"visual clips have dim {clips.shape[-1]}, expected {self.in_dim}")
        return torch.tanh(self.fc2(torch.tanh(self.fc1(clips))))

    def forward(self, clips: torch.Tensor, attention: torch.Tensor | None = None):
        """(B, n, C_v) [, gate (B, H)] -> modulated clip features, pooled, probabilities."""
        feats = self.clip_features(clips)
        if attention is not None:
            if attention.shape[-1] != self.hidden:
                raise EncoderError(
                    f"attention width {attention.shape[-1]} does not match hidden {self.hidden}")
            feats = feats * attention.unsqueeze(1)
        pooled = feats.mean(dim=1)
        return feats, pooled, _probs(self.head(pooled), self.multilabel)


class AudioAttention(nn.Module):
    """Transformer over audio clip tokens; the class-token state maps to a sigmoid channel gate."""

    def __init__(self, in_dim: int, model_dim: int, out_dim: int, depth: int = 8,
                 heads: int = 4, max_clips: int = 16, use_positions: bool = True):
        super().__init__()
        self.proj_in = nn.Linear(in_dim, model_dim)
        self.cls_token = nn.Parameter(torch.randn(model_dim) * 0.02)
        self.positions = nn.Parameter(torch.randn(max_clips + 1, model_dim) * 0.02)
        self.encoder = _transformer(model_dim, depth, heads)
        self.out = nn.Linear(model_dim, out_dim)
        self.use_positions = use_positions
        self.max_clips = max_clips

    def forward(self, audio_feats: torch.Tensor) -> torch.Tensor:
        """(B, n, in_dim) -> gate in (0,1)^(B, out_dim)."""
        if audio_feats.dim() != 3 or audio_feats.shape[1] < 1:
            raise EncoderError(f"expected (B, n, dim) with n >= 1, got {tuple(audio_feats.shape)}")
        n = audio_feats.shape[1]
        if n > self.max_clips:
            raise EncoderError(f"{n} clips exceed position table ({self.max_clips})")
        B = audio_feats.shape[0]
        cls = self.cls_token.expand(B, 1, -1)
        tokens = torch.cat([cls, self.proj_in(audio_feats)], dim=1)
        if self.use_positions:
            tokens = tokens + self.positions[: n + 1]
        state = self.encoder(tokens)
        return torch.sigmoid(self.out(state[:, 0]))


@dataclass
class EncoderOutput:
    attention: torch.Tensor            # (B, H_v)
    visual_clip_features: torch.Tensor  # (B, n, H_v) after modulation
    pooled_visual: torch.Tensor        # (B, H_v)
    p_v: torch.Tensor                  # (B, K)
    audio_clip_features: torch.Tensor  # (B, n, H_a)
    pooled_audio: torch.Tensor         # (B, H_a)
    p_a: torch.Tensor                  # (B, K)


class AudioAdaptiveEncoder(nn.Module):
    """Visual network + audio network + audio-based channel attention."""

    def __init__(self, visual: VisualEncoder, audio: AudioEncoder, attention: AudioAttention | None):
        super().__init__()
        self.visual = visual
        self.audio = audio
        self.attention = attention

    def forward(self, visual_clips: torch.Tensor, audio_clips: torch.Tensor,
                attention_override: torch.Tensor | None = None) -> EncoderOutput:
        a_feats, a_pooled, p_a = self.audio(audio_clips)
        if attention_override is not None:
            gate = attention_override
        elif self.attention is not None:
            gate = self.attention(a_feats)
        else:
            gate = torch.ones(visual_clips.shape[0], self.visual.hidden, dtype=visual_clips.dtype)
        v_feats, v_pooled, p_v = self.visual(visual_clips, gate)
        return EncoderOutput(attention=gate, visual_clip_features=v_feats, pooled_visual=v_pooled,
                             p_v=p_v, audio_clip_features=a_feats, pooled_audio=a_pooled, p_a=p_a)


def encoder_forward(encoder: AudioAdaptiveEncoder, visual_clips, audio_clips,
                    attention_override=None) -> EncoderOutput:
    return encoder(visual_clips, audio_clips, attention_override=attention_override)
