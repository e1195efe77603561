"""Stage-2 audio-infused recognizer.

A transformer classifier over projected clip tokens with a learned per-domain
embedding added to visual tokens and, in the full configuration, a class
token built as a convex combination of learnable activity-sound vectors
selected by audio (and low-dimensional visual) evidence.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .encoder import EncoderError, _probs, _transformer

SEQUENCE_MODES = ("vanilla", "domain_embed", "audio_token")
TOKEN_SOURCES = ("sound_vectors", "audio_prediction", "audio_feature")

DOMAIN_SOURCE = 0
DOMAIN_TARGET = 1


class RecognizerError(ValueError):
    pass


class SoundVectorBank(nn.Module):
    """Learnable activity-sound vectors plus the two selection heads.

    h  = softmax of a linear map of the pooled audio feature;
    g  = sum_k h_k g_k;
    h' = softmax head over concat(g, down-projected visual);
    class token z_cls = sum_k h'_k g_k, a convex combination of the bank.
    """

    def __init__(self, num_classes: int, dim: int, audio_dim: int, visual_dim: int, low_dim: int):
        super().__init__()
        self.vectors = nn.Parameter(torch.randn(num_classes, dim) / math.sqrt(dim))
        self.audio_head = nn.Linear(audio_dim, num_classes)
        self.visual_proj = nn.Linear(visual_dim, low_dim)
        self.mix_head = nn.Linear(dim + low_dim, num_classes)
        self.audio_dim = audio_dim
        self.visual_dim = visual_dim

    def forward(self, pooled_audio: torch.Tensor, pooled_visual: torch.Tensor):
        if pooled_audio.shape[-1] != self.audio_dim:
            raise RecognizerError(
                f"pooled audio dim {pooled_audio.shape[-1]} != expected {self.audio_dim}")
        if pooled_visual.shape[-1] != self.visual_dim:
            raise RecognizerError(
                f"pooled visual dim {pooled_visual.shape[-1]} != expected {self.visual_dim}")
        h = torch.softmax(self.audio_head(pooled_audio), dim=-1)
        g = h @ self.vectors
        mixed = torch.cat([g, self.visual_proj(pooled_visual)], dim=-1)
        h_prime = torch.softmax(self.mix_head(mixed), dim=-1)
        z_cls = h_prime @ self.vectors
        return z_cls, h, h_prime


def build_class_token(bank: SoundVectorBank, pooled_audio, pooled_visual):
    """Audio-adaptive class token (z_cls, h, h') from the sound-vector bank."""
    return bank(pooled_audio, pooled_visual)


class Recognizer(nn.Module):
    """Transformer fusion head over clip tokens with a class token at position 0."""

    def __init__(self, visual_dim: int, audio_dim: int, num_classes: int, dim: int = 64,
                 depth: int = 3, heads: int = 4, max_clips: int = 16, multilabel: bool = False):
        super().__init__()
        self.proj_v = nn.Linear(visual_dim, dim)
        self.proj_a = nn.Linear(audio_dim, dim)
        self.domain_emb = nn.Parameter(torch.randn(2, dim) * 0.02)
        self.cls_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.positions = nn.Parameter(torch.randn(2 * max_clips + 1, dim) * 0.02)
        self.encoder = _transformer(dim, depth, heads)
        self.head = nn.Linear(dim, num_classes)
        # alternative class-token sources for the ablation modes
        self.pred_proj = nn.Linear(num_classes, dim)
        self.audio_token_proj = nn.Linear(audio_dim, dim)
        self.dim = dim
        self.multilabel = multilabel


def _domain_vector(rec: Recognizer, domain, batch: int, dtype) -> torch.Tensor:
    if torch.is_tensor(domain):
        idx = domain.long()
    else:
        idx = torch.full((batch,), int(domain), dtype=torch.long)
    if idx.shape != (batch,):
        raise RecognizerError(f"domain index shape {tuple(idx.shape)} does not match batch {batch}")
    return rec.domain_emb[idx].to(dtype)


def build_sequence(mode: str, visual_feats: torch.Tensor, audio_feats: torch.Tensor | None,
                   domain, rec: Recognizer, bank: SoundVectorBank | None = None,
                   pooled_audio=None, pooled_visual=None, p_a=None,
                   token_source: str = "sound_vectors"):
    """Token sequence for one batch, per the selected fusion mode.

    vanilla      -> [cls; visual tokens; audio tokens]            (length 2n+1)
    domain_embed -> vanilla with E^d added to visual tokens only  (length 2n+1)
    audio_token  -> [z_cls; visual tokens + E^d]; audio enters
                    only through the class token                  (length n+1)

    Returns (tokens, h, h_prime); h/h_prime are None except for the
    sound-vector class token.
    """
    if mode not in SEQUENCE_MODES:
        raise RecognizerError(f"unknown sequence mode {mode!r}")
    B, n = visual_feats.shape[0], visual_feats.shape[1]
    v_tokens = rec.proj_v(visual_feats)
    h = h_prime = None
    if mode in ("vanilla", "domain_embed"):
        if audio_feats is None:
            raise RecognizerError(f"{mode} mode requires audio tokens")
        a_tokens = rec.proj_a(audio_feats)
        if mode == "domain_embed":
            v_tokens = v_tokens + _domain_vector(rec, domain, B, v_tokens.dtype).unsqueeze(1)
        cls = rec.cls_token.expand(B, 1, -1)
        tokens = torch.cat([cls, v_tokens, a_tokens], dim=1)
    else:
        if token_source not in TOKEN_SOURCES:
            raise RecognizerError(f"unknown class-token source {token_source!r}")
        if token_source == "sound_vectors":
            if bank is None:
                raise RecognizerError("sound-vector class token requires a bank")
            z_cls, h, h_prime = bank(pooled_audio, pooled_visual)
        elif token_source == "audio_prediction":
            if p_a is None:
                raise RecognizerError("audio_prediction token source requires p_a")
            z_cls = rec.pred_proj(p_a)
        else:
            if pooled_audio is None:
                raise RecognizerError("audio_feature token source requires pooled audio")
            z_cls = rec.audio_token_proj(pooled_audio)
        v_tokens = v_tokens + _domain_vector(rec, domain, B, v_tokens.dtype).unsqueeze(1)
        tokens = torch.cat([z_cls.unsqueeze(1), v_tokens], dim=1)
    return tokens, h, h_prime


def recognizer_forward(rec: Recognizer, sequence: torch.Tensor):
    """Run the transformer; the prediction head reads only position 0's output state."""
    if sequence.dim() != 3 or sequence.shape[1] < 1:
        raise RecognizerError(f"expected a nonempty (B, L, D) sequence, got {tuple(sequence.shape)}")
    L = sequence.shape[1]
    if L > rec.positions.shape[0]:
        raise RecognizerError(f"sequence length {L} exceeds position table {rec.positions.shape[0]}")
    x = sequence + rec.positions[:L]
    state = rec.encoder(x)
    cls_state = state[:, 0]
    return _probs(rec.head(cls_state), rec.multilabel), cls_state
