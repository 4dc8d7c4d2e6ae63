"""
Attention machinery: multi-head attention, post-norm encoder and decoder
stacks, and cascaded cross-attention over two memories.

Attention masks are boolean and broadcastable to (B, heads, T_q, T_k);
True means "may attend". Padding masks are (B, T) with True at padded
positions.
"""

import logging
import math
from typing import Optional, Tuple

import torch
import torch.nn as nn

from .config import TransformerConfig

logger = logging.getLogger(__name__)


def causal_mask(length: int, device: Optional[torch.device] = None) -> torch.Tensor:
    """(T, T) lower-triangular-inclusive: position i sees positions <= i"""
    return torch.ones(length, length, dtype=torch.bool, device=device).tril()


def key_padding_mask(padding: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
    """(B, T_k) padding flags -> (B, 1, 1, T_k) attention mask"""
    if padding is None:
        return None
    return (~padding.bool())[:, None, None, :]


def combine_masks(*masks: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
    combined = None
    for mask in masks:
        if mask is None:
            continue
        combined = mask if combined is None else combined & mask
    return combined


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over n_heads subspaces; returns (output, weights)"""

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} is not divisible by {n_heads} heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        if key.shape[1] != value.shape[1]:
            raise ValueError(f"key length {key.shape[1]} != value length {value.shape[1]}")
        for name, x in (("query", query), ("key", key), ("value", value)):
            if x.shape[-1] != self.d_model:
                raise ValueError(f"{name} has dimension {x.shape[-1]}, expected {self.d_model}")

        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores.masked_fill(~mask, torch.finfo(scores.dtype).min)
        weights = torch.softmax(scores, dim=-1)
        if mask is not None:
            weights = weights.masked_fill(~mask, 0.0)

        context = self.dropout(weights) @ v
        b, _, t, _ = context.shape
        context = context.transpose(1, 2).reshape(b, t, self.d_model)
        return self.out_proj(context), weights


def multi_head_attention(query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                         attention: MultiHeadAttention, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    output, _ = attention(query, key, value, mask)
    return output


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ff_width: int, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, ff_width),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(ff_width, d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EncoderLayer(nn.Module):
    """F~ = L(M(F) + F); F' = L(C(F~) + F~)"""

    def __init__(self, d_model: int, n_heads: int, ff_width: int, dropout: float = 0.1):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.feed_forward = FeedForward(d_model, ff_width, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        attended, _ = self.self_attn(x, x, x, mask)
        x = self.norm1(attended + x)
        return self.norm2(self.dropout(self.feed_forward(x)) + x)


class TransformerEncoder(nn.Module):
    def __init__(self, d_model: int, n_layers: int, n_heads: int, ff_width: int, dropout: float = 0.1):
        super().__init__()
        self.layers = nn.ModuleList([
            EncoderLayer(d_model, n_heads, ff_width, dropout) for _ in range(n_layers)
        ])

    @classmethod
    def from_config(cls, d_model: int, config: TransformerConfig,
                    n_layers: Optional[int] = None) -> 'TransformerEncoder':
        return cls(d_model, n_layers if n_layers is not None else config.n_layers,
                   config.n_heads, config.ff_width, config.dropout)

    def forward(self, x: torch.Tensor, padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        mask = key_padding_mask(padding_mask)
        for layer in self.layers:
            x = layer(x, mask)
        return x


def cascaded_cross_attention(query: torch.Tensor, pose_memory: Optional[torch.Tensor],
                             rgb_memory: Optional[torch.Tensor], pose_attn: MultiHeadAttention,
                             rgb_attn: MultiHeadAttention, pose_mask: Optional[torch.Tensor] = None,
                             rgb_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Attend the pose memory first, then query the RGB memory with the result.

    The second stage is residual around the first, so a silenced RGB stage
    leaves plain pose cross-attention plus a constant.
    """
    if pose_memory is None or rgb_memory is None:
        raise ValueError("cascaded cross-attention needs both a pose memory and an RGB memory")
    pose_context, _ = pose_attn(query, pose_memory, pose_memory, pose_mask)
    rgb_context, _ = rgb_attn(pose_context, rgb_memory, rgb_memory, rgb_mask)
    return pose_context + rgb_context


class DecoderLayer(nn.Module):
    """Masked self-attention, cross-attention (optionally cascaded), feed-forward"""

    def __init__(self, d_model: int, n_heads: int, ff_width: int, dropout: float = 0.1,
                 fused: bool = False):
        super().__init__()
        self.fused = fused
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.rgb_attn = MultiHeadAttention(d_model, n_heads, dropout) if fused else None
        self.feed_forward = FeedForward(d_model, ff_width, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, self_mask: Optional[torch.Tensor] = None,
                memory_mask: Optional[torch.Tensor] = None, rgb_memory: Optional[torch.Tensor] = None,
                rgb_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        attended, _ = self.self_attn(x, x, x, self_mask)
        x = self.norm1(attended + x)
        if self.fused:
            crossed = cascaded_cross_attention(x, memory, rgb_memory, self.cross_attn, self.rgb_attn,
                                               memory_mask, rgb_mask)
        else:
            crossed, _ = self.cross_attn(x, memory, memory, memory_mask)
        x = self.norm2(crossed + x)
        return self.norm3(self.dropout(self.feed_forward(x)) + x)


class TransformerDecoder(nn.Module):
    def __init__(self, d_model: int, n_layers: int, n_heads: int, ff_width: int,
                 dropout: float = 0.1, fused: bool = False):
        super().__init__()
        self.fused = fused
        self.layers = nn.ModuleList([
            DecoderLayer(d_model, n_heads, ff_width, dropout, fused) for _ in range(n_layers)
        ])

    def forward(self, x: torch.Tensor, memory: torch.Tensor,
                target_padding: Optional[torch.Tensor] = None,
                memory_padding: Optional[torch.Tensor] = None,
                rgb_memory: Optional[torch.Tensor] = None,
                rgb_padding: Optional[torch.Tensor] = None) -> torch.Tensor:
        if memory is None:
            raise ValueError("decoder needs a memory")
        if self.fused and rgb_memory is None:
            raise ValueError("fused decoder needs an RGB memory")
        self_mask = combine_masks(causal_mask(x.shape[1], x.device)[None, None],
                                  key_padding_mask(target_padding))
        memory_mask = key_padding_mask(memory_padding)
        rgb_mask = key_padding_mask(rgb_padding)
        for layer in self.layers:
            x = layer(x, memory, self_mask, memory_mask, rgb_memory, rgb_mask)
        return x


def encoder_forward(tokens: torch.Tensor, encoder: TransformerEncoder,
                    padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """F_0 (B, T, d) -> F_N (B, T, d)"""
    return encoder(tokens, padding_mask)


def decoder_forward(targets: torch.Tensor, memory: torch.Tensor, decoder: TransformerDecoder,
                    target_padding: Optional[torch.Tensor] = None,
                    memory_padding: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Causal decoding of embedded targets (B, L, d) against memory (B, T, d)"""
    return decoder(targets, memory, target_padding, memory_padding)
