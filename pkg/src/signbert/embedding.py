"""
Visual-token embedding: gesture state + spatial position + temporal position
"""

import logging
import math
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .config import EmbeddingConfig
from .graph import GraphConv, SkeletonGraph, build_arm_graph, build_hand_graph, pool_hand
from .pose_data import PoseFrame, PoseSequence

logger = logging.getLogger(__name__)

# x, y, confidence
INPUT_CHANNELS = 3


def temporal_position_encoding(t: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding of a single position; sin on even dims, cos on odd"""
    if t < 0:
        raise ValueError(f"position must be non-negative, got {t}")
    return sinusoidal_table(t + 1, d_model)[t].numpy().astype(np.float64)


def sinusoidal_table(length: int, d_model: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div_term = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * -(math.log(10000.0) / d_model))
    table = torch.zeros(length, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div_term)
    table[:, 1::2] = torch.cos(position * div_term)
    return table.to(dtype)


class PositionalEncoding(nn.Module):
    """Adds the fixed sinusoidal table to a (B, T, d) batch"""

    def __init__(self, d_model: int, max_len: int = 4096):
        super().__init__()
        self.d_model = d_model
        self.register_buffer("pe", sinusoidal_table(max_len, d_model, torch.float32), persistent=False)

    def table(self, length: int, like: torch.Tensor) -> torch.Tensor:
        if length > self.pe.shape[0]:
            return sinusoidal_table(length, self.d_model, like.dtype).to(like.device)
        return self.pe[:length].to(like.dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.table(x.shape[1], x)


class GraphEncoder(nn.Module):
    """Stack of graph convolutions over one skeleton followed by pooling"""

    def __init__(self, graph: SkeletonGraph, widths: List[int], normalization_mode: str):
        super().__init__()
        self.graph = graph
        channels = [INPUT_CHANNELS] + list(widths)
        self.layers = nn.ModuleList([
            GraphConv(c_in, c_out, graph, normalization_mode)
            for c_in, c_out in zip(channels[:-1], channels[1:])
        ])

    def node_features(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return pool_hand(self.node_features(x), self.graph.clusters)


class GestureStateEmbedding(nn.Module):
    """Shared hand GCN on both hands, concatenated and mapped to d_model"""

    def __init__(self, config: EmbeddingConfig, graph: Optional[SkeletonGraph] = None):
        super().__init__()
        half = config.d_model // 2
        self.hand_gcn = GraphEncoder(graph or build_hand_graph(),
                                     list(config.gcn_widths) + [half],
                                     config.normalization_mode)
        self.project = nn.Linear(config.d_model, config.d_model)

    def halves(self, hands: torch.Tensor) -> torch.Tensor:
        """(..., 2, 21, 3) -> (..., d_model) = [left pooled | right pooled]"""
        pooled = self.hand_gcn(hands)
        return pooled.flatten(start_dim=-2)

    def forward(self, hands: torch.Tensor) -> torch.Tensor:
        return self.project(self.halves(hands))


class SpatialPositionEmbedding(nn.Module):
    """Arm GCN over the 7 arm joints, max-pooled to d_model"""

    def __init__(self, config: EmbeddingConfig, graph: Optional[SkeletonGraph] = None):
        super().__init__()
        self.arm_gcn = GraphEncoder(graph or build_arm_graph(),
                                    list(config.arm_gcn_widths) + [config.d_model],
                                    config.normalization_mode)
        self.project = nn.Linear(config.d_model, config.d_model)

    def forward(self, arms: torch.Tensor) -> torch.Tensor:
        return self.project(self.arm_gcn(arms))


class PoseEmbedding(nn.Module):
    """F_0[t] = f_p(t) + f_s(t) + f_e(t)"""

    def __init__(self, config: EmbeddingConfig):
        super().__init__()
        if config.d_model % 2:
            raise ValueError(f"d_model must be even, got {config.d_model}")
        self.config = config
        self.d_model = config.d_model
        self.gesture = GestureStateEmbedding(config)
        self.spatial = SpatialPositionEmbedding(config)
        self.temporal = PositionalEncoding(config.d_model)

    def forward(self, hands: torch.Tensor, arms: torch.Tensor) -> torch.Tensor:
        """hands (B, T, 2, 21, 3), arms (B, T, 7, 3) -> (B, T, d_model)"""
        tokens = self.gesture(hands)
        if self.config.use_spatial:
            tokens = tokens + self.spatial(arms)
        if self.config.use_temporal:
            tokens = self.temporal(tokens)
        return tokens


def pose_tensors(seq: PoseSequence, dtype: torch.dtype = torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    """(T, 2, 21, 3) hands and (T, 7, 3) arms"""
    hands = torch.as_tensor(seq.hands(), dtype=dtype)
    arms = torch.as_tensor(seq.arms, dtype=dtype)
    return hands, arms


def embed_sequence(seq: PoseSequence, embedding: PoseEmbedding) -> torch.Tensor:
    """Token sequence (T, d_model) for one normalized PoseSequence"""
    if not seq.normalized:
        raise ValueError(f"sequence '{seq.source_id}' must be normalized before embedding")
    dtype = next(embedding.parameters()).dtype
    hands, arms = pose_tensors(seq, dtype)
    return embedding(hands.unsqueeze(0), arms.unsqueeze(0)).squeeze(0)


def embed_gesture_state(frame: PoseFrame, gesture: GestureStateEmbedding) -> torch.Tensor:
    """f_p for one normalized frame, shape (d_model,)"""
    dtype = next(gesture.parameters()).dtype
    hands = torch.as_tensor(np.stack([frame.left_hand, frame.right_hand]), dtype=dtype)
    return gesture(hands)


def embed_spatial_position(arms: np.ndarray, spatial: SpatialPositionEmbedding) -> torch.Tensor:
    """f_s for one frame's (7, 3) arm joints, shape (d_model,)"""
    dtype = next(spatial.parameters()).dtype
    return spatial(torch.as_tensor(np.asarray(arms), dtype=dtype))
