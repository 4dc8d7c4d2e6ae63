"""
Model-aware decoder: latent tokens -> hand parameters -> skinned hand ->
weak-perspective 2D joints
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import HandModelConfig
from .hand_model import (HandModelLayer, HandModelSpec, batch_rodrigues, build_hand_model_spec,
                         mirror_to_left, project_weak_perspective)
from .pose_data import HAND_SIDES, PoseSequence

logger = logging.getLogger(__name__)

CAMERA_DIMS = (3, 2, 1)


@dataclass
class HandParams:
    """Per-frame, per-hand regressed parameters; leading dims (..., 2) index the hand"""
    theta: torch.Tensor
    beta: torch.Tensor
    cam_rot: torch.Tensor
    cam_trans: torch.Tensor
    cam_scale: torch.Tensor

    def rotation_matrix(self) -> torch.Tensor:
        lead = self.cam_rot.shape[:-1]
        return batch_rodrigues(self.cam_rot.reshape(-1, 3)).view(*lead, 3, 3)


class HandParamRegressor(nn.Module):
    """One linear layer emitting both hands' (theta, beta, rot, trans, scale)"""

    def __init__(self, d_model: int, theta_dim: int = 25, beta_dim: int = 10,
                 cam_scale_init: float = 0.15, cam_trans_clamp: float = 0.5):
        super().__init__()
        self.theta_dim = theta_dim
        self.beta_dim = beta_dim
        self.per_hand = theta_dim + beta_dim + sum(CAMERA_DIMS)
        self.cam_scale_init = cam_scale_init
        self.cam_trans_clamp = cam_trans_clamp
        self.linear = nn.Linear(d_model, 2 * self.per_hand)

    def forward(self, tokens: torch.Tensor) -> HandParams:
        raw = self.linear(tokens).view(*tokens.shape[:-1], 2, self.per_hand)
        theta, beta, rot, trans, scale = torch.split(
            raw, [self.theta_dim, self.beta_dim, *CAMERA_DIMS], dim=-1)
        return HandParams(
            theta=theta,
            beta=beta,
            cam_rot=rot,
            cam_trans=self.cam_trans_clamp * torch.tanh(trans),
            # softplus(0) = ln 2, so a zero pre-activation gives the initial scale
            cam_scale=self.cam_scale_init * F.softplus(scale) / math.log(2.0),
        )


def regress_hand_params(tokens: torch.Tensor, regressor: HandParamRegressor) -> HandParams:
    return regressor(tokens)


@dataclass
class DecoderOutput:
    params: HandParams
    joints_3d: torch.Tensor             # (..., 2, 21, 3)
    joints_2d: torch.Tensor             # (..., 2, 21, 2)
    vertices: Optional[torch.Tensor] = None  # (..., 2, V, 3)


@dataclass
class MeshFrame:
    frame: int
    hand: str
    vertices: np.ndarray
    joints_3d: np.ndarray
    joints_2d: np.ndarray


class HandDecoder(nn.Module):
    """Regress, skin, mirror the left hand, project"""

    def __init__(self, d_model: int, spec: HandModelSpec, config: Optional[HandModelConfig] = None):
        super().__init__()
        config = config or HandModelConfig()
        self.hand_model = HandModelLayer(spec)
        self.regressor = HandParamRegressor(d_model, self.hand_model.theta_dim, self.hand_model.beta_dim,
                                            config.cam_scale_init, config.cam_trans_clamp)

    @classmethod
    def from_config(cls, d_model: int, config: HandModelConfig) -> 'HandDecoder':
        return cls(d_model, build_hand_model_spec(config), config)

    def decode_params(self, params: HandParams, return_vertices: bool = False) -> DecoderOutput:
        vertices, joints_3d = self.hand_model(params.theta, params.beta)
        joints_3d = _mirror_left(joints_3d)
        joints_2d = project_weak_perspective(joints_3d, params.rotation_matrix(),
                                             params.cam_trans, params.cam_scale)
        return DecoderOutput(params=params, joints_3d=joints_3d, joints_2d=joints_2d,
                             vertices=_mirror_left(vertices) if return_vertices else None)

    def forward(self, tokens: torch.Tensor, return_vertices: bool = False) -> DecoderOutput:
        return self.decode_params(self.regressor(tokens), return_vertices)


def _mirror_left(points: torch.Tensor) -> torch.Tensor:
    """(..., 2, N, 3) with hand 0 (left) reflected from the right-hand model"""
    return torch.stack([mirror_to_left(points[..., 0, :, :]), points[..., 1, :, :]], dim=-3)


def decode_sequence(tokens: torch.Tensor, decoder: HandDecoder, reference: PoseSequence,
                    with_meshes: bool = False) -> Tuple[PoseSequence, List[MeshFrame]]:
    """
    Reconstruct one sequence from its latent tokens (T, d_model).

    Hand coordinates come from the decoder; arms, confidences and metadata are
    carried over from `reference` so the result lines up with the input.
    """
    if tokens.shape[0] != len(reference):
        raise ValueError(f"{tokens.shape[0]} tokens for a {len(reference)}-frame sequence")
    with torch.no_grad():
        out = decoder(tokens, return_vertices=with_meshes)
    joints_2d = out.joints_2d.detach().cpu().double().numpy()

    hands = reference.hands().copy()
    hands[..., :2] = joints_2d
    recon = reference.replace(left_hand=hands[:, 0], right_hand=hands[:, 1], arms=reference.arms.copy())

    meshes: List[MeshFrame] = []
    if with_meshes:
        vertices = out.vertices.detach().cpu().double().numpy()
        joints_3d = out.joints_3d.detach().cpu().double().numpy()
        for t in range(len(reference)):
            for h, side in enumerate(HAND_SIDES):
                meshes.append(MeshFrame(frame=t, hand=side, vertices=vertices[t, h],
                                        joints_3d=joints_3d[t, h], joints_2d=joints_2d[t, h]))
    return recon, meshes
