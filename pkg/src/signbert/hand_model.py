"""
Differentiable hand model: blend shapes, linear blend skinning and the
21-joint hand skeleton, with a MANO asset loader and a procedural fallback.

Joint order inside the model follows MANO (16 joints):
    0 wrist, 1-3 index, 4-6 middle, 7-9 little, 10-12 ring, 13-15 thumb
Outputs are remapped to the 21-joint layout used by pose files.
"""

import json
import logging
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .config import HandModelConfig
from .errors import HandModelError

logger = logging.getLogger(__name__)

NUM_MODEL_JOINTS = 16
PARENTS = np.array([-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14], dtype=np.int64)

# model joints per finger in thumb, index, middle, ring, little order
FINGER_CHAINS = np.array([[13, 14, 15], [1, 2, 3], [4, 5, 6], [10, 11, 12], [7, 8, 9]], dtype=np.int64)

# 16 model joints + 5 tips (thumb, index, middle, ring, little) -> 21-joint layout
REMAP_21 = [0, 13, 14, 15, 16, 1, 2, 3, 17, 4, 5, 6, 18, 10, 11, 12, 19, 7, 8, 9, 20]

MANO_FINGERTIP_VERTICES = np.array([734, 333, 443, 555, 678], dtype=np.int64)
MANO_NUM_VERTICES = 778
MANO_NUM_FACES = 1538

MESH_DUMP_VERSION = 2


@dataclass(frozen=True)
class HandModelSpec:
    """
    Everything lbs_forward needs. Arrays are float64 numpy.

    Fingertips come either from `fingertip_vertices` (MANO rule) or, when that
    is None, from extending each finger's last bone: tip = J_dip + ratio *
    (J_dip - J_pip), carried by the DIP joint's transform.
    """
    template: np.ndarray            # (V, 3)
    faces: np.ndarray               # (F, 3)
    weights: np.ndarray             # (V, 16)
    joint_regressor: np.ndarray     # (16, V)
    shape_basis: np.ndarray         # (V, 3, n_beta)
    pose_basis: np.ndarray          # (V, 3, 135)
    pose_map: np.ndarray            # (n_theta, 45)
    parents: np.ndarray             # (16,)
    fingertip_vertices: Optional[np.ndarray] = None
    tip_ratios: Optional[np.ndarray] = None   # (5,)
    pose_mean: Optional[np.ndarray] = None    # (45,) articulation at theta = 0
    source: str = "procedural"

    @property
    def num_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def theta_dim(self) -> int:
        return self.pose_map.shape[0]

    @property
    def beta_dim(self) -> int:
        return self.shape_basis.shape[-1]


def validate_hand_model_spec(spec: HandModelSpec) -> None:
    v = spec.num_vertices
    if spec.template.shape != (v, 3):
        raise HandModelError(f"template must be (V, 3), got {spec.template.shape}")
    if spec.weights.shape != (v, NUM_MODEL_JOINTS):
        raise HandModelError(f"skinning weights must be ({v}, {NUM_MODEL_JOINTS}), got {spec.weights.shape}")
    if np.any(spec.weights < 0):
        raise HandModelError("skinning weights must be non-negative")
    row_sums = spec.weights.sum(axis=1)
    if np.max(np.abs(row_sums - 1.0)) > 1e-6:
        worst = row_sums[np.argmax(np.abs(row_sums - 1.0))]
        raise HandModelError(f"skinning weight rows must sum to 1 (worst row sums to {worst:.6f})")
    if spec.joint_regressor.shape != (NUM_MODEL_JOINTS, v):
        raise HandModelError(f"joint regressor must be ({NUM_MODEL_JOINTS}, {v}), got {spec.joint_regressor.shape}")
    if spec.shape_basis.ndim != 3 or spec.shape_basis.shape[:2] != (v, 3):
        raise HandModelError(f"shape basis must be (V, 3, n_beta), got {spec.shape_basis.shape}")
    if spec.pose_basis.shape != (v, 3, 9 * (NUM_MODEL_JOINTS - 1)):
        raise HandModelError(f"pose basis must be (V, 3, 135), got {spec.pose_basis.shape}")
    if spec.pose_map.ndim != 2 or spec.pose_map.shape[1] != 3 * (NUM_MODEL_JOINTS - 1):
        raise HandModelError(f"pose map must be (n_theta, 45), got {spec.pose_map.shape}")
    if spec.pose_mean is not None and spec.pose_mean.shape != (3 * (NUM_MODEL_JOINTS - 1),):
        raise HandModelError(f"pose mean must be (45,), got {spec.pose_mean.shape}")
    if not np.array_equal(spec.parents, PARENTS):
        raise HandModelError("kinematic tree does not match the 16-joint hand topology")
    if spec.faces.size and (spec.faces.min() < 0 or spec.faces.max() >= v):
        raise HandModelError("face indices out of range")
    if spec.fingertip_vertices is None:
        if spec.tip_ratios is None or spec.tip_ratios.shape != (5,):
            raise HandModelError("chain-end fingertip rule needs five tip ratios")
    elif spec.fingertip_vertices.shape != (5,) or spec.fingertip_vertices.max() >= v:
        raise HandModelError("fingertip rule needs five valid vertex indices")


# ---------------------------------------------------------------------------
# Procedural fallback
# ---------------------------------------------------------------------------

# thumb, index, middle, ring, little
_BASES = np.array([[0.10, 0.08, 0.02], [0.08, 0.30, 0.0], [0.0, 0.32, 0.0],
                   [-0.07, 0.30, 0.0], [-0.13, 0.26, 0.0]])
_DIRECTIONS = np.array([[0.6, 0.8, 0.1], [0.15, 1.0, 0.05], [0.0, 1.0, 0.05],
                        [-0.12, 1.0, 0.05], [-0.25, 1.0, 0.05]])
_LENGTHS = np.array([[0.10, 0.08, 0.07], [0.12, 0.08, 0.07], [0.13, 0.09, 0.07],
                     [0.12, 0.08, 0.07], [0.09, 0.06, 0.06]])
_RING_SIZE = 5


def _rest_skeleton() -> Tuple[np.ndarray, np.ndarray]:
    """(16, 3) model joints and (5, 3) fingertips at rest"""
    joints = np.zeros((NUM_MODEL_JOINTS, 3))
    tips = np.zeros((5, 3))
    for f, chain in enumerate(FINGER_CHAINS):
        d = _DIRECTIONS[f] / np.linalg.norm(_DIRECTIONS[f])
        joints[chain[0]] = _BASES[f]
        joints[chain[1]] = joints[chain[0]] + d * _LENGTHS[f, 0]
        joints[chain[2]] = joints[chain[1]] + d * _LENGTHS[f, 1]
        tips[f] = joints[chain[2]] + d * _LENGTHS[f, 2]
    return joints, tips


def _segments(joints: np.ndarray, tips: np.ndarray):
    """(start, end, owner joint, radius) for the 20 bones"""
    out = []
    for f, chain in enumerate(FINGER_CHAINS):
        points = [joints[0], joints[chain[0]], joints[chain[1]], joints[chain[2]], tips[f]]
        owners = [0, chain[0], chain[1], chain[2]]
        radii = [0.025, 0.014, 0.012, 0.010]
        for k in range(4):
            out.append((points[k], points[k + 1], owners[k], radii[k]))
    return out


def _perpendicular_frame(direction: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d = direction / np.linalg.norm(direction)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def _point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def build_procedural_hand_model(num_vertices: int = 200, theta_dim: int = 25, beta_dim: int = 10,
                                seed: int = 0, skin_temperature: float = 0.01) -> HandModelSpec:
    """
    Low-poly tube hand with MANO topology.

    Each of the 20 bones carries num_vertices / 100 rings of five vertices;
    station 0 of every ring sits on the bone's start joint so the regressor
    can average those rings back onto the joint.
    """
    if num_vertices <= 0 or num_vertices % (20 * _RING_SIZE):
        raise HandModelError(f"procedural vertex count must be a positive multiple of 100, got {num_vertices}")
    if not 1 <= theta_dim <= 45:
        raise HandModelError(f"theta_dim must lie in [1, 45], got {theta_dim}")
    stations = num_vertices // (20 * _RING_SIZE)
    rng = np.random.default_rng(seed)

    joints, tips = _rest_skeleton()
    segments = _segments(joints, tips)

    angles = 2.0 * np.pi * np.arange(_RING_SIZE) / _RING_SIZE
    vertices = []
    faces = []
    station0 = {j: [] for j in range(NUM_MODEL_JOINTS)}
    for s_index, (start, end, owner, radius) in enumerate(segments):
        u, w = _perpendicular_frame(end - start)
        base = s_index * stations * _RING_SIZE
        for s in range(stations):
            center = start + (end - start) * (s / stations)
            ring = center + radius * (np.cos(angles)[:, None] * u + np.sin(angles)[:, None] * w)
            if s == 0:
                station0[owner].extend(range(len(vertices), len(vertices) + _RING_SIZE))
            vertices.extend(ring)
        for s in range(stations - 1):
            for k in range(_RING_SIZE):
                a = base + s * _RING_SIZE + k
                b = base + s * _RING_SIZE + (k + 1) % _RING_SIZE
                c = b + _RING_SIZE
                d = a + _RING_SIZE
                faces.extend([[a, b, c], [a, c, d]])
    template = np.asarray(vertices)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)

    regressor = np.zeros((NUM_MODEL_JOINTS, num_vertices))
    for j, members in station0.items():
        regressor[j, members] = 1.0 / len(members)

    distance = np.full((num_vertices, NUM_MODEL_JOINTS), np.inf)
    for start, end, owner, _ in segments:
        distance[:, owner] = np.minimum(distance[:, owner], _point_segment_distance(template, start, end))
    logits = -distance / skin_temperature
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)

    shape_basis = np.zeros((num_vertices, 3, beta_dim))
    fixed = [0.1 * template,
             0.1 * template * np.array([0.0, 1.0, 0.0]),
             0.1 * template * np.array([1.0, 0.0, 0.0])]
    for k in range(beta_dim):
        if k < len(fixed):
            shape_basis[:, :, k] = fixed[k]
        else:
            shape_basis[:, :, k] = weights @ (0.01 * rng.normal(size=(NUM_MODEL_JOINTS, 3)))

    q, _ = np.linalg.qr(rng.normal(size=(45, 45)))
    pose_map = q[:, :theta_dim].T.copy()

    tip_ratios = _LENGTHS[:, 2] / _LENGTHS[:, 1]
    spec = HandModelSpec(
        template=template,
        faces=faces,
        weights=weights,
        joint_regressor=regressor,
        shape_basis=shape_basis,
        pose_basis=np.zeros((num_vertices, 3, 135)),
        pose_map=pose_map,
        parents=PARENTS.copy(),
        fingertip_vertices=None,
        tip_ratios=tip_ratios,
        source="procedural",
    )
    validate_hand_model_spec(spec)
    return spec


# ---------------------------------------------------------------------------
# MANO assets
# ---------------------------------------------------------------------------

def _read_mano_archive(directory: Path) -> dict:
    npz_path = directory / "mano_right.npz"
    pkl_path = directory / "MANO_RIGHT.pkl"
    if npz_path.exists():
        with np.load(npz_path, allow_pickle=False) as archive:
            return {key: archive[key] for key in archive.files}
    if pkl_path.exists():
        try:
            with open(pkl_path, "rb") as f:
                return pickle.load(f, encoding="latin1")
        except ModuleNotFoundError as e:
            # the distributed pickle stores chumpy arrays
            raise HandModelError(f"Reading {pkl_path} needs {e.name}; convert it once to mano_right.npz "
                                 f"(see docs/hand-model-assets.md)") from e
        except (pickle.UnpicklingError, EOFError) as e:
            raise HandModelError(f"Could not read {pkl_path}: {e}") from e
    raise HandModelError(f"No MANO asset in {directory} (expected mano_right.npz or MANO_RIGHT.pkl)")


def load_mano_hand_model(directory: Union[str, Path], theta_dim: int = 25,
                         beta_dim: int = 10, flat_hand_mean: bool = False) -> HandModelSpec:
    """
    Build a spec from a user-supplied right-hand MANO archive.

    With `hands_mean` in the archive and flat_hand_mean off, theta = 0 is the
    mean relaxed hand; otherwise it is the flat hand.
    """
    directory = Path(directory)
    data = _read_mano_archive(directory)
    required = ("v_template", "f", "weights", "J_regressor", "shapedirs", "posedirs", "hands_components")
    missing = [k for k in required if k not in data]
    if missing:
        raise HandModelError(f"MANO asset in {directory} lacks {', '.join(missing)}")

    regressor = data["J_regressor"]
    if hasattr(regressor, "todense"):
        regressor = regressor.todense()
    components = np.asarray(data["hands_components"], dtype=np.float64)
    shapedirs = np.asarray(data["shapedirs"], dtype=np.float64)
    if theta_dim > components.shape[0]:
        raise HandModelError(f"asset has {components.shape[0]} pose components, {theta_dim} requested")
    if beta_dim > shapedirs.shape[-1]:
        raise HandModelError(f"asset has {shapedirs.shape[-1]} shape components, {beta_dim} requested")
    pose_mean = None
    if not flat_hand_mean and "hands_mean" in data:
        pose_mean = np.asarray(data["hands_mean"], dtype=np.float64).reshape(-1)

    spec = HandModelSpec(
        template=np.asarray(data["v_template"], dtype=np.float64),
        faces=np.asarray(data["f"], dtype=np.int64),
        weights=np.asarray(data["weights"], dtype=np.float64),
        joint_regressor=np.asarray(regressor, dtype=np.float64),
        shape_basis=shapedirs[..., :beta_dim],
        pose_basis=np.asarray(data["posedirs"], dtype=np.float64),
        pose_map=components[:theta_dim].copy(),
        parents=PARENTS.copy(),
        fingertip_vertices=MANO_FINGERTIP_VERTICES.copy(),
        pose_mean=pose_mean,
        source=f"mano:{directory}",
    )
    validate_hand_model_spec(spec)
    if spec.num_vertices != MANO_NUM_VERTICES or spec.faces.shape[0] != MANO_NUM_FACES:
        raise HandModelError(f"MANO mesh must have {MANO_NUM_VERTICES} vertices and {MANO_NUM_FACES} faces, "
                             f"got {spec.num_vertices} and {spec.faces.shape[0]}")
    logger.info(f"Loaded MANO hand model from {directory}")
    return spec


def build_hand_model_spec(config: HandModelConfig) -> HandModelSpec:
    if config.source == "procedural":
        return build_procedural_hand_model(config.procedural_vertices, config.theta_dim, config.beta_dim)
    if config.source.startswith("mano:"):
        return load_mano_hand_model(config.source[len("mano:"):], config.theta_dim, config.beta_dim,
                                    config.flat_hand_mean)
    raise HandModelError(f"Unknown hand model source {config.source!r}")


# ---------------------------------------------------------------------------
# Skinning
# ---------------------------------------------------------------------------

def batch_rodrigues(rot_vecs: torch.Tensor) -> torch.Tensor:
    """Axis-angle (N, 3) -> rotation matrices (N, 3, 3)"""
    angle_sq = (rot_vecs * rot_vecs).sum(dim=-1, keepdim=True)
    angle = torch.sqrt(angle_sq + 1e-24)
    small = angle < 1e-6
    sin_term = torch.where(small, 1.0 - angle_sq / 6.0, torch.sin(angle) / angle)
    cos_term = torch.where(small, 0.5 - angle_sq / 24.0, (1.0 - torch.cos(angle)) / angle_sq.clamp_min(1e-24))

    rx, ry, rz = rot_vecs.unbind(dim=-1)
    zeros = torch.zeros_like(rx)
    k = torch.stack([zeros, -rz, ry, rz, zeros, -rx, -ry, rx, zeros], dim=-1).view(-1, 3, 3)
    eye = torch.eye(3, dtype=rot_vecs.dtype, device=rot_vecs.device).unsqueeze(0)
    return eye + sin_term.unsqueeze(-1) * k + cos_term.unsqueeze(-1) * (k @ k)


def batch_rigid_transform(rot_mats: torch.Tensor, joints: torch.Tensor,
                          parents: np.ndarray) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Chain local rotations down the tree.

    Returns posed joints (B, J, 3) and relative transforms (B, J, 4, 4) that
    map rest-space points attached to each joint to posed space.
    """
    batch, num_joints = joints.shape[:2]
    rel_joints = joints.clone()
    rel_joints[:, 1:] = joints[:, 1:] - joints[:, parents[1:]]

    local = torch.zeros(batch, num_joints, 4, 4, dtype=joints.dtype, device=joints.device)
    local[..., :3, :3] = rot_mats
    local[..., :3, 3] = rel_joints
    local[..., 3, 3] = 1.0

    chain = [local[:, 0]]
    for j in range(1, num_joints):
        chain.append(chain[parents[j]] @ local[:, j])
    world = torch.stack(chain, dim=1)

    posed_joints = world[..., :3, 3]
    rest_offset = (world[..., :3, :3] @ joints.unsqueeze(-1)).squeeze(-1)
    relative = world.clone()
    relative[..., :3, 3] = posed_joints - rest_offset
    return posed_joints, relative


def linear_blend_skinning(full_pose: torch.Tensor, beta: torch.Tensor,
                          spec: 'HandModelLayer') -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    full_pose (B, 16, 3) axis-angle per model joint, beta (B, n_beta).

    Returns vertices (B, V, 3), posed model joints (B, 16, 3), shaped rest
    joints (B, 16, 3) and relative transforms (B, 16, 4, 4).
    """
    batch = full_pose.shape[0]
    template = spec.template.to(full_pose.dtype)
    v_shaped = template + torch.einsum("bl,vkl->bvk", beta, spec.shape_basis.to(full_pose.dtype))
    rest_joints = torch.einsum("jv,bvk->bjk", spec.joint_regressor.to(full_pose.dtype), v_shaped)

    rot_mats = batch_rodrigues(full_pose.reshape(-1, 3)).view(batch, NUM_MODEL_JOINTS, 3, 3)
    eye = torch.eye(3, dtype=full_pose.dtype, device=full_pose.device)
    pose_feature = (rot_mats[:, 1:] - eye).reshape(batch, -1)
    pose_offsets = torch.einsum("bp,vkp->bvk", pose_feature, spec.pose_basis.to(full_pose.dtype))
    v_posed = v_shaped + pose_offsets

    posed_joints, transforms = batch_rigid_transform(rot_mats, rest_joints, PARENTS)
    blended = torch.einsum("vj,bjmn->bvmn", spec.weights.to(full_pose.dtype), transforms)
    vertices = (blended[..., :3, :3] @ v_posed.unsqueeze(-1)).squeeze(-1) + blended[..., :3, 3]
    return vertices, posed_joints, rest_joints, transforms


class HandModelLayer(nn.Module):
    """Holds a HandModelSpec as buffers and evaluates the 21-joint hand"""

    def __init__(self, spec: HandModelSpec):
        super().__init__()
        validate_hand_model_spec(spec)
        self.source = spec.source
        self.register_buffer("template", torch.tensor(spec.template))
        self.register_buffer("faces", torch.tensor(spec.faces, dtype=torch.int64))
        self.register_buffer("weights", torch.tensor(spec.weights))
        self.register_buffer("joint_regressor", torch.tensor(spec.joint_regressor))
        self.register_buffer("shape_basis", torch.tensor(spec.shape_basis))
        self.register_buffer("pose_basis", torch.tensor(spec.pose_basis))
        self.register_buffer("pose_map", torch.tensor(spec.pose_map))
        pose_mean = spec.pose_mean if spec.pose_mean is not None else np.zeros(3 * (NUM_MODEL_JOINTS - 1))
        self.register_buffer("pose_mean", torch.tensor(pose_mean, dtype=torch.float64))
        self.uses_tip_vertices = spec.fingertip_vertices is not None
        if self.uses_tip_vertices:
            self.register_buffer("fingertip_vertices", torch.tensor(spec.fingertip_vertices, dtype=torch.int64))
        else:
            self.register_buffer("tip_ratios", torch.tensor(spec.tip_ratios))

    @property
    def theta_dim(self) -> int:
        return self.pose_map.shape[0]

    @property
    def beta_dim(self) -> int:
        return self.shape_basis.shape[-1]

    def _fingertips(self, vertices: torch.Tensor, rest_joints: torch.Tensor,
                    transforms: torch.Tensor) -> torch.Tensor:
        if self.uses_tip_vertices:
            return vertices[:, self.fingertip_vertices]
        pip = rest_joints[:, FINGER_CHAINS[:, 1]]
        dip = rest_joints[:, FINGER_CHAINS[:, 2]]
        tip_rest = dip + self.tip_ratios.to(dip.dtype)[None, :, None] * (dip - pip)
        carrier = transforms[:, FINGER_CHAINS[:, 2]]
        return (carrier[..., :3, :3] @ tip_rest.unsqueeze(-1)).squeeze(-1) + carrier[..., :3, 3]

    def forward(self, theta: torch.Tensor, beta: torch.Tensor,
                root_rot: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """theta (..., n_theta), beta (..., n_beta) -> vertices (..., V, 3), joints (..., 21, 3)"""
        if theta.shape[-1] != self.theta_dim or beta.shape[-1] != self.beta_dim:
            raise ValueError(f"expected theta/beta of size {self.theta_dim}/{self.beta_dim}, "
                             f"got {theta.shape[-1]}/{beta.shape[-1]}")
        lead = theta.shape[:-1]
        theta = theta.reshape(-1, self.theta_dim)
        beta = beta.reshape(-1, self.beta_dim)
        articulation = theta @ self.pose_map.to(theta.dtype) + self.pose_mean.to(theta.dtype)
        articulation = articulation.view(-1, NUM_MODEL_JOINTS - 1, 3)
        if root_rot is None:
            root = torch.zeros(theta.shape[0], 1, 3, dtype=theta.dtype, device=theta.device)
        else:
            root = root_rot.reshape(-1, 1, 3)
        full_pose = torch.cat([root, articulation], dim=1)

        vertices, joints, rest_joints, transforms = linear_blend_skinning(full_pose, beta, self)
        tips = self._fingertips(vertices, rest_joints, transforms)
        joints21 = torch.cat([joints, tips], dim=1)[:, REMAP_21]
        return vertices.view(*lead, -1, 3), joints21.view(*lead, 21, 3)


def lbs_forward(theta: torch.Tensor, beta: torch.Tensor, spec: Union[HandModelSpec, HandModelLayer],
                root_rot: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Vertices and 21 joints for pose embedding theta and shape beta"""
    layer = spec if isinstance(spec, HandModelLayer) else HandModelLayer(spec).to(theta.device)
    return layer(theta, beta, root_rot)


def mirror_to_left(points: torch.Tensor) -> torch.Tensor:
    """Reflect right-hand geometry across the x = 0 plane"""
    return points * torch.tensor([-1.0, 1.0, 1.0], dtype=points.dtype, device=points.device)


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------

def project_weak_perspective(joints_3d: torch.Tensor, rotation: torch.Tensor,
                             translation: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """
    J_2D = c_s * Pi(R J_3D) + c_o

    joints_3d (..., J, 3); rotation (..., 3, 3); translation (..., 2);
    scale (..., 1).
    """
    rotated = joints_3d @ rotation.transpose(-1, -2)
    return scale.unsqueeze(-1) * rotated[..., :2] + translation.unsqueeze(-2)


def write_mesh_dump(path: Union[str, Path], faces: np.ndarray, frames: list) -> None:
    """
    Plain JSON: shared faces plus per-frame, per-hand vertices and joints.

    Left hands are mirrored right hands, so their triangles use the reversed
    winding in `faces_left`; each frame names its table under "faces".
    """
    faces = np.asarray(faces)
    record = {
        "schema_version": MESH_DUMP_VERSION,
        "faces": faces.tolist(),
        "faces_left": faces[:, ::-1].tolist(),
        "frames": [
            {
                "frame": f.frame,
                "hand": f.hand,
                "faces": "faces_left" if f.hand == "left" else "faces",
                "vertices": np.asarray(f.vertices).tolist(),
                "joints_3d": np.asarray(f.joints_3d).tolist(),
                "joints_2d": np.asarray(f.joints_2d).tolist(),
            }
            for f in frames
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record))
