"""
Pose sequence data model, pose-file IO, normalization, augmentation and
temporal sampling
"""

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import PoseFileError, SchemaError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
NUM_HAND_JOINTS = 21
NUM_ARM_JOINTS = 7
HAND_SIDES = ("left", "right")
PARTS = {"left_hand": NUM_HAND_JOINTS, "right_hand": NUM_HAND_JOINTS, "arms": NUM_ARM_JOINTS}

SAMPLING_MODES = ("segment_random", "segment_center", "fraction_random", "all")


@dataclass(frozen=True)
class Joint2D:
    """One detected joint: coordinates plus detection confidence"""
    x: float
    y: float
    confidence: float


@dataclass
class PoseFrame:
    """Joints of one frame, each array shaped (joints, 3) as [x, y, confidence]"""
    left_hand: np.ndarray
    right_hand: np.ndarray
    arms: np.ndarray

    def joint(self, part: str, index: int) -> Joint2D:
        x, y, c = getattr(self, part)[index]
        return Joint2D(float(x), float(y), float(c))


@dataclass
class PoseSequence:
    """
    A video's worth of 2D poses.

    Arrays are shaped (T, joints, 3) with the last axis [x, y, confidence].
    Missing detections are stored as confidence 0 at coordinates (0, 0).
    """
    left_hand: np.ndarray
    right_hand: np.ndarray
    arms: np.ndarray
    source_id: str = ""
    image_size: Tuple[int, int] = (256, 256)
    fps: Optional[float] = None
    normalized: bool = False

    def __post_init__(self):
        self.left_hand = np.asarray(self.left_hand, dtype=np.float64)
        self.right_hand = np.asarray(self.right_hand, dtype=np.float64)
        self.arms = np.asarray(self.arms, dtype=np.float64)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

        num_frames = self.left_hand.shape[0] if self.left_hand.ndim == 3 else -1
        if num_frames < 1:
            raise SchemaError("sequence must contain at least one frame", field="frames")
        for part, joints in PARTS.items():
            array = getattr(self, part)
            if array.shape != (num_frames, joints, 3):
                raise SchemaError(
                    f"expected shape ({num_frames}, {joints}, 3), got {array.shape}", field=part)
            if not np.all(np.isfinite(array)):
                raise SchemaError("coordinates must be finite", field=part)
            conf = array[..., 2]
            if np.any(conf < 0.0) or np.any(conf > 1.0):
                raise SchemaError("confidence must lie in [0, 1]", field=part)

    def __len__(self) -> int:
        return self.left_hand.shape[0]

    @property
    def num_frames(self) -> int:
        return len(self)

    @property
    def frames(self) -> List[PoseFrame]:
        return [self.frame(t) for t in range(len(self))]

    def frame(self, t: int) -> PoseFrame:
        return PoseFrame(self.left_hand[t], self.right_hand[t], self.arms[t])

    def hands(self) -> np.ndarray:
        """Both hands stacked as (T, 2, 21, 3), left first"""
        return np.stack([self.left_hand, self.right_hand], axis=1)

    def replace(self, **changes: Any) -> 'PoseSequence':
        return dataclasses.replace(self, **changes)

    def copy(self) -> 'PoseSequence':
        return self.replace(left_hand=self.left_hand.copy(),
                            right_hand=self.right_hand.copy(),
                            arms=self.arms.copy())

    def select_frames(self, indices: Sequence[int]) -> 'PoseSequence':
        idx = np.asarray(indices, dtype=np.int64)
        return self.replace(left_hand=self.left_hand[idx].copy(),
                            right_hand=self.right_hand[idx].copy(),
                            arms=self.arms[idx].copy())

    @classmethod
    def from_frames(cls, frames: Sequence[PoseFrame], **kwargs: Any) -> 'PoseSequence':
        if not frames:
            raise SchemaError("sequence must contain at least one frame", field="frames")
        return cls(left_hand=np.stack([f.left_hand for f in frames]),
                   right_hand=np.stack([f.right_hand for f in frames]),
                   arms=np.stack([f.arms for f in frames]),
                   **kwargs)


@dataclass
class SignSample:
    """A pose sequence with whatever supervision is available for it"""
    poses: PoseSequence
    label: Optional[int] = None
    glosses: Optional[List[str]] = None
    translation: Optional[List[str]] = None

    @property
    def has_supervision(self) -> bool:
        return self.label is not None or self.glosses is not None or self.translation is not None


class Vocabulary:
    """Token <-> id map with reserved ids for CTC blank and decoder control tokens"""

    BLANK = "<blank>"
    PAD = "<pad>"
    BOS = "[bos]"
    EOS = "[eos]"
    UNK = "<unk>"
    RESERVED = (BLANK, PAD, BOS, EOS, UNK)

    BLANK_ID = 0
    PAD_ID = 1
    BOS_ID = 2
    EOS_ID = 3
    UNK_ID = 4

    def __init__(self, tokens: Iterable[str] = (), lowercase: bool = False):
        self.lowercase = lowercase
        self._id_to_token: List[str] = list(self.RESERVED)
        self._token_to_id: Dict[str, int] = {t: i for i, t in enumerate(self.RESERVED)}
        for token in tokens:
            self.add(token)

    def _norm(self, token: str) -> str:
        return token.lower() if self.lowercase else token

    def add(self, token: str) -> int:
        token = self._norm(token)
        if token in self._token_to_id:
            return self._token_to_id[token]
        self._token_to_id[token] = len(self._id_to_token)
        self._id_to_token.append(token)
        return self._token_to_id[token]

    @classmethod
    def from_sentences(cls, sentences: Iterable[Sequence[str]], lowercase: bool = False) -> 'Vocabulary':
        vocab = cls(lowercase=lowercase)
        for sentence in sentences:
            for token in sentence:
                vocab.add(token)
        return vocab

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return self._norm(token) in self._token_to_id

    def token_id(self, token: str) -> int:
        return self._token_to_id.get(self._norm(token), self.UNK_ID)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.token_id(t) for t in tokens]

    def decode(self, ids: Iterable[int], strip_reserved: bool = True) -> List[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_reserved and i < len(self.RESERVED) and i != self.UNK_ID:
                continue
            out.append(self._id_to_token[i])
        return out

    @property
    def tokens(self) -> List[str]:
        return list(self._id_to_token[len(self.RESERVED):])

    def to_dict(self) -> Dict[str, Any]:
        return {"tokens": self.tokens, "lowercase": self.lowercase}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Vocabulary':
        return cls(data.get("tokens", []), lowercase=data.get("lowercase", False))


# ---------------------------------------------------------------------------
# Pose files
# ---------------------------------------------------------------------------

def pose_sequence_to_dict(seq: PoseSequence) -> Dict[str, Any]:
    width, height = seq.image_size
    record: Dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "source_id": seq.source_id,
        "image_width": width,
        "image_height": height,
    }
    if seq.fps is not None:
        record["fps"] = seq.fps
    record["frames"] = [
        {part: getattr(seq, part)[t].tolist() for part in PARTS}
        for t in range(len(seq))
    ]
    return record


def pose_sequence_from_dict(record: Dict[str, Any], path: Optional[str] = None) -> PoseSequence:
    if not isinstance(record, dict):
        raise PoseFileError("top level must be an object", path=path)

    version = record.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})",
                          path=path, field="schema_version")

    for key in ("source_id", "image_width", "image_height", "frames"):
        if key not in record:
            raise PoseFileError("missing header field", path=path, field=key)

    frames = record["frames"]
    if not isinstance(frames, list) or not frames:
        raise SchemaError("at least one frame is required", path=path, field="frames")

    arrays: Dict[str, List[np.ndarray]] = {part: [] for part in PARTS}
    for t, frame in enumerate(frames):
        if not isinstance(frame, dict):
            raise PoseFileError("frame must be an object", path=path, frame=t)
        for part, joints in PARTS.items():
            if part not in frame:
                raise PoseFileError("missing joint array", path=path, frame=t, field=part)
            try:
                values = np.asarray(frame[part], dtype=np.float64)
            except (TypeError, ValueError) as e:
                raise PoseFileError(f"non-numeric joint data ({e})", path=path, frame=t, field=part) from e
            if values.ndim != 2 or values.shape[1] != 3:
                raise PoseFileError(f"joints must be [x, y, confidence] triples, got shape {values.shape}",
                                    path=path, frame=t, field=part)
            if values.shape[0] != joints:
                raise SchemaError(f"expected {joints} joints, got {values.shape[0]}",
                                  path=path, frame=t, field=part)
            arrays[part].append(values)

    try:
        return PoseSequence(
            left_hand=np.stack(arrays["left_hand"]),
            right_hand=np.stack(arrays["right_hand"]),
            arms=np.stack(arrays["arms"]),
            source_id=str(record["source_id"]),
            image_size=(record["image_width"], record["image_height"]),
            fps=record.get("fps"),
        )
    except SchemaError as e:
        raise SchemaError(str(e), path=path) from e


def load_pose_file(path: Union[str, Path]) -> PoseSequence:
    """Read and validate one pose file"""
    path = Path(path)
    try:
        record = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise PoseFileError(f"invalid JSON at line {e.lineno}: {e.msg}", path=str(path)) from e
    return pose_sequence_from_dict(record, path=str(path))


def save_pose_file(seq: PoseSequence, path: Union[str, Path]) -> None:
    """Write a pose file; coordinates must be in pixel space"""
    if seq.normalized:
        raise ValueError("pose files store pixel coordinates; denormalize the sequence first")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(pose_sequence_to_dict(seq)))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def _map_coordinates(seq: PoseSequence, fn) -> Dict[str, np.ndarray]:
    mapped = {}
    for part in PARTS:
        array = getattr(seq, part).copy()
        missing = array[..., 2] == 0.0
        array[..., :2] = fn(array[..., :2])
        array[missing, :2] = 0.0
        mapped[part] = array
    return mapped


def normalize_sequence(seq: PoseSequence) -> PoseSequence:
    """Map pixels to [-0.5, 0.5] per axis via (x / width - 0.5, y / height - 0.5)"""
    width, height = seq.image_size
    if width <= 0 or height <= 0:
        raise ValueError(f"image size must be positive, got {seq.image_size}")
    if seq.normalized:
        raise ValueError(f"sequence '{seq.source_id}' is already normalized")
    scale = np.array([width, height], dtype=np.float64)
    mapped = _map_coordinates(seq, lambda xy: xy / scale - 0.5)
    return seq.replace(normalized=True, **mapped)


def denormalize_sequence(seq: PoseSequence) -> PoseSequence:
    """Inverse of normalize_sequence"""
    width, height = seq.image_size
    if width <= 0 or height <= 0:
        raise ValueError(f"image size must be positive, got {seq.image_size}")
    if not seq.normalized:
        raise ValueError(f"sequence '{seq.source_id}' is not normalized")
    scale = np.array([width, height], dtype=np.float64)
    mapped = _map_coordinates(seq, lambda xy: (xy + 0.5) * scale)
    return seq.replace(normalized=False, **mapped)


# ---------------------------------------------------------------------------
# Random moving augmentation
# ---------------------------------------------------------------------------

@dataclass
class MovingTrajectory:
    """Per-frame global similarity transform: rotation (rad), scale, translation"""
    angles: np.ndarray
    scales: np.ndarray
    translations: np.ndarray

    @classmethod
    def identity(cls, num_frames: int) -> 'MovingTrajectory':
        return cls(np.zeros(num_frames), np.ones(num_frames), np.zeros((num_frames, 2)))


def sample_moving_trajectory(num_frames: int, strength: float, rng: np.random.Generator,
                             keyframes: int = 3, max_angle_deg: float = 10.0,
                             max_scale_change: float = 0.1,
                             max_translation: float = 0.1) -> MovingTrajectory:
    """Draw transform keyframes and interpolate them linearly across the frames"""
    if strength < 0:
        raise ValueError(f"strength must be non-negative, got {strength}")
    if strength == 0:
        return MovingTrajectory.identity(num_frames)

    keyframes = max(2, keyframes)
    nodes = np.linspace(0, max(num_frames - 1, 1), keyframes)
    angles = rng.uniform(-max_angle_deg, max_angle_deg, keyframes) * strength * np.pi / 180.0
    scales = 1.0 + rng.uniform(-max_scale_change, max_scale_change, keyframes) * strength
    shifts = rng.uniform(-max_translation, max_translation, (keyframes, 2)) * strength

    t = np.arange(num_frames, dtype=np.float64)
    return MovingTrajectory(
        angles=np.interp(t, nodes, angles),
        scales=np.interp(t, nodes, scales),
        translations=np.stack([np.interp(t, nodes, shifts[:, 0]),
                               np.interp(t, nodes, shifts[:, 1])], axis=1),
    )


def apply_moving_trajectory(seq: PoseSequence, trajectory: MovingTrajectory) -> PoseSequence:
    """Apply p' = s_t R_t p + tau_t to every detected joint of frame t"""
    cos, sin = np.cos(trajectory.angles), np.sin(trajectory.angles)
    rot = np.stack([np.stack([cos, -sin], -1), np.stack([sin, cos], -1)], -2)  # (T, 2, 2)
    rot = rot * trajectory.scales[:, None, None]

    moved = {}
    for part in PARTS:
        array = getattr(seq, part).copy()
        xy = np.einsum("tij,tnj->tni", rot, array[..., :2]) + trajectory.translations[:, None, :]
        detected = array[..., 2] > 0.0
        array[..., :2] = np.where(detected[..., None], xy, array[..., :2])
        moved[part] = array
    return seq.replace(**moved)


def random_moving_augment(seq: PoseSequence, strength: float, rng: np.random.Generator) -> PoseSequence:
    """Smooth random rotation/scale/translation over the whole sequence"""
    if strength == 0:
        return seq.copy()
    trajectory = sample_moving_trajectory(len(seq), strength, rng)
    return apply_moving_trajectory(seq, trajectory)


# ---------------------------------------------------------------------------
# Temporal sampling
# ---------------------------------------------------------------------------

def segment_indices(num_frames: int, target: int, mode: str,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One frame per equal segment; when target > T frames repeat (nearest lower frame)"""
    edges = np.linspace(0.0, float(num_frames), target + 1)
    starts, ends = edges[:-1], edges[1:]
    if mode == "segment_center":
        picks = np.floor((starts + ends) / 2.0)
    else:
        if rng is None:
            raise ValueError("segment_random sampling needs a random generator")
        picks = np.floor(rng.uniform(starts, ends))
        picks = np.maximum(picks, np.floor(starts))
    return np.clip(picks, 0, num_frames - 1).astype(np.int64)


def sample_frame_indices(num_frames: int, mode: str, target: Optional[float] = None,
                         rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Frame indices for the fine-tuning pipelines.

    segment_random / segment_center: `target` equal segments, one frame each.
    fraction_random: sorted random subset of ceil(target * T) frames.
    all: every frame.
    """
    if mode not in SAMPLING_MODES:
        raise ValueError(f"unknown sampling mode {mode!r}; expected one of {SAMPLING_MODES}")

    if mode == "all":
        return np.arange(num_frames)

    if mode == "fraction_random":
        if target is None or not 0.0 < target <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {target}")
        if rng is None:
            raise ValueError("fraction_random sampling needs a random generator")
        keep = min(num_frames, max(1, math.ceil(target * num_frames - 1e-9)))
        return np.sort(rng.choice(num_frames, size=keep, replace=False))

    if target is None or int(target) != target or target < 1:
        raise ValueError(f"segment sampling needs a positive integer length, got {target}")
    return segment_indices(num_frames, int(target), mode, rng)


def temporal_sample(seq: PoseSequence, mode: str, target: Optional[float] = None,
                    rng: Optional[np.random.Generator] = None) -> PoseSequence:
    """Apply sample_frame_indices to a sequence"""
    return seq.select_frames(sample_frame_indices(len(seq), mode, target, rng))


# ---------------------------------------------------------------------------
# Corpus manifests
# ---------------------------------------------------------------------------

def _split_tokens(value: Any, lowercase: bool) -> Optional[List[str]]:
    if value is None:
        return None
    tokens = value.split() if isinstance(value, str) else [str(v) for v in value]
    return [t.lower() for t in tokens] if lowercase else tokens


def load_manifest(path: Union[str, Path], lowercase: bool = False) -> List[SignSample]:
    """Load a manifest (JSON list of {pose_file, label?, glosses?, translation?})"""
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise PoseFileError(f"invalid manifest JSON at line {e.lineno}: {e.msg}", path=str(path)) from e
    if not isinstance(entries, list):
        raise PoseFileError("manifest must be a list of records", path=str(path))

    samples = []
    for i, entry in enumerate(entries):
        if "pose_file" not in entry:
            raise PoseFileError(f"manifest record {i} lacks 'pose_file'", path=str(path))
        poses = load_pose_file(path.parent / entry["pose_file"])
        samples.append(SignSample(
            poses=poses,
            label=entry.get("label"),
            glosses=_split_tokens(entry.get("glosses"), lowercase),
            translation=_split_tokens(entry.get("translation"), lowercase),
        ))
    logger.info(f"Loaded {len(samples)} samples from {path}")
    return samples


def save_manifest(samples: Sequence[SignSample], path: Union[str, Path],
                  pose_dir: str = "poses") -> None:
    """Write pose files under `pose_dir` (relative to the manifest) plus the manifest"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for sample in samples:
        rel = f"{pose_dir}/{sample.poses.source_id}.json"
        save_pose_file(sample.poses, path.parent / rel)
        entry: Dict[str, Any] = {"pose_file": rel}
        if sample.label is not None:
            entry["label"] = int(sample.label)
        if sample.glosses is not None:
            entry["glosses"] = " ".join(sample.glosses)
        if sample.translation is not None:
            entry["translation"] = " ".join(sample.translation)
        entries.append(entry)
    path.write_text(json.dumps(entries, indent=1))
