"""
Multi-level corruption for masked pose modeling

Tokens are (frame, hand) pairs. A MaskPlan picks floor(R * 2T) of them and
assigns each one of four operations: joint (mask m joints), frame (zero the
hand), clip (zero the hand over a span of 2..K frames) or identity (leave the
token unchanged but still reconstruct it).
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from .config import MaskingConfig
from .pose_data import HAND_SIDES, NUM_HAND_JOINTS, PoseSequence

logger = logging.getLogger(__name__)

OPS = ("joint", "frame", "clip", "identity")
JOINT, FRAME, CLIP, IDENTITY = range(4)


@dataclass
class MaskPlan:
    """
    Sampled corruption schedule, one row per chosen token.

    span_starts/span_lengths describe the frames an entry corrupts; for
    non-clip ops the span is the single chosen frame.
    """
    num_frames: int
    frames: np.ndarray
    hands: np.ndarray
    ops: np.ndarray
    joint_ids: np.ndarray
    span_starts: np.ndarray
    span_lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.frames)

    @classmethod
    def empty(cls, num_frames: int, joints_per_token: int = 1) -> 'MaskPlan':
        none = np.zeros(0, dtype=np.int64)
        return cls(num_frames, none, none.copy(), none.copy(),
                   np.zeros((0, joints_per_token), dtype=np.int64), none.copy(), none.copy())

    @property
    def entries(self) -> List[Dict[str, Any]]:
        out = []
        for i in range(len(self)):
            op = int(self.ops[i])
            out.append({
                "frame": int(self.frames[i]),
                "hand": HAND_SIDES[int(self.hands[i])],
                "op": OPS[op],
                "joint_ids": self.joint_ids[i].tolist() if op == JOINT else None,
                "span": (int(self.span_starts[i]), int(self.span_lengths[i])) if op == CLIP else None,
            })
        return out

    def _coverage(self, select: np.ndarray) -> np.ndarray:
        diff = np.zeros((self.num_frames + 1, 2), dtype=np.int64)
        np.add.at(diff, (self.span_starts[select], self.hands[select]), 1)
        np.add.at(diff, (self.span_starts[select] + self.span_lengths[select], self.hands[select]), -1)
        return np.cumsum(diff, axis=0)[:-1] > 0

    def corrupted_mask(self) -> np.ndarray:
        """(T, 2) tokens whose input is altered by a joint, frame or clip entry"""
        return self._coverage(self.ops != IDENTITY)

    def identity_mask(self) -> np.ndarray:
        return self._coverage(self.ops == IDENTITY)

    def target_mask(self, include_identity: bool = True) -> np.ndarray:
        """(T, 2) reconstruction-target indicator"""
        target = self.corrupted_mask()
        if include_identity:
            target = target | self.identity_mask()
        return target


def sample_mask_plan(num_frames: int, mask_ratio: float, clip_span: int, joints_per_token: int,
                     rng: np.random.Generator, ops: Sequence[str] = OPS) -> MaskPlan:
    """Choose floor(R * 2T) tokens without replacement and draw one op for each"""
    if num_frames < 1:
        raise ValueError(f"sequence must have at least one frame, got {num_frames}")
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {mask_ratio}")
    if clip_span < 2:
        raise ValueError(f"clip span must be at least 2, got {clip_span}")
    if not 1 <= joints_per_token <= NUM_HAND_JOINTS:
        raise ValueError(f"joints per token must lie in [1, {NUM_HAND_JOINTS}], got {joints_per_token}")
    unknown = set(ops) - set(OPS)
    if not ops or unknown:
        raise ValueError(f"ops must be a non-empty subset of {OPS}, got {list(ops)}")

    num_tokens = 2 * num_frames
    count = int(np.floor(mask_ratio * num_tokens + 1e-9))
    if count == 0:
        return MaskPlan.empty(num_frames, joints_per_token)

    chosen = rng.choice(num_tokens, size=count, replace=False)
    frames = chosen // 2
    hands = chosen % 2
    allowed = np.array([OPS.index(op) for op in ops], dtype=np.int64)
    op_ids = allowed[rng.integers(len(allowed), size=count)]
    joint_ids = np.argsort(rng.random((count, NUM_HAND_JOINTS)), axis=1)[:, :joints_per_token]
    drawn = rng.integers(2, clip_span + 1, size=count)

    starts = frames.copy()
    lengths = np.ones(count, dtype=np.int64)
    clips = op_ids == CLIP
    if num_frames < 2:
        # no room for a span of two frames
        op_ids = np.where(clips, FRAME, op_ids)
    else:
        room = num_frames - frames
        span = np.minimum(drawn, room)
        short = span < 2
        # anchored on the last frame: shift back so the span ends there
        span = np.where(short, np.minimum(drawn, num_frames), span)
        clip_starts = np.where(short, num_frames - span, frames)
        starts = np.where(clips, clip_starts, starts)
        lengths = np.where(clips, span, lengths)

    return MaskPlan(num_frames=num_frames, frames=frames.astype(np.int64), hands=hands.astype(np.int64),
                    ops=op_ids, joint_ids=joint_ids.astype(np.int64),
                    span_starts=starts.astype(np.int64), span_lengths=lengths.astype(np.int64))


def _bbox_diagonal(joints: np.ndarray) -> float:
    detected = joints[joints[:, 2] > 0.0] if np.any(joints[:, 2] > 0.0) else joints
    extent = detected[:, :2].max(axis=0) - detected[:, :2].min(axis=0)
    return float(np.hypot(extent[0], extent[1]))


def apply_mask_plan(seq: PoseSequence, plan: MaskPlan, rng: np.random.Generator,
                    disturbance_scale: float = 0.1, joint_zero_prob: float = 0.5) -> PoseSequence:
    """
    Corrupt a copy of `seq` according to `plan`.

    Joint entries zero their m joints or add Gaussian disturbance with standard
    deviation disturbance_scale * hand bounding-box diagonal (zeroing chosen
    with probability joint_zero_prob). Frame and clip entries zero the whole
    hand. Confidences are never changed.
    """
    if plan.num_frames != len(seq):
        raise ValueError(f"plan covers {plan.num_frames} frames but sequence has {len(seq)}")
    hands = seq.hands().copy()

    for i in np.flatnonzero(plan.ops == JOINT):
        t, h, ids = plan.frames[i], plan.hands[i], plan.joint_ids[i]
        if rng.random() < joint_zero_prob:
            hands[t, h, ids, :2] = 0.0
        else:
            std = disturbance_scale * _bbox_diagonal(seq.hands()[t, h])
            hands[t, h, ids, :2] += rng.normal(0.0, 1.0, (len(ids), 2)) * std

    zeroed = plan._coverage((plan.ops == FRAME) | (plan.ops == CLIP))
    hands[..., :2][zeroed] = 0.0

    return seq.replace(left_hand=hands[:, 0], right_hand=hands[:, 1], arms=seq.arms.copy())


def corrupt(seq: PoseSequence, config: MaskingConfig, rng: np.random.Generator,
            ops: Sequence[str] = OPS, joint_zero_prob: float = 0.5) -> Tuple[PoseSequence, MaskPlan]:
    """Sample a plan from `config` and apply it; the caller keeps `seq` as the target"""
    plan = sample_mask_plan(len(seq), config.mask_ratio, config.clip_span,
                            config.joints_per_token, rng, ops=ops)
    return apply_mask_plan(seq, plan, rng, config.disturbance_scale, joint_zero_prob), plan


def parse_mask_ops(name: str) -> Tuple[str, ...]:
    """CLI mask choice -> op subset; 'mixed' is all four"""
    if name == "mixed":
        return OPS
    if name not in ("joint", "frame", "clip"):
        raise ValueError(f"unknown mask mode {name!r}; expected joint, frame, clip or mixed")
    return (name,)
