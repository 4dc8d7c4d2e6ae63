"""
Synthetic sign corpus generator

Each gloss class is a smooth trajectory through a few random hand-gesture
keyframes (wrist position, in-plane rotation, hand size and five finger curls
per hand). Samples perturb the prototype with temporal warping, coordinate
noise and confidence drops. Continuous samples chain prototypes with short
transitions; translations come from a fixed reordering grammar over glosses.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .config import CorpusConfig
from .pose_data import PoseSequence, SignSample, save_manifest

logger = logging.getLogger(__name__)

SPLITS = (
    "pretrain",
    "isolated_train", "isolated_test",
    "continuous_train", "continuous_test",
    "translation_train", "translation_test",
)

# per-hand gesture parameters: cx, cy, rotation, size, curl x 5
PARAMS_PER_HAND = 9

# thumb, index, middle, ring, little; angles relative to "fingers up"
FINGER_ANGLES = np.deg2rad([-55.0, -15.0, 0.0, 15.0, 32.0])
# wrist->base, then three phalanges, as a fraction of hand size
FINGER_SEGMENTS = np.array([
    [0.22, 0.25, 0.22, 0.18],
    [0.50, 0.30, 0.20, 0.17],
    [0.52, 0.33, 0.22, 0.18],
    [0.50, 0.30, 0.20, 0.17],
    [0.45, 0.25, 0.17, 0.15],
])
FINGER_BEND = np.deg2rad([30.0, 75.0, 80.0, 75.0, 80.0])

GRAMMAR_CATEGORIES = ("noun", "verb", "adj")


@dataclass
class SyntheticCorpus:
    splits: Dict[str, List[SignSample]]
    glosses: List[str]
    # class keyframes (G, K, 2, 9)
    prototypes: np.ndarray
    # clean gesture-parameter trajectories (T, 2, 9) keyed by source_id
    trajectories: Dict[str, np.ndarray] = field(default_factory=dict)

    def lexicon(self) -> Dict[str, str]:
        return {g: gloss_word(g) for g in self.glosses}


def gloss_name(index: int) -> str:
    return f"g{index}"


def gloss_index(gloss: str) -> int:
    if not gloss.startswith("g") or not gloss[1:].isdigit():
        raise ValueError(f"not a synthetic gloss: {gloss!r}")
    return int(gloss[1:])


def gloss_category(gloss: str) -> str:
    return GRAMMAR_CATEGORIES[gloss_index(gloss) % len(GRAMMAR_CATEGORIES)]


def gloss_word(gloss: str) -> str:
    return f"{gloss_category(gloss)}{gloss_index(gloss)}"


def translate_glosses(glosses: Sequence[str]) -> List[str]:
    """
    The fixed gloss-to-text grammar.

    Verbs move to the end of the sentence (stable order), every noun gets
    "the", consecutive nouns are joined by "and", and an adjective that
    directly follows a noun is preceded by "is".
    """
    ordered = [g for g in glosses if gloss_category(g) != "verb"]
    ordered += [g for g in glosses if gloss_category(g) == "verb"]

    words: List[str] = []
    previous: Optional[str] = None
    for gloss in ordered:
        category = gloss_category(gloss)
        if category == "noun":
            if previous == "noun":
                words.append("and")
            words.append("the")
        elif category == "adj" and previous == "noun":
            words.append("is")
        words.append(gloss_word(gloss))
        previous = category
    return words


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_hand(params: np.ndarray, side: float) -> np.ndarray:
    """Planar hand from (T, 9) gesture parameters -> (T, 21, 2) normalized coordinates"""
    wrist = params[:, 0:2]
    rotation = params[:, 2]
    size = params[:, 3]
    curls = params[:, 4:9]

    joints = np.zeros((params.shape[0], 21, 2))
    joints[:, 0] = wrist
    for finger in range(5):
        angle = rotation + side * FINGER_ANGLES[finger]
        point = wrist.copy()
        for segment in range(4):
            if segment > 0:
                angle = angle + side * curls[:, finger] * FINGER_BEND[finger]
            step = size * FINGER_SEGMENTS[finger, segment]
            point = point + step[:, None] * np.stack([np.sin(angle), -np.cos(angle)], axis=1)
            joints[:, 1 + 4 * finger + segment] = point
    return joints


def render_arms(left_wrist: np.ndarray, right_wrist: np.ndarray) -> np.ndarray:
    """Neck, shoulders and elbows follow the wrists -> (T, 7, 2)"""
    num_frames = left_wrist.shape[0]
    neck = np.tile([0.0, -0.25], (num_frames, 1))
    left_shoulder = np.tile([0.15, -0.2], (num_frames, 1))
    right_shoulder = np.tile([-0.15, -0.2], (num_frames, 1))
    sag = np.array([0.0, 0.1])
    left_elbow = (left_shoulder + left_wrist) / 2 + sag
    right_elbow = (right_shoulder + right_wrist) / 2 + sag
    return np.stack([neck, left_shoulder, left_elbow, left_wrist,
                     right_shoulder, right_elbow, right_wrist], axis=1)


def render_trajectory(trajectory: np.ndarray, config: CorpusConfig, source_id: str) -> PoseSequence:
    """Noise-free pixel-space PoseSequence for a (T, 2, 9) parameter trajectory"""
    left = render_hand(trajectory[:, 0], side=-1.0)
    right = render_hand(trajectory[:, 1], side=1.0)
    arms = render_arms(left[:, 0], right[:, 0])
    scale = np.array([config.image_width, config.image_height], dtype=np.float64)

    def to_pixels(xy: np.ndarray) -> np.ndarray:
        conf = np.ones(xy.shape[:-1] + (1,))
        return np.concatenate([(xy + 0.5) * scale, conf], axis=-1)

    return PoseSequence(
        left_hand=to_pixels(left),
        right_hand=to_pixels(right),
        arms=to_pixels(arms),
        source_id=source_id,
        image_size=(config.image_width, config.image_height),
        fps=config.fps,
    )


# ---------------------------------------------------------------------------
# Prototypes and samples
# ---------------------------------------------------------------------------

def sample_keyframes(config: CorpusConfig, rng: np.random.Generator) -> np.ndarray:
    """Random gesture keyframes for one class -> (K, 2, 9)"""
    k = max(2, config.keyframes_per_sign)
    keyframes = np.zeros((k, 2, PARAMS_PER_HAND))
    for hand, x_center in ((0, 0.12), (1, -0.12)):
        keyframes[:, hand, 0] = x_center + rng.uniform(-0.1, 0.1, k)
        keyframes[:, hand, 1] = 0.1 + rng.uniform(-0.1, 0.1, k)
        keyframes[:, hand, 2] = rng.uniform(-0.5, 0.5, k)
        keyframes[:, hand, 3] = 0.08 * rng.uniform(0.85, 1.15, k)
        keyframes[:, hand, 4:9] = rng.uniform(0.0, 1.0, (k, 5))
    return keyframes


def interpolate_keyframes(keyframes: np.ndarray, num_frames: int, warp: float = 1.0) -> np.ndarray:
    """Smoothstep interpolation through keyframes; warp != 1 bends the time axis"""
    k = keyframes.shape[0]
    v = np.linspace(0.0, 1.0, num_frames) if num_frames > 1 else np.zeros(1)
    u = (k - 1) * v ** warp
    index = np.clip(np.floor(u).astype(np.int64), 0, k - 2)
    frac = u - index
    smooth = frac * frac * (3.0 - 2.0 * frac)
    start, end = keyframes[index], keyframes[index + 1]
    return start + (end - start) * smooth[:, None, None]


def transition(a: np.ndarray, b: np.ndarray, num_frames: int) -> np.ndarray:
    """Linear parameter path strictly between two poses"""
    if num_frames <= 0:
        return np.zeros((0,) + a.shape)
    w = np.arange(1, num_frames + 1) / (num_frames + 1)
    return a[None] + (b - a)[None] * w[:, None, None]


def _sign_trajectory(keyframes: np.ndarray, config: CorpusConfig,
                     rng: np.random.Generator) -> np.ndarray:
    noise = config.noise_level
    if noise == 0:
        return interpolate_keyframes(keyframes, config.frames_per_sign)
    jitter = int(round(rng.uniform(-0.25, 0.25) * noise * config.frames_per_sign))
    num_frames = max(2, config.frames_per_sign + jitter)
    warp = float(np.exp(rng.uniform(-0.3, 0.3) * noise))
    trajectory = interpolate_keyframes(keyframes, num_frames, warp)
    # small per-sample offset of both wrists
    trajectory[:, :, 0:2] += rng.normal(0.0, 0.015 * noise, 2)
    return trajectory


def _perturb(seq: PoseSequence, config: CorpusConfig, rng: np.random.Generator) -> PoseSequence:
    """Coordinate noise and confidence drops in pixel space"""
    noise = config.noise_level
    if noise == 0:
        return seq
    pixel_std = 0.004 * noise * np.array([config.image_width, config.image_height])
    parts = {}
    for part in ("left_hand", "right_hand", "arms"):
        array = getattr(seq, part).copy()
        array[..., :2] += rng.normal(0.0, 1.0, array[..., :2].shape) * pixel_std
        shape = array.shape[:-1]
        array[..., 2] = np.clip(1.0 - np.abs(rng.normal(0.0, 0.05 * noise, shape)), 0.5, 1.0)

        drop_rate = min(1.0, config.confidence_drop_rate * noise)
        dropped = rng.random(shape) < drop_rate
        array[..., 2] = np.where(dropped, rng.uniform(0.05, 0.45, shape), array[..., 2])
        missing = rng.random(shape) < drop_rate / 5.0
        array[missing] = 0.0
        parts[part] = array
    return seq.replace(**parts)


def render_sample(trajectory: np.ndarray, config: CorpusConfig, source_id: str,
                  rng: np.random.Generator) -> PoseSequence:
    return _perturb(render_trajectory(trajectory, config, source_id), config, rng)


def continuous_trajectory(glosses: Sequence[str], prototypes: np.ndarray, config: CorpusConfig,
                          rng: np.random.Generator) -> np.ndarray:
    pieces: List[np.ndarray] = []
    for gloss in glosses:
        sign = _sign_trajectory(prototypes[gloss_index(gloss)], config, rng)
        if pieces:
            pieces.append(transition(pieces[-1][-1], sign[0], config.transition_frames))
        pieces.append(sign)
    return np.concatenate(pieces, axis=0)


def _random_sentence(num_classes: int, config: CorpusConfig, rng: np.random.Generator) -> List[str]:
    length = int(rng.integers(config.min_sentence_length, config.max_sentence_length + 1))
    sentence: List[int] = []
    while len(sentence) < length:
        g = int(rng.integers(num_classes))
        # adjacent repeats would need a blank between them under CTC; keep sentences simple
        if sentence and sentence[-1] == g and num_classes > 1:
            continue
        sentence.append(g)
    return [gloss_name(g) for g in sentence]


def generate_synthetic_corpus(config: CorpusConfig, rng: np.random.Generator) -> SyntheticCorpus:
    """Build every split of the synthetic corpus from one seeded generator"""
    if config.num_classes <= 0:
        raise ValueError(f"num_classes must be positive, got {config.num_classes}")
    if config.frames_per_sign < 1:
        raise ValueError(f"frames_per_sign must be positive, got {config.frames_per_sign}")
    if not 1 <= config.min_sentence_length <= config.max_sentence_length:
        raise ValueError("sentence length range must satisfy 1 <= min <= max")
    if config.noise_level < 0:
        raise ValueError(f"noise_level must be non-negative, got {config.noise_level}")

    glosses = [gloss_name(g) for g in range(config.num_classes)]
    prototypes = np.stack([sample_keyframes(config, rng) for _ in glosses])
    logger.info(f"Generating synthetic corpus with {config.num_classes} classes "
                f"(noise level {config.noise_level})")

    splits: Dict[str, List[SignSample]] = {name: [] for name in SPLITS}
    trajectories: Dict[str, np.ndarray] = {}

    def add(split: str, trajectory: np.ndarray, **supervision) -> None:
        source_id = f"{split}_{len(splits[split]):05d}"
        trajectories[source_id] = trajectory
        poses = render_sample(trajectory, config, source_id, rng)
        splits[split].append(SignSample(poses=poses, **supervision))

    for split, per_class in (("isolated_train", config.samples_per_class),
                             ("isolated_test", config.test_per_class)):
        for label in range(config.num_classes):
            for _ in range(per_class):
                add(split, _sign_trajectory(prototypes[label], config, rng), label=label)

    for split, count in (("continuous_train", config.continuous_train),
                         ("continuous_test", config.continuous_test)):
        for _ in range(count):
            sentence = _random_sentence(config.num_classes, config, rng)
            add(split, continuous_trajectory(sentence, prototypes, config, rng), glosses=sentence)

    for split, count in (("translation_train", config.translation_train),
                         ("translation_test", config.translation_test)):
        for _ in range(count):
            sentence = _random_sentence(config.num_classes, config, rng)
            add(split, continuous_trajectory(sentence, prototypes, config, rng),
                glosses=sentence, translation=translate_glosses(sentence))

    # unlabeled pool: alternate isolated signs and sentences
    for i in range(config.pretrain_samples):
        if i % 2 == 0:
            label = int(rng.integers(config.num_classes))
            add("pretrain", _sign_trajectory(prototypes[label], config, rng))
        else:
            sentence = _random_sentence(config.num_classes, config, rng)
            add("pretrain", continuous_trajectory(sentence, prototypes, config, rng))

    for split, samples in splits.items():
        logger.debug(f"Split {split}: {len(samples)} samples")
    return SyntheticCorpus(splits=splits, glosses=glosses, prototypes=prototypes,
                           trajectories=trajectories)


def prototype_sequence(corpus: SyntheticCorpus, label: int, config: CorpusConfig) -> PoseSequence:
    """Noise-free rendering of one class prototype"""
    trajectory = interpolate_keyframes(corpus.prototypes[label], config.frames_per_sign)
    return render_trajectory(trajectory, config, source_id=f"prototype_{label:03d}")


def synthesize_rgb_features(corpus: SyntheticCorpus, split: str, dim: int, noise: float,
                            rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """
    Second-modality stand-in: a fixed random projection of the clean gesture
    parameters with its own additive noise, one (T, dim) array per source_id.
    """
    projection = np.random.default_rng(12345).normal(0.0, 1.0, (2 * PARAMS_PER_HAND, dim))
    features = {}
    for sample in corpus.splits[split]:
        source_id = sample.poses.source_id
        flat = corpus.trajectories[source_id].reshape(-1, 2 * PARAMS_PER_HAND)
        clean = np.tanh(flat @ projection)
        features[source_id] = (clean + rng.normal(0.0, noise, clean.shape)).astype(np.float32)
    return features


def write_corpus(corpus: SyntheticCorpus, out_dir: Union[str, Path],
                 splits: Optional[Sequence[str]] = None) -> Dict[str, Path]:
    """Write pose files and one manifest per split; returns manifest paths"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests = {}
    for split in splits or SPLITS:
        manifest = out_dir / split / "manifest.json"
        save_manifest(corpus.splits[split], manifest)
        manifests[split] = manifest
        logger.info(f"Wrote {len(corpus.splits[split])} samples to {manifest}")

    info = {"glosses": corpus.glosses, "lexicon": corpus.lexicon(), "splits": list(manifests)}
    (out_dir / "corpus.json").write_text(json.dumps(info, indent=2))
    return manifests
