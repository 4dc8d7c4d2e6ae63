"""
Task heads on top of the pretrained encoder: isolated classification,
continuous recognition with CTC, translation with a Transformer decoder, and
the fusion pathways fed by precomputed second-modality features
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .config import FinetuneConfig, TransformerConfig
from .embedding import PositionalEncoding
from .pose_data import Vocabulary
from .transformer import TransformerDecoder, TransformerEncoder

logger = logging.getLogger(__name__)

POOL_WINDOW = 4
# ids the translation decoder never emits
NON_EMITTING = (Vocabulary.BLANK_ID, Vocabulary.PAD_ID, Vocabulary.BOS_ID)


# ---------------------------------------------------------------------------
# Isolated recognition
# ---------------------------------------------------------------------------

def attention_merge(features: torch.Tensor, logits: torch.Tensor,
                    padding: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    o = softmax_t(logits) . F

    features (B, T, d), logits (B, T); padded frames get zero weight.
    Returns the merged vectors (B, d) and the weights (B, T).
    """
    if features.shape[:2] != logits.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match features {tuple(features.shape)}")
    if padding is not None:
        logits = logits.masked_fill(padding, float("-inf"))
    weights = torch.softmax(logits, dim=1)
    return torch.einsum("bt,btd->bd", weights, features), weights


class ClassifierHead(nn.Module):
    """Temporal attention merge followed by an MLP classifier"""

    def __init__(self, d_model: int, num_classes: int, hidden: Optional[int] = None, dropout: float = 0.1):
        super().__init__()
        hidden = hidden or d_model
        self.score = nn.Linear(d_model, 1)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, hidden),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, num_classes),
        )

    def merge(
        self, features: torch.Tensor, padding: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        return attention_merge(features, self.score(features).squeeze(-1), padding)

    def forward(self, features: torch.Tensor, padding: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Class logits (B, num_classes)"""
        merged, _ = self.merge(features, padding)
        return self.mlp(merged)


def classify(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)


def late_fuse_scores(score_pose: Union[np.ndarray, torch.Tensor],
                     score_rgb: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """Argmax of the summed prediction scores, per sample"""
    pose = np.asarray(score_pose.detach().cpu() if isinstance(score_pose, torch.Tensor) else score_pose)
    rgb = np.asarray(score_rgb.detach().cpu() if isinstance(score_rgb, torch.Tensor) else score_rgb)
    if pose.shape != rgb.shape:
        raise ValueError(f"score shapes differ: {pose.shape} vs {rgb.shape}")
    return np.argmax(pose + rgb, axis=-1)


# ---------------------------------------------------------------------------
# Temporal pooling
# ---------------------------------------------------------------------------

def pooled_length(length: int, window: int = POOL_WINDOW) -> int:
    return math.ceil(length / window)


def pool_padding(padding: Optional[torch.Tensor], frames: int, batch: int,
                 window: int = POOL_WINDOW, device: Optional[torch.device] = None) -> torch.Tensor:
    """A pooled step is padding iff every frame in its window is padding"""
    if padding is None:
        return torch.zeros(batch, pooled_length(frames, window), dtype=torch.bool, device=device)
    lengths = (~padding).sum(dim=1)
    pooled = torch.div(lengths + window - 1, window, rounding_mode="floor")
    steps = torch.arange(pooled_length(frames, window), device=padding.device)
    return steps.unsqueeze(0) >= pooled.unsqueeze(1)


def temporal_pool(features: torch.Tensor, padding: Optional[torch.Tensor] = None,
                  window: int = POOL_WINDOW) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Average pooling, window = stride = 4, over valid frames only.

    The tail is padded; a partial last window averages the frames it has.
    Returns (B, ceil(T/4), d) and the pooled padding mask.
    """
    batch, frames, dim = features.shape
    steps = pooled_length(frames, window)
    valid = torch.ones(batch, frames, dtype=features.dtype, device=features.device)
    if padding is not None:
        valid = (~padding).to(features.dtype)
    extra = steps * window - frames
    summed = F.pad(features * valid.unsqueeze(-1), (0, 0, 0, extra)).view(batch, steps, window, dim).sum(2)
    counts = F.pad(valid, (0, extra)).view(batch, steps, window).sum(2)
    pooled = summed / counts.clamp_min(1.0).unsqueeze(-1)
    return pooled, pool_padding(padding, frames, batch, window, features.device)


class ConvTemporalPool(nn.Module):
    """Learned alternative: strided 1D convolution with the same window and stride"""

    def __init__(self, d_model: int, window: int = POOL_WINDOW):
        super().__init__()
        self.window = window
        self.conv = nn.Conv1d(d_model, d_model, kernel_size=window, stride=window)

    def forward(self, features: torch.Tensor,
                padding: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        batch, frames, _ = features.shape
        if padding is not None:
            features = features.masked_fill(padding.unsqueeze(-1), 0.0)
        extra = pooled_length(frames, self.window) * self.window - frames
        x = F.pad(features, (0, 0, 0, extra)).transpose(1, 2)
        pooled = self.conv(x).transpose(1, 2)
        return pooled, pool_padding(padding, frames, batch, self.window, features.device)


# ---------------------------------------------------------------------------
# Continuous recognition
# ---------------------------------------------------------------------------

class CTCHead(nn.Module):
    """Pool to a quarter of the input length, then project onto glosses + blank"""

    def __init__(self, d_model: int, vocab_size: int, pooling: str = "average"):
        super().__init__()
        if pooling not in ("average", "conv"):
            raise ValueError(f"unknown pooling {pooling!r}")
        self.pooling = pooling
        self.conv_pool = ConvTemporalPool(d_model) if pooling == "conv" else None
        self.projection = nn.Linear(d_model, vocab_size)

    def pool(self, features: torch.Tensor,
             padding: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.conv_pool is not None:
            return self.conv_pool(features, padding)
        return temporal_pool(features, padding)

    def forward(self, features: torch.Tensor,
                padding: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """(log-probs (B, T', V), pooled lengths (B,))"""
        pooled, pooled_padding = self.pool(features, padding)
        return F.log_softmax(self.projection(pooled), dim=-1), (~pooled_padding).sum(dim=1)


class ConcatFusionCSLR(nn.Module):
    """Concatenate pose and RGB features, BiLSTM, gloss projection"""

    def __init__(self, pose_dim: int, rgb_dim: int, vocab_size: int, hidden: int = 256):
        super().__init__()
        self.lstm = nn.LSTM(pose_dim + rgb_dim, hidden, batch_first=True, bidirectional=True)
        self.projection = nn.Linear(2 * hidden, vocab_size)

    def forward(self, pose: torch.Tensor, rgb: torch.Tensor,
                lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        if pose.shape[:2] != rgb.shape[:2]:
            raise ValueError(f"pose {tuple(pose.shape[:2])} and rgb {tuple(rgb.shape[:2])} are not aligned")
        x = torch.cat([pose, rgb], dim=-1)
        if lengths is None:
            out, _ = self.lstm(x)
        else:
            packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
            out, _ = self.lstm(packed)
            out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return F.log_softmax(self.projection(out), dim=-1)


def concat_fuse_cslr(fusion: ConcatFusionCSLR, pose: torch.Tensor, rgb: torch.Tensor,
                     lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
    return fusion(pose, rgb, lengths)


# ---------------------------------------------------------------------------
# Translation
# ---------------------------------------------------------------------------

def shift_targets(sentences: List[List[int]]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Teacher-forcing tensors: inputs [bos] w1..wn, outputs w1..wn [eos].

    Returns (inputs, outputs, padding) each (B, L) with L = max n + 1.
    """
    longest = max(len(s) for s in sentences) + 1
    inputs = torch.full((len(sentences), longest), Vocabulary.PAD_ID, dtype=torch.long)
    outputs = torch.full_like(inputs, Vocabulary.PAD_ID)
    for b, words in enumerate(sentences):
        inputs[b, :len(words) + 1] = torch.tensor([Vocabulary.BOS_ID] + list(words))
        outputs[b, :len(words) + 1] = torch.tensor(list(words) + [Vocabulary.EOS_ID])
    return inputs, outputs, inputs == Vocabulary.PAD_ID


class SLTHead(nn.Module):
    """Semantic modulator, word embedding + position encoding, decoder, output projection"""

    def __init__(self, d_model: int, vocab_size: int, transformer: TransformerConfig,
                 finetune: Optional[FinetuneConfig] = None, rgb_dim: Optional[int] = None):
        super().__init__()
        finetune = finetune or FinetuneConfig()
        self.d_model = d_model
        self.vocab_size = vocab_size
        self.fused = rgb_dim is not None
        self.modulator = TransformerEncoder.from_config(d_model, transformer, n_layers=finetune.modulator_layers)
        self.word_embedding = nn.Embedding(vocab_size, d_model, padding_idx=Vocabulary.PAD_ID)
        self.position = PositionalEncoding(d_model)
        self.decoder = TransformerDecoder(d_model, finetune.decoder_layers, transformer.n_heads,
                                          transformer.ff_width, transformer.dropout, fused=self.fused)
        self.output = nn.Linear(d_model, vocab_size)
        if finetune.tie_embeddings:
            self.output.weight = self.word_embedding.weight
        self.rgb_projection = nn.Linear(rgb_dim, d_model) if self.fused else None

    def encode_memory(self, tokens: torch.Tensor,
                      padding: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """M = modulator(pool(tokens)), length ceil(T/4)"""
        pooled, pooled_padding = temporal_pool(tokens, padding)
        return self.modulator(pooled, pooled_padding), pooled_padding

    def encode_rgb(self, features: torch.Tensor,
                   padding: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.rgb_projection is None:
            raise ValueError("this head was built without an RGB stream")
        return temporal_pool(self.rgb_projection(features), padding)

    def embed_words(self, words: torch.Tensor) -> torch.Tensor:
        return self.position(self.word_embedding(words) * math.sqrt(self.d_model))

    def decode(self, words: torch.Tensor, memory: torch.Tensor, memory_padding: Optional[torch.Tensor] = None,
               word_padding: Optional[torch.Tensor] = None, rgb_memory: Optional[torch.Tensor] = None,
               rgb_padding: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Per-position log-probs (B, L, V) given encoded memories"""
        hidden = self.decoder(self.embed_words(words), memory, word_padding, memory_padding,
                              rgb_memory, rgb_padding)
        return F.log_softmax(self.output(hidden), dim=-1)

    def forward(self, tokens: torch.Tensor, words: torch.Tensor, padding: Optional[torch.Tensor] = None,
                word_padding: Optional[torch.Tensor] = None, rgb: Optional[torch.Tensor] = None,
                rgb_padding: Optional[torch.Tensor] = None) -> torch.Tensor:
        memory, memory_padding = self.encode_memory(tokens, padding)
        rgb_memory = None
        if self.fused:
            if rgb is None:
                raise ValueError("fused translation needs RGB features")
            rgb_memory, rgb_padding = self.encode_rgb(rgb, rgb_padding)
        return self.decode(words, memory, memory_padding, word_padding, rgb_memory, rgb_padding)


def slt_forward(head: SLTHead, tokens: torch.Tensor, words: torch.Tensor,
                padding: Optional[torch.Tensor] = None,
                word_padding: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Teacher-forced pose-only translation log-probs"""
    if head.fused:
        raise ValueError("slt_forward is pose-only; use slt_fused_forward for a fused head")
    return head(tokens, words, padding, word_padding)


def slt_fused_forward(head: SLTHead, tokens: torch.Tensor, rgb: Optional[torch.Tensor], words: torch.Tensor,
                      padding: Optional[torch.Tensor] = None, word_padding: Optional[torch.Tensor] = None,
                      rgb_padding: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Teacher-forced translation with cascaded pose-then-RGB cross-attention"""
    if not head.fused:
        raise ValueError("head was built without an RGB stream")
    return head(tokens, words, padding, word_padding, rgb, rgb_padding)


def slt_loss(log_probs: torch.Tensor, targets: torch.Tensor, padding: Optional[torch.Tensor] = None,
             reduction: str = "sum") -> torch.Tensor:
    """
    -ln p(s | V) = sum over positions of the word cross-entropy.

    "sum" adds over the batch; "word" averages per target word.
    """
    nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if padding is not None:
        nll = nll.masked_fill(padding, 0.0)
    total = nll.sum()
    if reduction == "sum":
        return total
    if reduction == "word":
        count = nll.numel() if padding is None else int((~padding).sum())
        return total / max(1, count)
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class Hypothesis:
    words: List[int]
    log_prob: float
    finished: bool = False

    def score(self, length_penalty: float) -> float:
        return self.log_prob / max(1, len(self.words)) ** length_penalty


@torch.no_grad()
def slt_beam_search(head: SLTHead, memory: torch.Tensor, memory_padding: Optional[torch.Tensor] = None,
                    beam_width: int = 3, max_length: int = 30, length_penalty: float = 0.6,
                    rgb_memory: Optional[torch.Tensor] = None,
                    rgb_padding: Optional[torch.Tensor] = None) -> Hypothesis:
    """
    Beam search for one sample from [bos] until [eos] or `max_length` words.

    memory is (1, T1, d). Hypotheses compete on log p / len^length_penalty,
    with len counting emitted words including [eos]. Width 1 is greedy.
    """
    if beam_width < 1:
        raise ValueError(f"beam width must be at least 1, got {beam_width}")
    if memory.shape[0] != 1:
        raise ValueError("beam search decodes one sample at a time")

    alive = [Hypothesis([], 0.0)]
    finished: List[Hypothesis] = []
    for _ in range(max_length):
        words = torch.tensor([[Vocabulary.BOS_ID] + h.words for h in alive], device=memory.device)
        n = len(alive)
        log_probs = head.decode(
            words, memory.expand(n, -1, -1),
            None if memory_padding is None else memory_padding.expand(n, -1),
            None,
            None if rgb_memory is None else rgb_memory.expand(n, -1, -1),
            None if rgb_padding is None else rgb_padding.expand(n, -1),
        )[:, -1].double().cpu()
        log_probs[:, list(NON_EMITTING)] = float("-inf")

        candidates = []
        for i, hyp in enumerate(alive):
            top = torch.topk(log_probs[i], min(beam_width, log_probs.shape[-1]))
            for value, index in zip(top.values.tolist(), top.indices.tolist()):
                if value == float("-inf"):
                    continue
                candidates.append(Hypothesis(hyp.words + [index], hyp.log_prob + value,
                                             finished=index == Vocabulary.EOS_ID))
        # every candidate of one step has the same length, so raw log p ranks them
        # exactly as log p / len^length_penalty would
        candidates.sort(key=lambda h: (-h.log_prob, h.words))

        alive = []
        for hyp in candidates[:beam_width]:
            (finished if hyp.finished else alive).append(hyp)
        if not alive:
            break

    finished.extend(alive)
    return max(finished, key=lambda h: (h.score(length_penalty), [-w for w in h.words]))


def strip_eos(words: List[int]) -> List[int]:
    return words[:-1] if words and words[-1] == Vocabulary.EOS_ID else words


# ---------------------------------------------------------------------------
# Second-modality features
# ---------------------------------------------------------------------------

class FeatureStore:
    """Per-frame feature matrices (T, dim) keyed by pose source_id"""

    def __init__(self, features: Optional[Dict[str, np.ndarray]] = None):
        self.features: Dict[str, np.ndarray] = {}
        for source_id, matrix in (features or {}).items():
            self.add(source_id, matrix)

    def add(self, source_id: str, matrix: np.ndarray) -> None:
        matrix = np.asarray(matrix, dtype=np.float32)
        if matrix.ndim != 2:
            raise ValueError(f"features for '{source_id}' must be (T, dim), got {matrix.shape}")
        if self.features and matrix.shape[1] != self.dim:
            raise ValueError(f"features for '{source_id}' have dim {matrix.shape[1]}, store has {self.dim}")
        self.features[source_id] = matrix

    @property
    def dim(self) -> int:
        return next(iter(self.features.values())).shape[1] if self.features else 0

    def __len__(self) -> int:
        return len(self.features)

    def __contains__(self, source_id: str) -> bool:
        return source_id in self.features

    def get(self, source_id: str, num_frames: Optional[int] = None) -> np.ndarray:
        if source_id not in self.features:
            raise KeyError(f"no features stored for '{source_id}'")
        matrix = self.features[source_id]
        if num_frames is not None and matrix.shape[0] != num_frames:
            raise ValueError(f"features for '{source_id}' have {matrix.shape[0]} frames, pose has {num_frames}")
        return matrix

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(path, **self.features)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'FeatureStore':
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Feature file not found: {path}")
        with np.load(path) as archive:
            store = cls({key: archive[key] for key in archive.files})
        logger.info(f"Loaded {len(store)} feature sequences (dim {store.dim}) from {path}")
        return store
