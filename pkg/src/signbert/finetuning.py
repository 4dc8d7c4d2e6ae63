"""
Fine-tuning and evaluation of the downstream tasks on top of the pretrained
encoder
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import DataLoader, Dataset

from .config import RunConfig
from .ctc import ctc_beam_decode, ctc_loss
from .errors import CheckpointError, TrainingDivergedError
from .heads import (ClassifierHead, ConcatFusionCSLR, CTCHead, FeatureStore, SLTHead, late_fuse_scores,
                    shift_targets, slt_beam_search, slt_loss, strip_eos, temporal_pool)
from .metrics import (MetricReport, absent_classes, corpus_bleu, corpus_rouge_l, corpus_wer,
                      topk_accuracy)
from .pose_data import SignSample, Vocabulary, random_moving_augment, sample_frame_indices
from .pretraining import PoseEncoder, ensure_normalized, load_checkpoint, save_checkpoint
from .records import MetricLog

logger = logging.getLogger(__name__)

TASKS = ("islr", "cslr", "slt")


# ---------------------------------------------------------------------------
# Task models
# ---------------------------------------------------------------------------

class SignClassifier(nn.Module):
    """Isolated recognition: encoder + attention merge + MLP"""

    def __init__(self, config: RunConfig, num_classes: int):
        super().__init__()
        self.backbone = PoseEncoder(config)
        self.head = ClassifierHead(config.embedding.d_model, num_classes, dropout=config.transformer.dropout)

    def forward(self, hands: torch.Tensor, arms: torch.Tensor,
                padding: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.head(self.backbone(hands, arms, padding), padding)


class SignRecognizer(nn.Module):
    """Continuous recognition: encoder + CTC head, optionally fused with RGB features"""

    def __init__(self, config: RunConfig, vocab_size: int, rgb_dim: Optional[int] = None):
        super().__init__()
        d_model = config.embedding.d_model
        self.backbone = PoseEncoder(config)
        self.head = CTCHead(d_model, vocab_size, config.finetune.ctc_pooling)
        self.fusion = (ConcatFusionCSLR(d_model, rgb_dim, vocab_size, config.finetune.lstm_hidden)
                       if rgb_dim is not None else None)

    def forward(self, hands: torch.Tensor, arms: torch.Tensor, padding: Optional[torch.Tensor] = None,
                rgb: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        features = self.backbone(hands, arms, padding)
        if self.fusion is None:
            return self.head(features, padding)
        if rgb is None:
            raise ValueError("fused recognition needs RGB features")
        pooled, pooled_padding = self.head.pool(features, padding)
        rgb_pooled, _ = temporal_pool(rgb, padding)
        lengths = (~pooled_padding).sum(dim=1)
        return self.fusion(pooled, rgb_pooled, lengths), lengths


class SignTranslator(nn.Module):
    """Translation: encoder + semantic modulator + word decoder"""

    def __init__(self, config: RunConfig, vocab_size: int, rgb_dim: Optional[int] = None):
        super().__init__()
        self.backbone = PoseEncoder(config)
        self.head = SLTHead(config.embedding.d_model, vocab_size, config.transformer, config.finetune, rgb_dim)

    def forward(self, hands: torch.Tensor, arms: torch.Tensor, words: torch.Tensor,
                padding: Optional[torch.Tensor] = None, word_padding: Optional[torch.Tensor] = None,
                rgb: Optional[torch.Tensor] = None) -> torch.Tensor:
        tokens = self.backbone(hands, arms, padding)
        return self.head(tokens, words, padding, word_padding, rgb, padding)

    @torch.no_grad()
    def translate(self, hands: torch.Tensor, arms: torch.Tensor, beam_width: int = 3, max_length: int = 30,
                  length_penalty: float = 0.6, rgb: Optional[torch.Tensor] = None) -> List[int]:
        """Decode one sample (batch of one, no padding)"""
        tokens = self.backbone(hands, arms)
        memory, memory_padding = self.head.encode_memory(tokens)
        rgb_memory = rgb_padding = None
        if self.head.fused:
            rgb_memory, rgb_padding = self.head.encode_rgb(rgb)
        best = slt_beam_search(self.head, memory, memory_padding, beam_width, max_length, length_penalty,
                               rgb_memory, rgb_padding)
        return strip_eos(best.words)


def build_task_model(task: str, config: RunConfig, num_outputs: int, rgb_dim: Optional[int] = None) -> nn.Module:
    if task == "islr":
        if rgb_dim is not None:
            raise ValueError("isolated recognition fuses RGB by late score fusion, not inside the model")
        return SignClassifier(config, num_outputs)
    if task == "cslr":
        return SignRecognizer(config, num_outputs, rgb_dim)
    if task == "slt":
        return SignTranslator(config, num_outputs, rgb_dim)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def task_learning_rate(task: str, config: RunConfig) -> float:
    return {
        "islr": config.finetune.islr_learning_rate,
        "cslr": config.finetune.cslr_learning_rate,
        "slt": config.finetune.slt_learning_rate,
    }[task]


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def build_vocabulary(task: str, samples: Sequence[SignSample], lowercase: bool = False) -> Optional[Vocabulary]:
    if task == "cslr":
        return Vocabulary.from_sentences([s.glosses for s in samples if s.glosses], lowercase)
    if task == "slt":
        return Vocabulary.from_sentences([s.translation for s in samples if s.translation], lowercase)
    return None


def _check_supervision(task: str, samples: Sequence[SignSample]) -> None:
    field = {"islr": "label", "cslr": "glosses", "slt": "translation"}[task]
    missing = [s.poses.source_id for s in samples if getattr(s, field) is None]
    if missing:
        raise ValueError(f"{len(missing)} samples lack '{field}' for task {task}, e.g. {missing[0]}")


class TaskDataset(Dataset):
    """
    Samples for one downstream task.

    Training draws segment_random (isolated) or fraction_random (continuous,
    translation) frames and applies random moving augmentation; evaluation
    uses segment_center or every frame.
    """

    def __init__(self, task: str, samples: Sequence[SignSample], config: RunConfig,
                 vocab: Optional[Vocabulary] = None, features: Optional[FeatureStore] = None,
                 train: bool = True):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        _check_supervision(task, samples)
        self.task = task
        self.samples = [SignSample(ensure_normalized(s.poses), s.label, s.glosses, s.translation)
                        for s in samples]
        self.config = config
        self.vocab = vocab
        self.features = features
        self.train = train
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.samples)

    def _indices(self, num_frames: int, rng: np.random.Generator) -> np.ndarray:
        fine = self.config.finetune
        if self.task == "islr":
            mode = "segment_random" if self.train else "segment_center"
            return sample_frame_indices(num_frames, mode, fine.isolated_frames, rng)
        if self.train:
            return sample_frame_indices(num_frames, "fraction_random", fine.frame_fraction, rng)
        return sample_frame_indices(num_frames, "all")

    def __getitem__(self, index: int) -> Dict[str, Any]:
        rng = np.random.default_rng([self.config.seed, self.epoch, index])
        sample = self.samples[index]
        seq = sample.poses
        indices = self._indices(len(seq), rng)
        seq = seq.select_frames(indices)
        if self.train and self.config.finetune.augment_strength > 0:
            seq = random_moving_augment(seq, self.config.finetune.augment_strength, rng)

        item: Dict[str, Any] = {"hands": seq.hands(), "arms": seq.arms, "source_id": seq.source_id}
        if self.task == "islr":
            item["label"] = sample.label
        elif self.task == "cslr":
            item["target"] = self.vocab.encode(sample.glosses)
        else:
            item["target"] = self.vocab.encode(sample.translation)
        if self.features is not None:
            item["rgb"] = self.features.get(sample.poses.source_id, len(sample.poses))[indices]
        return item


@dataclass
class TaskBatch:
    hands: torch.Tensor
    arms: torch.Tensor
    padding: torch.Tensor
    lengths: List[int]
    source_ids: List[str]
    labels: Optional[torch.Tensor] = None
    targets: Optional[List[List[int]]] = None
    rgb: Optional[torch.Tensor] = None

    def to(self, device: Union[str, torch.device]) -> 'TaskBatch':
        def move(t: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
            return None if t is None else t.to(device)

        return TaskBatch(move(self.hands), move(self.arms), move(self.padding), self.lengths,
                         self.source_ids, move(self.labels), self.targets, move(self.rgb))


def collate_task_batch(items: Sequence[Dict[str, Any]], dtype: torch.dtype = torch.float32) -> TaskBatch:
    batch = len(items)
    lengths = [item["hands"].shape[0] for item in items]
    longest = max(lengths)
    hands = torch.zeros(batch, longest, 2, 21, 3, dtype=dtype)
    arms = torch.zeros(batch, longest, 7, 3, dtype=dtype)
    padding = torch.ones(batch, longest, dtype=torch.bool)
    rgb = None
    if "rgb" in items[0]:
        rgb = torch.zeros(batch, longest, items[0]["rgb"].shape[1], dtype=dtype)
    for b, item in enumerate(items):
        t = lengths[b]
        hands[b, :t] = torch.as_tensor(item["hands"], dtype=dtype)
        arms[b, :t] = torch.as_tensor(item["arms"], dtype=dtype)
        padding[b, :t] = False
        if rgb is not None:
            rgb[b, :t] = torch.as_tensor(item["rgb"], dtype=dtype)
    labels = None
    if "label" in items[0]:
        labels = torch.tensor([item["label"] for item in items], dtype=torch.long)
    targets = [item["target"] for item in items] if "target" in items[0] else None
    return TaskBatch(hands, arms, padding, lengths, [item["source_id"] for item in items],
                     labels, targets, rgb)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def task_loss(task: str, model: nn.Module, batch: TaskBatch) -> torch.Tensor:
    if task == "islr":
        logits = model(batch.hands, batch.arms, batch.padding)
        return nn.functional.cross_entropy(logits, batch.labels)
    if task == "cslr":
        log_probs, lengths = model(batch.hands, batch.arms, batch.padding, batch.rgb)
        return ctc_loss(log_probs, lengths.tolist(), batch.targets, blank=Vocabulary.BLANK_ID)
    words_in, words_out, word_padding = (t.to(batch.hands.device) for t in shift_targets(batch.targets))
    log_probs = model(batch.hands, batch.arms, words_in, batch.padding, word_padding, batch.rgb)
    return slt_loss(log_probs, words_out, word_padding, reduction="sum") / len(batch.targets)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@torch.no_grad()
def predict_scores(model: SignClassifier, loader: DataLoader,
                   device: Union[str, torch.device]) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    scores, labels, ids = [], [], []
    for batch in loader:
        batch = batch.to(device)
        logits = model(batch.hands, batch.arms, batch.padding)
        scores.append(torch.softmax(logits, dim=-1).double().cpu().numpy())
        labels.append(batch.labels.cpu().numpy())
        ids.extend(batch.source_ids)
    return np.concatenate(scores), np.concatenate(labels), ids


@torch.no_grad()
def decode_glosses(model: SignRecognizer, loader: DataLoader, beam_width: int,
                   device: Union[str, torch.device]) -> Tuple[List[List[int]], List[List[int]]]:
    hypotheses, references = [], []
    for batch in loader:
        batch = batch.to(device)
        log_probs, lengths = model(batch.hands, batch.arms, batch.padding, batch.rgb)
        for b in range(log_probs.shape[0]):
            hypotheses.append(ctc_beam_decode(log_probs[b, :int(lengths[b])], beam_width, Vocabulary.BLANK_ID))
        references.extend(batch.targets)
    return hypotheses, references


@torch.no_grad()
def translate_batch(model: SignTranslator, loader: DataLoader, config: RunConfig,
                    device: Union[str, torch.device]) -> Tuple[List[List[int]], List[List[int]]]:
    fine = config.finetune
    hypotheses, references = [], []
    for batch in loader:
        batch = batch.to(device)
        for b, length in enumerate(batch.lengths):
            rgb = None if batch.rgb is None else batch.rgb[b:b + 1, :length]
            hypotheses.append(model.translate(batch.hands[b:b + 1, :length], batch.arms[b:b + 1, :length],
                                              fine.slt_beam_width, fine.slt_max_length, fine.length_penalty,
                                              rgb))
        references.extend(batch.targets)
    return hypotheses, references


def evaluate_task(task: str, model: nn.Module, samples: Sequence[SignSample], config: RunConfig,
                  vocab: Optional[Vocabulary] = None, features: Optional[FeatureStore] = None,
                  split: str = "test", num_classes: Optional[int] = None,
                  rgb_scores: Optional[FeatureStore] = None,
                  device: Union[str, torch.device] = "cpu") -> MetricReport:
    """Decode `samples` and score them with the task's metrics"""
    dataset = TaskDataset(task, samples, config, vocab, features, train=False)
    loader = DataLoader(dataset, batch_size=config.finetune.batch_size, shuffle=False,
                        collate_fn=collate_task_batch)
    was_training = model.training
    model.eval()
    report = MetricReport(task=task, split=split, config=config.to_dict())
    report.counts["samples"] = len(dataset)

    if task == "islr":
        scores, labels, ids = predict_scores(model, loader, device)
        for k in (1, 5):
            for mode in ("per_instance", "per_class"):
                report.add(f"top{k}_{mode}", topk_accuracy(scores, labels, k, mode), "%")
        if num_classes is not None:
            report.breakdowns["absent_classes"] = absent_classes(labels, num_classes)
        if rgb_scores is not None:
            rgb = np.stack([rgb_scores.get(source_id)[0] for source_id in ids])
            fused = late_fuse_scores(scores, rgb)
            report.add("top1_late_fusion", 100.0 * float(np.mean(fused == labels)), "%")
    elif task == "cslr":
        hyp_ids, ref_ids = decode_glosses(model, loader, config.finetune.ctc_beam_width, device)
        hypotheses = [vocab.decode(h) for h in hyp_ids]
        references = [vocab.decode(r) for r in ref_ids]
        result = corpus_wer(hypotheses, references)
        report.add("wer", 100.0 * result.rate, "%")
        report.breakdowns["wer"] = {"substitutions": result.substitutions, "deletions": result.deletions,
                                    "insertions": result.insertions, "reference_words": result.ref_length}
        report.breakdowns["examples"] = [{"hypothesis": " ".join(h), "reference": " ".join(r)}
                                         for h, r in list(zip(hypotheses, references))[:5]]
    elif task == "slt":
        hyp_ids, ref_ids = translate_batch(model, loader, config, device)
        hypotheses = [vocab.decode(h) for h in hyp_ids]
        references = [vocab.decode(r) for r in ref_ids]
        for n in range(1, 5):
            report.add(f"bleu{n}", 100.0 * corpus_bleu(hypotheses, [[r] for r in references], n=n), "BLEU")
        report.add("rouge_l", 100.0 * corpus_rouge_l(hypotheses, references), "F1 x 100")
        report.counts["exact_matches"] = sum(h == r for h, r in zip(hypotheses, references))
        report.breakdowns["examples"] = [{"hypothesis": " ".join(h), "reference": " ".join(r)}
                                         for h, r in list(zip(hypotheses, references))[:5]]
    else:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")

    if was_training:
        model.train()
    return report


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def init_from_pretrained(model: nn.Module, path: Union[str, Path]) -> None:
    """Copy the pretrained embedding + encoder weights into `model.backbone`"""
    payload = load_checkpoint(path, task="pretrain")
    prefix = "backbone."
    state = {k[len(prefix):]: v for k, v in payload["state_dict"].items() if k.startswith(prefix)}
    try:
        model.backbone.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"Pretrained encoder in {path} does not fit this model: {e}") from e
    logger.info(f"Initialized encoder from {path}")


def load_task_model(path: Union[str, Path],
                    task: Optional[str] = None) -> Tuple[nn.Module, RunConfig, Dict[str, Any]]:
    """Rebuild a fine-tuned model; returns (model, config, extra)"""
    payload = load_checkpoint(path, task=task)
    task = payload["task"]
    if task not in TASKS:
        raise CheckpointError(f"Checkpoint {path} holds a '{task}' model, not a downstream task")
    config = RunConfig.from_dict(payload["config"])
    extra = payload["extra"]
    model = build_task_model(task, config, extra["num_outputs"], extra.get("rgb_dim"))
    model.load_state_dict(payload["state_dict"])
    return model, config, extra


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class Finetuner:
    """Trains one downstream task and writes its checkpoint and metric log"""

    def __init__(self, config: RunConfig, task: str, samples: Sequence[SignSample], out_dir: Union[str, Path],
                 init: Optional[Union[str, Path]] = None, features: Optional[FeatureStore] = None,
                 num_classes: Optional[int] = None, device: Union[str, torch.device] = "cpu"):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        if not samples:
            raise ValueError("fine-tuning needs at least one sample")
        self.config = config
        self.task = task
        self.out_dir = Path(out_dir)
        self.device = torch.device(device)
        self.features = features

        self.vocab = build_vocabulary(task, samples, config.finetune.lowercase)
        if task == "islr":
            self.num_outputs = num_classes or (max(s.label for s in samples) + 1)
        else:
            self.num_outputs = len(self.vocab)
        self.rgb_dim = features.dim if features is not None and task != "islr" else None

        torch.manual_seed(config.seed)
        self.model = build_task_model(task, config, self.num_outputs, self.rgb_dim)
        if init is not None:
            init_from_pretrained(self.model, init)
        self.model.to(self.device)

        self.dataset = TaskDataset(task, samples, config, self.vocab,
                                   features if self.rgb_dim is not None else None, train=True)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=task_learning_rate(task, config),
                                          weight_decay=config.finetune.weight_decay)
        self.metric_log = MetricLog(self.out_dir / "metrics.jsonl")
        self.history: List[Dict[str, Any]] = []
        self.step = 0

    def _loader(self, epoch: int) -> DataLoader:
        self.dataset.set_epoch(epoch)
        generator = torch.Generator().manual_seed(self.config.seed * 1000 + epoch)
        return DataLoader(self.dataset, batch_size=self.config.finetune.batch_size, shuffle=True,
                          generator=generator, num_workers=self.config.finetune.num_workers,
                          collate_fn=collate_task_batch)

    def _train_epoch(self, epoch: int) -> float:
        self.model.train()
        total, batches = 0.0, 0
        for batch in self._loader(epoch):
            batch = batch.to(self.device)
            loss = task_loss(self.task, self.model, batch)
            if not torch.isfinite(loss):
                logger.error(f"Non-finite {self.task} loss at epoch {epoch}, step {self.step}: {loss.item()}")
                raise TrainingDivergedError(f"{self.task} fine-tuning diverged", epoch=epoch,
                                            step=self.step, loss=float(loss.item()))
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            self.step += 1
            batches += 1
            total += float(loss.item())
        return total / max(1, batches)

    def extra(self) -> Dict[str, Any]:
        return {
            "num_outputs": self.num_outputs,
            "rgb_dim": self.rgb_dim,
            "vocab": self.vocab.to_dict() if self.vocab is not None else None,
        }

    def run(self, validation: Optional[Sequence[SignSample]] = None) -> Path:
        epochs = self.config.finetune.epochs
        logger.info(f"Fine-tuning {self.task} on {len(self.dataset)} samples for {epochs} epochs "
                    f"(lr {task_learning_rate(self.task, self.config)}) on {self.device}")
        checkpoint = self.out_dir / "checkpoint.pt"
        for epoch in range(epochs):
            loss = self._train_epoch(epoch)
            record: Dict[str, Any] = {"phase": self.task, "epoch": epoch, "step": self.step, "loss": loss}
            if validation:
                report = evaluate_task(self.task, self.model, validation, self.config, self.vocab,
                                       self.features if self.rgb_dim is not None else None,
                                       split="validation", device=self.device)
                record.update({f"val_{k}": v for k, v in report.metrics.items()})
            self.metric_log.append(record)
            self.history.append(record)
            logger.info(f"Epoch {epoch}: loss={loss:.4f}")
            save_checkpoint(checkpoint, self.model, self.config, task=self.task, step=self.step,
                            epoch=epoch, metrics=self.history, extra=self.extra())
        if epochs == 0:
            save_checkpoint(checkpoint, self.model, self.config, task=self.task, extra=self.extra())
        return checkpoint


def finetune(config: RunConfig, task: str, samples: Sequence[SignSample], out_dir: Union[str, Path],
             init: Optional[Union[str, Path]] = None, features: Optional[FeatureStore] = None,
             validation: Optional[Sequence[SignSample]] = None, num_classes: Optional[int] = None,
             device: Union[str, torch.device] = "cpu") -> Path:
    return Finetuner(config, task, samples, out_dir, init, features, num_classes, device).run(validation)
