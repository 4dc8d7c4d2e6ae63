"""
Self-supervised pretraining: masked pose reconstruction through the hand
model decoder, the warmup/decay schedule, checkpoints and the training loop
"""

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader, Dataset

from .config import RunConfig
from .embedding import PoseEmbedding
from .errors import CheckpointError, TrainingDivergedError
from .hand_decoder import DecoderOutput, HandDecoder
from .hand_model import HandModelSpec, build_hand_model_spec
from .masking import OPS, corrupt
from .metrics import auc_pck, pck
from .pose_data import PoseSequence, normalize_sequence, random_moving_augment
from .records import MetricLog
from .transformer import TransformerEncoder

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor, confidence: torch.Tensor,
                        token_mask: torch.Tensor, epsilon: float = 0.5,
                        reduction: str = "sum") -> torch.Tensor:
    """
    sum over target joints of 1(s >= eps) * s * |pred - target|_1

    pred/target (..., J, 2); confidence (..., J); token_mask (...) selects the
    (frame, hand) tokens that count.
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    weight = confidence * (confidence >= epsilon).to(confidence.dtype)
    weight = weight * token_mask.to(confidence.dtype).unsqueeze(-1)
    error = (pred - target).abs().sum(dim=-1)
    total = (weight * error).sum()
    if reduction == "mean":
        return total / (weight > 0).sum().clamp_min(1)
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total


def regularization_loss(theta: torch.Tensor, beta: torch.Tensor, w_beta: float = 10.0,
                        w_delta: float = 100.0, valid: Optional[torch.Tensor] = None,
                        reduction: str = "sum") -> torch.Tensor:
    """
    sum_t |theta_t|^2 + w_beta |beta_t|^2 + w_delta |beta_t - beta_{t-1}|^2

    Time is dimension -2; the difference term starts at the second frame.
    `valid` (..., T) drops padded frames and any difference that touches one.
    """
    if theta.shape[:-1] != beta.shape[:-1]:
        raise ValueError("theta and beta must be aligned in time")
    if valid is None:
        valid = torch.ones(theta.shape[:-1], dtype=torch.bool, device=theta.device)
    valid = valid.to(theta.dtype)

    magnitude = (theta ** 2).sum(-1) + w_beta * (beta ** 2).sum(-1)
    total = (magnitude * valid).sum()
    if theta.shape[-2] > 1:
        delta = ((beta[..., 1:, :] - beta[..., :-1, :]) ** 2).sum(-1)
        total = total + w_delta * (delta * valid[..., 1:] * valid[..., :-1]).sum()
    if reduction == "mean":
        return total / valid.sum().clamp_min(1)
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total


def lr_multiplier(step: int, total_steps: int, warmup_steps: int) -> float:
    """Linear warmup from 0 to 1, then linear decay to 0 at total_steps"""
    if warmup_steps > 0 and step < warmup_steps:
        return step / warmup_steps
    return max(0.0, (total_steps - step) / max(1, total_steps - warmup_steps))


def warmup_linear_decay(optimizer: torch.optim.Optimizer, total_steps: int,
                        warmup_fraction: float) -> LambdaLR:
    warmup_steps = int(round(warmup_fraction * total_steps))
    return LambdaLR(optimizer, lambda step: lr_multiplier(step, total_steps, warmup_steps))


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

class PoseEncoder(nn.Module):
    """Visual-token embedding followed by the Transformer encoder"""

    def __init__(self, config: RunConfig):
        super().__init__()
        self.d_model = config.embedding.d_model
        self.embedding = PoseEmbedding(config.embedding)
        self.encoder = TransformerEncoder.from_config(self.d_model, config.transformer)

    def forward(self, hands: torch.Tensor, arms: torch.Tensor,
                padding: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.encoder(self.embedding(hands, arms), padding)


class SignBertModel(nn.Module):
    """Pretraining model: encoder backbone + model-aware hand decoder"""

    def __init__(self, config: RunConfig, spec: Optional[HandModelSpec] = None):
        super().__init__()
        self.backbone = PoseEncoder(config)
        self.hand_decoder = HandDecoder(config.embedding.d_model,
                                        spec if spec is not None else build_hand_model_spec(config.hand_model),
                                        config.hand_model)

    def forward(self, hands: torch.Tensor, arms: torch.Tensor, padding: Optional[torch.Tensor] = None,
                return_vertices: bool = False) -> DecoderOutput:
        return self.hand_decoder(self.backbone(hands, arms, padding), return_vertices)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class PoseBatch:
    clean: torch.Tensor        # (B, T, 2, 21, 3)
    corrupted: torch.Tensor    # (B, T, 2, 21, 3)
    arms: torch.Tensor         # (B, T, 7, 3)
    target: torch.Tensor       # (B, T, 2) bool
    padding: torch.Tensor      # (B, T) bool, True = padded
    image_size: torch.Tensor   # (B, 2)

    def to(self, device: Union[str, torch.device]) -> 'PoseBatch':
        return PoseBatch(**{k: getattr(self, k).to(device) for k in self.__dataclass_fields__})


def collate_pose_batch(items: Sequence[Dict[str, np.ndarray]], dtype: torch.dtype = torch.float32) -> PoseBatch:
    """Pad to the longest sequence; padded frames are zero and flagged"""
    batch = len(items)
    longest = max(item["clean"].shape[0] for item in items)
    clean = torch.zeros(batch, longest, 2, 21, 3, dtype=dtype)
    corrupted = torch.zeros_like(clean)
    arms = torch.zeros(batch, longest, 7, 3, dtype=dtype)
    target = torch.zeros(batch, longest, 2, dtype=torch.bool)
    padding = torch.ones(batch, longest, dtype=torch.bool)
    for b, item in enumerate(items):
        t = item["clean"].shape[0]
        clean[b, :t] = torch.as_tensor(item["clean"], dtype=dtype)
        corrupted[b, :t] = torch.as_tensor(item["corrupted"], dtype=dtype)
        arms[b, :t] = torch.as_tensor(item["arms"], dtype=dtype)
        target[b, :t] = torch.as_tensor(item["target"])
        padding[b, :t] = False
    image_size = torch.as_tensor(np.stack([item["image_size"] for item in items]), dtype=dtype)
    return PoseBatch(clean, corrupted, arms, target, padding, image_size)


def ensure_normalized(seq: PoseSequence) -> PoseSequence:
    return seq if seq.normalized else normalize_sequence(seq)


class PretrainDataset(Dataset):
    """
    Corrupts each sequence on the fly.

    Randomness for item i in epoch e comes from default_rng([seed, e, i]), so
    results do not depend on worker count or iteration order.
    """

    def __init__(self, sequences: Sequence[PoseSequence], config: RunConfig, augment: bool = True,
                 ops: Sequence[str] = OPS, seed: Optional[int] = None):
        self.sequences = [ensure_normalized(s) for s in sequences]
        self.config = config
        self.augment = augment
        self.ops = tuple(ops)
        self.seed = config.seed if seed is None else seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, index: int) -> Dict[str, np.ndarray]:
        rng = np.random.default_rng([self.seed, self.epoch, index])
        seq = self.sequences[index]
        max_frames = self.config.pretrain.max_frames
        if len(seq) > max_frames:
            start = int(rng.integers(0, len(seq) - max_frames + 1))
            seq = seq.select_frames(range(start, start + max_frames))
        if self.augment and self.config.pretrain.augment_strength > 0:
            seq = random_moving_augment(seq, self.config.pretrain.augment_strength, rng)
        corrupted, plan = corrupt(seq, self.config.masking, rng, ops=self.ops)
        return {
            "clean": seq.hands(),
            "corrupted": corrupted.hands(),
            "arms": seq.arms,
            "target": plan.target_mask(self.config.masking.loss_on_identity),
            "image_size": np.array(seq.image_size, dtype=np.float64),
        }


def compute_pretrain_losses(model: SignBertModel, batch: PoseBatch, config: RunConfig) -> Dict[str, torch.Tensor]:
    """L = L_rec + lambda * L_reg on one padded batch"""
    pre = config.pretrain
    reduction = "mean" if pre.mean_reduction else "sum"
    out = model(batch.corrupted, batch.arms, batch.padding)

    token_mask = batch.target & ~batch.padding.unsqueeze(-1)
    rec = reconstruction_loss(out.joints_2d, batch.clean[..., :2], batch.clean[..., 2],
                              token_mask, pre.epsilon, reduction)
    # (B, T, 2, D) -> (B, 2, T, D): time on dim -2
    theta = out.params.theta.transpose(1, 2)
    beta = out.params.beta.transpose(1, 2)
    valid = (~batch.padding).unsqueeze(1).expand(-1, 2, -1)
    reg = regularization_loss(theta, beta, pre.w_beta, pre.w_delta, valid, reduction)
    return {"loss": rec + pre.lambda_reg * reg, "rec": rec, "reg": reg}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], model: nn.Module, config: RunConfig, task: str,
                    step: int = 0, epoch: int = 0, metrics: Optional[List[Dict[str, Any]]] = None,
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    """Write-temp-then-rename so a crash never leaves a torn checkpoint"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": CHECKPOINT_VERSION,
        "task": task,
        "state_dict": model.state_dict(),
        "config": config.to_dict(),
        "step": step,
        "epoch": epoch,
        "metrics": metrics or [],
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    logger.info(f"Saved {task} checkpoint to {path} (epoch {epoch}, step {step})")
    return path


def load_checkpoint(path: Union[str, Path], task: Optional[str] = None) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Could not read checkpoint {path}: {e}") from e
    version = payload.get("schema_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Checkpoint {path} has schema_version {version!r}, expected {CHECKPOINT_VERSION}")
    if task is not None and payload.get("task") != task:
        raise CheckpointError(f"Checkpoint {path} holds a '{payload.get('task')}' model, expected '{task}'")
    return payload


def load_pretrained(path: Union[str, Path]) -> Tuple[SignBertModel, RunConfig]:
    """Rebuild a pretrained model together with the config it was trained under"""
    payload = load_checkpoint(path, task="pretrain")
    config = RunConfig.from_dict(payload["config"])
    model = SignBertModel(config)
    model.load_state_dict(payload["state_dict"])
    return model, config


def load_pretrained_model(path: Union[str, Path]) -> SignBertModel:
    return load_pretrained(path)[0]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class ReconstructionJoints:
    """Pixel coordinates (N, 2) of every evaluated joint, with its image diagonal (N,)"""
    corrupted: np.ndarray
    reconstructed: np.ndarray
    clean: np.ndarray
    diagonal: np.ndarray


@torch.no_grad()
def collect_reconstruction(model: SignBertModel, sequences: Sequence[PoseSequence], config: RunConfig,
                           ops: Sequence[str] = OPS, seed: int = 0, batch_size: int = 16,
                           device: Union[str, torch.device] = "cpu") -> ReconstructionJoints:
    """Corrupt, reconstruct and gather detected joints of corrupted tokens"""
    dataset = PretrainDataset(sequences, config, augment=False, ops=ops, seed=seed)
    was_training = model.training
    model.eval()

    inputs, outputs, truths, diagonals = [], [], [], []
    for start in range(0, len(dataset), batch_size):
        items = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        for item in items:
            # identity tokens are targets but not corrupted; keep only altered tokens
            item["target"] = item["target"] & ~np.all(item["corrupted"] == item["clean"], axis=(-1, -2))
        batch = collate_pose_batch(items, next(model.parameters()).dtype).to(device)
        out = model(batch.corrupted, batch.arms, batch.padding)

        select = batch.target.unsqueeze(-1) & (batch.clean[..., 2] > 0)
        scale = batch.image_size[:, None, None, None, :]

        def to_pixels(xy: torch.Tensor) -> torch.Tensor:
            return ((xy + 0.5) * scale)[select]

        inputs.append(to_pixels(batch.corrupted[..., :2]).cpu().double().numpy())
        outputs.append(to_pixels(out.joints_2d).cpu().double().numpy())
        truths.append(to_pixels(batch.clean[..., :2]).cpu().double().numpy())
        diag = torch.linalg.norm(batch.image_size, dim=-1)[:, None, None, None].expand(*select.shape)[select]
        diagonals.append(diag.cpu().double().numpy())

    if was_training:
        model.train()

    if not truths:
        return ReconstructionJoints(*(np.zeros((0, 2)) for _ in range(3)), np.zeros(0))
    return ReconstructionJoints(np.concatenate(inputs), np.concatenate(outputs),
                                np.concatenate(truths), np.concatenate(diagonals))


def evaluate_reconstruction(model: SignBertModel, sequences: Sequence[PoseSequence], config: RunConfig,
                            ops: Sequence[str] = OPS, seed: int = 0, batch_size: int = 16,
                            device: Union[str, torch.device] = "cpu") -> Dict[str, float]:
    """
    PCK of the corrupted input and of the reconstruction, both against the
    clean pose, over detected joints of corrupted tokens. PCK uses a
    threshold of pck_fraction x image diagonal; AUC uses the 20-40 px grid.
    """
    joints = collect_reconstruction(model, sequences, config, ops, seed, batch_size, device)
    gt = joints.clean
    if gt.shape[0] == 0:
        logger.warning("No corrupted joints to evaluate")
        return {}
    pred_in, pred_out = joints.corrupted, joints.reconstructed
    diag = joints.diagonal[:, None]
    fraction = config.pretrain.pck_fraction
    return {
        "input_pck": pck(pred_in / diag, gt / diag, fraction),
        "output_pck": pck(pred_out / diag, gt / diag, fraction),
        "input_auc": auc_pck(pred_in, gt),
        "output_auc": auc_pck(pred_out, gt),
        "joints": int(gt.shape[0]),
    }


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class Pretrainer:
    """Runs masked-modeling pretraining and writes checkpoints and metric logs"""

    def __init__(self, config: RunConfig, sequences: Sequence[PoseSequence], out_dir: Union[str, Path],
                 validation: Optional[Sequence[PoseSequence]] = None,
                 device: Union[str, torch.device] = "cpu"):
        if not sequences:
            raise ValueError("pretraining needs at least one sequence")
        self.config = config
        self.out_dir = Path(out_dir)
        self.device = torch.device(device)

        torch.manual_seed(config.seed)
        self.model = SignBertModel(config).to(self.device)
        self.dataset = PretrainDataset(sequences, config)
        self.validation = list(validation or [])

        pre = config.pretrain
        self.steps_per_epoch = math.ceil(len(self.dataset) / pre.batch_size)
        self.total_steps = pre.epochs * self.steps_per_epoch
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=pre.learning_rate,
                                          weight_decay=pre.weight_decay)
        self.scheduler = warmup_linear_decay(self.optimizer, self.total_steps, pre.warmup_fraction)
        self.metric_log = MetricLog(self.out_dir / "metrics.jsonl")
        self.history: List[Dict[str, Any]] = []
        self.step = 0

    def _loader(self, epoch: int) -> DataLoader:
        self.dataset.set_epoch(epoch)
        generator = torch.Generator().manual_seed(self.config.seed * 1000 + epoch)
        return DataLoader(self.dataset, batch_size=self.config.pretrain.batch_size, shuffle=True,
                          generator=generator, num_workers=self.config.pretrain.num_workers,
                          collate_fn=collate_pose_batch)

    def _train_epoch(self, epoch: int) -> Dict[str, float]:
        self.model.train()
        totals = {"loss": 0.0, "rec": 0.0, "reg": 0.0}
        batches = 0
        for batch in self._loader(epoch):
            batch = batch.to(self.device)
            losses = compute_pretrain_losses(self.model, batch, self.config)
            loss = losses["loss"]
            if not torch.isfinite(loss):
                logger.error(f"Non-finite loss at epoch {epoch}, step {self.step}: {loss.item()}")
                raise TrainingDivergedError("pretraining diverged", epoch=epoch, step=self.step,
                                            loss=float(loss.item()))
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            self.scheduler.step()
            self.step += 1
            batches += 1
            for key in totals:
                totals[key] += float(losses[key].item())
        return {key: value / max(1, batches) for key, value in totals.items()}

    def _validate(self) -> Dict[str, float]:
        if not self.validation:
            return {}
        return evaluate_reconstruction(self.model, self.validation, self.config,
                                       seed=self.config.seed, batch_size=self.config.pretrain.batch_size,
                                       device=self.device)

    def run(self) -> Path:
        pre = self.config.pretrain
        logger.info(f"Pretraining on {len(self.dataset)} sequences for {pre.epochs} epochs "
                    f"({self.total_steps} steps) on {self.device}")
        checkpoint = self.out_dir / "checkpoint.pt"
        for epoch in range(pre.epochs):
            train = self._train_epoch(epoch)
            record = {"phase": "pretrain", "epoch": epoch, "step": self.step,
                      "lr": self.scheduler.get_last_lr()[0], **train}
            record.update({f"val_{k}": v for k, v in self._validate().items()})
            self.metric_log.append(record)
            self.history.append(record)
            logger.info(f"Epoch {epoch}: loss={train['loss']:.4f} rec={train['rec']:.4f} reg={train['reg']:.4f}"
                        + (f" val_output_pck={record['val_output_pck']:.2f}" if "val_output_pck" in record else ""))
            save_checkpoint(checkpoint, self.model, self.config, task="pretrain",
                            step=self.step, epoch=epoch, metrics=self.history)
        if pre.epochs == 0:
            save_checkpoint(checkpoint, self.model, self.config, task="pretrain")
        return checkpoint


def pretrain(config: RunConfig, sequences: Sequence[PoseSequence], out_dir: Union[str, Path],
             validation: Optional[Sequence[PoseSequence]] = None,
             device: Union[str, torch.device] = "cpu") -> Path:
    """Train from scratch and return the checkpoint path"""
    return Pretrainer(config, sequences, out_dir, validation, device).run()
