"""
Layered run configuration

defaults <- config file (YAML or JSON) <- command-line overrides.
Environment variables (optionally from a .env file) supply the data root,
device and log level.
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml
from dotenv import load_dotenv

from .errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_DATA_ROOT = "./data"


@dataclass
class CorpusConfig:
    """Synthetic corpus generation settings"""
    num_classes: int = 20
    samples_per_class: int = 50
    test_per_class: int = 10
    frames_per_sign: int = 24
    keyframes_per_sign: int = 3
    min_sentence_length: int = 2
    max_sentence_length: int = 5
    continuous_train: int = 200
    continuous_test: int = 40
    translation_train: int = 200
    translation_test: int = 40
    pretrain_samples: int = 200
    transition_frames: int = 4
    noise_level: float = 1.0
    confidence_drop_rate: float = 0.05
    image_width: int = 256
    image_height: int = 256
    fps: float = 25.0


@dataclass
class EmbeddingConfig:
    d_model: int = 256
    # hidden widths of the hand GCN; the last layer always emits d_model / 2
    gcn_widths: List[int] = field(default_factory=lambda: [32, 64])
    # hidden widths of the arm GCN; the last layer always emits d_model
    arm_gcn_widths: List[int] = field(default_factory=lambda: [32])
    normalization_mode: str = "symmetric"
    use_spatial: bool = True
    use_temporal: bool = True


@dataclass
class MaskingConfig:
    mask_ratio: float = 0.40
    clip_span: int = 8
    joints_per_token: int = 6
    disturbance_scale: float = 0.1
    loss_on_identity: bool = True


@dataclass
class TransformerConfig:
    n_layers: int = 3
    n_heads: int = 8
    ff_width: int = 1024
    dropout: float = 0.1


@dataclass
class HandModelConfig:
    # "procedural" or "mano:<directory>"
    source: str = "procedural"
    procedural_vertices: int = 200
    theta_dim: int = 25
    beta_dim: int = 10
    cam_scale_init: float = 0.15
    cam_trans_clamp: float = 0.5
    # MANO only: ignore the archive's hands_mean so theta = 0 is the flat hand
    flat_hand_mean: bool = False


@dataclass
class PretrainConfig:
    epsilon: float = 0.5
    lambda_reg: float = 0.01
    w_beta: float = 10.0
    w_delta: float = 100.0
    epochs: int = 60
    learning_rate: float = 1e-4
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    batch_size: int = 16
    max_frames: int = 512
    mean_reduction: bool = False
    augment_strength: float = 1.0
    num_workers: int = 0
    validation_fraction: float = 0.1
    pck_fraction: float = 0.05


@dataclass
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 16
    islr_learning_rate: float = 1e-4
    cslr_learning_rate: float = 1e-4
    slt_learning_rate: float = 5e-5
    weight_decay: float = 0.0
    isolated_frames: int = 32
    frame_fraction: float = 0.8
    ctc_beam_width: int = 10
    slt_beam_width: int = 3
    slt_max_length: int = 30
    length_penalty: float = 0.6
    ctc_pooling: str = "average"
    modulator_layers: int = 2
    decoder_layers: int = 3
    tie_embeddings: bool = False
    lowercase: bool = False
    lstm_hidden: int = 256
    augment_strength: float = 1.0
    num_workers: int = 0


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    hand_model: HandModelConfig = field(default_factory=HandModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        """Create a RunConfig from a (possibly partial) nested dictionary"""
        if not isinstance(data, dict):
            raise ConfigError(f"Config root must be a mapping, got {type(data).__name__}")

        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(sections)
        if unknown:
            raise ConfigError(f"Unknown config section(s): {', '.join(sorted(unknown))}")

        kwargs = {}
        for name, value in data.items():
            section_type = _SECTION_TYPES.get(name)
            if section_type is None:
                kwargs[name] = _coerce(value, sections[name].type, name)
            else:
                kwargs[name] = _section_from_dict(section_type, value or {}, name)
        config = cls(**kwargs)
        validate_run_config(config)
        return config

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


_SECTION_TYPES = {
    "corpus": CorpusConfig,
    "embedding": EmbeddingConfig,
    "masking": MaskingConfig,
    "transformer": TransformerConfig,
    "hand_model": HandModelConfig,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
}


def _coerce(value: Any, ftype: Any, name: str) -> Any:
    if ftype is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"'{name}' expects a boolean, got {value!r}")
        return value
    if ftype is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{name}' expects an integer, got {value!r}")
        return value
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{name}' expects a number, got {value!r}")
        return float(value)
    if ftype is str:
        if not isinstance(value, str):
            raise ConfigError(f"'{name}' expects a string, got {value!r}")
        return value
    if getattr(ftype, "__origin__", None) is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"'{name}' expects a list, got {value!r}")
        (item_type,) = ftype.__args__
        return [_coerce(v, item_type, name) for v in value]
    return value


def _section_from_dict(section_type: type, data: Dict[str, Any], section: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{section}' must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(section_type)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"Unknown key(s) in '{section}': {', '.join(sorted(unknown))}")
    kwargs = {
        key: _coerce(value, fields[key].type, f"{section}.{key}")
        for key, value in data.items()
    }
    return section_type(**kwargs)


def validate_run_config(config: RunConfig) -> None:
    """Range checks that the type layer cannot express"""
    emb = config.embedding
    if emb.d_model <= 0 or emb.d_model % 2:
        raise ConfigError("embedding.d_model must be a positive even number")
    if emb.normalization_mode not in ("symmetric", "asymmetric"):
        raise ConfigError(
            f"embedding.normalization_mode must be 'symmetric' or 'asymmetric', got {emb.normalization_mode!r}"
        )
    if emb.d_model % config.transformer.n_heads:
        raise ConfigError("embedding.d_model must be divisible by transformer.n_heads")

    mask = config.masking
    if not 0.0 <= mask.mask_ratio <= 1.0:
        raise ConfigError("masking.mask_ratio must lie in [0, 1]")
    if mask.clip_span < 2:
        raise ConfigError("masking.clip_span must be at least 2")
    if not 1 <= mask.joints_per_token <= 21:
        raise ConfigError("masking.joints_per_token must lie in [1, 21]")

    pre = config.pretrain
    if not 0.0 <= pre.epsilon <= 1.0:
        raise ConfigError("pretrain.epsilon must lie in [0, 1]")
    if min(pre.lambda_reg, pre.w_beta, pre.w_delta) < 0:
        raise ConfigError("pretrain.lambda_reg, w_beta and w_delta must be non-negative")
    if not 0.0 <= pre.warmup_fraction < 1.0:
        raise ConfigError("pretrain.warmup_fraction must lie in [0, 1)")

    hand = config.hand_model
    if hand.source != "procedural" and not hand.source.startswith("mano:"):
        raise ConfigError(f"hand_model.source must be 'procedural' or 'mano:<path>', got {hand.source!r}")
    if hand.procedural_vertices <= 0 or hand.procedural_vertices % 100:
        raise ConfigError("hand_model.procedural_vertices must be a positive multiple of 100")

    fine = config.finetune
    if fine.ctc_pooling not in ("average", "conv"):
        raise ConfigError("finetune.ctc_pooling must be 'average' or 'conv'")
    if not 0.0 < fine.frame_fraction <= 1.0:
        raise ConfigError("finetune.frame_fraction must lie in (0, 1]")

    if config.corpus.num_classes <= 0:
        raise ConfigError("corpus.num_classes must be positive")


def parse_override(text: str) -> Dict[str, Any]:
    """Turn 'section.key=value' into a nested dict; the value is parsed as YAML"""
    if "=" not in text:
        raise ConfigError(f"Override must look like section.key=value, got {text!r}")
    dotted, raw = text.split("=", 1)
    value = yaml.safe_load(raw) if raw != "" else ""
    keys = dotted.strip().split(".")
    nested: Dict[str, Any] = {}
    cursor = nested
    for key in keys[:-1]:
        cursor = cursor.setdefault(key, {})
    cursor[keys[-1]] = value
    return nested


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[List[str]] = None) -> RunConfig:
    """Resolve a RunConfig from defaults, an optional file and overrides"""
    data = RunConfig().to_dict()

    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            file_data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Could not parse config file {path}: {e}") from e
        if not isinstance(file_data, dict):
            raise ConfigError(f"Config file {path} must contain a mapping")
        data = _merge(data, file_data)
        logger.info(f"Loaded config file {path}")

    for text in overrides or []:
        data = _merge(data, parse_override(text))

    return RunConfig.from_dict(data)


def save_run_config(config: RunConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


def load_environment() -> None:
    """Load variables from a .env file if present"""
    load_dotenv()


def get_data_root() -> Path:
    return Path(os.getenv("SIGNBERT_DATA_ROOT", DEFAULT_DATA_ROOT))


def get_log_level() -> str:
    return os.getenv("SIGNBERT_LOG_LEVEL", "INFO").upper()


def get_device_name() -> str:
    """Device requested through SIGNBERT_DEVICE, else cuda when available"""
    requested = os.getenv("SIGNBERT_DEVICE")
    if requested:
        return requested
    import torch
    return "cuda" if torch.cuda.is_available() else "cpu"
