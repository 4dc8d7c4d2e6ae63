"""
Command-line surface: corpus generation, pretraining, fine-tuning,
evaluation, reconstruction dumps and plots
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import (RunConfig, get_data_root, get_device_name, get_log_level, load_run_config,
                     save_run_config)
from .errors import SignBertError
from .finetuning import TASKS, evaluate_task, finetune, load_task_model
from .hand_decoder import decode_sequence
from .hand_model import write_mesh_dump
from .heads import FeatureStore
from .masking import corrupt, parse_mask_ops
from .metrics import MetricReport, auc_thresholds, pck_curve, write_metric_report
from .plotting import plot_metric_log, plot_pck_curves
from .pose_data import SignSample, Vocabulary, load_manifest, pose_sequence_to_dict
from .pretraining import (collect_reconstruction, ensure_normalized, evaluate_reconstruction,
                          load_pretrained, pretrain)
from .records import RunLock
from .synthetic import SPLITS, generate_synthetic_corpus, synthesize_rgb_features, write_corpus

logger = logging.getLogger(__name__)

RUN_CONFIG_NAME = "run_config.yaml"
DEFAULT_TRAIN_SPLITS = {
    "pretrain": "pretrain",
    "islr": "isolated_train",
    "cslr": "continuous_train",
    "slt": "translation_train",
}
DEFAULT_TEST_SPLITS = {
    "pretrain": "isolated_test",
    "islr": "isolated_test",
    "cslr": "continuous_test",
    "slt": "translation_test",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="signbert",
        description="Hand-model-aware pose pretraining for sign language understanding",
        epilog="Any config key can be overridden with --section.key VALUE (e.g. --pretrain.epochs 5).",
    )
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None, help="YAML or JSON config file")
        p.add_argument("--data", type=Path, default=None, help="corpus root (default: $SIGNBERT_DATA_ROOT)")
        p.add_argument("--device", default=None, help="cpu or cuda (default: $SIGNBERT_DEVICE)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, repeatable")

    gen = sub.add_parser("gen-synthetic", help="generate the synthetic corpus")
    common(gen)
    gen.add_argument("--classes", type=int, default=None, help="number of sign classes")
    gen.add_argument("--per-class", type=int, default=None, help="isolated training samples per class")
    gen.add_argument("--out", type=Path, default=None, help="output directory (default: data root)")
    gen.add_argument("--rgb-dim", type=int, default=32, help="dimension of the synthetic RGB features (0 = none)")
    gen.add_argument("--rgb-noise", type=float, default=0.5)

    pre = sub.add_parser("pretrain", help="masked pose pretraining")
    common(pre)
    pre.add_argument("--out", type=Path, required=True, help="checkpoint directory")
    pre.add_argument("--split", default="pretrain")

    fine = sub.add_parser("finetune", help="fine-tune a downstream task")
    common(fine)
    fine.add_argument("--task", choices=TASKS, required=True)
    fine.add_argument("--init", type=Path, default=None, help="pretrained checkpoint (omit to train from scratch)")
    fine.add_argument("--out", type=Path, required=True, help="checkpoint directory")
    fine.add_argument("--split", default=None)
    fine.add_argument("--validation-split", default=None)
    fine.add_argument("--features", type=Path, default=None, help="RGB feature file (.npz) for fusion")

    ev = sub.add_parser("evaluate", help="score a checkpoint on a split")
    common(ev)
    ev.add_argument("--task", choices=("pretrain",) + TASKS, required=True)
    ev.add_argument("--ckpt", type=Path, required=True)
    ev.add_argument("--split", default=None)
    ev.add_argument("--out", type=Path, default=None,
                    help="report directory (default: eval_<task>_<split> next to the checkpoint)")
    ev.add_argument("--features", type=Path, default=None, help="RGB feature file (.npz) for fusion")
    ev.add_argument("--rgb-scores", type=Path, default=None, help="per-sample RGB class scores for late fusion")

    rec = sub.add_parser("reconstruct", help="dump corrupted inputs, reconstructions and meshes")
    common(rec)
    rec.add_argument("--ckpt", type=Path, required=True)
    rec.add_argument("--mask", choices=("joint", "frame", "clip", "mixed"), default="mixed")
    rec.add_argument("--split", default="isolated_test")
    rec.add_argument("--count", type=int, default=4)
    rec.add_argument("--out", type=Path, required=True)

    plot = sub.add_parser("plot", help="render a metric log to an image")
    plot.add_argument("--log", type=Path, required=True)
    plot.add_argument("--out", type=Path, required=True)
    plot.add_argument("--keys", nargs="*", default=None)

    return parser


def split_overrides(extra: Sequence[str]) -> List[str]:
    """['--pretrain.epochs', '5'] or ['--pretrain.epochs=5'] -> ['pretrain.epochs=5']"""
    overrides = []
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or "." not in token.split("=", 1)[0]:
            raise argparse.ArgumentTypeError(f"unrecognized argument: {token}")
        key = token[2:]
        if "=" in key:
            overrides.append(key)
            i += 1
            continue
        if i + 1 >= len(extra):
            raise argparse.ArgumentTypeError(f"override {token} needs a value")
        overrides.append(f"{key}={extra[i + 1]}")
        i += 2
    return overrides


def _data_root(args: argparse.Namespace) -> Path:
    return args.data if args.data is not None else get_data_root()


def _device(args: argparse.Namespace) -> str:
    return args.device or get_device_name()


def load_split(data_root: Path, split: str, lowercase: bool = False) -> List[SignSample]:
    manifest = data_root / split / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"No manifest for split '{split}' at {manifest}")
    return load_manifest(manifest, lowercase)


def _num_classes(data_root: Path, samples: Sequence[SignSample]) -> int:
    info = data_root / "corpus.json"
    if info.exists():
        return len(json.loads(info.read_text())["glosses"])
    return max(s.label for s in samples) + 1


def _default_features(data_root: Path, split: str) -> Optional[Path]:
    path = data_root / "features" / f"{split}.npz"
    return path if path.exists() else None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(args: argparse.Namespace, config: RunConfig) -> None:
    if args.classes is not None:
        config.corpus.num_classes = args.classes
    if args.per_class is not None:
        config.corpus.samples_per_class = args.per_class
    out = args.out or _data_root(args)
    with RunLock(out):
        rng = np.random.default_rng(config.seed)
        corpus = generate_synthetic_corpus(config.corpus, rng)
        write_corpus(corpus, out)
        if args.rgb_dim > 0:
            for split in SPLITS:
                features = synthesize_rgb_features(corpus, split, args.rgb_dim, args.rgb_noise, rng)
                FeatureStore(features).save(out / "features" / f"{split}.npz")
        save_run_config(config, out / RUN_CONFIG_NAME)
    logger.info(f"Synthetic corpus written to {out}")


def cmd_pretrain(args: argparse.Namespace, config: RunConfig) -> None:
    data_root = _data_root(args)
    sequences = [s.poses for s in load_split(data_root, args.split)]
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(sequences))
    held_out = int(round(config.pretrain.validation_fraction * len(sequences)))
    validation = [sequences[i] for i in order[:held_out]]
    train = [sequences[i] for i in order[held_out:]]
    with RunLock(args.out):
        save_run_config(config, args.out / RUN_CONFIG_NAME)
        checkpoint = pretrain(config, train, args.out, validation, _device(args))
    logger.info(f"Pretrained checkpoint: {checkpoint}")


def cmd_finetune(args: argparse.Namespace, config: RunConfig) -> None:
    data_root = _data_root(args)
    split = args.split or DEFAULT_TRAIN_SPLITS[args.task]
    samples = load_split(data_root, split, config.finetune.lowercase)
    validation = (load_split(data_root, args.validation_split, config.finetune.lowercase)
                  if args.validation_split else None)
    features = FeatureStore.load(args.features) if args.features else None
    if features is not None and validation:
        logger.warning("Validation during fused fine-tuning uses the training feature file")
    num_classes = _num_classes(data_root, samples) if args.task == "islr" else None
    with RunLock(args.out):
        save_run_config(config, args.out / RUN_CONFIG_NAME)
        checkpoint = finetune(config, args.task, samples, args.out, args.init, features, validation,
                              num_classes, _device(args))
    logger.info(f"Fine-tuned {args.task} checkpoint: {checkpoint}")


def _evaluate_pretrain(args: argparse.Namespace, split: str, out: Path) -> MetricReport:
    data_root = _data_root(args)
    device = _device(args)
    # masking and PCK settings come from the run that produced the checkpoint
    model, config = load_pretrained(args.ckpt)
    model = model.to(device)
    sequences = [s.poses for s in load_split(data_root, split)]
    report = MetricReport(task="pretrain", split=split, config=config.to_dict())
    report.counts["sequences"] = len(sequences)

    thresholds = auc_thresholds()
    curves: Dict[str, List[float]] = {}
    for mode in ("joint", "frame", "clip"):
        ops = parse_mask_ops(mode)
        scores = evaluate_reconstruction(model, sequences, config, ops, seed=config.seed, device=device)
        for name, value in scores.items():
            if name == "joints":
                report.counts[f"{mode}_joints"] = int(value)
            else:
                report.add(f"{mode}_{name}", value, "%")
        joints = collect_reconstruction(model, sequences, config, ops, seed=config.seed, device=device)
        if joints.clean.shape[0]:
            curves[f"{mode} input"] = pck_curve(joints.corrupted, joints.clean, thresholds).tolist()
            curves[f"{mode} output"] = pck_curve(joints.reconstructed, joints.clean, thresholds).tolist()
    report.breakdowns["pck_curve"] = {"thresholds_px": thresholds.tolist(), "curves": curves}
    if curves:
        plot_pck_curves(thresholds, curves, out / "pck_curve.png")
    return report


def default_eval_dir(ckpt: Path, task: str, split: str) -> Path:
    """Evaluation artifacts never share a directory with the training run"""
    return ckpt.parent / f"eval_{task}_{split}"


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> None:
    split = args.split or DEFAULT_TEST_SPLITS[args.task]
    out = args.out or default_eval_dir(args.ckpt, args.task, split)
    with RunLock(out):
        if args.task == "pretrain":
            report = _evaluate_pretrain(args, split, out)
        else:
            model, model_config, extra = load_task_model(args.ckpt, task=args.task)
            vocab = Vocabulary.from_dict(extra["vocab"]) if extra.get("vocab") else None
            data_root = _data_root(args)
            samples = load_split(data_root, split, model_config.finetune.lowercase)
            features = None
            if extra.get("rgb_dim") is not None:
                path = args.features or _default_features(data_root, split)
                if path is None:
                    raise FileNotFoundError(f"checkpoint expects RGB features; pass --features for split '{split}'")
                features = FeatureStore.load(path)
            rgb_scores = FeatureStore.load(args.rgb_scores) if args.rgb_scores else None
            device = _device(args)
            report = evaluate_task(args.task, model.to(device), samples, model_config, vocab, features,
                                   split, extra["num_outputs"] if args.task == "islr" else None,
                                   rgb_scores, device)
        write_metric_report(report, out / f"report_{args.task}_{split}.json")
        config_path = out / RUN_CONFIG_NAME
        if config_path.exists():
            # the directory belongs to another run; keep its config
            config_path = out / f"run_config_eval_{args.task}_{split}.yaml"
        save_run_config(config, config_path)
    print(report.format_table())


def cmd_reconstruct(args: argparse.Namespace, config: RunConfig) -> None:
    model, model_config = load_pretrained(args.ckpt)
    model.eval()
    dtype = next(model.parameters()).dtype
    samples = load_split(_data_root(args), args.split)[:args.count]
    ops = parse_mask_ops(args.mask)
    faces = model.hand_decoder.hand_model.faces.cpu().numpy()

    with RunLock(args.out):
        save_run_config(config, args.out / RUN_CONFIG_NAME)
        for i, sample in enumerate(samples):
            clean = ensure_normalized(sample.poses)
            rng = np.random.default_rng([config.seed, i])
            corrupted, plan = corrupt(clean, model_config.masking, rng, ops=ops)
            hands = torch.as_tensor(corrupted.hands(), dtype=dtype).unsqueeze(0)
            arms = torch.as_tensor(corrupted.arms, dtype=dtype).unsqueeze(0)
            with torch.no_grad():
                tokens = model.backbone(hands, arms).squeeze(0)
            recon, meshes = decode_sequence(tokens, model.hand_decoder, clean, with_meshes=True)

            dump: Dict[str, Any] = {
                "source_id": clean.source_id,
                "coordinates": "normalized",
                "mask": args.mask,
                "plan": plan.entries,
                "clean": pose_sequence_to_dict(clean),
                "input": pose_sequence_to_dict(corrupted),
                "reconstruction": pose_sequence_to_dict(recon),
            }
            stem = args.out / clean.source_id
            stem.parent.mkdir(parents=True, exist_ok=True)
            Path(f"{stem}_poses.json").write_text(json.dumps(dump))
            write_mesh_dump(f"{stem}_mesh.json", faces, meshes)
            logger.info(f"Wrote reconstruction of {clean.source_id} ({len(plan)} masked tokens)")


def cmd_plot(args: argparse.Namespace) -> None:
    plot_metric_log(args.log, args.out, args.keys)


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "reconstruct": cmd_reconstruct,
}


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse and run one subcommand.

    Returns 0 on success, 1 on a runtime failure, 2 on a usage error.
    """
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command == "plot" and extra:
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        try:
            overrides = split_overrides(extra) if args.command != "plot" else []
        except argparse.ArgumentTypeError as e:
            parser.error(str(e))
    except SystemExit as e:
        return int(e.code or 0)

    logging.getLogger().setLevel(args.log_level.upper() if args.log_level else get_log_level())

    try:
        if args.command == "plot":
            cmd_plot(args)
            return 0
        config = load_run_config(args.config, list(args.overrides) + overrides)
        COMMANDS[args.command](args, config)
        return 0
    except (SignBertError, ValueError, KeyError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=logger.isEnabledFor(logging.DEBUG))
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.error(f"{args.command} failed unexpectedly: {e}", exc_info=True)
        return 1


def main() -> None:
    sys.exit(run_command())
