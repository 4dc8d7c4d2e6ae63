"""Downstream task models, data pipeline, evaluation and the fine-tuning loop"""

import numpy as np
import pytest
import torch

import signbert.finetuning as finetuning
from conftest import tiny_config
from signbert.errors import CheckpointError, TrainingDivergedError
from signbert.finetuning import (
    Finetuner,
    SignClassifier,
    SignRecognizer,
    SignTranslator,
    TaskDataset,
    build_task_model,
    build_vocabulary,
    collate_task_batch,
    evaluate_task,
    init_from_pretrained,
    load_task_model,
    task_learning_rate,
    task_loss,
)
from signbert.heads import FeatureStore
from signbert.pretraining import SignBertModel, save_checkpoint
from signbert.records import read_metric_log
from signbert.synthetic import synthesize_rgb_features

SPLITS = {"islr": "isolated_train", "cslr": "continuous_train", "slt": "translation_train"}


def _features(corpus, split, dim=4):
    return FeatureStore(synthesize_rgb_features(corpus, split, dim, 0.1, np.random.default_rng(0)))


def test_task_models(config):
    assert isinstance(build_task_model("islr", config, 4), SignClassifier)
    assert isinstance(build_task_model("cslr", config, 9), SignRecognizer)
    assert isinstance(build_task_model("slt", config, 9, rgb_dim=4), SignTranslator)
    with pytest.raises(ValueError):
        build_task_model("islr", config, 4, rgb_dim=4)
    with pytest.raises(ValueError):
        build_task_model("pose", config, 4)


def test_task_learning_rates(config):
    assert task_learning_rate("islr", config) == pytest.approx(1e-4)
    assert task_learning_rate("cslr", config) == pytest.approx(1e-4)
    assert task_learning_rate("slt", config) == pytest.approx(5e-5)


def test_vocabularies(corpus):
    assert build_vocabulary("islr", corpus.splits["isolated_train"]) is None
    continuous = corpus.splits["continuous_train"]
    glosses = build_vocabulary("cslr", continuous)
    assert set(glosses.tokens()) == {g for s in continuous for g in s.glosses}
    translation = corpus.splits["translation_train"]
    words = build_vocabulary("slt", translation)
    assert set(words.tokens()) == {w for s in translation for w in s.translation}


def test_isolated_items_have_fixed_length(config, corpus):
    samples = corpus.splits["isolated_train"]
    train = TaskDataset("islr", samples, config)
    evaluation = TaskDataset("islr", samples, config, train=False)
    assert train[0]["hands"].shape == (8, 2, 21, 3)
    assert evaluation[0]["hands"].shape == (8, 2, 21, 3)
    assert train[0]["label"] == samples[0].label
    np.testing.assert_array_equal(evaluation[0]["hands"], TaskDataset("islr", samples, config, train=False)[0]["hands"])


def test_continuous_items_keep_a_fraction(config, corpus):
    samples = corpus.splits["continuous_train"]
    vocab = build_vocabulary("cslr", samples)
    train = TaskDataset("cslr", samples, config, vocab)
    evaluation = TaskDataset("cslr", samples, config, vocab, train=False)
    frames = len(samples[0].poses)
    assert train[0]["hands"].shape[0] == int(np.ceil(0.8 * frames - 1e-9))
    assert evaluation[0]["hands"].shape[0] == frames
    assert vocab.decode(evaluation[0]["target"]) == samples[0].glosses


def test_fused_items_carry_aligned_features(config, corpus):
    samples = corpus.splits["continuous_train"]
    store = _features(corpus, "continuous_train")
    item = TaskDataset("cslr", samples, config, build_vocabulary("cslr", samples), store)[1]
    assert item["rgb"].shape == (item["hands"].shape[0], 4)


def test_missing_supervision_is_rejected(config, corpus):
    with pytest.raises(ValueError, match="translation"):
        TaskDataset("slt", corpus.splits["isolated_train"], config)
    with pytest.raises(ValueError):
        TaskDataset("gloss", corpus.splits["isolated_train"], config)


def test_collate_task_batch(config, corpus):
    samples = corpus.splits["continuous_train"]
    store = _features(corpus, "continuous_train")
    dataset = TaskDataset("cslr", samples, config, build_vocabulary("cslr", samples), store, train=False)
    batch = collate_task_batch([dataset[i] for i in range(3)])
    longest = max(batch.lengths)
    assert batch.hands.shape == (3, longest, 2, 21, 3)
    assert batch.rgb.shape == (3, longest, 4)
    for b, length in enumerate(batch.lengths):
        assert not batch.padding[b, :length].any() and batch.padding[b, length:].all()
    assert len(batch.targets) == 3 and batch.labels is None


@pytest.mark.parametrize("task", ["islr", "cslr", "slt"])
def test_task_losses_are_finite(config, corpus, task):
    samples = corpus.splits[SPLITS[task]]
    vocab = build_vocabulary(task, samples)
    outputs = 4 if task == "islr" else len(vocab)
    torch.manual_seed(0)
    model = build_task_model(task, config, outputs)
    dataset = TaskDataset(task, samples, config, vocab)
    loss = task_loss(task, model, collate_task_batch([dataset[i] for i in range(3)]))
    assert torch.isfinite(loss) and float(loss) > 0
    loss.backward()


def test_fused_recognition_shapes(config, corpus):
    samples = corpus.splits["continuous_train"]
    vocab = build_vocabulary("cslr", samples)
    store = _features(corpus, "continuous_train")
    model = build_task_model("cslr", config, len(vocab), rgb_dim=4)
    batch = collate_task_batch([TaskDataset("cslr", samples, config, vocab, store)[i] for i in range(2)])
    log_probs, lengths = model(batch.hands, batch.arms, batch.padding, batch.rgb)
    assert log_probs.shape[:2] == (2, int(np.ceil(max(batch.lengths) / 4)))
    assert lengths.tolist() == [int(np.ceil(n / 4)) for n in batch.lengths]
    with pytest.raises(ValueError):
        model(batch.hands, batch.arms, batch.padding)


def test_init_from_pretrained_copies_the_encoder(config, tmp_path):
    torch.manual_seed(0)
    pretrained = SignBertModel(config)
    path = save_checkpoint(tmp_path / "pre.pt", pretrained, config, task="pretrain")
    torch.manual_seed(1)
    model = build_task_model("islr", config, 4)
    init_from_pretrained(model, path)
    for key, value in pretrained.backbone.state_dict().items():
        torch.testing.assert_close(model.backbone.state_dict()[key], value)


def test_init_from_a_mismatched_encoder(config, tmp_path):
    small = tiny_config(embedding={"d_model": 8})
    path = save_checkpoint(tmp_path / "pre.pt", SignBertModel(small), small, task="pretrain")
    with pytest.raises(CheckpointError):
        init_from_pretrained(build_task_model("islr", config, 4), path)


@pytest.mark.parametrize("task", ["islr", "cslr", "slt"])
def test_finetuner_round_trip(config, corpus, tmp_path, task):
    samples = corpus.splits[SPLITS[task]]
    checkpoint = Finetuner(config, task, samples, tmp_path, num_classes=4).run()

    records = read_metric_log(tmp_path / "metrics.jsonl")
    assert len(records) == config.finetune.epochs
    assert records[0]["phase"] == task

    model, loaded_config, extra = load_task_model(checkpoint, task=task)
    assert loaded_config == config
    assert extra["num_outputs"] == (4 if task == "islr" else len(build_vocabulary(task, samples)))
    assert (extra["vocab"] is None) == (task == "islr")
    with pytest.raises(CheckpointError):
        load_task_model(checkpoint, task="pretrain")


def test_finetuner_from_pretrained(config, corpus, tmp_path):
    pretrained = SignBertModel(config)
    path = save_checkpoint(tmp_path / "pre.pt", pretrained, config, task="pretrain")
    tuner = Finetuner(tiny_config(finetune={"epochs": 0}), "islr", corpus.splits["isolated_train"],
                      tmp_path / "islr", init=path)
    for key, value in pretrained.backbone.state_dict().items():
        torch.testing.assert_close(tuner.model.backbone.state_dict()[key], value)
    assert tuner.run().exists()


def test_finetuner_records_validation(config, corpus, tmp_path):
    Finetuner(config, "islr", corpus.splits["isolated_train"], tmp_path, num_classes=4).run(
        validation=corpus.splits["isolated_test"])
    record = read_metric_log(tmp_path / "metrics.jsonl")[0]
    assert "val_top1_per_instance" in record


def test_divergence_is_reported(config, corpus, tmp_path, monkeypatch):
    def exploding(task, model, batch):
        return sum(p.sum() for p in model.parameters()) * float("nan")

    monkeypatch.setattr(finetuning, "task_loss", exploding)
    with pytest.raises(TrainingDivergedError) as excinfo:
        Finetuner(config, "islr", corpus.splits["isolated_train"], tmp_path).run()
    assert excinfo.value.epoch == 0


def test_finetuner_needs_samples(config, tmp_path):
    with pytest.raises(ValueError):
        Finetuner(config, "islr", [], tmp_path)


def test_isolated_evaluation_with_late_fusion(config, corpus):
    samples = corpus.splits["isolated_test"]
    rgb_scores = FeatureStore({s.poses.source_id: 10.0 * np.eye(4)[s.label][None] for s in samples})
    model = build_task_model("islr", config, 4)
    model.train()
    report = evaluate_task("islr", model, samples, config, num_classes=4, rgb_scores=rgb_scores)

    assert model.training
    for name in ("top1_per_instance", "top5_per_instance", "top1_per_class", "top5_per_class"):
        assert 0.0 <= report.metrics[name] <= 100.0
    assert report.metrics["top5_per_instance"] == 100.0
    assert report.metrics["top1_late_fusion"] == 100.0
    assert report.breakdowns["absent_classes"] == []
    assert report.counts["samples"] == len(samples)


def test_continuous_evaluation_reports_wer(config, corpus):
    train = corpus.splits["continuous_train"]
    vocab = build_vocabulary("cslr", train)
    store = _features(corpus, "continuous_test")
    model = build_task_model("cslr", config, len(vocab), rgb_dim=4)
    report = evaluate_task("cslr", model, corpus.splits["continuous_test"], config, vocab, store)
    counts = report.breakdowns["wer"]
    errors = counts["substitutions"] + counts["deletions"] + counts["insertions"]
    assert report.metrics["wer"] == pytest.approx(100.0 * errors / counts["reference_words"])
    assert report.units["wer"] == "%"


def test_translation_evaluation_reports_bleu_and_rouge(config, corpus):
    train = corpus.splits["translation_train"]
    vocab = build_vocabulary("slt", train)
    model = build_task_model("slt", config, len(vocab))
    report = evaluate_task("slt", model, corpus.splits["translation_test"], config, vocab)
    assert {"bleu1", "bleu2", "bleu3", "bleu4", "rouge_l"} <= set(report.metrics)
    bleus = [report.metrics[f"bleu{n}"] for n in range(1, 5)]
    assert all(0.0 <= b <= 100.0 for b in bleus)
    assert len(report.breakdowns["examples"]) == len(corpus.splits["translation_test"])
