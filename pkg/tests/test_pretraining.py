"""Pretraining objectives, schedule, data pipeline, checkpoints and the training loop"""

import numpy as np
import pytest
import torch

import signbert.pretraining as pretraining
from conftest import make_sequence, tiny_config
from signbert.errors import CheckpointError, TrainingDivergedError
from signbert.pose_data import normalize_sequence
from signbert.pretraining import (
    PretrainDataset,
    Pretrainer,
    SignBertModel,
    collate_pose_batch,
    compute_pretrain_losses,
    evaluate_reconstruction,
    load_checkpoint,
    load_pretrained_model,
    lr_multiplier,
    reconstruction_loss,
    regularization_loss,
    save_checkpoint,
    warmup_linear_decay,
)
from signbert.records import read_metric_log


def _two_joint_case():
    pred = torch.tensor([[[0.3, 0.0], [5.0, 0.0]]], dtype=torch.float64)
    target = torch.zeros(1, 2, 2, dtype=torch.float64)
    confidence = torch.tensor([[0.9, 0.4]], dtype=torch.float64)
    return pred, target, confidence, torch.ones(1, dtype=torch.bool)


def test_perfect_reconstruction_costs_nothing():
    target = torch.rand(3, 21, 2)
    loss = reconstruction_loss(target.clone(), target, torch.ones(3, 21), torch.ones(3, dtype=torch.bool))
    assert float(loss) == 0.0


def test_low_confidence_joints_are_filtered():
    loss = reconstruction_loss(*_two_joint_case(), epsilon=0.5)
    assert float(loss) == pytest.approx(0.27)


def test_all_joints_below_threshold():
    pred, target, _, mask = _two_joint_case()
    loss = reconstruction_loss(pred, target, torch.full((1, 2), 0.3, dtype=torch.float64), mask, epsilon=0.5)
    assert float(loss) == 0.0


def test_non_target_tokens_never_count():
    pred = torch.rand(4, 2, 21, 2)
    target = torch.rand(4, 2, 21, 2)
    confidence = torch.ones(4, 2, 21)
    mask = torch.zeros(4, 2, dtype=torch.bool)
    mask[1, 0] = mask[3, 1] = True
    base = reconstruction_loss(pred, target, confidence, mask)

    perturbed = pred.clone()
    perturbed[~mask] += 10.0
    assert float(reconstruction_loss(perturbed, target, confidence, mask)) == float(base)


def test_mean_reduction_divides_by_counted_joints():
    pred, target, confidence, mask = _two_joint_case()
    assert float(reconstruction_loss(pred, target, confidence, mask, reduction="mean")) == pytest.approx(0.27)
    with pytest.raises(ValueError):
        reconstruction_loss(pred, target, confidence, mask, reduction="max")


def test_regularization_of_zeros():
    assert float(regularization_loss(torch.zeros(5, 25), torch.zeros(5, 10))) == 0.0


def test_regularization_single_frame_unit_theta():
    theta = torch.zeros(1, 25, dtype=torch.float64)
    theta[0, 0] = 1.0
    assert float(regularization_loss(theta, torch.zeros(1, 10, dtype=torch.float64))) == pytest.approx(1.0)


def test_regularization_two_frames():
    beta = torch.zeros(2, 10, dtype=torch.float64)
    beta[1, 0] = 1.0
    loss = regularization_loss(torch.zeros(2, 25, dtype=torch.float64), beta, w_beta=10.0, w_delta=100.0)
    assert float(loss) == pytest.approx(110.0)


def test_regularization_ignores_padded_frames():
    beta = torch.zeros(1, 3, 10, dtype=torch.float64)
    beta[0, 2, 0] = 1.0
    valid = torch.tensor([[True, True, False]])
    loss = regularization_loss(torch.zeros(1, 3, 25, dtype=torch.float64), beta, valid=valid)
    assert float(loss) == 0.0


def test_lr_multiplier_shape():
    assert lr_multiplier(0, 100, 10) == 0.0
    assert lr_multiplier(5, 100, 10) == pytest.approx(0.5)
    assert lr_multiplier(10, 100, 10) == pytest.approx(1.0)
    assert lr_multiplier(55, 100, 10) == pytest.approx(0.5)
    assert lr_multiplier(100, 100, 10) == 0.0


def test_learning_rate_curve():
    param = torch.nn.Parameter(torch.zeros(1))
    optimizer = torch.optim.Adam([param], lr=1e-4)
    scheduler = warmup_linear_decay(optimizer, total_steps=100, warmup_fraction=0.1)
    rates = []
    for _ in range(100):
        rates.append(scheduler.get_last_lr()[0])
        optimizer.step()
        scheduler.step()
    rates.append(scheduler.get_last_lr()[0])

    assert rates[0] == 0.0
    assert rates[10] == pytest.approx(1e-4)
    assert max(rates) == pytest.approx(1e-4)
    assert rates[100] == pytest.approx(0.0, abs=1e-12)


@pytest.fixture
def sequences():
    rng = np.random.default_rng(1)
    return [make_sequence(n, rng, source_id=f"s{i}") for i, n in enumerate((6, 9, 4, 7))]


def test_dataset_items_are_reproducible(config, sequences):
    a = PretrainDataset(sequences, config, seed=3)
    b = PretrainDataset(sequences, config, seed=3)
    for index in range(len(sequences)):
        np.testing.assert_array_equal(a[index]["corrupted"], b[index]["corrupted"])
    a.set_epoch(1)
    assert not np.array_equal(a[1]["corrupted"], b[1]["corrupted"])


def test_dataset_crops_long_sequences(sequences):
    config = tiny_config(pretrain={"max_frames": 5})
    item = PretrainDataset(sequences, config)[1]
    assert item["clean"].shape == (5, 2, 21, 3)
    assert item["target"].shape == (5, 2)


def test_collate_pads_and_flags(config, sequences):
    dataset = PretrainDataset(sequences, config)
    batch = collate_pose_batch([dataset[i] for i in range(4)])
    assert batch.clean.shape == (4, 9, 2, 21, 3)
    assert batch.padding.tolist()[2] == [False] * 4 + [True] * 5
    assert not batch.target[2, 4:].any()
    assert torch.all(batch.clean[2, 4:] == 0)


def _batch(config, sequences, dtype=torch.float32):
    dataset = PretrainDataset(sequences, config, augment=False)
    return collate_pose_batch([dataset[i] for i in range(len(sequences))], dtype)


def test_losses_are_non_negative(config, sequences):
    torch.manual_seed(0)
    model = SignBertModel(config)
    losses = compute_pretrain_losses(model, _batch(config, sequences), config)
    assert set(losses) == {"loss", "rec", "reg"}
    assert all(float(v) >= 0 for v in losses.values())
    assert float(losses["loss"]) == pytest.approx(float(losses["rec"] + 0.01 * losses["reg"]), rel=1e-5)


def test_zero_lambda_leaves_only_reconstruction_gradient(sequences):
    config = tiny_config(pretrain={"lambda_reg": 0.0})
    torch.manual_seed(0)
    model = SignBertModel(config)
    batch = _batch(config, sequences)

    compute_pretrain_losses(model, batch, config)["loss"].backward()
    total = [p.grad.clone() for p in model.parameters() if p.grad is not None]
    model.zero_grad()
    compute_pretrain_losses(model, batch, config)["rec"].backward()
    rec = [p.grad.clone() for p in model.parameters() if p.grad is not None]

    assert len(total) == len(rec)
    for a, b in zip(total, rec):
        torch.testing.assert_close(a, b)


def test_padding_never_reaches_the_loss(config, sequences):
    torch.manual_seed(0)
    model = SignBertModel(config).eval()
    batch = _batch(config, sequences)
    base = compute_pretrain_losses(model, batch, config)["loss"]

    batch.corrupted[2, 4:] = torch.rand_like(batch.corrupted[2, 4:])
    batch.clean[2, 4:] = torch.rand_like(batch.clean[2, 4:])
    torch.testing.assert_close(compute_pretrain_losses(model, batch, config)["loss"], base)


def test_full_stack_gradcheck():
    config = tiny_config(embedding={"d_model": 8, "gcn_widths": [4], "arm_gcn_widths": [4]},
                         transformer={"n_heads": 2, "ff_width": 8},
                         hand_model={"theta_dim": 3, "beta_dim": 2})
    torch.manual_seed(0)
    model = SignBertModel(config).double()
    seqs = [normalize_sequence(make_sequence(3, np.random.default_rng(2)))]
    batch = _batch(config, seqs, torch.float64)
    batch.target[:] = True
    corrupted = batch.corrupted.clone().requires_grad_()

    def total_loss(hands):
        batch.corrupted = hands
        return compute_pretrain_losses(model, batch, config)["loss"]

    assert torch.autograd.gradcheck(total_loss, (corrupted,), eps=1e-6, atol=1e-4, rtol=1e-4)


def test_checkpoint_round_trip(config, tmp_path):
    torch.manual_seed(0)
    model = SignBertModel(config)
    path = save_checkpoint(tmp_path / "ckpt.pt", model, config, task="pretrain", step=7, epoch=2)
    assert not (tmp_path / "ckpt.pt.tmp").exists()

    payload = load_checkpoint(path, task="pretrain")
    assert payload["step"] == 7 and payload["epoch"] == 2
    loaded = load_pretrained_model(path)
    for key, value in model.state_dict().items():
        torch.testing.assert_close(loaded.state_dict()[key], value)


def test_checkpoint_errors(config, tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")

    (tmp_path / "garbage.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "garbage.pt")

    save_checkpoint(tmp_path / "ckpt.pt", SignBertModel(config), config, task="islr")
    with pytest.raises(CheckpointError, match="islr"):
        load_checkpoint(tmp_path / "ckpt.pt", task="pretrain")


def test_reconstruction_metrics(config, sequences):
    torch.manual_seed(0)
    model = SignBertModel(config)
    metrics = evaluate_reconstruction(model, sequences, config, ops=("frame",), batch_size=2)
    assert set(metrics) == {"input_pck", "output_pck", "input_auc", "output_auc", "joints"}
    assert metrics["joints"] > 0
    for key in ("input_pck", "output_pck", "input_auc", "output_auc"):
        assert 0.0 <= metrics[key] <= 100.0
    assert model.training


def test_pretrainer_writes_checkpoint_and_log(config, sequences, tmp_path):
    checkpoint = Pretrainer(config, sequences, tmp_path, validation=sequences[:2]).run()
    assert checkpoint == tmp_path / "checkpoint.pt"
    records = read_metric_log(tmp_path / "metrics.jsonl")
    assert len(records) == config.pretrain.epochs
    assert records[0]["phase"] == "pretrain"
    assert "val_output_pck" in records[0]
    assert load_checkpoint(checkpoint, task="pretrain")["epoch"] == 0


def test_first_epoch_is_deterministic(config, sequences, tmp_path):
    a = Pretrainer(config, sequences, tmp_path / "a")
    b = Pretrainer(config, sequences, tmp_path / "b")
    assert a._train_epoch(0) == b._train_epoch(0)


def test_zero_epochs_still_saves(sequences, tmp_path):
    config = tiny_config(pretrain={"epochs": 0})
    checkpoint = Pretrainer(config, sequences, tmp_path).run()
    assert checkpoint.exists()


def test_divergence_is_reported(config, sequences, tmp_path, monkeypatch):
    def exploding(model, batch, config):
        loss = model.hand_decoder.regressor.linear.weight.sum() * float("nan")
        return {"loss": loss, "rec": loss, "reg": loss}

    monkeypatch.setattr(pretraining, "compute_pretrain_losses", exploding)
    with pytest.raises(TrainingDivergedError) as excinfo:
        Pretrainer(config, sequences, tmp_path).run()
    assert excinfo.value.epoch == 0 and excinfo.value.step == 0


def test_pretrainer_needs_data(config, tmp_path):
    with pytest.raises(ValueError):
        Pretrainer(config, [], tmp_path)
