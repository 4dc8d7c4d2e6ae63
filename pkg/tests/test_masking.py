"""Mask plan sampling and pose corruption"""

import numpy as np
import pytest

from conftest import make_sequence, tiny_config
from signbert.masking import (
    CLIP,
    FRAME,
    IDENTITY,
    JOINT,
    OPS,
    MaskPlan,
    apply_mask_plan,
    corrupt,
    parse_mask_ops,
    sample_mask_plan,
)
from signbert.pose_data import normalize_sequence


def _plan(num_frames, entries, joints_per_token=3):
    """Hand-built plan from (frame, hand, op, joint_ids, start, length) rows"""
    rows = list(zip(*entries))
    return MaskPlan(
        num_frames=num_frames,
        frames=np.array(rows[0], dtype=np.int64),
        hands=np.array(rows[1], dtype=np.int64),
        ops=np.array(rows[2], dtype=np.int64),
        joint_ids=np.array(rows[3], dtype=np.int64).reshape(len(entries), joints_per_token),
        span_starts=np.array(rows[4], dtype=np.int64),
        span_lengths=np.array(rows[5], dtype=np.int64),
    )


def test_zero_ratio_gives_empty_plan(rng):
    plan = sample_mask_plan(50, 0.0, 8, 6, rng)
    assert len(plan) == 0
    assert not plan.target_mask().any()


def _masking_statistics(draws: int, rng: np.random.Generator):
    selected, counts, spans = 0, np.zeros(4), np.zeros(9)
    for _ in range(draws):
        plan = sample_mask_plan(1000, 0.40, 8, 6, rng)
        selected += len(plan)
        counts += np.bincount(plan.ops, minlength=4)
        clips = plan.ops == CLIP
        assert np.all(plan.span_lengths[clips] >= 2)
        assert np.all(plan.span_lengths[clips] <= 8)
        assert np.all(plan.span_starts + plan.span_lengths <= 1000)
        spans += np.bincount(plan.span_lengths[clips], minlength=9)
    return selected / (draws * 2000), counts / counts.sum(), spans[2:] / spans.sum()


def test_masking_statistics():
    fraction, ops, spans = _masking_statistics(500, np.random.default_rng(0))
    assert fraction == pytest.approx(0.40, abs=1e-9)
    np.testing.assert_allclose(ops, 0.25, atol=0.005)
    np.testing.assert_allclose(spans, 1.0 / 7.0, atol=0.01)


@pytest.mark.slow
def test_masking_statistics_over_ten_thousand_plans():
    fraction, ops, spans = _masking_statistics(10_000, np.random.default_rng(1))
    assert fraction == pytest.approx(0.40, abs=0.01)
    np.testing.assert_allclose(ops, 0.25, atol=0.002)
    # spans near the sequence end are clipped, which only shifts mass by a fraction of a percent
    np.testing.assert_allclose(spans, 1.0 / 7.0, atol=0.003)


def test_tokens_are_distinct(rng):
    plan = sample_mask_plan(20, 1.0, 4, 6, rng)
    assert len(plan) == 40
    assert len(set(zip(plan.frames.tolist(), plan.hands.tolist()))) == 40


def test_clip_at_last_frame_is_shifted_back(rng):
    plan = sample_mask_plan(30, 1.0, 8, 6, rng, ops=("clip",))
    last = plan.frames == 29
    assert last.any()
    assert np.all(plan.span_lengths >= 2)
    assert np.all(plan.span_starts[last] + plan.span_lengths[last] == 30)


def test_single_frame_sequences_fall_back_to_frame_op(rng):
    plan = sample_mask_plan(1, 1.0, 8, 6, rng, ops=("clip",))
    assert np.all(plan.ops == FRAME)


def test_restricted_op_set(rng):
    plan = sample_mask_plan(100, 0.4, 8, 6, rng, ops=("joint",))
    assert np.all(plan.ops == JOINT)
    assert plan.joint_ids.shape == (80, 6)
    assert all(len(set(row)) == 6 for row in plan.joint_ids.tolist())


@pytest.mark.parametrize("kwargs", [
    {"mask_ratio": 1.5},
    {"clip_span": 1},
    {"joints_per_token": 0},
    {"ops": ("bogus",)},
    {"num_frames": 0},
])
def test_plan_argument_errors(kwargs, rng):
    args = {"num_frames": 10, "mask_ratio": 0.4, "clip_span": 8, "joints_per_token": 6}
    args.update(kwargs)
    ops = args.pop("ops", OPS)
    with pytest.raises(ValueError):
        sample_mask_plan(rng=rng, ops=ops, **args)


def test_empty_plan_leaves_sequence_unchanged(rng):
    seq = normalize_sequence(make_sequence(6))
    out = apply_mask_plan(seq, MaskPlan.empty(6), rng)
    np.testing.assert_array_equal(out.left_hand, seq.left_hand)
    np.testing.assert_array_equal(out.right_hand, seq.right_hand)


def test_frame_op_zeros_one_hand_of_one_frame(rng):
    seq = normalize_sequence(make_sequence(8))
    plan = _plan(8, [(5, 1, FRAME, [0, 0, 0], 5, 1)])
    out = apply_mask_plan(seq, plan, rng)

    assert np.all(out.right_hand[5, :, :2] == 0.0)
    expected = seq.right_hand.copy()
    expected[5, :, :2] = 0.0
    np.testing.assert_array_equal(out.right_hand, expected)
    np.testing.assert_array_equal(out.left_hand, seq.left_hand)
    np.testing.assert_array_equal(out.arms, seq.arms)


def test_joint_op_zero_branch(rng):
    seq = normalize_sequence(make_sequence(4))
    plan = _plan(4, [(2, 0, JOINT, [3, 9, 17], 2, 1)])
    out = apply_mask_plan(seq, plan, rng, joint_zero_prob=1.0)

    changed = np.flatnonzero(np.any(out.left_hand[2, :, :2] != seq.left_hand[2, :, :2], axis=-1))
    assert changed.tolist() == [3, 9, 17]
    assert np.all(out.left_hand[2, [3, 9, 17], :2] == 0.0)


def test_joint_op_disturbance_branch(rng):
    seq = normalize_sequence(make_sequence(4))
    plan = _plan(4, [(1, 1, JOINT, [0, 1, 2], 1, 1)])
    out = apply_mask_plan(seq, plan, rng, joint_zero_prob=0.0)
    changed = np.flatnonzero(np.any(out.right_hand[1, :, :2] != seq.right_hand[1, :, :2], axis=-1))
    assert changed.tolist() == [0, 1, 2]
    assert np.all(out.right_hand[1, [0, 1, 2], :2] != 0.0)


def test_clip_op_zeros_a_span(rng):
    seq = normalize_sequence(make_sequence(10))
    plan = _plan(10, [(3, 0, CLIP, [0, 0, 0], 3, 4)])
    out = apply_mask_plan(seq, plan, rng)
    assert np.all(out.left_hand[3:7, :, :2] == 0.0)
    np.testing.assert_array_equal(out.left_hand[:3], seq.left_hand[:3])
    np.testing.assert_array_equal(out.left_hand[7:], seq.left_hand[7:])


def test_corruption_never_touches_confidence(rng):
    seq = normalize_sequence(make_sequence(40))
    out, _ = corrupt(seq, tiny_config(masking={"mask_ratio": 1.0}).masking, rng)
    np.testing.assert_array_equal(out.left_hand[..., 2], seq.left_hand[..., 2])
    np.testing.assert_array_equal(out.right_hand[..., 2], seq.right_hand[..., 2])
    np.testing.assert_array_equal(out.arms, seq.arms)


def test_untargeted_tokens_are_unchanged(rng):
    seq = normalize_sequence(make_sequence(40))
    out, plan = corrupt(seq, tiny_config().masking, rng)
    untouched = ~plan.corrupted_mask()
    np.testing.assert_array_equal(out.hands()[untouched], seq.hands()[untouched])


def test_zeroing_is_idempotent(rng):
    seq = normalize_sequence(make_sequence(30))
    plan = sample_mask_plan(30, 0.4, 8, 6, rng, ops=("frame", "clip"))
    once = apply_mask_plan(seq, plan, rng)
    twice = apply_mask_plan(once, plan, rng)
    np.testing.assert_array_equal(once.hands(), twice.hands())


def test_corrupt_is_reproducible(config):
    seq = normalize_sequence(make_sequence(25))
    a, plan_a = corrupt(seq, config.masking, np.random.default_rng(9))
    b, plan_b = corrupt(seq, config.masking, np.random.default_rng(9))
    np.testing.assert_array_equal(a.hands(), b.hands())
    assert plan_a.entries == plan_b.entries


def test_target_mask_covers_entries_exactly(rng):
    plan = sample_mask_plan(60, 0.4, 8, 6, rng)
    expected = np.zeros((60, 2), dtype=bool)
    for start, length, hand in zip(plan.span_starts, plan.span_lengths, plan.hands):
        expected[start:start + length, hand] = True
    np.testing.assert_array_equal(plan.target_mask(include_identity=True), expected)

    corrupted = np.zeros((60, 2), dtype=bool)
    for start, length, hand, op in zip(plan.span_starts, plan.span_lengths, plan.hands, plan.ops):
        if op != IDENTITY:
            corrupted[start:start + length, hand] = True
    np.testing.assert_array_equal(plan.target_mask(include_identity=False), corrupted)


def test_plan_entries_describe_ops(rng):
    plan = _plan(10, [(1, 0, JOINT, [1, 2, 3], 1, 1), (4, 1, CLIP, [0, 0, 0], 4, 3)])
    entries = plan.entries
    assert entries[0] == {"frame": 1, "hand": "left", "op": "joint", "joint_ids": [1, 2, 3], "span": None}
    assert entries[1]["span"] == (4, 3)
    assert entries[1]["hand"] == "right"


def test_parse_mask_ops():
    assert parse_mask_ops("mixed") == OPS
    assert parse_mask_ops("clip") == ("clip",)
    with pytest.raises(ValueError):
        parse_mask_ops("identity")
