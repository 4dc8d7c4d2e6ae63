"""Skeleton graphs, graph convolution, hand pooling and token embedding"""

import math

import numpy as np
import pytest
import torch

from conftest import make_sequence, tiny_config
from signbert.embedding import (
    GestureStateEmbedding,
    PoseEmbedding,
    SpatialPositionEmbedding,
    embed_gesture_state,
    embed_sequence,
    embed_spatial_position,
    pose_tensors,
    temporal_position_encoding,
)
from signbert.graph import (
    build_arm_graph,
    build_hand_graph,
    gcn_layer,
    normalize_adjacency,
    pool_hand,
)
from signbert.pose_data import normalize_sequence


def test_hand_graph_layout():
    graph = build_hand_graph()
    assert graph.num_nodes == 21
    assert graph.is_connected()
    assert len(graph.clusters) == 6
    assert sorted(j for c in graph.clusters for j in c) == list(range(21))
    # fingertip links between neighbouring fingers
    assert (4, 8) in graph.edges and (16, 20) in graph.edges


def test_partitions_cover_self_loops_and_edges():
    graph = build_hand_graph()
    parts = graph.partitions()
    assert parts.shape == (3, 21, 21)
    np.testing.assert_array_equal(parts.sum(axis=0), graph.adjacency() + np.eye(21))
    # the index MCP is closer to the wrist than the index PIP
    assert parts[1, 6, 5] == 1.0
    assert parts[2, 5, 6] == 1.0


def test_arm_graph_is_a_single_cluster():
    graph = build_arm_graph()
    assert graph.num_nodes == 7
    assert graph.clusters == (tuple(range(7)),)


def test_identity_graph_and_weights_pass_features_through():
    features = torch.randn(21, 4, dtype=torch.float64)
    out = gcn_layer(features, torch.eye(21, dtype=torch.float64), torch.eye(4, dtype=torch.float64))
    torch.testing.assert_close(out, features)


def test_two_node_swap():
    adjacency = torch.tensor(normalize_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]])))
    out = gcn_layer(torch.tensor([[1.0], [2.0]], dtype=torch.float64), adjacency,
                    torch.ones(1, 1, dtype=torch.float64))
    torch.testing.assert_close(out, torch.tensor([[2.0], [1.0]], dtype=torch.float64))


def test_zero_input_gives_zero_output():
    graph = build_hand_graph()
    adjacency = torch.tensor(normalize_adjacency(graph.partitions()))
    weights = torch.randn(3, 3, 5, dtype=torch.float64)
    out = gcn_layer(torch.zeros(21, 3, dtype=torch.float64), adjacency, weights)
    assert torch.count_nonzero(out) == 0


def test_partition_and_weight_counts_must_agree():
    with pytest.raises(ValueError):
        gcn_layer(torch.zeros(2, 1), torch.eye(2).expand(3, 2, 2), torch.ones(2, 1, 1))


def test_normalization_modes():
    a = np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    symmetric = normalize_adjacency(a)
    np.testing.assert_allclose(symmetric, symmetric.T)
    np.testing.assert_allclose(symmetric[0, 1], 1.0 / math.sqrt(2.0))
    skewed = normalize_adjacency(a, "asymmetric")
    np.testing.assert_allclose(skewed[0, 1], 1.0 / math.sqrt(2.0))
    np.testing.assert_allclose(skewed[1, 0], math.sqrt(2.0))
    with pytest.raises(ValueError):
        normalize_adjacency(a, "bogus")


def test_gcn_is_permutation_equivariant():
    rng = np.random.default_rng(0)
    upper = np.triu(rng.random((6, 6)) < 0.5, 1).astype(float)
    a = upper + upper.T + np.eye(6)
    perm = rng.permutation(6)
    p = np.eye(6)[perm]

    features = torch.tensor(rng.normal(size=(6, 3)))
    weights = torch.tensor(rng.normal(size=(3, 2)))
    out = gcn_layer(features, torch.tensor(normalize_adjacency(a)), weights)
    permuted = gcn_layer(torch.tensor(p) @ features, torch.tensor(normalize_adjacency(p @ a @ p.T)), weights)
    torch.testing.assert_close(permuted, torch.tensor(p) @ out)


def test_pool_constant_features():
    c = torch.tensor([0.5, -1.0, 2.0])
    pooled = pool_hand(c.expand(21, 3), build_hand_graph().clusters)
    torch.testing.assert_close(pooled, c)


def test_pool_returns_the_dominating_node():
    features = torch.rand(21, 4)
    features[13] = 5.0
    torch.testing.assert_close(pool_hand(features, build_hand_graph().clusters), features[13])


def test_two_stage_pool_equals_global_max():
    features = torch.randn(3, 21, 8)
    pooled = pool_hand(features, build_hand_graph().clusters)
    torch.testing.assert_close(pooled, features.amax(dim=-2))


def test_position_encoding_at_zero():
    pe = temporal_position_encoding(0, 8)
    np.testing.assert_array_equal(pe[0::2], 0.0)
    np.testing.assert_array_equal(pe[1::2], 1.0)


def test_position_encoding_small_model():
    expected = [math.sin(1), math.cos(1), math.sin(1 / 10000 ** 0.5), math.cos(1 / 10000 ** 0.5)]
    np.testing.assert_allclose(temporal_position_encoding(1, 4), expected, rtol=1e-12)


def test_position_encoding_is_bounded():
    for t in (0, 7, 500, 4000):
        assert np.all(np.abs(temporal_position_encoding(t, 16)) <= 1.0)


@pytest.fixture
def embedding_config():
    return tiny_config().embedding


def test_shared_weights_give_equal_halves(embedding_config):
    gesture = GestureStateEmbedding(embedding_config)
    hand = torch.randn(5, 1, 21, 3)
    halves = gesture.halves(torch.cat([hand, hand], dim=1))
    half = embedding_config.d_model // 2
    torch.testing.assert_close(halves[:, :half], halves[:, half:])


def test_swapping_hands_swaps_halves(embedding_config):
    gesture = GestureStateEmbedding(embedding_config)
    hands = torch.randn(4, 2, 21, 3)
    half = embedding_config.d_model // 2
    original = gesture.halves(hands)
    swapped = gesture.halves(hands.flip(1))
    torch.testing.assert_close(swapped, torch.cat([original[:, half:], original[:, :half]], dim=1))


def test_spatial_embedding_shape_and_sensitivity(embedding_config):
    spatial = SpatialPositionEmbedding(embedding_config).eval()
    zeros = torch.zeros(1, 7, 3)
    out = spatial(zeros)
    assert out.shape == (1, embedding_config.d_model)
    torch.testing.assert_close(spatial(zeros), out)

    arms = torch.rand(1, 7, 3)
    moved = arms.clone()
    moved[..., :2] += 0.3
    assert not torch.allclose(spatial(arms), spatial(moved))


def test_single_frame_entry_points_match_the_batched_modules(embedding_config):
    embedding = PoseEmbedding(embedding_config).eval()
    seq = normalize_sequence(make_sequence(3))
    hands, arms = pose_tensors(seq)
    frame = seq.frame(1)
    torch.testing.assert_close(embed_gesture_state(frame, embedding.gesture), embedding.gesture(hands)[1])
    torch.testing.assert_close(embed_spatial_position(frame.arms, embedding.spatial), embedding.spatial(arms)[1])
    assert embed_gesture_state(frame, embedding.gesture).shape == (embedding_config.d_model,)


def test_embed_sequence_keeps_length(embedding_config):
    embedding = PoseEmbedding(embedding_config).eval()
    seq = normalize_sequence(make_sequence(9))
    tokens = embed_sequence(seq, embedding)
    assert tokens.shape == (9, embedding_config.d_model)


def test_embed_sequence_requires_normalized_input(embedding_config):
    with pytest.raises(ValueError):
        embed_sequence(make_sequence(2), PoseEmbedding(embedding_config))


def test_gesture_only_embedding():
    config = tiny_config(embedding={"use_spatial": False, "use_temporal": False}).embedding
    embedding = PoseEmbedding(config).eval()
    seq = normalize_sequence(make_sequence(4))
    hands, _ = pose_tensors(seq)
    torch.testing.assert_close(embed_sequence(seq, embedding), embedding.gesture(hands))


def test_identical_frames_differ_by_position_encoding(embedding_config):
    embedding = PoseEmbedding(embedding_config).eval()
    seq = normalize_sequence(make_sequence(3))
    seq = seq.select_frames([0, 1, 1])
    tokens = embed_sequence(seq, embedding)
    d = embedding_config.d_model
    expected = temporal_position_encoding(1, d) - temporal_position_encoding(2, d)
    np.testing.assert_allclose((tokens[1] - tokens[2]).detach().numpy(), expected, atol=1e-5)
