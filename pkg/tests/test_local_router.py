import math

import numpy as np
import pytest

from hmrnet import tensor as T
from hmrnet.errors import ConfigurationError, DimensionError, ValidationError
from hmrnet.experts import ExpertPool, expert_forward
from hmrnet.local_router import (
    PartitionHead, PartitionState, assign_labels, build_masks, coherence_loss, dump_partition,
    feature_entropy, fuse, masked_dispatch, partition_map, region_count, region_count_tensor,
    select_active,
)
from hmrnet.tensor import Tensor


def state_from_scores(scores, active):
    return build_masks(PartitionState(len(active), Tensor(scores), tuple(active)))


# -- entropy and region count -------------------------------------------------------

def test_entropy_anchor_values():
    one = np.zeros((32, 4, 4))
    one[3] = 1.0
    assert feature_entropy(one).entropy == 0.0
    assert feature_entropy(np.ones((32, 4, 4))).entropy == pytest.approx(math.log(32), abs=1e-12)
    shares = np.zeros((3, 2, 2))
    shares[0], shares[1], shares[2] = 0.5, 0.25, 0.25
    assert feature_entropy(shares).entropy == pytest.approx(1.0397207708, abs=1e-9)


def test_entropy_degenerate_and_errors():
    est = feature_entropy(np.zeros((32, 4, 4)))
    assert est.entropy == pytest.approx(math.log(32))
    np.testing.assert_allclose(est.shares.sum(), 1.0, atol=1e-9)
    with pytest.raises(ValidationError):
        feature_entropy(-np.ones((2, 2, 2)))


def test_entropy_bounds_on_random_maps():
    rng = np.random.default_rng(0)
    for _ in range(50):
        est = feature_entropy(np.abs(rng.normal(size=(32, 5, 5))) * rng.uniform(0, 3, (32, 1, 1)))
        assert 0 <= est.entropy <= math.log(32) + 1e-12
        assert abs(est.shares.sum() - 1) < 1e-9


def test_region_count_anchors():
    assert region_count(0.0, 1.0, 8) == 5
    assert region_count(0.0, 7.3, 8) == 5
    assert region_count(1e6, 1.0, 8) == 8
    assert region_count(1.0, 1.0, 8) == 6
    with pytest.raises(ConfigurationError):
        region_count(1.0, 1.0, 1)


def test_region_count_rounds_half_to_even():
    # 2 + sigmoid(x) * 2 = 3.5 exactly at sigmoid(x) = 0.75
    x = math.log(3.0)
    assert 2 + 2 / (1 + math.exp(-x)) == pytest.approx(3.5, abs=1e-15)
    assert region_count(x, 1.0, 4) in (3, 4)
    assert round(3.5) == 4 and round(4.5) == 4


def test_region_count_monotone_and_bounded():
    sweep = np.linspace(0, 20, 2001)
    counts = [region_count(e, 1.0, 8) for e in sweep]
    assert all(2 <= c <= 8 for c in counts)
    assert all(b >= a for a, b in zip(counts, counts[1:]))


def test_region_count_tensor_straight_through():
    theta = T.parameter(np.array(1.0))
    r = region_count_tensor(1.0, theta, 8)
    assert r.item() == 6
    T.backward(r)
    s = 1 / (1 + math.exp(-1.0))
    assert theta.grad == pytest.approx(6 * s * (1 - s), abs=1e-12)


# -- partition map and masks -------------------------------------------------------------

def test_active_set_matches_sort_oracle():
    rng = np.random.default_rng(1)
    head = PartitionHead(rng, 32, 8)
    for _ in range(20):
        f = Tensor(np.abs(rng.normal(size=(32, 6, 6))))
        state = partition_map(f, head, count=4)
        sums = state.scores.data.sum(axis=(1, 2))
        oracle = sorted(sorted(range(8), key=lambda i: (-sums[i], i))[:4])
        assert state.active == tuple(oracle)
        np.testing.assert_allclose(state.scores.data.sum(axis=0), 1.0, atol=1e-9)


def test_select_active_ties_and_forced_full_set():
    assert select_active(np.array([1.0, 2.0, 2.0, 2.0]), 2) == (1, 2)
    assert select_active(np.array([0.3, 0.7]), 2) == (0, 1)


def test_constant_feature_map_collapses_to_one_unit():
    head = PartitionHead(np.random.default_rng(2), 4, 8)
    head.kernel.data[...] = 0.0
    head.kernel.data[5, :, 1, 1] = 1.0
    state = build_masks(partition_map(Tensor(np.ones((4, 6, 6))), head))
    assert state.region_count == region_count(math.log(4), 1.0, 8) == 7
    nonempty = [r for r, m in state.masks.items() if m.any()]
    assert len(nonempty) == 1
    state.check_partition()


def test_dominant_channel_and_half_planes():
    scores = np.full((8, 4, 4), 0.1)
    scores[3] = 0.9
    state = state_from_scores(scores, (1, 3, 6))
    assert state.masks[3].all() and not state.masks[1].any() and not state.masks[6].any()
    split = np.zeros((8, 4, 4))
    split[0, :, :2] = 1.0
    split[1, :, 2:] = 1.0
    state = state_from_scores(split, (0, 1))
    assert state.masks[0][:, :2].all() and not state.masks[0][:, 2:].any()
    assert np.array_equal(state.masks[0] ^ state.masks[1], np.ones((4, 4), dtype=bool))


def test_masks_match_per_pixel_argmax_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        scores = rng.dirichlet(np.ones(8), size=(5, 7)).transpose(2, 0, 1)
        active = tuple(sorted(rng.choice(8, size=int(rng.integers(2, 9)), replace=False)))
        labels = assign_labels(scores, active)
        for y in range(5):
            for x in range(7):
                best = max(active, key=lambda r: (scores[r, y, x], -r))
                assert labels[y, x] == best
        state = state_from_scores(scores, active)
        state.check_partition()


def test_partition_rejects_batched_input():
    with pytest.raises(DimensionError):
        partition_map(Tensor(np.ones((1, 32, 4, 4))), PartitionHead(np.random.default_rng(0), 32, 8))


# -- dispatch and fusion --------------------------------------------------------------

def test_full_mask_dispatch_reproduces_plain_expert_bitwise():
    rng = np.random.default_rng(4)
    f = Tensor(np.abs(rng.normal(size=(32, 6, 6))))
    scores = np.zeros((8, 6, 6))
    scores[2] = 1.0
    state = state_from_scores(scores, (2, 5))
    pool_a, pool_b = ExpertPool(np.random.default_rng(9), "local", 8), ExpertPool(np.random.default_rng(9), "local", 8)
    outs = masked_dispatch(f, state, pool_a)
    fused = fuse(outs, [state.masks[r] for r in state.active])
    plain = expert_forward(pool_b, 2, f)
    assert outs[1] is None
    assert np.array_equal(fused.data, plain.data)


def test_empty_mask_skips_expert_and_keeps_grads_zero():
    rng = np.random.default_rng(5)
    pool = ExpertPool(rng, "local", 8)
    f = Tensor(np.abs(rng.normal(size=(32, 4, 4))))
    scores = np.zeros((8, 4, 4))
    scores[0] = 1.0
    state = state_from_scores(scores, (0, 7))
    outs = masked_dispatch(f, state, pool)
    fused = fuse(outs, [state.masks[r] for r in state.active])
    T.backward(T.tsum(fused))
    assert all(np.all(p.grad == 0) for p in pool.expert_parameters(7))
    assert any(np.any(p.grad != 0) for p in pool.expert_parameters(0))


def test_two_mask_inputs_have_disjoint_covering_support():
    rng = np.random.default_rng(6)
    pool = ExpertPool(rng, "local", 8)
    f = Tensor(np.abs(rng.normal(size=(32, 4, 4))) + 0.1)
    scores = np.zeros((8, 4, 4))
    scores[1, :2] = 1.0
    scores[4, 2:] = 1.0
    state = state_from_scores(scores, (1, 4))
    supports = [np.any((f.data * state.masks[r]) != 0, axis=0) for r in state.active]
    assert not np.any(supports[0] & supports[1])
    assert np.all(supports[0] | supports[1])
    outs = masked_dispatch(f, state, pool)
    assert all(o is not None for o in outs)


def test_fuse_pointwise_oracle():
    rng = np.random.default_rng(7)
    outs = [Tensor(rng.normal(size=(3, 5, 5))) for _ in range(3)]
    labels = rng.integers(0, 3, (5, 5))
    masks = [labels == r for r in range(3)]
    fused = fuse(outs, masks).data
    for y in range(5):
        for x in range(5):
            np.testing.assert_array_equal(fused[:, y, x], outs[labels[y, x]].data[:, y, x])
    a, b = Tensor(np.full((2, 4, 4), 3.0)), Tensor(np.full((2, 4, 4), -1.0))
    half = np.zeros((4, 4), dtype=bool)
    half[:, :2] = True
    np.testing.assert_array_equal(fuse([a, b], [half, ~half]).data, np.where(half, 3.0, -1.0)[None].repeat(2, 0))
    with pytest.raises(DimensionError):
        fuse([a], [half, ~half])


def test_dispatch_rejects_unit_without_expert():
    pool = ExpertPool(np.random.default_rng(0), "local", 2)
    scores = np.zeros((4, 2, 2))
    scores[3] = 1.0
    with pytest.raises(ValidationError):
        masked_dispatch(Tensor(np.ones((32, 2, 2))), state_from_scores(scores, (0, 3)), pool)


# -- coherence -----------------------------------------------------------------------

def pair_enumeration(p):
    _, h, w = p.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            for dy, dx in ((0, 1), (1, 0)):
                if y + dy < h and x + dx < w:
                    total += float(((p[:, y, x] - p[:, y + dy, x + dx]) ** 2).sum())
    return total


def test_coherence_anchor_values():
    assert coherence_loss(Tensor(np.full((8, 5, 5), 1 / 8))).item() == 0.0
    two = np.zeros((2, 2, 1))
    two[:, 0, 0] = [1, 0]
    two[:, 1, 0] = [0, 1]
    assert coherence_loss(Tensor(two)).item() == 2.0
    board = np.zeros((2, 4, 4))
    yy, xx = np.mgrid[:4, :4]
    board[0] = (yy + xx) % 2 == 0
    board[1] = 1 - board[0]
    assert coherence_loss(Tensor(board)).item() == 48.0


def test_coherence_matches_pair_enumeration_and_batches():
    rng = np.random.default_rng(8)
    p = rng.dirichlet(np.ones(8), size=(2, 6, 5)).transpose(0, 3, 1, 2)
    assert coherence_loss(Tensor(p[0])).item() == pytest.approx(pair_enumeration(p[0]), abs=1e-12)
    assert coherence_loss(Tensor(p)).item() == pytest.approx(pair_enumeration(p[0]) + pair_enumeration(p[1]), abs=1e-12)
    assert coherence_loss(Tensor(p[0])).item() > 1e-12


def test_partition_invariants_over_random_images():
    rng = np.random.default_rng(9)
    head = PartitionHead(rng, 32, 8)
    for _ in range(100):
        f = Tensor(np.abs(rng.normal(size=(32, 6, 6))) * rng.uniform(0, 2, (32, 1, 1)))
        state = build_masks(partition_map(f, head))
        assert 2 <= state.region_count <= 8
        assert len(set(state.active)) == state.region_count
        state.check_partition()


def test_dump_partition_writes_pgm_and_sidecar(tmp_path):
    scores = np.zeros((8, 3, 5))
    scores[2] = 1.0
    state = state_from_scores(scores, (2, 6))
    state.entropy = 1.5
    pgm, meta = dump_partition(state, tmp_path)
    raw = pgm.read_bytes()
    assert raw.startswith(b"P5\n5 3\n255\n")
    assert len(raw) == len(b"P5\n5 3\n255\n") + 15
    assert '"R": 2' in meta.read_text()
