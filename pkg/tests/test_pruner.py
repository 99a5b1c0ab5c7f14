import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsekv.core import SparsityConfig
from sparsekv.pruner import (
    KEY,
    VALUE,
    block_loss,
    element_mask,
    further_prune,
    prune_cache,
    prune_one,
    select_blocks,
)


def brute_group_mask(group):
    keep = sorted(range(4), key=lambda i: (-abs(group[i]), i))[:2]
    return [i in keep for i in range(4)]


def brute_prune(x, cfg, axis, sparsity):
    """Independent re-derivation: per-group sort, L1 loss, sort blocks by loss."""
    B = cfg.block_size
    n = x.shape[0] // B
    masks, losses = [], []
    for j in range(n):
        blk = x[j * B:(j + 1) * B].astype(np.float64)
        view = blk if axis == KEY else blk.T
        m = np.array([brute_group_mask(view[r, c:c + 4]) for r in range(view.shape[0])
                      for c in range(0, view.shape[1], 4)]).reshape(view.shape)
        m = m if axis == KEY else m.T
        masks.append(m)
        losses.append(sum(abs(v) for v, k in zip(blk.ravel(), m.ravel()) if not k))
    prot = set(range(cfg.sink_blocks)) | set(range(n - cfg.window_blocks, n))
    free = [j for j in range(n) if j not in prot]
    ranked = sorted(free, key=lambda j: (losses[j], j))
    quota = int(np.floor(sparsity * len(free) + 1e-9))
    return set(ranked[:quota]), masks, losses


def test_element_mask_example():
    m = element_mask(np.array([[1.0, -2.0, 0.5, 3.0]]))
    assert m.astype(int).tolist() == [[0, 1, 0, 1]]


@pytest.mark.parametrize("group", [[0.0, 0.0, 0.0, 0.0], [5.0, 5.0, 5.0, 5.0]])
def test_element_mask_ties_keep_low_index(group):
    assert element_mask(np.array([group])).astype(int).tolist() == [[1, 1, 0, 0]]


def test_element_mask_value_axis_groups_tokens():
    blk = np.array([[1.0], [-2.0], [0.5], [3.0]])
    assert element_mask(blk, VALUE).ravel().astype(int).tolist() == [0, 1, 0, 1]
    with pytest.raises(ValueError):
        element_mask(blk, KEY)


def test_block_loss_examples():
    x = np.array([[1.0, -2.0, 0.5, 3.0]])
    assert block_loss(x, np.array([[0, 1, 0, 1]], bool)) == 1.5
    assert block_loss(x, np.ones_like(x, bool)) == 0.0
    assert block_loss(np.zeros((4, 4)), np.zeros((4, 4), bool)) == 0.0
    with pytest.raises(ValueError):
        block_loss(x, np.ones((2, 4), bool))


def test_select_blocks_examples():
    assert select_blocks([5, 1, 3, 2], 0.5).sparse_blocks == [1, 3]
    assert select_blocks([5, 1, 3, 2], 0.0).sparse_blocks == []
    assert select_blocks([5, 1, 3, 2], 1.0, prefix=1).sparse_blocks == [1, 2, 3]


def test_select_blocks_ties_and_floor():
    assert select_blocks([2, 2, 2, 2], 0.5).sparse_blocks == [0, 1]
    # floor(0.6 * 3) = 1
    assert select_blocks([3, 2, 1], 0.6).sparse_blocks == [2]
    with pytest.raises(ValueError):
        select_blocks([1, 2], 1.5)


def test_prune_zero_sparsity_all_dense(rng):
    k = rng.standard_normal((256, 16))
    v = rng.standard_normal((256, 16))
    km, vm = prune_cache(k, v, SparsityConfig(0, 0, 64))
    for m in (km, vm):
        assert m.block.flags.all()
        assert m.element.all()


def test_prune_full_sparsity_cardinality(rng):
    k = rng.standard_normal((256, 16))
    v = rng.standard_normal((256, 16))
    km, vm = prune_cache(k, v, SparsityConfig(1, 1, 64))
    assert not km.block.flags.any() and not vm.block.flags.any()
    assert (km.element.reshape(256, 4, 4).sum(-1) == 2).all()
    # values group along tokens inside each block
    assert (vm.element.T.reshape(16, 64, 4).sum(-1) == 2).all()


def test_prune_selects_lowest_loss_blocks(rng):
    cfg = SparsityConfig(0.0, 0.5, 16)
    k = rng.standard_normal((64, 8)).astype(np.float32)
    v = rng.standard_normal((64, 8)).astype(np.float32)
    _, vm = prune_cache(k, v, cfg)
    want, masks, losses = brute_prune(v, cfg, VALUE, 0.5)
    assert set(vm.block.sparse_blocks) == want
    assert len(want) == 2
    np.testing.assert_allclose(vm.block.losses, losses, rtol=1e-12)


def test_protected_regions_round_up(rng):
    cfg = SparsityConfig(1.0, 1.0, 64, sink_tokens=10, local_window=65)
    m = prune_one(rng.standard_normal((640, 8)), cfg, KEY)
    assert m.protected_prefix_blocks == 1
    assert m.protected_suffix_blocks == 2
    assert m.block.flags.tolist() == [True] + [False] * 7 + [True] * 2


def test_ragged_tail_stays_dense(rng):
    cfg = SparsityConfig(1.0, 1.0, 16)
    m = prune_one(rng.standard_normal((70, 8)), cfg, VALUE)
    assert m.block.num_blocks == 5
    assert m.block.flags.tolist() == [False] * 4 + [True]
    assert m.element[64:].all()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.25, 0.5, 0.9, 1.0]),
       st.integers(0, 2), st.integers(0, 2), st.sampled_from([KEY, VALUE]))
def test_prune_properties(seed, s, sink, window, axis):
    rng = np.random.default_rng(seed)
    B = 8
    cfg = SparsityConfig(s, s, B, sink_tokens=sink * B, local_window=window * B)
    x = rng.standard_normal((B * 8, 8)).astype(np.float32)
    m = prune_one(x, cfg, axis)
    flags = m.block.flags
    # protection
    assert flags[:sink].all() and flags[len(flags) - window:].all()
    for j in range(8):
        blk = m.element[j * B:(j + 1) * B]
        if flags[j]:
            assert blk.all()
        else:
            view = blk if axis == KEY else blk.T
            assert (view.reshape(view.shape[0], -1, 4).sum(-1) == 2).all()
    # monotone selection over prunable blocks
    free = ~m.protected
    sparse_l = m.block.losses[free & ~flags]
    dense_l = m.block.losses[free & flags]
    if sparse_l.size and dense_l.size:
        assert sparse_l.max() <= dense_l.min()
    # scale equivariance: powers of two scale exactly
    for scale in (0.25, 8.0):
        m2 = prune_one(x * np.float32(scale), cfg, axis)
        np.testing.assert_array_equal(m2.element, m.element)
        np.testing.assert_array_equal(m2.block.flags, m.block.flags)


def test_further_prune_is_monotone(rng):
    cfg = SparsityConfig(0.25, 0.25, 16, sink_tokens=16, local_window=16)
    k = rng.standard_normal((16 * 10, 8))
    m = prune_one(k, cfg, KEY)
    m2 = further_prune(k, m, cfg, 0.75)
    before = set(m.block.sparse_blocks)
    after = set(m2.block.sparse_blocks)
    assert before <= after
    assert len(after) == 6  # floor(0.75 * 8)
    fresh = prune_one(k, SparsityConfig(0.75, 0.75, 16, sink_tokens=16, local_window=16), KEY)
    assert after == set(fresh.block.sparse_blocks)
    np.testing.assert_array_equal(m2.element, fresh.element)
    # lowering the target never restores sparse blocks
    m3 = further_prune(k, m2, cfg, 0.0)
    assert set(m3.block.sparse_blocks) == after
