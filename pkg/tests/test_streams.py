import numpy as np
import pytest

from rlq.streams import BLOCK, as_generator, normal_increments, path_blocks


def test_blocks_cover_paths():
    blocks = list(path_blocks(2500))
    assert blocks[0] == (0, 0, BLOCK)
    assert blocks[-1][2] == 2500
    assert [b for b, _, _ in path_blocks(10, first=3 * BLOCK)] == [3]


def test_unaligned_offset_rejected():
    with pytest.raises(ValueError):
        list(path_blocks(10, first=5))


def test_path_draws_independent_of_batch_size():
    a = normal_increments(7, 3000, 5, 0.1)
    b = normal_increments(7, 100, 5, 0.1)
    np.testing.assert_array_equal(a[:100], b)
    c = normal_increments(7, 3000 - BLOCK, 5, 0.1, first=BLOCK)
    np.testing.assert_array_equal(a[BLOCK:], c)


def test_increment_scale():
    dW = normal_increments(1, 50_000, 4, 0.25)
    assert dW.std() == pytest.approx(0.5, rel=0.01)


def test_as_generator_passthrough():
    g = np.random.default_rng(0)
    assert as_generator(g) is g
    assert as_generator(3).random() == as_generator(3).random()
