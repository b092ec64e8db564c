"""Score normalization and fusion: worked values, invariants, gradients."""
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voxrecon.errors import ContractError, ShapeError
from voxrecon.fusion import context_score, fuse_average, fuse_weighted, normalize_scores, scoring_specs
from voxrecon.gradcheck import finite_difference_gradcheck
from voxrecon.layers import init_params
from voxrecon.tensor import Tensor, add, mul, sum_all


def maps(arrs, grad=False):
    return [Tensor(np.asarray(a), requires_grad=grad) for a in arrs]


def test_two_view_scores():
    s = normalize_scores(maps([np.zeros((1, 1, 2, 2, 2)), np.full((1, 1, 2, 2, 2), np.log(3.0))]))
    np.testing.assert_allclose(s[0].data, 0.25)
    np.testing.assert_allclose(s[1].data, 0.75)


def test_equal_raw_gives_uniform():
    s = normalize_scores(maps([np.full((2, 2), 4.0)] * 3))
    for t in s:
        np.testing.assert_allclose(t.data, 1 / 3)


def test_single_view_is_one():
    s = normalize_scores(maps([np.random.default_rng(0).standard_normal((3, 3))]))
    assert np.all(s[0].data == 1.0)


def test_large_raw_no_overflow():
    s = normalize_scores(maps([np.full((2,), 1000.0, np.float32), np.full((2,), 999.0, np.float32)]))
    assert np.all(np.isfinite(s[0].data))
    np.testing.assert_allclose(s[0].data, 1 / (1 + np.exp(-1)), rtol=1e-6)


def test_shift_invariance(rng):
    raw = [rng.standard_normal((4, 4)) for _ in range(3)]
    shift = rng.standard_normal((4, 4)) * 50
    a = normalize_scores(maps(raw))
    b = normalize_scores(maps([r + shift for r in raw]))
    for x, y in zip(a, b):
        np.testing.assert_allclose(x.data, y.data, atol=1e-6)


def test_fuse_examples():
    a, b = np.full((2, 2), 0.2), np.full((2, 2), 0.6)
    np.testing.assert_allclose(fuse_average(maps([a, b])).data, 0.4)
    fused = fuse_weighted(maps([a, b]), maps([np.full((2, 2), 0.25), np.full((2, 2), 0.75)]))
    np.testing.assert_allclose(fused.data, 0.25 * a + 0.75 * b)
    same = fuse_weighted(maps([a, a, a]), normalize_scores(maps([np.eye(2), -np.eye(2), np.ones((2, 2))])))
    np.testing.assert_allclose(same.data, a, rtol=1e-15)


def test_single_view_identity(rng):
    v = rng.random((1, 1, 4, 4, 4)).astype(np.float32)
    assert np.array_equal(fuse_weighted(maps([v]), normalize_scores(maps([v * 3]))).data, v)
    assert np.array_equal(fuse_average(maps([v])).data, v)


def test_errors():
    with pytest.raises(ContractError):
        normalize_scores([])
    with pytest.raises(ContractError):
        fuse_average([])
    with pytest.raises(ShapeError):
        normalize_scores(maps([np.zeros(2), np.zeros(3)]))
    with pytest.raises(ShapeError):
        fuse_weighted(maps([np.zeros(2), np.zeros(2)]), maps([np.ones(2)]))
    with pytest.raises(ShapeError):
        fuse_weighted(maps([np.zeros(2)]), maps([np.ones(3)]))


@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_canonical_permutation_is_bitwise(n, seed):
    rng = np.random.default_rng(seed)
    coarse = [rng.random((1, 1, 3, 3, 3)).astype(np.float32) for _ in range(n)]
    raw = [rng.standard_normal((1, 1, 3, 3, 3)).astype(np.float32) * 3 for _ in range(n)]
    ref = fuse_weighted(maps(coarse), normalize_scores(maps(raw), True), True).data
    perm = rng.permutation(n)
    got = fuse_weighted(maps([coarse[i] for i in perm]), normalize_scores(maps([raw[i] for i in perm]), True), True).data
    assert ref.tobytes() == got.tobytes()
    avg = fuse_average(maps(coarse), True).data
    assert avg.tobytes() == fuse_average(maps([coarse[i] for i in perm]), True).data.tobytes()


def test_fusion_gradient(rng):
    coarse = maps([rng.random((2, 3)) for _ in range(3)], grad=True)
    raw = maps([rng.standard_normal((2, 3)) for _ in range(3)], grad=True)
    w = Tensor(rng.standard_normal((2, 3)))
    f = lambda: sum_all(mul(fuse_weighted(coarse, normalize_scores(raw)), w))
    assert finite_difference_gradcheck(f, coarse + raw) < 1e-6


class TestScoringNetwork:
    def test_shapes_and_sharing(self, rng):
        specs = scoring_specs()
        assert [s.out_ch for s in specs if s.kind == "conv3d"] == [9, 16, 8, 4, 1]
        p = init_params(specs, 0, np.float64)
        ctx = rng.standard_normal((1, 9, 4, 4, 4))
        out = context_score(specs, p, Tensor(np.concatenate([ctx, ctx])), "eval")
        assert out.shape == (2, 1, 4, 4, 4)
        assert np.array_equal(out.data[0], out.data[1])

    def test_zero_parameters(self, rng):
        specs = scoring_specs()
        p = init_params(specs, 0)
        for k, t in p.trainable():
            t.data[...] = 0
        out = context_score(specs, p, Tensor(rng.standard_normal((2, 9, 3, 3, 3)).astype(np.float32)))
        assert np.all(out.data == 0)

    def test_wrong_channels(self):
        specs = scoring_specs()
        with pytest.raises(ShapeError):
            context_score(specs, init_params(specs, 0), Tensor(np.zeros((1, 8, 3, 3, 3))))
