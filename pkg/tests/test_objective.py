import numpy as np
import pytest

from voxrecon.errors import ContractError, ShapeError
from voxrecon.gradcheck import finite_difference_gradcheck
from voxrecon.objective import binarize, bce_loss, iou
from voxrecon.tensor import Tensor


def test_bce_examples():
    assert abs(float(bce_loss(Tensor(np.array([0.5])), np.array([1])).data) - np.log(2)) < 1e-12
    assert abs(float(bce_loss(Tensor(np.array([0.5])), np.array([0])).data) - np.log(2)) < 1e-12
    g = np.array([0.0, 1.0, 1.0, 0.0])
    assert float(bce_loss(Tensor(g.copy()), g).data) <= 2e-7


def test_bce_float32_input():
    out = bce_loss(Tensor(np.full((2, 2), 0.5, np.float32)), np.ones((2, 2)))
    assert out.dtype == np.float32


def test_bce_errors():
    with pytest.raises(ShapeError):
        bce_loss(Tensor(np.zeros(3) + 0.5), np.zeros(4))
    with pytest.raises(ContractError):
        bce_loss(Tensor(np.zeros(3) + 0.5), np.array([0, 0.5, 1]))


def test_bce_gradient(rng):
    p = Tensor(rng.uniform(0.05, 0.95, (2, 1, 3, 3, 3)), requires_grad=True)
    gt = rng.random((2, 1, 3, 3, 3)) > 0.5
    assert finite_difference_gradcheck(lambda: bce_loss(p, gt), p) < 1e-7


def test_bce_no_gradient_outside_clamp():
    p = Tensor(np.array([0.0, 1.0, 0.5]), requires_grad=True)
    bce_loss(p, np.array([1, 0, 1])).backward()
    assert p.grad[0] == 0 and p.grad[1] == 0 and p.grad[2] != 0


def test_binarize_is_strict():
    assert not binarize(np.array(0.3), 0.3)
    assert binarize(np.array(0.31), 0.3)
    assert not binarize(np.zeros((2, 2))).any()


def test_iou_examples():
    gt = np.zeros((2, 2, 2), bool)
    gt.flat[[0, 1, 2, 3]] = True
    p = np.zeros((2, 2, 2))
    p.flat[[2, 3, 4, 5]] = 0.9
    assert iou(p, gt) == pytest.approx(2 / 6)
    assert iou(gt.astype(float), gt) == 1.0
    assert iou((~gt).astype(float), gt) == 0.0
    assert iou(np.zeros(4), np.zeros(4)) == 1.0
    with pytest.raises(ShapeError):
        iou(np.zeros(4), np.zeros(5))
