import pytest
import torch

from abnet import numerics
from abnet.errors import (
    BackwardStateError,
    ConfigurationError,
    DimensionError,
    EmptyLossError,
    NumericError,
)


def test_matmul_shapes():
    a = torch.ones(2, 3)
    b = torch.ones(3, 4)
    assert numerics.matmul(a, b).shape == (2, 4)
    assert numerics.matmul(torch.ones(5, 2, 3), b).shape == (5, 2, 4)
    assert numerics.matmul(torch.ones(5, 2, 3), torch.ones(5, 3, 4)).shape == (5, 2, 4)


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as excinfo:
        numerics.matmul(torch.ones(2, 3), torch.ones(4, 5))
    assert "(2, 3)" in str(excinfo.value) and "(4, 5)" in str(excinfo.value)


def test_softmax_rows_sum_to_one_with_masked_entries():
    x = torch.tensor([[1.0, 2.0, float("-inf")], [0.0, 0.0, 0.0]])
    out = numerics.softmax(x)
    assert torch.allclose(out.sum(dim=-1), torch.ones(2))
    assert out[0, 2] == 0.0


def test_softmax_fully_masked_row():
    x = torch.full((1, 3), float("-inf"))
    with pytest.raises(NumericError):
        numerics.softmax(x)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        numerics.softmax(torch.tensor([float("nan"), 1.0]))


def test_layer_norm_eps_must_be_positive():
    h = torch.randn(2, 4)
    with pytest.raises(ConfigurationError):
        numerics.layer_norm(h, torch.ones(4), torch.zeros(4), eps=0.0)


def test_layer_norm_normalizes():
    h = torch.randn(3, 8, dtype=torch.float64)
    out = numerics.layer_norm(h, torch.ones(8, dtype=torch.float64), torch.zeros(8, dtype=torch.float64))
    assert torch.allclose(out.mean(dim=-1), torch.zeros(3, dtype=torch.float64), atol=1e-9)


def test_cross_entropy_ignores_masked_positions():
    logits = torch.zeros(1, 2, 4)
    targets = torch.tensor([[1, 3]])
    ignore = torch.tensor([[False, True]])
    loss = numerics.cross_entropy(logits, targets, ignore)
    assert torch.isclose(loss, torch.log(torch.tensor(4.0)))


def test_cross_entropy_all_ignored():
    with pytest.raises(EmptyLossError):
        numerics.cross_entropy(
            torch.zeros(1, 2, 4), torch.zeros(1, 2, dtype=torch.long),
            torch.ones(1, 2, dtype=torch.bool),
        )


def test_backward_twice_is_an_error():
    w = torch.ones(3, requires_grad=True)
    loss = (w * 2).sum()
    numerics.backward(loss)
    assert torch.equal(w.grad, torch.full((3,), 2.0))
    with pytest.raises(BackwardStateError):
        numerics.backward(loss)


def test_backward_zero_fills_unreached_params():
    used = torch.ones(2, requires_grad=True)
    unused = torch.ones(2, requires_grad=True)
    numerics.backward(used.sum(), [used, unused])
    assert torch.equal(unused.grad, torch.zeros(2))


def test_backward_requires_scalar():
    w = torch.ones(3, requires_grad=True)
    with pytest.raises(DimensionError):
        numerics.backward(w * 2)


def test_gradient_check_on_composed_ops():
    torch.manual_seed(0)
    x = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
    gain = torch.rand(5, dtype=torch.float64, requires_grad=True)

    def fn(x, w, gain):
        h = numerics.layer_norm(numerics.linear(x, w), gain, torch.zeros(5, dtype=torch.float64))
        return numerics.softmax(h).sum(dim=0)

    assert numerics.gradient_check(fn, [x, w, gain])


def test_gradient_check_requires_float64():
    x = torch.randn(2, requires_grad=True)
    with pytest.raises(ConfigurationError):
        numerics.gradient_check(lambda t: t * 2, [x])
