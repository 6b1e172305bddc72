import math

import numpy as np
import pytest
import torch

from dualrr import numkit as nk


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=nk.DTYPE)


def test_softmax_symmetric_pair():
    assert nk.softmax(nk.tensor([0.0, 0.0])).tolist() == [0.5, 0.5]


def test_matmul_identity():
    x = rand(3, 4)
    assert torch.equal(nk.matmul(torch.eye(3, dtype=nk.DTYPE), x), x)


def test_grad_of_softmax_sum_is_zero():
    x = rand(5).requires_grad_()
    nk.sum(nk.softmax(x)).backward()
    assert x.grad.abs().max() < 1e-15


def test_shape_error_names_both_shapes():
    with pytest.raises(nk.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nk.matmul(rand(2, 3), rand(4, 5))


def test_nonfinite_error_names_op():
    with pytest.raises(nk.NonFiniteError, match="log"):
        nk.log(nk.tensor([-1.0]))


def test_grad_check_square_sum():
    # analytic 2x vs central difference
    err = nk.grad_check(lambda x: (x**2).sum(), nk.tensor([1.0, 2.0, 3.0]), eps=1e-5)
    assert err < 1e-6


def test_grad_check_constant_is_zero():
    assert nk.grad_check(lambda x: torch.tensor(3.0, dtype=nk.DTYPE), nk.tensor([1.0, 2.0])) == 0.0


def test_grad_check_rejects_vector_output():
    with pytest.raises(ValueError):
        nk.grad_check(lambda x: x * 2, nk.tensor([1.0, 2.0]))


PRIMITIVES = {
    "matmul": lambda x: nk.sum(nk.matmul(x.reshape(2, 3), torch.linspace(-1, 1, 12, dtype=nk.DTYPE).reshape(3, 4)) ** 2),
    "add": lambda x: nk.sum(nk.add(x, x.flip(0)) ** 3),
    "scale": lambda x: nk.sum(nk.scale(x, 1.7) ** 2),
    "softmax": lambda x: nk.sum(nk.softmax(x.reshape(2, 3)) * torch.arange(6, dtype=nk.DTYPE).reshape(2, 3)),
    "log_softmax": lambda x: nk.sum(nk.log_softmax(x.reshape(3, 2))[:, 0]),
    "layer_norm": lambda x: nk.sum(nk.layer_norm(x.reshape(2, 3), torch.tensor([1.0, 2.0, 0.5], dtype=nk.DTYPE), torch.zeros(3, dtype=nk.DTYPE)) * torch.arange(6, dtype=nk.DTYPE).reshape(2, 3)),
    "gelu": lambda x: nk.sum(nk.gelu(x) ** 2),
    "masked_fill": lambda x: nk.sum(nk.softmax(nk.masked_fill(x.reshape(2, 3), torch.tensor([[True, False, False], [False, True, False]]))) ** 2),
    "gather": lambda x: nk.sum(nk.gather(x.reshape(2, 3), torch.tensor([[2], [0]])) ** 2),
    "mean": lambda x: nk.mean(x**2),
    "log_exp": lambda x: nk.sum(nk.log(nk.exp(x) + 1.0)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_grad_check_20_seeds(name):
    f = PRIMITIVES[name]
    for seed in range(20):
        assert nk.grad_check(f, rand(6, seed=seed), eps=1e-5) < 1e-6, (name, seed)


def test_relu_grad_check_away_from_kink():
    for seed in range(20):
        x = rand(6, seed=seed)
        x = x + torch.sign(x) * 0.1
        assert nk.grad_check(lambda v: nk.sum(nk.relu(v) ** 2), x) < 1e-6


def test_softmax_rows_sum_to_one():
    for seed in range(20):
        p = nk.softmax(rand(4, 7, seed=seed) * 10)
        assert (p.sum(-1) - 1).abs().max() < 1e-12


def test_masked_positions_get_negligible_probability():
    x = rand(3, 5)
    mask = torch.zeros(3, 5, dtype=torch.bool)
    mask[:, 1] = True
    p = nk.softmax(nk.masked_fill(x, mask))
    assert p[:, 1].max() < 1e-12


def test_forward_is_bit_deterministic():
    x = rand(4, 6)
    w = rand(6, 3, seed=1)
    a = nk.gelu(nk.linear(x, w))
    b = nk.gelu(nk.linear(x, w))
    assert torch.equal(a, b)


def test_unchecked_skips_finite_guard():
    with nk.unchecked():
        out = nk.log(nk.tensor([-1.0]))
    assert math.isnan(out.item())


def test_gather_matches_numpy_take():
    x = rand(2, 5)
    idx = torch.tensor([[4, 0], [1, 1]])
    assert np.array_equal(nk.gather(x, idx).numpy(), np.take_along_axis(x.numpy(), idx.numpy(), axis=-1))
