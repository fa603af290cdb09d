"""Engine tests: every differentiable primitive against central differences."""

from __future__ import annotations

import numpy as np
import pytest

from semreg import autodiff as ad
from semreg.autodiff import Parameter, Tensor, backward, grad_check, momentum_step
from semreg.errors import ValidationError

SMOOTH_TOL = 1e-6
KINK_TOL = 1e-4  # relu / max with inputs kept away from the kink


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# forward fixtures
# ---------------------------------------------------------------------------


def test_matmul_identity() -> None:
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_softmax_of_zeros_is_uniform() -> None:
    out = ad.softmax(Tensor([0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)


def test_relu_definition() -> None:
    out = ad.relu(Tensor([-1.5, 2.5]))
    np.testing.assert_array_equal(out.data, [0.0, 2.5])


def test_softmax_rows_sum_to_one() -> None:
    rng = _rng(0)
    out = ad.softmax(Tensor(rng.normal(size=(7, 5)) * 10.0), axis=1)
    assert (out.data >= 0.0).all()
    np.testing.assert_allclose(out.data.sum(axis=1), np.ones(7), atol=1e-12)


def test_backward_of_sum_is_ones() -> None:
    x = Tensor([1.0, 5.0, -2.0], requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_of_quadratic() -> None:
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_requires_scalar() -> None:
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValidationError, match="scalar"):
        backward(x * x)


def test_matmul_shape_mismatch_names_shapes() -> None:
    with pytest.raises(ValidationError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_add_shape_mismatch_names_shapes() -> None:
    with pytest.raises(ValidationError, match=r"\(3,\).*\(4,\)"):
        Tensor(np.zeros(3)) + Tensor(np.zeros(4))


def test_unreachable_parameter_grad_stays_zero() -> None:
    used = Parameter("used", np.ones(3))
    unused = Parameter("unused", np.ones(3))
    backward(used.sum())
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


def test_gradients_accumulate_across_backward_calls() -> None:
    x = Tensor([2.0], requires_grad=True)
    backward((x * x).sum())
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [8.0])


def test_max_routes_gradient_to_argmax_only() -> None:
    x = Tensor([[1.0, 5.0, 2.0], [7.0, 0.0, 3.0]], requires_grad=True)
    backward(x.max(axis=1).sum())
    np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])


def test_no_grad_disables_taping() -> None:
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        out = (x * x).sum()
    assert not out.requires_grad


def test_deterministic_forward() -> None:
    def run() -> np.ndarray:
        rng = _rng(7)
        w = Parameter("w", ad.uniform_init(rng, (8, 4)))
        x = Tensor(rng.normal(size=(5, 8)))
        return ad.relu(ad.matmul(x, w)).data

    assert run().tobytes() == run().tobytes()


# ---------------------------------------------------------------------------
# gradient checks, one per primitive
# ---------------------------------------------------------------------------


def _param(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_grad_add_broadcast() -> None:
    rng = _rng(10)
    b = Tensor(rng.normal(size=(4,)))
    x = _param(rng, (3, 4))
    assert grad_check(lambda t: (t + b).sum(), x) <= SMOOTH_TOL


def test_grad_subtract() -> None:
    rng = _rng(11)
    b = Tensor(rng.normal(size=(3, 4)))
    x = _param(rng, (3, 4))
    assert grad_check(lambda t: ((b - t) * (b - t)).sum(), x) <= SMOOTH_TOL


def test_grad_multiply_broadcast() -> None:
    rng = _rng(12)
    b = Tensor(rng.normal(size=(3, 1)))
    x = _param(rng, (3, 4))
    assert grad_check(lambda t: (t * b).sum(), x) <= SMOOTH_TOL


def test_grad_divide_both_sides() -> None:
    rng = _rng(13)
    num = Tensor(rng.normal(size=(3, 4)))
    denom = Tensor(rng.uniform(2.0, 3.0, size=(3, 4)))
    x = Tensor(rng.uniform(0.5, 1.5, size=(3, 4)), requires_grad=True)
    assert grad_check(lambda t: (num / t).sum(), x) <= SMOOTH_TOL
    assert grad_check(lambda t: (t / denom).sum(), x) <= SMOOTH_TOL


def test_grad_matmul_both_operands() -> None:
    rng = _rng(14)
    other = Tensor(rng.normal(size=(4, 5)))
    x = _param(rng, (3, 4))
    assert grad_check(lambda t: ad.matmul(t, other).sum(), x) <= SMOOTH_TOL
    y = _param(rng, (5, 3))
    left = Tensor(rng.normal(size=(2, 5)))
    assert grad_check(lambda t: (ad.matmul(left, t) * ad.matmul(left, t)).sum(), y) <= SMOOTH_TOL


def test_grad_transpose_and_reshape() -> None:
    rng = _rng(15)
    x = _param(rng, (3, 4))
    w = Tensor(rng.normal(size=(3, 4)))
    assert grad_check(lambda t: (t.T * w.T).sum(), x) <= SMOOTH_TOL
    assert grad_check(lambda t: (t.reshape(12) * w.data.reshape(12)).sum(), x) <= SMOOTH_TOL


def test_grad_relu_away_from_kink() -> None:
    rng = _rng(16)
    data = rng.normal(size=(4, 4))
    data[np.abs(data) < 0.1] = 0.5  # keep clear of the kink
    x = Tensor(data, requires_grad=True)
    assert grad_check(lambda t: (ad.relu(t) * ad.relu(t)).sum(), x) <= KINK_TOL


def test_grad_exp_log_power() -> None:
    rng = _rng(17)
    x = Tensor(rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
    assert grad_check(lambda t: ad.exp(t).sum(), x) <= SMOOTH_TOL
    assert grad_check(lambda t: ad.log(t).sum(), x) <= SMOOTH_TOL
    assert grad_check(lambda t: ad.power(t, -0.5).sum(), x) <= SMOOTH_TOL


def test_grad_softmax_log_likelihood() -> None:
    rng = _rng(18)
    x = _param(rng, (4, 4))
    assert (
        grad_check(lambda t: -ad.log(ad.gather(ad.softmax(t, axis=1).reshape(16), [0, 5, 10, 15])).sum(), x)
        <= SMOOTH_TOL
    )


def test_grad_sum_mean_with_axes() -> None:
    rng = _rng(19)
    x = _param(rng, (3, 4))
    w = Tensor(rng.normal(size=(3, 1)))
    assert grad_check(lambda t: (t.sum(axis=1, keepdims=True) * w).sum(), x) <= SMOOTH_TOL
    assert grad_check(lambda t: (t.mean(axis=0) * t.mean(axis=0)).sum(), x) <= SMOOTH_TOL
    assert grad_check(lambda t: t.mean(), x) <= SMOOTH_TOL


def test_grad_max_axis_and_global() -> None:
    rng = _rng(20)
    data = rng.permutation(24).reshape(4, 6).astype(float)  # unique values, no ties
    x = Tensor(data, requires_grad=True)
    assert grad_check(lambda t: (t.max(axis=1) * t.max(axis=1)).sum(), x) <= KINK_TOL
    assert grad_check(lambda t: t.max() * t.max(), x) <= KINK_TOL


def test_grad_concat() -> None:
    rng = _rng(21)
    other = Tensor(rng.normal(size=(2, 4)))
    x = _param(rng, (3, 4))
    w = Tensor(rng.normal(size=(5, 4)))
    assert grad_check(lambda t: (ad.concat([t, other], axis=0) * w).sum(), x) <= SMOOTH_TOL


def test_grad_gather_with_repeats() -> None:
    rng = _rng(22)
    x = _param(rng, (5, 3))
    w = Tensor(rng.normal(size=(4, 3)))
    assert grad_check(lambda t: (ad.gather(t, [0, 2, 2, 4]) * w).sum(), x) <= SMOOTH_TOL


def test_grad_crop2d() -> None:
    rng = _rng(23)
    x = _param(rng, (4, 5))
    w = Tensor(rng.normal(size=(2, 3)))
    assert grad_check(lambda t: (ad.crop2d(t, 2, 3) * w).sum(), x) <= SMOOTH_TOL


def test_grad_feature_normalize_all_inputs() -> None:
    rng = _rng(24)
    x = _param(rng, (6, 3))
    scale = Tensor(rng.uniform(0.5, 1.5, size=(3,)), requires_grad=True)
    shift = Tensor(rng.normal(size=(3,)), requires_grad=True)
    w = Tensor(rng.normal(size=(6, 3)))

    def loss_of_x(t: Tensor) -> Tensor:
        return (ad.feature_normalize(t, scale, shift, axis=0) * w).sum()

    def loss_of_scale(s: Tensor) -> Tensor:
        return (ad.feature_normalize(x, s, shift, axis=0) * w).sum()

    def loss_of_shift(s: Tensor) -> Tensor:
        return (ad.feature_normalize(x, scale, s, axis=0) * w).sum()

    assert grad_check(loss_of_x, x) <= SMOOTH_TOL
    assert grad_check(loss_of_scale, scale) <= SMOOTH_TOL
    assert grad_check(loss_of_shift, shift) <= SMOOTH_TOL


def test_grad_check_validates_eps() -> None:
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValidationError):
        grad_check(lambda t: t.sum(), x, eps=0.1)


def test_grad_check_exact_for_linear() -> None:
    rng = _rng(25)
    x = _param(rng, (5,))
    assert grad_check(lambda t: t.sum(), x) <= 1e-10


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_momentum_zero_is_plain_sgd() -> None:
    p = Parameter("p", np.zeros(1))
    p.grad[:] = 1.0
    momentum_step([p], lr=0.1, momentum_coeff=0.0)
    np.testing.assert_allclose(p.data, [-0.1])
    np.testing.assert_array_equal(p.grad, [0.0])  # zeroed after the step


def test_momentum_two_steps_hand_iterated() -> None:
    p = Parameter("p", np.zeros(1))
    p.grad[:] = 1.0
    momentum_step([p], lr=0.1, momentum_coeff=0.9)
    p.grad[:] = 1.0
    momentum_step([p], lr=0.1, momentum_coeff=0.9)
    np.testing.assert_allclose(p.data, [-0.29])


def test_zero_gradient_is_fixed_point() -> None:
    p = Parameter("p", np.array([3.0]))
    momentum_step([p], lr=0.1, momentum_coeff=0.9)
    np.testing.assert_array_equal(p.data, [3.0])


def test_uniform_init_bounds() -> None:
    rng = _rng(26)
    w = ad.uniform_init(rng, (64, 32))
    bound = np.sqrt(1.0 / 64.0)
    assert np.abs(w).max() <= bound
    assert w.std() > bound / 4.0  # actually spread out
