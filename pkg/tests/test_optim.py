import numpy as np
import pytest

from distilrank.errors import ParameterError, UsageError
from distilrank.optim import Optimizer, adam, adamw
from distilrank.tensor import Tensor


def _param(value, grad):
    p = Tensor(np.array([value], dtype=float), requires_grad=True)
    p.grad = np.array([grad], dtype=float)
    return p


def test_adamw_first_step_moves_by_lr():
    p = _param(1.0, 1.0)
    adamw({"p": p}, lr=0.1, weight_decay=0.0).step()
    assert abs(p.data[0] - 0.9) < 1e-6


def test_zero_grad_zero_decay_is_noop():
    for kind in ("adam", "adamw"):
        p = _param(0.7, 0.0)
        opt = Optimizer({"p": p}, kind, lr=0.1, weight_decay=0.0)
        for _ in range(3):
            opt.step()
        assert p.data[0] == 0.7


def test_adamw_decay_is_decoupled():
    p = _param(2.0, 0.0)
    opt = adamw({"p": p}, lr=0.1, weight_decay=0.01)
    for step in range(1, 4):
        opt.step()
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.01) ** step, rel=1e-12)


def test_adam_folds_decay_into_gradient():
    # with zero gradient the L2 term alone drives a bias-corrected Adam step of ~lr
    p = _param(2.0, 0.0)
    adam({"p": p}, lr=0.1, weight_decay=0.01).step()
    assert p.data[0] == pytest.approx(1.9, abs=1e-6)


def test_missing_grad_is_usage_error():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(UsageError):
        adamw({"p": p}).step()


def test_unknown_kind():
    with pytest.raises(ParameterError):
        Optimizer({}, "sgd")


def test_step_count_and_moment_shapes(rng):
    p = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    opt = adamw({"w": p}, lr=1e-2)
    for i in range(4):
        p.grad = rng.normal(size=(3, 2))
        opt.step()
        assert opt.state.step_count == i + 1
    assert opt.state.first_moment["w"].shape == (3, 2)
    assert opt.state.second_moment["w"].shape == (3, 2)


@pytest.mark.parametrize("kind", ["adam", "adamw"])
def test_matches_reference_recurrence(rng, kind):
    lr, wd, b1, b2, eps = 0.05, 0.1, 0.9, 0.999, 1e-8
    start = rng.normal(size=5)
    grads = rng.normal(size=(6, 5))
    p = Tensor(start.copy(), requires_grad=True)
    opt = Optimizer({"p": p}, kind, lr, wd, b1, b2, eps)
    ref, m, v = start.copy(), np.zeros(5), np.zeros(5)
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        opt.step()
        if kind == "adam":
            g = g + wd * ref
        else:
            ref = ref - lr * wd * ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)
