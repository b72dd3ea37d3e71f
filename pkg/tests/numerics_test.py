import numpy as np
import pytest

from app.core.exceptions import NumericFaultError, ShapeMismatchError
from app.services import numerics as nx

EPS = 1e-4
TOL = 1e-5


def numeric_grad(f, x: np.ndarray) -> np.ndarray:
    """Central finite differences of the scalar function f at x (x is perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + EPS
        up = f()
        x[idx] = orig - EPS
        down = f()
        x[idx] = orig
        grad[idx] = (up - down) / (2 * EPS)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-3)))


def away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def test_conv3x3_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    for trial in range(20):
        x = rng.standard_normal((2, 5, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        g = rng.standard_normal((3, 5, 4))

        loss = lambda: float(np.sum(nx.conv3x3(x, w, b) * g))
        back = nx.conv3x3_backward(x, w, g)

        assert rel_error(back.input_grad, numeric_grad(loss, x)) < TOL
        assert rel_error(back.param_grads[0], numeric_grad(loss, w)) < TOL
        assert rel_error(back.param_grads[1], numeric_grad(loss, b)) < TOL

    print("✅ conv3x3 gradients match finite differences")


def test_conv3x3_is_linear_and_preserves_size():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((4, 3, 3, 3))
    zero = np.zeros(4)
    a, b = rng.standard_normal((3, 8, 6)), rng.standard_normal((3, 8, 6))
    lhs = nx.conv3x3(2.0 * a - 3.0 * b, w, zero)
    rhs = 2.0 * nx.conv3x3(a, w, zero) - 3.0 * nx.conv3x3(b, w, zero)
    assert lhs.shape == (4, 8, 6)
    assert np.max(np.abs(lhs - rhs)) < 1e-6


def test_conv3x3_identity_kernel_and_zero_padding():
    x = np.arange(12, dtype=np.float64).reshape(1, 3, 4)
    identity = np.zeros((1, 1, 3, 3))
    identity[0, 0, 1, 1] = 1.0
    assert np.array_equal(nx.conv3x3(x, identity, np.zeros(1)), x)

    ones = np.ones((1, 1, 3, 3))
    out = nx.conv3x3(np.ones((1, 3, 3)), ones, np.zeros(1))
    # corner sees 4 pixels, edge 6, center 9
    assert out[0, 0, 0] == 4 and out[0, 0, 1] == 6 and out[0, 1, 1] == 9


def test_conv3x3_rejects_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        nx.conv3x3(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


def test_maxpool_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    for trial in range(20):
        # well separated values so the winner never flips under the perturbation
        x = (rng.permutation(2 * 6 * 4).reshape(2, 6, 4) * 0.01).astype(np.float64)
        g = rng.standard_normal((2, 3, 2))
        out, arg = nx.maxpool2x2(x)
        loss = lambda: float(np.sum(nx.maxpool2x2(x)[0] * g))
        assert rel_error(nx.maxpool2x2_backward(g, arg), numeric_grad(loss, x)) < TOL


def test_maxpool_of_constant_is_constant():
    x = np.full((3, 8, 8), 0.25)
    out, _ = nx.maxpool2x2(x)
    assert out.shape == (3, 4, 4)
    assert np.all(out == 0.25)


def test_maxpool_rejects_odd_size():
    with pytest.raises(ShapeMismatchError):
        nx.maxpool2x2(np.zeros((1, 5, 4)))


def test_upsample_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    for trial in range(20):
        x = rng.standard_normal((2, 3, 4))
        g = rng.standard_normal((2, 6, 8))
        loss = lambda: float(np.sum(nx.bilinear_upsample2x(x) * g))
        assert rel_error(nx.bilinear_upsample2x_backward(g), numeric_grad(loss, x)) < TOL


def test_upsample_of_constant_is_constant_and_half_pixel():
    out = nx.bilinear_upsample2x(np.full((2, 4, 4), 0.7))
    assert out.shape == (2, 8, 8)
    assert np.allclose(out, 0.7, atol=1e-12)

    # half-pixel centers: output pixel 1 of a [0, 1] ramp sits at source 0.25
    ramp = np.array([[[0.0, 1.0]]]).repeat(2, axis=1)
    row = nx.bilinear_upsample2x(ramp)[0, 0]
    assert np.allclose(row, [0.0, 0.25, 0.75, 1.0])


def test_activation_and_dense_backward_match_finite_differences():
    rng = np.random.default_rng(4)
    for trial in range(20):
        x = away_from_zero(rng, (3, 4, 4))
        g = rng.standard_normal((3, 4, 4))
        loss = lambda: float(np.sum(nx.relu(x) * g))
        assert rel_error(nx.relu_backward(x, g), numeric_grad(loss, x)) < TOL

        v = rng.standard_normal(16) * 2
        gv = rng.standard_normal(16)
        loss = lambda: float(np.sum(nx.gelu(v) * gv))
        assert rel_error(nx.gelu_backward(v, gv), numeric_grad(loss, v)) < TOL

        w = rng.standard_normal((5, 16))
        b = rng.standard_normal(5)
        gd = rng.standard_normal(5)
        loss = lambda: float(np.sum(nx.dense(v, w, b) * gd))
        back = nx.dense_backward(v, w, gd)
        assert rel_error(back.input_grad, numeric_grad(loss, v)) < TOL
        assert rel_error(back.param_grads[0], numeric_grad(loss, w)) < TOL
        assert rel_error(back.param_grads[1], numeric_grad(loss, b)) < TOL


def test_gelu_is_exact_erf_form():
    assert nx.gelu(np.array([0.0]))[0] == 0.0
    # x * Phi(x) at x = 1
    assert abs(nx.gelu(np.array([1.0]))[0] - 0.8413447460685429) < 1e-12


def test_mse_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    for trial in range(20):
        pred = rng.standard_normal((4, 4))
        target = rng.standard_normal((4, 4))
        loss = lambda: nx.mse(pred, target)
        assert rel_error(nx.mse_backward(pred, target), numeric_grad(loss, pred)) < TOL


def test_adam_zero_gradient_keeps_params():
    params = np.array([1.0, -2.0, 3.0])
    state = nx.AdamState.zeros(3, dtype=np.float64)
    new, state = nx.adam_step(params, np.zeros(3), state)
    assert np.array_equal(new, params)
    assert state.step == 1


def test_adam_first_step_moves_by_lr():
    params = np.array([0.5])
    state = nx.AdamState.zeros(1, dtype=np.float64, lr=3e-4)
    new, state = nx.adam_step(params, np.array([1.0]), state)
    expected = 0.5 - 3e-4 * 1.0 / (1.0 + 1e-8)
    assert abs(new[0] - expected) < 1e-15


def test_adam_two_steps_follow_recursion():
    params = np.array([0.0])
    g = np.array([0.3])
    state = nx.AdamState.zeros(1, dtype=np.float64, lr=1e-3)
    p1, s1 = nx.adam_step(params, g, state)
    p2, s2 = nx.adam_step(p1, g, s1)

    m1, v1 = 0.1 * 0.3, 0.001 * 0.09
    m2, v2 = 0.9 * m1 + 0.1 * 0.3, 0.999 * v1 + 0.001 * 0.09
    assert np.isclose(s2.m[0], m2, rtol=1e-12) and np.isclose(s2.v[0], v2, rtol=1e-12)
    m_hat, v_hat = m2 / (1 - 0.9**2), v2 / (1 - 0.999**2)
    assert np.isclose(p2[0], p1[0] - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-12)
    assert s2.step == 2


def test_adam_rejects_non_finite_gradient():
    state = nx.AdamState.zeros(2, dtype=np.float64)
    with pytest.raises(NumericFaultError):
        nx.adam_step(np.zeros(2), np.array([np.nan, 1.0]), state)
    assert state.step == 0


def test_operations_are_deterministic():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    first = nx.bilinear_upsample2x(nx.maxpool2x2(nx.relu(nx.conv3x3(x, w, b)))[0])
    second = nx.bilinear_upsample2x(nx.maxpool2x2(nx.relu(nx.conv3x3(x, w, b)))[0])
    assert first.dtype == np.float32
    assert np.array_equal(first, second)
