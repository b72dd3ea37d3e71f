import numpy as np
import pytest

from app.core.exceptions import ShapeMismatchError
from app.services.unet import (
    DenoiserParameters,
    ForwardCache,
    TimeEmbeddingConfig,
    UNetConfig,
    denoiser_backward,
    denoiser_forward,
    parameter_count,
    parameter_layout,
    time_embedding,
    time_mlp,
)

TINY = UNetConfig(base_channels=2, levels=1, time=TimeEmbeddingConfig(dim=4))


def inputs(size: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    x_t = rng.standard_normal((size, size))
    mask = rng.uniform(size=(size, size)) < 0.3
    y = np.where(mask, rng.uniform(size=(size, size)), 0.0)
    return x_t, y, mask.astype(np.float64)


def test_default_parameter_count():
    assert parameter_count() == 163_457
    layout = parameter_layout(UNetConfig())
    assert layout[0].name == "time_mlp.0" and layout[-1].name == "output"
    assert layout[2].weight_shape == (32, 19, 3, 3)


def test_zero_parameters_give_zero_output():
    params = DenoiserParameters.zeros(UNetConfig(), steps=20)
    x_t, y, mask = inputs(16)
    out = denoiser_forward(params, x_t, y, mask, t=7)
    assert out.shape == (16, 16)
    assert not np.any(out)


def test_layer_views_share_the_flat_vector():
    params = DenoiserParameters.zeros(TINY, steps=10, dtype=np.float64)
    params["output"].bias[...] = 0.25
    assert params.vector[-1] == 0.25
    assert sum(spec.size for spec in params.layout) == params.parameter_count


def test_time_embedding():
    config = TimeEmbeddingConfig()
    emb = time_embedding(0, config)
    assert emb.shape == (16,)
    assert np.array_equal(emb[0::2], np.zeros(8)) and np.array_equal(emb[1::2], np.ones(8))
    # first frequency is 1 rad per step
    assert time_embedding(3, config)[0] == pytest.approx(np.sin(3.0))
    with pytest.raises(ValueError):
        time_embedding(20, config, steps=20)


def test_forward_routes_time_through_the_mlp():
    rng = np.random.default_rng(3)
    params = DenoiserParameters.zeros(TINY, steps=10, dtype=np.float64)
    params.vector[:] = rng.normal(scale=0.5, size=params.parameter_count)
    x_t, y, mask = inputs(4, seed=2)

    cache = ForwardCache()
    denoiser_forward(params, x_t, y, mask, t=5, cache=cache)
    emb = time_mlp(params, time_embedding(5, TINY.time, steps=10))
    assert np.array_equal(cache.network_input[3:, 0, 0], emb)
    assert np.array_equal(cache.raw_embedding, time_embedding(5, TINY.time))
    assert cache.mlp_pre.shape == cache.mlp_hidden.shape == (TINY.time.dim,)


def test_spatial_size_must_divide_by_pooling():
    params = DenoiserParameters.zeros(UNetConfig(), steps=20)
    x_t, y, mask = inputs(12)
    with pytest.raises(ShapeMismatchError):
        denoiser_forward(params, x_t, y, mask, t=0)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(42)
    params = DenoiserParameters.zeros(TINY, steps=10, dtype=np.float64)
    params.vector[:] = rng.normal(scale=0.5, size=params.parameter_count)
    x_t, y, mask = inputs(4, seed=1)
    weights = rng.standard_normal((4, 4))
    t = 6

    def loss(vector: np.ndarray) -> float:
        return float(np.sum(denoiser_forward(params.with_vector(vector), x_t, y, mask, t) * weights))

    cache = ForwardCache()
    denoiser_forward(params, x_t, y, mask, t, cache=cache)
    grads = denoiser_backward(params, cache, weights)

    eps = 1e-6
    for trial in range(10):
        direction = rng.standard_normal(params.parameter_count)
        numeric = (loss(params.vector + eps * direction) - loss(params.vector - eps * direction)) / (2 * eps)
        analytic = float(grads @ direction)
        assert abs(numeric - analytic) <= 1e-6 * max(1.0, abs(analytic))
    print("✅ denoiser gradients agree with central differences")
