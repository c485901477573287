import numpy as np
import pytest

from acerase.denoiser import (
    Architecture,
    DivergenceError,
    LoraAdapter,
    backward,
    denoising_loss,
    forward,
    init_adapter,
    init_denoiser,
    merge_adapter,
    predict_eps,
    train_base,
)
from acerase.diffusion import build_schedule
from acerase.universe import canonical_universe
from helpers import fd_gradient, max_rel_error


def _inputs(arch, n=100, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(n, arch.data_dim)) * 3, rng.integers(0, arch.num_steps + 1, size=n),
            rng.integers(0, arch.num_concepts + 1, size=n))


def test_parameter_count_formula():
    arch = Architecture(hidden=128, time_dim=16, concept_dim=8)
    params = init_denoiser(arch, 0)
    # embedding 11x8, W1 128x26 + 128, W2/W3 128x128 + 128, W4 2x128 + 2
    by_hand = 11 * 8 + (128 * 26 + 128) + 2 * (128 * 128 + 128) + (2 * 128 + 2)
    assert by_hand == 36_826
    assert sum(v.size for v in params.tensors.values()) == by_hand == arch.parameter_count()


def test_init_deterministic_and_finite():
    arch = Architecture()
    a, b = init_denoiser(arch, 4), init_denoiser(arch, 4)
    for k in a.tensors:
        np.testing.assert_array_equal(a[k], b[k])
    assert not np.array_equal(a["W1"], init_denoiser(arch, 5)["W1"])
    z, t, c = _inputs(arch)
    assert np.all(np.isfinite(predict_eps(a, None, z, t, c)))


@pytest.mark.parametrize("kw", [{"hidden": 4}, {"time_dim": 1}, {"concept_dim": 1}, {"time_dim": 5}])
def test_invalid_architecture(kw):
    with pytest.raises(ValueError):
        Architecture(**kw)


def test_zero_b_adapter_is_exact_identity():
    params = init_denoiser(Architecture(), 1)
    adapter = init_adapter(params, rank=4, scale=4.0, seed=2)
    assert all(not b.any() for b in adapter.B.values())
    z, t, c = _inputs(params.arch)
    np.testing.assert_array_equal(predict_eps(params, adapter, z, t, c), predict_eps(params, None, z, t, c))
    merged = merge_adapter(params, adapter)
    np.testing.assert_array_equal(predict_eps(merged, None, z, t, c), predict_eps(params, None, z, t, c))


def test_merge_matches_adapter_path(small_net):
    params, adapter = small_net
    before = {k: v.copy() for k, v in params.tensors.items()}
    merged = merge_adapter(params, adapter)
    z, t, c = _inputs(params.arch)
    diff = np.abs(predict_eps(merged, None, z, t, c) - predict_eps(params, adapter, z, t, c)).max()
    assert diff < 1e-12
    for k, v in before.items():
        np.testing.assert_array_equal(params[k], v)


def test_adapter_rank_and_shape_checks():
    params = init_denoiser(Architecture(hidden=16, time_dim=4, concept_dim=3), 0)
    with pytest.raises(ValueError):
        init_adapter(params, rank=0)
    with pytest.raises(ValueError):
        init_adapter(params, rank=17)
    adapter = init_adapter(params, rank=4)
    assert adapter.A["W2"].shape == (4, 16) and adapter.B["W2"].shape == (16, 4)
    assert adapter.B["W4"].shape == (2, 2)  # output matrix is narrower than the rank
    bad = LoraAdapter(4, 4.0, {"W2": np.zeros((4, 5))}, {"W2": np.zeros((16, 4))})
    with pytest.raises(ValueError):
        predict_eps(params, bad, np.zeros(2), 1, 0)


def test_condition_index_range(small_net):
    params, _ = small_net
    with pytest.raises(ValueError):
        predict_eps(params, None, np.zeros(2), 1, 4)


def test_null_token_is_unconditional_row(small_net):
    params, _ = small_net
    z, t, _ = _inputs(params.arch, 5)
    null = params.arch.num_concepts
    out = predict_eps(params, None, z, t, null)
    params.tensors["embed"][null] += 1.0
    assert not np.allclose(out, predict_eps(params, None, z, t, null))


def _scalar_loss(params, adapter, z, t, c, weights):
    out = forward(params, adapter, z, t, c)
    return float(np.sum(weights * out**2 + np.sin(out)))


def test_adapter_gradients_match_finite_differences(small_net):
    params, adapter = small_net
    z, t, c = _inputs(params.arch, 7, seed=1)
    w = np.random.default_rng(2).normal(size=(7, 2))
    out, cache = forward(params, adapter, z, t, c, keep_cache=True)
    grads = backward(params, adapter, cache, 2 * w * out + np.cos(out))
    fd = fd_gradient(lambda: _scalar_loss(params, adapter, z, t, c, w), adapter.tensors())
    assert set(grads) == set(fd)
    assert max_rel_error(grads, fd) < 1e-4


def test_base_gradients_match_finite_differences(small_net):
    params, _ = small_net
    sched = build_schedule(10)
    rng = np.random.default_rng(4)
    z0, eps = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    t, c = rng.integers(1, 11, size=6), np.array([0, 1, 2, 3, 0, 1])
    _, grads = denoising_loss(params, z0, t, eps, c, sched)
    fd = fd_gradient(lambda: denoising_loss(params, z0, t, eps, c, sched)[0], params.tensors)
    assert max_rel_error(grads, fd) < 1e-4


def test_train_zero_steps_returns_initial_params():
    uni, sched = canonical_universe(), build_schedule()
    arch = Architecture(hidden=16, time_dim=4, concept_dim=3)
    start = init_denoiser(arch, 3)
    out = train_base(uni, sched, steps=0, arch=arch, params=start)
    for k in start.tensors:
        np.testing.assert_array_equal(out[k], start[k])


def test_training_reduces_validation_loss():
    uni, sched = canonical_universe(), build_schedule()
    arch = Architecture(hidden=32, time_dim=8, concept_dim=4)
    rng = np.random.default_rng(0)
    labels = rng.integers(10, size=512)
    z0 = np.stack([uni.sample(k, 1, rng)[0] for k in labels])
    t, eps = rng.integers(1, 31, size=512), rng.normal(size=(512, 2))
    start = init_denoiser(arch, 9)
    trained = train_base(uni, sched, steps=300, arch=arch, params=start, seed=1)
    before = denoising_loss(start, z0, t, eps, labels, sched)[0]
    after = denoising_loss(trained, z0, t, eps, labels, sched)[0]
    assert after < before


def test_training_divergence_is_reported():
    uni, sched = canonical_universe(), build_schedule()
    arch = Architecture(hidden=16, time_dim=4, concept_dim=3)
    with pytest.raises(DivergenceError), np.errstate(all="ignore"):
        train_base(uni, sched, steps=200, lr=1e6, optimizer="sgd", lr_schedule="constant", arch=arch)


def test_dropout_range():
    with pytest.raises(ValueError):
        train_base(canonical_universe(), build_schedule(), steps=0, cond_dropout_p=1.0)
