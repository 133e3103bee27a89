import numpy as np
import pytest

from sharemod.diffnet import (
    CheckpointError,
    LrSchedule,
    ModelSpec,
    NonFiniteGradient,
    OptimizerState,
    backward,
    dump_checkpoint,
    forward,
    init_params,
    lr_at,
    nadam_step,
    parse_checkpoint,
    zero_params,
)
from gradcheck import activation_pattern, kink_aware_diff, max_rel_error, sample_indices


def test_init_deterministic_and_bounded():
    spec = ModelSpec(2, 3, depth=2, base_width=8)
    a = init_params(spec, np.random.default_rng(11))
    b = init_params(spec, np.random.default_rng(11))
    assert list(a) == list(spec.layer_shapes())
    for name in a:
        assert a[name].tobytes() == b[name].tobytes()
        if name.endswith(".b"):
            assert np.all(a[name] == 0)


def test_init_uniform_bound_over_many_samples():
    spec = ModelSpec(64, 3, depth=1, base_width=128)
    params = init_params(spec, np.random.default_rng(0))
    w = params["enc0.down.w"]  # fan_in = 128 * 9, 147456 samples
    bound = np.sqrt(6 / (128 * 9))
    assert w.size >= 1e5
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.99 * bound
    assert abs(w.mean()) < 0.01 * bound


def test_forward_shapes():
    spec = ModelSpec(2, 3, depth=3, base_width=4)
    x = np.random.default_rng(0).random((2, 64, 64))
    out, _ = forward(spec, init_params(spec, np.random.default_rng(1)), x)
    assert out.shape == (3, 64, 64)
    out, _ = forward(spec, init_params(spec, np.random.default_rng(1)), x[None].repeat(2, 0))
    assert out.shape == (2, 3, 64, 64)


@pytest.mark.parametrize("seed", range(6))
def test_forward_preserves_size_random_specs(seed):
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 4))
    spec = ModelSpec(int(rng.integers(1, 5)), int(rng.integers(1, 5)), depth, int(rng.integers(1, 5)),
                     bool(rng.integers(2)))
    h, w = (2**depth) * rng.integers(1, 4, size=2)
    out, _ = forward(spec, init_params(spec, rng), rng.random((spec.in_channels, h, w)))
    assert out.shape == (spec.out_channels, h, w)
    if spec.final_sigmoid:
        assert np.all((out > 0) & (out < 1))


def test_zero_params_outputs():
    x = np.random.default_rng(0).random((2, 16, 16))
    spec = ModelSpec(2, 3, depth=2, base_width=4, final_sigmoid=True)
    out, _ = forward(spec, zero_params(spec), x)
    assert np.all(out == 0.5)
    spec = ModelSpec(2, 3, depth=2, base_width=4, final_sigmoid=False)
    out, _ = forward(spec, zero_params(spec), x)
    assert np.all(out == 0.0)


def test_forward_rejects_bad_shapes():
    spec = ModelSpec(2, 3, depth=2, base_width=4)
    params = zero_params(spec)
    with pytest.raises(ValueError):
        forward(spec, params, np.zeros((3, 16, 16)))
    with pytest.raises(ValueError):
        forward(spec, params, np.zeros((2, 18, 16)))


def test_backward_cache_mismatch():
    spec = ModelSpec(2, 3, depth=1, base_width=2)
    other = ModelSpec(2, 3, depth=1, base_width=3)
    out, cache = forward(spec, zero_params(spec), np.zeros((2, 8, 8)))
    with pytest.raises(RuntimeError):
        backward(other, zero_params(other), cache, out)


def test_backward_zero_grad():
    spec = ModelSpec(2, 3, depth=2, base_width=4)
    params = init_params(spec, np.random.default_rng(0))
    out, cache = forward(spec, params, np.random.default_rng(1).random((2, 8, 8)))
    grads, gx = backward(spec, params, cache, np.zeros_like(out))
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(gx == 0)


def test_backward_dead_input_bias_finite():
    spec = ModelSpec(2, 3, depth=2, base_width=4, final_sigmoid=False)
    params = init_params(spec, np.random.default_rng(0))
    out, cache = forward(spec, params, np.zeros((2, 8, 8)))
    grads, _ = backward(spec, params, cache, np.ones_like(out))
    assert all(np.all(np.isfinite(g)) for g in grads.values())
    # head bias gradient of sum(outputs) is the pixel count
    assert np.all(grads["head.b"] == 64)


def _net_check(seed, sigmoid, eps=1e-3, per_tensor=6):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(2, 3, depth=2, base_width=3, final_sigmoid=sigmoid)
    params = init_params(spec, rng)
    params = {k: v + rng.normal(scale=0.05, size=v.shape) for k, v in params.items()}
    x = rng.normal(size=(2, 8, 8))
    out, cache = forward(spec, params, x)
    weights = rng.normal(size=out.shape)
    grads, gx = backward(spec, params, cache, weights)

    def loss(_):
        return float((forward(spec, params, x)[0] * weights).sum())

    def pattern(_):
        return activation_pattern(forward(spec, params, x)[1])

    checked = total = 0
    worst = 0.0
    for name, p in params.items():
        idx = sample_indices(p.shape, per_tensor, rng)
        fd, valid = kink_aware_diff(loss, pattern, p, eps, idx)
        sel = tuple(np.array(idx).T)
        ok = valid[sel]
        total += len(idx)
        checked += ok.sum()
        if ok.any():
            worst = max(worst, max_rel_error(grads[name][sel][ok], fd[sel][ok]))
    idx = sample_indices(x.shape, 20, rng)
    fd, valid = kink_aware_diff(loss, pattern, x, eps, idx)
    sel = tuple(np.array(idx).T)
    worst = max(worst, max_rel_error(gx[sel][valid[sel]], fd[sel][valid[sel]]))
    return worst, checked / total


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("sigmoid", [True, False])
def test_backward_finite_differences(seed, sigmoid):
    worst, coverage = _net_check(seed, sigmoid)
    assert worst <= 1e-3
    assert coverage >= 0.8


def test_nadam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    state = OptimizerState()
    for _ in range(5):
        nadam_step(params, {"w": np.zeros(2)}, state, 0.1)
    assert params["w"].tolist() == [1.0, -2.0]


def test_nadam_moves_against_gradient():
    params = {"w": np.array([0.0])}
    nadam_step(params, {"w": np.array([1.0])}, OptimizerState(), 0.1)
    assert params["w"][0] < 0


def _reference_nadam(theta, grads, lr, mu=0.9, nu=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = mu * m + (1 - mu) * g
        v = nu * v + (1 - nu) * g * g
        m_hat = m / (1 - mu**t)
        v_hat = v / (1 - nu**t)
        theta = theta - lr * (mu * m_hat + (1 - mu) * g / (1 - mu**t)) / (v_hat**0.5 + eps)
    return theta


def test_nadam_matches_scalar_reference():
    gs = [0.7, -1.3, 0.25]
    params = {"w": np.array([0.4])}
    state = OptimizerState()
    for g in gs:
        nadam_step(params, {"w": np.array([g])}, state, 0.05)
    assert params["w"][0] == pytest.approx(_reference_nadam(0.4, gs, 0.05), abs=1e-15)
    assert state.t == 3


def test_nadam_descends_quadratic():
    params = {"w": np.array([3.0])}
    state = OptimizerState()
    for _ in range(3):
        before = params["w"][0] ** 2
        nadam_step(params, {"w": 2 * params["w"].copy()}, state, 1e-3)
        assert params["w"][0] ** 2 < before


def test_nadam_rejects_non_finite():
    with pytest.raises(NonFiniteGradient):
        nadam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, OptimizerState(), 0.1)


def test_lr_schedule():
    s = LrSchedule()
    assert lr_at(s, 0) == 1e-8
    assert lr_at(s, 4) == 2e-4
    assert lr_at(s, 100) == 2e-4
    assert lr_at(s, 2) == pytest.approx((1e-8 + 2e-4) / 2, rel=1e-12)
    with pytest.raises(ValueError):
        LrSchedule(base_lr=1e-9, warmup_lr=1e-8)


def test_checkpoint_round_trip():
    rng = np.random.default_rng(3)
    nets = []
    for role, spec in [("fx", ModelSpec(2, 3, 2, 4)), ("fx_inv", ModelSpec(3, 2, 2, 4, False))]:
        params = {k: v.astype(np.float32).astype(np.float64) for k, v in init_params(spec, rng).items()}
        nets.append((role, spec, params))
    raw = dump_checkpoint(nets)
    assert raw[:4] == b"SMCK"
    back = parse_checkpoint(raw)
    assert [(r, s) for r, s, _ in back] == [(r, s) for r, s, _ in nets]
    for (_, _, p), (_, _, q) in zip(nets, back):
        assert list(p) == list(q)
        for name in p:
            assert p[name].tobytes() == q[name].tobytes()
    assert dump_checkpoint(back) == raw


def test_checkpoint_errors():
    spec = ModelSpec(1, 1, 1, 1)
    raw = dump_checkpoint([("fx", spec, zero_params(spec))])
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        parse_checkpoint(raw[:-2])
    with pytest.raises(CheckpointError):
        parse_checkpoint(raw + b"\0")
