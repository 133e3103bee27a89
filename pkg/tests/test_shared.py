from dataclasses import replace

import numpy as np
import pytest

from sharemod import diffnet
from sharemod.shared import (
    ConfigurationError,
    LossWeights,
    NonFiniteLoss,
    SharedModel,
    TrainConfig,
    V1_WEIGHTS,
    V2_WEIGHTS,
    batch_objective,
    degeneracy_v1,
    degeneracy_v2,
    similarity_loss,
    train,
    transform_pair,
    write_trace_csv,
)
from sharemod.similarity import SsimConfig, dissim, mse, ssim
from gradcheck import activation_pattern, central_diff, kink_aware_diff, max_rel_error, sample_indices


def tiny_config(variant, **kw):
    base = dict(variant=variant, kx=2, ky=4, rgb_indices=(2, 1, 0), depth=1, base_width=2,
                weights=V1_WEIGHTS if variant == "v1" else V2_WEIGHTS)
    base.update(kw)
    return TrainConfig(**base)


def random_pairs(n, size=8, kx=2, ky=4, seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.random((kx, size, size)), rng.random((ky, size, size))) for _ in range(n)]


def test_paper_weights():
    assert (V1_WEIGHTS.alpha, V1_WEIGHTS.beta, V1_WEIGHTS.gamma, V1_WEIGHTS.eta) == (1, 3, 16, 1)
    assert (V2_WEIGHTS.alpha, V2_WEIGHTS.beta) == (16, 1)
    with pytest.raises(ValueError):
        LossWeights(beta=0, gamma=0)
    with pytest.raises(ValueError):
        LossWeights(alpha=-1)


def test_similarity_loss_identity_and_reduction():
    rng = np.random.default_rng(0)
    a, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
    value, gx, gy = similarity_loss(a, a, V1_WEIGHTS)
    assert value == pytest.approx(0.0, abs=1e-12)
    assert np.abs(gx).max() < 1e-12 and np.abs(gy).max() < 1e-12
    w = LossWeights(beta=2.5, gamma=0.0)
    assert similarity_loss(a, b, w)[0] == 2.5 * mse(a, b)
    w = LossWeights(beta=3, gamma=16)
    assert similarity_loss(a, b, w)[0] == pytest.approx(3 * mse(a, b) + 16 * (1 - ssim(a, b)), abs=1e-10)
    with pytest.raises(ValueError):
        similarity_loss(a, b[:2], w)


def test_similarity_loss_gradients():
    rng = np.random.default_rng(1)
    a, b = rng.random((2, 8, 8)), rng.random((2, 8, 8))
    w = LossWeights(beta=3, gamma=16)
    _, gx, gy = similarity_loss(a, b, w)
    assert max_rel_error(gx, central_diff(lambda t: similarity_loss(t, b, w)[0], a, 1e-4)) <= 1e-3
    assert max_rel_error(gy, central_diff(lambda t: similarity_loss(a, t, w)[0], b, 1e-4)) <= 1e-3


def test_degeneracy_v1_perfect_reconstruction():
    cfg = tiny_config("v1")
    model = SharedModel.zeros(cfg)
    x, y = np.zeros((2, 8, 8)), np.zeros((4, 8, 8))
    xt, yt = transform_pair(model, x, y)
    d, _ = degeneracy_v1(x, xt, y, yt, model, V1_WEIGHTS)
    assert d == pytest.approx(0.0, abs=1e-12)


def test_degeneracy_v1_recomposition_and_eta():
    cfg = tiny_config("v1")
    model = SharedModel.init(cfg, np.random.default_rng(2))
    (x, y), = random_pairs(1, seed=3)
    xt, yt = transform_pair(model, x, y)
    xh, yh = model.run("fx_inv", xt), model.run("fy_inv", yt)
    w = LossWeights(alpha=1, beta=3, gamma=16, eta=0.7)
    d, grads = degeneracy_v1(x, xt, y, yt, model, w)
    expected = mse(x, xh) + dissim(x, xh) + 0.7 * (mse(y, yh) + dissim(y, yh))
    assert d == pytest.approx(expected, abs=1e-10)
    assert grads["xt"].shape == xt.shape and grads["yt"].shape == yt.shape
    w0 = replace(w, eta=0.0)
    d0, g0 = degeneracy_v1(x, xt, y, yt, model, w0)
    d1, _ = degeneracy_v1(x, xt, np.ones_like(y), yt, model, w0)
    assert d0 == d1
    assert np.all(g0["yt"] == 0)


def test_degeneracy_v1_needs_inverses():
    model = SharedModel.zeros(tiny_config("v2"))
    x, y = np.zeros((2, 8, 8)), np.zeros((4, 8, 8))
    with pytest.raises(ConfigurationError):
        degeneracy_v1(x, x, y, y, model, V1_WEIGHTS)


def test_degeneracy_v2_values():
    rng = np.random.default_rng(4)
    y = rng.random((4, 8, 8))
    xt = np.repeat(y[[2, 1, 0]].mean(axis=0, keepdims=True), 3, axis=0)
    d, _ = degeneracy_v2(xt, y, (2, 1, 0))
    assert d == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        degeneracy_v2(xt, y, (4,))


def test_degeneracy_v2_inverted_checkerboard():
    cfg = SsimConfig(window=4, c1=1e-4, c2=9e-4)
    board = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)
    y = np.repeat(board[None], 3, axis=0)
    xt = np.repeat((1 - board)[None], 3, axis=0)
    d, _ = degeneracy_v2(xt, y, (0, 1, 2), cfg)
    expected = 1 - (-0.5 + 9e-4) / (0.5 + 9e-4)
    assert d == pytest.approx(expected, abs=1e-12)
    assert d == pytest.approx(1.996, abs=1e-3)


@pytest.mark.parametrize("seed", range(5))
def test_degeneracy_v2_gradient(seed):
    rng = np.random.default_rng(seed)
    xt, y = rng.random((3, 8, 8)), rng.random((10, 8, 8))
    _, g = degeneracy_v2(xt, y, (2, 1, 0))
    fd = central_diff(lambda t: degeneracy_v2(t, y, (2, 1, 0))[0], xt, 1e-4)
    assert max_rel_error(g, fd) <= 1e-3


@pytest.mark.parametrize("variant", ["v1", "v2"])
def test_batch_objective_reductions(variant):
    cfg = tiny_config(variant)
    model = SharedModel.init(cfg, np.random.default_rng(5))
    pairs = random_pairs(2, seed=6)
    v_both, _ = batch_objective(pairs, model, cfg)
    v0, _ = batch_objective(pairs[:1], model, cfg)
    v1, _ = batch_objective(pairs[1:], model, cfg)
    assert v_both == pytest.approx((v0 + v1) / 2, abs=1e-10)
    v_rep, _ = batch_objective([pairs[0]] * 3, model, cfg)
    assert v_rep == pytest.approx(v0, abs=1e-12)
    no_d = replace(cfg, weights=replace(cfg.weights, alpha=0.0))
    value, grads = batch_objective(pairs, model, no_d)
    sims = [similarity_loss(*transform_pair(model, x, y), no_d.weights)[0] for x, y in pairs]
    assert value == pytest.approx(np.mean(sims), abs=1e-12)
    assert set(grads) == set(model.specs)


def test_batch_objective_v1_requires_inverses():
    with pytest.raises(ConfigurationError):
        batch_objective(random_pairs(1), SharedModel.zeros(tiny_config("v2")), tiny_config("v1"))


def test_batch_objective_non_finite():
    cfg = tiny_config("v2")
    pairs = random_pairs(2)
    pairs[1][0][0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLoss) as err:
        batch_objective(pairs, SharedModel.init(cfg, np.random.default_rng(0)), cfg)
    assert err.value.sample == 1


def reference_objective(batch, model, config):
    """Objective value rebuilt from forward passes and plain metrics, with activation signs."""
    w, cfg = config.weights, config.ssim
    X = np.stack([x for x, _ in batch])
    Y = np.stack([y for _, y in batch])
    XT, cx = diffnet.forward(model.specs["fx"], model.params["fx"], X)
    YT, cy = diffnet.forward(model.specs["fy"], model.params["fy"], Y)
    signs = [activation_pattern(cx), activation_pattern(cy)]
    if config.variant == "v1":
        XH, chx = diffnet.forward(model.specs["fx_inv"], model.params["fx_inv"], XT)
        YH, chy = diffnet.forward(model.specs["fy_inv"], model.params["fy_inv"], YT)
        signs += [activation_pattern(chx), activation_pattern(chy)]
    total = 0.0
    for b in range(len(X)):
        v = w.beta * mse(XT[b], YT[b]) + w.gamma * (1 - ssim(XT[b], YT[b], cfg))
        if config.variant == "v1":
            d = mse(X[b], XH[b]) + dissim(X[b], XH[b], cfg)
            d += w.eta * (mse(Y[b], YH[b]) + dissim(Y[b], YH[b], cfg))
        else:
            gy = Y[b][list(config.rgb_indices)].mean(axis=0, keepdims=True)
            d = 1 - ssim(XT[b].mean(axis=0, keepdims=True), gy, cfg)
        total += v + w.alpha * d
    return total / len(X), np.concatenate(signs)


def test_reference_objective_agrees():
    for variant in ("v1", "v2"):
        cfg = tiny_config(variant, ky=10)
        model = SharedModel.init(cfg, np.random.default_rng(5))
        batch = random_pairs(2, ky=10, seed=6)
        assert reference_objective(batch, model, cfg)[0] == pytest.approx(batch_objective(batch, model, cfg)[0], rel=1e-12)


def objective_gradient_error(variant, seed, per_tensor=4, eps=1e-4):
    """Worst relative error of batch_objective parameter gradients and coverage."""
    rng = np.random.default_rng(seed)
    cfg = tiny_config(variant, ky=10)
    model = SharedModel.init(cfg, rng)
    batch = random_pairs(1, ky=10, seed=seed + 100)
    _, grads = batch_objective(batch, model, cfg)
    worst, checked, total = 0.0, 0, 0
    for role, params in model.params.items():
        for name, p in params.items():
            idx = sample_indices(p.shape, per_tensor, rng)
            fd, valid = kink_aware_diff(lambda _: reference_objective(batch, model, cfg), None, p, eps, idx)
            sel = tuple(np.array(idx).T)
            ok = valid[sel]
            total += len(idx)
            checked += int(ok.sum())
            if ok.any():
                worst = max(worst, max_rel_error(grads[role][name][sel][ok], fd[sel][ok]))
    return worst, checked / total


@pytest.mark.parametrize("variant", ["v1", "v2"])
def test_batch_objective_gradients(variant):
    worst, coverage = objective_gradient_error(variant, seed=0)
    assert worst <= 1e-3
    assert coverage >= 0.8


def test_transform_pair_contract():
    cfg = TrainConfig(variant="v2", depth=2, base_width=2)
    model = SharedModel.zeros(cfg)
    x, y = np.random.default_rng(0).random((2, 16, 16)), np.random.default_rng(1).random((10, 16, 16))
    xt, yt = transform_pair(model, x, y)
    assert xt.shape == yt.shape == (3, 16, 16)
    assert np.all(xt == 0.5) and np.all(yt == 0.5)
    with pytest.raises(ValueError):
        transform_pair(model, y, x)


def test_train_deterministic(tmp_path):
    cfg = tiny_config("v1", epochs=2, batches_per_epoch=2, batch_size=2, seed=9)
    data = random_pairs(5, size=8)
    m1, t1 = train(data, cfg, checkpoint_dir=tmp_path)
    m2, t2 = train(data, cfg)
    assert [r.mean_loss for r in t1] == [r.mean_loss for r in t2]
    for role in m1.params:
        for name in m1.params[role]:
            assert m1.params[role][name].tobytes() == m2.params[role][name].tobytes()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_0000.smck", "epoch_0001.smck"]
    write_trace_csv(t1, tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "epoch,meanLoss,lr" and len(lines) == 3


def test_train_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        train(random_pairs(2, kx=3), tiny_config("v2"))


def test_model_checkpoint_round_trip(tmp_path):
    cfg = tiny_config("v1")
    model = SharedModel.init(cfg, np.random.default_rng(0))
    for params in model.params.values():
        for k in params:
            params[k] = params[k].astype(np.float32).astype(np.float64)
    model.save(tmp_path / "m.smck")
    back = SharedModel.load(tmp_path / "m.smck")
    assert back.variant == "v1" and back.specs == model.specs
    back.save(tmp_path / "n.smck")
    assert (tmp_path / "m.smck").read_bytes() == (tmp_path / "n.smck").read_bytes()
