"""Learning a pair of transforms into a shared K-channel modality.

Training minimizes, over batches of co-registered pairs ``(x, y)``::

    L(fx(x), fy(y)) + alpha * D(x, fx(x), y, fy(y))
    L = beta * MSE + gamma * (1 - SSIM)

with one of two degeneracy terms ``D``:

* ``"v1"``: reconstruction through inverse networks,
  ``LD(x, fx_inv(fx(x))) + eta * LD(y, fy_inv(fy(y)))`` with
  ``LD = MSE + (1 - SSIM)``.
* ``"v2"``: ``1 - SSIM(gray(fx(x)), gray(y[rgb]))``; only ``fx`` receives
  gradient from this term.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffnet
from .diffnet import LrSchedule, ModelSpec, lr_at
from .image import augment_pair, compute_percentiles, normalize
from .similarity import DEFAULT_SSIM, mse, mse_grad, ssim, ssim_and_grads

log = logging.getLogger(__name__)

VARIANTS = ("v1", "v2")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 16.0
    beta: float = 1.0
    gamma: float = 1.0
    eta: float = 1.0

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma, self.eta)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("loss weights must be finite and non-negative")
        if self.beta + self.gamma <= 0:
            raise ValueError("beta + gamma must be positive")


V1_WEIGHTS = LossWeights(alpha=1.0, beta=3.0, gamma=16.0, eta=1.0)
# gamma is not listed for the second variant; 1.0 is this package's default
V2_WEIGHTS = LossWeights(alpha=16.0, beta=1.0, gamma=1.0, eta=1.0)
# v1 trains four networks per step instead of two, so it takes fewer steps in the same CPU budget
DEFAULT_BATCHES_PER_EPOCH = {"v1": 20, "v2": 32}


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "v2"
    shared_channels: int = 3
    kx: int = 2
    ky: int = 10
    epochs: int = 30
    batch_size: int = 4
    batches_per_epoch: int | None = None  # None: the variant's default
    schedule: LrSchedule = field(default_factory=LrSchedule)
    seed: int = 0
    weights: LossWeights = V2_WEIGHTS
    rgb_indices: tuple = (2, 1, 0)
    depth: int = 3
    base_width: int = 16
    ssim: object = DEFAULT_SSIM

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("shared_channels", "kx", "ky", "epochs", "batch_size", "steps_per_epoch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.rgb_indices or not all(0 <= i < self.ky for i in self.rgb_indices):
            raise ValueError(f"rgb_indices {self.rgb_indices} invalid for {self.ky} channels")

    @property
    def steps_per_epoch(self):
        if self.batches_per_epoch is None:
            return DEFAULT_BATCHES_PER_EPOCH[self.variant]
        return self.batches_per_epoch

    def specs(self):
        """``role -> ModelSpec`` for every network the variant trains."""
        k = self.shared_channels
        specs = {
            "fx": ModelSpec(self.kx, k, self.depth, self.base_width, final_sigmoid=True),
            "fy": ModelSpec(self.ky, k, self.depth, self.base_width, final_sigmoid=True),
        }
        if self.variant == "v1":
            specs["fx_inv"] = ModelSpec(k, self.kx, self.depth, self.base_width, final_sigmoid=False)
            specs["fy_inv"] = ModelSpec(k, self.ky, self.depth, self.base_width, final_sigmoid=False)
        return specs


class ConfigurationError(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message, sample=None, epoch=None, batch=None):
        super().__init__(message)
        self.sample = sample
        self.epoch = epoch
        self.batch = batch


@dataclass
class SharedModel:
    """The forward transforms and, for the first variant, their inverses."""

    specs: dict
    params: dict

    @classmethod
    def init(cls, config, rng):
        specs = config.specs()
        return cls(specs, {role: diffnet.init_params(spec, rng) for role, spec in specs.items()})

    @classmethod
    def zeros(cls, config):
        specs = config.specs()
        return cls(specs, {role: diffnet.zero_params(spec) for role, spec in specs.items()})

    @property
    def variant(self):
        return "v1" if "fx_inv" in self.specs else "v2"

    @property
    def shared_channels(self):
        return self.specs["fx"].out_channels

    def has_inverses(self):
        return "fx_inv" in self.specs and "fy_inv" in self.specs

    def run(self, role, inp):
        return diffnet.forward(self.specs[role], self.params[role], inp)[0]

    def save(self, path):
        diffnet.save_checkpoint(path, [(r, self.specs[r], self.params[r]) for r in self.specs])

    @classmethod
    def load(cls, path):
        nets = diffnet.load_checkpoint(path)
        specs = {role: spec for role, spec, _ in nets}
        if "fx" not in specs or "fy" not in specs:
            raise diffnet.CheckpointError("checkpoint lacks the forward transforms fx, fy")
        return cls(specs, {role: params for role, _, params in nets})

    def flat_params(self):
        return {f"{role}/{name}": arr for role, p in self.params.items() for name, arr in p.items()}


def transform_pair(model, x, y):
    """Map ``x`` and ``y`` into the shared modality."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[-2:] != y.shape[-2:]:
        raise ValueError(f"spatial shapes differ: {x.shape} vs {y.shape}")
    for role, arr in (("fx", x), ("fy", y)):
        want = model.specs[role].in_channels
        if arr.shape[-3] != want:
            raise ValueError(f"{role} expects {want} channels, got {arr.shape[-3]}")
    return model.run("fx", x), model.run("fy", y)


def renormalize(images, low_pct=0.5, high_pct=99.5):
    """Rescale a collection of transformed images with their pooled percentiles."""
    images = list(images)
    stats = compute_percentiles(images, low_pct, high_pct)
    return [normalize(im, stats) for im in images], stats


# -- loss terms ----------------------------------------------------------------------


def _mse_dissim(a, b, cfg):
    """``MSE(a, b) + 1 - SSIM(a, b)`` and its gradient with respect to ``b``."""
    s, _, gs_b = ssim_and_grads(a, b, cfg)
    return mse(a, b) + 1.0 - s, mse_grad(b, a) - gs_b


def similarity_loss(xt, yt, weights, cfg=DEFAULT_SSIM):
    """``beta * MSE + gamma * DiSSIM`` with gradients for both arguments."""
    xt = np.asarray(xt, dtype=np.float64)
    yt = np.asarray(yt, dtype=np.float64)
    if xt.shape != yt.shape:
        raise ValueError(f"shape mismatch: {xt.shape} vs {yt.shape}")
    g_mse = mse_grad(xt, yt)
    value = weights.beta * mse(xt, yt)
    gx = weights.beta * g_mse
    gy = -weights.beta * g_mse
    if weights.gamma:
        s, gs_x, gs_y = ssim_and_grads(xt, yt, cfg)
        value += weights.gamma * (1.0 - s)
        gx = gx - weights.gamma * gs_x
        gy = gy - weights.gamma * gs_y
    return value, gx, gy


def degeneracy_v1(x, xt, y, yt, model, weights, cfg=DEFAULT_SSIM):
    """Reconstruction degeneracy for a single sample.

    Returns ``(D, grads)`` where ``grads`` holds ``"xt"``, ``"yt"`` and the
    parameter gradients of ``"fx_inv"`` and ``"fy_inv"``.
    """
    if not model.has_inverses():
        raise ConfigurationError("reconstruction degeneracy needs fx_inv and fy_inv")
    d, g = _v1_batch(
        np.asarray(x)[None], np.asarray(xt)[None], np.asarray(y)[None], np.asarray(yt)[None],
        model, weights, cfg, scale=1.0,
    )
    g["xt"], g["yt"] = g["xt"][0], g["yt"][0]
    return float(d[0]), g


def _v1_batch(X, XT, Y, YT, model, weights, cfg, scale):
    """Per-sample reconstruction terms; gradients are multiplied by ``scale``."""
    xh, cache_x = diffnet.forward(model.specs["fx_inv"], model.params["fx_inv"], XT)
    yh, cache_y = diffnet.forward(model.specs["fy_inv"], model.params["fy_inv"], YT)
    d = np.zeros(len(X))
    g_xh = np.zeros_like(xh)
    g_yh = np.zeros_like(yh)
    for b in range(len(X)):
        lx, gx = _mse_dissim(X[b], xh[b], cfg)
        ly, gy = _mse_dissim(Y[b], yh[b], cfg)
        d[b] = lx + weights.eta * ly
        g_xh[b] = scale * gx
        g_yh[b] = scale * weights.eta * gy
    gp_x, g_xt = diffnet.backward(model.specs["fx_inv"], model.params["fx_inv"], cache_x, g_xh)
    gp_y, g_yt = diffnet.backward(model.specs["fy_inv"], model.params["fy_inv"], cache_y, g_yh)
    return d, {"xt": g_xt, "yt": g_yt, "fx_inv": gp_x, "fy_inv": gp_y}


def degeneracy_v2(xt, y, rgb_indices, cfg=DEFAULT_SSIM):
    """Grayscale-structure degeneracy and its gradient with respect to ``xt``."""
    xt = np.asarray(xt, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    idx = list(rgb_indices)
    if not idx or not all(0 <= i < y.shape[0] for i in idx):
        raise ValueError(f"rgb indices {idx} invalid for {y.shape[0]} channels")
    gray_x = xt.mean(axis=0, keepdims=True)
    gray_y = y[idx].mean(axis=0, keepdims=True)
    s, g_gray, _ = ssim_and_grads(gray_x, gray_y, cfg)
    # d gray / d xt[c] = 1 / K for every channel
    grad = np.repeat(-g_gray / xt.shape[0], xt.shape[0], axis=0)
    return 1.0 - s, grad


# -- batch objective ---------------------------------------------------------------------


def _stack_batch(batch):
    xs, ys = zip(*batch)
    return np.stack(xs).astype(np.float64), np.stack(ys).astype(np.float64)


def batch_objective(batch, model, config):
    """Mean of ``L + alpha * D`` over ``batch`` and gradients for every network.

    ``batch`` is a sequence of ``(x, y)`` pairs. Returns ``(value, grads)``
    with ``grads[role][tensor_name]``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if config.variant == "v1" and not model.has_inverses():
        raise ConfigurationError("variant v1 needs a model with inverse networks")
    X, Y = _stack_batch(batch)
    w, cfg = config.weights, config.ssim
    n = len(X)
    XT, cache_x = diffnet.forward(model.specs["fx"], model.params["fx"], X)
    YT, cache_y = diffnet.forward(model.specs["fy"], model.params["fy"], Y)
    values = np.zeros(n)
    g_xt = np.zeros_like(XT)
    g_yt = np.zeros_like(YT)
    for b in range(n):
        value, gx, gy = similarity_loss(XT[b], YT[b], w, cfg)
        values[b] = value
        g_xt[b] = gx / n
        g_yt[b] = gy / n
    grads = {}
    if w.alpha:
        if config.variant == "v1":
            d, g = _v1_batch(X, XT, Y, YT, model, w, cfg, scale=w.alpha / n)
            values += w.alpha * d
            g_xt += g["xt"]
            g_yt += g["yt"]
            grads["fx_inv"], grads["fy_inv"] = g["fx_inv"], g["fy_inv"]
        else:
            for b in range(n):
                d, gd = degeneracy_v2(XT[b], Y[b], config.rgb_indices, cfg)
                values[b] += w.alpha * d
                g_xt[b] += (w.alpha / n) * gd
    elif config.variant == "v1":
        grads["fx_inv"] = {k: np.zeros_like(v) for k, v in model.params["fx_inv"].items()}
        grads["fy_inv"] = {k: np.zeros_like(v) for k, v in model.params["fy_inv"].items()}
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NonFiniteLoss(f"non-finite loss for batch sample {bad[0]}", sample=int(bad[0]))
    grads["fx"], _ = diffnet.backward(model.specs["fx"], model.params["fx"], cache_x, g_xt)
    grads["fy"], _ = diffnet.backward(model.specs["fy"], model.params["fy"], cache_y, g_yt)
    return float(values.mean()), {role: grads[role] for role in model.specs}


# -- training ------------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float


def train(dataset, config, checkpoint_dir=None):
    """Train the shared-modality transforms with NAdam.

    ``dataset`` is a sequence of co-registered ``(x, y)`` pairs. Each batch
    draws ``batch_size`` samples uniformly with replacement and applies the
    same random dihedral transform to both images of a sample. Returns
    ``(model, trace)`` where ``trace`` has one ``EpochRecord`` per epoch.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training set")
    x0, y0 = dataset[0]
    if x0.shape[0] != config.kx or y0.shape[0] != config.ky:
        raise ValueError(
            f"dataset has {x0.shape[0]}/{y0.shape[0]} channels, config expects {config.kx}/{config.ky}"
        )
    rng = np.random.default_rng(config.seed)
    model = SharedModel.init(config, rng)
    flat = model.flat_params()
    state = diffnet.OptimizerState()
    trace = []
    for epoch in range(config.epochs):
        lr = lr_at(config.schedule, epoch)
        losses = []
        for step in range(config.steps_per_epoch):
            picks = rng.integers(len(dataset), size=config.batch_size)
            batch = [augment_pair(*dataset[i], rng) for i in picks]
            try:
                value, grads = batch_objective(batch, model, config)
            except NonFiniteLoss as err:
                err.epoch, err.batch = epoch, step
                err.sample = int(picks[err.sample])
                raise
            flat_grads = {f"{role}/{name}": g for role, gs in grads.items() for name, g in gs.items()}
            diffnet.nadam_step(flat, flat_grads, state, lr)
            losses.append(value)
        record = EpochRecord(epoch, float(np.mean(losses)), lr)
        trace.append(record)
        log.info("epoch %d  loss %.5f  lr %.3g", epoch, record.mean_loss, lr)
        if checkpoint_dir is not None:
            model.save(f"{checkpoint_dir}/epoch_{epoch:04d}.smck")
    return model, trace


def write_trace_csv(trace, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("epoch,meanLoss,lr\n")
        for r in trace:
            f.write(f"{r.epoch},{r.mean_loss!r},{r.lr!r}\n")


def mean_similarity(pairs, cfg=DEFAULT_SSIM):
    """Mean SSIM over ``(a, b)`` pairs (convenience for directional checks)."""
    return float(np.mean([ssim(a, b, cfg) for a, b in pairs]))


def with_variant_defaults(config):
    """Return ``config`` carrying the standard weights of its variant."""
    return replace(config, weights=V1_WEIGHTS if config.variant == "v1" else V2_WEIGHTS)
