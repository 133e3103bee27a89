"""A small convolutional encoder-decoder with hand-written backprop.

Layout per encoder stage ``i`` (width ``base * 2**i``)::

    conv3x3 -> leaky ReLU  (kept as skip)  -> stride-2 conv3x3 -> leaky ReLU

The decoder walks the stages in reverse: nearest 2x upsample, concatenate
the matching skip, conv3x3, leaky ReLU. A 1x1 head maps to the output
channels, optionally followed by a sigmoid.

Activations are ``(N, C, H, W)`` float64 arrays; single images ``(C, H, W)``
are accepted and returned without the batch axis.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

LEAK = 0.1


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int
    out_channels: int
    depth: int = 3
    base_width: int = 16
    final_sigmoid: bool = True

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "depth", "base_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def widths(self):
        return [self.base_width * 2**i for i in range(self.depth)]

    def check_input(self, shape):
        n, c, h, w = shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {c}")
        step = 2**self.depth
        if h % step or w % step:
            raise ValueError(f"input {h}x{w} not divisible by {step}")

    def layer_shapes(self):
        """Ordered ``name -> shape`` of every trainable tensor."""
        shapes = {}
        widths = self.widths()
        prev = self.in_channels
        for i, c in enumerate(widths):
            shapes[f"enc{i}.conv.w"] = (c, prev, 3, 3)
            shapes[f"enc{i}.conv.b"] = (c,)
            shapes[f"enc{i}.down.w"] = (c, c, 3, 3)
            shapes[f"enc{i}.down.b"] = (c,)
            prev = c
        for i in reversed(range(self.depth)):
            c = widths[i]
            shapes[f"dec{i}.conv.w"] = (c, prev + c, 3, 3)
            shapes[f"dec{i}.conv.b"] = (c,)
            prev = c
        shapes["head.w"] = (self.out_channels, prev, 1, 1)
        shapes["head.b"] = (self.out_channels,)
        return shapes


def init_params(spec, rng):
    """Uniform He-style kernels in ``+-sqrt(6 / fan_in)``, zero biases."""
    params = {}
    for name, shape in spec.layer_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def zero_params(spec):
    return {name: np.zeros(shape) for name, shape in spec.layer_shapes().items()}


def _conv(x, w, b, stride=1):
    """Same-padded convolution as one GEMM over a ``(C*k*k, N*Ho*Wo)`` column matrix."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    cols = np.empty((c, k, k, n, ho, wo))
    src = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = src[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c * k * k, n * ho * wo)
    out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out) + b[None, :, None, None], cols

def _conv_back(dout, cols, x_shape, w, stride=1):
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    p = k // 2
    ho, wo = dout.shape[2:]
    d2 = dout.transpose(1, 0, 2, 3).reshape(o, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    dcols = (w.reshape(o, -1).T @ d2).reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
    dx = dxp[:, :, p : p + h, p : p + wd].transpose(1, 0, 2, 3)
    return dw, db, np.ascontiguousarray(dx)


def _leaky(z):
    return np.where(z > 0, z, LEAK * z)


def _leaky_back(dy, z):
    return np.where(z > 0, dy, LEAK * dy)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _upsample(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _upsample_back(dy):
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


@dataclass
class ForwardCache:
    spec: ModelSpec
    batched: bool
    records: list = field(default_factory=list)


def forward(spec, params, x):
    """Run the network; returns ``(output, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 4
    if not batched:
        if x.ndim != 3:
            raise ValueError(f"expected (C, H, W) or (N, C, H, W) input, got {x.shape}")
        x = x[None]
    spec.check_input(x.shape)
    cache = ForwardCache(spec, batched)
    rec = cache.records

    def conv_act(name, inp, stride=1):
        z, cols = _conv(inp, params[name + ".w"], params[name + ".b"], stride)
        rec.append((name, inp.shape, cols, z))
        return _leaky(z)

    skips = []
    h = x
    for i in range(spec.depth):
        h = conv_act(f"enc{i}.conv", h)
        skips.append(h)
        h = conv_act(f"enc{i}.down", h, stride=2)
    for i in reversed(range(spec.depth)):
        h = np.concatenate([_upsample(h), skips[i]], axis=1)
        h = conv_act(f"dec{i}.conv", h)
    z, cols = _conv(h, params["head.w"], params["head.b"])
    rec.append(("head", h.shape, cols, z))
    out = _sigmoid(z) if spec.final_sigmoid else z
    cache.records.append(("out", out))
    return (out if batched else out[0]), cache


def backward(spec, params, cache, out_grad):
    """Reverse-mode gradients; returns ``(param_grads, input_grad)``."""
    if cache.spec != spec:
        raise RuntimeError("forward cache was produced by a different model spec")
    dy = np.asarray(out_grad, dtype=np.float64)
    if not cache.batched:
        dy = dy[None]
    rec = list(cache.records)
    _, out = rec.pop()
    if dy.shape != out.shape:
        raise ValueError(f"output gradient shape {dy.shape} != output shape {out.shape}")
    grads = {}

    name, in_shape, cols, z = rec.pop()
    dz = dy * out * (1.0 - out) if spec.final_sigmoid else dy
    grads["head.w"], grads["head.b"], dh = _conv_back(dz, cols, in_shape, params["head.w"])

    def conv_act_back(dh, stride=1):
        name, in_shape, cols, z = rec.pop()
        dz = _leaky_back(dh, z)
        w = params[name + ".w"]
        grads[name + ".w"], grads[name + ".b"], dx = _conv_back(dz, cols, in_shape, w, stride)
        return dx

    widths = spec.widths()
    skip_grads = [None] * spec.depth
    for i in range(spec.depth):
        dcat = conv_act_back(dh)
        n_up = dcat.shape[1] - widths[i]
        skip_grads[i] = dcat[:, n_up:]
        dh = _upsample_back(dcat[:, :n_up])
    for i in reversed(range(spec.depth)):
        dh = conv_act_back(dh, stride=2)
        dh = dh + skip_grads[i]
        dh = conv_act_back(dh)
    ordered = {name: grads[name] for name in spec.layer_shapes()}
    return ordered, (dh if cache.batched else dh[0])


# -- optimization -------------------------------------------------------------


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    mu: float = 0.9
    nu: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def nadam_step(params, grads, state, lr):
    """One NAdam update, in place on ``params`` and ``state``.

    m_hat = m / (1 - mu**t), v_hat = v / (1 - nu**t) and the step is
    ``lr * (mu * m_hat + (1 - mu) * g / (1 - mu**t)) / (sqrt(v_hat) + eps)``.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient at step {state.t + 1} in {', '.join(bad)}")
    state.t += 1
    mu, nu, t = state.mu, state.nu, state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= mu
        m += (1 - mu) * g
        v *= nu
        v += (1 - nu) * g * g
        m_hat = m / (1 - mu**t)
        v_hat = v / (1 - nu**t)
        params[name] -= lr * (mu * m_hat + (1 - mu) * g / (1 - mu**t)) / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 2e-4
    warmup_lr: float = 1e-8
    warmup_epochs: int = 4

    def __post_init__(self):
        if not 0 < self.warmup_lr <= self.base_lr:
            raise ValueError("need 0 < warmup_lr <= base_lr")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")


def lr_at(schedule, epoch):
    """Linear warmup from ``warmup_lr`` to ``base_lr``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < schedule.warmup_epochs:
        frac = epoch / schedule.warmup_epochs
        return schedule.warmup_lr + (schedule.base_lr - schedule.warmup_lr) * frac
    return schedule.base_lr


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"SMCK"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def _pack_str(s):
    raw = s.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def dump_checkpoint(networks):
    """Serialize ``[(role, spec, params), ...]`` to SMCK bytes.

    Layout: magic, version, network count, then per network its role
    string, the five spec fields, tensor count and every tensor as
    name, rank, dims and little-endian float32 payload.
    """
    out = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(networks))]
    for role, spec, params in networks:
        out.append(_pack_str(role))
        out.append(
            struct.pack(
                "<5I",
                spec.in_channels,
                spec.out_channels,
                spec.depth,
                spec.base_width,
                int(spec.final_sigmoid),
            )
        )
        names = list(spec.layer_shapes())
        out.append(_U32.pack(len(names)))
        for name in names:
            arr = np.asarray(params[name])
            out.append(_pack_str(name))
            out.append(_U32.pack(arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def string(self):
        return self.take(self.u32()).decode("utf-8")


def parse_checkpoint(raw):
    r = _Reader(raw)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    networks = []
    for _ in range(r.u32()):
        role = r.string()
        cin, cout, depth, base, sig = r.u32(5)
        spec = ModelSpec(cin, cout, depth, base, bool(sig))
        expected = spec.layer_shapes()
        params = {}
        for _ in range(r.u32()):
            name = r.string()
            rank = r.u32()
            shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
            if expected.get(name) != shape:
                raise CheckpointError(f"tensor {name} has shape {shape}, spec expects {expected.get(name)}")
            n = int(np.prod(shape))
            data = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float64)
            if not np.all(np.isfinite(data)):
                raise CheckpointError(f"tensor {name} has non-finite values")
            params[name] = data.reshape(shape)
        if set(params) != set(expected):
            raise CheckpointError(f"network {role} is missing tensors")
        networks.append((role, spec, params))
    if r.pos != len(raw):
        raise CheckpointError("trailing bytes after checkpoint")
    return networks


def save_checkpoint(path, networks):
    with open(path, "wb") as f:
        f.write(dump_checkpoint(networks))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())
