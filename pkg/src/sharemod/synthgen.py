"""Synthetic co-registered optical/SAR scenes with known geometry.

Scenes are Voronoi partitions. Every region gets a 10-band reflectance
(optical) and a pair of backscatter intensities (SAR); both are tied to one
region latent through a Gaussian copula so that bright optical regions
tend to be bright in SAR too. The optical render adds a smooth illumination
field and Gaussian noise; the SAR render multiplies by unit-mean Gamma
speckle. Coordinates follow the pixel-center convention: pixel
``(row, col)`` sits at ``(x=col, y=row)``.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from .image import compute_percentiles, normalize, to_db
from .matchreg import Homography, invert_homography

OPTICAL_BANDS = 10
SAR_BANDS = 2


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    region_count: int = 12
    optical_noise_sigma: float = 0.02
    speckle_looks: float = 4
    illumination: float = 0.2
    coupling: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("size must be positive")
        if self.region_count < 2:
            raise ValueError("region_count must be >= 2")
        if self.optical_noise_sigma < 0:
            raise ValueError("optical_noise_sigma must be >= 0")
        if self.speckle_looks < 1:
            raise ValueError("speckle_looks must be >= 1")
        if not 0 <= self.illumination < 1:
            raise ValueError("illumination must lie in [0, 1)")
        if not 0 <= self.coupling < 1:
            raise ValueError("coupling must lie in [0, 1)")


@dataclass
class PairSample:
    x: np.ndarray  # SAR-like, (2, H, W)
    y: np.ndarray  # optical-like, (10, H, W)
    scene_seed: int = 0


@dataclass
class WarpedPair:
    base: PairSample
    warped_x: np.ndarray
    true_T: Homography


@dataclass
class Dataset:
    pairs: list
    sar_stats: object = None
    optical_stats: object = None
    seeds: list = field(default_factory=list)


def sample_seed(root_seed, index):
    """Independent per-sample seed derived from ``(root_seed, index)``."""
    return int(np.random.SeedSequence([root_seed, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def voronoi_labels(sites, size):
    """Label of the nearest site per pixel; ties go to the lowest index."""
    rows, cols = np.mgrid[0:size, 0:size]
    d2 = (cols[None] - sites[:, 0, None, None]) ** 2 + (rows[None] - sites[:, 1, None, None]) ** 2
    return np.argmin(d2, axis=0)


def gen_scene(spec, rng):
    """Voronoi label map with ``region_count`` non-empty regions."""
    while True:
        sites = rng.uniform(0, spec.size, size=(spec.region_count, 2))
        labels = voronoi_labels(sites, spec.size)
        if np.unique(labels).size == spec.region_count:
            return labels


def illumination_field(size, strength, rng):
    """Bilinear polynomial field with values inside ``1 +- strength``."""
    coef = rng.uniform(-1, 1, size=3) * strength / 3
    u = np.linspace(-1, 1, size)
    uu, vv = np.meshgrid(u, u)
    return 1 + coef[0] * uu + coef[1] * vv + coef[2] * uu * vv


def region_latents(spec, rng):
    """Per-region standard-normal latent shared by both modalities."""
    return rng.normal(size=spec.region_count)


def coupled_uniforms(latent, bands, coupling, rng):
    """U(0, 1) draws whose normal scores correlate with ``latent``.

    Gaussian copula: each marginal stays exactly uniform, and two draws of
    the same region correlate through ``coupling`` (0 gives independence).
    """
    noise = rng.normal(size=(latent.size, bands))
    z = coupling * latent[:, None] + np.sqrt(1 - coupling**2) * noise
    return ndtr(z)


def optical_reflectance(spec, rng, latent=None):
    """Per-region 10-band reflectance, uniform on [0.1, 0.9] per band."""
    if latent is None:
        latent = region_latents(spec, rng)
    return 0.1 + 0.8 * coupled_uniforms(latent, OPTICAL_BANDS, spec.coupling, rng)


def sar_backscatter(spec, rng, latent=None):
    """Per-region (VV, VH) intensities, log-uniform on [0.01, 1]."""
    if latent is None:
        latent = region_latents(spec, rng)
    u = coupled_uniforms(latent, SAR_BANDS, spec.coupling, rng)
    return np.exp(np.log(0.01) * (1 - u))


def render_optical(labels, spec, rng, reflectance=None):
    if reflectance is None:
        reflectance = optical_reflectance(spec, rng)
    img = reflectance[labels].transpose(2, 0, 1)
    img = img * illumination_field(labels.shape[0], spec.illumination, rng)
    if spec.optical_noise_sigma:
        img = img + rng.normal(0, spec.optical_noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.2)


def render_sar(labels, spec, rng, backscatter=None):
    if backscatter is None:
        backscatter = sar_backscatter(spec, rng)
    img = backscatter[labels].transpose(2, 0, 1)
    looks = spec.speckle_looks
    return img * rng.gamma(looks, 1.0 / looks, size=img.shape)


def render_scene(spec, scene_seed):
    """Linear-scale ``(sar, optical)`` renders of one scene."""
    rng = np.random.default_rng(scene_seed)
    labels = gen_scene(spec, rng)
    latent = region_latents(spec, rng)
    reflectance = optical_reflectance(spec, rng, latent)
    backscatter = sar_backscatter(spec, rng, latent)
    optical = render_optical(labels, spec, rng, reflectance)
    sar = render_sar(labels, spec, rng, backscatter)
    return sar, optical


def gen_dataset(spec, count, sar_stats=None, optical_stats=None, db_floor=1e-6):
    """Generate ``count`` normalized pairs.

    SAR is converted to dB, then both modalities are clamped to their
    global 0.5/99.5 percentiles and rescaled to [0, 1]. Pass the stats of a
    training set to normalize a held-out set identically.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    seeds = [sample_seed(spec.seed, i) for i in range(count)]
    sars, opticals = [], []
    for s in seeds:
        sar, optical = render_scene(spec, s)
        sars.append(to_db(sar, db_floor))
        opticals.append(optical)
    if sar_stats is None:
        sar_stats = compute_percentiles(sars, modality="sar")
    if optical_stats is None:
        optical_stats = compute_percentiles(opticals, modality="optical")
    pairs = [
        PairSample(
            normalize(x, sar_stats).astype(np.float32),
            normalize(y, optical_stats).astype(np.float32),
            s,
        )
        for x, y, s in zip(sars, opticals, seeds)
    ]
    return Dataset(pairs, sar_stats, optical_stats, seeds)


def warp_image(img, T, default_value=0.0):
    """Inverse-mapping bilinear warp: ``out(p) = img(T^-1 p)``.

    Samples falling outside ``[0, W-1] x [0, H-1]`` get ``default_value``.
    """
    img = np.asarray(img)
    c, h, w = img.shape
    T = np.asarray(T, dtype=np.float64)
    Tinv = invert_homography(T)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])
    q = Tinv @ pts
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = q[0] / q[2]
        sy = q[1] / q[2]
    inside = np.isfinite(sx) & np.isfinite(sy) & (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sx = np.where(inside, sx, 0.0)
    sy = np.where(inside, sy, 0.0)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = sx - x0
    fy = sy - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    flat = img.reshape(c, -1).astype(np.float64)
    v00 = flat[:, y0 * w + x0]
    v01 = flat[:, y0 * w + x1]
    v10 = flat[:, y1 * w + x0]
    v11 = flat[:, y1 * w + x1]
    top = np.where(fx == 0, v00, v00 * (1 - fx) + v01 * fx)
    bot = np.where(fx == 0, v10, v10 * (1 - fx) + v11 * fx)
    val = np.where(fy == 0, top, top * (1 - fy) + bot * fy)
    out = np.where(inside, val, default_value).reshape(c, h, w)
    return out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)


def similarity_homography(angle_deg, scale, shift, center):
    """Rotation and scaling about ``center`` followed by a translation."""
    a = np.deg2rad(angle_deg)
    cx, cy = center
    rot = scale * np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    T = np.eye(3)
    T[:2, :2] = rot
    T[:2, 2] = np.array([cx, cy]) - rot @ np.array([cx, cy]) + np.asarray(shift, dtype=float)
    return T


def make_eval_pair(pair, rng, max_shift=32.0, max_rotation=15.0, scale_range=(0.9, 1.1), default_value=0.0):
    """Warp ``pair.x`` by a random similarity transform.

    ``true_T`` maps a point of the warped SAR image onto the optical frame.
    """
    angle = rng.uniform(-max_rotation, max_rotation) if max_rotation else 0.0
    lo, hi = scale_range
    scale = rng.uniform(lo, hi) if hi > lo else lo
    shift = rng.uniform(-max_shift, max_shift, size=2) if max_shift else np.zeros(2)
    h, w = pair.x.shape[1:]
    forward_T = similarity_homography(angle, scale, shift, ((w - 1) / 2, (h - 1) / 2))
    warped = warp_image(pair.x, forward_T, default_value)
    true_T = invert_homography(forward_T)
    return WarpedPair(pair, warped, true_T)


def heldout_spec(spec):
    """Scene spec for held-out scenes; its seed stream never meets the training one."""
    ss = np.random.SeedSequence([spec.seed, 0x5EED])
    return replace(spec, seed=int(ss.generate_state(1, dtype=np.uint64)[0] >> 1))


def gen_eval_pairs(spec, count, sar_stats, optical_stats, max_shift=32.0, max_rotation=15.0,
                   scale_range=(0.9, 1.1)):
    """Warped held-out pairs normalized with the training statistics."""
    held = heldout_spec(spec)
    ds = gen_dataset(held, count, sar_stats, optical_stats)
    out = []
    for pair in ds.pairs:
        rng = np.random.default_rng(np.random.SeedSequence([pair.scene_seed, 1]))
        out.append(make_eval_pair(pair, rng, max_shift, max_rotation, scale_range))
    return out
