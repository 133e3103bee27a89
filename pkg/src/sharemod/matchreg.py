"""Keypoints, descriptors, matching and robust homography estimation.

Points are ``(x, y)`` = ``(col, row)`` with pixel centers at integers.
Homographies are 3x3 float arrays acting on column vectors ``[x, y, 1]``.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

INLIER_THRESHOLD = 3.0
MAX_ITERATIONS = 2000
MAX_KEYPOINTS = 4096
PATCH_SIZE = 16
HARRIS_K = 0.04


class ProjectionError(ArithmeticError):
    """The point maps to infinity under the homography."""


class EstimationError(ValueError):
    """Degenerate point configuration."""


# -- homographies ----------------------------------------------------------------


def normalize_homography(T):
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {T.shape}")
    if abs(T[2, 2]) > 1e-12:
        T = T / T[2, 2]
    return T


def invert_homography(T):
    T = np.asarray(T, dtype=np.float64)
    if abs(np.linalg.det(T)) <= 1e-12:
        raise ValueError("homography is singular")
    return normalize_homography(np.linalg.inv(T))


# Homographies are plain arrays; the alias documents intent in signatures.
Homography = np.ndarray


def project(p, T):
    """Apply ``T`` to a point ``(x, y)`` with perspective division."""
    T = np.asarray(T, dtype=np.float64)
    x, y = float(p[0]), float(p[1])
    u = T[0, 0] * x + T[0, 1] * y + T[0, 2]
    v = T[1, 0] * x + T[1, 1] * y + T[1, 2]
    w = T[2, 0] * x + T[2, 1] * y + T[2, 2]
    if abs(w) < 1e-12:
        raise ProjectionError(f"point {p} projects to infinity")
    return np.array([u / w, v / w])


def project_points(pts, T):
    """Vectorized ``project`` for an ``(N, 2)`` array; infinite points become ``inf``."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    T = np.asarray(T, dtype=np.float64)
    u = T[0, 0] * pts[:, 0] + T[0, 1] * pts[:, 1] + T[0, 2]
    v = T[1, 0] * pts[:, 0] + T[1, 1] * pts[:, 1] + T[1, 2]
    w = T[2, 0] * pts[:, 0] + T[2, 1] * pts[:, 1] + T[2, 2]
    bad = np.abs(w) < 1e-12
    w = np.where(bad, 1.0, w)
    out = np.stack([u / w, v / w], axis=1)
    out[bad] = np.inf
    return out


# -- detection and description -----------------------------------------------------


def harris_response(gray, k=HARRIS_K):
    """Harris corner response with Sobel gradients and a 3x3 binomial window."""
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim == 3:
        if g.shape[0] != 1:
            raise ValueError("harris_response expects a single-channel image")
        g = g[0]
    ix = ndimage.sobel(g, axis=1, mode="reflect")
    iy = ndimage.sobel(g, axis=0, mode="reflect")
    win = np.outer([1, 2, 1], [1, 2, 1]) / 16.0
    sxx = ndimage.correlate(ix * ix, win, mode="reflect")
    syy = ndimage.correlate(iy * iy, win, mode="reflect")
    sxy = ndimage.correlate(ix * iy, win, mode="reflect")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float


def detect(gray, max_keypoints=MAX_KEYPOINTS, patch_size=PATCH_SIZE, k=HARRIS_K, min_response=1e-10):
    """Harris corners after 3x3 non-maximum suppression.

    A border of ``patch_size // 2`` pixels is skipped. The strongest
    ``max_keypoints`` survive; equal scores are ordered by (row, col).
    """
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim == 3:
        g = g[0]
    h, w = g.shape
    if h < 16 or w < 16:
        raise ValueError(f"image {h}x{w} is smaller than 16x16")
    resp = harris_response(g, k)
    peak = ndimage.maximum_filter(resp, size=3, mode="constant", cval=-np.inf)
    keep = (resp == peak) & (resp > min_response)
    m = patch_size // 2
    keep[:m] = keep[h - m :] = False
    keep[:, :m] = keep[:, w - m :] = False
    rows, cols = np.nonzero(keep)  # row-major order
    scores = resp[rows, cols]
    order = np.argsort(-scores, kind="stable")[:max_keypoints]
    return [Keypoint(float(cols[i]), float(rows[i]), float(scores[i])) for i in order]


def keypoint_array(kps):
    return np.array([[kp.x, kp.y] for kp in kps], dtype=np.float64).reshape(-1, 2)


def _patch_offsets(patch_size):
    return np.arange(patch_size) - (patch_size - 1) / 2.0


def bilinear_sample(img, xs, ys):
    """Sample ``(C, H, W)`` at in-bounds coordinate arrays of equal shape."""
    c, h, w = img.shape
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    return (
        img[:, y0, x0] * (1 - fx) * (1 - fy)
        + img[:, y0, x1] * fx * (1 - fy)
        + img[:, y1, x0] * (1 - fx) * fy
        + img[:, y1, x1] * fx * fy
    )


def describe(img, kp, patch_size=PATCH_SIZE):
    """Zero-mean, unit-norm patch descriptor; flat patches give all zeros."""
    return describe_many(img, [kp], patch_size)[0]


def describe_many(img, kps, patch_size=PATCH_SIZE):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    pts = keypoint_array(kps)
    half = (patch_size - 1) / 2.0
    if len(pts) and (
        np.any(pts[:, 0] - half < 0)
        or np.any(pts[:, 0] + half > w - 1)
        or np.any(pts[:, 1] - half < 0)
        or np.any(pts[:, 1] + half > h - 1)
    ):
        raise ValueError("descriptor patch extends outside the image")
    off = _patch_offsets(patch_size)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    xs = pts[:, 0, None, None] + ox[None]
    ys = pts[:, 1, None, None] + oy[None]
    patches = bilinear_sample(img, xs, ys)  # C, N, P, P
    desc = patches.transpose(1, 0, 2, 3).reshape(len(pts), -1)
    desc = desc - desc.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(desc, axis=1, keepdims=True)
    flat = norm[:, 0] < 1e-9
    desc = np.where(flat[:, None], 0.0, desc / np.where(flat, 1.0, norm[:, 0])[:, None])
    return desc


def match_mutual_nn(descs_a, descs_b):
    """Index pairs ``(i, j)`` that are mutual Euclidean nearest neighbours.

    All-zero (flat) descriptors never match. Ties go to the lowest index.
    """
    a = np.asarray(descs_a, dtype=np.float64)
    b = np.asarray(descs_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or len(a) == 0 or len(b) == 0:
        return np.zeros((0, 2), dtype=int)
    valid_a = np.flatnonzero(np.any(a != 0, axis=1))
    valid_b = np.flatnonzero(np.any(b != 0, axis=1))
    if valid_a.size == 0 or valid_b.size == 0:
        return np.zeros((0, 2), dtype=int)
    va, vb = a[valid_a], b[valid_b]
    d2 = (va * va).sum(1)[:, None] + (vb * vb).sum(1)[None, :] - 2 * va @ vb.T
    nn_ab = np.argmin(d2, axis=1)
    nn_ba = np.argmin(d2, axis=0)
    i = np.flatnonzero(nn_ba[nn_ab] == np.arange(len(va)))
    return np.stack([valid_a[i], valid_b[nn_ab[i]]], axis=1)


@dataclass
class MatchSet:
    """Corresponding points: ``p1[k]`` in image A matches ``p2[k]`` in image B."""

    p1: np.ndarray
    p2: np.ndarray

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=np.float64).reshape(-1, 2)
        self.p2 = np.asarray(self.p2, dtype=np.float64).reshape(-1, 2)
        if len(self.p1) != len(self.p2):
            raise ValueError("p1 and p2 differ in length")

    def __len__(self):
        return len(self.p1)

    def subset(self, mask):
        return MatchSet(self.p1[mask], self.p2[mask])

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("x1,y1,x2,y2\n")
            for (x1, y1), (x2, y2) in zip(self.p1, self.p2):
                f.write(",".join(repr(float(v)) for v in (x1, y1, x2, y2)) + "\n")

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :2], data[:, 2:4])


def format_homography(T):
    return " ".join(repr(float(v)) for v in np.asarray(T, dtype=np.float64).ravel())


def parse_homography(line):
    vals = [float(v) for v in line.replace(",", " ").split()]
    if len(vals) != 9:
        raise ValueError(f"expected 9 homography entries, got {len(vals)}")
    return np.array(vals).reshape(3, 3)


# -- estimation ------------------------------------------------------------------------


def _similarity_normalizer(pts):
    """Similarity moving ``pts`` to centroid 0 and RMS distance sqrt(2)."""
    c = pts.mean(axis=0)
    rms = np.sqrt(((pts - c) ** 2).sum(axis=1).mean())
    if rms < 1e-12:
        raise EstimationError("points coincide")
    s = np.sqrt(2.0) / rms
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _dlt_rows(src, dst):
    n = len(src)
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    zeros, ones = np.zeros(n), np.ones(n)
    A = np.empty((2 * n, 9))
    A[0::2] = np.stack([x, y, ones, zeros, zeros, zeros, -u * x, -u * y, -u], axis=1)
    A[1::2] = np.stack([zeros, zeros, zeros, x, y, ones, -v * x, -v * y, -v], axis=1)
    return A


def _collinear(pts, tol=1e-9):
    centered = pts - pts.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return s[0] < 1e-12 or s[-1] / s[0] < tol


def estimate_homography(src, dst):
    """Normalized DLT homography mapping ``src`` points onto ``dst``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError("point sets differ in length")
    if len(src) < 4:
        raise EstimationError("need at least 4 correspondences")
    if _collinear(src) or _collinear(dst):
        raise EstimationError("points are collinear")
    Ns = _similarity_normalizer(src)
    Nd = _similarity_normalizer(dst)
    sn = project_points(src, Ns)
    dn = project_points(dst, Nd)
    A = _dlt_rows(sn, dn)
    _, s, vt = np.linalg.svd(A)
    if s[7] < 1e-10 * s[0]:
        raise EstimationError("rank-deficient system")
    Hn = vt[-1].reshape(3, 3)
    T = np.linalg.inv(Nd) @ Hn @ Ns
    if abs(T[2, 2]) <= 1e-12 or abs(np.linalg.det(T)) <= 1e-12 * np.abs(T).max() ** 3:
        raise EstimationError("estimated homography is degenerate")
    return T / T[2, 2]


def _batched_minimal_dlt(src, dst, samples):
    """Homographies from many 4-point samples at once.

    Returns ``(Ts, ok)`` with ``Ts`` of shape (S, 3, 3).
    """
    s_pts = src[samples]  # S, 4, 2
    d_pts = dst[samples]

    def normalizers(p):
        c = p.mean(axis=1)
        rms = np.sqrt(((p - c[:, None]) ** 2).sum(axis=2).mean(axis=1))
        ok = rms > 1e-12
        sc = np.sqrt(2.0) / np.where(ok, rms, 1.0)
        N = np.zeros((len(p), 3, 3))
        N[:, 0, 0] = N[:, 1, 1] = sc
        N[:, 0, 2] = -sc * c[:, 0]
        N[:, 1, 2] = -sc * c[:, 1]
        N[:, 2, 2] = 1
        return N, ok, (p - c[:, None]) * sc[:, None, None]

    Ns, ok_s, sn = normalizers(s_pts)
    Nd, ok_d, dn = normalizers(d_pts)

    def tri_area_min(p):
        idx = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
        areas = []
        for i, j, k in idx:
            e1 = p[:, j] - p[:, i]
            e2 = p[:, k] - p[:, i]
            areas.append(np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]))
        return np.min(areas, axis=0)

    ok = ok_s & ok_d & (tri_area_min(sn) > 1e-6) & (tri_area_min(dn) > 1e-6)
    x, y = sn[..., 0], sn[..., 1]
    u, v = dn[..., 0], dn[..., 1]
    z, o = np.zeros_like(x), np.ones_like(x)
    A = np.zeros((len(samples), 8, 9))
    A[:, 0::2] = np.stack([x, y, o, z, z, z, -u * x, -u * y, -u], axis=2)
    A[:, 1::2] = np.stack([z, z, z, x, y, o, -v * x, -v * y, -v], axis=2)
    _, _, vt = np.linalg.svd(A)
    Hn = vt[:, -1].reshape(-1, 3, 3)
    Ts = np.linalg.inv(Nd) @ Hn @ Ns
    t22 = Ts[:, 2, 2]
    ok &= np.abs(t22) > 1e-12
    Ts = Ts / np.where(ok, t22, 1.0)[:, None, None]
    det = np.linalg.det(Ts)
    ok &= np.isfinite(det) & (np.abs(det) > 1e-12)
    return Ts, ok


def _residuals_many(Ts, src, dst):
    """Transfer residuals ``|t(src, T) - dst|`` for every hypothesis, (S, N)."""
    ph = np.concatenate([src, np.ones((len(src), 1))], axis=1)
    q = np.einsum("sij,nj->sni", Ts, ph)
    w = q[..., 2]
    bad = np.abs(w) < 1e-12
    w = np.where(bad, 1.0, w)
    r = np.hypot(q[..., 0] / w - dst[:, 0], q[..., 1] / w - dst[:, 1])
    return np.where(bad, np.inf, r)


def residuals(matches, T):
    """``|t(p1, T) - p2|`` for every pair of a ``MatchSet``."""
    return np.hypot(*(project_points(matches.p1, T) - matches.p2).T)


@dataclass
class RansacResult:
    success: bool
    T: np.ndarray = None
    raw_T: np.ndarray = None
    inliers: MatchSet = None
    inlier_mask: np.ndarray = None
    iterations: int = 0


def ransac(matches, rng, inlier_threshold=INLIER_THRESHOLD, max_iterations=MAX_ITERATIONS,
           early_stop_ratio=0.95, chunk=256):
    """Hypothesize-and-verify homography estimation.

    Minimal samples are drawn up front from ``rng`` so the result does not
    depend on how hypotheses are batched. The best hypothesis has the most
    inliers (ties: lower inlier RMS, then earlier draw). The returned
    ``T`` is refit on its inliers; ``inliers`` are re-selected with it.
    """
    n = len(matches)
    if n < 4:
        return RansacResult(False)
    src, dst = matches.p1, matches.p2
    samples = np.stack([rng.choice(n, size=4, replace=False) for _ in range(max_iterations)])
    best = None  # (count, -rms, -index) compared lexicographically
    best_T = None
    done = 0
    for start in range(0, max_iterations, chunk):
        block = samples[start : start + chunk]
        Ts, ok = _batched_minimal_dlt(src, dst, block)
        r = _residuals_many(Ts, src, dst)
        inl = r <= inlier_threshold
        counts = np.where(ok, inl.sum(axis=1), -1)
        sq = np.where(inl, r * r, 0.0).sum(axis=1)
        rms = np.sqrt(sq / np.maximum(counts, 1))
        stop_at = None
        for k in range(len(block)):
            if counts[k] < 0:
                continue
            key = (counts[k], -rms[k])
            if best is None or key > best:
                best, best_T = key, Ts[k]
            if counts[k] >= early_stop_ratio * n:
                stop_at = k
                break
        done = start + (stop_at + 1 if stop_at is not None else len(block))
        if stop_at is not None:
            break
    if best is None or best[0] < 4:
        return RansacResult(False, iterations=done)
    mask = residuals(matches, best_T) <= inlier_threshold
    try:
        T = estimate_homography(src[mask], dst[mask])
    except EstimationError:
        T = best_T
    final_mask = residuals(matches, T) <= inlier_threshold
    if final_mask.sum() < 4:
        T, final_mask = best_T, mask
    return RansacResult(True, T, best_T, matches.subset(final_mask), final_mask, done)
