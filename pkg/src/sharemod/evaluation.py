"""Registration quality indicators and dataset-level reports.

Per pair: MMA (inlier fraction), ACE (mean corner misalignment against the
true transform), success (ACE < 40), mean true residual, and for each
threshold the correct-match count, rate and localization error. Undefined
values (empty denominators) are ``nan`` and skipped by the aggregates.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .image import gray_average, select_channels
from .matchreg import (
    MatchSet,
    ProjectionError,
    describe_many,
    detect,
    keypoint_array,
    match_mutual_nn,
    project,
    ransac,
    residuals,
)
from .shared import renormalize
from .similarity import DEFAULT_SSIM, psnr, rmse, ssim

SUCCESS_ACE = 40.0
DEFAULT_DELTAS = tuple(0.5 * k for k in range(1, 11))


def _mean(values):
    """Correctly rounded mean, independent of summation order."""
    values = list(values)
    return math.fsum(values) / len(values)


def mma(num_inliers, num_matches):
    if num_matches < 0 or num_inliers < 0:
        raise ValueError("counts must be non-negative")
    if num_inliers > num_matches:
        raise ValueError(f"{num_inliers} inliers exceed {num_matches} matches")
    if num_matches == 0:
        return math.nan
    return num_inliers / num_matches


def corners(width, height):
    return [(0.0, 0.0), (0.0, float(height)), (float(width), 0.0), (float(width), float(height))]


def ace(T_est, T_true, width, height):
    """Mean distance between the corners mapped by ``T_est`` and by ``T_true``."""
    dists = []
    for c in corners(width, height):
        try:
            a, b = project(c, T_est), project(c, T_true)
        except ProjectionError:
            return math.inf
        dists.append(math.hypot(a[0] - b[0], a[1] - b[1]))
    return math.fsum(dists) / 4


def success(ace_value):
    return ace_value < SUCCESS_ACE


def sr(aces):
    aces = list(aces)
    if not aces:
        raise ValueError("no ACE values")
    return sum(success(a) for a in aces) / len(aces)


def delta_p(matches, T_true):
    if len(matches) == 0:
        return math.nan
    return _mean(residuals(matches, T_true))


@dataclass(frozen=True)
class CorrectMetrics:
    count: int
    cmr: float
    le: float


def correct_metrics_from_residuals(res, delta):
    if delta < 0:
        raise ValueError("delta must be >= 0")
    res = np.asarray(res, dtype=np.float64)
    if res.size == 0:
        return CorrectMetrics(0, math.nan, math.nan)
    good = res[res <= delta]
    le = _mean(good) if good.size else math.nan
    return CorrectMetrics(int(good.size), good.size / res.size, le)


def correct_metrics(matches, T_true, delta):
    return correct_metrics_from_residuals(residuals(matches, T_true) if len(matches) else [], delta)


# -- similarity report -------------------------------------------------------------------


@dataclass
class SimilarityReport:
    rmse: float
    psnr: float
    ssim: float
    count: int
    infinite_psnr: int = 0


def similarity_table(pairs, cfg=DEFAULT_SSIM):
    """Mean RMSE, PSNR (MAX = 1) and SSIM over ``(a, b)`` pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs to compare")
    r = [rmse(a, b) for a, b in pairs]
    p = [psnr(a, b, 1.0) for a, b in pairs]
    s = [ssim(a, b, cfg) for a, b in pairs]
    finite = [v for v in p if math.isfinite(v)]
    return SimilarityReport(
        rmse=float(np.mean(r)),
        psnr=float(np.mean(finite)) if finite else math.inf,
        ssim=float(np.mean(s)),
        count=len(pairs),
        infinite_psnr=len(p) - len(finite),
    )


def raw_views(x, y, rgb_indices=(2, 1, 0)):
    """The raw-modality comparison: SAR VV replicated to 3 channels vs optical RGB."""
    rgb = select_channels(y, rgb_indices)
    vv = np.repeat(np.asarray(x)[:1], rgb.shape[0], axis=0)
    return vv, rgb


# -- per-pair evaluation -------------------------------------------------------------------


@dataclass(frozen=True)
class MatcherConfig:
    max_keypoints: int = 4096
    patch_size: int = 16
    inlier_threshold: float = 3.0
    max_iterations: int = 2000
    seed: int = 0


@dataclass
class PairEvaluation:
    pair_id: int
    success: bool
    ace: float
    mma: float
    delta_p: float
    num_matches: int
    num_inliers: int
    deltas: tuple
    correct: list  # CorrectMetrics per delta

    @property
    def cmr(self):
        return [c.cmr for c in self.correct]

    @property
    def le(self):
        return [c.le for c in self.correct]


def match_images(gray_a, gray_b, cfg):
    """Detect, describe and mutually match two single-channel images."""
    kps_a = detect(gray_a, cfg.max_keypoints, cfg.patch_size)
    kps_b = detect(gray_b, cfg.max_keypoints, cfg.patch_size)
    if not kps_a or not kps_b:
        return MatchSet(np.zeros((0, 2)), np.zeros((0, 2)))
    da = describe_many(gray_a, kps_a, cfg.patch_size)
    db = describe_many(gray_b, kps_b, cfg.patch_size)
    idx = match_mutual_nn(da, db)
    pa, pb = keypoint_array(kps_a), keypoint_array(kps_b)
    return MatchSet(pa[idx[:, 0]], pb[idx[:, 1]])


def evaluate_matches(pair_id, matches, T_true, width, height, cfg, deltas, rng):
    result = ransac(matches, rng, cfg.inlier_threshold, cfg.max_iterations)
    if result.success:
        ace_value = ace(result.T, T_true, width, height)
        n_in = len(result.inliers)
    else:
        ace_value, n_in = math.inf, 0
    res = residuals(matches, T_true) if len(matches) else np.zeros(0)
    return PairEvaluation(
        pair_id=pair_id,
        success=success(ace_value),
        ace=ace_value,
        mma=mma(n_in, len(matches)),
        delta_p=_mean(res) if res.size else math.nan,
        num_matches=len(matches),
        num_inliers=n_in,
        deltas=tuple(deltas),
        correct=[correct_metrics_from_residuals(res, d) for d in deltas],
    )


# -- dataset evaluation ------------------------------------------------------------------


@dataclass
class DatasetReport:
    pipeline: str
    deltas: tuple
    rows: list
    sr: float = math.nan
    mean_ace: float = math.nan
    mean_mma: float = math.nan
    mean_delta_p: float = math.nan
    mean_matches: float = math.nan
    mean_correct: list = field(default_factory=list)
    cmr: list = field(default_factory=list)
    le: list = field(default_factory=list)
    similarity: SimilarityReport = None


def _nanmean(values):
    vals = [v for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else math.nan


def aggregate(rows, deltas, pipeline="", similarity=None):
    """Dataset summary from per-pair rows.

    ACE and MMA average over successful pairs only. CMR averages the
    per-pair rates. LE pools every correct pair of every image, which keeps
    it non-decreasing in delta.
    """
    report = DatasetReport(pipeline, tuple(deltas), list(rows), similarity=similarity)
    if not rows:
        return report
    ok = [r for r in rows if r.success]
    report.sr = len(ok) / len(rows)
    report.mean_ace = _nanmean([r.ace for r in ok])
    report.mean_mma = _nanmean([r.mma for r in ok])
    report.mean_delta_p = _nanmean([r.delta_p for r in rows])
    report.mean_matches = math.fsum(r.num_matches for r in rows) / len(rows)
    for k in range(len(deltas)):
        counts = [r.correct[k].count for r in rows]
        report.mean_correct.append(math.fsum(counts) / len(rows))
        report.cmr.append(_nanmean([r.correct[k].cmr for r in rows]))
        total = sum(counts)
        weighted = math.fsum(r.correct[k].le * r.correct[k].count for r in rows if r.correct[k].count)
        report.le.append(weighted / total if total else math.nan)
    return report


def shared_views(model, eval_pairs, renorm):
    """Transform every warped SAR image and its optical partner."""
    xs, ys = [], []
    for wp in eval_pairs:
        xs.append(model.run("fx", wp.warped_x))
        ys.append(model.run("fy", wp.base.y))
    if renorm:
        xs, _ = renormalize(xs)
        ys, _ = renormalize(ys)
    return xs, ys


def evaluate_dataset(eval_pairs, pipeline="none", model=None, matcher=MatcherConfig(),
                     deltas=DEFAULT_DELTAS, rgb_indices=(2, 1, 0), renorm=None):
    """Match every warped pair and score it against its true transform.

    ``pipeline="none"`` matches the SAR VV channel against the optical RGB
    gray image; ``"shared"`` matches the gray averages of the transformed
    images. ``renorm`` defaults to True for models with inverse networks.
    """
    eval_pairs = list(eval_pairs)
    if not eval_pairs:
        raise ValueError("no evaluation pairs")
    deltas = tuple(deltas)
    if list(deltas) != sorted(deltas):
        raise ValueError("delta grid must be ascending")
    if pipeline == "none":
        views = [raw_views(wp.warped_x, wp.base.y, rgb_indices) for wp in eval_pairs]
        sim_pairs = [raw_views(wp.base.x, wp.base.y, rgb_indices) for wp in eval_pairs]
    elif pipeline == "shared":
        if model is None:
            raise ValueError("shared pipeline needs a model")
        if renorm is None:
            renorm = model.has_inverses()
        xs, ys = shared_views(model, eval_pairs, renorm)
        views = list(zip(xs, ys))
        aligned = [model.run("fx", wp.base.x) for wp in eval_pairs]
        if renorm:
            aligned, _ = renormalize(aligned)
        sim_pairs = list(zip(aligned, ys))
    else:
        raise ValueError(f"unknown pipeline {pipeline!r}")
    rng = np.random.default_rng(matcher.seed)
    rows = []
    for i, (wp, (a, b)) in enumerate(zip(eval_pairs, views)):
        ga, gb = gray_average(a), gray_average(b)
        matches = match_images(ga, gb, matcher)
        h, w = wp.base.y.shape[1:]
        rows.append(evaluate_matches(i, matches, wp.true_T, w, h, matcher, deltas, rng))
    return aggregate(rows, deltas, pipeline, similarity_table(sim_pairs))


# -- report files ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf"
    return repr(v)


def write_pairs_csv(report, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        head = ["pairId", "success", "ace", "mma", "deltaP", "numMatches", "numInliers"]
        head += [f"cmr@{d:g}" for d in report.deltas] + [f"le@{d:g}" for d in report.deltas]
        f.write(",".join(head) + "\n")
        for r in report.rows:
            vals = [r.pair_id, r.success, r.ace, r.mma, r.delta_p, r.num_matches, r.num_inliers]
            vals += r.cmr + r.le
            f.write(",".join(_fmt(v) for v in vals) + "\n")


def write_sweep_csv(report, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("delta,cmr,le\n")
        for d, c, l in zip(report.deltas, report.cmr, report.le):
            f.write(f"{d:g},{_fmt(c)},{_fmt(l)}\n")


def summary_lines(report):
    lines = [
        f"pipeline={report.pipeline}",
        f"pairs={len(report.rows)}",
        f"sr={_fmt(report.sr)}",
        f"ace={_fmt(report.mean_ace)}",
        f"mma={_fmt(report.mean_mma)}",
        f"deltaP={_fmt(report.mean_delta_p)}",
        f"numMatches={_fmt(report.mean_matches)}",
    ]
    for d, n, c, l in zip(report.deltas, report.mean_correct, report.cmr, report.le):
        lines += [f"correct@{d:g}={_fmt(n)}", f"cmr@{d:g}={_fmt(c)}", f"le@{d:g}={_fmt(l)}"]
    if report.similarity is not None:
        s = report.similarity
        lines += [f"rmse={_fmt(s.rmse)}", f"psnr={_fmt(s.psnr)}", f"ssim={_fmt(s.ssim)}"]
    return lines


def write_summary(report, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(summary_lines(report)) + "\n")
