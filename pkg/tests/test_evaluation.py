import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharemod import evaluation as ev
from sharemod.matchreg import MatchSet, project_points
from sharemod.synthgen import similarity_homography
from oracles import brute_pair_metrics, same


def test_mma():
    assert ev.mma(100, 100) == 1.0
    assert ev.mma(0, 50) == 0.0
    assert math.isnan(ev.mma(0, 0))
    with pytest.raises(ValueError):
        ev.mma(5, 4)


def test_ace_examples():
    T = similarity_homography(10, 1.05, (3, 1), (50, 50))
    assert ev.ace(T, T, 100, 100) == 0.0
    shift = np.array([[1.0, 0, 3], [0, 1, 4], [0, 0, 1]])
    assert ev.ace(shift, np.eye(3), 64, 48) == pytest.approx(5.0, abs=1e-9)
    rot = similarity_homography(90, 1.0, (0, 0), (50, 50))
    assert ev.ace(np.eye(3), rot, 100, 100) == pytest.approx(100.0, abs=1e-9)


def test_ace_scale_invariant():
    rng = np.random.default_rng(0)
    T = similarity_homography(5, 1.0, (2, 2), (32, 32))
    ref = similarity_homography(0, 1.02, (0, 1), (32, 32))
    for _ in range(10):
        c = rng.uniform(0.1, 10) * rng.choice([-1, 1])
        assert ev.ace(T * c, ref, 64, 64) == pytest.approx(ev.ace(T, ref, 64, 64), rel=1e-12)


def test_ace_projection_failure():
    T = np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 0]])
    assert ev.ace(T, np.eye(3), 10, 10) == math.inf
    assert not ev.success(math.inf)


def test_sr():
    assert ev.success(0.0)
    assert ev.sr([10, 50, math.inf, 39.9]) == 0.5
    with pytest.raises(ValueError):
        ev.sr([])


def test_delta_p():
    m = MatchSet([[0, 0], [1, 1]], [[1, 0], [1, 4]])
    assert ev.delta_p(m, np.eye(3)) == 2.0
    assert ev.delta_p(MatchSet(m.p1, m.p1), np.eye(3)) == 0.0
    assert math.isnan(ev.delta_p(MatchSet(np.zeros((0, 2)), np.zeros((0, 2))), np.eye(3)))


def test_correct_metrics_examples():
    c = ev.correct_metrics_from_residuals([0.5, 1.5, 2.5, 10], 3)
    assert (c.count, c.cmr, c.le) == (3, 0.75, 1.5)
    m = MatchSet([[1, 2], [3, 4]], [[1, 2], [3, 4]])
    c = ev.correct_metrics(m, np.eye(3), 0)
    assert (c.cmr, c.le) == (1.0, 0.0)
    empty = ev.correct_metrics_from_residuals([], 1)
    assert empty.count == 0 and math.isnan(empty.cmr) and math.isnan(empty.le)
    assert math.isnan(ev.correct_metrics_from_residuals([5.0], 1).le)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 20, allow_nan=False), min_size=1, max_size=40),
       st.floats(0, 10), st.floats(0, 10))
def test_correct_metrics_monotone(res, d1, d2):
    lo, hi = sorted((d1, d2))
    a = ev.correct_metrics_from_residuals(res, lo)
    b = ev.correct_metrics_from_residuals(res, hi)
    assert 0 <= a.cmr <= b.cmr <= 1
    if a.count:
        assert a.le <= b.le


def random_case(rng):
    size = 64
    T_true = similarity_homography(rng.uniform(-15, 15), rng.uniform(0.9, 1.1), rng.uniform(-8, 8, 2), (32, 32))
    n = int(rng.integers(1, 40))
    src = rng.uniform(0, size, size=(n, 2))
    dst = project_points(src, T_true) + rng.normal(0, rng.uniform(0.1, 4), size=(n, 2))
    T_est = T_true @ similarity_homography(rng.normal(0, 1), 1 + rng.normal(0, 0.01), rng.normal(0, 2, 2), (32, 32))
    return MatchSet(src, dst), T_est, T_true, int(rng.integers(0, n + 1))


def test_metrics_against_brute_force():
    rng = np.random.default_rng(0)
    deltas = ev.DEFAULT_DELTAS
    for _ in range(200):
        m, T_est, T_true, n_in = random_case(rng)
        b = brute_pair_metrics(m, T_est, T_true, 64, 64, n_in, deltas)
        assert same(ev.ace(T_est, T_true, 64, 64), b["ace"])
        assert ev.mma(n_in, len(m)) == b["mma"]
        assert same(ev.delta_p(m, T_true), b["dp"])
        for k, dl in enumerate(deltas):
            c = ev.correct_metrics(m, T_true, dl)
            assert c.count == b["n"][k]
            assert c.cmr == b["cmr"][k]
            assert same(c.le, b["le"][k])


def fake_row(i, rng, deltas):
    ok = bool(rng.random() < 0.6)
    res = rng.uniform(0, 8, size=int(rng.integers(0, 30)))
    n = len(res)
    n_in = int(rng.integers(0, n + 1))
    return ev.PairEvaluation(
        pair_id=i, success=ok, ace=float(rng.uniform(0, 39)) if ok else math.inf,
        mma=ev.mma(n_in, n), delta_p=float(res.mean()) if n else math.nan,
        num_matches=n, num_inliers=n_in, deltas=tuple(deltas),
        correct=[ev.correct_metrics_from_residuals(res, d) for d in deltas],
    )


def test_aggregate_brute_force():
    rng = np.random.default_rng(1)
    deltas = ev.DEFAULT_DELTAS
    rows = [fake_row(i, rng, deltas) for i in range(50)]
    rep = ev.aggregate(rows, deltas, "none")
    succ = [r for r in rows if r.success]
    assert rep.sr == len(succ) / 50
    assert same(rep.mean_ace, math.fsum(r.ace for r in succ) / len(succ))
    mm = [r.mma for r in succ if not math.isnan(r.mma)]
    assert same(rep.mean_mma, math.fsum(mm) / len(mm))
    for k in range(len(deltas)):
        cm = [r.correct[k].cmr for r in rows if not math.isnan(r.correct[k].cmr)]
        assert same(rep.cmr[k], math.fsum(cm) / len(cm))
        cnt = sum(r.correct[k].count for r in rows)
        le = math.fsum(r.correct[k].le * r.correct[k].count for r in rows if r.correct[k].count)
        assert same(rep.le[k], le / cnt)
    assert all(a <= b for a, b in zip(rep.cmr, rep.cmr[1:]))
    assert all(a <= b for a, b in zip(rep.le, rep.le[1:]))


def test_failed_pair_not_in_ace():
    deltas = (1.0,)
    good = ev.PairEvaluation(0, True, 2.0, 0.5, 1.0, 4, 2, deltas, [ev.CorrectMetrics(2, 0.5, 0.5)])
    bad = ev.PairEvaluation(1, False, math.inf, 0.0, 9.0, 4, 0, deltas, [ev.CorrectMetrics(0, 0.0, math.nan)])
    rep = ev.aggregate([good, bad], deltas)
    assert rep.sr == 0.5 and rep.mean_ace == 2.0


def test_similarity_table():
    rng = np.random.default_rng(2)
    pairs = [(rng.random((3, 8, 8)), rng.random((3, 8, 8))) for _ in range(4)]
    rep = ev.similarity_table(pairs)
    from sharemod.similarity import rmse, ssim
    assert rep.rmse == pytest.approx(np.mean([rmse(a, b) for a, b in pairs]), abs=1e-15)
    assert rep.ssim == pytest.approx(np.mean([ssim(a, b) for a, b in pairs]), abs=1e-15)
    same_rep = ev.similarity_table([(a, a) for a, _ in pairs])
    assert same_rep.rmse == 0 and same_rep.ssim == pytest.approx(1.0) and same_rep.infinite_psnr == 4


def test_raw_views():
    x = np.random.default_rng(3).random((2, 4, 4))
    y = np.random.default_rng(4).random((10, 4, 4))
    vv, rgb = ev.raw_views(x, y)
    assert vv.shape == rgb.shape == (3, 4, 4)
    np.testing.assert_array_equal(vv[2], x[0])
    np.testing.assert_array_equal(rgb, y[[2, 1, 0]])


def test_identity_warp_end_to_end():
    from sharemod.synthgen import SceneSpec, WarpedPair, gen_dataset
    ds = gen_dataset(SceneSpec(size=64, seed=5), 3)
    pairs = [WarpedPair(p, p.x, np.eye(3)) for p in ds.pairs]
    # optical band 0 on both sides: every keypoint matches itself exactly
    same_pairs = [WarpedPair(type(p)(p.y[:2], p.y), p.y[:2], np.eye(3)) for p in ds.pairs]
    rep = ev.evaluate_dataset(same_pairs, "none", rgb_indices=(0,))
    assert rep.sr == 1.0 and rep.mean_ace < 1e-6
    assert rep.cmr[0] == 1.0 and rep.similarity.ssim == pytest.approx(1.0)
    assert len(rep.rows) == 3
    rep2 = ev.evaluate_dataset(pairs, "none")
    assert 0 <= rep2.sr <= 1


def test_report_files(tmp_path):
    rng = np.random.default_rng(5)
    deltas = (1.0, 2.0)
    rows = [fake_row(i, rng, deltas) for i in range(3)]
    rep = ev.aggregate(rows, deltas, "none", ev.SimilarityReport(0.1, 20.0, 0.5, 3))
    ev.write_pairs_csv(rep, tmp_path / "p.csv")
    ev.write_sweep_csv(rep, tmp_path / "s.csv")
    ev.write_summary(rep, tmp_path / "sum.txt")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "pairId,success,ace,mma,deltaP,numMatches,numInliers,cmr@1,cmr@2,le@1,le@2"
    assert len(lines) == 4
    sweep = (tmp_path / "s.csv").read_text().splitlines()
    assert sweep[0] == "delta,cmr,le" and len(sweep) == 3
    summary = dict(l.split("=", 1) for l in (tmp_path / "sum.txt").read_text().splitlines())
    assert summary["pipeline"] == "none" and float(summary["sr"]) == rep.sr
    assert float(summary["ssim"]) == 0.5
