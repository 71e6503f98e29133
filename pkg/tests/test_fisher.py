import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from swmimaging.fisher import (
    FisherReport,
    RankDeficiencyWarning,
    banded_inverse_approx_check,
    biased_crb,
    build_fim,
    clipped_estimator_stats,
    crb_total,
    dominance_profile,
    effective_bandwidth,
    estimate_gamma,
    fisher_matrix,
    gamma_total_bound,
    gershgorin_lower,
    report_for,
    tridiag_inverse_bounds,
    trace_lower,
)
from swmimaging.forward import MeasurementModel, Thermal, build_tensor, detector_tuples
from swmimaging.optics import DetectorGrid, ObjectModel


def random_tridiagonal(rng, m, dominance=1.5):
    off = rng.uniform(0.1, 1.0, m - 1)
    A = np.diag(off, 1) + np.diag(off, -1)
    A += np.diag((np.abs(A).sum(axis=1) + 1e-3) * dominance)
    return A


def test_binary_model_fisher_element():
    x, dp = 0.3, 0.7
    p = 0.2 + dp * x
    F, _ = fisher_matrix([p], [[dp]], 1 - p, [-dp])
    assert F[0, 0] == pytest.approx(dp ** 2 / (p * (1 - p)))


def test_one_parameter_per_outcome_gives_diagonal():
    g = np.diag([0.1, 0.2, 0.3])
    r = build_fim([0.1, 0.2, 0.3], g, 0.4, np.zeros(3))
    assert np.allclose(r.F, np.diag(np.diag(r.F)))
    assert r.effective_bandwidth == 0 and np.all(np.isinf(r.dominance_ratios))


def test_build_fim_checks_inputs():
    with pytest.raises(ValueError):
        build_fim([0.5, 0.6], np.ones((2, 1)), 0.0)
    with pytest.raises(ValueError):
        build_fim([-0.1, 0.6], np.ones((2, 1)), 0.5)


def test_probability_floor_skips_outcomes():
    r = build_fim([0.5, 1e-15, 0.5 - 1e-15], np.ones((3, 1)), 0.0, np.zeros(1))
    assert r.skipped_outcomes == 2
    assert r.F[0, 0] == pytest.approx(1 / 0.5 + 1 / (0.5 - 1e-15))


def test_fim_from_model_matches_finite_difference_fim(system, dl):
    obj = ObjectModel.from_array(np.random.default_rng(3).uniform(0.3, 1, 6), 0.5 * dl)
    det = DetectorGrid.conjugate_to(obj, system)
    m = MeasurementModel(build_tensor(obj, system, det, Thermal(30.0)),
                         detector_tuples(2, det.points, cap=2 * dl * system.magnification))
    x = obj.x
    p, p0 = m.probabilities(x)
    g, g0 = m.gradients(x)
    h = 1e-5
    fd = np.empty_like(g)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        fd[:, j] = (m.probabilities(x + e)[0] - m.probabilities(x - e)[0]) / (2 * h)
    F = build_fim(p, g, p0, g0).F
    F_fd = build_fim(p, fd, p0, -fd.sum(axis=0)).F
    assert np.allclose(F, F_fd, rtol=1e-5)
    assert np.allclose(F, F.T) and np.linalg.eigvalsh(F).min() > -1e-9 * np.abs(F).max()


def test_crb_examples(rng):
    assert crb_total(np.eye(10), 100) == pytest.approx(0.1)
    a = np.array([1.0, 2.0, 4.0])
    assert crb_total(np.diag(a), 2.0) == pytest.approx(np.sum(1 / a) / 2)
    B = rng.normal(size=(6, 6))
    F = B @ B.T + 0.1 * np.eye(6)
    assert crb_total(F, 7.0) == pytest.approx(np.sum(1 / np.linalg.eigvalsh(F)) / 7, rel=1e-10)


def test_crb_flags_rank_deficiency():
    with pytest.warns(RankDeficiencyWarning):
        value = crb_total(np.diag([1.0, 0.0]), 1.0)
    assert value == pytest.approx(1.0)
    assert report_for(np.diag([1.0, 0.0])).inv_trace == math.inf


def test_small_closed_forms():
    A = np.array([[2.0, 1.0], [1.0, 2.0]])
    assert gershgorin_lower(A) == 1.0
    assert trace_lower(A) == pytest.approx(1.0)
    assert gershgorin_lower(np.diag([3.0, 5.0])) == 3.0
    assert trace_lower(4.0 * np.eye(5)) == pytest.approx(4.0)
    ratios, ok = dominance_profile(np.ones((2, 2)))
    assert np.allclose(ratios, 1.0) and not ok


sym = arrays(np.float64, (5, 5), elements=st.floats(-10, 10))


@given(sym)
@settings(max_examples=200)
def test_eigenvalue_lower_bounds(B):
    A = (B + B.T) / 2
    lmin = np.linalg.eigvalsh(A)[0]
    tol = 1e-9 * (1 + np.abs(A).max())
    assert gershgorin_lower(A) <= lmin + tol
    assert trace_lower(A) <= lmin + tol


@given(arrays(np.float64, (6, 3), elements=st.floats(-3, 3)), st.floats(0.01, 2))
@settings(max_examples=100)
def test_rank_one_term_never_lowers_lambda_min(B, scale):
    F = B @ B.T
    v = B[:, 0] + scale
    w0 = np.linalg.eigvalsh(F)[0]
    w1 = np.linalg.eigvalsh(F + np.outer(v, v))[0]
    assert w1 >= w0 - 1e-12 * (1 + np.abs(F).max())


@given(arrays(np.float64, (5, 5), elements=st.floats(-2, 2)))
@settings(max_examples=100)
def test_inverse_trace_cauchy_schwarz(B):
    F = B @ B.T + 0.5 * np.eye(5)
    r = report_for(F)
    assert r.inv_trace >= 25 / np.trace(F) * (1 - 1e-9)


def test_effective_bandwidth_cases(rng):
    assert effective_bandwidth(np.eye(4)) == 0
    T = random_tridiagonal(rng, 8)
    assert effective_bandwidth(T, 0.99) == 1
    assert effective_bandwidth(T, 0.0) == 1
    F = np.ones((5, 5))
    assert effective_bandwidth(F, 0.0) == 4


def test_effective_bandwidth_2d_uses_grid_distance():
    coords = np.indices((3, 3)).reshape(2, -1).T
    F = np.eye(9)
    F[0, 4] = F[4, 0] = 1.0  # diagonal neighbours
    assert effective_bandwidth(F, 0.0, coords) == 1
    assert effective_bandwidth(F, 0.0) == 4


def test_fim_bandwidth_small_in_superresolution(system, dl):
    obj = ObjectModel.uniform(24, 0.5 * dl, 0.5)
    det = DetectorGrid.conjugate_to(obj, system)
    m = MeasurementModel(build_tensor(obj, system, det, Thermal(0.75 * dl)),
                         detector_tuples(2, det.points, cap=2 * dl * system.magnification))
    p, p0 = m.probabilities(obj.x)
    g, g0 = m.gradients(obj.x)
    assert 1 <= build_fim(p, g, p0, g0).effective_bandwidth <= 8


def test_tridiagonal_bounds_bracket(rng):
    for _ in range(20):
        A = random_tridiagonal(rng, 20, rng.uniform(1.01, 3))
        inv = np.abs(np.diag(np.linalg.inv(A)))
        for j in range(20):
            lo, hi = tridiag_inverse_bounds(A, j)
            assert lo <= inv[j] * (1 + 1e-12) and inv[j] <= hi * (1 + 1e-12)


def test_tridiagonal_bounds_diagonal_and_errors():
    A = np.diag([2.0, 4.0, 5.0])
    assert tridiag_inverse_bounds(A, 1) == (0.25, 0.25)
    with pytest.raises(ValueError):
        tridiag_inverse_bounds(np.ones((3, 3)), 0)
    with pytest.raises(ValueError):
        tridiag_inverse_bounds(np.array([[1.0, 1.0], [1.0, 1.0]]), 0)


def test_tridiagonal_bracket_tightens_with_dominance(rng):
    base = random_tridiagonal(rng, 10, 1.0)
    off = base - np.diag(np.diag(base))
    gaps = []
    for k in (1.2, 2.0, 4.0, 8.0):
        A = off + np.diag(np.diag(base) * k)
        lo, hi = tridiag_inverse_bounds(A, 5)
        gaps.append((hi - lo) / hi)
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


def test_banded_inverse_bound(rng):
    for _ in range(30):
        A = random_tridiagonal(rng, 32, rng.uniform(1.0, 2.0))
        for n in range(1, 6):
            dist, bound, ok = banded_inverse_approx_check(A, n)
            assert ok, (n, dist, bound)
    dist, bound, ok = banded_inverse_approx_check(np.diag([1.0, 2.0, 3.0]), 2)
    assert dist == 0 and ok
    dist, bound, ok = banded_inverse_approx_check(np.eye(4) * 3 + 1e-9 * np.diag([1, 1, 1], 1)
                                                  + 1e-9 * np.diag([1, 1, 1], -1), 1)
    assert bound < 1e-15 and dist < 1e-15
    with pytest.raises(ValueError):
        banded_inverse_approx_check(-np.eye(3), 1)


def test_biased_crb_limits(rng):
    B = rng.normal(size=(4, 4))
    F = B @ B.T + np.eye(4)
    C, psd = biased_crb(F, np.zeros((4, 4)), 10.0)
    assert psd and np.allclose(C, np.linalg.inv(F) / 10, atol=1e-12)
    C, psd = biased_crb(F, -np.eye(4), 10.0)
    assert psd and np.allclose(C, 0.0)


def test_biased_crb_of_clipped_estimator():
    info = 50.0
    for x in (1.0, 0.9, 0.6):
        st = clipped_estimator_stats(x, info, 1.0)
        slope = 0.5 * (1 + math.erf(st.xi))
        C, _ = biased_crb(np.array([[info]]), np.array([[slope - 1]]), 1.0)
        assert C[0, 0] == pytest.approx(st.variance_bound)
        assert C[0, 0] == pytest.approx(slope ** 2 / info)
    assert clipped_estimator_stats(1.0, info, 1.0).variance_bound == pytest.approx(0.25 / info)


def test_gamma():
    Y = np.diag([0.5, -0.2])
    assert estimate_gamma(Y) == pytest.approx(0.25)
    F = np.diag([2.0, 4.0])
    assert gamma_total_bound(F, 0.0, 1.0) == pytest.approx(0.75)
    assert gamma_total_bound(F, 0.25, 1.0) == pytest.approx(0.25 * 0.75)
    assert gamma_total_bound(F, 1.0, 1.0) == 0.0
    with pytest.raises(ValueError):
        gamma_total_bound(F, 1.5, 1.0)


def test_clipped_estimator_limits():
    st = clipped_estimator_stats(1.0, 50.0, 1.0)
    assert st.xi == 0
    assert st.mse == pytest.approx(0.5 * st.delta2)
    assert st.mean == pytest.approx(1 - math.sqrt(2 / (math.pi * 50)) / 2)
    far = clipped_estimator_stats(-5.0, 50.0, 1.0)
    assert far.mean == pytest.approx(-5.0)
    assert far.variance_bound == pytest.approx(far.delta2)
    assert far.mse == pytest.approx(far.delta2)
    with pytest.raises(ValueError):
        clipped_estimator_stats(1.1, 50.0, 1.0)


@pytest.mark.parametrize("x", [1.0, 0.97, 0.9, 0.7])
def test_clipped_closed_forms_against_quadrature(x):
    from scipy.integrate import quad
    from scipy.stats import norm

    info = 50.0
    sd = 1 / math.sqrt(info)
    st = clipped_estimator_stats(x, info, 1.0)

    def moment(f):
        body = quad(lambda y: f(y) * norm.pdf(y, x, sd), x - 12 * sd, 1.0)[0]
        return body + f(1.0) * norm.sf(1.0, x, sd)

    mean = moment(lambda y: y)
    assert st.mean == pytest.approx(mean, abs=1e-10)
    assert st.mse == pytest.approx(moment(lambda y: (y - x) ** 2), rel=1e-8)
    assert st.variance == pytest.approx(moment(lambda y: (y - mean) ** 2), rel=1e-8)


@given(st.floats(-3, 1), st.floats(0.5, 1e4))
def test_clipped_mse_never_exceeds_unbiased(x, info):
    st = clipped_estimator_stats(x, info, 1.0)
    assert st.mse <= st.delta2 * (1 + 1e-12)
    assert st.variance_bound <= st.delta2 * (1 + 1e-12)


def test_report_text_roundtrip(rng):
    B = rng.normal(size=(4, 4))
    r = report_for(B @ B.T + np.eye(4))
    back = FisherReport.from_text(r.to_text())
    assert np.array_equal(back.F, r.F)
    assert back.inv_trace == r.inv_trace and back.rank == r.rank
    assert np.array_equal(back.dominance_ratios, r.dominance_ratios)
    assert back.to_text() == r.to_text()
