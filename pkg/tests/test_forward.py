import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swmimaging.forward import (
    SPDC,
    MeasurementModel,
    MeasurementSet,
    ModelDegeneracyError,
    Thermal,
    build_tensor,
    detector_tuples,
    dump_tensor_csv,
    export_tensor,
    gn_thermal,
    import_tensor,
    make_source,
    normalize_probabilities,
    permanent_sums,
    probability_gradient,
    spdc_pair_coeff,
    spdc_probability,
    thermal_pair_coeff,
    thermal_pair_correlation,
)
from swmimaging.optics import DetectorGrid, ObjectModel


def setup(system, dl, n=5, ratio=0.5, values=None, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.2, 1.0, n) if values is None else np.asarray(values, float)
    obj = ObjectModel.from_array(x, ratio * dl)
    det = DetectorGrid.conjugate_to(obj, system)
    return obj, det


def brute_permanent(a):
    n = len(a)
    return sum(np.prod([a[i, p[i]] for i in range(n)]) for p in itertools.permutations(range(n)))


def test_spdc_width_is_fwhm_of_antidiagonal():
    src = SPDC(10.0)
    # Lambda(s, -s) = exp(-4 s^2 / w^2) is one half at s = w_c / 2
    assert src.kernel(np.array([(2 * 5.0) ** 2]))[0] == pytest.approx(0.5)


def test_source_validation():
    with pytest.raises(ValueError):
        Thermal(-1.0)
    with pytest.raises(ValueError):
        SPDC(np.inf)
    with pytest.raises(ValueError):
        make_source("laser", 1.0)
    assert make_source("Thermal", 2.0) == Thermal(2.0)


@pytest.mark.parametrize("mode", ["quadrature", "small-pixel"])
@pytest.mark.parametrize("source", [Thermal(0.0), Thermal(20.0), Thermal(np.inf), SPDC(15.0)])
def test_tensor_matches_direct_coefficients(system, dl, mode, source):
    obj, det = setup(system, dl, n=4)
    t = build_tensor(obj, system, det, source, mode=mode)
    direct = thermal_pair_coeff if source.kind == "thermal" else spdc_pair_coeff
    for i, j, l, m in [(0, 0, 1, 1), (0, 2, 1, 3), (3, 1, 0, 2), (2, 2, 2, 0)]:
        if source.kind == "thermal":
            ref = direct(i, j, l, m, obj, system, det, source, mode)
        else:
            ref = direct(i, j, m, l, obj, system, det, source, mode)
        assert t.table(i, j)[l, m] == pytest.approx(ref.real, rel=1e-10, abs=1e-14)


def test_coefficient_functions_check_source(system, dl):
    obj, det = setup(system, dl, n=2)
    with pytest.raises(TypeError):
        thermal_pair_coeff(0, 0, 0, 0, obj, system, det, SPDC(1.0))
    with pytest.raises(TypeError):
        spdc_pair_coeff(0, 0, 0, 0, obj, system, det, Thermal(1.0))


def test_incoherent_limit_is_diagonal_in_pixels(system, dl):
    obj, det = setup(system, dl, n=4)
    t = build_tensor(obj, system, det, Thermal(0.0))
    table = t.table(0, 1)
    assert np.allclose(table - np.diag(np.diag(table)), 0.0)


def test_coherent_limit_has_rank_one_mutual_intensity(system, dl):
    obj, det = setup(system, dl, n=5)
    p = build_tensor(obj, system, det, Thermal(np.inf)).pair_matrix(obj.x)
    w = np.linalg.eigvalsh(p)
    assert w[-2] < 1e-10 * w[-1]


def test_pair_matrix_equals_dense_contraction(system, dl):
    obj, det = setup(system, dl, n=3)
    t = build_tensor(obj, system, det, Thermal(30.0))
    dense = t.dense()
    x = obj.x
    assert np.allclose(np.einsum("ijlm,l,m->ij", dense, x, x), t.pair_matrix(x))


def test_mutual_intensity_is_psd(system, dl):
    obj, det = setup(system, dl, n=6)
    p = build_tensor(obj, system, det, Thermal(25.0)).pair_matrix(obj.x)
    assert np.linalg.eigvalsh(p).min() > -1e-12 * np.abs(p).max()


@given(st.integers(1, 4), st.integers(0, 10 ** 6))
@settings(max_examples=30, deadline=None)
def test_permanent_matches_bruteforce(n, seed):
    a = np.random.default_rng(seed).normal(size=(3, n, n))
    got = permanent_sums(a)
    assert np.allclose(got, [brute_permanent(b) for b in a])


def test_gn_thermal_bunching(system, dl):
    obj, det = setup(system, dl)
    t = build_tensor(obj, system, det, Thermal(20.0))
    g1 = gn_thermal([2], obj.x, t)
    assert g1 == pytest.approx(thermal_pair_correlation(2, 2, obj.x, t).real)
    assert gn_thermal([2, 2], obj.x, t) == pytest.approx(2 * g1 ** 2)
    assert gn_thermal([2, 2, 2], obj.x, t) == pytest.approx(6 * g1 ** 3)
    with pytest.raises(ValueError):
        gn_thermal([0] * 5, obj.x, t)


def test_spdc_probability_is_squared_amplitude(system, dl):
    obj, det = setup(system, dl)
    t = build_tensor(obj, system, det, SPDC(20.0))
    assert spdc_probability(0, 3, obj.x, t) == pytest.approx(t.pair_matrix(obj.x)[0, 3] ** 2)
    with pytest.raises(ValueError):
        build_tensor(obj, system, det, SPDC(20.0), order=3)


def brute_tuples(n, pts, cap):
    out = []
    for tup in itertools.combinations_with_replacement(range(len(pts)), n):
        d = max((np.linalg.norm(pts[a] - pts[b]) for a in tup for b in tup), default=0)
        if d <= cap + 1e-9:
            out.append(tup)
    return out


@pytest.mark.parametrize("n", [1, 2, 3])
def test_detector_tuples_match_enumeration(n):
    det = DetectorGrid.regular(16, 10.0)
    got = detector_tuples(n, det.points, cap=25.0)
    assert [tuple(t) for t in got] == brute_tuples(n, det.points, 25.0)
    assert len(detector_tuples(2, det.points, include_coincident=False)) == 16 * 15 // 2


@pytest.mark.parametrize("source,order", [(Thermal(15.0), 1), (Thermal(15.0), 2), (Thermal(0.0), 3),
                                          (Thermal(np.inf), 2), (SPDC(20.0), 2)])
def test_probabilities_complete_the_set(system, dl, source, order):
    obj, det = setup(system, dl, n=6)
    tuples = detector_tuples(order, det.points, cap=2 * dl * system.magnification)
    m = MeasurementModel(build_tensor(obj, system, det, source, order), tuples)
    p, p0 = m.probabilities(obj.x)
    assert np.all(p >= 0) and p0 >= 0
    assert p.sum() + p0 == pytest.approx(1.0, abs=1e-12)
    p, p0 = m.probabilities(np.zeros(obj.size))
    assert p0 == 1.0 and np.all(p == 0)


@pytest.mark.parametrize("source,order", [(Thermal(15.0), 1), (Thermal(25.0), 2), (Thermal(0.0), 3),
                                          (Thermal(40.0), 4), (SPDC(20.0), 2)])
def test_gradient_matches_finite_differences(system, dl, source, order):
    obj, det = setup(system, dl, n=5)
    tuples = detector_tuples(order, det.points, cap=1.5 * dl * system.magnification)
    m = MeasurementModel(build_tensor(obj, system, det, source, order), tuples)
    x = obj.x
    g, g0 = m.gradients(x)
    h = 1e-5
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        fd = (m.probabilities(x + e)[0] - m.probabilities(x - e)[0]) / (2 * h)
        assert np.allclose(g[:, j], fd, rtol=1e-6, atol=1e-10 * np.abs(g).max())
    assert np.allclose(probability_gradient(-1, x, m), g0)
    assert np.allclose(probability_gradient(1, x, m), g[1])


def test_normalization_errors():
    with pytest.raises(ModelDegeneracyError):
        normalize_probabilities([0.1], [0.0])
    with pytest.raises(ModelDegeneracyError):
        normalize_probabilities([0.7, 0.6], 1.0)
    with pytest.raises(ValueError):
        normalize_probabilities([-0.1], 1.0)
    p, p0 = normalize_probabilities([0.2, 0.3], [0.5, 0.5])
    assert p0 == pytest.approx(0.5)


def test_export_import_roundtrip(tmp_path, system, dl):
    obj, det = setup(system, dl, n=3)
    t = build_tensor(obj, system, det, Thermal(20.0))
    path = tmp_path / "d.bin"
    export_tensor(t, path)
    loaded = import_tensor(path)
    assert loaded.kind == "thermal" and loaded.order == 2
    assert np.array_equal(loaded.table.real, t.dense())
    assert np.allclose(loaded.pair_matrix(obj.x), t.pair_matrix(obj.x))
    pairs = np.array([[0, 1], [2, 2]])
    assert np.allclose(loaded.pair_gradient(obj.x, pairs), t.pair_gradient(obj.x, pairs))
    export_tensor(loaded, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_import_rejects_corruption(tmp_path, system, dl):
    obj, det = setup(system, dl, n=2)
    path = tmp_path / "d.bin"
    export_tensor(build_tensor(obj, system, det, Thermal(20.0)), path)
    data = bytearray(path.read_bytes())
    data[-3] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ValueError):
        import_tensor(path)
    path.write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(ValueError):
        import_tensor(path)


def test_csv_dump(tmp_path, system, dl):
    obj, det = setup(system, dl, n=2)
    path = tmp_path / "d.csv"
    dump_tensor_csv(build_tensor(obj, system, det, Thermal(20.0)), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "i,j,l,m,re,im" and len(lines) == 1 + 16


def test_measurement_set_validation(system):
    det = DetectorGrid.regular(3, 10.0)
    kw = dict(n_events=10, shape=(3,), pixel_size=5.0, origin=(0.0,))
    MeasurementSet(system, det, [[0, 1]], [0.4], 0.6, **kw)
    with pytest.raises(ValueError):
        MeasurementSet(system, det, [[0, 1]], [0.4], 0.5, **kw)
    with pytest.raises(ValueError):
        MeasurementSet(system, det, [[0, 5]], [0.4], 0.6, **kw)
    with pytest.raises(ValueError):
        MeasurementSet(system, det, [[0, 1], [1, 1]], [0.4], 0.6, **kw)
