"""Synthetic data, a brute-force speckle oracle, width fits and width sweeps.

Random numbers come from numpy's counter-based Philox generator. Every
independent task (a dataset, an oracle run, a sweep realisation) gets its own
stream ``(seed, stream)`` so results do not depend on how work is scheduled.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import curve_fit

from .fisher import fisher_matrix, inverse_fim
from .forward import (
    MeasurementModel,
    MeasurementSet,
    ModelDegeneracyError,
    Thermal,
    build_tensor,
    integration_nodes,
    kernel_matrix,
    make_source,
)
from .optics import DetectorGrid, ImagingSystem, ObjectModel, psf_eval

DATASET_FORMAT = "swm-dataset"
DATASET_VERSION = 1


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def default_tuples(order: int, detectors: DetectorGrid, system: ImagingSystem,
                   cap_factor: float | None = 2.0) -> np.ndarray:
    from .swm import window_tuples

    return window_tuples(order, detectors, np.arange(len(detectors)), system, cap_factor)


def sample_frequencies(p, p0, N: int, rng: np.random.Generator, sampling: str = "multinomial"):
    """Draw N trials over the complete outcome set; returns (f, f0)."""
    p = np.asarray(p, dtype=float)
    if N < 1:
        raise ValueError("N must be at least 1")
    if np.any(p < 0) or p0 < 0 or abs(p.sum() + p0 - 1) > 1e-9:
        raise ModelDegeneracyError("probabilities do not form a distribution")
    full = np.append(p, p0)
    full = full / full.sum()
    if sampling == "multinomial":
        counts = rng.multinomial(N, full)
        total = N
    elif sampling == "poisson":
        counts = rng.poisson(N * full)
        total = int(counts.sum())
        if total == 0:
            raise ModelDegeneracyError("Poisson draw produced no trials")
    else:
        raise ValueError(f"unknown sampling mode {sampling!r}")
    f = counts / total
    return f[:-1], 1.0 - float(np.sum(f[:-1]))


def synthesize_dataset(truth: ObjectModel, system: ImagingSystem, source, order: int = 2,
                       N: int = 10 ** 6, seed: int = 0, detectors: DetectorGrid | None = None,
                       tuples=None, cap_factor: float | None = 2.0, mode: str | None = None,
                       q: int = 3, sampling: str = "multinomial", noiseless: bool = False,
                       stream: int = 0) -> MeasurementSet:
    """Simulate one measurement of ``truth``.

    ``noiseless`` returns the exact normalised probabilities as frequencies
    (N then only sets the residual weights).
    """
    if detectors is None:
        detectors = DetectorGrid.conjugate_to(truth, system)
    if tuples is None:
        tuples = default_tuples(order, detectors, system, cap_factor)
    tensor = build_tensor(truth, system, detectors, source, order=order, mode=mode, q=q)
    model = MeasurementModel(tensor, tuples)
    p, p0 = model.probabilities(truth.x)
    if noiseless:
        f, f0 = p, p0
    else:
        f, f0 = sample_frequencies(p, p0, int(N), rng_stream(seed, stream), sampling)
    return MeasurementSet(system, detectors, np.asarray(tuples), f, f0, int(N), truth.shape,
                          truth.pixel_size, truth.origin, source.kind,
                          float(source.correlation_width), seed, truth.transmissions.copy())


# --------------------------------------------------------------------------
# speckle Monte Carlo oracle


@dataclass(frozen=True)
class OracleEstimate:
    mean: float
    stderr: float
    regularized: bool


def field_covariance(obj: ObjectModel, w_c: float):
    """Covariance of the object-plane field at pixel centres and its matrix square root."""
    nodes, weights, _ = integration_nodes(obj, "small-pixel")
    C = kernel_matrix(Thermal(w_c), nodes, weights)
    w, v = np.linalg.eigh(C)
    regularized = bool(w[0] < 0)
    if regularized:
        C = C + 1e-10 * np.eye(len(C))
        w, v = np.linalg.eigh(C)
    root = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    return C, root, regularized


def speckle_oracle_gn(obj: ObjectModel, system: ImagingSystem, w_c: float, points, samples: int,
                      seed: int = 0, batch: int = 20000, stream: int = 0) -> OracleEstimate:
    """Monte Carlo mean of prod_i I(r_i) over Gaussian speckle realisations.

    ``points`` are the n image-plane positions of the correlation (repeats allowed).
    """
    if samples < 1000:
        raise ValueError("at least 10^3 field samples are required")
    _, root, regularized = field_covariance(obj, w_c)
    if regularized:
        warnings.warn("field covariance regularized by 1e-10 I", RuntimeWarning, stacklevel=2)
    centers = obj.centers()
    prop = psf_eval(centers, points, system).T * obj.pixel_area * obj.x  # (n, M)
    A = prop @ root
    rng = rng_stream(seed, stream)
    total = 0.0
    total2 = 0.0
    done = 0
    while done < samples:
        b = min(batch, samples - done)
        z = (rng.standard_normal((root.shape[0], b)) + 1j * rng.standard_normal((root.shape[0], b)))
        field = A @ (z / math.sqrt(2.0))
        prod = np.prod(np.abs(field) ** 2, axis=0)
        total += float(prod.sum())
        total2 += float(prod @ prod)
        done += b
    mean = total / samples
    var = max(total2 / samples - mean ** 2, 0.0) * samples / (samples - 1)
    return OracleEstimate(mean, math.sqrt(var / samples), regularized)


# --------------------------------------------------------------------------
# correlation width fit


def gaussian_g2(dr, amplitude, w_c, magnification):
    return amplitude * np.exp(-2.0 * np.asarray(dr) ** 2 / (magnification * w_c) ** 2)


def fit_correlation_width(separations, values, magnification: float) -> float:
    """Least-squares fit of A exp(-2 dr^2/(m w_c)^2); returns w_c (object-plane µm)."""
    dr = np.abs(np.asarray(separations, dtype=float))
    g = np.asarray(values, dtype=float)
    if len(np.unique(np.round(dr, 9))) < 5:
        raise ValueError("need at least 5 distinct separations")
    if np.ptp(g) == 0:
        raise ValueError("flat correlation map: width is not identifiable")
    a0 = float(g.max())
    # initial width from the half-maximum crossing
    order = np.argsort(dr)
    below = np.flatnonzero(g[order] < a0 / 2)
    half = dr[order][below[0]] if len(below) else dr.max()
    w0 = max(half, 1e-6) * math.sqrt(2.0 / math.log(2.0)) / magnification

    def model(x, a, w):
        return gaussian_g2(x, a, w, magnification)

    (a, w), _ = curve_fit(model, dr, g, p0=(a0, w0), maxfev=10000)
    return float(abs(w))


# --------------------------------------------------------------------------
# width sweeps


@dataclass
class SweepResult:
    grid: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    singular: np.ndarray
    metric: str

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("width grid must be strictly increasing")

    @property
    def argmin(self) -> float:
        return float(self.grid[int(np.argmin(self.values))])

    @property
    def interior_minimum(self) -> bool:
        k = int(np.argmin(self.values))
        return bool(np.isfinite(self.values[k]) and 0 < k < len(self.values) - 1)

    def nonincreasing_toward_small(self, rtol: float = 1e-6) -> bool:
        """True when the metric never grows as w_c decreases (within ``rtol``)."""
        v = self.values
        return bool(np.all(v[:-1] <= v[1:] * (1 + rtol)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["w_c", "metric", "stderr", "singular"])
        for row in zip(self.grid, self.values, self.stderr, self.singular):
            w.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), int(row[3])])
        return buf.getvalue()


def total_crb(truth: ObjectModel, system: ImagingSystem, source, order: int = 2, N: float = 1.0,
              detectors=None, cap_factor: float | None = 2.0, mode: str | None = None,
              q: int = 3):
    """(Tr F^-1 / N, singular) for the truth object; singular points give inf."""
    if detectors is None:
        detectors = DetectorGrid.conjugate_to(truth, system)
    tuples = default_tuples(order, detectors, system, cap_factor)
    tensor = build_tensor(truth, system, detectors, source, order=order, mode=mode, q=q)
    model = MeasurementModel(tensor, tuples)
    p, p0 = model.probabilities(truth.x)
    g, g0 = model.gradients(truth.x)
    F, _ = fisher_matrix(p, g, p0, g0)
    inv, rank, _ = inverse_fim(F)
    if rank < F.shape[0]:
        return math.inf, True
    return float(np.trace(inv)) / N, False


def sweep_width(truth: ObjectModel, system: ImagingSystem, kind: str, grid, metric: str = "crb",
                order: int = 2, N: int = 10 ** 6, seeds=(0,), cap_factor: float | None = 2.0,
                mode: str | None = None, q: int = 3, workers: int = 1, pipeline=None) -> SweepResult:
    """Tr F^-1/N or mean reconstruction infidelity over a grid of correlation widths (µm)."""
    grid = np.asarray(grid, dtype=float)
    if len(grid) < 5:
        raise ValueError("a sweep needs at least 5 grid points")
    metric = metric.lower()
    if metric not in ("crb", "infidelity"):
        raise ValueError(f"unknown metric {metric!r}")

    def point(i):
        source = make_source(kind, float(grid[i]))
        if metric == "crb":
            value, singular = total_crb(truth, system, source, order, N, cap_factor=cap_factor,
                                        mode=mode, q=q)
            return value, 0.0, singular
        from .swm import PipelineConfig, reconstruct

        cfg = pipeline or PipelineConfig(cap_factor=cap_factor, mode=mode, q=q)
        vals = []
        for seed in seeds:
            data = synthesize_dataset(truth, system, source, order, N, seed, cap_factor=cap_factor,
                                      mode=mode, q=q, stream=i)
            vals.append(reconstruct(data, cfg).infidelity)
        vals = np.asarray(vals)
        err = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        return float(vals.mean()), err, False

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(point, range(len(grid))))
    else:
        rows = [point(i) for i in range(len(grid))]
    values, errs, singular = (np.array(c) for c in zip(*rows))
    return SweepResult(grid, values.astype(float), errs.astype(float), singular.astype(bool), metric)


# --------------------------------------------------------------------------
# dataset files


def dataset_to_dict(data: MeasurementSet) -> dict:
    s = data.system
    doc = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "geometry": {"object_distance": s.object_distance, "image_distance": s.image_distance,
                     "lens_radius": s.lens_radius, "wavelength": s.wavelength},
        "source": {"kind": data.source_kind, "correlation_width": data.correlation_width},
        "object": {"shape": list(data.shape), "pixel_size": data.pixel_size,
                   "origin": list(data.origin)},
        "detectors": {"points": data.detectors.points.tolist(),
                      "pitch": data.detectors.pixel_pitch, "dims": list(data.detectors.dims)},
        "tuples": data.tuples.tolist(),
        "frequencies": data.frequencies.tolist(),
        "no_counts": data.no_counts,
        "N": data.n_events,
        "seed": data.seed,
    }
    if data.truth is not None:
        doc["object"]["truth"] = data.truth.ravel().tolist()
    return doc


def dataset_from_dict(doc: dict) -> MeasurementSet:
    if doc.get("format") != DATASET_FORMAT or doc.get("version") != DATASET_VERSION:
        raise ValueError("not a dataset document of a supported version")
    try:
        g, src, obj, det = doc["geometry"], doc["source"], doc["object"], doc["detectors"]
        system = ImagingSystem(**g)
        detectors = DetectorGrid(np.asarray(det["points"], dtype=float), det["pitch"],
                                 tuple(det["dims"]))
        tuples = np.asarray(doc["tuples"], dtype=int)
        if tuples.ndim != 2:
            raise ValueError("tuple table must be two-dimensional")
        truth = obj.get("truth")
        return MeasurementSet(system, detectors, tuples, np.asarray(doc["frequencies"], dtype=float),
                              float(doc["no_counts"]), int(doc["N"]), tuple(obj["shape"]),
                              float(obj["pixel_size"]), tuple(obj["origin"]), src["kind"],
                              float(src["correlation_width"]), doc.get("seed"),
                              None if truth is None else np.asarray(truth, dtype=float))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed dataset: {exc}") from exc


def write_dataset(data: MeasurementSet, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(dataset_to_dict(data), sort_keys=True, indent=1) + "\n")


def read_dataset(path) -> MeasurementSet:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"dataset is not valid JSON: {exc}") from exc
    return dataset_from_dict(doc)
