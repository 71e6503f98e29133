"""Sliding window reconstruction.

The object is solved piecewise: a window is a block of ``core`` pixels plus a
``border`` of context pixels, and only detectors imaging the window (dilated
by a margin) enter its local fit. The first pass solves every window from
scratch with all other pixels set to zero and keeps the cores. Refinement
sweeps then revisit the windows in order with the border held at the current
estimate. The multiscale pipeline starts at a pixel size whose FIM is
diagonally dominant and halves the pixels after each converged stage.
"""

from __future__ import annotations

import itertools
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares

from .fisher import DOMINANCE_THRESHOLD, dominance_profile, effective_bandwidth, fisher_matrix
from .forward import (
    MeasurementModel,
    MeasurementSet,
    build_tensor,
    detector_tuples,
)
from .optics import DetectorGrid, ImagingSystem, ObjectModel, subdivide

FIRST = "first"
REFINE = "refine"


class EmptyWindowWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class WindowPlan:
    mode: str
    shape: tuple
    core: tuple
    border: tuple
    positions: tuple
    margin: float | None = None

    def core_box(self, pos):
        return tuple((p, min(p + c, n)) for p, c, n in zip(pos, self.core, self.shape))

    def window_box(self, pos):
        return tuple((max(lo - b, 0), min(hi + b, n))
                     for (lo, hi), b, n in zip(self.core_box(pos), self.border, self.shape))

    def _flat(self, box) -> np.ndarray:
        idx = np.indices(self.shape)
        mask = np.ones(self.shape, dtype=bool)
        for axis, (lo, hi) in enumerate(box):
            mask &= (idx[axis] >= lo) & (idx[axis] < hi)
        return np.flatnonzero(mask)

    def core_pixels(self, pos) -> np.ndarray:
        return self._flat(self.core_box(pos))

    def window_pixels(self, pos) -> np.ndarray:
        return self._flat(self.window_box(pos))


def _axis_positions(n: int, core: int, stride: int) -> list:
    pos = list(range(0, n - core + 1, stride))
    if pos[-1] + core < n:
        pos.append(n - core)
    return pos


def plan_windows(dims, core, border=0, mode: str = FIRST, margin: float | None = None,
                 stride=None) -> WindowPlan:
    """Core positions at ``stride`` (default: the core size), last one clamped to the edge."""
    dims = (dims,) if np.isscalar(dims) else tuple(dims)
    core = (core,) * len(dims) if np.isscalar(core) else tuple(core)
    border = (border,) * len(dims) if np.isscalar(border) else tuple(border)
    if mode not in (FIRST, REFINE):
        raise ValueError(f"unknown window mode {mode!r}")
    if len(core) != len(dims) or len(border) != len(dims):
        raise ValueError("core/border must match the object dimensionality")
    if any(c < 1 or c > n for c, n in zip(core, dims)):
        raise ValueError("core must satisfy 1 <= core <= object size")
    if any(b < 0 for b in border):
        raise ValueError("border must be nonnegative")
    if stride is None:
        stride = core
    stride = (stride,) * len(dims) if np.isscalar(stride) else tuple(stride)
    if mode == FIRST and stride != core:
        raise ValueError("the first pass needs non-overlapping cores (stride = core)")
    axes = [_axis_positions(n, c, s) for n, c, s in zip(dims, core, stride)]
    positions = tuple(itertools.product(*axes))
    return WindowPlan(mode, dims, core, border, positions, margin)


def window_detectors(box, obj: ObjectModel, system: ImagingSystem, detectors: DetectorGrid,
                     margin: float | None = None) -> np.ndarray:
    """Indices of detectors whose conjugate object point lies in the dilated window.

    ``box`` holds per-axis pixel ranges ``(lo, hi)``; ``margin`` defaults to
    the Rayleigh width.
    """
    if margin is None:
        margin = system.rayleigh_width
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    s = detectors.conjugates(system)
    corner = obj.lower_corner()
    inside = np.ones(len(s), dtype=bool)
    for axis, (lo, hi) in enumerate(box):
        a = corner[axis] + lo * obj.pixel_size - margin
        b = corner[axis] + hi * obj.pixel_size + margin
        inside &= (s[:, axis] >= a - 1e-9) & (s[:, axis] <= b + 1e-9)
    if obj.ndim == 1:
        inside &= np.abs(s[:, 1]) <= margin + obj.pixel_size / 2 + 1e-9
    idx = np.flatnonzero(inside)
    if len(idx) == 0:
        warnings.warn("no detectors image this window; it is skipped", EmptyWindowWarning,
                      stacklevel=2)
    return idx


def window_tuples(order: int, detectors: DetectorGrid, indices, system: ImagingSystem,
                  cap_factor: float | None = 2.0, include_coincident: bool = True) -> np.ndarray:
    """Detector tuples over ``indices`` with all pairwise distances <= cap_factor * dl * m."""
    cap = None if cap_factor is None else cap_factor * system.rayleigh_width * system.magnification
    return detector_tuples(order, detectors.points, cap=cap, include_coincident=include_coincident,
                           candidates=indices)


def tuples_within(tuples: np.ndarray, indices) -> np.ndarray:
    """Rows of ``tuples`` whose detectors all belong to ``indices``."""
    mask = np.zeros(int(tuples.max()) + 1 if tuples.size else 1, dtype=bool)
    idx = np.asarray(indices, dtype=int)
    mask[idx[idx < len(mask)]] = True
    return np.flatnonzero(np.all(mask[tuples], axis=1))


# --------------------------------------------------------------------------
# solver


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 200
    gtol: float = 1e-10
    xtol: float = 1e-12
    weighting: str = "poisson"
    seed: int = 0

    def __post_init__(self):
        if self.gtol <= 0 or self.xtol <= 0 or self.max_iter < 1:
            raise ValueError("solver tolerances and iteration cap must be positive")
        if self.weighting not in ("poisson", "uniform"):
            raise ValueError(f"unknown weighting {self.weighting!r}")


@dataclass(frozen=True)
class BoxSolution:
    x: np.ndarray
    cost: float
    converged: bool
    iterations: int
    projected_gradient: float


def minimize_box(fun, x0, cfg: SolverConfig = SolverConfig(), jac=None, lower=0.0,
                 upper=1.0) -> BoxSolution:
    """Minimise sum(fun(x)**2) over the box [lower, upper]^m."""
    x0 = np.asarray(x0, dtype=float)
    if np.any(x0 < lower) or np.any(x0 > upper):
        raise ValueError("starting point must be feasible")
    res = least_squares(fun, x0, jac="2-point" if jac is None else jac, bounds=(lower, upper),
                        method="trf", xtol=cfg.xtol, gtol=cfg.gtol, ftol=1e-15,
                        max_nfev=cfg.max_iter, x_scale=1.0)
    x = np.clip(res.x, lower, upper)
    # trf stays strictly inside the box; snap numerically active bounds
    x[x - lower < 1e-10] = lower
    x[upper - x < 1e-10] = upper
    r = np.asarray(fun(x), dtype=float)
    J = np.asarray(jac(x) if jac is not None else res.jac, dtype=float)
    g = 2.0 * J.T @ r
    pg = float(np.max(np.abs(x - np.clip(x - g, lower, upper)))) if len(x) else 0.0
    return BoxSolution(x, float(r @ r), bool(res.status > 0), int(res.nfev), pg)


# --------------------------------------------------------------------------
# models


def data_weights(data: MeasurementSet, weighting: str = "poisson") -> np.ndarray:
    if weighting == "uniform":
        return np.ones(len(data.frequencies))
    return 1.0 / np.maximum(data.frequencies, 1.0 / data.n_events)


@dataclass(eq=False)
class WindowProblem:
    """Local least-squares problem: free pixels ``free`` of a sub-model.

    The sub-model sees the pixels ``pixels`` (the others are zero) through the
    selected tuples; ``fixed`` holds the values of the non-free sub-model pixels.
    """

    model: MeasurementModel
    free: np.ndarray
    fixed: np.ndarray
    frequencies: np.ndarray
    weights: np.ndarray

    def full_vector(self, x_free) -> np.ndarray:
        x = self.fixed.copy()
        x[self.free] = x_free
        return x

    def residuals(self, x_free) -> np.ndarray:
        p, _ = _probabilities(self.model, self.full_vector(x_free))
        return np.sqrt(self.weights) * (p - self.frequencies)

    def jacobian(self, x_free) -> np.ndarray:
        g, _ = self.model.gradients(self.full_vector(x_free))
        return np.sqrt(self.weights)[:, None] * g[:, self.free]


def _probabilities(model: MeasurementModel, x):
    # raw / P_S without the completeness check: window models need not be complete
    p = model.raw(x) / model.scale
    return p, 1.0 - float(np.sum(p))


def residual(x_window, problem: WindowProblem) -> float:
    """Weighted squared distance sum_k w_k (p_k(x) - f_k)^2 for the window."""
    r = problem.residuals(np.asarray(x_window, dtype=float))
    return float(r @ r)


@dataclass(frozen=True)
class PipelineConfig:
    core: int = 8
    border: int | None = None
    margin: float | None = None
    cap_factor: float | None = 2.0
    rho_star: float = DOMINANCE_THRESHOLD
    initial_pixel_size: float | None = None
    max_sweeps: int = 20
    sweep_tol: float = 1e-4
    stride: int | None = None
    outside: str = "current"
    mode: str | None = None
    q: int = 3
    workers: int = 1
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.core < 1 or self.max_sweeps < 1 or self.sweep_tol <= 0:
            raise ValueError("invalid pipeline settings")
        if self.outside not in ("zero", "current"):
            raise ValueError("outside must be 'zero' or 'current'")


def reference_scale(data: MeasurementSet, cfg: PipelineConfig) -> float:
    """P_S of the measured domain; padded or subdivided stages must reuse it."""
    obj = data.domain(np.ones(data.shape))
    tensor = build_tensor(obj, data.system, data.detectors, data.source, order=data.order,
                          mode=cfg.mode, q=cfg.q)
    return MeasurementModel(tensor, data.tuples).scale


class Stage:
    """Forward model of a whole measurement for one pixelisation of the domain."""

    def __init__(self, obj: ObjectModel, data: MeasurementSet, cfg: PipelineConfig,
                 scale: float | None = None):
        self.obj = obj
        self.data = data
        self.cfg = cfg
        self.source = data.source
        self.tensor = build_tensor(obj, data.system, data.detectors, self.source, order=data.order,
                                   mode=cfg.mode, q=cfg.q)
        if scale is None:
            scale = reference_scale(data, cfg)
        self.model = MeasurementModel(self.tensor, data.tuples, scale=scale)
        self.weights = data_weights(data, cfg.solver.weighting)

    def global_residual(self, x) -> float:
        p, _ = _probabilities(self.model, x)
        r = p - self.data.frequencies
        return float(np.sum(self.weights * r * r))

    def auto_border(self) -> int:
        x = np.full(self.obj.size, 0.5)
        p, p0 = _probabilities(self.model, x)
        g, g0 = self.model.gradients(x)
        F, _ = fisher_matrix(p, g, max(p0, 0.0), g0)
        coords = np.indices(self.obj.shape).reshape(self.obj.ndim, -1).T
        return effective_bandwidth(F, 0.05, coords) + 1

    def window_problem(self, plan: WindowPlan, pos, x_current) -> WindowProblem | None:
        margin = plan.margin
        dets = window_detectors(plan.window_box(pos), self.obj, self.data.system,
                                self.data.detectors, margin)
        if len(dets) == 0:
            return None
        rows = tuples_within(self.data.tuples, dets)
        if len(rows) == 0:
            return None
        core = plan.core_pixels(pos)
        if plan.mode == FIRST:
            pixels = plan.window_pixels(pos)
            free_global = pixels
        elif self.cfg.outside == "zero":
            pixels = plan.window_pixels(pos)
            free_global = core
        else:
            pixels = np.arange(self.obj.size)
            free_global = core
        remap = -np.ones(self.obj.size, dtype=int)
        remap[pixels] = np.arange(len(pixels))
        sub = self.tensor.restrict(pixels, np.arange(len(self.data.detectors)))
        model = MeasurementModel(sub, self.data.tuples[rows], scale=self.model.scale)
        fixed = np.asarray(x_current, dtype=float)[pixels].copy()
        return WindowProblem(model, remap[free_global], fixed, self.data.frequencies[rows],
                             self.weights[rows])


@dataclass
class WindowReport:
    position: tuple
    residual: float
    converged: bool
    accepted: bool = True
    skipped: bool = False


@dataclass
class ReconstructionResult:
    estimate: np.ndarray
    pixel_size: float
    window_reports: list
    sweep_history: list
    stage_pixel_sizes: list
    infidelity: float | None = None
    elapsed: float = 0.0
    flags: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return not self.flags


def _solve_window(stage: Stage, plan: WindowPlan, pos, x_current, start=None):
    problem = stage.window_problem(plan, pos, x_current)
    if problem is None:
        return None, WindowReport(pos, 0.0, True, skipped=True)
    x0 = problem.fixed[problem.free] if start is None else np.full(len(problem.free), start)
    sol = minimize_box(problem.residuals, np.clip(x0, 0, 1), stage.cfg.solver, jac=problem.jacobian)
    return (problem, sol), WindowReport(pos, sol.cost, sol.converged)


def first_approximation(stage: Stage, plan: WindowPlan, start: float = 0.5, workers: int = 1):
    """Independent window fits; returns ``(x, reports)``. Pixels outside every core stay 0."""
    if plan.mode != FIRST:
        raise ValueError("first_approximation needs a first-pass plan")
    zeros = np.zeros(stage.obj.size)

    def task(pos):
        return _solve_window(stage, plan, pos, zeros, start)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(task, plan.positions))
    else:
        outcomes = [task(pos) for pos in plan.positions]
    x = np.zeros(stage.obj.size)
    reports = []
    for pos, (solved, report) in zip(plan.positions, outcomes):
        reports.append(report)
        if solved is None:
            continue
        problem, sol = solved
        # map window solution back and keep the core only
        pixels_of = plan.window_pixels(pos)
        core = plan.core_pixels(pos)
        values = dict(zip(pixels_of.tolist(), sol.x))
        for j in core:
            x[j] = values[int(j)]
    return x, reports


def refine_sweep(stage: Stage, plan: WindowPlan, x_in, tol: float = 1e-9):
    """One sequential pass over the windows; returns ``(x, reports, residual, aborted)``.

    Each window update is kept only if it does not raise the global residual.
    """
    if plan.mode != REFINE:
        raise ValueError("refine_sweep needs a refinement plan")
    x = np.array(x_in, dtype=float)
    current = stage.global_residual(x)
    reports = []
    aborted = False
    for pos in plan.positions:
        solved, report = _solve_window(stage, plan, pos, x)
        reports.append(report)
        if solved is None:
            continue
        problem, sol = solved
        core = plan.core_pixels(pos)
        trial = x.copy()
        trial[core] = sol.x
        value = stage.global_residual(trial)
        if not np.isfinite(value):
            aborted = True
            break
        if value <= current:
            x, current = trial, value
        else:
            report.accepted = False
    if stage.global_residual(x) > stage.global_residual(np.asarray(x_in)) * (1 + tol) + tol:
        aborted = True
    return x, reports, current, aborted


def infidelity(x_true, x_hat) -> float:
    """1 - <x, x_hat>^2 / (|x|^2 |x_hat|^2)."""
    a = np.ravel(np.asarray(x_true, dtype=float))
    b = np.ravel(np.asarray(x_hat, dtype=float))
    if a.shape != b.shape:
        raise ValueError("vectors must have equal length")
    na, nb = a @ a, b @ b
    if na == 0 or nb == 0:
        raise ValueError("infidelity is undefined for an all-zero vector")
    return float(min(max(1.0 - (a @ b) ** 2 / (na * nb), 0.0), 1.0))


def naive_image(data: MeasurementSet) -> np.ndarray:
    """Diagonal part of the measured correlations, resampled onto the target pixels.

    Each pixel takes the coincidence frequency of the detector nearest to its
    conjugate image point (0 when that tuple was not recorded).
    """
    obj = data.domain()
    conj = data.detectors.conjugates(data.system)
    diag_rows = np.flatnonzero(np.all(data.tuples == data.tuples[:, :1], axis=1))
    value = np.zeros(len(data.detectors))
    value[data.tuples[diag_rows, 0]] = data.frequencies[diag_rows]
    centers = obj.centers()
    nearest = np.argmin(np.sum((centers[:, None, :] - conj[None, :, :]) ** 2, axis=-1), axis=1)
    img = value[nearest]
    top = img.max()
    return (img / top if top > 0 else img).reshape(obj.shape)


# --------------------------------------------------------------------------
# pixel size selection and the multiscale pipeline


def dominance_at(pixel_size: float, system: ImagingSystem, source, order: int = 2,
                 n_pixels: int = 16, value: float = 0.5, cap_factor: float | None = 2.0,
                 ndim: int = 1, mode: str | None = None, q: int = 3) -> float:
    """Smallest dominance ratio of the FIM of a uniform test object."""
    shape = (n_pixels,) if ndim == 1 else (int(math.isqrt(n_pixels)),) * 2
    obj = ObjectModel.uniform(shape, pixel_size, value)
    det = DetectorGrid.conjugate_to(obj, system)
    tensor = build_tensor(obj, system, det, source, order=order, mode=mode, q=q)
    tuples = window_tuples(order, det, np.arange(len(det)), system, cap_factor)
    model = MeasurementModel(tensor, tuples)
    p, p0 = model.probabilities(obj.x)
    g, g0 = model.gradients(obj.x)
    F, _ = fisher_matrix(p, g, p0, g0)
    return float(np.min(dominance_profile(F)[0]))


def candidate_pixel_sizes(system: ImagingSystem, base: float | None = None) -> list:
    """Doubling ladder base * 2^k inside [dl/4, 8 dl]."""
    dl = system.rayleigh_width
    if base is None:
        base = dl / 4
    sizes = []
    d = base
    while d <= 8 * dl * (1 + 1e-12):
        if d >= dl / 4 * (1 - 1e-12):
            sizes.append(d)
        d *= 2
    return sizes


def choose_initial_pixel_size(system: ImagingSystem, source, order: int = 2,
                              rho_star: float = DOMINANCE_THRESHOLD, base: float | None = None,
                              **kwargs) -> float:
    """Smallest ladder pixel size whose uniform-object FIM is dominant at ``rho_star``."""
    for d in candidate_pixel_sizes(system, base):
        if dominance_at(d, system, source, order, **kwargs) >= rho_star:
            return d
    raise ValueError(f"no pixel size in [dl/4, 8 dl] gives dominance ratio >= {rho_star}")


def _padded_domain(data: MeasurementSet, factor: int):
    """Zero object at the target pixel size, padded so every axis divides by ``factor``."""
    pads = []
    for n in data.shape:
        extra = (-n) % factor
        pads.append((extra // 2, extra - extra // 2))
    shape = tuple(n + a + b for n, (a, b) in zip(data.shape, pads))
    origin = tuple(o - a * data.pixel_size for o, (a, _) in zip(data.origin, pads))
    return ObjectModel(np.zeros(shape), data.pixel_size, origin), pads


def _coarse(obj: ObjectModel, factor: int) -> ObjectModel:
    shape = tuple(n // factor for n in obj.shape)
    d = obj.pixel_size * factor
    origin = tuple(obj.lower_corner() + d / 2.0)
    return ObjectModel(np.zeros(shape), d, origin)


def _refine_plan(stage: Stage, cfg: PipelineConfig) -> WindowPlan:
    border = stage.auto_border() if cfg.border is None else cfg.border
    core = tuple(min(cfg.core, n) for n in stage.obj.shape)
    return plan_windows(stage.obj.shape, core, border, REFINE, cfg.margin, cfg.stride)


def _sweeps(stage: Stage, plan: WindowPlan, x, cfg: PipelineConfig, result: ReconstructionResult):
    for _ in range(cfg.max_sweeps):
        new, reports, value, aborted = refine_sweep(stage, plan, x)
        result.window_reports.extend(reports)
        result.sweep_history.append(value)
        if aborted:
            result.flags.append(f"sweep aborted at d={stage.obj.pixel_size:.4g}")
            return x
        change = float(np.max(np.abs(new - x)))
        x = new
        if change < cfg.sweep_tol:
            return x
    result.flags.append(f"sweep cap reached at d={stage.obj.pixel_size:.4g}")
    return x


def reconstruct(data: MeasurementSet, cfg: PipelineConfig = PipelineConfig()) -> ReconstructionResult:
    """Multiscale SWM: dominant initial pixels, first pass, then refine and halve."""
    t0 = time.perf_counter()
    d = data.pixel_size
    system = data.system
    if cfg.initial_pixel_size is None:
        d0 = choose_initial_pixel_size(system, data.source, data.order, cfg.rho_star, base=d,
                                       cap_factor=cfg.cap_factor, ndim=len(data.shape),
                                       mode=cfg.mode, q=cfg.q)
    else:
        d0 = cfg.initial_pixel_size
    ratio = d0 / d
    levels = int(round(math.log2(ratio))) if ratio >= 1 else -1
    if levels < 0 or not math.isclose(2 ** levels, ratio, rel_tol=1e-9):
        raise ValueError("initial pixel size must be the target size times a power of two")
    factor = 2 ** levels
    fine, pads = _padded_domain(data, factor)
    obj = _coarse(fine, factor)
    result = ReconstructionResult(np.zeros(data.shape), d, [], [], [])
    scale = reference_scale(data, cfg)

    stage = Stage(obj, data, cfg, scale)
    border = stage.auto_border() if cfg.border is None else cfg.border
    core = tuple(min(cfg.core, n) for n in obj.shape)
    first = plan_windows(obj.shape, core, border, FIRST, cfg.margin)
    x, reports = first_approximation(stage, first, workers=cfg.workers)
    result.window_reports.extend(reports)
    result.stage_pixel_sizes.append(obj.pixel_size)
    x = _sweeps(stage, _refine_plan(stage, cfg), x, cfg, result)

    for _ in range(levels):
        obj = subdivide(obj.with_values(x.reshape(obj.shape)), 2)
        x = obj.x.copy()
        stage = Stage(ObjectModel(np.zeros(obj.shape), obj.pixel_size, obj.origin), data, cfg, scale)
        result.stage_pixel_sizes.append(obj.pixel_size)
        x = _sweeps(stage, _refine_plan(stage, cfg), x, cfg, result)

    est = x.reshape(obj.shape)
    crop = tuple(slice(a, a + n) for (a, _), n in zip(pads, data.shape))
    result.estimate = np.clip(est[crop], 0.0, 1.0)
    if data.truth is not None:
        result.infidelity = infidelity(data.truth, result.estimate)
    result.elapsed = time.perf_counter() - t0
    return result


def global_solve(data: MeasurementSet, cfg: PipelineConfig = PipelineConfig(),
                 start: float = 0.5) -> np.ndarray:
    """Direct box-constrained fit of all pixels at the target size (reference solution)."""
    stage = Stage(data.domain(), data, cfg)
    everything = plan_windows(data.shape, data.shape, 0, FIRST, margin=math.inf)
    problem = stage.window_problem(everything, everything.positions[0], np.zeros(stage.obj.size))
    sol = minimize_box(problem.residuals, np.full(stage.obj.size, start), cfg.solver,
                       jac=problem.jacobian)
    return sol.x.reshape(data.shape)
