"""Correlation-function forward model for pseudo-thermal and SPDC illumination.

Both sources reduce to a pairwise object-dependent matrix over detectors,

    P_ij(x) = sum_{l,m} D^(ij)(l, m) x_l x_m,

with D^(ij)(l, m) = iint d_l(s') d_m(s) K(s, s') h(s, r_i) h(s', r_j).
For a thermal source ``P`` is the mutual intensity I(r_i, r_j) and the n-th
order correlation is the permanent of ``P`` restricted to the detector tuple
(Gaussian moment theorem). For SPDC ``P`` is the two-photon amplitude Phi and
the coincidence rate is Phi^2.

The D-tables are never stored densely: a :class:`CoefficientTensor` keeps the
PSF sampled at integration nodes, the node weights and the correlation kernel
between nodes, so that ``P = U K U^T`` with ``U = h * weight * x``.
"""

from __future__ import annotations

import itertools
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optics import DetectorGrid, ImagingSystem, ObjectModel, psf_eval

DEFAULT_MAX_ORDER = 4
LN2 = math.log(2.0)


class ModelDegeneracyError(ValueError):
    """Raised when a probability model cannot be normalised or completed."""


@dataclass(frozen=True)
class Thermal:
    """Pseudo-thermal speckle field with Gaussian coherence exp(-|s-s'|^2/w_c^2).

    ``correlation_width = 0`` is the incoherent (delta-correlated) limit and
    ``inf`` the fully coherent one.
    """

    correlation_width: float

    kind = "thermal"

    def __post_init__(self):
        if not self.correlation_width >= 0:
            raise ValueError("correlation width must be >= 0")

    def kernel(self, delta2: np.ndarray) -> np.ndarray:
        if np.isinf(self.correlation_width):
            return np.ones_like(delta2)
        return np.exp(-delta2 / self.correlation_width ** 2)


@dataclass(frozen=True)
class SPDC:
    """Twin-photon source with joint amplitude exp(-|s1-s2|^2/w^2).

    ``correlation_width`` is the FWHM of Lambda(s, -s) = exp(-4 s^2 / w^2),
    i.e. w = w_c / sqrt(ln 2). Zero means perfectly correlated photons.
    """

    correlation_width: float

    kind = "spdc"

    def __post_init__(self):
        if not (0 <= self.correlation_width < np.inf):
            raise ValueError("SPDC correlation width must be finite and >= 0")

    @property
    def gaussian_width(self) -> float:
        return self.correlation_width / math.sqrt(LN2)

    def kernel(self, delta2: np.ndarray) -> np.ndarray:
        return np.exp(-delta2 / self.gaussian_width ** 2)


SourceModel = Thermal | SPDC


def make_source(kind: str, correlation_width: float) -> SourceModel:
    kind = kind.lower()
    if kind == "thermal":
        return Thermal(correlation_width)
    if kind == "spdc":
        return SPDC(correlation_width)
    raise ValueError(f"unknown source kind {kind!r}")


# --------------------------------------------------------------------------
# integration nodes


def integration_nodes(obj: ObjectModel, mode: str = "quadrature", q: int = 3):
    """Nodes, weights and owning pixel for integrating over the object pixels.

    ``small-pixel`` puts one node of weight sigma (pixel area) at each centre;
    ``quadrature`` uses a q-point Gauss-Legendre rule per pixel and axis.
    """
    centers = obj.centers()
    if mode == "small-pixel":
        w = np.full(obj.size, obj.pixel_area)
        return centers, w, np.arange(obj.size)
    if mode != "quadrature":
        raise ValueError(f"unknown integration mode {mode!r}")
    t, wt = np.polynomial.legendre.leggauss(q)
    half = obj.pixel_size / 2.0
    if obj.ndim == 1:
        offs = np.stack([t * half, np.zeros(q)], axis=1)
        wts = wt * half
    else:
        tx, ty = np.meshgrid(t, t, indexing="ij")
        offs = np.stack([tx.ravel() * half, ty.ravel() * half], axis=1)
        wts = np.outer(wt, wt).ravel() * half ** 2
    nodes = (centers[:, None, :] + offs[None, :, :]).reshape(-1, 2)
    weights = np.tile(wts, obj.size)
    owner = np.repeat(np.arange(obj.size), len(wts))
    return nodes, weights, owner


def kernel_matrix(source: SourceModel, nodes: np.ndarray, weights: np.ndarray) -> np.ndarray:
    if source.correlation_width == 0:
        # delta correlation: int int delta(s-s') f(s) g(s') = sum_p w_p f_p g_p
        return np.diag(1.0 / weights)
    diff = nodes[:, None, :] - nodes[None, :, :]
    return source.kernel(np.sum(diff ** 2, axis=-1))


@dataclass(frozen=True, eq=False)
class CoefficientTensor:
    """Factored pairwise coefficient tables D^(ij)(l, m) for one configuration.

    Attributes
    ----------
    psf : (J, Q) PSF at every (detector, node) pair
    weights : (Q,) integration weights
    owner : (Q,) pixel index of every node
    kernel : (Q, Q) source correlation between nodes
    """

    kind: str
    order: int
    mode: str
    n_pixels: int
    psf: np.ndarray
    weights: np.ndarray
    owner: np.ndarray
    kernel: np.ndarray
    correlation_width: float = float("nan")
    pixel_size: float = float("nan")

    def __post_init__(self):
        for name in ("psf", "weights", "owner", "kernel"):
            getattr(self, name).setflags(write=False)

    @property
    def n_detectors(self) -> int:
        return self.psf.shape[0]

    def _indicator(self) -> np.ndarray:
        ind = np.zeros((len(self.owner), self.n_pixels))
        ind[np.arange(len(self.owner)), self.owner] = 1.0
        return ind

    def _amplitudes(self, x: np.ndarray):
        a = self.psf * self.weights  # (J, Q)
        u = a * np.asarray(x, dtype=float)[self.owner]
        return a, u, u @ self.kernel

    def pair_matrix(self, x) -> np.ndarray:
        """P_ij(x) for all detector pairs."""
        _, u, v = self._amplitudes(x)
        p = v @ u.T
        return 0.5 * (p + p.T)

    def pair_gradient(self, x, pairs: np.ndarray) -> np.ndarray:
        """dP_ab/dx_m for the detector pairs ``pairs`` (K, 2); returns (K, M)."""
        a, _, v = self._amplitudes(x)
        i, j = pairs[:, 0], pairs[:, 1]
        node_terms = a[i] * v[j] + a[j] * v[i]
        return node_terms @ self._indicator()

    def table(self, i: int, j: int) -> np.ndarray:
        """Dense D^(ij)(l, m) as an (M, M) array indexed [l, m]."""
        ind = self._indicator()
        # node p belongs to pixel m and pairs with detector i; node q to pixel l with detector j
        core = (self.weights * self.psf[i])[:, None] * self.kernel * (self.weights * self.psf[j])[None, :]
        return (ind.T @ core @ ind).T

    def dense(self) -> np.ndarray:
        """Full (J, J, M, M) table; only sensible for small configurations."""
        ind = self._indicator()
        a = self.psf * self.weights
        t = np.einsum("ip,pq,jq->ijpq", a, self.kernel, a)
        t = np.einsum("ijpq,pm,ql->ijlm", t, ind, ind)
        return t

    def restrict(self, pixels, detectors) -> "CoefficientTensor":
        """Tensor of the sub-model where only ``pixels`` transmit, seen by ``detectors``."""
        pixels = np.asarray(pixels, dtype=int)
        detectors = np.asarray(detectors, dtype=int)
        remap = -np.ones(self.n_pixels, dtype=int)
        remap[pixels] = np.arange(len(pixels))
        keep = np.nonzero(remap[self.owner] >= 0)[0]
        return CoefficientTensor(
            self.kind, self.order, self.mode, len(pixels),
            self.psf[np.ix_(detectors, keep)].copy(), self.weights[keep].copy(),
            remap[self.owner[keep]], self.kernel[np.ix_(keep, keep)].copy(),
            self.correlation_width, self.pixel_size)


def build_tensor(obj: ObjectModel, system: ImagingSystem, detectors: DetectorGrid,
                 source: SourceModel, order: int = 2, mode: str | None = None,
                 q: int = 3) -> CoefficientTensor:
    """Precompute the coefficient tensor for a geometry/source/pixelisation.

    ``mode`` defaults to Gauss-Legendre quadrature for 1D objects and the
    small-pixel approximation for 2D objects.
    """
    if mode is None:
        mode = "quadrature" if obj.ndim == 1 else "small-pixel"
    if source.kind == "spdc" and order != 2:
        raise ValueError("the SPDC model describes pair coincidences only (order 2)")
    nodes, weights, owner = integration_nodes(obj, mode, q)
    psf = psf_eval(nodes, detectors.points, system).T
    kern = kernel_matrix(source, nodes, weights)
    return CoefficientTensor(source.kind, int(order), mode, obj.size, psf, weights, owner,
                             kern, float(source.correlation_width), float(obj.pixel_size))


# --------------------------------------------------------------------------
# single coefficients (direct evaluation, independent of the factored tensor)


def _pair_coeff(i, j, l, m, obj, system, detectors, source, mode, q):
    nodes, weights, owner = integration_nodes(obj, mode, q)
    sel_m = owner == m
    sel_l = owner == l
    s, ws = nodes[sel_m], weights[sel_m]
    sp, wsp = nodes[sel_l], weights[sel_l]
    ri = detectors.points[i:i + 1]
    rj = detectors.points[j:j + 1]
    if source.correlation_width == 0:
        if l != m:
            return 0.0
        return float(np.sum(ws * psf_eval(s, ri, system)[:, 0] * psf_eval(s, rj, system)[:, 0]))
    k = source.kernel(np.sum((s[:, None, :] - sp[None, :, :]) ** 2, axis=-1))
    hi = psf_eval(s, ri, system)[:, 0]
    hj = psf_eval(sp, rj, system)[:, 0]
    return float((ws * hi) @ k @ (wsp * hj))


def thermal_pair_coeff(i: int, j: int, l: int, m: int, obj: ObjectModel, system: ImagingSystem,
                       detectors: DetectorGrid, source: Thermal, mode: str = "quadrature",
                       q: int = 3) -> complex:
    """D^(ij)(l, m) for a thermal source (pixel l pairs with detector j, m with i)."""
    if source.kind != "thermal":
        raise TypeError("thermal_pair_coeff needs a thermal source")
    return complex(_pair_coeff(i, j, l, m, obj, system, detectors, source, mode, q))


def spdc_pair_coeff(j: int, k: int, m1: int, m2: int, obj: ObjectModel, system: ImagingSystem,
                    detectors: DetectorGrid, source: SPDC, mode: str = "quadrature",
                    q: int = 3) -> complex:
    """D^(jk)(m1, m2): amplitude for photons through pixels m1, m2 reaching r_j, r_k."""
    if source.kind != "spdc":
        raise TypeError("spdc_pair_coeff needs an SPDC source")
    return complex(_pair_coeff(j, k, m2, m1, obj, system, detectors, source, mode, q))


# --------------------------------------------------------------------------
# correlation functions


def thermal_pair_correlation(i: int, j: int, x, tensor: CoefficientTensor) -> complex:
    """Mutual intensity I(r_i, r_j) = sum_{l,m} D^(ij)(l,m) x_l x_m."""
    return complex(tensor.pair_matrix(x)[i, j])


def _permutations(n: int):
    return list(itertools.permutations(range(n)))


def permanent_sums(sub: np.ndarray) -> np.ndarray:
    """Permanent of each (n, n) block in a (K, n, n) stack."""
    k, n, _ = sub.shape
    total = np.zeros(k, dtype=sub.dtype)
    rows = np.arange(n)
    for perm in _permutations(n):
        total = total + np.prod(sub[:, rows, perm], axis=1)
    return total


def gn_thermal(tup, x, tensor: CoefficientTensor, n_max: int = DEFAULT_MAX_ORDER) -> float:
    """n-th order thermal correlation at detector tuple ``tup`` (permutation sum)."""
    tup = np.atleast_1d(np.asarray(tup, dtype=int))
    if len(tup) > n_max:
        raise ValueError(f"correlation order {len(tup)} exceeds n_max={n_max}")
    p = tensor.pair_matrix(x)
    sub = p[np.ix_(tup, tup)][None]
    return max(float(np.real(permanent_sums(sub)[0])), 0.0)


def spdc_probability(j: int, k: int, x, tensor: CoefficientTensor) -> float:
    """Unnormalised coincidence rate |Phi(r_j, r_k)|^2."""
    return float(abs(tensor.pair_matrix(x)[j, k]) ** 2)


# --------------------------------------------------------------------------
# detector tuples and the complete measurement model


def detector_tuples(n: int, positions: np.ndarray, cap: float | None = None,
                    include_coincident: bool = True, candidates=None) -> np.ndarray:
    """Unordered n-tuples of detector indices (sorted, lexicographic order).

    ``cap`` bounds every pairwise image-plane distance within a tuple.
    """
    idx = np.arange(len(positions)) if candidates is None else np.asarray(candidates, dtype=int)
    combos = (itertools.combinations_with_replacement(idx, n) if include_coincident
              else itertools.combinations(idx, n))
    out = []
    for tup in combos:
        if cap is not None and n > 1:
            pts = positions[list(tup)]
            d = np.sqrt(np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1))
            if d.max() > cap + 1e-9:
                continue
        out.append(tup)
    return np.asarray(out, dtype=int).reshape(-1, n)


class MeasurementModel:
    """Normalised outcome probabilities for a fixed set of detector tuples.

    Outcome ``k`` is a joint detection at ``tuples[k]``; the extra "no counts"
    outcome P_0 completes the set. Probabilities are normalised by P_S, the
    summed raw rate of a fully transparent object, which must be supplied for
    window sub-models (it is a property of the whole experiment).
    """

    def __init__(self, tensor: CoefficientTensor, tuples: np.ndarray,
                 scale: float | None = None, n_max: int = DEFAULT_MAX_ORDER):
        tuples = np.asarray(tuples, dtype=int)
        if tuples.ndim != 2 or tuples.shape[1] != tensor.order:
            raise ValueError("tuples must be (K, order)")
        if tensor.order > n_max:
            raise ValueError(f"correlation order {tensor.order} exceeds n_max={n_max}")
        self.tensor = tensor
        self.tuples = tuples
        n = tensor.order
        a, b = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        pairs = np.sort(np.stack([tuples[:, a], tuples[:, b]], axis=-1), axis=-1)  # (K,n,n,2)
        flat = pairs.reshape(-1, 2)
        self._pairs, inverse = np.unique(flat, axis=0, return_inverse=True)
        self._pair_index = inverse.reshape(len(tuples), n, n)
        if scale is None:
            scale = float(np.sum(self.raw(np.ones(tensor.n_pixels))))
        if not scale > 0:
            raise ModelDegeneracyError("fully transparent object gives zero total rate")
        self.scale = scale

    @property
    def n_outcomes(self) -> int:
        return len(self.tuples)

    @property
    def n_pixels(self) -> int:
        return self.tensor.n_pixels

    def _sub(self, x):
        p = self.tensor.pair_matrix(x)
        t = self.tuples
        return p[t[:, :, None], t[:, None, :]]

    def raw(self, x) -> np.ndarray:
        sub = self._sub(x)
        if self.tensor.kind == "spdc":
            return sub[:, 0, 1] ** 2
        return np.maximum(permanent_sums(sub), 0.0)

    def raw_gradient(self, x) -> np.ndarray:
        """d raw_k / d x_m as a (K, M) array."""
        x = np.asarray(x, dtype=float)
        sub = self._sub(x)
        dpair = self.tensor.pair_gradient(x, self._pairs)
        if self.tensor.kind == "spdc":
            return 2.0 * sub[:, 0, 1][:, None] * dpair[self._pair_index[:, 0, 1]]
        n = self.tensor.order
        k = len(self.tuples)
        grad = np.zeros((k, self.n_pixels))
        rows = np.arange(n)
        for perm in _permutations(n):
            factors = sub[:, rows, perm]  # (K, n)
            for a in range(n):
                others = np.prod(np.delete(factors, a, axis=1), axis=1) if n > 1 else np.ones(k)
                grad += others[:, None] * dpair[self._pair_index[:, a, perm[a]]]
        return grad

    def probabilities(self, x):
        """Normalised tuple probabilities and the no-counts probability."""
        return normalize_probabilities(self.raw(x), self.scale)

    def gradients(self, x):
        """(K, M) gradients of the normalised probabilities and the (M,) gradient of P_0."""
        g = self.raw_gradient(x) / self.scale
        return g, -np.sum(g, axis=0)


def normalize_probabilities(raw, reference, tol: float = 1e-9):
    """Normalise raw rates by P_S and append the no-counts probability.

    ``reference`` is either the raw rates of the fully transparent object
    or their precomputed sum P_S.
    """
    raw = np.asarray(raw, dtype=float)
    if np.any(raw < 0):
        raise ValueError("raw probabilities must be nonnegative")
    p_s = float(np.sum(reference))
    if not p_s > 0:
        raise ModelDegeneracyError("P_S = 0: degenerate geometry")
    p = raw / p_s
    p0 = 1.0 - float(np.sum(p))
    if p0 < -tol:
        raise ModelDegeneracyError(
            f"no-counts probability {p0:.3e} < 0: rates are not monotone in the transmissions")
    return p, max(p0, 0.0)


def probability_gradient(k: int, x, model: MeasurementModel) -> np.ndarray:
    """Gradient of normalised probability ``k``; ``k = -1`` selects P_0."""
    g, g0 = model.gradients(x)
    return g0 if k == -1 else g[k]


# --------------------------------------------------------------------------
# tensor export / import

_MAGIC = b"SWMD"
_VERSION = 1
_KINDS = {"thermal": 0, "spdc": 1}
_HEADER = struct.Struct("<4sIBBIII I")


@dataclass(frozen=True, eq=False)
class CoefficientTable:
    """Dense pairwise table D[i, j, l, m] as loaded from disk."""

    kind: str
    order: int
    table: np.ndarray = field(repr=False)

    @property
    def n_detectors(self) -> int:
        return self.table.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.table.shape[2]

    def pair_matrix(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.real(np.einsum("ijlm,l,m->ij", self.table, x, x))

    def pair_gradient(self, x, pairs) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        t = self.table[pairs[:, 0], pairs[:, 1]]
        return np.real(np.einsum("klm,l->km", t, x) + np.einsum("kml,l->km", t, x))


def export_tensor(tensor, path) -> None:
    """Write the dense pairwise table in the little-endian binary layout.

    Header (``<4sIBBIII I``): magic ``SWMD``, version, source kind, mode flag,
    order, detector count J, pixel count M, CRC32 of the body. Body: J*J*M*M
    (re, im) float64 pairs in row-major [i, j, l, m] order.
    """
    table = tensor.table if isinstance(tensor, CoefficientTable) else tensor.dense()
    table = np.asarray(table, dtype=np.complex128)
    body = np.ascontiguousarray(table).astype("<c16").tobytes()
    mode = 0 if getattr(tensor, "mode", "quadrature") == "quadrature" else 1
    j, _, m, _ = table.shape
    header = _HEADER.pack(_MAGIC, _VERSION, _KINDS[tensor.kind], mode, tensor.order, j, m,
                          zlib.crc32(body))
    Path(path).write_bytes(header + body)


def import_tensor(path) -> CoefficientTable:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError("truncated coefficient file")
    magic, version, kind, _mode, order, j, m, crc = _HEADER.unpack_from(data)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError("not a coefficient file")
    body = data[_HEADER.size:]
    if len(body) != j * j * m * m * 16 or zlib.crc32(body) != crc:
        raise ValueError("coefficient file is corrupted")
    table = np.frombuffer(body, dtype="<c16").reshape(j, j, m, m).astype(np.complex128)
    kind_name = {v: k for k, v in _KINDS.items()}[kind]
    return CoefficientTable(kind_name, order, table)


def dump_tensor_csv(tensor, path) -> None:
    """Debug dump: one ``i,j,l,m,re,im`` row per coefficient."""
    table = tensor.table if isinstance(tensor, CoefficientTable) else tensor.dense()
    lines = ["i,j,l,m,re,im"]
    for idx in np.ndindex(table.shape):
        v = complex(table[idx])
        lines.append(",".join(map(str, idx)) + f",{v.real!r},{v.imag!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# measured data


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Observed joint-detection frequencies plus the geometry they refer to.

    ``frequencies[k]`` belongs to ``tuples[k]``; ``no_counts`` is the frequency
    of the empty outcome, so that both sum to one. The object domain
    (``shape``, ``pixel_size``, ``origin``) is the target pixelisation.
    """

    system: ImagingSystem
    detectors: DetectorGrid
    tuples: np.ndarray
    frequencies: np.ndarray
    no_counts: float
    n_events: int
    shape: tuple
    pixel_size: float
    origin: tuple
    source_kind: str = "thermal"
    correlation_width: float = 0.0
    seed: int | None = None
    truth: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.tuples, dtype=int)
        f = np.asarray(self.frequencies, dtype=float)
        if t.ndim != 2 or len(t) != len(f):
            raise ValueError("one frequency per detector tuple is required")
        if np.any(f < 0) or self.no_counts < 0:
            raise ValueError("frequencies must be nonnegative")
        if abs(f.sum() + self.no_counts - 1.0) > 1e-9:
            raise ValueError("frequencies and no-counts frequency must sum to one")
        if t.size and (t.min() < 0 or t.max() >= len(self.detectors)):
            raise ValueError("detector tuple index out of range")
        object.__setattr__(self, "tuples", t)
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        if self.truth is not None:
            truth = np.asarray(self.truth, dtype=float).reshape(self.shape)
            object.__setattr__(self, "truth", truth)

    @property
    def order(self) -> int:
        return self.tuples.shape[1]

    @property
    def source(self):
        return make_source(self.source_kind, self.correlation_width)

    def domain(self, values=None) -> ObjectModel:
        """Target pixelisation as an object (zeros unless ``values`` are given)."""
        x = np.zeros(self.shape) if values is None else np.asarray(values, dtype=float).reshape(self.shape)
        return ObjectModel(x, self.pixel_size, self.origin)
