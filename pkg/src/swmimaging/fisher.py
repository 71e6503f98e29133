"""Fisher information, Cramer-Rao totals and banded-matrix diagnostics.

The FIM of a complete outcome set {p_k} U {P_0} is

    F_mn = sum_k (1/p_k) dp_k/dx_m dp_k/dx_n + (1/P_0) dP_0/dx_m dP_0/dx_n.

Besides the plain CRB this module gives cheap lower bounds on the smallest
eigenvalue (Gershgorin, trace/variance bound), diagonal dominance and band
diagnostics, bounds for inverses of banded/tridiagonal matrices and the
biased-estimator bounds used to study box-constrained reconstructions.

Not implemented: the bound for approximately banded matrices (it needs the
distance to the nearest l-banded matrix for every l, which is not available in
closed form) and the pentadiagonal analogue of the tridiagonal bracket.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

PROBABILITY_FLOOR = 1e-12
RANK_CUTOFF = 1e-10
DOMINANCE_THRESHOLD = 3.0


class RankDeficiencyWarning(UserWarning):
    pass


@dataclass
class FisherReport:
    F: np.ndarray
    inv_trace: float
    rank: int
    lambda_min: float
    gershgorin_lower: float
    trace_lower: float
    dominance_ratios: np.ndarray
    effective_bandwidth: int
    probability_floor: float = PROBABILITY_FLOOR
    skipped_outcomes: int = 0
    inverse_dominance_ratios: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def singular(self) -> bool:
        return self.rank < self.F.shape[0]

    def dominant(self, threshold: float = DOMINANCE_THRESHOLD) -> bool:
        return bool(np.min(self.dominance_ratios) >= threshold)

    def to_text(self) -> str:
        """Scalar diagnostics as ``key: value`` lines followed by the matrix as CSV."""
        lines = [
            "# fisher report v1",
            f"size: {self.F.shape[0]}",
            f"inv_trace: {self.inv_trace!r}",
            f"rank: {self.rank}",
            f"lambda_min: {self.lambda_min!r}",
            f"gershgorin_lower: {self.gershgorin_lower!r}",
            f"trace_lower: {self.trace_lower!r}",
            f"effective_bandwidth: {self.effective_bandwidth}",
            f"probability_floor: {self.probability_floor!r}",
            f"skipped_outcomes: {self.skipped_outcomes}",
            "dominance_ratios: " + ",".join(repr(float(v)) for v in self.dominance_ratios),
            "inverse_dominance_ratios: " + ",".join(repr(float(v)) for v in self.inverse_dominance_ratios),
            "matrix:",
        ]
        lines += [",".join(repr(float(v)) for v in row) for row in self.F]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FisherReport":
        head, _, body = text.partition("matrix:\n")
        meta = {}
        for line in head.splitlines():
            if line.startswith("#") or not line.strip():
                continue
            key, _, value = line.partition(":")
            meta[key.strip()] = value.strip()
        F = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2)

        def floats(s):
            return np.array([float(v) for v in s.split(",")]) if s else np.zeros(0)

        return cls(F, float(meta["inv_trace"]), int(meta["rank"]), float(meta["lambda_min"]),
                   float(meta["gershgorin_lower"]), float(meta["trace_lower"]),
                   floats(meta["dominance_ratios"]), int(meta["effective_bandwidth"]),
                   float(meta["probability_floor"]), int(meta["skipped_outcomes"]),
                   floats(meta.get("inverse_dominance_ratios", "")))


def fisher_matrix(p, gradients, p0=None, p0_gradient=None, floor: float = PROBABILITY_FLOOR):
    """Raw FIM assembly; returns ``(F, skipped)``.

    ``gradients`` is (K, M). When ``p0`` is given, its gradient defaults to
    minus the summed outcome gradients (the set is complete).
    """
    p = np.asarray(p, dtype=float)
    g = np.asarray(gradients, dtype=float)
    if np.any(p < 0) or (p0 is not None and p0 < 0):
        raise ValueError("probabilities must be nonnegative")
    keep = p >= floor
    gk = g[keep]
    F = (gk.T / p[keep]) @ gk
    skipped = int(np.sum(~keep))
    if p0 is not None:
        g0 = -np.sum(g, axis=0) if p0_gradient is None else np.asarray(p0_gradient, dtype=float)
        if p0 >= floor:
            F = F + np.outer(g0, g0) / p0
        else:
            skipped += 1
    return 0.5 * (F + F.T), skipped


def build_fim(p, gradients, p0=None, p0_gradient=None, floor: float = PROBABILITY_FLOOR,
              bandwidth_eps: float = 0.05) -> FisherReport:
    """Fisher information of a complete outcome set with all diagnostics attached."""
    p = np.asarray(p, dtype=float)
    if p0 is not None and abs(np.sum(p) + p0 - 1.0) > 1e-9:
        raise ValueError("probabilities plus P_0 must sum to one")
    F, skipped = fisher_matrix(p, gradients, p0, p0_gradient, floor)
    return report_for(F, floor=floor, skipped=skipped, bandwidth_eps=bandwidth_eps)


def report_for(F, floor: float = PROBABILITY_FLOOR, skipped: int = 0,
               bandwidth_eps: float = 0.05) -> FisherReport:
    F = np.asarray(F, dtype=float)
    inv, rank, evals = inverse_fim(F)
    inv_trace = float(np.trace(inv)) if rank == F.shape[0] else math.inf
    inv_ratios = dominance_profile(inv)[0] if rank == F.shape[0] else np.zeros(0)
    return FisherReport(F, inv_trace, rank, float(evals[0]), gershgorin_lower(F), trace_lower(F),
                        dominance_profile(F)[0], effective_bandwidth(F, bandwidth_eps),
                        floor, skipped, inv_ratios)


def inverse_fim(F, cutoff: float = RANK_CUTOFF):
    """(Pseudo-)inverse via symmetric eigendecomposition; returns ``(inv, rank, eigenvalues)``.

    Eigenvalues below ``cutoff * lambda_max`` are treated as zero.
    """
    F = np.asarray(F, dtype=float)
    w, v = np.linalg.eigh(0.5 * (F + F.T))
    top = max(abs(w[-1]), abs(w[0])) if len(w) else 0.0
    good = w > cutoff * top
    inv = (v[:, good] / w[good]) @ v[:, good].T
    return inv, int(np.sum(good)), w


def crb_total(F, N: float) -> float:
    """Lower bound Tr F^-1 / N on the summed variance.

    A rank-deficient F emits :class:`RankDeficiencyWarning` and the
    pseudo-inverse trace is returned.
    """
    if N <= 0:
        raise ValueError("N must be positive")
    inv, rank, _ = inverse_fim(F)
    if rank < np.shape(F)[0]:
        warnings.warn(f"FIM rank {rank} < {np.shape(F)[0]}; using the pseudo-inverse",
                      RankDeficiencyWarning, stacklevel=2)
    return float(np.trace(inv)) / N


def gershgorin_lower(F) -> float:
    F = np.asarray(F, dtype=float)
    off = np.sum(np.abs(F), axis=1) - np.abs(np.diag(F))
    return float(np.min(np.diag(F) - off))


def trace_lower(F) -> float:
    """Tr F / M - sqrt((M - 1) S) with S the spread of the eigenvalues."""
    F = np.asarray(F, dtype=float)
    m = F.shape[0]
    mean = np.trace(F) / m
    s = np.sum(F * F.T) / m - mean ** 2
    return float(mean - math.sqrt(max((m - 1) * s, 0.0)))


def dominance_profile(F, threshold: float = DOMINANCE_THRESHOLD):
    """Row ratios F_jj / sum_{k != j} |F_jk| and whether all reach ``threshold``."""
    F = np.asarray(F, dtype=float)
    diag = np.abs(np.diag(F))
    off = np.sum(np.abs(F), axis=1) - diag
    with np.errstate(divide="ignore"):
        ratios = np.where(off > 0, diag / np.where(off > 0, off, 1.0), np.inf)
    return ratios, bool(np.min(ratios) >= threshold)


def _index_distance(m: int, coords=None) -> np.ndarray:
    if coords is None:
        return np.abs(np.subtract.outer(np.arange(m), np.arange(m)))
    c = np.asarray(coords, dtype=int).reshape(m, -1)
    return np.max(np.abs(c[:, None, :] - c[None, :, :]), axis=-1)


def effective_bandwidth(F, eps: float = 0.05, coords=None) -> int:
    """Smallest l keeping all but an ``eps`` fraction of off-diagonal mass within distance l.

    Distance is |j - k|, or the Chebyshev distance between the pixel grid
    indices ``coords`` (shape (M, ndim)) for 2D objects.
    """
    A = np.abs(np.asarray(F, dtype=float))
    m = A.shape[0]
    dist = _index_distance(m, coords)
    top = int(dist.max()) if m > 1 else 0
    mass = np.bincount(dist.ravel(), weights=A.ravel(), minlength=top + 1)
    total = mass[1:].sum()
    if total == 0:
        return 0
    for l in range(top + 1):
        if mass[l + 1:].sum() <= eps * total:
            return l
    return top


def _is_tridiagonal(A) -> bool:
    m = A.shape[0]
    dist = np.abs(np.subtract.outer(np.arange(m), np.arange(m)))
    return bool(np.all(A[dist > 1] == 0))


def tridiag_inverse_bounds(A, j: int):
    """Bracket (lower, upper) for |(A^-1)_jj| of a strictly dominant tridiagonal matrix.

    The bracket only uses entries within two rows of ``j``.
    """
    A = np.asarray(A, dtype=float)
    m = A.shape[0]
    if not _is_tridiagonal(A):
        raise ValueError("matrix is not tridiagonal")
    a = np.abs(A)
    off = a.sum(axis=1) - np.diag(a)
    if np.any(np.diag(a) <= off):
        raise ValueError("matrix is not strictly diagonally dominant")

    def entry(r, c):
        return a[r, c] if 0 <= r < m and 0 <= c < m else 0.0

    lo_den = hi_den = a[j, j]
    if j - 1 >= 0:
        base, side = a[j - 1, j - 1], entry(j - 1, j - 2)
        lo_den -= a[j - 1, j] / (base + side) * a[j, j - 1]
        hi_den -= a[j - 1, j] / (base - side) * a[j, j - 1]
    if j + 1 < m:
        base, side = a[j + 1, j + 1], entry(j + 1, j + 2)
        lo_den -= a[j + 1, j] / (base + side) * a[j, j + 1]
        hi_den -= a[j + 1, j] / (base - side) * a[j, j + 1]
    return 1.0 / lo_den, 1.0 / hi_den


def bandwidth_of(A, tol: float = 0.0) -> int:
    A = np.abs(np.asarray(A, dtype=float))
    m = A.shape[0]
    dist = np.abs(np.subtract.outer(np.arange(m), np.arange(m)))
    nz = dist[A > tol]
    return int(nz.max()) if nz.size else 0


def band_truncate(A, width: int) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    m = A.shape[0]
    dist = np.abs(np.subtract.outer(np.arange(m), np.arange(m)))
    return np.where(dist <= width, A, 0.0)


def banded_inverse_approx_check(A, n: int, bandwidth: int | None = None):
    """Compare the (n*l)-band truncation of A^-1 against the eigenvalue bound.

    Returns ``(distance, bound, passed)`` where distance is the spectral norm
    of A^-1 minus its truncation and bound = (1/lmin)((lmax-lmin)/(lmax+lmin))^(n+1).
    """
    A = np.asarray(A, dtype=float)
    if not np.allclose(A, A.T):
        raise ValueError("matrix must be symmetric")
    w = np.linalg.eigvalsh(A)
    if w[0] <= 0:
        raise ValueError("matrix must be positive definite")
    l = bandwidth_of(A) if bandwidth is None else bandwidth
    inv = np.linalg.inv(A)
    distance = float(np.linalg.norm(inv - band_truncate(inv, n * l), 2))
    lo, hi = abs(w[0]), abs(w[-1])
    bound = float(((hi - lo) / (hi + lo)) ** (n + 1) / lo)
    return distance, bound, distance <= bound * (1 + 1e-12) + 1e-15


# --------------------------------------------------------------------------
# biased estimation


def biased_crb(F, bias_gradient, N: float):
    """(1/N)(I + Y) F^-1 (I + Y)^T and a flag certifying it is PSD."""
    F = np.asarray(F, dtype=float)
    Y = np.atleast_2d(np.asarray(bias_gradient, dtype=float))
    inv, rank, _ = inverse_fim(F)
    if rank < F.shape[0]:
        warnings.warn("singular FIM in biased bound; using the pseudo-inverse",
                      RankDeficiencyWarning, stacklevel=2)
    T = np.eye(F.shape[0]) + Y
    C = T @ inv @ T.T / N
    C = 0.5 * (C + C.T)
    w = np.linalg.eigvalsh(C)
    psd = bool(w[0] >= -1e-12 * max(1.0, abs(w[-1])))
    return C, psd


def estimate_gamma(bias_gradient) -> float:
    """Largest eigenvalue of Y^T Y (squared spectral norm of the bias gradient)."""
    Y = np.atleast_2d(np.asarray(bias_gradient, dtype=float))
    return float(np.linalg.eigvalsh(Y.T @ Y)[-1])


def gamma_total_bound(F, gamma: float, N: float) -> float:
    """(1 - sqrt(gamma))^2 Tr F^-1 / N; defined for 0 <= gamma <= 1."""
    if gamma < 0 or gamma > 1:
        raise ValueError(f"gamma={gamma} outside [0, 1]: bound undefined")
    inv, rank, _ = inverse_fim(F)
    if rank < np.shape(F)[0]:
        raise ValueError("singular FIM")
    return (1.0 - math.sqrt(gamma)) ** 2 * float(np.trace(inv)) / N


@dataclass(frozen=True)
class ClippedEstimatorStats:
    x: float
    delta2: float
    xi: float
    mean: float
    variance_bound: float
    variance: float
    mse: float

    @property
    def bias(self) -> float:
        return self.mean - self.x


def clipped_estimator_stats(x: float, F11: float, N: float) -> ClippedEstimatorStats:
    """Closed forms for y' = min(y, 1) with y ~ Normal(x, 1/(F11 N)).

    ``variance_bound`` is the biased CRB (d<y'>/dx)^2 Delta^2, ``variance`` the
    exact variance of y' and ``mse`` its mean squared error about ``x``.
    """
    if x > 1:
        raise ValueError("true value must satisfy x <= 1")
    info = F11 * N
    if info <= 0:
        raise ValueError("F11 * N must be positive")
    delta2 = 1.0 / info
    xi = (1.0 - x) * math.sqrt(info / 2.0)
    e = math.erf(xi)
    g = math.exp(-xi * xi)
    mean = 0.5 * (1.0 - e + x * (1.0 + e) - g * math.sqrt(2.0 / (math.pi * info)))
    slope = 0.5 * (1.0 + e)
    mse = (0.5 * (1.0 + e) + xi * xi * (1.0 - e) - xi / math.sqrt(math.pi) * g) * delta2
    variance = mse - (mean - x) ** 2
    return ClippedEstimatorStats(x, delta2, xi, mean, slope * slope * delta2, variance, mse)
