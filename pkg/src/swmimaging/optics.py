"""Imaging geometry, jinc point-spread function and pixelated objects.

All lengths are kept in micrometres. ``ImagingSystem.from_lab_units`` converts
the millimetre/nanometre values usually quoted for a bench setup.

Positions are stored as ``(N, 2)`` arrays for both 1D and 2D problems; 1D
objects and detector rows simply live on the ``y = 0`` line.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import j1

#: first positive root of J1, the first dark ring of the jinc PSF
J1_FIRST_ZERO = 3.8317059702075125


@dataclass(frozen=True)
class ImagingSystem:
    """Single-lens imaging system (lengths in µm).

    Defaults reproduce the pseudo-thermal bench: s_o = 234 mm, s_i = 454 mm,
    a 1.7 mm pinhole (R = 0.85 mm) and 405 nm light.
    """

    object_distance: float = 234_000.0
    image_distance: float = 454_000.0
    lens_radius: float = 850.0
    wavelength: float = 0.405

    def __post_init__(self):
        for name in ("object_distance", "image_distance", "lens_radius", "wavelength"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be positive, got {value!r}")

    @classmethod
    def from_lab_units(cls, s_o_mm: float, s_i_mm: float, radius_mm: float,
                       wavelength_nm: float) -> "ImagingSystem":
        return cls(s_o_mm * 1e3, s_i_mm * 1e3, radius_mm * 1e3, wavelength_nm * 1e-3)

    @property
    def magnification(self) -> float:
        return self.image_distance / self.object_distance

    @property
    def rayleigh_width(self) -> float:
        """Characteristic PSF width s_o * lambda / (2R) in µm."""
        return self.object_distance * self.wavelength / (2.0 * self.lens_radius)

    def conjugate(self, r: np.ndarray) -> np.ndarray:
        """Object-plane point imaged onto image-plane point ``r`` (inverted image)."""
        return -np.asarray(r, dtype=float) / self.magnification

    def image_of(self, s: np.ndarray) -> np.ndarray:
        return -np.asarray(s, dtype=float) * self.magnification


def rayleigh_width(system: ImagingSystem) -> float:
    return system.rayleigh_width


def jinc(x: np.ndarray) -> np.ndarray:
    """2 J1(x) / x with the removable singularity at 0 filled in."""
    x = np.abs(np.asarray(x, dtype=float))
    out = np.ones_like(x)
    nz = x > 1e-8
    out[nz] = 2.0 * j1(x[nz]) / x[nz]
    # second-order Taylor term keeps the tiny-argument branch smooth
    small = ~nz
    out[small] = 1.0 - x[small] ** 2 / 8.0
    return out


def _as_points(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim == 0:
        p = p.reshape(1, 1)
    if p.ndim == 1:
        # a flat array is a list of 1D coordinates; pass 2D points as (N, 2)
        p = p[:, None]
    if p.shape[-1] == 1:
        p = np.concatenate([p, np.zeros_like(p)], axis=-1)
    return p


def psf_argument(s, r, system: ImagingSystem) -> np.ndarray:
    """Dimensionless jinc argument for every (s, r) pair, shape ``(len(s), len(r))``."""
    s = _as_points(s)
    r = _as_points(r)
    offset = s[:, None, :] + r[None, :, :] / system.magnification
    dist = np.sqrt(np.sum(offset ** 2, axis=-1))
    # R*omega/(s_o*c) = 2*pi*R/(lambda*s_o) = pi/rayleigh_width
    return np.pi * dist / system.rayleigh_width


def psf_eval(s, r, system: ImagingSystem) -> np.ndarray:
    """Jinc amplitude PSF h(s, r) with the quadratic phase factor set to 1.

    Scalars in, scalar out; point arrays in, a ``(len(s), len(r))`` matrix out.
    """
    scalar = np.ndim(s) == 0 and np.ndim(r) == 0
    h = jinc(psf_argument(s, r, system))
    return float(h[0, 0]) if scalar else h


@dataclass(frozen=True)
class ObjectModel:
    """Pixelated real transmission object.

    ``transmissions`` has the object shape, ``(M,)`` or ``(Mx, My)``; the first
    axis runs along x. ``origin`` is the centre of pixel 0 (or (0, 0)).
    """

    transmissions: np.ndarray
    pixel_size: float
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        x = np.array(self.transmissions, dtype=float)
        if x.ndim not in (1, 2):
            raise ValueError("objects must be 1D or 2D")
        if self.pixel_size <= 0:
            raise ValueError("pixel size must be positive")
        if np.any(x < 0) or np.any(x > 1) or not np.all(np.isfinite(x)):
            raise ValueError("transmissions must lie in [0, 1]")
        x.setflags(write=False)
        object.__setattr__(self, "transmissions", x)
        origin = tuple(float(v) for v in np.atleast_1d(self.origin))
        if len(origin) == 1:
            origin = (origin[0], 0.0)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def uniform(cls, shape, pixel_size: float, value: float = 1.0, centered: bool = True):
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        x = np.full(shape, float(value))
        return cls.from_array(x, pixel_size, centered=centered)

    @classmethod
    def from_array(cls, x, pixel_size: float, centered: bool = True):
        x = np.asarray(x, dtype=float)
        if centered:
            origin = tuple(-(n - 1) * pixel_size / 2.0 for n in x.shape)
        else:
            origin = (0.0,) * x.ndim
        return cls(x, pixel_size, origin)

    @property
    def shape(self) -> tuple:
        return self.transmissions.shape

    @property
    def ndim(self) -> int:
        return self.transmissions.ndim

    @property
    def size(self) -> int:
        return self.transmissions.size

    @property
    def x(self) -> np.ndarray:
        """Flat (row-major) transmission vector."""
        return self.transmissions.ravel()

    @property
    def pixel_area(self) -> float:
        return self.pixel_size ** self.ndim

    def centers(self) -> np.ndarray:
        """Pixel centres as an ``(M, 2)`` array in flat order."""
        idx = np.indices(self.shape).reshape(self.ndim, -1).T.astype(float)
        pts = np.zeros((idx.shape[0], 2))
        pts[:, : self.ndim] = np.asarray(self.origin[: self.ndim]) + idx * self.pixel_size
        return pts

    def with_values(self, x) -> "ObjectModel":
        return ObjectModel(np.clip(np.asarray(x, dtype=float), 0.0, 1.0).reshape(self.shape),
                           self.pixel_size, self.origin)

    def lower_corner(self) -> np.ndarray:
        return np.asarray(self.origin[: self.ndim]) - self.pixel_size / 2.0


def subdivide(obj: ObjectModel, factor: int) -> ObjectModel:
    """Split every pixel into ``factor`` children per axis, each keeping the parent's value."""
    if int(factor) != factor or factor < 1:
        raise ValueError("subdivision factor must be a positive integer")
    factor = int(factor)
    x = obj.transmissions
    for axis in range(obj.ndim):
        x = np.repeat(x, factor, axis=axis)
    d = obj.pixel_size / factor
    corner = obj.lower_corner()
    origin = tuple(corner + d / 2.0)
    return ObjectModel(x, d, origin)


def coarsen(obj: ObjectModel, factor: int) -> ObjectModel:
    """Average blocks of ``factor`` pixels per axis (inverse of :func:`subdivide`)."""
    factor = int(factor)
    if any(n % factor for n in obj.shape):
        raise ValueError("object shape must be divisible by the factor")
    x = obj.transmissions
    if obj.ndim == 1:
        x = x.reshape(-1, factor).mean(axis=1)
    else:
        mx, my = obj.shape
        x = x.reshape(mx // factor, factor, my // factor, factor).mean(axis=(1, 3))
    d = obj.pixel_size * factor
    origin = tuple(obj.lower_corner() + d / 2.0)
    return ObjectModel(x, d, origin)


@dataclass(frozen=True)
class DetectorGrid:
    """Detector positions in the image plane (µm)."""

    points: np.ndarray
    pixel_pitch: float
    dims: tuple = field(default=())

    def __post_init__(self):
        pts = _as_points(self.points).copy()
        if self.pixel_pitch <= 0:
            raise ValueError("detector pitch must be positive")
        if len(np.unique(np.round(pts, 9), axis=0)) != len(pts):
            raise ValueError("detector points must be distinct")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if not self.dims:
            object.__setattr__(self, "dims", (len(pts),))

    def __len__(self):
        return len(self.points)

    @classmethod
    def regular(cls, dims, pitch: float = 44.64, center=(0.0, 0.0)) -> "DetectorGrid":
        """Rectangular array of detectors, e.g. a 32x32 SPAD chip at 44.64 µm pitch."""
        dims = (dims,) if np.isscalar(dims) else tuple(dims)
        idx = np.indices(dims).reshape(len(dims), -1).T.astype(float)
        pts = np.zeros((idx.shape[0], 2))
        pts[:, : len(dims)] = (idx - (np.asarray(dims) - 1) / 2.0) * pitch
        pts += np.asarray(center, dtype=float)
        return cls(pts, pitch, dims)

    @classmethod
    def conjugate_to(cls, obj: ObjectModel, system: ImagingSystem, oversample: int = 1,
                     pad: int = 0) -> "DetectorGrid":
        """Detectors imaging the object pixel centres (``oversample`` per pixel per axis).

        ``pad`` adds extra detector rows beyond the object edge, in object pixels.
        """
        step = obj.pixel_size / oversample
        axes = []
        for axis, n in enumerate(obj.shape):
            lo = obj.lower_corner()[axis] - pad * obj.pixel_size
            count = (n + 2 * pad) * oversample
            axes.append(lo + step * (np.arange(count) + 0.5))
        grids = np.meshgrid(*axes, indexing="ij")
        s = np.zeros((grids[0].size, 2))
        for axis, g in enumerate(grids):
            s[:, axis] = g.ravel()
        r = system.image_of(s)
        return cls(r, step * system.magnification, grids[0].shape)

    def conjugates(self, system: ImagingSystem) -> np.ndarray:
        return system.conjugate(self.points)
