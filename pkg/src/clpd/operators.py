"""Discrete Radon transform, its exact adjoint, FBP and dose simulation.

The forward operator is a Joseph (linear-interpolation) ray tracer stored as
a sparse matrix, so the backprojector is its exact transpose.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ShapeError
from .geometry import ScanGeometry

CLINICAL_DOSE = 1e5
EXTREME_LOW_DOSE = 1e3


@dataclass(frozen=True)
class DoseLevel:
    incident_photons: float

    def __post_init__(self):
        if not self.incident_photons > 0:
            raise ValueError("incident photon count must be positive")


DOSES = {"clinical": DoseLevel(CLINICAL_DOSE), "extreme": DoseLevel(EXTREME_LOW_DOSE)}


def _joseph_matrix(g: ScanGeometry) -> sp.csr_matrix:
    n = g.image_size
    ps = g.pixel_size
    s = g.detector_positions
    half = (n - 1) / 2
    grid = (np.arange(n) - half) * ps
    rows, cols, vals = [], [], []
    for a, theta in enumerate(g.angles):
        c, si = math.cos(theta), math.sin(theta)
        ray = a * g.num_detectors + np.arange(g.num_detectors)
        # ray: p = s*(c, si) + t*(-si, c)
        if abs(c) >= abs(si):
            # step through image rows; interpolate along x
            y = -grid[None, :]  # y of each row, row 0 on top
            t = (y - s[:, None] * si) / c
            u = (s[:, None] * c - t * si) / ps + half  # fractional column index
            lead = np.broadcast_to(np.arange(n)[None, :], u.shape)  # row index
            step = ps / abs(c)
            along_cols = True
        else:
            x = grid[None, :]
            t = (s[:, None] * c - x) / si
            yy = s[:, None] * si + t * c
            u = half - yy / ps  # fractional row index
            lead = np.broadcast_to(np.arange(n)[None, :], u.shape)  # column index
            step = ps / abs(si)
            along_cols = False
        base = np.floor(u)
        frac = u - base
        base = base.astype(np.int64)
        r = np.broadcast_to(ray[:, None], u.shape)
        for off, w in ((0, 1.0 - frac), (1, frac)):
            idx = base + off
            ok = (idx >= 0) & (idx < n) & (w > 0)
            if along_cols:
                pix = lead[ok] * n + idx[ok]
            else:
                pix = idx[ok] * n + lead[ok]
            rows.append(r[ok])
            cols.append(pix)
            vals.append(w[ok] * step)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    shape = (g.num_angles * g.num_detectors, n * n)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=shape, dtype=np.float64)
    mat.sum_duplicates()
    return mat


class RadonOperator:
    """Matrix form of the projector for one geometry, in both precisions."""

    def __init__(self, geometry: ScanGeometry):
        self.geometry = geometry
        self.matrix = _joseph_matrix(geometry)
        self._t64 = self.matrix.T.tocsr()
        self._f32 = None

    def _mats(self, dtype):
        if dtype == np.float64:
            return self.matrix, self._t64
        if self._f32 is None:
            self._f32 = (self.matrix.astype(np.float32), self._t64.astype(np.float32))
        return self._f32

    @staticmethod
    def _dtype(x):
        return np.float32 if x.dtype == np.float32 else np.float64

    def forward(self, x: np.ndarray) -> np.ndarray:
        g = self.geometry
        if x.shape[-2:] != g.image_shape:
            raise ShapeError(f"image shape {x.shape[-2:]} does not match geometry {g.image_shape}")
        dtype = self._dtype(x)
        a, _ = self._mats(dtype)
        lead = x.shape[:-2]
        flat = np.asarray(x, dtype=dtype).reshape(-1, g.image_size**2)
        out = (a @ flat.T).T
        return np.ascontiguousarray(out).reshape(*lead, *g.sinogram_shape)

    def adjoint(self, z: np.ndarray) -> np.ndarray:
        g = self.geometry
        if z.shape[-2:] != g.sinogram_shape:
            raise ShapeError(f"sinogram shape {z.shape[-2:]} does not match geometry {g.sinogram_shape}")
        dtype = self._dtype(z)
        _, at = self._mats(dtype)
        lead = z.shape[:-2]
        flat = np.asarray(z, dtype=dtype).reshape(-1, g.num_angles * g.num_detectors)
        out = (at @ flat.T).T
        return np.ascontiguousarray(out).reshape(*lead, *g.image_shape)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


@functools.lru_cache(maxsize=16)
def radon(geometry: ScanGeometry) -> RadonOperator:
    return RadonOperator(geometry)


def forward_project(x: np.ndarray, g: ScanGeometry) -> np.ndarray:
    """Line integrals of ``x`` (shape ``(..., n, n)``) for every ray of ``g``."""
    return radon(g).forward(x)


def back_project(z: np.ndarray, g: ScanGeometry) -> np.ndarray:
    """Exact transpose of :func:`forward_project`."""
    return radon(g).adjoint(z)


# ---------------------------------------------------------------------------
# Filtered backprojection
# ---------------------------------------------------------------------------


def _next_pow2(k: int) -> int:
    return 1 << (k - 1).bit_length()


@functools.lru_cache(maxsize=32)
def ramp_filter(num_detectors: int, spacing: float, window: str = "ram_lak") -> np.ndarray:
    """Frequency response of the band-limited ramp on the zero-padded grid.

    Built from the spatial Ram-Lak kernel, which keeps the DC term correct.
    """
    size = _next_pow2(2 * num_detectors)
    k = np.fft.fftfreq(size, d=1.0 / size)  # integer offsets, wrapped
    h = np.zeros(size)
    h[0] = 1.0 / (4 * spacing**2)
    odd = (k.astype(int) % 2) == 1
    h[odd] = -1.0 / (math.pi * k[odd] * spacing) ** 2
    response = np.real(np.fft.fft(h)) * spacing
    if window == "hann":
        f = np.fft.fftfreq(size)
        response *= 0.5 * (1 + np.cos(2 * math.pi * f))
    elif window != "ram_lak":
        raise ValueError(f"unknown FBP filter {window!r}")
    return response


def filter_sinogram(y: np.ndarray, g: ScanGeometry, window: str = "ram_lak") -> np.ndarray:
    response = ramp_filter(g.num_detectors, g.detector_spacing, window)
    size = response.size
    spectrum = np.fft.fft(y, n=size, axis=-1)
    out = np.real(np.fft.ifft(spectrum * response, axis=-1))[..., : g.num_detectors]
    return out.astype(y.dtype if y.dtype == np.float32 else np.float64)


def fbp(y: np.ndarray, g: ScanGeometry, filter: str = "ram_lak") -> np.ndarray:
    """Filtered backprojection of a sinogram (or a batch of them)."""
    if y.shape[-2:] != g.sinogram_shape:
        raise ShapeError(f"sinogram shape {y.shape[-2:]} does not match geometry {g.sinogram_shape}")
    filtered = filter_sinogram(y, g, filter)
    # the matched backprojector weights each view by pixel_size**2 / detector_spacing
    d_theta = g.angular_range / g.num_angles
    scale = d_theta * g.detector_spacing / g.pixel_size**2
    return (back_project(filtered, g) * scale).astype(filtered.dtype)


# ---------------------------------------------------------------------------
# Noise and operator norm
# ---------------------------------------------------------------------------


def apply_dose_noise(y_clean: np.ndarray, dose: DoseLevel | float, seed: int) -> np.ndarray:
    """Poisson transmission noise at ``dose`` incident photons per bin, log-converted."""
    i0 = dose.incident_photons if isinstance(dose, DoseLevel) else float(dose)
    if not i0 > 0:
        raise ValueError("incident photon count must be positive")
    y = np.asarray(y_clean, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("clean sinogram must be finite")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(i0 * np.exp(-y))
    noisy = -np.log(np.maximum(counts, 1) / i0)
    return noisy.astype(y_clean.dtype if np.asarray(y_clean).dtype == np.float32 else np.float64)


def operator_norm(g: ScanGeometry, iterations: int = 100, seed: int = 0) -> float:
    """Power-method estimate of the spectral norm of the projector."""
    if iterations < 10:
        raise ValueError("use at least 10 power iterations")
    op = radon(g)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(g.image_shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iterations):
        w = op.adjoint(op.forward(v))
        est = float(np.linalg.norm(w))
        if est == 0.0:
            return 0.0
        v = w / est
    return math.sqrt(est)
