"""Linear and constraint operators used by the model and the solver.

PSF blur H (separable Gaussian, frame-wise), spatial finite differences S,
nonnegative and simplex projections, the nonnegative l1 prox, and a power
iteration for squared operator norms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.ndimage import convolve1d

from .errors import ShapeError

if TYPE_CHECKING:  # pragma: no cover - import only for annotations
    from .model import ImageGeometry

_FWHM_TO_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))


def gaussian_taps(sigma_voxels):
    """Unit-mass symmetric Gaussian taps truncated at radius ceil(3 sigma)."""
    radius = int(np.ceil(3.0 * sigma_voxels))
    offsets = np.arange(-radius, radius + 1)
    taps = np.exp(-0.5 * (offsets / sigma_voxels) ** 2)
    return taps / taps.sum()


@dataclass(frozen=True)
class PsfOperator:
    """Spatially invariant blur applied independently to every time-frame.

    Zero-padded boundaries with a truncated, renormalized kernel keep the
    operator self-adjoint with spectral norm <= 1.
    """

    geometry: "ImageGeometry"
    fwhm_mm: float
    kernel: tuple
    mode: str

    @classmethod
    def identity(cls, geometry):
        return cls(geometry, 0.0, (), "identity")

    @classmethod
    def gaussian(cls, geometry, fwhm_mm):
        if fwhm_mm <= 0:
            return cls.identity(geometry)
        sigma = fwhm_mm / _FWHM_TO_SIGMA / geometry.voxel_size_mm
        taps = gaussian_taps(sigma)
        taps.setflags(write=False)
        # isotropic PSF on a cubic voxel grid: same taps along each axis
        return cls(geometry, float(fwhm_mm), (taps, taps, taps), "gaussian")


def psf_apply(psf: PsfOperator, X):
    """Convolves each row of X (a time-frame) with the separable kernel.

    X is R x N with voxels flattened in C order of (nx, ny, nz); identity
    mode returns X unchanged.
    """
    X = np.asarray(X, dtype=float)
    geo = psf.geometry
    if X.ndim != 2 or X.shape[1] != geo.n_voxels:
        raise ShapeError("X", f"expected (*, {geo.n_voxels}), got {X.shape}")
    if psf.mode == "identity":
        return X
    vol = X.reshape(X.shape[0], geo.nx, geo.ny, geo.nz)
    for axis, taps in enumerate(psf.kernel):
        vol = convolve1d(vol, taps, axis=axis + 1, mode="constant", cval=0.0)
    return vol.reshape(X.shape)


def psf_adjoint(psf: PsfOperator, X):
    """Adjoint blur; equals psf_apply because the kernel is symmetric and
    boundaries are zero-padded."""
    return psf_apply(psf, X)


@dataclass(frozen=True)
class SpatialDiffOperator:
    """First-order forward differences along the three spatial axes.

    Maps K x N to K x 3N (x, y then z blocks); rows at the far boundary of
    each axis are zero.
    """

    geometry: "ImageGeometry"


def sdiff_apply(S: SpatialDiffOperator, A):
    A = np.asarray(A, dtype=float)
    geo = S.geometry
    if A.ndim != 2 or A.shape[1] != geo.n_voxels:
        raise ShapeError("A", f"expected (*, {geo.n_voxels}), got {A.shape}")
    vol = A.reshape(A.shape[0], geo.nx, geo.ny, geo.nz)
    blocks = []
    for axis in range(3):
        d = np.zeros_like(vol)
        src = [slice(None)] * 4
        dst = [slice(None)] * 4
        src[axis + 1] = slice(1, None)
        dst[axis + 1] = slice(None, -1)
        d[tuple(dst)] = vol[tuple(src)] - vol[tuple(dst)]
        blocks.append(d.reshape(A.shape))
    return np.concatenate(blocks, axis=1)


def sdiff_adjoint(S: SpatialDiffOperator, G):
    G = np.asarray(G, dtype=float)
    geo = S.geometry
    N = geo.n_voxels
    if G.ndim != 2 or G.shape[1] != 3 * N:
        raise ShapeError("G", f"expected (*, {3 * N}), got {G.shape}")
    out = np.zeros((G.shape[0], geo.nx, geo.ny, geo.nz))
    for axis in range(3):
        g = G[:, axis * N:(axis + 1) * N].reshape(out.shape)
        head = [slice(None)] * 4
        tail = [slice(None)] * 4
        head[axis + 1] = slice(None, -1)
        tail[axis + 1] = slice(1, None)
        # adjoint of x[i+1] - x[i] with a zero far-boundary row
        out[tuple(tail)] += g[tuple(head)]
        out[tuple(head)] -= g[tuple(head)]
    return out.reshape(G.shape[0], N)


def project_nonneg(X):
    """Elementwise projection onto the nonnegative orthant."""
    return np.maximum(np.asarray(X, dtype=float), 0.0)


def project_simplex_columns(A):
    """Euclidean projection of every column onto the unit simplex.

    Sort-and-threshold: with the column sorted in decreasing order, the
    threshold is tau = (sum of the rho largest - 1) / rho for the largest
    feasible rho, and the projection is max(a - tau, 0).
    """
    A = np.asarray(A, dtype=float)
    K = A.shape[0]
    u = -np.sort(-A, axis=0)
    css = np.cumsum(u, axis=0) - 1.0
    j = np.arange(1, K + 1)[:, None]
    feasible = u - css / j > 0
    rho = K - np.argmax(feasible[::-1], axis=0) - 1
    tau = css[rho, np.arange(A.shape[1])] / (rho + 1.0)
    return np.maximum(A - tau, 0.0)


def prox_l1_nonneg(B, t):
    """Soft threshold by t after projecting onto the nonnegative orthant.

    For t >= 0 this composition equals the joint prox of t*||.||_1 over the
    nonnegative orthant, i.e. max(b - t, 0).  t may be a scalar or an array
    broadcastable against B (per-entry thresholds).
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ShapeError("t", "threshold must be >= 0")
    return np.maximum(np.maximum(np.asarray(B, dtype=float), 0.0) - t, 0.0)


def _normal_ops(op):
    """(apply, adjoint, domain shape) triple for the supported operand kinds."""
    if isinstance(op, PsfOperator):
        return (lambda x: psf_apply(op, x), lambda x: psf_adjoint(op, x),
                (1, op.geometry.n_voxels))
    if isinstance(op, SpatialDiffOperator):
        return (lambda x: sdiff_apply(op, x), lambda x: sdiff_adjoint(op, x),
                (1, op.geometry.n_voxels))
    mat = np.asarray(op, dtype=float)
    if mat.ndim != 2:
        raise ShapeError("op", "expected a PSF, a diff operator or a 2-D matrix")
    return (lambda x: x @ mat.T, lambda x: x @ mat, (1, mat.shape[1]))


def operator_norm_sq(op, iters=50, tol=1e-6, seed=0):
    """Upper estimate of the squared spectral norm, via power iteration.

    Runs at most `iters` steps or until the Rayleigh quotient changes by less
    than `tol` relatively, then inflates the estimate by 1%.
    """
    apply_fn, adjoint_fn, shape = _normal_ops(op)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(iters):
        w = adjoint_fn(apply_fn(v))
        new = float(np.vdot(v, w).real)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if estimate > 0 and abs(new - estimate) <= tol * abs(new):
            estimate = new
            break
        estimate = new
    return 1.01 * estimate
