"""Core data types, the mixing forward model and the penalized cost.

The observation model for a dynamic image Y (L time-frames by N voxels) is

    Y = M A H + [E1 A o V B] H + noise

where M holds one time-activity curve (TAC) per tissue factor (the first
column being the nominal specific-binding TAC), A holds per-voxel factor
proportions on the unit simplex, V is a small basis spanning the spatial
variability of the specific-binding TAC, B holds the nonnegative per-voxel
variability coefficients, H is the scanner point-spread blur applied to
every frame, E1 selects the first factor's proportion row and "o" is the
elementwise product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError
from . import operators


@dataclass(frozen=True)
class ImageGeometry:
    """Voxel grid and acquisition frame layout.

    frame_times holds L (start_s, end_s) pairs in seconds; intervals must be
    ordered and non-overlapping (gaps are allowed).
    """

    nx: int
    ny: int
    nz: int
    voxel_size_mm: float
    frame_times: np.ndarray

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ShapeError("geometry", "voxel counts must be >= 1")
        if self.voxel_size_mm <= 0:
            raise ShapeError("geometry", "voxel size must be positive")
        ft = np.asarray(self.frame_times, dtype=float)
        if ft.ndim != 2 or ft.shape[1] != 2 or ft.shape[0] < 2:
            raise ShapeError("frame_times", "need an (L, 2) array with L >= 2")
        if np.any(ft[:, 1] <= ft[:, 0]):
            raise ShapeError("frame_times", "each frame must have end > start")
        if np.any(ft[1:, 0] < ft[:-1, 1]):
            raise ShapeError("frame_times", "frames must be ordered and disjoint")
        ft.setflags(write=False)
        object.__setattr__(self, "frame_times", ft)

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def n_voxels(self):
        return self.nx * self.ny * self.nz

    @property
    def n_frames(self):
        return len(self.frame_times)

    def frame_durations_s(self):
        return self.frame_times[:, 1] - self.frame_times[:, 0]


def default_frame_times(n_frames=20, total_min=60.0, first_min=1.0, last_min=5.0):
    """Frame grid with durations growing linearly, rescaled to fill total_min.

    Returns an (L, 2) array of (start, end) in seconds.
    """
    durations = np.linspace(first_min, last_min, n_frames)
    durations *= total_min / durations.sum()
    edges = np.concatenate([[0.0], np.cumsum(durations)]) * 60.0
    return np.column_stack([edges[:-1], edges[1:]])


@dataclass(frozen=True)
class DynamicImage:
    """L x N matrix of activity values over a voxel grid.

    Activity units are arbitrary but must be consistent across the pipeline.
    """

    geometry: ImageGeometry
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        L, N = self.geometry.n_frames, self.geometry.n_voxels
        if data.shape != (L, N):
            raise ShapeError("data", f"expected ({L}, {N}), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NumericalError("dynamic image contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def n_frames(self):
        return self.data.shape[0]

    @property
    def n_voxels(self):
        return self.data.shape[1]


@dataclass(frozen=True)
class FactorModel:
    """Factor TACs M (L x K) and variability basis V (L x N_v).

    Column 1 of M is the nominal specific-binding TAC; the variability
    expansion applies to that factor only.  V columns are normalized to unit
    Euclidean norm at construction (zero columns are left untouched so a
    disabled basis can be represented); coefficient matrices B are always
    interpreted w.r.t. the normalized basis.
    """

    M: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        V = np.asarray(self.V, dtype=float)
        if M.ndim != 2:
            raise ShapeError("M", "factor matrix must be 2-D")
        if np.any(M < 0):
            raise ShapeError("M", "factor TACs must be nonnegative")
        if V.ndim != 2 or V.shape[0] != M.shape[0]:
            raise ShapeError("V", f"expected {M.shape[0]} rows, got {V.shape}")
        if V.shape[1] >= M.shape[0]:
            raise ShapeError("V", "variability dimension must be < number of frames")
        norms = np.linalg.norm(V, axis=0)
        nonzero = norms > 0
        V = V.copy()
        V[:, nonzero] /= norms[nonzero]
        M.setflags(write=False)
        V.setflags(write=False)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "V", V)

    @property
    def K(self):
        return self.M.shape[1]

    @property
    def N_v(self):
        return self.V.shape[1]

    @property
    def nominal_sbf(self):
        return self.M[:, 0]


@dataclass(frozen=True)
class ProportionMaps:
    """K x N factor proportions; every column lies on the unit simplex."""

    A: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.ndim != 2:
            raise ShapeError("A", "proportion matrix must be 2-D")
        if np.any(A < 0):
            raise ShapeError("A", "proportions must be nonnegative")
        if np.any(np.abs(A.sum(axis=0) - 1.0) > 1e-9):
            raise ShapeError("A", "columns must sum to 1 within 1e-9")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)

    @property
    def K(self):
        return self.A.shape[0]

    @property
    def n_voxels(self):
        return self.A.shape[1]


@dataclass(frozen=True)
class VariabilityMaps:
    """N_v x N nonnegative variability coefficients."""

    B: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        if B.ndim != 2:
            raise ShapeError("B", "coefficient matrix must be 2-D")
        if np.any(B < 0):
            raise ShapeError("B", "variability coefficients must be nonnegative")
        B.setflags(write=False)
        object.__setattr__(self, "B", B)

    @property
    def N_v(self):
        return self.B.shape[0]

    @property
    def n_voxels(self):
        return self.B.shape[1]


@dataclass(frozen=True)
class Hyperparameters:
    """Penalty weights and stopping controls for the solvers.

    alpha weighs the spatial-smoothness penalty on A, beta the similarity
    penalty anchoring M to its initial estimate, lam the l1 sparsity penalty
    on B.  epsilon is the relative cost-decrease stopping threshold and gamma
    the step-safety factor in (0, 1].
    """

    alpha: float = 0.010
    beta: float = 0.010
    lam: float = 0.020
    epsilon: float = 0.001
    max_iters: int = 500
    gamma: float = 0.99

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ShapeError("hyperparameters", "penalty weights must be >= 0")
        if self.epsilon <= 0:
            raise ShapeError("hyperparameters", "epsilon must be > 0")
        if not (0.0 < self.gamma <= 1.0):
            raise ShapeError("hyperparameters", "gamma must lie in (0, 1]")
        if self.max_iters < 1:
            raise ShapeError("hyperparameters", "max_iters must be >= 1")


def _check_model_dims(fm, A, B, psf):
    if A.shape[0] != fm.M.shape[1]:
        raise ShapeError("A", f"expected {fm.M.shape[1]} rows, got {A.shape[0]}")
    if B.shape[0] != fm.V.shape[1]:
        raise ShapeError("B", f"expected {fm.V.shape[1]} rows, got {B.shape[0]}")
    if B.shape[1] != A.shape[1]:
        raise ShapeError("B", f"expected {A.shape[1]} columns, got {B.shape[1]}")
    if A.shape[1] != psf.geometry.n_voxels:
        raise ShapeError(
            "psf", f"geometry has {psf.geometry.n_voxels} voxels, A has {A.shape[1]}"
        )


def mixing_matrix(M, A, V, B):
    """Noiseless pre-blur image M A + (V B) scaled by the first proportion row.

    E1 A is never materialized: the variability image V B is multiplied by a
    broadcast of A's first row.
    """
    X = M @ A
    if V.shape[1] > 0:
        X = X + V @ (B * A[:1, :])
    return X


def forward_model(fm: FactorModel, A: ProportionMaps, B: VariabilityMaps, psf) -> DynamicImage:
    """Evaluates the noiseless observation model M A H + [E1 A o V B] H.

    With B = 0 and an identity blur this reduces exactly to the plain linear
    mixing model M A.
    """
    _check_model_dims(fm, A.A, B.B, psf)
    X = mixing_matrix(fm.M, A.A, fm.V, B.B)
    return DynamicImage(psf.geometry, operators.psf_apply(psf, X))


def cost(fm, A, B, Y: DynamicImage, psf, S, M0, hp: Hyperparameters) -> float:
    """Penalized least-squares objective.

    0.5 * ||Y - model||_F^2 + alpha * 0.5 * ||A S||_F^2
    + beta * 0.5 * ||M - M0||_F^2 + lam * sum|B|

    The l1 term is the entrywise sum of absolute values.
    """
    model = forward_model(fm, A, B, psf)
    if Y.data.shape != model.data.shape:
        raise ShapeError("Y", f"expected {model.data.shape}, got {Y.data.shape}")
    M0 = np.asarray(M0, dtype=float)
    if M0.shape != fm.M.shape:
        raise ShapeError("M0", f"expected {fm.M.shape}, got {M0.shape}")
    resid = Y.data - model.data
    value = 0.5 * float(np.sum(resid * resid))
    if hp.alpha != 0.0:
        G = operators.sdiff_apply(S, A.A)
        value += hp.alpha * 0.5 * float(np.sum(G * G))
    if hp.beta != 0.0:
        D = fm.M - M0
        value += hp.beta * 0.5 * float(np.sum(D * D))
    if hp.lam != 0.0:
        value += hp.lam * float(np.sum(np.abs(B.B)))
    if not np.isfinite(value):
        raise NumericalError("cost is not finite")
    return value
