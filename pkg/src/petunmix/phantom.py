"""Synthetic ground-truth generation.

Tissue kinetics follow a two-tissue compartment model driven by an analytic
plasma input.  A database of specific-binding TACs is generated by varying
the binding rate k3; a principal-component analysis of that database against
its minimum-area curve yields the nominal specific-binding TAC and the
variability basis.  The phantom itself is a smooth four-tissue partition of
the voxel grid with a connected high-uptake region split into subregions of
distinct variability level, blurred by the scanner PSF and corrupted by
white Gaussian noise at a prescribed SNR.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm
from scipy.ndimage import gaussian_filter

from .errors import DataError, NumericalError, ShapeError
from .model import (DynamicImage, FactorModel, ImageGeometry, ProportionMaps,
                    VariabilityMaps, forward_model)
from .operators import PsfOperator

# internal kinetics grid step (minutes); the matrix-exponential stepping is
# exact for piecewise-linear plasma input, so this only controls the input
# sampling error
_FINE_STEP_MIN = 0.002


@dataclass(frozen=True)
class PlasmaInput:
    """Analytic arterial input: linear rise times a fast exponential plus two
    slower washout exponentials, zero at t = 0.

    C_p(t) = a1 t e^(-l1 t) + a2 (e^(-l2 t) - e^(-l1 t))
                            + a3 (e^(-l3 t) - e^(-l1 t))

    Rates are per minute.  l1 >= l2, l3 keeps the curve nonnegative.
    """

    a1: float = 20.0
    a2: float = 0.8
    a3: float = 0.35
    l1: float = 3.2
    l2: float = 0.14
    l3: float = 0.012

    def __post_init__(self):
        if min(self.a1, self.a2, self.a3) < 0:
            raise DataError("plasma amplitudes must be nonnegative")
        if self.l1 < max(self.l2, self.l3) or min(self.l1, self.l2, self.l3) < 0:
            raise DataError("plasma decay rates must satisfy l1 >= l2, l3 >= 0")


@dataclass(frozen=True)
class KineticParams:
    """Two-tissue compartment rate constants (per minute) and the plasma
    input driving them."""

    k1: float
    k2: float
    k3: float
    k4: float
    input_params: PlasmaInput = field(default_factory=PlasmaInput)

    def __post_init__(self):
        if min(self.k1, self.k2, self.k3, self.k4) < 0:
            raise DataError("rate constants must be nonnegative")
        if self.k2 + self.k3 + self.k4 <= 0:
            raise DataError("k2 + k3 + k4 must be positive")


# default tissue kinetics; the one-tissue white/gray pairs are chosen so the
# four factor TACs have distinct shapes (early washout vs mid-peak vs the
# accumulating binding TAC vs the sharp blood peak), which keeps the mixing
# matrix well conditioned on the proportion simplex
DEFAULT_SBF_KINETICS = KineticParams(k1=0.65, k2=0.35, k3=0.18, k4=0.06)
DEFAULT_WHITE_KINETICS = KineticParams(k1=0.45, k2=0.50, k3=0.0, k4=0.0)
DEFAULT_GRAY_KINETICS = KineticParams(k1=0.70, k2=0.25, k3=0.0, k4=0.0)


def plasma_input(t_min, params: PlasmaInput):
    """Arterial activity at time t (minutes); vectorized over t."""
    t = np.asarray(t_min, dtype=float)
    e1 = np.exp(-params.l1 * t)
    return (params.a1 * t * e1
            + params.a2 * (np.exp(-params.l2 * t) - e1)
            + params.a3 * (np.exp(-params.l3 * t) - e1))


def _frame_times_min(frame_times_s):
    ft = np.asarray(frame_times_s, dtype=float) / 60.0
    if ft.ndim != 2 or ft.shape[1] != 2:
        raise ShapeError("frame_times", "expected an (L, 2) array")
    return ft


def _step_matrices(k_sets, h):
    """Per-parameter-set exact step operators for the compartment ODE.

    For dC/dt = F C + k1 cp(t) e1 with cp piecewise linear over a step h,
    the augmented matrix exponential of [[F, I, 0], [0, 0, I], [0, 0, 0]] * h
    yields E = e^(Fh), P1 = int e^(F(h-s)) ds and P2 = int e^(F(h-s)) s ds,
    giving the update C+ = E C + g1 cp(t) + g2 cp(t+h).  Degenerate
    eigenvalue configurations need no special casing.
    """
    D = k_sets.shape[0]
    E = np.empty((D, 2, 2))
    g1 = np.empty((D, 2))
    g2 = np.empty((D, 2))
    eye = np.eye(2)
    for d in range(D):
        k1, k2, k3, k4 = k_sets[d]
        F = np.array([[-(k2 + k3), k4], [k3, -k4]])
        blk = np.zeros((6, 6))
        blk[:2, :2] = F
        blk[:2, 2:4] = eye
        blk[2:4, 4:6] = eye
        phi = expm(blk * h)
        E[d] = phi[:2, :2]
        P1 = phi[:2, 2:4]
        P2 = phi[:2, 4:6]
        g2[d] = k1 * (P2[:, 0] / h)
        g1[d] = k1 * P1[:, 0] - g2[d]
    return E, g1, g2


def _tissue_tacs_batch(k_sets, input_params, frame_times_min):
    """Frame-averaged total tissue activity for a batch of rate sets.

    Returns a (D, L) array.  The free and bound compartments are stepped
    jointly on a fine uniform grid with the exact matrix-exponential update;
    frame averages come from the trapezoid cumulative integral.
    """
    k_sets = np.asarray(k_sets, dtype=float)
    ft = np.asarray(frame_times_min, dtype=float)
    t_end = ft[-1, 1]
    n = max(int(np.ceil(t_end / _FINE_STEP_MIN)), 2)
    h = t_end / n
    grid = np.arange(n + 1) * h
    cp = plasma_input(grid, input_params)

    E, g1, g2 = _step_matrices(k_sets, h)
    D = k_sets.shape[0]
    C = np.zeros((D, 2))
    total = np.empty((D, n + 1))
    total[:, 0] = 0.0
    e00, e01 = E[:, 0, 0], E[:, 0, 1]
    e10, e11 = E[:, 1, 0], E[:, 1, 1]
    for j in range(n):
        c0 = e00 * C[:, 0] + e01 * C[:, 1] + g1[:, 0] * cp[j] + g2[:, 0] * cp[j + 1]
        c1 = e10 * C[:, 0] + e11 * C[:, 1] + g1[:, 1] * cp[j] + g2[:, 1] * cp[j + 1]
        C[:, 0] = c0
        C[:, 1] = c1
        total[:, j + 1] = c0 + c1

    cum = np.zeros((D, n + 1))
    np.cumsum((total[:, 1:] + total[:, :-1]) * (0.5 * h), axis=1, out=cum[:, 1:])

    def integral_at(t):
        x = np.clip(t / h, 0.0, n)
        i0 = np.minimum(x.astype(int), n - 1)
        frac = x - i0
        return cum[:, i0] + frac * (cum[:, i0 + 1] - cum[:, i0])

    starts, ends = ft[:, 0], ft[:, 1]
    tacs = (integral_at(ends) - integral_at(starts)) / (ends - starts)
    return np.maximum(tacs, 0.0)


def solve_2tcm(params: KineticParams, frame_times_s):
    """Frame-averaged tissue TAC (free + bound compartments) for one
    parameter set; frame times are (start, end) pairs in seconds."""
    ft = _frame_times_min(frame_times_s)
    k = np.array([[params.k1, params.k2, params.k3, params.k4]])
    return _tissue_tacs_batch(k, params.input_params, ft)[0]


def frame_average_plasma(input_params: PlasmaInput, frame_times_s):
    """Frame averages of the plasma input itself (the blood TAC)."""
    ft = _frame_times_min(frame_times_s)
    tacs = np.empty(len(ft))
    for i, (a, b) in enumerate(ft):
        grid = np.linspace(a, b, max(int(np.ceil((b - a) / _FINE_STEP_MIN)), 2) + 1)
        vals = plasma_input(grid, input_params)
        tacs[i] = np.trapezoid(vals, grid) / (b - a)
    return tacs


@dataclass
class SbfDatabase:
    """Kinetically generated specific-binding TACs, varying the binding rate."""

    tacs: np.ndarray           # L x D
    k3_values: np.ndarray      # length D
    aucs: np.ndarray           # length D, integral of each TAC over the scan
    nominal_index: int         # argmin of aucs
    frame_times_s: np.ndarray
    base: KineticParams
    seed: int
    mean_auc: float = 0.0
    min_auc: float = 0.0

    @property
    def nominal(self):
        return self.tacs[:, self.nominal_index]

    @property
    def size(self):
        return self.tacs.shape[1]


def build_sbf_database(base: KineticParams, k3_spread_decades, D, seed,
                       frame_times_s=None):
    """D specific-binding TACs with k3 drawn log-uniformly over the given
    number of decades centered on the base value."""
    if k3_spread_decades < 0:
        raise DataError("k3 spread must be >= 0 decades")
    if D < 2:
        raise DataError("database needs at least 2 TACs")
    if frame_times_s is None:
        from .model import default_frame_times
        frame_times_s = default_frame_times()
    ft = _frame_times_min(frame_times_s)
    rng = np.random.default_rng(seed)
    exponents = rng.uniform(-0.5, 0.5, D) * k3_spread_decades
    k3 = base.k3 * 10.0 ** exponents
    k_sets = np.column_stack([np.full(D, base.k1), np.full(D, base.k2),
                              k3, np.full(D, base.k4)])
    tacs = _tissue_tacs_batch(k_sets, base.input_params, ft).T
    durations = ft[:, 1] - ft[:, 0]
    aucs = durations @ tacs
    return SbfDatabase(tacs=tacs, k3_values=k3, aucs=aucs,
                       nominal_index=int(np.argmin(aucs)),
                       frame_times_s=np.asarray(frame_times_s, dtype=float),
                       base=base, seed=seed,
                       mean_auc=float(aucs.mean()), min_auc=float(aucs.min()))


def extract_variability_basis(db: SbfDatabase, n_v, rule="min_auc"):
    """Nominal specific-binding TAC and variability basis from the database.

    rule 'min_auc' takes the minimum-area TAC as nominal (all database
    projections onto the leading direction are then nonnegative); rule
    'percentile' averages the TACs with area between the 5th and 10th
    percentile, for noisy learning sets.  V holds the leading principal
    directions of (tacs - nominal), unit-norm columns, signs fixed so the
    mean database projection is nonnegative.
    """
    if n_v >= db.size:
        raise DataError(f"n_v={n_v} requires a database larger than {db.size}")
    if n_v < 1:
        raise DataError("n_v must be >= 1")
    if rule == "min_auc":
        nominal = db.nominal.copy()
    elif rule == "percentile":
        lo, hi = np.percentile(db.aucs, [5.0, 10.0])
        mask = (db.aucs >= lo) & (db.aucs <= hi)
        if not mask.any():
            mask = db.aucs <= hi
        nominal = db.tacs[:, mask].mean(axis=1)
    else:
        raise DataError(f"unknown nominal rule {rule!r}")

    resid = db.tacs - nominal[:, None]
    scale = np.linalg.norm(resid)
    if scale <= 1e-12 * max(1.0, np.linalg.norm(db.tacs)):
        raise DataError("database has no variability; basis is ill-defined")
    U, s, _ = np.linalg.svd(resid, full_matrices=False)
    V = U[:, :n_v].copy()
    proj = V.T @ resid
    flip = proj.mean(axis=1) < 0
    V[:, flip] *= -1.0
    if rule == "min_auc":
        lead = V[:, 0] @ resid
        if lead.min() < -1e-9:
            raise DataError("leading projections are negative; nominal TAC is "
                            "not a lower envelope of the database")
    return V, nominal


@dataclass
class PhantomTruth:
    """Ground truth bundle: factors, maps, basis, clean and noisy images."""

    geometry: ImageGeometry
    M_true: np.ndarray         # L x K, column 0 = nominal specific-binding TAC
    A_true: np.ndarray         # K x N simplex columns
    B_true: np.ndarray         # N_v x N, zero outside the high-uptake region
    V: np.ndarray              # L x N_v
    clean: DynamicImage
    noisy: DynamicImage
    snr_db: float
    seed: int
    fwhm_mm: float
    sbf_region: np.ndarray     # bool, length N: where variability may live
    subregion_labels: np.ndarray   # int, length N: 0 outside, 1..n_sub inside
    b_means: np.ndarray        # per-subregion mean coefficient levels

    @property
    def m1_tilde(self):
        """Spatially varying specific-binding TACs, one column per voxel."""
        return self.M_true[:, [0]] + self.V @ self.B_true


def add_noise(clean: DynamicImage, snr_db, seed):
    """White Gaussian noise at the requested global SNR (Frobenius energy
    ratio over the full dynamic image); infinite SNR returns the clean data."""
    if np.isinf(snr_db):
        return DynamicImage(clean.geometry, clean.data.copy())
    energy = float(np.sum(clean.data ** 2))
    if energy == 0.0:
        raise DataError("clean image has zero energy; SNR undefined")
    L, N = clean.data.shape
    sigma = np.sqrt(energy / (L * N * 10.0 ** (snr_db / 10.0)))
    rng = np.random.default_rng(seed)
    return DynamicImage(clean.geometry,
                        clean.data + sigma * rng.standard_normal((L, N)))


def _role_masks(geometry: ImageGeometry):
    """Crisp anatomical scaffolding on the voxel grid.

    Role order: 0 = specific-binding region (connected off-center blob),
    1 = white matter (central core plus the outermost shell), 2 =
    non-specific gray matter (the band in between), 3 = blood (a vessel
    running through the volume).  The whole field of view is tissue.
    """
    nx, ny, nz = geometry.shape
    x, y, z = np.meshgrid(np.linspace(-1, 1, nx), np.linspace(-1, 1, ny),
                          np.linspace(-1, 1, nz), indexing="ij")
    sbf = (((x + 0.35) / 0.50) ** 2 + ((y - 0.30) / 0.45) ** 2
           + (z / 0.62) ** 2) <= 1.0
    white_core = (((x / 0.66) ** 2 + ((y + 0.10) / 0.60) ** 2
                   + (z / 0.70) ** 2) <= 1.0) & ~sbf
    outer_shell = ((x / 0.92) ** 2 + (y / 0.88) ** 2 + (z / 0.95) ** 2) > 1.0
    blood = ((x - 0.25) ** 2 + (y + 0.55) ** 2) <= 0.07
    white = (white_core | outer_shell) & ~blood & ~sbf
    gray = ~(sbf | white | blood)
    return [sbf, white, gray, blood], (x, y, z)


def _soft_fields(geometry, masks, rng, contrast=2.0, mix_scale=1.5,
                 bias_sigma=2.0, noise_sigma=3.0):
    """Smooth simplex-valued tissue fractions.

    Each role gets a score field (smoothed crisp indicator times `contrast`
    plus a smooth random texture); the softmax over roles yields fractions
    that sum to one, are strictly positive everywhere and mix deeply at the
    region boundaries while each role still dominates its own core.
    """
    scores = np.empty((len(masks),) + geometry.shape)
    for c, mask in enumerate(masks):
        texture = gaussian_filter(rng.standard_normal(geometry.shape),
                                  noise_sigma)
        texture *= mix_scale / max(texture.std(), 1e-12)
        scores[c] = contrast * gaussian_filter(mask.astype(float),
                                               bias_sigma) + texture
    e = np.exp(scores - scores.max(axis=0, keepdims=True))
    return (e / e.sum(axis=0, keepdims=True)).reshape(len(masks), -1)


def _split_subregions(region_mask, coords, n_subregions):
    """Splits the high-uptake region into quadrants around its centroid."""
    if n_subregions != 4:
        raise DataError("only 4 variability subregions are supported")
    x, y, _ = coords
    if not region_mask.any():
        raise DataError("geometry too small: high-uptake region is empty")
    cx = x[region_mask].mean()
    cy = y[region_mask].mean()
    sub = np.zeros(region_mask.shape, dtype=int)
    quadrant = (x >= cx).astype(int) * 2 + (y >= cy).astype(int)
    sub[region_mask] = quadrant[region_mask] + 1
    counts = [(sub == r).sum() for r in range(1, n_subregions + 1)]
    if min(counts) == 0:
        raise DataError("geometry too small to host 4 variability subregions")
    return sub


def assemble_phantom(geometry: ImageGeometry, db: SbfDatabase, layout_seed,
                     snr_db=15.0, fwhm_mm=4.4, n_v=1, nominal_rule="min_auc",
                     contrast=2.0,
                     white_kinetics=DEFAULT_WHITE_KINETICS,
                     gray_kinetics=DEFAULT_GRAY_KINETICS) -> PhantomTruth:
    """Builds the full synthetic ground truth for one phantom realization.

    Factor roles: slot 0 is the specific-binding TAC (nominal from the
    database), then white matter, non-specific gray matter and blood.  The
    variability coefficients are drawn per subregion from clipped Gaussians
    whose means span the database projection range (sd = 10% of the mean) and
    are zero outside the high-uptake region.  `contrast` controls how much
    each tissue dominates its core versus mixing with its neighbors.
    """
    if not np.allclose(np.asarray(geometry.frame_times), db.frame_times_s):
        raise ShapeError("geometry", "frame grid differs from the database's")
    V, nominal = extract_variability_basis(db, n_v, rule=nominal_rule)
    ft = geometry.frame_times
    white = solve_2tcm(white_kinetics, ft)
    gray = solve_2tcm(gray_kinetics, ft)
    blood = frame_average_plasma(db.base.input_params, ft)
    M_true = np.column_stack([nominal, white, gray, blood])

    ss = np.random.SeedSequence(layout_seed)
    children = ss.spawn(6)
    masks, coords = _role_masks(geometry)
    A_true = _soft_fields(geometry, masks, np.random.default_rng(children[0]),
                          contrast=contrast)
    sub = _split_subregions(masks[0], coords, 4).reshape(-1)
    region = masks[0].reshape(-1)

    proj = V[:, 0] @ (db.tacs - nominal[:, None])
    b_means = np.maximum(np.quantile(proj, [0.10, 0.40, 0.65, 0.90]), 0.0)

    B_true = np.zeros((n_v, geometry.n_voxels))
    for r in range(4):
        rng = np.random.default_rng(children[r + 1])
        mask = sub == r + 1
        draws = rng.normal(b_means[r], 0.10 * b_means[r], size=int(mask.sum()))
        B_true[0, mask] = np.maximum(draws, 0.0)

    psf = PsfOperator.gaussian(geometry, fwhm_mm)
    fm = FactorModel(M_true, V)
    clean = forward_model(fm, ProportionMaps(A_true), VariabilityMaps(B_true), psf)
    noisy = add_noise(clean, snr_db, children[5])
    if not np.all(np.isfinite(noisy.data)):
        raise NumericalError("phantom generation produced non-finite values")
    return PhantomTruth(geometry=geometry, M_true=M_true, A_true=A_true,
                        B_true=B_true, V=V, clean=clean, noisy=noisy,
                        snr_db=float(snr_db), seed=int(layout_seed),
                        fwhm_mm=float(fwhm_mm), sbf_region=region,
                        subregion_labels=sub, b_means=b_means)
