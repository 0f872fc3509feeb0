"""PALM solver for the penalized unmixing problem.

Each sweep takes one projected-gradient step per block in the order A, M, B,
every block seeing the freshest values of the others:

    A <- P_simplex( A - (gamma / L_A) grad_A )
    M <- P_+( M - (gamma / L_M) grad_M )
    B <- soft_threshold( P_+( B - (gamma / L_B) grad_B ), lam / L_B )

The A block runs first: its update uses the factor matrix of the previous
sweep while the factor update then sees the fresh proportions, which is the
one ordering consistent with the iterate indices of the update rules (and
the one that preserves a well-anchored factor initialization instead of
immediately re-fitting the factors to a poor proportion start).

Step sizes come from per-block Lipschitz majorants; a halving fallback
(doubling L) rejects any block step that would increase the block objective,
so the recorded cost history is non-increasing by construction.

The A block uses a majorant restricted to the simplex tangent space: both
the current iterate and its projection have unit column sums, so the step
increment always has zero column sums and the data-term curvature along it
only involves the row-centered factor matrix (the common TAC mode cancels).
Because the smooth part is exactly quadratic, the usual projected-step
descent argument holds verbatim with this tighter constant, and it is
dramatically tighter when the factor TACs share a large common mode.

The convolution H enters all products through the K-column proportion maps
and the N_v-column variability maps rather than the L-frame image, e.g.
M A H = M (A H) and (model - Y) H^T A^T = (model - Y) (A H)^T, which keeps
the per-iteration convolution count at O(K + N_v) frames.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import operators
from .errors import NumericalError, ShapeError
from .model import DynamicImage, Hyperparameters

logger = logging.getLogger(__name__)

_LIPSCHITZ_FLOOR = 1e-12
_MAX_BACKTRACKS = 20


@dataclass
class SolverState:
    """Current iterates, the (fixed) variability basis and bookkeeping."""

    M: np.ndarray
    A: np.ndarray
    B: np.ndarray
    V: np.ndarray
    iteration: int = 0
    cost_history: list = field(default_factory=list)
    L_M: float = 0.0
    L_A: float = 0.0
    L_B: float = 0.0


@dataclass(frozen=True)
class SolverOptions:
    """mode 'slmm' runs all three blocks; 'lmm' pins B to zero and skips it."""

    mode: str = "slmm"
    hp: Hyperparameters = field(default_factory=Hyperparameters)
    deterministic: bool = True
    log_every: int = 0

    def __post_init__(self):
        if self.mode not in ("slmm", "lmm"):
            raise ShapeError("mode", f"unknown solver mode {self.mode!r}")


def _spectral_norm_small(X):
    """Exact largest singular value of a matrix with one small dimension."""
    if X.size == 0:
        return 0.0
    if X.shape[0] <= X.shape[1]:
        gram = X @ X.T
    else:
        gram = X.T @ X
    return float(np.sqrt(max(np.linalg.eigvalsh(gram)[-1], 0.0)))


def _model_products(M, A, B, V, psf):
    """(AH, BtH, model) with BtH the blurred first-row-scaled variability."""
    AH = operators.psf_apply(psf, A)
    if V.shape[1] > 0:
        BtH = operators.psf_apply(psf, B * A[:1, :])
        model = M @ AH + V @ BtH
    else:
        BtH = np.zeros((0, A.shape[1]))
        model = M @ AH
    return AH, BtH, model


def _grad_M_from(resid, AH, M, M0, beta):
    g = resid @ AH.T
    if beta != 0.0:
        g = g + beta * (M - M0)
    return g


def _grad_A_from(resid, M, V, B, A, psf, S, alpha):
    g = operators.psf_adjoint(psf, M.T @ resid)
    if V.shape[1] > 0:
        w = operators.psf_adjoint(psf, V.T @ resid)
        g[0] += np.sum(B * w, axis=0)
    if alpha != 0.0:
        g = g + alpha * operators.sdiff_adjoint(S, operators.sdiff_apply(S, A))
    return g


def _grad_B_from(resid, V, A, psf):
    return operators.psf_adjoint(psf, V.T @ resid) * A[:1, :]


def grad_M(state: SolverState, Y: DynamicImage, psf, M0, beta):
    """Gradient of the smooth cost w.r.t. the factor TACs."""
    _check_dims(state, Y, M0)
    AH, _, model = _model_products(state.M, state.A, state.B, state.V, psf)
    return _grad_M_from(model - Y.data, AH, state.M, np.asarray(M0, float), beta)


def grad_A(state: SolverState, Y: DynamicImage, psf, S, alpha):
    """Gradient of the smooth cost w.r.t. the proportion maps."""
    _check_dims(state, Y)
    _, _, model = _model_products(state.M, state.A, state.B, state.V, psf)
    return _grad_A_from(model - Y.data, state.M, state.V, state.B, state.A,
                        psf, S, alpha)


def grad_B(state: SolverState, Y: DynamicImage, psf):
    """Gradient of the smooth (data) part of the cost w.r.t. the variability
    coefficients; the l1 penalty is handled by its prox."""
    _check_dims(state, Y)
    _, _, model = _model_products(state.M, state.A, state.B, state.V, psf)
    return _grad_B_from(model - Y.data, state.V, state.A, psf)


def _check_dims(state, Y, M0=None):
    L, K = state.M.shape
    if Y.data.shape[0] != L:
        raise ShapeError("Y", f"expected {L} frames, got {Y.data.shape[0]}")
    if state.A.shape != (K, Y.data.shape[1]):
        raise ShapeError("A", f"expected ({K}, {Y.data.shape[1]}), got {state.A.shape}")
    if state.B.shape != (state.V.shape[1], state.A.shape[1]):
        raise ShapeError("B", f"expected ({state.V.shape[1]}, {state.A.shape[1]}), "
                              f"got {state.B.shape}")
    if M0 is not None and np.asarray(M0).shape != (L, K):
        raise ShapeError("M0", f"expected ({L}, {K}), got {np.asarray(M0).shape}")


def lipschitz_estimates(state: SolverState, psf, S, hp: Hyperparameters):
    """Per-block gradient Lipschitz majorants (L_M, L_A, L_B).

    L_M = ||A H||_2^2 + beta            (beta term needed for a valid bound)
    L_A = (||M||_2 + ||V||_2 max_n ||b_n||)^2 ||H||_2^2 + alpha ||S||_2^2
    L_B = ||V||_2^2 max_n a_{1,n}^2 ||H||_2^2

    each floored at 1e-12.
    """
    h2 = _psf_norm_sq(psf)
    AH = operators.psf_apply(psf, state.A)
    L_M = _spectral_norm_small(AH) ** 2 + hp.beta
    norm_M = _spectral_norm_small(state.M)
    norm_V = _spectral_norm_small(state.V)
    b_colmax = float(np.sqrt(np.max(np.sum(state.B ** 2, axis=0)))) if state.B.size else 0.0
    L_A = (norm_M + norm_V * b_colmax) ** 2 * h2
    if hp.alpha != 0.0:
        L_A += hp.alpha * _sdiff_norm_sq(S)
    a1_max_sq = float(np.max(state.A[0] ** 2)) if state.A.size else 0.0
    L_B = norm_V ** 2 * a1_max_sq * h2
    return (max(L_M, _LIPSCHITZ_FLOOR), max(L_A, _LIPSCHITZ_FLOOR),
            max(L_B, _LIPSCHITZ_FLOOR))


_norm_cache = {}


def _psf_norm_sq(psf):
    if psf.mode == "identity":
        return 1.01
    key = ("psf", id(psf))
    if key not in _norm_cache:
        _norm_cache[key] = operators.operator_norm_sq(psf)
    return _norm_cache[key]


def _sdiff_norm_sq(S):
    key = ("sdiff", id(S))
    if key not in _norm_cache:
        _norm_cache[key] = operators.operator_norm_sq(S)
    return _norm_cache[key]


def _data_term(model, Ydata):
    resid = model - Ydata
    return 0.5 * float(np.sum(resid * resid))


def _phi(A, S):
    G = operators.sdiff_apply(S, A)
    return 0.5 * float(np.sum(G * G))


def _psi(M, M0):
    D = M - M0
    return 0.5 * float(np.sum(D * D))


def palm_iterate(state: SolverState, Y: DynamicImage, psf, S, M0,
                 opts: SolverOptions) -> SolverState:
    """One full PALM sweep (M, A, then B); returns the new state.

    Feasibility holds exactly after every block: M >= 0, A columns on the
    simplex, B >= 0.  Appends the post-sweep cost to the history.
    """
    hp = opts.hp
    M0 = np.asarray(M0, dtype=float)
    _check_dims(state, Y, M0)
    M, A, B, V = state.M, state.A, state.B, state.V
    Ydata = Y.data
    gamma = hp.gamma
    h2 = _psf_norm_sq(psf)
    s2 = _sdiff_norm_sq(S) if hp.alpha != 0.0 else 0.0
    norm_V = _spectral_norm_small(V)

    AH, BtH, model = _model_products(M, A, B, V, psf)
    data = _data_term(model, Ydata)
    phi = _phi(A, S) if hp.alpha != 0.0 else 0.0
    psi = _psi(M, M0)
    omega = float(np.sum(np.abs(B)))

    # ----- A block -----
    resid = model - Ydata
    g = _grad_A_from(resid, M, V, B, A, psf, S, hp.alpha)
    # tangent-restricted majorant: increments of the projected step have zero
    # column sums, so only the row-centered factor matrix contributes.  The
    # data Hessian also splits voxel-wise, so each column gets its own step
    # from the local factor-plus-variability operator norm (the simplex
    # projection is column-separable, which keeps the scaled-metric descent
    # argument intact).
    M_centered = M - M.mean(axis=1, keepdims=True)
    s_base = _spectral_norm_small(M_centered)
    K = M.shape[1]
    if V.shape[1] > 0:
        vb_norm = np.sqrt(np.sum((V @ B) ** 2, axis=0)) * np.sqrt(1.0 - 1.0 / K)
    else:
        vb_norm = 0.0
    L_A_cols = np.maximum((s_base + vb_norm) ** 2 * h2 + hp.alpha * s2,
                          _LIPSCHITZ_FLOOR)
    for _ in range(_MAX_BACKTRACKS):
        A_new = operators.project_simplex_columns(A - (gamma / L_A_cols) * g)
        AH_new, BtH_new, model_new = _model_products(M, A_new, B, V, psf)
        data_new = _data_term(model_new, Ydata)
        phi_new = _phi(A_new, S) if hp.alpha != 0.0 else 0.0
        if data_new + hp.alpha * phi_new <= data + hp.alpha * phi:
            A, AH, BtH, model = A_new, AH_new, BtH_new, model_new
            data, phi = data_new, phi_new
            break
        L_A_cols = L_A_cols * 2.0
    L_A = float(np.max(L_A_cols))

    # ----- M block -----
    g = _grad_M_from(model - Ydata, AH, M, M0, hp.beta)
    L_M = max(_spectral_norm_small(AH) ** 2 + hp.beta, _LIPSCHITZ_FLOOR)
    var_part = V @ BtH if V.shape[1] else 0.0
    for _ in range(_MAX_BACKTRACKS):
        M_new = np.maximum(M - (gamma / L_M) * g, 0.0)
        model_new = M_new @ AH + var_part
        data_new = _data_term(model_new, Ydata)
        psi_new = _psi(M_new, M0)
        if data_new + hp.beta * psi_new <= data + hp.beta * psi:
            M, model, data, psi = M_new, model_new, data_new, psi_new
            break
        L_M *= 2.0

    # ----- B block (skipped in LMM mode) -----
    L_B = state.L_B
    if opts.mode == "slmm" and V.shape[1] > 0:
        resid = model - Ydata
        g = _grad_B_from(resid, V, A, psf)
        a1_max_sq = float(np.max(A[0] ** 2))
        L_B = max(norm_V ** 2 * a1_max_sq * h2, _LIPSCHITZ_FLOOR)
        for _ in range(_MAX_BACKTRACKS):
            B_new = operators.prox_l1_nonneg(B - (gamma / L_B) * g, hp.lam / L_B)
            BtH_new = operators.psf_apply(psf, B_new * A[:1, :])
            model_new = M @ AH + V @ BtH_new
            data_new = _data_term(model_new, Ydata)
            omega_new = float(np.sum(np.abs(B_new)))
            if data_new + hp.lam * omega_new <= data + hp.lam * omega:
                B, BtH, model = B_new, BtH_new, model_new
                data, omega = data_new, omega_new
                break
            L_B *= 2.0

    total = data + hp.alpha * phi + hp.beta * psi + hp.lam * omega
    if not np.isfinite(total):
        raise NumericalError(
            f"cost became non-finite at iteration {state.iteration + 1}")
    history = state.cost_history + [total]
    new_state = replace(state, M=M, A=A, B=B, iteration=state.iteration + 1,
                        cost_history=history, L_M=L_M, L_A=L_A, L_B=L_B)
    if opts.log_every > 0 and new_state.iteration % opts.log_every == 0:
        logger.info("iter=%d cost=%.12e data=%.12e phi=%.12e psi=%.12e omega=%.12e",
                    new_state.iteration, total, data, phi, psi, omega)
    return new_state


def initial_state(Y: DynamicImage, M0, V):
    """Feasible starting point: M = P_+(M0), uniform A, B = 0."""
    M0 = np.asarray(M0, dtype=float)
    V = np.asarray(V, dtype=float)
    K = M0.shape[1]
    N = Y.data.shape[1]
    A = np.full((K, N), 1.0 / K)
    B = np.zeros((V.shape[1], N))
    return SolverState(M=np.maximum(M0, 0.0), A=A, B=B, V=V)


def solve(Y: DynamicImage, M0, V, psf, S, opts: SolverOptions,
          A0=None, B0=None):
    """Runs PALM until the relative cost decrease falls below epsilon or the
    iteration cap is reached.

    Returns (M, A, B, cost_history).  M0 is both the starting factor matrix
    and the anchor of the similarity penalty; A starts uniform at 1/K and B
    at zero unless explicit A0/B0 overrides are given.
    """
    M0 = np.asarray(M0, dtype=float)
    if not np.all(np.isfinite(Y.data)):
        raise NumericalError("observation contains non-finite values")
    if not np.all(np.isfinite(M0)):
        raise NumericalError("M0 contains non-finite values")
    if M0.shape[0] != Y.data.shape[0]:
        raise ShapeError("M0", f"expected {Y.data.shape[0]} rows, got {M0.shape[0]}")
    hp = opts.hp
    state = initial_state(Y, M0, V)
    if A0 is not None:
        state.A = np.asarray(A0, dtype=float)
    if B0 is not None:
        state.B = np.asarray(B0, dtype=float)
    _check_dims(state, Y, M0)

    AH, BtH, model = _model_products(state.M, state.A, state.B, state.V, psf)
    J = (_data_term(model, Y.data)
         + hp.alpha * (_phi(state.A, S) if hp.alpha != 0.0 else 0.0)
         + hp.beta * _psi(state.M, M0)
         + hp.lam * float(np.sum(np.abs(state.B))))
    state.cost_history.append(J)

    for _ in range(hp.max_iters):
        previous = state.cost_history[-1]
        state = palm_iterate(state, Y, psf, S, M0, opts)
        current = state.cost_history[-1]
        if abs(previous - current) < hp.epsilon * max(previous, 1e-300):
            break
    return state.M, state.A, state.B, list(state.cost_history)
