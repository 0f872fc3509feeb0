"""NMSE scoring and the multi-realization experiment runner."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import baselines, solver
from .errors import DataError, ShapeError
from .model import (DynamicImage, Hyperparameters, ImageGeometry,
                    default_frame_times)
from .operators import PsfOperator, SpatialDiffOperator
from .phantom import PhantomTruth, add_noise

logger = logging.getLogger(__name__)

VARIABLES = ("A1", "A2K", "M1_tilde", "M2K", "B")


def nmse(estimate, truth):
    """Normalized mean square error ||est - truth||_F^2 / ||truth||_F^2."""
    est = np.asarray(estimate, dtype=float)
    ref = np.asarray(truth, dtype=float)
    if est.shape != ref.shape:
        raise ShapeError("estimate", f"expected {ref.shape}, got {est.shape}")
    denom = float(np.sum(ref * ref))
    if denom == 0.0:
        raise DataError("NMSE is undefined for a zero-norm ground truth")
    diff = est - ref
    return float(np.sum(diff * diff)) / denom


@dataclass
class MethodOutput:
    """Factor/proportion estimates of one method, ready for scoring.

    B and V are present only for methods that model variability.
    """

    M: np.ndarray
    A: np.ndarray
    B: np.ndarray | None = None
    V: np.ndarray | None = None
    cost_history: list = field(default_factory=list)


def score_run(truth: PhantomTruth, outputs):
    """Per-method, per-variable NMSE map for one realization.

    Factor matching is applied first.  The spatially varying specific-binding
    estimate uses the matched factor plus the method's variability expansion
    when it has one; methods without variability replicate their single
    specific-binding TAC across voxels.  B is scored only when emitted and
    the matched specific-binding slot is the variability-carrying one;
    otherwise the cell is not applicable (NaN).
    """
    scores = {}
    m1_tilde_true = truth.m1_tilde
    for name, out in outputs.items():
        perm = baselines.match_factors(out.M, truth.M_true)
        M_hat = out.M[:, perm]
        A_hat = out.A[perm, :]
        if out.B is not None and out.V is not None and perm[0] == 0:
            m1_hat = M_hat[:, [0]] + out.V @ out.B
            b_score = nmse(out.B, truth.B_true)
        else:
            m1_hat = np.repeat(M_hat[:, [0]], truth.geometry.n_voxels, axis=1)
            b_score = float("nan")
        scores[name] = {
            "A1": nmse(A_hat[0], truth.A_true[0]),
            "A2K": nmse(A_hat[1:], truth.A_true[1:]),
            "M1_tilde": nmse(m1_hat, m1_tilde_true),
            "M2K": nmse(M_hat[:, 1:], truth.M_true[:, 1:]),
            "B": b_score,
        }
    return scores


@dataclass
class ExperimentConfig:
    """Everything needed to regenerate the phantom and run the sweep."""

    methods: tuple = ("kmeans", "nmf", "lmm", "slmm")
    hp: Hyperparameters = field(default_factory=Hyperparameters)
    master_seed: int = 0
    snr_db: float = 15.0
    fwhm_mm: float = 4.4
    shape: tuple = (32, 32, 16)
    voxel_size_mm: float = 2.0
    n_frames: int = 20
    total_min: float = 60.0
    db_size: int = 150
    k3_spread_decades: float = 0.4
    n_v: int = 1
    deterministic: bool = True
    log_every: int = 0

    def geometry(self):
        return ImageGeometry(*self.shape, self.voxel_size_mm,
                             default_frame_times(self.n_frames, self.total_min))

    def snapshot(self):
        d = asdict(self)
        d["hp"] = asdict(self.hp)
        return d


@dataclass
class ExperimentReport:
    """Aggregated NMSE means and population variances over realizations."""

    rows: list                  # (method, variable, mean, variance)
    R: int
    master_seed: int
    config: dict
    variance_convention: str = "population (divide by R)"

    def cell(self, method, variable):
        for m, v, mean, var in self.rows:
            if m == method and v == variable:
                return mean, var
        raise KeyError((method, variable))

    def to_csv(self, path):
        write_report_csv(self, path)


def _fmt(x):
    if isinstance(x, float) and np.isnan(x):
        return "-"
    return repr(float(x))


def write_report_csv(report: ExperimentReport, path):
    """CSV with one row per method x variable and the config snapshot in a
    leading comment block; not-applicable cells are written as '-'."""
    lines = ["# variance convention: " + report.variance_convention]
    snap = json.dumps(report.config, sort_keys=True, separators=(",", ":"))
    lines.append("# config: " + snap)
    lines.append("method,variable,mean,variance,R,seed")
    for method, variable, mean, var in report.rows:
        lines.append(",".join([method, variable, _fmt(mean), _fmt(var),
                               str(report.R), str(report.master_seed)]))
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def run_methods(truth: PhantomTruth, noisy: DynamicImage, hp: Hyperparameters,
                methods, seeds, deterministic=True, log_every=0):
    """Runs each requested method on one noisy realization.

    The k-means centroids (role-ordered using the nominal specific-binding
    TAC, which is an input of the variability-aware model) initialize the
    factor matrices of the iterative methods.
    """
    geometry = truth.geometry
    psf = PsfOperator.gaussian(geometry, truth.fwhm_mm)
    S = SpatialDiffOperator(geometry)
    K = truth.M_true.shape[1]
    nominal = truth.M_true[:, 0]

    km = baselines.kmeans_init(noisy.data, K, seeds["kmeans"],
                               sbf_reference=nominal)
    M0 = np.maximum(km.centroids, 0.0)
    outputs = {}
    for method in methods:
        if method == "kmeans":
            A = np.zeros((K, noisy.data.shape[1]))
            A[km.labels, np.arange(noisy.data.shape[1])] = 1.0
            outputs[method] = MethodOutput(M=km.centroids.copy(), A=A)
        elif method == "nmf":
            res = baselines.normalize_nmf(
                baselines.nmf_multiplicative(noisy.data, K, seeds["nmf"],
                                             tol=hp.epsilon))
            outputs[method] = MethodOutput(M=res.W, A=res.Hc,
                                           cost_history=res.cost_history)
        elif method in ("lmm", "slmm"):
            opts = solver.SolverOptions(mode=method, hp=hp,
                                        deterministic=deterministic,
                                        log_every=log_every)
            M, A, B, history = solver.solve(noisy, M0, truth.V, psf, S, opts)
            out = MethodOutput(M=M, A=A, cost_history=history)
            if method == "slmm":
                out.B = B
                out.V = truth.V
            outputs[method] = out
        else:
            raise DataError(f"unknown method {method!r}")
    return outputs


def realization_seeds(master_seed, R):
    """Stable per-realization seed derivation from the master seed."""
    children = np.random.SeedSequence(master_seed).spawn(R)
    per_real = []
    for child in children:
        sub = child.spawn(3)
        per_real.append({"noise": sub[0], "kmeans": sub[1], "nmf": sub[2]})
    return per_real


def run_realization(truth: PhantomTruth, config: ExperimentConfig, seeds):
    """Noise injection, all methods and scoring for one realization."""
    noisy = add_noise(truth.clean, config.snr_db, seeds["noise"])
    outputs = run_methods(truth, noisy, config.hp, config.methods, seeds,
                          deterministic=config.deterministic,
                          log_every=config.log_every)
    scored = score_run(truth, outputs)
    histories = {m: out.cost_history for m, out in outputs.items()}
    return scored, histories


def aggregate(per_realization, methods, R, master_seed, config_snapshot):
    """Means and population variances per method x variable, order-independent
    (sorted accumulation over realization index)."""
    rows = []
    for method in methods:
        for variable in VARIABLES:
            vals = np.array([per_realization[r][method][variable]
                             for r in sorted(range(R))])
            if np.all(np.isnan(vals)):
                rows.append((method, variable, float("nan"), float("nan")))
            else:
                rows.append((method, variable, float(vals.mean()),
                             float(vals.var())))
    return ExperimentReport(rows=rows, R=R, master_seed=master_seed,
                            config=config_snapshot)


def run_experiment(config: ExperimentConfig, R, truth=None,
                   checkpoint_dir=None):
    """Full sweep: R noise realizations of one clean phantom, every method,
    aggregated into an ExperimentReport.

    When checkpoint_dir is given, per-realization scores are stored as JSON
    and reused on resume; aggregation always reads back the stored values so
    a resumed sweep reproduces the uninterrupted report exactly.  A method
    failure is recorded as NaN cells for that realization, not a crash.
    """
    if R < 1:
        raise DataError("need at least one realization")
    if truth is None:
        truth = _build_truth(config)
    seeds = realization_seeds(config.master_seed, R)
    per_real = {}
    for r in range(R):
        ckpt = None
        if checkpoint_dir is not None:
            os.makedirs(checkpoint_dir, exist_ok=True)
            ckpt = os.path.join(checkpoint_dir, f"realization_{r:04d}.json")
            if os.path.exists(ckpt):
                with open(ckpt) as fh:
                    per_real[r] = _scores_from_json(json.load(fh))
                continue
        try:
            scored, histories = run_realization(truth, config, seeds[r])
        except Exception:
            logger.exception("realization %d failed; recording NaN cells", r)
            scored = {m: {v: float("nan") for v in VARIABLES}
                      for m in config.methods}
            histories = {}
        if ckpt is not None:
            payload = {"scores": _scores_to_json(scored),
                       "cost_histories": histories}
            tmp = ckpt + ".tmp"
            with open(tmp, "w") as fh:
                json.dump(payload, fh, sort_keys=True)
            os.replace(tmp, ckpt)
            with open(ckpt) as fh:
                scored = _scores_from_json(json.load(fh))
        per_real[r] = scored
    return aggregate(per_real, config.methods, R, config.master_seed,
                     config.snapshot())


def _scores_to_json(scored):
    return {m: {v: (None if np.isnan(x) else x) for v, x in vars_.items()}
            for m, vars_ in scored.items()}


def _scores_from_json(payload):
    scores = payload["scores"] if "scores" in payload else payload
    return {m: {v: (float("nan") if x is None else float(x))
                for v, x in vars_.items()}
            for m, vars_ in scores.items()}


def _build_truth(config: ExperimentConfig):
    from .phantom import DEFAULT_SBF_KINETICS, assemble_phantom, build_sbf_database

    geometry = config.geometry()
    db = build_sbf_database(DEFAULT_SBF_KINETICS, config.k3_spread_decades,
                            config.db_size, config.master_seed,
                            frame_times_s=geometry.frame_times)
    return assemble_phantom(geometry, db, layout_seed=config.master_seed,
                            snr_db=float("inf"), fwhm_mm=config.fwhm_mm,
                            n_v=config.n_v)
