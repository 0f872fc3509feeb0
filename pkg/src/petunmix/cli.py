"""Command-line surface tying the pipeline together.

Subcommands: phantom (generate a ground-truth bundle), unmix (run one method
on a bundle), eval (NMSE report and slice maps against a truth bundle) and
compare (full multi-realization sweep).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import baselines, container, evaluate, solver
from .errors import DataError, NumericalError, PetunmixError, UsageError
from .evaluate import ExperimentConfig, MethodOutput
from .model import Hyperparameters, default_frame_times
from .operators import PsfOperator, SpatialDiffOperator
from .phantom import (DEFAULT_SBF_KINETICS, PhantomTruth, assemble_phantom,
                      build_sbf_database)

logger = logging.getLogger(__name__)

KNOWN_METHODS = ("kmeans", "nmf", "lmm", "slmm")


@dataclass
class RunConfig:
    """Flat key-value configuration with documented defaults.

    Unknown keys in a config file are rejected.
    """

    seed: int = 0
    deterministic: bool = True
    method: str = "slmm"
    methods: tuple = KNOWN_METHODS
    alpha: float = 0.010
    beta: float = 0.010
    lam: float = 0.020
    epsilon: float = 0.001
    max_iters: int = 500
    gamma: float = 0.99
    nx: int = 32
    ny: int = 32
    nz: int = 16
    voxel_size_mm: float = 2.0
    n_frames: int = 20
    total_min: float = 60.0
    snr_db: float = 15.0
    fwhm_mm: float = 4.4
    db_size: int = 150
    k3_spread_decades: float = 0.4
    n_v: int = 1
    realizations: int = 20
    out_dir: str = "."
    log_every: int = 0

    @classmethod
    def from_dict(cls, mapping):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**mapping)
        if isinstance(cfg.methods, list):
            cfg.methods = tuple(cfg.methods)
        return cfg

    def to_dict(self):
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d

    def hyperparameters(self):
        return Hyperparameters(alpha=self.alpha, beta=self.beta, lam=self.lam,
                               epsilon=self.epsilon, max_iters=self.max_iters,
                               gamma=self.gamma)

    def geometry(self):
        from .model import ImageGeometry
        return ImageGeometry(self.nx, self.ny, self.nz, self.voxel_size_mm,
                             default_frame_times(self.n_frames, self.total_min))

    def experiment(self):
        return ExperimentConfig(methods=self.methods,
                                hp=self.hyperparameters(),
                                master_seed=self.seed, snr_db=self.snr_db,
                                fwhm_mm=self.fwhm_mm,
                                shape=(self.nx, self.ny, self.nz),
                                voxel_size_mm=self.voxel_size_mm,
                                n_frames=self.n_frames,
                                total_min=self.total_min,
                                db_size=self.db_size,
                                k3_spread_decades=self.k3_spread_decades,
                                n_v=self.n_v,
                                deterministic=self.deterministic,
                                log_every=self.log_every)


def build_phantom_truth(cfg: RunConfig) -> PhantomTruth:
    geometry = cfg.geometry()
    db = build_sbf_database(DEFAULT_SBF_KINETICS, cfg.k3_spread_decades,
                            cfg.db_size, cfg.seed,
                            frame_times_s=geometry.frame_times)
    return assemble_phantom(geometry, db, layout_seed=cfg.seed,
                            snr_db=cfg.snr_db, fwhm_mm=cfg.fwhm_mm,
                            n_v=cfg.n_v)


def cmd_phantom(cfg: RunConfig, out_path=None):
    """Generates and writes a ground-truth bundle."""
    truth = build_phantom_truth(cfg)
    out_path = out_path or os.path.join(cfg.out_dir, "phantom.pux")
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    header = {
        "kind": "phantom",
        "geometry": container.geometry_header(truth.geometry),
        "seed": cfg.seed,
        "snr_db": truth.snr_db if np.isfinite(truth.snr_db) else "inf",
        "snr_convention": "global Frobenius energy ratio",
        "fwhm_mm": truth.fwhm_mm,
        "provenance": cfg.to_dict(),
    }
    sections = {
        "Y_noisy": truth.noisy.data,
        "Y_clean": truth.clean.data,
        "M_true": truth.M_true,
        "A_true": truth.A_true,
        "B_true": truth.B_true,
        "V": truth.V,
        "sbf_region": truth.sbf_region.astype(float),
        "subregion_labels": truth.subregion_labels.astype(float),
    }
    container.write_container(out_path, header, sections)
    logger.info("wrote phantom bundle %s", out_path)
    return out_path


def _truth_from_bundle(path):
    header, sections = container.read_container(path)
    if header.get("kind") != "phantom":
        raise DataError(f"{path}: not a phantom bundle")
    geometry = container.geometry_from_header(header)
    from .model import DynamicImage
    snr = header.get("snr_db", 15.0)
    snr_db = float("inf") if snr == "inf" else float(snr)
    return PhantomTruth(
        geometry=geometry,
        M_true=np.asarray(sections["M_true"], dtype=float),
        A_true=np.asarray(sections["A_true"], dtype=float),
        B_true=np.asarray(sections["B_true"], dtype=float),
        V=np.asarray(sections["V"], dtype=float),
        clean=DynamicImage(geometry, np.asarray(sections["Y_clean"], dtype=float)),
        noisy=DynamicImage(geometry, np.asarray(sections["Y_noisy"], dtype=float)),
        snr_db=snr_db,
        seed=int(header.get("seed", 0)),
        fwhm_mm=float(header.get("fwhm_mm", 0.0)),
        sbf_region=np.asarray(sections["sbf_region"], dtype=float) > 0.5,
        subregion_labels=np.asarray(sections["subregion_labels"], dtype=float
                                    ).astype(int),
        b_means=np.zeros(4),
    )


def cmd_unmix(cfg: RunConfig, input_path, out_path=None, basis_path=None):
    """Runs one method on a bundle's noisy image and writes the estimates."""
    if cfg.method not in KNOWN_METHODS:
        raise UsageError(f"unknown method {cfg.method!r}; "
                         f"choose from {', '.join(KNOWN_METHODS)}")
    header, sections = container.read_container(input_path)
    geometry = container.geometry_from_header(header)
    name = "Y_noisy" if "Y_noisy" in sections else "Y"
    Y = container.image_from_sections(header, sections, name)

    if basis_path is not None:
        _, basis_sections = container.read_container(basis_path)
        if "V" not in basis_sections:
            raise DataError(f"{basis_path}: no V section")
        V = np.asarray(basis_sections["V"], dtype=float)
    elif "V" in sections:
        V = np.asarray(sections["V"], dtype=float)
    else:
        V = np.zeros((Y.data.shape[0], 0))
    if V.shape[0] != Y.data.shape[0]:
        raise DataError(f"basis has {V.shape[0]} frames, image has "
                        f"{Y.data.shape[0]}")

    hp = cfg.hyperparameters()
    psf = PsfOperator.gaussian(geometry, cfg.fwhm_mm)
    S = SpatialDiffOperator(geometry)
    K = int(np.asarray(sections["M_true"]).shape[1]) if "M_true" in sections else 4
    nominal = (np.asarray(sections["M_true"], dtype=float)[:, 0]
               if "M_true" in sections else None)

    t0 = time.perf_counter()
    out_sections = {}
    if cfg.method == "kmeans":
        km = baselines.kmeans_init(Y.data, K, cfg.seed, sbf_reference=nominal)
        A = np.zeros((K, Y.data.shape[1]))
        A[km.labels, np.arange(Y.data.shape[1])] = 1.0
        out_sections.update(M=km.centroids, A=A)
        cost_history = [km.inertia]
    elif cfg.method == "nmf":
        res = baselines.normalize_nmf(
            baselines.nmf_multiplicative(Y.data, K, cfg.seed, tol=hp.epsilon))
        out_sections.update(M=res.W, A=res.Hc)
        cost_history = res.cost_history
    else:
        km = baselines.kmeans_init(Y.data, K, cfg.seed, sbf_reference=nominal)
        opts = solver.SolverOptions(mode=cfg.method, hp=hp,
                                    deterministic=cfg.deterministic,
                                    log_every=cfg.log_every)
        M, A, B, cost_history = solver.solve(Y, np.maximum(km.centroids, 0.0),
                                             V, psf, S, opts)
        out_sections.update(M=M, A=A)
        if cfg.method == "slmm":
            out_sections["B"] = B
            out_sections["V"] = V
    wall = time.perf_counter() - t0
    out_sections["cost_history"] = np.asarray(cost_history, dtype=float)

    out_path = out_path or os.path.join(cfg.out_dir, f"result_{cfg.method}.pux")
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    out_header = {
        "kind": "result",
        "method": cfg.method,
        "geometry": container.geometry_header(geometry),
        "seed": cfg.seed,
        "wall_clock_s": wall,
        "provenance": cfg.to_dict(),
    }
    container.write_container(out_path, out_header, out_sections)
    logger.info("wrote %s result %s (%.2fs)", cfg.method, out_path, wall)
    return out_path


def cmd_eval(cfg: RunConfig, truth_path, result_paths, out_dir=None):
    """Scores result files against a truth bundle; writes the NMSE CSV and a
    portable-graymap slice per factor proportion row (values clamped to
    [0, 1], middle z slice)."""
    truth = _truth_from_bundle(truth_path)
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    outputs = {}
    for path in result_paths:
        header, sections = container.read_container(path)
        if "M" not in sections or "A" not in sections:
            raise DataError(f"{path}: missing M or A section")
        method = header.get("method", os.path.basename(path))
        out = MethodOutput(M=np.asarray(sections["M"], dtype=float),
                           A=np.asarray(sections["A"], dtype=float))
        if "B" in sections and "V" in sections:
            out.B = np.asarray(sections["B"], dtype=float)
            out.V = np.asarray(sections["V"], dtype=float)
        outputs[method] = out

    scores = evaluate.score_run(truth, outputs)
    csv_path = os.path.join(out_dir, "nmse.csv")
    lines = ["method,variable,mean,variance,R"]
    for method in outputs:
        for variable in evaluate.VARIABLES:
            val = scores[method][variable]
            cell = "-" if np.isnan(val) else repr(float(val))
            lines.append(f"{method},{variable},{cell},{repr(0.0)},1")
    tmp = csv_path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, csv_path)

    geo = truth.geometry
    z = geo.nz // 2
    for method, out in outputs.items():
        for k in range(out.A.shape[0]):
            plane = out.A[k].reshape(geo.shape)[:, :, z].T
            container.write_pgm(
                os.path.join(out_dir, f"{method}_factor{k + 1}_z{z}.pgm"), plane)
    logger.info("wrote %s and %d slice maps", csv_path,
                sum(out.A.shape[0] for out in outputs.values()))
    return csv_path


def cmd_compare(cfg: RunConfig, out_dir=None):
    """End-to-end sweep: phantom, all methods over R noise realizations,
    aggregated report.  Per-realization checkpoints make the sweep resumable."""
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    config = cfg.experiment()
    report = evaluate.run_experiment(config, cfg.realizations,
                                     checkpoint_dir=os.path.join(out_dir,
                                                                 "checkpoints"))
    report_path = os.path.join(out_dir, "report.csv")
    report.to_csv(report_path)
    logger.info("wrote report %s", report_path)
    return report_path


class _Parser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting with code 2."""

    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="petunmix",
                     description="Dynamic PET factor analysis by unmixing")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="JSON config file")
        p.add_argument("--seed", type=int, metavar="U64")
        p.add_argument("--deterministic", action="store_true", default=None)
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--log-every", type=int, metavar="N")

    p = sub.add_parser("phantom", help="generate a ground-truth bundle")
    common(p)
    p.add_argument("--snr", metavar="DB|inf")

    p = sub.add_parser("unmix", help="run one method on a bundle")
    common(p)
    p.add_argument("input", help="input container file")
    p.add_argument("--method", choices=KNOWN_METHODS)
    p.add_argument("--basis", metavar="PATH",
                   help="container providing the variability basis V")

    p = sub.add_parser("eval", help="score results against a truth bundle")
    common(p)
    p.add_argument("truth", help="phantom bundle")
    p.add_argument("results", nargs="+", help="result container files")

    p = sub.add_parser("compare", help="full multi-realization sweep")
    common(p)
    p.add_argument("--snr", metavar="DB|inf")
    p.add_argument("--realizations", type=int, metavar="R")

    return parser


def _parse_snr(text):
    if text is None:
        return None
    if text.strip().lower() in ("inf", "+inf", "infinity"):
        return float("inf")
    try:
        return float(text)
    except ValueError as exc:
        raise UsageError(f"invalid --snr value {text!r}") from exc


def _load_config(args):
    mapping = {}
    if args.config:
        try:
            with open(args.config) as fh:
                mapping = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid config JSON: {exc}") from exc
    cfg = RunConfig.from_dict(mapping)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic is not None:
        cfg.deterministic = args.deterministic
    if args.out is not None:
        cfg.out_dir = args.out
    if args.log_every is not None:
        cfg.log_every = args.log_every
    snr = _parse_snr(getattr(args, "snr", None))
    if snr is not None:
        cfg.snr_db = snr
    if getattr(args, "method", None):
        cfg.method = args.method
    if getattr(args, "realizations", None) is not None:
        cfg.realizations = args.realizations
    return cfg


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args)
        if args.command == "phantom":
            cmd_phantom(cfg)
        elif args.command == "unmix":
            cmd_unmix(cfg, args.input, basis_path=args.basis)
        elif args.command == "eval":
            cmd_eval(cfg, args.truth, args.results)
        elif args.command == "compare":
            cmd_compare(cfg)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (PetunmixError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
