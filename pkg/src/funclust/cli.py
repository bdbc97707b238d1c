"""Command line entry point: ``funclust {ingest,fit,sweep,synth,report}``.

Exit codes: 0 success, 1 partial sweep failure, 2 input error, 3 numerical
failure. Diagnostics go to standard error; artifacts go to files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import io
from . import modelselect as ms
from .emfit import DEFAULT_PENALTY, FitConfig, FitReport, fit
from .errors import FunclustError, NumericalError
from .mixmodel import CurveData
from .preprocess import DEFAULT_WARP_TARGET, FIGURE_COVARIATE_ORDER, PrepareReport, prepare_all, standardize_covariates
from .splinebasis import BasisSpec, eval_basis_matrix
from .synth import simulate, well_separated_spec

logger = logging.getLogger("funclust")

EXIT_OK, EXIT_PARTIAL, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2, 3
GRID_POINTS = 101


@dataclass
class IngestOptions:
    use_covariates: bool | None = None
    covariate_columns: tuple = FIGURE_COVARIATE_ORDER
    warp_target: float | None = DEFAULT_WARP_TARGET
    min_obs: int = 4
    landmark_policy: str = "bypass"
    center: bool = True
    standardize: bool = False


@dataclass
class Ingested:
    observations: list
    report: PrepareReport
    digests: dict = field(default_factory=dict)
    covariate_names: tuple = ()
    covariate_scaling: dict = field(default_factory=dict)


def ingest(series_path, covariates_path=None, options: IngestOptions | None = None) -> Ingested:
    """Read and prepare the input files."""
    options = options or IngestOptions()
    raws = io.read_series(series_path)
    digests = {"series": io.sha256_file(series_path)}
    sidecar = {}
    if covariates_path is not None:
        sidecar = io.read_sidecar(covariates_path)
        digests["sidecar"] = io.sha256_file(covariates_path)
        io.attach_landmarks(raws, sidecar)
    use_cov = options.use_covariates
    if use_cov is None:
        use_cov = covariates_path is not None
    order = tuple(options.covariate_columns) if use_cov else ()
    obs, report = prepare_all(
        raws,
        sidecar,
        covariate_order=order,
        warp_target=options.warp_target,
        min_obs=options.min_obs,
        landmark_policy=options.landmark_policy,
        center=options.center,
    )
    logger.info("ingested %d subjects, dropped %d, retained %d", report.total, report.dropped, report.retained)
    scaling = {}
    if options.standardize and order:
        obs, center, scale = standardize_covariates(obs)
        scaling = {"center": dict(zip(order, center.tolist())), "scale": dict(zip(order, scale.tolist()))}
    return Ingested(obs, report, digests, order, scaling)


def _fit_seed(seed: int, G: int) -> int:
    return int(np.random.SeedSequence([seed, G]).generate_state(1)[0])


@dataclass
class GResult:
    G: int
    report: FitReport | None = None
    distortion: float = float("nan")
    error: str | None = None
    numerical: bool = False


def _fit_one(data: CurveData, base: FitConfig, G: int, restarts: int) -> GResult:
    seed = _fit_seed(base.seed, G)
    h = base.h if base.h is None else min(base.h, min(G - 1, data.p))
    config = FitConfig(**{**base.to_dict(), "G": G, "h": h, "seed": seed})
    try:
        rep = fit(data, config)
        eta = ms.eta_hats(data, rep.params, rep.posterior.probs)
        dist = ms.distortion(eta, G, restarts=restarts, seed=seed)
        return GResult(G, rep, dist)
    except NumericalError as exc:
        logger.error("fit failed for G=%d: %s", G, exc)
        return GResult(G, error=str(exc), numerical=True)
    except FunclustError as exc:
        logger.error("fit failed for G=%d: %s", G, exc)
        return GResult(G, error=str(exc))


def _write_fit(out: Path, data: CurveData, res: GResult) -> None:
    rep = res.report
    params = rep.params
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "params": params.to_dict(),
        "basis": {"n_knots": data.spec.n_knots, "degree": data.spec.degree},
        "covariate_names": list(data.covariate_names),
        "loglik": rep.loglik,
        "iterations": rep.iterations,
        "converged": rep.converged,
        "reseeded": list(rep.reseeded),
        "config": rep.config.to_dict(),
    }
    io.write_json(out / "params.json", doc)
    G = params.G
    post = rep.posterior
    io.write_csv(
        out / "posterior.csv",
        ["subject_id", *[f"p{k + 1}" for k in range(G)], "assignment", "max_prob"],
        [(str(sid), *post.probs[i], int(post.assignment[i]) + 1, post.max_prob[i]) for i, sid in enumerate(data.ids)],
    )
    grid = np.linspace(0.0, 1.0, GRID_POINTS)
    curves = params.cluster_means() @ eval_basis_matrix(grid, data.spec).T
    io.write_csv(
        out / "mean_curves.csv",
        ["t", *[f"cluster{k + 1}" for k in range(G)]],
        [(grid[j], *curves[:, j]) for j in range(GRID_POINTS)],
    )
    labels = [str(j + 1) for j in range(data.p)] + list(data.covariate_names)
    for k in range(G):
        io.write_matrix(out / f"cov_cluster{k + 1}.csv", params.latent_covs[k], labels)
    io.write_csv(
        out / "trace.csv",
        ["iteration", "loglik"],
        [(j, ll) for j, ll in enumerate(rep.loglik_trace)],
    )


def run_fit(data: CurveData, config: FitConfig, G_sweep, out_dir, b: float = ms.DEFAULT_B,
            threads: int = 1, distortion_restarts: int = 20, manifest_extra: dict | None = None) -> int:
    """Fit every ``G`` in ``G_sweep`` and write all artifacts under ``out_dir``.

    Returns the process exit code.
    """
    out = io.as_path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Gs = sorted(set(int(G) for G in G_sweep))
    if threads > 1 and len(Gs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda G: _fit_one(data, config, G, distortion_restarts), Gs))
    else:
        results = [_fit_one(data, config, G, distortion_restarts) for G in Gs]

    sweep = ms.SelectionSweep(b=b, N=data.N)
    for res in results:
        if res.report is None:
            continue
        _write_fit(out / f"G{res.G:02d}", data, res)
        rep = res.report
        m = ms.parameter_count(res.G, data.p, rep.params.h, data.r)
        sweep.add(res.G, rep.loglik, m, rep.params.sigma_sum, res.distortion)
    sweep.finalize()
    status = {res.G: ("ok" if res.report is not None else "failed") for res in results}
    rows = []
    for res in results:
        row = sweep.per_G.get(res.G)
        if row is None:
            nan = float("nan")
            rows.append((res.G, nan, 0, nan, nan, nan, nan, nan, nan, "failed"))
            continue
        rows.append((row.G, row.loglik, row.m, row.aic, row.bic, row.sigma_sum, row.distortion,
                     row.rel_change, row.delta, status[res.G]))
    io.write_csv(
        out / "selection.csv",
        ["G", "loglik", "m", "aic", "bic", "sigma_sum", "distortion", "rel_change", "distortion_delta", "status"],
        rows,
    )
    manifest = {
        "tool": "funclust",
        "version": __version__,
        "config": config.to_dict(),
        "G_sweep": Gs,
        "seed": config.seed,
        "fit_seeds": {str(G): _fit_seed(config.seed, G) for G in Gs},
        "b": b,
        "distortion_restarts": distortion_restarts,
        "n_subjects": data.N,
        "covariate_names": list(data.covariate_names),
        "failures": {str(r.G): r.error for r in results if r.error},
    }
    manifest.update(manifest_extra or {})
    artifacts = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest["artifacts"] = {str(p.relative_to(out)): io.sha256_file(p) for p in artifacts}
    io.write_json(out / "manifest.json", manifest)

    failed = [r for r in results if r.report is None]
    if not failed:
        return EXIT_OK
    if len(failed) < len(results):
        return EXIT_PARTIAL
    return EXIT_NUMERICAL if any(r.numerical for r in failed) else EXIT_INPUT


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def parse_clusters(text: str) -> list[int]:
    """``"3"``, ``"2,3,5"`` or ``"2-11"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError(f"bad cluster list {text!r}")
    return sorted(set(out))


def _add_input_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--series", required=True, help="long CSV with subject_id,idx,value")
    p.add_argument("--sidecar", help="per-subject CSV with subject_id,min_ar,landmark,...")
    p.add_argument("--covariates", dest="covariates", action="store_true", default=None,
                   help="model the covariates (default: on when a sidecar is given)")
    p.add_argument("--no-covariates", dest="covariates", action="store_false")
    p.add_argument("--covariate-columns", default=",".join(FIGURE_COVARIATE_ORDER),
                   help="comma-separated covariate order; mean_gray and width are derived from the series")
    p.add_argument("--warp-target", type=float, default=DEFAULT_WARP_TARGET)
    p.add_argument("--no-warp", action="store_true", help="skip landmark warping")
    p.add_argument("--min-obs", type=int, default=4)
    p.add_argument("--landmark-policy", choices=("bypass", "exclude"), default="bypass")
    p.add_argument("--no-center", action="store_true", help="keep each series' mean level")
    p.add_argument("--standardize-covariates", action="store_true",
                   help="z-score covariates across subjects (default: raw scale)")
    p.add_argument("--n-knots", type=int, default=6)


def _add_fit_args(p: argparse.ArgumentParser, clusters_default: str) -> None:
    p.add_argument("--clusters", type=parse_clusters, default=parse_clusters(clusters_default))
    p.add_argument("--h", type=int, default=None)
    p.add_argument("--tol", type=float, default=0.001)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--init", default="kmeans:10")
    p.add_argument("--penalty", type=float, default=DEFAULT_PENALTY)
    p.add_argument("--inner-sweeps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--b", type=float, default=ms.DEFAULT_B)
    p.add_argument("--distortion-restarts", type=int, default=20)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="funclust", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"funclust {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="prepare input files and report drops")
    _add_input_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="fit a single number of clusters")
    _add_input_args(p)
    _add_fit_args(p, "2")

    p = sub.add_parser("sweep", help="fit and score a range of cluster counts")
    _add_input_args(p)
    _add_fit_args(p, "2-11")

    p = sub.add_parser("synth", help="write a synthetic data set with known clusters")
    p.add_argument("--clusters", type=int, default=3)
    p.add_argument("--n-subjects", type=int, default=500)
    p.add_argument("--n-covariates", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--min-len", type=int, default=15)
    p.add_argument("--max-len", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="print the selection table of a sweep")
    p.add_argument("run", help="output directory of fit or sweep")
    return parser


def _ingest_from_args(args) -> tuple[Ingested, CurveData]:
    opts = IngestOptions(
        use_covariates=args.covariates,
        covariate_columns=tuple(c.strip() for c in args.covariate_columns.split(",") if c.strip()),
        warp_target=None if args.no_warp else args.warp_target,
        min_obs=args.min_obs,
        landmark_policy=args.landmark_policy,
        center=not args.no_center,
        standardize=args.standardize_covariates,
    )
    ing = ingest(args.series, args.sidecar, opts)
    if not ing.observations:
        raise FunclustError("no subjects left after preprocessing")
    spec = BasisSpec(n_knots=args.n_knots)
    data = CurveData.from_observations(ing.observations, spec, use_covariates=bool(ing.covariate_names))
    return ing, data


def _cmd_ingest(args) -> int:
    ing, data = _ingest_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "ingest_report.json", {**ing.report.as_dict(), "digests": ing.digests,
                                               "covariate_scaling": ing.covariate_scaling})
    rows = [(str(o.subject_id), j, t, v) for o in ing.observations for j, (t, v) in enumerate(zip(o.times, o.values))]
    io.write_csv(out / "prepared.csv", ["subject_id", "idx", "t", "value"], rows)
    if ing.covariate_names:
        io.write_csv(
            out / "prepared_covariates.csv",
            ["subject_id", *ing.covariate_names],
            [(str(o.subject_id), *o.covariates) for o in ing.observations],
        )
    return EXIT_OK


def _cmd_fit(args) -> int:
    ing, data = _ingest_from_args(args)
    base = FitConfig(
        G=max(args.clusters),
        h=args.h,
        max_iters=args.max_iters,
        tol=args.tol,
        penalty_weight=args.penalty,
        inner_sweeps=args.inner_sweeps,
        seed=args.seed,
        **FitConfig.parse_init(args.init),
    )
    extra = {
        "inputs": ing.digests,
        "ingest": ing.report.as_dict(),
        "options": {
            "warp_target": None if args.no_warp else args.warp_target,
            "min_obs": args.min_obs,
            "landmark_policy": args.landmark_policy,
            "center": not args.no_center,
            "n_knots": args.n_knots,
            "standardize_covariates": args.standardize_covariates,
        },
    }
    if ing.covariate_scaling:
        extra["covariate_scaling"] = ing.covariate_scaling
    return run_fit(data, base, args.clusters, args.out, b=args.b, threads=args.threads,
                   distortion_restarts=args.distortion_restarts, manifest_extra=extra)


def _cmd_synth(args) -> int:
    spec = well_separated_spec(
        G=args.clusters,
        N=args.n_subjects,
        r=args.n_covariates,
        sigma=args.sigma,
        separation=args.separation,
        n_range=(args.min_len, args.max_len),
    )
    sim = simulate(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_series(out / "series.csv", sim.observations)
    names = [f"x{j + 1}" for j in range(spec.r)]
    io.write_sidecar(out / "sidecar.csv", sim.observations, names)
    io.write_csv(out / "truth.csv", ["subject_id", "cluster"],
                 [(str(o.subject_id), int(k) + 1) for o, k in zip(sim.observations, sim.labels)])
    io.write_json(out / "synth_spec.json", {
        "seed": args.seed,
        "weights": spec.weights.tolist(),
        "means": spec.means.tolist(),
        "latent_covs": spec.latent_covs.tolist(),
        "sigma2": spec.sigma2,
        "sigma2_x": spec.sigma2_x,
        "covariate_means": None if spec.covariate_means is None else spec.covariate_means.tolist(),
        "N": spec.N,
        "n_range": list(spec.n_range),
        "covariate_names": names,
    })
    return EXIT_OK


def _cmd_report(args) -> int:
    path = Path(args.run) / "selection.csv"
    if not path.exists():
        raise FileNotFoundError(path)
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    cols = ["G", "loglik", "m", "aic", "bic", "distortion", "distortion_delta", "status"]
    print("  ".join(f"{c:>16}" for c in cols))
    for row in rows:
        cells = []
        for c in cols:
            v = row[c]
            try:
                cells.append(f"{float(v):>16.6g}" if c not in ("G", "m", "status") else f"{v:>16}")
            except ValueError:
                cells.append(f"{v:>16}")
        print("  ".join(cells))
    ok = [r for r in rows if r["status"] == "ok"]
    if ok:
        best = min(ok, key=lambda r: float(r["bic"]))
        print(f"lowest BIC at G={best['G']}")
    return EXIT_OK


COMMANDS = {"ingest": _cmd_ingest, "fit": _cmd_fit, "sweep": _cmd_fit, "synth": _cmd_synth, "report": _cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        logger.error("%s", exc)
        return EXIT_NUMERICAL
    except (FunclustError, OSError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
