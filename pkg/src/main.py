"""Command-line entry point: sample, fit and render Roth curve shapes"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from app.config import settings
from app.errors import NumericalError
from app.main import configure_logging
from app.models import ChainSummary, MCMCConfig, PriorModel, ShapeSpecModel, parse_model
from app.services.fitting import FitResult, get_fit_service
from app.storage import storage
from src.metrics import classify_fit, rms_point_distance

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


def _add_mcmc_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--spec", required=True, help="Shape process spec JSON")
    parser.add_argument("--prior", default=None, help="Optional hyperprior JSON (alpha, beta, a_tau, b_tau)")
    parser.add_argument("--iters", type=int, default=settings.default_iterations, help="MCMC iterations")
    parser.add_argument("--burnin", type=int, default=settings.default_burnin, help="Burn-in iterations")
    parser.add_argument("--thin", type=int, default=settings.default_thin, help="Keep every thin-th state")
    parser.add_argument("--seed", type=int, default=settings.default_seed, help="Root RNG seed")
    parser.add_argument("--grid", type=int, default=settings.griddy_grid_size, help="Griddy Gibbs grid size G")
    parser.add_argument("--threads", type=int, default=settings.default_threads, help="Shapes updated in parallel")
    parser.add_argument(
        "--griddy-points-only",
        action="store_true",
        help="Leave the orientation term out of the parameter updates",
    )
    parser.add_argument("--out", default=str(settings.get_output_dir()), help="Output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rothfit", description="Multiscale Roth curve shape models")
    parser.add_argument("--log-level", default=settings.log_level, help="Logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    sample = sub.add_parser("sample", help="Draw shapes from the random shape process")
    sample.add_argument("--spec", required=True, help="Shape process spec JSON")
    sample.add_argument("--count", type=int, default=1, help="Number of shapes")
    sample.add_argument("--seed", type=int, default=settings.default_seed, help="Root RNG seed")
    sample.add_argument("--samples", type=int, default=512, help="Curve samples per SVG")
    sample.add_argument("--out", default=str(settings.get_output_dir()), help="Output directory")

    points = sub.add_parser("fit-points", help="Fit one shape to a point-cloud CSV")
    points.add_argument("cloud", help="CSV with x,y[,omega,theta] columns")
    _add_mcmc_flags(points)

    image = sub.add_parser("fit-image", help="Fit one shape to the edges of a PGM image")
    image.add_argument("image", help="8-bit PGM (P2 or P5)")
    image.add_argument("--threshold", type=float, default=None, help="Gradient-norm threshold M (default 0.5 max)")
    image.add_argument("--blur", action="store_true", help="3x3 box blur before differencing")
    image.add_argument("--sweep", action="store_true", help="Print point counts at 0.3/0.5/0.7 of the max norm")
    _add_mcmc_flags(image)

    population = sub.add_parser("fit-population", help="Hierarchical fit of a directory of clouds")
    population.add_argument("clouds", help="Directory of cloud CSVs")
    _add_mcmc_flags(population)

    render = sub.add_parser("render", help="Render a polygon JSON as SVG")
    render.add_argument("polygon", help="Polygon JSON")
    render.add_argument("svg", help="Output SVG path")
    render.add_argument("--samples", type=int, default=512, help="Curve samples")
    render.add_argument("--export-csv", default=None, help="Also write the (t, x, y) sample table")

    serve = sub.add_parser("serve", help="Run the HTTP API")
    serve.add_argument("--host", default=settings.host)
    serve.add_argument("--port", type=int, default=settings.port)
    return parser


def _mcmc(args: argparse.Namespace) -> MCMCConfig:
    return parse_model(
        MCMCConfig,
        {
            "iterations": args.iters,
            "burnin": args.burnin,
            "thin": args.thin,
            "seed": args.seed,
            "grid": args.grid,
            "threads": args.threads,
            "orientation_in_griddy": not args.griddy_points_only,
        },
    )


def _prior(args: argparse.Namespace) -> PriorModel:
    if args.prior is None:
        return PriorModel()
    return parse_model(PriorModel, storage.read_json(args.prior))


def _spec(path: str) -> ShapeSpecModel:
    spec = storage.load_spec(path)
    # build once so malformed covariances surface before any sampling
    spec.to_spec()
    return spec


def _label_fit(result: FitResult) -> ChainSummary:
    """Attach a fit-quality label from the point residuals"""
    summary = result.summary
    sigma = 1.0 / np.sqrt(summary.tau_p)
    residuals = [
        rms_point_distance(polygon, cloud.points) / np.sqrt(2.0)
        for polygon, cloud in zip(result.posterior_mean, result.clouds)
    ]
    summary.fit_quality = classify_fit(max(residuals), sigma)
    return summary


def cmd_sample(args: argparse.Namespace) -> int:
    service = get_fit_service()
    spec = _spec(args.spec)
    if args.count < 0:
        raise ValueError(f"count must be non-negative, got {args.count}")
    print(f"seed={args.seed}")
    out = storage.run_dir(args.out)
    for idx, trajectory in enumerate(service.sample(spec, args.count, args.seed)):
        storage.save_trajectory(out / f"shape_{idx:03d}.json", trajectory)
        storage.save_svg(out / f"shape_{idx:03d}.svg", service.render([trajectory.final], args.samples))
    print(f"Wrote {args.count} shape(s) to {out}")
    return EXIT_OK


def _finish_fit(result: FitResult, args: argparse.Namespace) -> int:
    _label_fit(result)
    files = get_fit_service().save_run(result, Path(args.out))
    summary = result.summary
    print(f"tau_p={summary.tau_p:.6g} records={summary.records} fit={summary.fit_quality}")
    print(f"Summary: {files['summary']}")
    return EXIT_OK


def cmd_fit_points(args: argparse.Namespace) -> int:
    mcmc = _mcmc(args)
    print(f"seed={mcmc.seed}")
    cloud = storage.load_cloud(args.cloud)
    result = get_fit_service().fit_points(cloud, _spec(args.spec), _prior(args), mcmc)
    return _finish_fit(result, args)


def cmd_fit_image(args: argparse.Namespace) -> int:
    mcmc = _mcmc(args)
    print(f"seed={mcmc.seed}")
    image = storage.load_pgm(args.image)
    result = get_fit_service().fit_image(
        image, _spec(args.spec), _prior(args), mcmc, threshold=args.threshold, blur=args.blur
    )
    if args.sweep:
        for fraction, count in (result.summary.threshold_sweep or {}).items():
            print(f"threshold {fraction} x max: {count} points")
    return _finish_fit(result, args)


def cmd_fit_population(args: argparse.Namespace) -> int:
    mcmc = _mcmc(args)
    print(f"seed={mcmc.seed}")
    directory = Path(args.clouds)
    if not directory.is_dir():
        raise ValueError(f"{directory} is not a directory")
    clouds = [storage.load_cloud(path) for path in sorted(directory.glob("*.csv"))]
    result = get_fit_service().fit_population(clouds, _spec(args.spec), _prior(args), mcmc)
    print(f"K={result.summary.K} points={result.summary.point_counts}")
    return _finish_fit(result, args)


def cmd_render(args: argparse.Namespace) -> int:
    polygon = storage.load_polygon(args.polygon)
    storage.save_svg(args.svg, get_fit_service().render([polygon], args.samples))
    if args.export_csv:
        storage.save_samples(args.export_csv, polygon, args.samples)
    print(f"Wrote {args.svg}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("app.main:app", host=args.host, port=args.port, reload=settings.debug)
    return EXIT_OK


COMMANDS = {
    "sample": cmd_sample,
    "fit-points": cmd_fit_points,
    "fit-image": cmd_fit_image,
    "fit-population": cmd_fit_population,
    "render": cmd_render,
    "serve": cmd_serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except NumericalError as e:
        logger.error("Numerical failure: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
