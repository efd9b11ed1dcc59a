"""Command-line entry points: run, calibrate, mot."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import evaluation as ev
from . import geometry as geo
from . import scenario as sc
from .errors import EdgeCloudError, ParseError, ValidationError

EXIT_OK, EXIT_FAILURE, EXIT_INVALID = 0, 1, 2


def _resolve_scenario(arg: str) -> Path:
    p = Path(arg)
    if p.exists():
        return p
    builtin = sc.builtin_path(arg)
    if builtin.exists():
        return builtin
    raise ParseError(f"no scenario file {arg!r} and no built-in named so "
                     f"(built-ins: {', '.join(sc.builtin_names())})")


def cmd_run(args) -> int:
    config = sc.load(_resolve_scenario(args.scenario))
    out = Path(args.out)
    result = sc.run(config, seed=args.seed, rates=args.rates,
                    mask_dir=out / "masks" if args.dump_masks else None)
    result.write(out)
    bw = result.bandwidth
    print(f"{config.name}: {len(config.cameras)} nodes, {config.duration_ms / 1000:g} s virtual")
    print(f"bandwidth {bw.total_mb:.3f} MB of {bw.baseline_mb:.3f} MB baseline, "
          f"reduction {bw.reduction_pct:.2f}%")
    print(f"commands issued: {len(result.cloud.command_log)}")
    if result.mot is not None:
        print(ev.metrics_csv(result.mot), end="")
    print(f"bundle written to {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    corrs = geo.read_correspondences(args.correspondences)
    h = geo.estimate_homography(corrs)
    rmse = geo.reprojection_rmse(h, corrs)
    print(f"{len(corrs)} correspondences, reprojection RMSE {rmse:.4f} m")
    if rmse > args.max_rmse:
        print(f"error: RMSE above the {args.max_rmse} m acceptance threshold; "
              "homography not written", file=sys.stderr)
        return EXIT_INVALID
    geo.write_homography(h, args.out)
    print(f"homography written to {args.out}")
    return EXIT_OK


def cmd_mot(args) -> int:
    gt = ev.parse_positions_csv(Path(args.gt).read_text(encoding="utf-8"))
    hyp = ev.parse_positions_csv(Path(args.hyp).read_text(encoding="utf-8"))
    report = ev.compute_mot(gt, hyp, threshold=args.threshold)
    print(ev.metrics_csv(report), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="edgecloud",
                                 description="Edge-cloud surveillance simulator and tools.")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario and write the output bundle")
    r.add_argument("scenario", help="scenario JSON file or built-in name "
                                    "(demo_fig5, demo_bandwidth, empty)")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, default=None, help="override the master seed")
    r.add_argument("--rates", choices=["table2", "fig6", "fig6_rates"], default=None)
    r.add_argument("--dump-masks", action="store_true",
                   help="write one foreground mask per camera per second as PGM")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("calibrate", help="estimate a homography from correspondences")
    c.add_argument("correspondences")
    c.add_argument("--out", required=True)
    c.add_argument("--max-rmse", type=float, default=geo.DEFAULT_MAX_RMSE_M,
                   help="reject the fit above this ground-plane RMSE in metres")
    c.set_defaults(func=cmd_calibrate)

    m = sub.add_parser("mot", help="CLEAR-MOT metrics between two position CSVs")
    m.add_argument("gt")
    m.add_argument("hyp")
    m.add_argument("--threshold", type=float, default=1.0, help="match distance in metres")
    m.set_defaults(func=cmd_mot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (EdgeCloudError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
