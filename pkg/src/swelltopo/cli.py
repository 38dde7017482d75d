"""Command line entry point: ``swelltopo run|resample|fdcheck``."""
from __future__ import annotations

import argparse
import logging
import re
import sys

from . import driver
from .config import load_config
from .errors import ConfigError, SwellTopoError

log = logging.getLogger("swelltopo")


def parse_resolution(text):
    m = re.fullmatch(r"\s*(-?\d+)\s*[xX]\s*(-?\d+)\s*", text)
    if not m:
        raise ConfigError(f"resolution must look like NxM (got {text!r})")
    nx, ny = int(m.group(1)), int(m.group(2))
    if nx <= 0 or ny <= 0:
        raise ConfigError(f"resolution must be positive (got {text!r})")
    return nx, ny


def build_parser():
    p = argparse.ArgumentParser(prog="swelltopo", description="Topology optimization of swelling gel composites.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="forward solve or optimization described by a config file")
    r.add_argument("config")
    r.add_argument("--output-root", help=f"overrides ${driver.OUTPUT_ROOT_ENV} and the working directory")
    s = sub.add_parser("resample", help="sample a weight snapshot on an NxM raster")
    s.add_argument("snapshot")
    s.add_argument("--res", required=True, help="raster size, e.g. 160x80")
    s.add_argument("--out", help="output directory (default: next to the snapshot)")
    f = sub.add_parser("fdcheck", help="adjoint gradient against central finite differences")
    f.add_argument("config")
    f.add_argument("--output-root")
    f.add_argument("--tolerance", type=float, default=1e-5, help="largest accepted relative error")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            report = driver.run(load_config(args.config), root=args.output_root)
        elif args.command == "fdcheck":
            report = driver.run_fdcheck(load_config(args.config), root=args.output_root, tolerance=args.tolerance)
        else:
            nx, ny = parse_resolution(args.res)
            report = driver.run_resample(args.snapshot, nx, ny, out=args.out)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return exc.exit_code
    except SwellTopoError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    msg = f"{args.command}: {report.status}"
    if report.message:
        msg += f" ({report.message})"
    print(f"{msg}; outputs in {report.out}")
    return report.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
