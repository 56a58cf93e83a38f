"""Command-line entry point: ``pvlexposure <subcommand> --config FILE``.

Exit codes: 0 ok, 1 oracle check failed, 2 configuration error,
3 insufficient data, 4 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .pipeline import STAGES, InsufficientDataError, NonConvergenceError, OracleFailure, run_all

EXIT_OK, EXIT_ORACLE, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2, 3, 4

logger = logging.getLogger("pvlexposure")


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected section.key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvlexposure", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(STAGES) + ["all"]:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="INI configuration file")
        p.add_argument("--output-dir", "-o", help="override paths.output_dir")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override any configuration field (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        overrides = _parse_set(args.set)
        if args.output_dir:
            overrides["paths.output_dir"] = args.output_dir
        if args.seed is not None:
            overrides["pipeline.seed"] = str(args.seed)
        cfg = load_config(args.config, overrides)
        if args.command == "all":
            run_all(cfg)
        else:
            STAGES[args.command](cfg)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        logger.error("configuration error: cannot access %s: %s", exc.filename, exc.strerror)
        return EXIT_CONFIG
    except InsufficientDataError as exc:
        logger.error("insufficient data: %s", exc)
        return EXIT_DATA
    except NonConvergenceError as exc:
        logger.error("%s", exc)
        return EXIT_CONVERGENCE
    except OracleFailure as exc:
        logger.error("%s", exc)
        return EXIT_ORACLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
