"""
Command-line entry point.

    stochmatch <command> --config <file> [--seed N] [--out DIR]

Exit status is 0 on success, 1 on invalid input or a failed run and 2 on a
usage error.
"""

import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from . import __version__
from .errors import StochMatchError
from .io import load_config
from .models import RunConfig
from .runner import COMMANDS, run
from .settings import get_settings

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stochmatch", description="Stochastic landmark and image matching"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=sorted(COMMANDS), help="What to run")
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="Override optimizer.seed")
    parser.add_argument("--out", default=None, help="Override output_dir")
    return parser


def apply_overrides(config: RunConfig, seed: Optional[int], out: Optional[str]) -> RunConfig:
    """
    Merge command-line values into a loaded configuration and revalidate.

    Raises:
        ValidationError: If the merged configuration is invalid
    """
    data = config.model_dump(by_alias=True)
    if seed is not None:
        data["optimizer"]["seed"] = seed
    if out is not None:
        data["output_dir"] = out
    return RunConfig.model_validate(data)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=get_settings().log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = apply_overrides(load_config(args.config, args.command), args.seed, args.out)
    except (StochMatchError, ValidationError) as e:
        logger.error("Invalid configuration %s: %s", args.config, e)
        return 1
    except OSError as e:
        logger.error("Cannot read %s: %s", args.config, e)
        return 1
    try:
        return run(config)
    except Exception as e:
        logger.error("Unhandled exception in '%s': %s", args.command, e, exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
