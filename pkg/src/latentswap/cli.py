"""Command-line interface.

    latentswap <command> [--config path] [--key value ...]

Commands: invert, swap, insert, multi-swap, trace-dump. Any configuration key
can be passed as a --key value (or --key=value) override; overrides win over
the config file. Exit codes: 0 success, 2 configuration error, 3 numeric or
tolerance failure.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, NumericError
from .pipeline import COMMANDS, RUNNERS, PipelineConfig


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentswap",
        description="targeted diffusion-variable swapping on small images")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=f"run the {name} pipeline")
        cmd.add_argument("--config", default=None, help="flat key=value config file")
    return parser


def parse_overrides(extra: list[str]) -> dict[str, str]:
    """Turn trailing --key value / --key=value pairs into a raw mapping."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or len(token) <= 2:
            raise ConfigError(f"expected --key value, got {token!r}")
        body = token[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override --{body} is missing its value")
            key, value = body, extra[i + 1]
            i += 2
        out[key] = value
    return out


def main(argv=None) -> int:
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = parse_overrides(extra)
        config = PipelineConfig.load(args.config, overrides)
        written = RUNNERS[args.command](config)
        for path in written:
            print(f"wrote {path}")
        return 0
    except ConfigError as e:
        print(f"error (config): {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error (numeric): {e}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as e:
        print(f"error (config): {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
