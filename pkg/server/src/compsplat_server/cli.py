"""Command line entry point for the guidance server."""

from __future__ import annotations

import argparse
import logging
import sys

from .plugins import PluginError, build_plugin
from .server import GuidanceServer

_LOG_LEVELS = ("debug", "info", "warning", "error")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="compsplat-guidance-server",
        description="Serve guidance residuals to splat optimizers over TCP.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="listen for guidance requests")
    serve.add_argument("--port", type=int, required=True, help="TCP port (0 picks one)")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument(
        "--plugin", default="photometric", choices=("photometric", "diffusion")
    )
    serve.add_argument(
        "--targets", default=None, help="directory of stored target views"
    )
    serve.add_argument(
        "--weight", type=float, default=1.0, help="guidance weight sent with responses"
    )
    serve.add_argument("--log-level", default="info", choices=_LOG_LEVELS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        plugin = build_plugin(args.plugin, targets_dir=args.targets, weight=args.weight)
    except (PluginError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    with GuidanceServer(plugin, host=args.host, port=args.port) as server:
        print(f"listening on {server.host}:{server.port}", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
