"""
Command line entry point

    python -m app.main <subcommand> --config PATH [--workers N] [--seed S] [--output DIR]

Exit codes: 0 success, 1 other lab error, 2 invalid configuration,
3 numerical blow-up, 4 Picard iteration without convergence.
"""
import argparse
import logging
import sys
from typing import Dict, List, Optional

from app.config import LOG_LEVEL, load_config
from app.services.errors import BlowUpError, ConfigError, ConvergenceError, LabError
from app.services.experiments import RUNNERS, run_command

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_BLOWUP = 3
EXIT_NOT_CONVERGED = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m app.main",
                                     description="Stochastic Hamiltonian Navier-Stokes experiments on the torus")
    parser.add_argument("subcommand", choices=sorted(RUNNERS))
    parser.add_argument("--config", required=True, help="run configuration (INI)")
    parser.add_argument("--workers", type=int, default=None, help="worker threads for particle updates")
    parser.add_argument("--seed", type=int, default=None, help="override [noise] seed")
    parser.add_argument("--output", default=None, help="override [output] directory")
    parser.add_argument("--log-level", default=LOG_LEVEL, help="logging level (stderr)")
    return parser


def _error_line(key: str, message: str) -> str:
    return f"error key={key} message={message}"


def _print_summary(summary: Dict) -> None:
    print(f"✅ {summary['command']} finished: {summary['directory']}")
    for key, value in summary.items():
        if key in ("command", "directory"):
            continue
        text = f"{value:.6g}" if isinstance(value, float) else str(value)
        print(f"   {key}: {text}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        config = load_config(args.config).with_overrides(seed=args.seed, directory=args.output)
    except ConfigError as e:
        print(_error_line(e.key, e.message), file=sys.stderr)
        print(f"❌ invalid configuration ({e.key})")
        return EXIT_CONFIG

    try:
        summary = run_command(args.subcommand, config, args.workers)
    except ConfigError as e:
        print(_error_line(e.key, e.message), file=sys.stderr)
        print(f"❌ invalid configuration ({e.key})")
        return EXIT_CONFIG
    except BlowUpError as e:
        print(_error_line("blowup", str(e)), file=sys.stderr)
        print(f"❌ {args.subcommand} blew up at step {e.step} (t={e.time:.6g}); partial outputs kept")
        return EXIT_BLOWUP
    except ConvergenceError as e:
        print(_error_line("picard", str(e)), file=sys.stderr)
        print(f"⚠️  {e}")
        return EXIT_NOT_CONVERGED
    except LabError as e:
        print(_error_line(type(e).__name__, str(e)), file=sys.stderr)
        print(f"❌ {args.subcommand} failed: {e}")
        return EXIT_ERROR

    _print_summary(summary)
    if summary.get("within_bound") is False:
        print("⚠️  mean-field error exceeds 3 standard errors + 10·dt")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
