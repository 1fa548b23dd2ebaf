"""Command-line interface.

    gld run <config.toml> [--out DIR]    solve the configured scenario
    gld check-config <config.toml>       validate and summarize a config
    gld presets [--out DIR]              write the packaged preset files

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 acceptance-assertion failure (the in-run energy monitor tripped).
"""

import argparse
import os
import sys

from . import __version__
from .config import load_config, preset_texts
from .errors import ConfigurationError, StabilityViolationError, StepError
from .output import atomic_write_text

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_ASSERTION = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gld",
        description="Ferroelectric gradient-flow solver "
                    "(hybridizable discontinuous Galerkin).")
    parser.add_argument("--version", action="version",
                        version=f"gld {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario from a config file")
    p_run.add_argument("config", help="TOML configuration file")
    p_run.add_argument("--out", default=None,
                       help="output directory (default: from the config)")

    p_check = sub.add_parser("check-config",
                             help="validate a config file and print it")
    p_check.add_argument("config", help="TOML configuration file")

    p_presets = sub.add_parser(
        "presets", help="write the packaged scenario preset files")
    p_presets.add_argument("--out", default=".",
                           help="directory for the preset files (default: .)")
    return parser


def _load(path):
    try:
        return load_config(path), None
    except FileNotFoundError:
        print(f"error: config file not found: {path}", file=sys.stderr)
        return None, EXIT_CONFIG
    except ConfigurationError as exc:
        print(f"error: invalid configuration ({len(exc.violations)} problem"
              f"{'s' if len(exc.violations) != 1 else ''}):", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return None, EXIT_CONFIG


def _cmd_run(args) -> int:
    cfg, code = _load(args.config)
    if cfg is None:
        return code
    out_dir = args.out or cfg.output.directory
    from .scenarios import run_scenario
    try:
        result = run_scenario(cfg, out_dir=out_dir)
    except StabilityViolationError as exc:
        print(f"error: energy-stability assertion failed: {exc}",
              file=sys.stderr)
        return EXIT_ASSERTION
    except StepError as exc:
        print(f"error: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    for path in result.files:
        print(path)
    return EXIT_OK


def _cmd_check(args) -> int:
    cfg, code = _load(args.config)
    if cfg is None:
        return code
    print(f"scenario: {cfg.scenario}")
    print(f"mesh: {cfg.mesh.nx} x {cfg.mesh.ny} cells on "
          f"{cfg.mesh.width:g} m x {cfg.mesh.height:g} m")
    print(f"discretization: degree {cfg.discretization.degree}, "
          f"T = {cfg.discretization.final_time:g} s, "
          f"{cfg.discretization.steps} steps")
    comps = ", ".join(c.prop.name for c in cfg.material.components)
    print(f"material: epsilon = {cfg.material.epsilon:.6e} F/m, "
          f"components: {comps}")
    print(f"signal: {len(cfg.signal.breakpoints)} breakpoints, "
          f"{'periodic' if cfg.signal.periodic else 'one-shot'}")
    print("config OK")
    return EXIT_OK


def _cmd_presets(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    for name, text in preset_texts().items():
        path = os.path.join(args.out, f"{name}.toml")
        atomic_write_text(path, text)
        print(path)
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "check-config": _cmd_check,
               "presets": _cmd_presets}[args.command]
    return handler(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
