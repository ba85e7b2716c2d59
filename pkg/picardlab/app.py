from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import ValidationError

CURRENT_DIR = Path(__file__).resolve().parent
if str(CURRENT_DIR) not in sys.path:
    sys.path.insert(0, str(CURRENT_DIR))

from backend.errors import InvalidArgument, PicardLabError  # noqa: E402
from backend.models import ErrorPayload, ExperimentConfig, ModulusSpec  # noqa: E402
from backend.services import (  # noqa: E402
    cmd_certify,
    cmd_check,
    cmd_solve,
    load_config,
    run_modulus,
    zoo_list,
)


logging.basicConfig(level=logging.INFO, format="%(asctime)s [%(levelname)s] %(message)s")
logger = logging.getLogger("picardlab")

COMMANDS = {"solve": cmd_solve, "certify": cmd_certify, "check": cmd_check}


def parse_params(pairs: List[str]) -> Dict[str, object]:
    params: Dict[str, object] = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise InvalidArgument(f"Expected key=value, got {pair!r}.")
        try:
            params[key] = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise InvalidArgument(f"Cannot parse the value of {key!r}: {raw!r}.") from exc
    return params


def modulus_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.name:
        overrides["name"] = args.name
        overrides["params"] = parse_params(args.param)
    elif args.param:
        overrides["params"] = {**config.modulus.params, **parse_params(args.param)}
    if args.action:
        overrides["action"] = args.action
    if not overrides:
        return config
    spec = ModulusSpec.model_validate({**config.modulus.model_dump(), **overrides})
    return config.model_copy(update={"modulus": spec})


def emit(payload: dict) -> None:
    print(json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Solve, certify and check BSDEs with non-Lipschitz generators.")
    parser.add_argument("--output-dir", help="Directory for result files (overrides PICARDLAB_OUTPUT_DIR).")
    parser.add_argument("--threads", type=int, help="Worker cap for path simulation (overrides PICARDLAB_THREADS).")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    commands = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("solve", "Run the Picard iteration and export the solution summary."),
        ("certify", "Partition the horizon and certify the majorant on the last interval."),
        ("check", "Check the generator's hypotheses by sampling."),
    ):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, type=Path)
    modulus = commands.add_parser("modulus", help="Diagnose, transform or concavify a named modulus.")
    modulus.add_argument("--config", type=Path)
    modulus.add_argument("--name")
    modulus.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")
    modulus.add_argument("--action", choices=["diagnose", "transform", "concavify"])
    listing = commands.add_parser("zoo-list", help="List the built-in generators.")
    listing.add_argument("--json", action="store_true")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        if args.command == "zoo-list":
            print(zoo_list(args.json))
            return 0
        if args.command == "modulus":
            emit(run_modulus(modulus_config(args), args.output_dir))
            return 0
        config = load_config(args.config)
        emit(COMMANDS[args.command](config, args.output_dir, args.threads))
        return 0
    except ValidationError as exc:
        fields = [".".join(str(part) for part in error["loc"]) for error in exc.errors()]
        logger.error("Invalid configuration: %s", ", ".join(fields))
        payload = ErrorPayload(error="invalid-argument", detail=str(exc), fields=fields)
        emit(payload.model_dump(exclude_none=True))
        return 2
    except PicardLabError as exc:
        logger.exception("Command %s failed: %s", args.command, exc)
        emit(exc.payload())
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
