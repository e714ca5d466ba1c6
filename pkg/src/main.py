import argparse
import asyncio
import logging
import sys
from datetime import datetime
from typing import Optional, Type

import logfire
from pydantic import BaseModel, ValidationError
from pydantic.fields import FieldInfo
from pydantic_core import PydanticUndefinedType

import config
from config import RunConfig, load_config
from engine.errors import PfppError
from handlers.base_handler import BaseHandler, BaseHandlerConfig
from handlers.construct import ConstructHandler, ConstructHandlerConfig
from handlers.deconv import DeconvHandler, DeconvHandlerConfig
from handlers.report import ReportHandler, ReportHandlerConfig
from handlers.simulate import SimulateHandler, SimulateHandlerConfig
from handlers.verify import VerifyHandler, VerifyHandlerConfig
from utils import Logger

COMMANDS: dict[str, tuple[Type[BaseHandlerConfig], Type[BaseHandler], str]] = {
    "construct": (ConstructHandlerConfig, ConstructHandler, "Construct I_1..I_T and write the PFPP state"),
    "simulate": (SimulateHandlerConfig, SimulateHandler, "Simulate optimal wealth paths"),
    "verify": (VerifyHandlerConfig, VerifyHandler, "Check budget, martingale and supermartingale gates"),
    "deconv": (DeconvHandlerConfig, DeconvHandler, "Run one deconvolution solve with diagnostics"),
    "report": (ReportHandlerConfig, ReportHandler, "Render a markdown report of the output directory"),
}


def configure_logging(
    command: str,
    file_level: int = logging.INFO,
    console_level: int = logging.WARNING,
):
    logs_dir = config.LOG_DIR / command / datetime.now().strftime("%Y_%m_%d")
    Logger.init(logs_dir, file_level=file_level, console_level=console_level)


async def run_command(command: str, args: argparse.Namespace):
    handler_config, handler_class, _ = COMMANDS[command]
    cfg = load_config(args, handler_config, "")
    run = load_config(args, RunConfig, "")

    configure_logging(
        command=command,
        file_level=config.FILE_LOG_LEVEL,
        console_level=config.CONSOLE_LOG_LEVEL,
    )
    Logger.info(f"Running {command}", {"config": str(cfg.config), "out": str(cfg.out)})

    handler = handler_class(cfg, run)

    return await handler.handle()


def _add_field_arg(handler_group: argparse._ArgumentGroup, field_name: str, field_info: FieldInfo):
    arg_name = f"--{field_name.replace('_', '-')}"
    help_text = field_info.description or ""

    if isinstance(field_info.annotation, type) and issubclass(field_info.annotation, BaseModel):
        for nested_name, nested_info in field_info.annotation.model_fields.items():
            _add_field_arg(handler_group, nested_name, nested_info)
        return

    if not field_info.is_required():
        help_text = "(optional) " + help_text
    if default := field_info.default:
        if not isinstance(default, PydanticUndefinedType):
            help_text += f" (default: {default})"

    # None means "not specified", so file values are only overridden by explicit flags
    handler_group.add_argument(
        arg_name,
        dest=field_name,
        default=None,
        help=help_text,
        required=field_info.is_required(),
    )


def add_handler_args(
    parser: argparse.ArgumentParser,
    config_fields: dict[str, FieldInfo],
    handler_name: str,
):
    handler_group = parser.add_argument_group(handler_name)

    for field_name, field_info in config_fields.items():
        _add_field_arg(handler_group, field_name, field_info)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pfpp",
        description="Predictable forward performance processes in conditionally complete markets",
    )
    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    for command, (handler_config, _, help_text) in COMMANDS.items():
        command_parser = subparsers.add_parser(command, help=help_text)
        add_handler_args(command_parser, handler_config.model_fields, f"{command.capitalize()} Configuration")

    return parser


def configure_tracing():
    logfire.configure(
        service_name="pfpp-engine",
        send_to_logfire=False,
        environment=config.ENVIRONMENT,
    )


async def main(argv: Optional[list[str]] = None) -> Optional[int]:
    if config.ENABLE_TRACING:
        configure_tracing()

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code

    if not args.command:
        print("Error: Please specify a command (construct, simulate, verify, deconv, report)")
        return 2

    try:
        await run_command(args.command, args)
    except ValidationError as error:
        Logger.error("Invalid configuration", {"errors": error.errors(include_url=False)})
        print(f"Error: invalid configuration\n{error}", file=sys.stderr)
        return 2
    except PfppError as error:
        Logger.error(f"{args.command} failed", {"error": type(error).__name__, "message": str(error)})
        print(f"Error: {type(error).__name__}: {error}", file=sys.stderr)
        return error.exit_code
    finally:
        Logger.reset()

    return 0


def cli_main():
    """Entry point for the CLI script."""
    result = asyncio.run(main())
    if result:
        sys.exit(result)


if __name__ == "__main__":
    cli_main()
