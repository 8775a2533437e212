"""
PrefSynth - Command-Line Entry Point

    prefsynth <subcommand> [--config run.yaml] [--section.key value ...]

Results go to stdout as JSON; logs and error records go to stderr.
"""
import argparse
import inspect
import json
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml
from pydantic import BaseModel

from prefsynth import __version__
from prefsynth.core import get_logger, setup_logging
from prefsynth.core.errors import ConfigError, PrefSynthError
from prefsynth.schemas import RunConfig

logger = get_logger(__name__)

COMMANDS = {
    "gen-data": "Generate a synthetic corpus",
    "train-rm": "Train the ranking model",
    "reflect": "Train the calibrator with rank-guided reflection",
    "eval": "Evaluate the trained calibrator",
    "validate-retrieval": "Compare Ret / ExpRet / Random sequence construction",
    "ablate": "Sweep retrieval k, perturbation count r, or the rank reward",
    "auxiliary": "Retrain the ranker on generated images and compare Recall/NDCG",
    "report": "Collect run directories into a CSV summary",
}

CLI_FLAGS = {"--config", "--log-level", "--log-format", "--help", "-h", "--version"}


# =============================================================================
# Run configuration
# =============================================================================

def _nested_model(model: type[BaseModel], name: str) -> Optional[type[BaseModel]]:
    annotation = model.model_fields[name].annotation
    if inspect.isclass(annotation) and issubclass(annotation, BaseModel):
        return annotation
    return None


def check_key(path: str) -> None:
    """Raise ConfigError unless ``path`` names a RunConfig field."""
    model: Optional[type[BaseModel]] = RunConfig
    parts = path.split(".")
    for depth, part in enumerate(parts):
        if model is None or part not in model.model_fields:
            raise ConfigError(f"unknown configuration key '{path}'")
        model = _nested_model(model, part)
        if model is not None and depth == len(parts) - 1:
            raise ConfigError(f"'{path}' is a section; override one of its keys instead")


def set_dotted(data: dict[str, Any], path: str, value: Any) -> None:
    node = data
    *parents, leaf = path.split(".")
    for part in parents:
        child = node.get(part)
        if child is None:
            child = node[part] = {}
        elif not isinstance(child, dict):
            raise ConfigError(f"'{part}' in '{path}' is not a section")
        node = child
    node[leaf] = value


def split_overrides(argv: Sequence[str]) -> tuple[list[str], dict[str, Any]]:
    """Separate ``--section.key value`` / ``--key=value`` overrides from CLI flags.

    Override values are parsed as YAML scalars, so ``50`` is an int, ``true``
    a bool and ``[0, 1]`` a list.
    """
    rest: list[str] = []
    overrides: dict[str, Any] = {}
    i = 0
    while i < len(argv):
        token = argv[i]
        name = token.split("=", 1)[0]
        if not token.startswith("--") or name in CLI_FLAGS:
            rest.append(token)
            if name in CLI_FLAGS and "=" not in token and name not in ("--help", "-h", "--version"):
                if i + 1 < len(argv):
                    rest.append(argv[i + 1])
                    i += 1
            i += 1
            continue
        key = name[2:].replace("-", "_")
        if "=" in token:
            raw = token.split("=", 1)[1]
        elif i + 1 < len(argv):
            raw = argv[i + 1]
            i += 1
        else:
            raise ConfigError(f"override '{token}' needs a value")
        check_key(key)
        try:
            overrides[key] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value for '{key}': {exc}") from exc
        i += 1
    return rest, overrides


def load_run_config(path: Optional[str], overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """File values over defaults, overrides over file values."""
    data: dict[str, Any] = {}
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        data = loaded or {}
    for key, value in (overrides or {}).items():
        set_dotted(data, key, value)
    return RunConfig.from_dict(data)


# =============================================================================
# CLI
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prefsynth",
        description="Retrieval-augmented, rank-guided preference synthesis",
        epilog="Any run-config field can be overridden with --section.key VALUE.",
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
    parser.add_argument("--log-format", choices=["json", "console"], default=None)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_text in COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text, description=help_text, allow_abbrev=False)
        cmd.add_argument("--config", default=None, help="YAML run configuration")
        if name == "report":
            cmd.add_argument("run_dirs", nargs="*", help="run or experiment directories")
    return parser


def build_stage(command: str, config: RunConfig, args: argparse.Namespace) -> Any:
    from stages import (
        AblateStage,
        AuxiliaryStage,
        EvaluateStage,
        GenDataStage,
        ReflectStage,
        ReportStage,
        TrainRankModelStage,
        ValidateRetrievalStage,
    )

    if command == "report":
        return ReportStage(config, args.run_dirs)
    stages = {
        "gen-data": GenDataStage,
        "train-rm": TrainRankModelStage,
        "reflect": ReflectStage,
        "eval": EvaluateStage,
        "validate-retrieval": ValidateRetrievalStage,
        "ablate": AblateStage,
        "auxiliary": AuxiliaryStage,
    }
    return stages[command](config)


def _emit_error(record: dict[str, Any]) -> None:
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        cli_argv, overrides = split_overrides(argv)
    except PrefSynthError as exc:
        _emit_error(exc.to_record())
        return exc.exit_code
    args = build_parser().parse_args(cli_argv)
    setup_logging(args.log_level, args.log_format)

    try:
        config = load_run_config(args.config, overrides)
        result = build_stage(args.command, config, args).run()
    except PrefSynthError as exc:
        logger.error("command failed", command=args.command, error=str(exc))
        _emit_error(exc.to_record())
        return exc.exit_code
    except Exception as exc:
        logger.exception("command crashed", command=args.command)
        _emit_error({"error": type(exc).__name__, "message": str(exc), "details": {}})
        return 1

    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
