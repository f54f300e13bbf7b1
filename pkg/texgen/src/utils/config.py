"""
Flat `key = value` configuration files.

    # sampler run
    iterations = 2000
    resolution = 64
    coverage_levels = 0.2, 0.5, 0.9

Values are handed to pydantic as strings (it coerces numbers and booleans); list and tuple
fields are split on commas. Precedence: model defaults < file < `--set key=value` < environment.
"""

import os, types, typing, pydantic

from typing import Dict, List, Mapping, Optional, Type, TypeVar
from modules.types import ConfigurationError


Model = TypeVar("Model", bound=pydantic.BaseModel)

ENV_OVERRIDES: Dict[str, str] = {
    "TEXGEN_FIXTURE_ROOT": "fixture_root",
}


def parse_pairs(lines: List[str], origin: str = "<overrides>") -> Dict[str, str]:
    values: Dict[str, str] = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{origin}:{number}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{origin}:{number}: empty key")
        values[key] = value
    return values


def read_config_file(path: str) -> Dict[str, str]:
    if not os.path.exists(path):
        raise ConfigurationError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return parse_pairs(f.read().splitlines(), origin=path)


def _coerce(model: Type[pydantic.BaseModel], key: str, value: str):
    annotation = model.model_fields[key].annotation
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value.lower() in ("", "none", "null"):
            return None
        origin = typing.get_origin(args[0]) if args else None
    if origin in (list, tuple):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def load_config(
    model: Type[Model],
    path: Optional[str] = None,
    overrides: Optional[List[str]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> Model:
    """Build `model` from an optional file, `key=value` overrides and environment variables."""
    values: Dict[str, str] = {}
    if path:
        values.update(read_config_file(path))
    if overrides:
        values.update(parse_pairs(overrides))

    environ = os.environ if environ is None else environ
    for variable, key in ENV_OVERRIDES.items():
        if variable in environ and key in model.model_fields:
            values[key] = environ[variable]

    unknown = sorted(set(values) - set(model.model_fields))
    if unknown:
        raise ConfigurationError(f"Unknown {model.__name__} keys: {', '.join(unknown)}")

    try:
        return model.model_validate({key: _coerce(model, key, value) for key, value in values.items()})
    except pydantic.ValidationError as e:
        raise ConfigurationError(f"Invalid {model.__name__}: {e}") from e
