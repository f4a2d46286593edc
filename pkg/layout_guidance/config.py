import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar

from pydantic import BaseModel, ValidationError

from layout_guidance.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).parent / "config.json"
OUTPUT_ROOT_ENV = "LAYOUT_GUIDANCE_OUTPUT_ROOT"
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

ModelT = TypeVar("ModelT", bound=BaseModel)


def setup_logging(log_dir: Optional[Path] = None, level: int = logging.INFO):
    """Configure logging for command line entry points"""
    handlers = [logging.StreamHandler()]
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.insert(0, logging.FileHandler(log_dir / 'layout_guidance.log'))

    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True
    )


def read_json(path: Path) -> Dict[str, Any]:
    """Read a JSON config file, turning parse problems into ConfigError"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a JSON object")
    return data


def load_defaults() -> Dict[str, Any]:
    """Packaged defaults from config.json"""
    return read_json(DEFAULT_CONFIG_PATH)


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Merge override into a copy of base; nested dicts merge key by key"""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def set_dotted(data: Dict[str, Any], dotted_key: str, value: Any) -> Dict[str, Any]:
    """Apply a flag override such as ``guidance.lambda=1.2``"""
    parts = dotted_key.split('.')
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"Cannot override '{dotted_key}': '{part}' is not a section")
    node[parts[-1]] = value
    return data


def parse_override(text: str):
    """Split ``key=value``; the value is parsed as JSON when possible"""
    if '=' not in text:
        raise ConfigError(f"Override '{text}' must look like key=value")
    key, raw = text.split('=', 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_model(model_cls: Type[ModelT], data: Dict[str, Any]) -> ModelT:
    """Validate ``data`` into ``model_cls``; errors name the failing field path"""
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        problems = []
        for err in e.errors():
            path = '.'.join(str(p) for p in err['loc']) or '<root>'
            problems.append(f"{path}: {err['msg']}")
        raise ConfigError(f"Invalid {model_cls.__name__}: " + '; '.join(problems))


def load_section(section: str, model_cls: Type[ModelT],
                 user_config: Optional[Dict[str, Any]] = None) -> ModelT:
    """Defaults from config.json for one section, overlaid with a user section"""
    data = load_defaults().get(section, {})
    if user_config and section in user_config:
        data = deep_merge(data, user_config[section])
    return build_model(model_cls, data)


def resolve_output_dir(path: Path) -> Path:
    """Relative output dirs are re-rooted under $LAYOUT_GUIDANCE_OUTPUT_ROOT when set"""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path
