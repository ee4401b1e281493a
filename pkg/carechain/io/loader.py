import json
import logging
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

import carechain
from carechain.schemas import ScenarioConfig

DEFAULT_SCENARIO = "default_scenario.json"


def resolve_path(path_str: str) -> Optional[Path]:
    """The given path if it exists, otherwise the bundled asset of that name."""
    path = Path(path_str)
    if path.exists():
        return path
    asset_path = Path(carechain.__file__).parent / "assets" / path_str
    if asset_path.exists():
        return asset_path
    return None


def load_scenario_config(config_path_str: str = DEFAULT_SCENARIO) -> Optional[ScenarioConfig]:
    """
    Loads and validates a scenario config from a JSON file or a bundled asset name.
    Returns None (after logging the reason) when the file is missing or invalid.
    """
    config_path = resolve_path(config_path_str)
    if config_path is None:
        logging.error(f"Scenario config not found at '{config_path_str}' or as a built-in asset.")
        return None

    logging.info(f"Loading scenario config from {config_path}")
    try:
        return ScenarioConfig.model_validate_json(config_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        logging.error(f"Failed to validate scenario config: {e}")
        return None
    except json.JSONDecodeError as e:
        logging.error(f"Failed to parse scenario config: {e}")
        return None
