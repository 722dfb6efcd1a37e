"""Environment configuration loader."""

from __future__ import annotations

import os
from pathlib import Path

from dotenv import load_dotenv

LOG_LEVEL_VAR = "STWAVE_LOG_LEVEL"
HOME_VAR = "STWAVE_HOME"
DB_NAME = "stwave.db"


def load_environment(workspace_dir: str | Path | None = None) -> None:
    """Load variables from the first .env found.

    Searches the given workspace_dir, then the working directory, then the
    directory above the stwave package. Existing variables are not overridden.
    """
    search_paths = []
    if workspace_dir:
        search_paths.append(Path(workspace_dir) / ".env")
    search_paths.append(Path.cwd() / ".env")
    search_paths.append(Path(__file__).parent.parent / ".env")

    for env_path in search_paths:
        if env_path.exists():
            load_dotenv(env_path, override=False)
            return


def get_log_level() -> str:
    return os.getenv(LOG_LEVEL_VAR, "INFO").upper()


def get_home() -> Path:
    """Directory holding the run-history database."""
    return Path(os.getenv(HOME_VAR) or Path.cwd()).expanduser()


def get_db_path() -> Path:
    return get_home() / DB_NAME
