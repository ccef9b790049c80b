"""
Runtime settings loaded from the environment (.env supported)
"""
import logging
import os
from dataclasses import dataclass
from typing import Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@dataclass(frozen=True)
class Settings:
    """Process-wide defaults, overridable through environment variables"""
    device: str = "auto"
    log_level: str = "INFO"
    workers: int = 1
    data_dir: str = "data"
    run_slow: bool = False

    def torch_device(self) -> str:
        """Resolve `auto` to cuda when available"""
        if self.device != "auto":
            return self.device
        import torch
        return "cuda" if torch.cuda.is_available() else "cpu"


def _env_flag(name: str) -> bool:
    return os.getenv(name, "0").strip().lower() in {"1", "true", "yes", "on"}


def get_settings() -> Settings:
    """Read settings from the environment"""
    return Settings(
        device=os.getenv("PHYSNET_DEVICE", "auto"),
        log_level=os.getenv("PHYSNET_LOG_LEVEL", "INFO").upper(),
        workers=max(1, int(os.getenv("PHYSNET_WORKERS", "1"))),
        data_dir=os.getenv("PHYSNET_DATA_DIR", "data"),
        run_slow=_env_flag("PHYSNET_RUN_SLOW"),
    )


def setup_logging(level: Optional[str] = None) -> None:
    """Configure the root logger once; later calls only adjust the level"""
    level_name = (level or get_settings().log_level).upper()
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(level=level_name, format=_LOG_FORMAT)
    root.setLevel(level_name)
