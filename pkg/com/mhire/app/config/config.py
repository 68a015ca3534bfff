import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

class Config:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(Config, cls).__new__(cls)
            cls._instance.data_root = Path(os.getenv("LATENT_DATA_ROOT", "./data"))
            cls._instance.output_root = Path(os.getenv("LATENT_OUTPUT_ROOT", "./runs"))
            cls._instance.log_level = os.getenv("LATENT_LOG_LEVEL", "INFO").upper()
            cls._instance.workers = int(os.getenv("LATENT_WORKERS", "1"))

        return cls._instance

    def resolve_data_path(self, path: str) -> Path:
        """Relative dataset paths are taken against LATENT_DATA_ROOT."""
        candidate = Path(path)
        if candidate.is_absolute():
            return candidate
        return self.data_root / candidate
