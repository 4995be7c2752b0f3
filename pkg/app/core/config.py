from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import List, Optional
from pathlib import Path

# Get the project root directory
BASE_DIR = Path(__file__).resolve().parent.parent.parent
ENV_FILE = BASE_DIR / ".env"


class Settings(BaseSettings):
    """Application settings loaded from environment variables"""

    # App
    APP_NAME: str = "DictPFL Simulator"
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"
    ALLOWED_ORIGINS: List[str] = ["*"]

    # Database
    DATABASE_URL: str = f"sqlite:///{BASE_DIR / 'dictpfl.db'}"

    # Reproducibility
    DICTPFL_SEED: Optional[int] = None

    # Run defaults
    DEFAULT_CLIENTS: int = 3
    DEFAULT_ROUNDS: int = 30
    DEFAULT_RANK: int = 4
    DEFAULT_PRUNE: float = 0.7
    DEFAULT_TAU: int = 3
    DEFAULT_BETA: float = 0.2
    DEFAULT_LR: float = 0.1

    # HE parameters used for communication accounting (N=2^16, 1555-bit modulus)
    ACCOUNTING_RING_DIM: int = 65536
    ACCOUNTING_MODULUS_BITS: int = 1555
    ACCOUNTING_SCALE_BITS: int = 40

    # HE parameters of the toy RLWE backend
    TOY_RING_DIM: int = 1024
    TOY_MODULUS_BITS: int = 60
    TOY_SCALE_BITS: int = 30

    NOISE_TOLERANCE: float = 1e-3
    PLAINTEXT_BYTES_PER_ELEMENT: int = 4

    # Modeled compute costs (seconds per production-grade ciphertext / sample / parameter)
    COST_ENCRYPT_S: float = 0.12
    COST_DECRYPT_S: float = 0.06
    COST_ADD_S: float = 0.002
    COST_SCALE_S: float = 0.004
    COST_TRAIN_SAMPLE_S: float = 2e-4
    COST_UPDATE_PARAM_S: float = 1e-8

    model_config = SettingsConfigDict(
        env_file=str(ENV_FILE),
        env_file_encoding='utf-8',
        case_sensitive=True,
        extra='ignore'
    )


settings = Settings()
