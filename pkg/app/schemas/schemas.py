from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, List
from datetime import datetime
from enum import Enum
import math

from app.core.config import settings
from app.models.models import RunStatus


class Strategy(str, Enum):
    DICTPFL = "dictpfl"
    FULL = "full"
    TOPK = "topk"
    SAE = "sae"
    PLAINTEXT = "plaintext"


class Backend(str, Enum):
    MOCK = "mock"
    TOY_RLWE = "toy-rlwe"


class NetName(str, Enum):
    LAN = "lan"
    WAN = "wan"


class Layout(str, Enum):
    COMPACT = "compact"
    DENSE = "dense"


class Timing(str, Enum):
    MODELED = "modeled"
    MEASURED = "measured"


class Accounting(str, Enum):
    PRODUCTION = "production"
    BACKEND = "backend"


# Run configuration
class RunConfig(BaseModel):
    model_config = ConfigDict(use_enum_values=False, extra="forbid")

    strategy: Strategy = Strategy.DICTPFL
    clients: int = Field(settings.DEFAULT_CLIENTS, ge=1)
    rounds: int = Field(settings.DEFAULT_ROUNDS, ge=1)
    rank: int = Field(settings.DEFAULT_RANK, ge=1)
    prune: float = Field(settings.DEFAULT_PRUNE, ge=0, lt=1)
    tau: int = Field(settings.DEFAULT_TAU, ge=1)
    beta: float = Field(settings.DEFAULT_BETA, gt=0, lt=1)
    alpha: float = Field(math.inf, gt=0)
    lr: float = Field(settings.DEFAULT_LR, ge=0)
    seed: int = Field(0, ge=0)
    backend: Backend = Backend.MOCK
    net: NetName = NetName.LAN
    threads: Optional[int] = Field(None, ge=1)

    # local training
    epochs: int = Field(1, ge=1)
    batch_size: Optional[int] = Field(None, ge=1)

    # baselines
    top_k: int = Field(2, ge=0)
    sae_fraction: float = Field(0.1, gt=0, le=1)

    # PrME variants
    layout: Layout = Layout.COMPACT
    reactivation: bool = True
    accumulate: bool = True

    timing: Timing = Timing.MODELED
    # ciphertext size and slot count used for byte accounting
    accounting: Accounting = Accounting.PRODUCTION

    # synthetic task and model
    classes: int = Field(4, ge=2)
    dim: int = Field(32, ge=1)
    hidden: int = Field(64, ge=1)
    samples_per_class: int = Field(150, ge=1)
    margin: float = Field(3.0, gt=0)
    test_fraction: float = Field(0.2, ge=0, lt=1)
    data_path: Optional[str] = None

    target_accuracy: Optional[float] = Field(None, gt=0, le=1)

    @field_validator("alpha", "lr", "margin")
    def validate_finite_or_inf(cls, v, info):
        if math.isnan(v):
            raise ValueError(f"{info.field_name} must be a number")
        if info.field_name != "alpha" and math.isinf(v):
            raise ValueError(f"{info.field_name} must be finite")
        return v

    @model_validator(mode="after")
    def validate_top_k(self):
        if self.strategy == Strategy.TOPK and self.top_k > 2:
            # toy model has exactly two dense layers
            raise ValueError("top_k exceeds model depth (2)")
        return self


# Metrics schemas
class RoundMetricsResponse(BaseModel):
    round: int
    local_train_s: float
    encrypt_s: float
    upload_s: float
    aggregate_s: float
    download_s: float
    decrypt_s: float
    update_s: float
    ciphertext_up: int
    ciphertext_down: int
    plaintext_up: int
    plaintext_down: int
    ct_count: int
    loss: float
    accuracy: float
    retained: int
    reactivated: int

    model_config = ConfigDict(from_attributes=True)


class RunResponse(BaseModel):
    id: int
    strategy: Strategy
    backend: Backend
    status: RunStatus
    rounds: int
    clients: int
    final_loss: Optional[float] = None
    final_accuracy: Optional[float] = None
    total_ciphertext_bytes: int
    total_plaintext_bytes: int
    total_seconds: float
    rounds_to_target: Optional[int] = None
    error: Optional[str] = None
    created_at: datetime

    model_config = ConfigDict(from_attributes=True)


# Dry-run schemas
class LayerShapeIn(BaseModel):
    name: str = Field(..., min_length=1, max_length=100)
    n: int = Field(..., ge=1)
    m: int = Field(..., ge=1)


class DryRunRequest(BaseModel):
    layers: List[LayerShapeIn] = Field(..., min_length=1)
    rank: int = Field(settings.DEFAULT_RANK, ge=1)
    prune: float = Field(settings.DEFAULT_PRUNE, ge=0, lt=1)
    top_k: int = Field(2, ge=0)
    sae_fraction: float = Field(0.1, gt=0, le=1)


class StrategyCostResponse(BaseModel):
    strategy: str
    encrypted_elements: int
    plaintext_elements: int
    ciphertexts: int
    ciphertext_bytes: int
    plaintext_bytes: int
    warmup_encrypted_elements: int


class DryRunResponse(BaseModel):
    costs: List[StrategyCostResponse]
    reduction_elements: float
    reduction_bytes: float
