"""Deterministic network model and analytic communication accounting.

No sockets are opened. Transfers are charged latency + size / bandwidth, and
``dry_run_accounting`` derives per-strategy ciphertext counts and bytes from
layer shapes alone, so large models can be costed without training.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

from app.core.config import settings
from app.core.exceptions import ParameterError
from app.dictpfl.he import HeParams, accounting_params, ciphertext_count, modeled_ciphertext_bytes

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetProfile:
    name: str
    bandwidth_bps_up: float
    bandwidth_bps_down: float
    latency_s: float

    def __post_init__(self):
        if self.bandwidth_bps_up <= 0 or self.bandwidth_bps_down <= 0:
            raise ParameterError("bandwidth must be positive")
        if self.latency_s < 0:
            raise ParameterError("latency must be non-negative")


# LAN as measured in the secure-aggregation comparison (1 Gbps, 0.5 ms).
# WAN is an assumption: 100 Mbps, 50 ms.
PROFILES: Dict[str, NetProfile] = {
    "lan": NetProfile("lan", 1e9, 1e9, 0.0005),
    "wan": NetProfile("wan", 1e8, 1e8, 0.05),
}


def get_profile(name: str) -> NetProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ParameterError(f"unknown network profile {name!r}") from None


def transfer_time(num_bytes: int, profile: NetProfile, direction: str = "up") -> float:
    """Seconds to move num_bytes in one message"""
    if num_bytes < 0:
        raise ParameterError("byte count must be non-negative")
    bandwidth = profile.bandwidth_bps_up if direction == "up" else profile.bandwidth_bps_down
    return profile.latency_s + num_bytes * 8 / bandwidth


@dataclass(frozen=True)
class LayerShape:
    name: str
    n: int
    m: int

    @property
    def params(self) -> int:
        return self.n * self.m


ShapeManifest = List[LayerShape]


def parse_manifest(text: str) -> ShapeManifest:
    """One layer per line, ``name n m``; '#' starts a comment"""
    layers = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParameterError(f"manifest line {lineno}: expected 'name n m'")
        try:
            n, m = int(parts[1]), int(parts[2])
        except ValueError:
            raise ParameterError(f"manifest line {lineno}: dimensions must be integers") from None
        if n < 1 or m < 1:
            raise ParameterError(f"manifest line {lineno}: dimensions must be positive")
        layers.append(LayerShape(parts[0], n, m))
    return layers


def load_manifest(path: str | Path) -> ShapeManifest:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class StrategyCost:
    strategy: str
    encrypted_elements: int
    plaintext_elements: int
    ciphertexts: int
    ciphertext_bytes: int
    plaintext_bytes: int
    warmup_encrypted_elements: int

    def as_row(self) -> Dict[str, int | str]:
        return {
            "strategy": self.strategy,
            "encrypted_elements": self.encrypted_elements,
            "plaintext_elements": self.plaintext_elements,
            "ciphertexts": self.ciphertexts,
            "ciphertext_bytes": self.ciphertext_bytes,
            "plaintext_bytes": self.plaintext_bytes,
            "warmup_encrypted_elements": self.warmup_encrypted_elements,
        }


def _cost(strategy: str, encrypted: int, plaintext: int, params: HeParams, warmup: int | None = None) -> StrategyCost:
    count = ciphertext_count(encrypted, params)
    return StrategyCost(
        strategy=strategy,
        encrypted_elements=encrypted,
        plaintext_elements=plaintext,
        ciphertexts=count,
        ciphertext_bytes=count * modeled_ciphertext_bytes(params),
        plaintext_bytes=plaintext * settings.PLAINTEXT_BYTES_PER_ELEMENT,
        warmup_encrypted_elements=encrypted if warmup is None else warmup,
    )


def dictpfl_elements(manifest: ShapeManifest, rank: int, s: float) -> Tuple[int, int]:
    """(warm-up, steady-state) encrypted lookup-table elements per client upload"""
    full_table = 0
    for layer in manifest:
        if rank >= layer.n and s == 0:
            logger.warning(
                "layer %s: rank %d >= n=%d with no pruning, table is as large as the weight",
                layer.name, rank, layer.n,
            )
        full_table += rank * layer.m
    return full_table, math.ceil(full_table * (1.0 - s))


def dry_run_accounting(
    manifest: ShapeManifest,
    rank: int = 4,
    s: float = 0.7,
    top_k: int = 2,
    sae_fraction: float = 0.1,
    params: HeParams | None = None,
) -> Dict[str, StrategyCost]:
    """Per-client, per-round upload cost of every strategy after warm-up"""
    if not manifest:
        raise ParameterError("manifest lists no layers")
    if rank < 1:
        raise ParameterError("rank must be >= 1")
    if not 0.0 < sae_fraction <= 1.0:
        raise ParameterError("encrypt fraction must be in (0, 1]")
    params = params or accounting_params()

    total = sum(layer.params for layer in manifest)
    k = max(0, min(top_k, len(manifest)))
    top = sum(layer.params for layer in manifest[len(manifest) - k:]) if k else 0
    sae_encrypted = math.ceil(sae_fraction * total)
    warmup, steady = dictpfl_elements(manifest, rank, s)

    report = {
        "plaintext": _cost("plaintext", 0, total, params),
        "full": _cost("full", total, 0, params),
        "topk": _cost("topk", top, 0, params),
        "sae": _cost("sae", sae_encrypted, total - sae_encrypted, params),
        "dictpfl": _cost("dictpfl", steady, 0, params, warmup=warmup),
    }
    logger.info(
        "dry run over %d layers: full %d elements, dictpfl %d (reduction %.1fx)",
        len(manifest), total, steady, total / max(steady, 1),
    )
    return report
