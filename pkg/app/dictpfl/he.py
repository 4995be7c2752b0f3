"""Additively homomorphic encryption with slot packing.

Two interchangeable backends share one interface:

* ``MockBackend`` keeps plaintext float64 slots. Exact, for oracle runs.
* ``ToyRlweBackend`` is an additive-only RLWE scheme in the CKKS style with
  coefficient packing: real values are scaled by 2**scale_bits, rounded and
  written into the first N/2 coefficients of a plaintext polynomial modulo
  X^N + 1. Coefficient-wise addition is slot-wise addition. It is faithful to
  the structure of the real scheme and is NOT production-secure.

Communication accounting never looks at backend payloads; it uses
``modeled_ciphertext_bytes`` on the accounting parameters.
"""

import hashlib
import logging
import math
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from app.core.config import settings
from app.core.exceptions import EncodingError, IncompatibilityError, ParameterError
from app.dictpfl import rng

logger = logging.getLogger(__name__)

WIRE_VERSION = 2
# length, tag, version, params digest, slot count, chunk index, scale bits, magnitude bound
_HEADER = struct.Struct("<I4sB8sIIid")

# Fixed-point precision of plaintext constants in scale_plain
PLAIN_SCALE_BITS = 16
ERROR_STDDEV = 3.2
LIMB_BITS = 30
LIMB_MASK = (1 << LIMB_BITS) - 1


@dataclass(frozen=True)
class HeParams:
    ring_dim: int
    coeff_modulus_bits: int
    scale_bits: int

    def __post_init__(self):
        if self.ring_dim < 2 or self.ring_dim & (self.ring_dim - 1):
            raise ParameterError(f"ring dimension {self.ring_dim} is not a power of two")
        if self.coeff_modulus_bits < 1 or self.scale_bits < 0:
            raise ParameterError("modulus and scale bits must be positive")

    @property
    def slots(self) -> int:
        return self.ring_dim // 2

    def digest(self) -> bytes:
        raw = struct.pack("<III", self.ring_dim, self.coeff_modulus_bits, self.scale_bits)
        return hashlib.blake2b(raw, digest_size=8).digest()


def accounting_params() -> HeParams:
    """Production-grade parameters used for every byte count"""
    return HeParams(
        ring_dim=settings.ACCOUNTING_RING_DIM,
        coeff_modulus_bits=settings.ACCOUNTING_MODULUS_BITS,
        scale_bits=settings.ACCOUNTING_SCALE_BITS,
    )


def toy_params() -> HeParams:
    return HeParams(
        ring_dim=settings.TOY_RING_DIM,
        coeff_modulus_bits=settings.TOY_MODULUS_BITS,
        scale_bits=settings.TOY_SCALE_BITS,
    )


def modeled_ciphertext_bytes(params: HeParams) -> int:
    """Two polynomials of N coefficients at full modulus width"""
    return 2 * params.ring_dim * math.ceil(params.coeff_modulus_bits / 8)


def ciphertext_count(elements: int, params: HeParams) -> int:
    return math.ceil(elements / params.slots) if elements > 0 else 0


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    secret_key: bytes


@dataclass(frozen=True)
class Ciphertext:
    backend: bytes
    params: HeParams
    payload: bytes
    slot_count: int
    chunk_index: int
    scale_bits: int
    # upper bound on |slot value| in plaintext units (toy scheme only)
    magnitude: float = 0.0

    @property
    def size_bytes(self) -> int:
        return modeled_ciphertext_bytes(self.params)

    def to_bytes(self) -> bytes:
        """Length-prefixed little-endian wire form"""
        body_len = _HEADER.size - 4 + len(self.payload)
        header = _HEADER.pack(
            body_len, self.backend, WIRE_VERSION, self.params.digest(),
            self.slot_count, self.chunk_index, self.scale_bits, self.magnitude,
        )
        return header + self.payload

    @classmethod
    def from_bytes(cls, data: bytes, params: HeParams) -> "Ciphertext":
        if len(data) < _HEADER.size:
            raise IncompatibilityError("truncated ciphertext header")
        body_len, tag, version, digest, slots, chunk, scale, magnitude = _HEADER.unpack_from(data)
        if body_len != len(data) - 4:
            raise IncompatibilityError("ciphertext length prefix does not match buffer")
        if version != WIRE_VERSION:
            raise IncompatibilityError(f"unsupported ciphertext version {version}")
        if tag not in BACKENDS:
            raise IncompatibilityError(f"unknown backend tag {tag!r}")
        if digest != params.digest():
            raise IncompatibilityError("ciphertext was produced under different parameters")
        return cls(
            backend=tag, params=params, payload=bytes(data[_HEADER.size:]),
            slot_count=slots, chunk_index=chunk, scale_bits=scale, magnitude=magnitude,
        )


class HeBackend(ABC):
    """Slot-packed additive HE. Stateless after construction."""

    tag: bytes = b""

    def __init__(self, params: HeParams):
        self.params = params

    @abstractmethod
    def keygen(self, seed: int) -> KeyPair:
        ...

    @abstractmethod
    def _encrypt_chunk(self, pk: bytes, plain: np.ndarray, chunk_index: int, gen: np.random.Generator) -> Ciphertext:
        ...

    @abstractmethod
    def _decrypt_chunk(self, sk: bytes, ct: Ciphertext) -> np.ndarray:
        ...

    @abstractmethod
    def _add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        ...

    @abstractmethod
    def _scale(self, a: Ciphertext, c: float) -> Ciphertext:
        ...

    def _check(self, ct: Ciphertext) -> None:
        if ct.backend != self.tag:
            raise IncompatibilityError(f"ciphertext from backend {ct.backend!r}, expected {self.tag!r}")
        if ct.params != self.params:
            raise IncompatibilityError("ciphertext parameters differ from backend parameters")

    def pack_encrypt(
        self,
        pk: bytes,
        values: Sequence[float],
        gen: Optional[np.random.Generator] = None,
    ) -> List[Ciphertext]:
        """Split values into slot-sized chunks and encrypt each; last chunk zero-padded"""
        values = np.asarray(values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(values)):
            raise EncodingError("cannot encode NaN or Inf")
        gen = gen if gen is not None else np.random.default_rng()
        slots = self.params.slots
        cts = []
        for index in range(ciphertext_count(values.size, self.params)):
            chunk = np.zeros(slots)
            part = values[index * slots:(index + 1) * slots]
            chunk[:part.size] = part
            cts.append(self._encrypt_chunk(pk, chunk, index, gen))
        return cts

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        """Slot-wise sum"""
        self._check(a)
        self._check(b)
        if a.slot_count != b.slot_count:
            raise IncompatibilityError(f"slot count {a.slot_count} != {b.slot_count}")
        if a.chunk_index != b.chunk_index:
            raise IncompatibilityError(f"chunk {a.chunk_index} added to chunk {b.chunk_index}")
        if a.scale_bits != b.scale_bits:
            raise IncompatibilityError("ciphertexts are at different scales")
        return self._add(a, b)

    def scale_plain(self, a: Ciphertext, c: float) -> Ciphertext:
        """Multiply every slot by a plaintext constant.

        Raises EncodingError when the scaled values would no longer fit the
        ciphertext modulus (toy scheme; the mock has no limit).
        """
        self._check(a)
        if not math.isfinite(c):
            raise EncodingError(f"cannot scale by {c}")
        return self._scale(a, c)

    def decrypt_unpack(self, sk: bytes, cts: Sequence[Ciphertext], length: int) -> np.ndarray:
        capacity = len(cts) * self.params.slots
        if length > capacity:
            raise ParameterError(f"length {length} exceeds capacity {capacity}")
        if not cts:
            return np.zeros(0)
        parts = []
        for ct in cts:
            self._check(ct)
            parts.append(self._decrypt_chunk(sk, ct))
        return np.concatenate(parts)[:length]


class MockBackend(HeBackend):
    """Plaintext stand-in with the same interface and exact arithmetic"""

    tag = b"MOCK"

    def keygen(self, seed: int) -> KeyPair:
        marker = struct.pack("<Q", int(seed) & 0xFFFFFFFFFFFFFFFF)
        return KeyPair(public_key=b"pk" + marker, secret_key=b"sk" + marker)

    def _wrap(self, slots: np.ndarray, like: Ciphertext | None = None, chunk_index: int = 0) -> Ciphertext:
        return Ciphertext(
            backend=self.tag, params=self.params, payload=slots.astype("<f8").tobytes(),
            slot_count=self.params.slots,
            chunk_index=like.chunk_index if like is not None else chunk_index,
            scale_bits=0,
        )

    @staticmethod
    def _slots(ct: Ciphertext) -> np.ndarray:
        return np.frombuffer(ct.payload, dtype="<f8")

    def _encrypt_chunk(self, pk, plain, chunk_index, gen):
        return self._wrap(plain, chunk_index=chunk_index)

    def _decrypt_chunk(self, sk, ct):
        return self._slots(ct).copy()

    def _add(self, a, b):
        return self._wrap(self._slots(a) + self._slots(b), like=a)

    def _scale(self, a, c):
        return self._wrap(self._slots(a) * c, like=a)


class ToyRlweBackend(HeBackend):
    """Additive RLWE over Z_q[X]/(X^N + 1) with q = 2**coeff_modulus_bits"""

    tag = b"RLWE"

    def __init__(self, params: HeParams):
        super().__init__(params)
        # uniform polynomials are convolved in two int64 limbs of LIMB_BITS
        if params.coeff_modulus_bits > 2 * LIMB_BITS or params.ring_dim > 1 << 20:
            raise ParameterError(f"toy scheme needs modulus_bits <= {2 * LIMB_BITS} and N <= 2**20")
        if params.scale_bits + PLAIN_SCALE_BITS >= params.coeff_modulus_bits - 2:
            raise ParameterError("scale leaves no headroom below the modulus")
        self.q = 1 << params.coeff_modulus_bits
        self.n = params.ring_dim

    def _reduce(self, x: np.ndarray) -> np.ndarray:
        """Centered representative in [-q/2, q/2)"""
        half = self.q >> 1
        return np.mod(x + half, self.q) - half

    def _negacyclic(self, a: np.ndarray, small: np.ndarray) -> np.ndarray:
        full = np.convolve(a, small)
        out = full[:self.n].copy()
        out[:self.n - 1] -= full[self.n:]
        return out

    def _mul_small(self, a: np.ndarray, small: np.ndarray) -> np.ndarray:
        """a * small mod (X^N + 1, q) for a small (ternary) polynomial"""
        unsigned = np.mod(a, self.q)
        low = self._negacyclic(unsigned & LIMB_MASK, small)
        high = self._negacyclic(unsigned >> LIMB_BITS, small)
        high = np.mod(high, 1 << (self.params.coeff_modulus_bits - LIMB_BITS)) << LIMB_BITS
        return self._reduce(high + low)

    def _ternary(self, gen: np.random.Generator) -> np.ndarray:
        return gen.integers(-1, 2, size=self.n, dtype=np.int64)

    def _error(self, gen: np.random.Generator) -> np.ndarray:
        return np.rint(gen.normal(0.0, ERROR_STDDEV, size=self.n)).astype(np.int64)

    def _split(self, blob: bytes, parts: int) -> List[np.ndarray]:
        arr = np.frombuffer(blob, dtype="<i8")
        return [arr[i * self.n:(i + 1) * self.n].astype(np.int64) for i in range(parts)]

    def keygen(self, seed: int) -> KeyPair:
        gen = rng.stream(seed, rng.KEYGEN)
        s = self._ternary(gen)
        half = self.q >> 1
        a = gen.integers(-half, half, size=self.n, dtype=np.int64)
        b = self._reduce(-self._mul_small(a, s) + self._error(gen))
        return KeyPair(
            public_key=np.concatenate([b, a]).astype("<i8").tobytes(),
            secret_key=s.astype("<i8").tobytes(),
        )

    def _ciphertext(self, c0: np.ndarray, c1: np.ndarray, chunk_index: int, scale_bits: int, magnitude: float) -> Ciphertext:
        return Ciphertext(
            backend=self.tag, params=self.params,
            payload=np.concatenate([c0, c1]).astype("<i8").tobytes(),
            slot_count=self.params.slots, chunk_index=chunk_index, scale_bits=scale_bits,
            magnitude=magnitude,
        )

    def _check_capacity(self, magnitude: float, scale_bits: int) -> None:
        """Encoded values must stay below q/4, leaving the rest for noise"""
        if magnitude * float(1 << scale_bits) >= float(self.q >> 2):
            raise EncodingError(
                f"result bound {magnitude:.6g} at scale 2**{scale_bits} would wrap around the modulus"
            )

    def _encrypt_chunk(self, pk, plain, chunk_index, gen):
        limit = self.q >> (2 + PLAIN_SCALE_BITS)
        scaled = np.rint(plain * float(1 << self.params.scale_bits))
        if np.any(np.abs(scaled) >= limit):
            raise EncodingError("value too large for the encoding scale")
        m = np.zeros(self.n, dtype=np.int64)
        m[:self.params.slots] = scaled.astype(np.int64)

        b, a = self._split(pk, 2)
        u = self._ternary(gen)
        c0 = self._reduce(self._mul_small(b, u) + self._error(gen) + m)
        c1 = self._reduce(self._mul_small(a, u) + self._error(gen))
        magnitude = float(np.max(np.abs(scaled))) / float(1 << self.params.scale_bits)
        return self._ciphertext(c0, c1, chunk_index, self.params.scale_bits, magnitude)

    def _decrypt_chunk(self, sk, ct):
        (s,) = self._split(sk, 1)
        c0, c1 = self._split(ct.payload, 2)
        m = self._reduce(c0 + self._mul_small(c1, s))
        return m[:self.params.slots].astype(np.float64) / float(1 << ct.scale_bits)

    def _add(self, a, b):
        a0, a1 = self._split(a.payload, 2)
        b0, b1 = self._split(b.payload, 2)
        magnitude = a.magnitude + b.magnitude
        self._check_capacity(magnitude, a.scale_bits)
        return self._ciphertext(self._reduce(a0 + b0), self._reduce(a1 + b1), a.chunk_index, a.scale_bits, magnitude)

    def _scale(self, a, c):
        if a.scale_bits + PLAIN_SCALE_BITS >= self.params.coeff_modulus_bits - 2:
            raise EncodingError("ciphertext has no scale headroom left")
        factor = int(round(c * (1 << PLAIN_SCALE_BITS)))
        magnitude = abs(factor) * a.magnitude / float(1 << PLAIN_SCALE_BITS)
        self._check_capacity(magnitude, a.scale_bits + PLAIN_SCALE_BITS)
        a0, a1 = self._split(a.payload, 2)
        half = self.q >> 1

        def exact(x: np.ndarray) -> np.ndarray:
            # Python integers avoid int64 overflow of the product
            return ((x.astype(object) * factor + half) % self.q - half).astype(np.int64)

        return self._ciphertext(exact(a0), exact(a1), a.chunk_index, a.scale_bits + PLAIN_SCALE_BITS, magnitude)


BACKENDS = {
    MockBackend.tag: MockBackend,
    ToyRlweBackend.tag: ToyRlweBackend,
}


def make_backend(kind: str, params: Optional[HeParams] = None) -> HeBackend:
    """Backend by run-config name ('mock' or 'toy-rlwe')"""
    if kind == "mock":
        return MockBackend(params or toy_params())
    if kind == "toy-rlwe":
        return ToyRlweBackend(params or toy_params())
    raise ParameterError(f"unknown backend {kind!r}")
