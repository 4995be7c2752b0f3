"""Decompose-for-Partial-Encrypt.

A dense weight W (n x m) is held as W0 + D @ T: the base W0 and the
dictionary D (n x r) are frozen and never leave the client, the lookup
table T (r x m) is the only trainable, shared content.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from app.core.exceptions import ShapeError
from app.dictpfl.linalg import as_matrix, matmul, truncated_svd

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WeightDecomposition:
    w0: np.ndarray
    dictionary: np.ndarray
    table: np.ndarray

    def __post_init__(self):
        n, m = self.w0.shape
        if self.dictionary.shape[0] != n or self.table.shape[1] != m:
            raise ShapeError(
                f"dictionary {self.dictionary.shape} / table {self.table.shape} "
                f"incompatible with base {self.w0.shape}"
            )
        if self.dictionary.shape[1] != self.table.shape[0]:
            raise ShapeError("dictionary columns must equal table rows")
        self.w0.setflags(write=False)
        self.dictionary.setflags(write=False)

    @property
    def rank(self) -> int:
        return self.dictionary.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.w0.shape


def init_depe(w0: np.ndarray, r: int, method: str = "lapack") -> WeightDecomposition:
    """Factor a pre-trained weight; the table starts at exactly zero"""
    w0 = as_matrix(w0)
    u_r, sigma_r, _ = truncated_svd(w0, r, method=method)
    dictionary = u_r * sigma_r[np.newaxis, :]
    table = np.zeros((r, w0.shape[1]))
    logger.debug("init_depe %s -> rank %d, leading sigma %.4g", w0.shape, r, sigma_r[0])
    return WeightDecomposition(w0=w0, dictionary=dictionary, table=table)


def reconstruct(d: WeightDecomposition) -> np.ndarray:
    """Effective weight W0 + D @ T"""
    return d.w0 + matmul(d.dictionary, d.table)


def table_gradient(d: WeightDecomposition, weight_grad: np.ndarray) -> np.ndarray:
    """Chain rule through W = W0 + D @ T: dL/dT = D^T @ dL/dW"""
    if weight_grad.shape != d.shape:
        raise ShapeError(f"weight gradient {weight_grad.shape} != layer {d.shape}")
    return matmul(d.dictionary.T, weight_grad)


def apply_table_update(d: WeightDecomposition, delta_t: np.ndarray, lr: float) -> WeightDecomposition:
    """T <- T - lr * delta_t; base and dictionary are shared, not copied"""
    if delta_t.shape != d.table.shape:
        raise ShapeError(f"table update {delta_t.shape} != table {d.table.shape}")
    return replace(d, table=d.table - lr * delta_t)
