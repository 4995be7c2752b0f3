"""Prune-for-Minimum-Encrypt.

Every client evaluates the same functions on the same broadcast history, so
masks and reactivation draws agree bit for bit without any coordination
message. Vectors are indexed by flattened lookup-table parameter.
"""

import logging
from collections import deque
from dataclasses import dataclass, replace
from typing import Deque, Sequence, Tuple

import numpy as np

from app.core.exceptions import ParameterError, ShapeError
from app.dictpfl import rng
from app.dictpfl.linalg import below_threshold

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PruneConfig:
    s: float = 0.7
    tau: int = 3
    beta: float = 0.2
    seed: int = 0
    reactivation: bool = True
    accumulate: bool = True

    def __post_init__(self):
        if not 0.0 <= self.s < 1.0:
            raise ParameterError(f"prune fraction {self.s} outside [0, 1)")
        if self.tau < 1:
            raise ParameterError(f"patience {self.tau} must be >= 1")
        if not 0.0 < self.beta < 1.0:
            raise ParameterError(f"decay factor {self.beta} outside (0, 1)")


@dataclass
class PruneState:
    config: PruneConfig
    history: Deque[np.ndarray]
    mask: np.ndarray
    react_prob: np.ndarray
    accum_grad: np.ndarray
    reactivated: np.ndarray

    @property
    def size(self) -> int:
        return self.mask.size

    def selected(self) -> np.ndarray:
        """Parameters uploaded this round: retained or reactivated"""
        return self.mask | self.reactivated


def new_prune_state(config: PruneConfig, size: int) -> PruneState:
    return PruneState(
        config=config,
        history=deque(maxlen=config.tau),
        mask=np.ones(size, dtype=bool),
        react_prob=np.ones(size),
        accum_grad=np.zeros(size),
        reactivated=np.zeros(size, dtype=bool),
    )


def tip_mask(history: Sequence[np.ndarray], s: float, tau: int) -> np.ndarray:
    """Temporal inactivity mask: 0 only if below threshold in each of the last tau rounds.

    ``history`` holds global-gradient magnitudes, oldest first. With fewer
    than tau rounds of history nothing is pruned.
    """
    if not history:
        raise ShapeError("empty history: parameter count unknown")
    size = history[-1].size
    if any(h.size != size for h in history):
        raise ShapeError("history vectors differ in length")
    if len(history) < tau:
        return np.ones(size, dtype=bool)

    inactive = np.ones(size, dtype=bool)
    for magnitudes in list(history)[-tau:]:
        inactive &= below_threshold(magnitudes, s)
    return ~inactive


def hrc_update(state: PruneState, global_grad: np.ndarray, low_activity: np.ndarray) -> PruneState:
    """Adjust reactivation probabilities of the parameters reactivated this round.

    ``low_activity`` marks parameters whose global magnitude is below the
    round threshold. Probabilities of parameters that stayed pruned are left
    as they are.
    """
    if global_grad.size != state.size or low_activity.size != state.size:
        raise ShapeError("global gradient length does not match prune state")
    beta = state.config.beta
    p = state.react_prob.copy()
    hit = state.reactivated
    p[hit & low_activity] *= beta
    grow = hit & ~low_activity
    p[grow] = np.minimum(p[grow] / beta, 1.0)
    return replace(state, react_prob=p)


def draw_reactivations(state: PruneState, round_index: int) -> np.ndarray:
    """Reactivation bits for pruned parameters from the shared (seed, round) stream"""
    if not state.config.reactivation:
        return np.zeros(state.size, dtype=bool)
    draws = rng.stream(state.config.seed, rng.REACTIVATION, round_index).random(state.size)
    return ~state.mask & (draws < state.react_prob)


def begin_round(state: PruneState, round_index: int) -> PruneState:
    """Compute this round's mask and reactivations from the broadcast history.

    A parameter that moves from retained to pruned has its reactivation
    probability decayed once.
    """
    cfg = state.config
    if state.history:
        mask = tip_mask(state.history, cfg.s, cfg.tau)
    else:
        mask = np.ones(state.size, dtype=bool)
    newly_pruned = state.mask & ~mask
    p = state.react_prob.copy()
    p[newly_pruned] *= cfg.beta
    state = replace(state, mask=mask, react_prob=p)
    state = replace(state, reactivated=draw_reactivations(state, round_index))
    logger.debug(
        "round %d: retained %d, reactivated %d, newly pruned %d",
        round_index, int(mask.sum()), int(state.reactivated.sum()), int(newly_pruned.sum()),
    )
    return state


def accumulate_and_select(state: PruneState, local_table_grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, PruneState]:
    """Split a local gradient into this round's upload and the locally held remainder.

    Returns (indices, values, state'): indices are the selected parameters in
    ascending order and values the contributions to upload for them.
    """
    if local_table_grad.size != state.size:
        raise ShapeError(f"local gradient length {local_table_grad.size} != {state.size}")
    g = np.asarray(local_table_grad, dtype=np.float64).ravel()
    accum = state.accum_grad.copy()

    selected = state.selected()
    held = ~selected

    upload = np.zeros_like(g)
    if state.config.accumulate:
        # the residual leaves with the parameter, reactivated or retained again
        upload[selected] = accum[selected] + g[selected]
        accum[held] += g[held]
    else:
        upload[selected] = g[selected]
    accum[selected] = 0.0

    indices = np.flatnonzero(selected)
    return indices, upload[indices], replace(state, accum_grad=accum)


def end_round(state: PruneState, global_grad: np.ndarray) -> PruneState:
    """Record the broadcast gradient and apply reactivation feedback"""
    magnitudes = np.abs(np.asarray(global_grad, dtype=np.float64).ravel())
    low = below_threshold(magnitudes, state.config.s)
    state = hrc_update(state, magnitudes, low)
    history = deque(state.history, maxlen=state.config.tau)
    history.append(magnitudes)
    return replace(state, history=history)
