"""Per-site low-rank subspace tracking with fidelity-triggered fallback.

Each compression site keeps an orthonormal basis ``Q`` (``D x k``).  Every
incoming activation batch ``X`` (``B x D``) is compressed to ``Z = X Q`` with
the basis held *before* the step, and the retained energy fraction
``F = ||Z|| / ||X||`` decides what happens to the basis:

* ``F >= threshold``: one or more power-iteration refreshes
  ``Q <- orth(X^T X Q)``.
* otherwise the failure counter is bumped; below ``patience`` the basis is
  widened with residuals of a few sampled rows, at ``patience`` it is
  rebuilt from an exact truncated SVD of the batch and the batch is flagged
  so the caller can skip its backward pass.
"""

from __future__ import annotations

import enum
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import linalg
from .errors import (
    AllColumnsDegenerate,
    DegenerateInit,
    DimensionMismatch,
    UninitializedTracker,
)

NORM_FLOOR = 1e-12


class Event(str, enum.Enum):
    POWER_UPDATED = "PowerUpdated"
    EXPANDED = "Expanded"
    HARD_RESET = "HardReset"
    COUNTER_INCREMENTED = "CounterIncremented"
    # near-zero batch: fidelity defined as 1, basis untouched
    SKIPPED = "Skipped"


# Used when several tracker steps collapse into one trace row.
EVENT_SEVERITY = {
    Event.SKIPPED: 0,
    Event.POWER_UPDATED: 1,
    Event.COUNTER_INCREMENTED: 2,
    Event.EXPANDED: 3,
    Event.HARD_RESET: 4,
}


@dataclass(frozen=True)
class TrackerConfig:
    initial_rank: int = 128
    fidelity_threshold: float = 0.95
    patience: int = 2
    expansion_size: int = 4
    max_rank: int = 512
    power_steps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.initial_rank < 1:
            raise ValueError("initial_rank must be >= 1")
        if self.initial_rank > self.max_rank:
            raise ValueError("initial_rank must not exceed max_rank")
        if not 0.0 < self.fidelity_threshold <= 1.0:
            raise ValueError("fidelity_threshold must lie in (0, 1]")
        if self.patience < 1 or self.expansion_size < 1 or self.power_steps < 1:
            raise ValueError("patience, expansion_size and power_steps must be >= 1")


@dataclass
class TrackerEvent:
    step: int
    site: str
    fidelity: float
    rank: int
    event: Event
    old_rank: int

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "site": self.site,
            "fidelity": self.fidelity,
            "rank": self.rank,
            "event": self.event.value,
            "old_rank": self.old_rank,
        }


@dataclass
class SiteTrackerState:
    site_id: str
    Q: np.ndarray
    config: TrackerConfig
    rng: np.random.Generator
    initial_rank: int
    max_rank: int
    fail_counter: int = 0
    step_index: int = 0
    log: list[TrackerEvent] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def rank(self) -> int:
        return self.Q.shape[1]

    @property
    def dim(self) -> int:
        return self.Q.shape[0]


@dataclass
class StepOutcome:
    Z: np.ndarray
    fidelity: float
    event: Event
    old_rank: int
    new_rank: int
    skip_backward: bool
    # basis that produced Z; reconstruction must use this one
    basis: np.ndarray
    # fidelity of the same batch under the post-step basis (reporting only)
    post_fidelity: float


def site_rng(seed: int, site_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(site_id.encode())])


def _is_degenerate(X: np.ndarray) -> bool:
    return linalg.frobenius_norm(X) < NORM_FLOOR * X.size


def _reset_rank(config: TrackerConfig, X: np.ndarray) -> int:
    return min(config.initial_rank, X.shape[0], X.shape[1])


def init_site(site_id: str, X0, config: TrackerConfig, rng: np.random.Generator | None = None) -> SiteTrackerState:
    """Seed a site's basis from the top singular directions of ``X0``."""
    X0 = linalg.as_matrix(X0)
    if _is_degenerate(X0):
        raise DegenerateInit(f"site {site_id!r}: initial batch is (near-)zero")
    k = _reset_rank(config, X0)
    state = SiteTrackerState(
        site_id=site_id,
        Q=linalg.truncated_svd(X0, k),
        config=config,
        rng=rng if rng is not None else site_rng(config.seed, site_id),
        initial_rank=k,
        max_rank=min(config.max_rank, X0.shape[1]),
    )
    if k < config.initial_rank:
        state.warnings.append(
            f"initial rank {config.initial_rank} clamped to {k} for a {X0.shape[0]}x{X0.shape[1]} batch"
        )
    return state


def init_site_from_basis(site_id: str, Q, config: TrackerConfig, rng: np.random.Generator | None = None) -> SiteTrackerState:
    """Start tracking from a caller-supplied orthonormal basis."""
    Q = linalg.as_matrix(Q, "Q")
    if linalg.orthonormality_error(Q) > 1e-6:
        raise ValueError("Q must be orthonormal")
    return SiteTrackerState(
        site_id=site_id,
        Q=Q.copy(),
        config=config,
        rng=rng if rng is not None else site_rng(config.seed, site_id),
        initial_rank=min(config.initial_rank, Q.shape[1]),
        max_rank=min(max(config.max_rank, Q.shape[1]), Q.shape[0]),
    )


def compress(state: SiteTrackerState, X) -> np.ndarray:
    if state is None or state.Q is None:
        raise UninitializedTracker("tracker has no basis")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != state.dim:
        raise DimensionMismatch(f"expected {state.dim} columns, got shape {X.shape}")
    return X @ state.Q


def fidelity(Z, X) -> float:
    """Retained energy ratio ``||Z|| / ||X||`` (1.0 for near-zero ``X``)."""
    X = np.asarray(X, dtype=np.float64)
    nx = linalg.frobenius_norm(X)
    if nx < NORM_FLOOR * X.size:
        return 1.0
    return linalg.frobenius_norm(Z) / nx


def reconstruct(Z, Q) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if Z.ndim != 2 or Q.ndim != 2 or Z.shape[1] != Q.shape[1]:
        raise DimensionMismatch(f"Z {Z.shape} and Q {Q.shape} disagree on rank")
    return Z @ Q.T


def power_update(state: SiteTrackerState, X, Z=None) -> SiteTrackerState:
    """Refresh the basis with ``power_steps`` rounds of ``orth(X^T X Q)``.

    ``Z`` may be passed to reuse an already computed ``X Q`` for the first
    round.  Raises AllColumnsDegenerate when the batch carries no energy
    along the current basis.
    """
    X = linalg.as_matrix(X)
    if state.rank >= state.dim:
        # a basis spanning the whole space projects exactly; nothing to refine
        state.fail_counter = 0
        return state
    for i in range(state.config.power_steps):
        Zc = Z if (i == 0 and Z is not None) else X @ state.Q
        state.Q = linalg.orthonormalize(X.T @ Zc)
    state.fail_counter = 0
    return state


def expand(state: SiteTrackerState, X) -> SiteTrackerState:
    """Append residuals of up to ``expansion_size`` sampled rows of ``X``.

    Rows are drawn uniformly without replacement.  Residuals that vanish are
    discarded; if the result would exceed ``max_rank`` the residuals with the
    smallest norms are dropped first.
    """
    X = linalg.as_matrix(X)
    Q = state.Q
    m = min(state.config.expansion_size, X.shape[0])
    rows = state.rng.choice(X.shape[0], size=m, replace=False)
    R = X[rows]
    resid = R - (R @ Q) @ Q.T
    room = state.max_rank - Q.shape[1]
    if room <= 0:
        return state
    order = np.argsort(-np.linalg.norm(resid, axis=1), kind="stable")
    # drop tolerance is relative to the sampled row, not its residual
    new = linalg.extend_basis(Q, resid[order].T, refs=np.linalg.norm(R[order], axis=1))[:, :room]
    if new.shape[1]:
        state.Q = np.hstack([Q, new])
    return state


def hard_reset(state: SiteTrackerState, X) -> SiteTrackerState:
    """Rebuild the basis from the exact top singular directions of ``X``."""
    X = linalg.as_matrix(X)
    if _is_degenerate(X):
        raise DegenerateInit(f"site {state.site_id!r}: reset batch is (near-)zero")
    state.Q = linalg.truncated_svd(X, _reset_rank(state.config, X))
    state.fail_counter = 0
    return state


def step(state: SiteTrackerState, X) -> StepOutcome:
    """Compress one batch and advance the site's basis."""
    Z = compress(state, X)
    X = np.asarray(X, dtype=np.float64)
    basis = state.Q
    old_rank = state.rank
    skip = False
    if _is_degenerate(X):
        F = 1.0
        event = Event.SKIPPED
    else:
        F = fidelity(Z, X)
        cfg = state.config
        if F >= cfg.fidelity_threshold:
            try:
                power_update(state, X, Z)
                event = Event.POWER_UPDATED
            except AllColumnsDegenerate:
                hard_reset(state, X)
                event, skip = Event.HARD_RESET, True
        else:
            state.fail_counter += 1
            if state.fail_counter >= cfg.patience:
                hard_reset(state, X)
                event, skip = Event.HARD_RESET, True
            else:
                expand(state, X)
                event = Event.EXPANDED if state.rank > old_rank else Event.COUNTER_INCREMENTED
    post = F if state.Q is basis else fidelity(X @ state.Q, X)
    state.log.append(TrackerEvent(state.step_index, state.site_id, F, state.rank, event, old_rank))
    state.step_index += 1
    return StepOutcome(Z, F, event, old_rank, state.rank, skip, basis, post)


def write_event_log(events: Iterable[TrackerEvent], path) -> None:
    """Write events as JSON lines ``{step, site, fidelity, rank, event}``."""
    with open(Path(path), "w") as fh:
        for ev in events:
            fh.write(json.dumps(ev.to_dict(), sort_keys=True) + "\n")


def read_event_log(path) -> list[TrackerEvent]:
    out = []
    with open(Path(path)) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(
                TrackerEvent(d["step"], d["site"], d["fidelity"], d["rank"], Event(d["event"]), d.get("old_rank", d["rank"]))
            )
    return out
