"""Site compressors plugged into the recursive forward pass.

``LaserCompressor`` runs one tracker per site.  The others are reference
strategies with a fixed rank per site: an exact per-batch truncated SVD
(upper bound for any rank-k projection), a basis frozen from the first
batch, and a seeded data-independent random projection.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import linalg, tracker
from .tracker import SiteTrackerState, TrackerConfig


@dataclass
class LaserCompressor:
    configs: dict[str, TrackerConfig]
    states: dict[str, SiteTrackerState] = field(default_factory=dict)
    # step counter stamped into every site's event log by the caller
    train_step: int = 0
    on_step: object = None

    def wants(self, site: str) -> bool:
        return site in self.configs

    def compress(self, site, cycle, X):
        st = self.states.get(site)
        if st is None:
            st = tracker.init_site(site, X, self.configs[site])
            self.states[site] = st
        out = tracker.step(st, X)
        if self.on_step is not None:
            self.on_step(site, cycle, X, out)
        return out.Z, out.basis, out

    def ranks(self) -> dict[str, int]:
        return {s: st.rank for s, st in self.states.items()}


@dataclass
class OracleSVDCompressor:
    ranks: dict[str, int]

    def wants(self, site: str) -> bool:
        return site in self.ranks

    def compress(self, site, cycle, X):
        if self.ranks[site] >= min(X.shape):
            # rank covers the batch's row space: lossless, keep it exact
            Q = np.eye(X.shape[1])
        else:
            Q = linalg.truncated_svd(X, self.ranks[site])
        return X @ Q, Q, None


@dataclass
class StaticBasisCompressor:
    ranks: dict[str, int]
    bases: dict[str, np.ndarray] = field(default_factory=dict)

    def wants(self, site: str) -> bool:
        return site in self.ranks

    def compress(self, site, cycle, X):
        if site not in self.bases:
            self.bases[site] = linalg.truncated_svd(X, min(self.ranks[site], *X.shape))
        Q = self.bases[site]
        return X @ Q, Q, None


def random_basis(dim: int, rank: int, seed: int, site: str = "") -> np.ndarray:
    rng = np.random.default_rng([seed, zlib.crc32(site.encode())])
    return linalg.orthonormalize(rng.standard_normal((dim, rank)))


@dataclass
class RandomProjectionCompressor:
    ranks: dict[str, int]
    seed: int = 0
    bases: dict[str, np.ndarray] = field(default_factory=dict)

    def wants(self, site: str) -> bool:
        return site in self.ranks

    def compress(self, site, cycle, X):
        if site not in self.bases:
            self.bases[site] = random_basis(X.shape[1], min(self.ranks[site], X.shape[1]), self.seed, site)
        Q = self.bases[site]
        return X @ Q, Q, None
