"""Analytical activation-memory accounting.

A site of width ``D`` stored in full over ``n`` cycles costs ``n * B_eff * D``
elements (``B_eff`` = batch x sequence length).  Compressed, it costs the
per-cycle coefficients plus one shared basis: ``n * B_eff * k + D * k``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from ..model import SITES, ModelConfig


@dataclass
class SiteMemory:
    site: str
    dim: int
    b_eff: int
    cycles: int
    rank: int | None  # None: stored in full
    elems_full: int
    elems_compressed: int
    bytes_full: int
    bytes_compressed: int
    savings_pct: float


@dataclass
class MemoryReport:
    sites: list[SiteMemory]
    bytes_per_elem: int

    def _total(self, attr: str, eligible_only: bool) -> int:
        return sum(getattr(s, attr) for s in self.sites if s.rank is not None or not eligible_only)

    @property
    def total_full(self) -> int:
        return self._total("bytes_full", False)

    @property
    def total_compressed(self) -> int:
        return self._total("bytes_compressed", False)

    @property
    def eligible_full(self) -> int:
        return self._total("bytes_full", True)

    @property
    def eligible_compressed(self) -> int:
        return self._total("bytes_compressed", True)

    @property
    def total_savings_pct(self) -> float:
        return 100.0 * (1.0 - self.total_compressed / self.total_full)

    @property
    def eligible_savings_pct(self) -> float:
        if not self.eligible_full:
            return 0.0
        return 100.0 * (1.0 - self.eligible_compressed / self.eligible_full)

    def site(self, name: str) -> SiteMemory:
        return next(s for s in self.sites if s.site == name)

    def to_dict(self) -> dict:
        return {
            "sites": [asdict(s) for s in self.sites],
            "bytes_per_elem": self.bytes_per_elem,
            "total_full": self.total_full,
            "total_compressed": self.total_compressed,
            "total_savings_pct": self.total_savings_pct,
            "eligible_full": self.eligible_full,
            "eligible_compressed": self.eligible_compressed,
            "eligible_savings_pct": self.eligible_savings_pct,
        }


def site_memory(site: str, dim: int, b_eff: int, cycles: int, rank: int | None, bytes_per_elem: int = 4) -> SiteMemory:
    full = cycles * b_eff * dim
    comp = full if rank is None else cycles * b_eff * rank + dim * rank
    return SiteMemory(
        site, dim, b_eff, cycles, rank, full, comp,
        full * bytes_per_elem, comp * bytes_per_elem,
        100.0 * (1.0 - comp / full),
    )


def memory_report(model: ModelConfig, batch_size: int, final_ranks: dict[str, int], bytes_per_elem: int = 4) -> MemoryReport:
    """Per-site and total activation memory given the final rank per compressed site."""
    b_eff = batch_size * model.seq_len
    dims = model.site_dims()
    sites = [site_memory(s, dims[s], b_eff, model.cycles, final_ranks.get(s), bytes_per_elem) for s in SITES]
    return MemoryReport(sites, bytes_per_elem)
