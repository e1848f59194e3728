"""Oracle spectral scans over saved checkpoints.

For every checkpoint the probe set is run through the model in full mode,
each site's activations are stacked across cycles, and the exact top-k
right singular basis is used to measure how much of the activation
survives projection (optionally with quantized coefficients).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .. import linalg, quant
from ..model import SITES, forward_recursive, load_checkpoint


def find_checkpoints(ckpt_dir) -> list[Path]:
    """Checkpoint directories under ``ckpt_dir`` ordered by (seed dir, step)."""
    return sorted(p.parent for p in Path(ckpt_dir).rglob("manifest.json"))


def cosine(X: np.ndarray, Xhat: np.ndarray) -> float:
    nx, nh = np.linalg.norm(X), np.linalg.norm(Xhat)
    if nx == 0.0 or nh == 0.0:
        return 1.0 if nx == nh else 0.0
    return float(np.sum(X * Xhat) / (nx * nh))


def site_activations(params, cfg, probe_inputs) -> dict[str, np.ndarray]:
    fwd = forward_recursive(params, cfg, probe_inputs)
    out = {s: [] for s in SITES}
    for entry in fwd.tape:
        out[entry.site].append(entry.full)
    return {s: np.vstack(v) for s, v in out.items()}


def scan_activations(acts: dict[str, np.ndarray], ranks, bit_depths=(None,), sites=SITES) -> list[dict]:
    rows = []
    for site in sites:
        X = acts[site]
        kmax = min(max(ranks), *X.shape)
        V = linalg.truncated_svd(X, kmax)
        for k in ranks:
            Q = V[:, : min(k, kmax)]
            Z = X @ Q
            for bits in bit_depths:
                Zq = Z if bits is None else quant.dequantize(quant.quantize(Z, quant.ScaleMode.MAX_ABS, bits))
                rows.append({"site": site, "dim": X.shape[1], "rank": int(k), "bits": bits, "fidelity": cosine(X, Zq @ Q.T)})
    return rows


def spectral_scan(checkpoints, probe_inputs, ranks, bit_depths=(None,), sites=SITES) -> list[dict]:
    """Fidelity per (checkpoint, site, rank, bit depth) with a per-checkpoint oracle basis."""
    checkpoints = list(checkpoints)
    if len(checkpoints) < 2:
        raise ValueError("spectral_scan needs at least two checkpoints")
    rows = []
    for ck in checkpoints:
        params, cfg, manifest = load_checkpoint(ck)
        acts = site_activations(params, cfg, probe_inputs)
        for r in scan_activations(acts, ranks, bit_depths, sites):
            rows.append({"checkpoint": str(ck), "seed": manifest.get("rng_seed"), "step": manifest["step"], **r})
    return rows
