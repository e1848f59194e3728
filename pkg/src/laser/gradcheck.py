"""Gradient diagnostics: finite differences and compressed-vs-exact sweeps."""

from __future__ import annotations

import numpy as np

from . import linalg
from .compression import OracleSVDCompressor
from .model import (
    PARAM_NAMES,
    ForwardResult,
    TapeEntry,
    backward_with_reconstruction,
    cross_entropy,
    forward_recursive,
)


def flatten(grads: dict) -> np.ndarray:
    return np.concatenate([grads[k].ravel() for k in PARAM_NAMES])


def loss_and_grads(params, cfg, inputs, targets, compressor=None):
    fwd = forward_recursive(params, cfg, inputs, compressor)
    loss, dlogits = cross_entropy(fwd.logits, targets)
    return loss, backward_with_reconstruction(params, cfg, fwd, dlogits), fwd


def finite_difference(params, cfg, inputs, targets, name: str, index, h: float = 1e-5) -> float:
    """Central difference of the loss w.r.t. one parameter entry."""
    p = {k: v.copy() for k, v in params.items()}
    p[name][index] += h
    up = cross_entropy(forward_recursive(p, cfg, inputs).logits, targets)[0]
    p[name][index] -= 2 * h
    down = cross_entropy(forward_recursive(p, cfg, inputs).logits, targets)[0]
    return (up - down) / (2 * h)


def reconstruction_error(exact: ForwardResult, approx: ForwardResult) -> float:
    """Root-sum-square of ``X_hat - X`` over all tape entries."""
    return float(np.sqrt(sum(np.sum((a.activation() - e.activation()) ** 2) for a, e in zip(approx.tape, exact.tape))))


def rank_for(dim: int, frac: float) -> int:
    return max(1, int(dim * frac))


def gradient_error_sweep(params, cfg, inputs, targets, fracs, sites=None) -> list[dict]:
    """Exact vs oracle-truncated gradients on one batch, one row per fraction."""
    dims = cfg.site_dims()
    sites = tuple(dims) if sites is None else tuple(sites)
    _, g, _ = loss_and_grads(params, cfg, inputs, targets)
    ref = flatten(g)
    exact = forward_recursive(params, cfg, inputs)
    rows = []
    for frac in fracs:
        ranks = {s: rank_for(dims[s], frac) for s in sites}
        _, gc, fwd = loss_and_grads(params, cfg, inputs, targets, OracleSVDCompressor(ranks))
        approx = flatten(gc)
        rows.append({
            "frac": frac,
            "ranks": ranks,
            "eps": reconstruction_error(exact, fwd),
            "grad_err": float(np.linalg.norm(approx - ref)),
            "grad_norm": float(np.linalg.norm(ref)),
            "cosine": float(approx @ ref / (np.linalg.norm(approx) * np.linalg.norm(ref))),
        })
    return rows


def _perturbed(fwd: ForwardResult, deltas: list[np.ndarray]) -> ForwardResult:
    tape = [TapeEntry(t.site, t.cycle, full=t.activation() + d) for t, d in zip(fwd.tape, deltas)]
    return ForwardResult(fwd.logits, tape, [], fwd.cache)


def estimate_lipschitz(params, cfg, inputs, targets, probes: int = 8, rel_step: float = 1e-3, seed: int = 0) -> float:
    """Empirical ``L_J * ||lambda||``: worst gradient change per unit activation change.

    Random perturbations of relative size ``rel_step`` are applied to every
    tape entry at once and the backward pass is re-evaluated there.
    """
    rng = np.random.default_rng(seed)
    fwd = forward_recursive(params, cfg, inputs)
    _, dlogits = cross_entropy(fwd.logits, targets)
    ref = flatten(backward_with_reconstruction(params, cfg, fwd, dlogits))
    best = 0.0
    for _ in range(probes):
        deltas = []
        for t in fwd.tape:
            d = rng.standard_normal(t.full.shape)
            deltas.append(d * rel_step * linalg.frobenius_norm(t.full) / linalg.frobenius_norm(d))
        size = float(np.sqrt(sum(np.sum(d * d) for d in deltas)))
        g = flatten(backward_with_reconstruction(params, cfg, _perturbed(fwd, deltas), dlogits))
        best = max(best, float(np.linalg.norm(g - ref)) / size)
    return best


def gradient_cosine_check(params, cfg, inputs, targets, fracs=(1.0, 0.5, 0.25, 0.125), slack: float = 0.05, **lip_kw) -> dict:
    """Gradient cosine per rank fraction against ``1 - 2 L eps / ||g||``.

    Returns the table rows (each with its ``bound``), the estimated
    constant and two verdicts: cosines nonincreasing as ``eps`` grows and
    every cosine above its bound minus ``slack``.
    """
    L = estimate_lipschitz(params, cfg, inputs, targets, **lip_kw)
    rows = gradient_error_sweep(params, cfg, inputs, targets, fracs)
    for r in rows:
        r["bound"] = 1.0 - 2.0 * L * r["eps"] / r["grad_norm"]
    by_eps = sorted(rows, key=lambda r: r["eps"])
    monotone = all(b["cosine"] <= a["cosine"] + 1e-12 for a, b in zip(by_eps, by_eps[1:]))
    return {
        "rows": rows,
        "lipschitz": L,
        "monotone": monotone,
        "within_bound": all(r["cosine"] >= r["bound"] - slack for r in rows),
    }


def pooled_slope(points) -> float:
    """Least-squares slope of ``log grad_err`` against ``log eps``."""
    pts = [(e, g) for e, g in points if e > 0 and g > 0]
    e = np.log([p[0] for p in pts])
    g = np.log([p[1] for p in pts])
    return float(np.polyfit(e, g, 1)[0])
