"""Training runs across modes and seeds."""

from __future__ import annotations

import logging
import math
import statistics
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import linalg, maze, tracker
from ..compression import (
    LaserCompressor,
    OracleSVDCompressor,
    RandomProjectionCompressor,
    StaticBasisCompressor,
    random_basis,
)
from ..errors import ConfigError, NonFiniteLoss
from ..model import adamw_init, cosine_lr, evaluate, init_params, save_checkpoint, train_step
from ..tracker import EVENT_SEVERITY, TrackerEvent
from .config import Mode, RunConfig
from .memory import memory_report

log = logging.getLogger(__name__)


@dataclass
class RunMetrics:
    seed: int
    mode: str
    steps: list[dict] = field(default_factory=list)
    traces: list[dict] = field(default_factory=list)
    shadow: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    final_ranks: dict = field(default_factory=dict)
    memory: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    failed: str | None = None
    events: list[TrackerEvent] = field(default_factory=list, repr=False)
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        # kept out of metrics.json: bulky (own JSONL file) / machine dependent
        d.pop("events")
        d.pop("wall_seconds")
        return d


@dataclass
class ExperimentResult:
    config: RunConfig
    runs: dict[int, RunMetrics]
    aggregate: dict

    @property
    def failed_seeds(self) -> list[int]:
        return [s for s, r in self.runs.items() if r.failed]


def load_data(cfg: RunConfig):
    """Train/val instance lists per the data section of ``cfg``."""
    d = cfg.data
    if d.path and Path(d.path).exists():
        instances = maze.read_dataset(d.path)
    elif d.path:
        raise ConfigError(f"dataset {d.path} does not exist")
    else:
        instances = maze.generate_dataset(d.train_count + d.val_count, d.size, d.seed)
    if instances[0].seq_len != cfg.model.seq_len:
        raise ConfigError(f"dataset grid ({instances[0].width}x{instances[0].height}) does not match model seq_len {cfg.model.seq_len}")
    if len(instances) < d.train_count + d.val_count:
        raise ConfigError(f"dataset has {len(instances)} mazes, need {d.train_count + d.val_count}")
    train, val = maze.split_dataset(instances[: d.train_count + d.val_count], d.val_count, d.seed)
    return maze.stack_tokens(train), maze.stack_tokens(val)


def build_compressor(cfg: RunConfig, seed: int):
    comp = cfg.compression
    ranks = comp.site_ranks(cfg.model)
    if cfg.mode is Mode.BASELINE:
        return None
    if cfg.mode is Mode.LASER:
        return LaserCompressor(comp.tracker_configs(cfg.model, seed))
    if cfg.mode is Mode.ORACLE_SVD:
        return OracleSVDCompressor(ranks)
    if cfg.mode is Mode.STATIC_BASIS:
        return StaticBasisCompressor(ranks)
    return RandomProjectionCompressor(ranks, seed)


class _Recorder:
    """Wraps a compressor and collects per-site fidelity/rank/event per step."""

    def __init__(self, inner):
        self.inner = inner
        self.current: dict[str, list] = defaultdict(list)

    def wants(self, site):
        return self.inner.wants(site)

    def compress(self, site, cycle, X):
        Z, Q, out = self.inner.compress(site, cycle, X)
        if out is not None:
            self.current[site].append((out.fidelity, out.new_rank, out.event))
        else:
            self.current[site].append((tracker.fidelity(Z, X), Q.shape[1], None))
        return Z, Q, out

    def flush(self, step: int) -> list[dict]:
        rows = []
        for site in sorted(self.current):
            recs = self.current[site]
            events = [e for _, _, e in recs if e is not None]
            worst = max(events, key=EVENT_SEVERITY.__getitem__).value if events else "Fixed"
            rows.append({
                "step": step,
                "site": site,
                "fidelity": float(np.mean([f for f, _, _ in recs])),
                "rank": int(recs[-1][1]),
                "event": worst,
            })
        self.current.clear()
        return rows


class _Shadow:
    """Equal-rank reference fidelities computed beside the live tracker.

    On logged steps each tracked batch is also projected onto (a) its own
    exact top-k singular basis, (b) the top-k basis of the very first batch
    seen at that site and (c) the first k columns of a fixed random
    orthonormal basis, where k is the rank the tracker used.
    """

    def __init__(self, seed: int, log_every: int):
        self.seed = seed
        self.log_every = log_every
        self.static: dict[str, np.ndarray] = {}
        self.random: dict[str, np.ndarray] = {}
        self.step = 0
        self.current: dict[str, list] = defaultdict(list)

    def __call__(self, site, cycle, X, out):
        if site not in self.static:
            self.static[site] = linalg.truncated_svd(X, min(X.shape))
            self.random[site] = random_basis(X.shape[1], X.shape[1], self.seed, site)
        if self.log_every <= 0 or self.step % self.log_every:
            return
        k = out.basis.shape[1]
        fid = lambda Q: tracker.fidelity(X @ Q, X)
        oracle = linalg.truncated_svd(X, min(k, *X.shape))
        static = self.static[site][:, : min(k, self.static[site].shape[1])]
        self.current[site].append((out.fidelity, fid(oracle), fid(static), fid(self.random[site][:, :k]), k))

    def flush(self) -> list[dict]:
        rows = []
        for site in sorted(self.current):
            arr = np.array(self.current[site], dtype=float)
            rows.append({
                "step": self.step,
                "site": site,
                "rank": int(arr[-1, 4]),
                "laser": float(arr[:, 0].mean()),
                "oracle": float(arr[:, 1].mean()),
                "static": float(arr[:, 2].mean()),
                "random": float(arr[:, 3].mean()),
            })
        self.current.clear()
        self.step += 1
        return rows


def run_seed(cfg: RunConfig, seed: int, data=None, out_dir=None) -> RunMetrics:
    """Train one seed end to end and return its metrics."""
    t0 = time.perf_counter()
    (xtr, ytr), (xva, yva) = data if data is not None else load_data(cfg)
    tc = cfg.train
    opt = tc.optim()
    params = init_params(cfg.model, seed)
    opt_state = adamw_init(params)
    rng = np.random.default_rng([seed, 1])
    inner = build_compressor(cfg, seed)
    shadow = None
    if isinstance(inner, LaserCompressor):
        shadow = _Shadow(seed, tc.log_every)
        inner.on_step = shadow
    comp = _Recorder(inner) if inner is not None else None
    metrics = RunMetrics(seed=seed, mode=cfg.mode.value)
    seed_dir = Path(out_dir) / f"seed_{seed}" if out_dir else None

    steps_per_epoch = math.ceil(len(xtr) / tc.batch_size)
    total = steps_per_epoch * tc.epochs
    step = 0
    skipped = 0
    try:
        for epoch in range(tc.epochs):
            perm = rng.permutation(len(xtr))
            for i in range(steps_per_epoch):
                idx = perm[i * tc.batch_size : (i + 1) * tc.batch_size]
                lr = cosine_lr(step, total, opt)
                res = train_step(params, opt_state, cfg.model, xtr[idx], ytr[idx], lr, opt, comp)
                skipped += res["skipped"]
                metrics.steps.append({
                    "step": step, "epoch": epoch, "loss": res["loss"], "token_acc": res["token_acc"],
                    "lr": lr, "skipped": bool(res["skipped"]),
                })
                if comp is not None:
                    metrics.traces.extend(comp.flush(step))
                if shadow is not None:
                    metrics.shadow.extend(shadow.flush())
                step += 1
                if seed_dir and tc.ckpt_every and step % tc.ckpt_every == 0:
                    save_checkpoint(seed_dir / f"ckpt_{step:06d}", params, cfg.model, step, seed, {"mode": cfg.mode.value})
            if (epoch + 1) % tc.eval_every == 0 or epoch + 1 == tc.epochs:
                ev = evaluate(params, cfg.model, xva, yva)
                metrics.evals.append({"epoch": epoch, "step": step, **ev})
                log.info("seed %d epoch %d loss %.4f val_acc %.2f solved %.2f", seed, epoch, res["loss"], ev["token_accuracy"], ev["solve_rate"])
    except NonFiniteLoss as exc:
        metrics.failed = f"step {step}: {exc}"
        log.error("seed %d aborted: %s", seed, exc)

    if metrics.evals:
        last = metrics.evals[-1]
        metrics.final = {"val_acc": last["token_accuracy"], "solve_rate": last["solve_rate"]}
    if isinstance(inner, LaserCompressor):
        metrics.final_ranks = inner.ranks()
        metrics.events = [ev for s in sorted(inner.states) for ev in inner.states[s].log]
    elif inner is not None:
        metrics.final_ranks = cfg.compression.site_ranks(cfg.model)
    metrics.memory = memory_report(cfg.model, tc.batch_size, metrics.final_ranks, cfg.bytes_per_elem).to_dict()
    ev_counts = defaultdict(int)
    for e in metrics.events:
        ev_counts[e.event.value] += 1
    metrics.counts = {"steps": step, "skipped_batches": skipped, **dict(sorted(ev_counts.items()))}
    if seed_dir and not metrics.failed:
        save_checkpoint(seed_dir / f"ckpt_{step:06d}", params, cfg.model, step, seed, {"mode": cfg.mode.value})
    metrics.wall_seconds = time.perf_counter() - t0
    return metrics


def aggregate(runs: dict[int, RunMetrics]) -> dict:
    """Mean and sample standard deviation (n-1) of final metrics over seeds.

    The std of a single seed is reported as 0.
    """
    ok = [r for r in runs.values() if not r.failed and r.final]
    out = {"n_seeds": len(ok), "failed_seeds": sorted(s for s, r in runs.items() if r.failed)}
    keys = ("val_acc", "solve_rate")
    for key in keys:
        vals = [r.final[key] for r in ok]
        out[key] = {
            "mean": statistics.fmean(vals) if vals else float("nan"),
            "std": statistics.stdev(vals) if len(vals) > 1 else 0.0,
            "values": vals,
        }
    mems = [r.memory["eligible_savings_pct"] for r in ok]
    out["eligible_savings_pct"] = {"mean": statistics.fmean(mems) if mems else float("nan"), "values": mems}
    out["eligible_bytes_compressed"] = {"mean": statistics.fmean([r.memory["eligible_compressed"] for r in ok]) if ok else float("nan")}
    out["total_bytes_compressed"] = {"mean": statistics.fmean([r.memory["total_compressed"] for r in ok]) if ok else float("nan")}
    return out


def run_experiment(cfg: RunConfig, out_dir=None, jobs: int = 1) -> ExperimentResult:
    """Train every seed in ``cfg.seeds`` and aggregate the final metrics."""
    data = load_data(cfg)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {s: pool.submit(run_seed, cfg, s, data, out_dir) for s in cfg.seeds}
            runs = {s: f.result() for s, f in futures.items()}
    else:
        runs = {s: run_seed(cfg, s, data, out_dir) for s in cfg.seeds}
    return ExperimentResult(cfg, runs, aggregate(runs))
