"""Run configuration: dataclasses plus a TOML loader/writer."""

from __future__ import annotations

import enum
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..errors import ConfigError
from ..model import SITES, ModelConfig, OptimConfig
from ..tracker import TrackerConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class Mode(str, enum.Enum):
    BASELINE = "baseline"
    LASER = "laser"
    ORACLE_SVD = "oracle_svd"
    STATIC_BASIS = "static_basis"
    RANDOM_PROJECTION = "random_projection"


@dataclass(frozen=True)
class DataConfig:
    path: str | None = None
    size: int = 7
    train_count: int = 2500
    val_count: int = 500
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    batch_size: int = 32
    lr: float = 3e-3
    min_lr: float = 1e-4
    warmup_steps: int = 20
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    # shadow baselines every N steps (0 = off)
    log_every: int = 10
    ckpt_every: int = 0
    eval_every: int = 1

    def optim(self) -> OptimConfig:
        return OptimConfig(
            lr=self.lr,
            min_lr=self.min_lr,
            warmup_steps=self.warmup_steps,
            betas=(self.beta1, self.beta2),
            weight_decay=self.weight_decay,
            grad_clip=self.grad_clip,
        )


@dataclass(frozen=True)
class CompressionConfig:
    """Which sites get compressed and at what starting rank."""

    tracker: TrackerConfig = TrackerConfig(initial_rank=8, max_rank=512)
    # k0 = round(dim * rank_fraction) per site; overrides tracker.initial_rank
    rank_fraction: float | None = 0.125
    sites: tuple[str, ...] = ("mlp_concat", "mlp_inner_out")
    # listed sites narrower than this stay uncompressed
    min_compress_dim: int = 0

    def active_sites(self, model: ModelConfig) -> tuple[str, ...]:
        dims = model.site_dims()
        return tuple(s for s in self.sites if dims[s] >= self.min_compress_dim)

    def initial_rank(self, dim: int) -> int:
        if self.rank_fraction is None:
            return min(self.tracker.initial_rank, dim)
        return max(1, min(dim, round(dim * self.rank_fraction)))

    def site_ranks(self, model: ModelConfig) -> dict[str, int]:
        dims = model.site_dims()
        return {s: self.initial_rank(dims[s]) for s in self.active_sites(model)}

    def tracker_configs(self, model: ModelConfig, seed: int) -> dict[str, TrackerConfig]:
        dims = model.site_dims()
        out = {}
        for s in self.active_sites(model):
            k0 = self.initial_rank(dims[s])
            max_rank = max(k0, min(self.tracker.max_rank, dims[s]))
            out[s] = replace(self.tracker, initial_rank=k0, max_rank=max_rank, seed=seed)
        return out


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    compression: CompressionConfig = CompressionConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    mode: Mode = Mode.LASER
    seeds: tuple[int, ...] = (100, 101, 102)
    bytes_per_elem: int = 4
    output_dir: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for s in self.compression.sites:
            if s not in SITES:
                raise ConfigError(f"unknown site {s!r}; expected one of {SITES}")
        if self.train.batch_size < 1 or self.train.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.model.seq_len != self.data.size * self.data.size:
            raise ConfigError(f"seq_len {self.model.seq_len} does not match {self.data.size}x{self.data.size} mazes")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["seeds"] = list(self.seeds)
        d["compression"]["sites"] = list(self.compression.sites)
        return d


_SECTIONS = {"model": ModelConfig, "tracker": TrackerConfig, "train": TrainConfig, "data": DataConfig}


def _build(cls, values: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    tracker_raw = raw.get("tracker", {})
    comp_keys = {"rank_fraction", "sites", "min_compress_dim"}
    comp = {k: tracker_raw.pop(k) for k in list(tracker_raw) if k in comp_keys}
    tracker_raw.setdefault("initial_rank", 8)
    tracker = _build(TrackerConfig, tracker_raw, "tracker")
    compression = CompressionConfig(
        tracker=tracker,
        rank_fraction=comp.get("rank_fraction", CompressionConfig.rank_fraction),
        sites=tuple(comp.get("sites", CompressionConfig.sites)),
        min_compress_dim=int(comp.get("min_compress_dim", 0)),
    )
    run = dict(raw.get("run", {}))
    try:
        mode = Mode(run.pop("mode", Mode.LASER.value))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    seeds = tuple(int(s) for s in run.pop("seeds", (100, 101, 102)))
    cfg = RunConfig(
        model=_build(ModelConfig, raw.get("model", {}), "model"),
        compression=compression,
        train=_build(TrainConfig, raw.get("train", {}), "train"),
        data=_build(DataConfig, raw.get("data", {}), "data"),
        mode=mode,
        seeds=seeds,
        bytes_per_elem=int(run.pop("bytes_per_elem", 4)),
        output_dir=run.pop("output_dir", None),
    )
    if run:
        raise ConfigError(f"[run] unknown keys: {sorted(run)}")
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return repr(v)


def dump_config(cfg: RunConfig) -> str:
    """Flat TOML text that ``load_config`` reads back to an equal config."""
    d = cfg.to_dict()
    tracker = dict(d["compression"]["tracker"])
    tracker.pop("seed", None)
    tracker["rank_fraction"] = d["compression"]["rank_fraction"]
    tracker["sites"] = d["compression"]["sites"]
    tracker["min_compress_dim"] = d["compression"]["min_compress_dim"]
    sections = {
        "model": d["model"],
        "tracker": tracker,
        "train": d["train"],
        "data": d["data"],
        "run": {"mode": d["mode"], "seeds": d["seeds"], "bytes_per_elem": d["bytes_per_elem"], "output_dir": d["output_dir"]},
    }
    lines = []
    for name, values in sections.items():
        lines.append(f"[{name}]")
        for k, v in values.items():
            if v is None:
                continue
            lines.append(f"{k} = {_fmt(v)}")
        lines.append("")
    return "\n".join(lines)
