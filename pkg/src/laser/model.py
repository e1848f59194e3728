"""Weight-tied recursive transformer block with a hand-written reverse pass.

One block (RMS-normalized attention with rotary positions, then a SiLU-gated
MLP) is applied ``cycles`` times to a hidden state that is re-injected with
the token embedding on every cycle.  Four activations per cycle are *capture
sites*; they are the tensors the backward pass reads to form weight
gradients, and a compressor may replace them with ``Z Q^T`` reconstructions:

=================  ==================  ======================================
site               width               read by
=================  ==================  ======================================
``mlp_concat``     ``2 * mlp_inner``   gate/up nonlinearity backward
``mlp_inner_out``  ``mlp_inner``       down-projection weight gradient
``attn_out``       ``hidden_dim``      attention output-projection gradient
``mlp_out``        ``hidden_dim``      gate/up projection weight gradient
=================  ==================  ======================================

The forward pass always runs on exact activations; compression only changes
the point at which the backward Jacobians are evaluated.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import NonFiniteLoss, ShapeMismatch, TapeMismatch
from .maze import WALL
from .tracker import StepOutcome

SITES = ("mlp_concat", "mlp_inner_out", "attn_out", "mlp_out")
BLOCK_PARAMS = ("w_qkv", "w_o", "w_gu", "w_down")
PARAM_NAMES = ("embed",) + BLOCK_PARAMS + ("w_head",)
RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    num_heads: int = 4
    head_dim: int = 16
    mlp_inner: int = 192
    cycles: int = 8
    seq_len: int = 49
    vocab_size: int = 5
    rope_theta: float = 10000.0

    def __post_init__(self):
        if self.hidden_dim != self.num_heads * self.head_dim:
            raise ValueError("hidden_dim must equal num_heads * head_dim")
        if self.head_dim % 2:
            raise ValueError("rotary encoding needs an even head_dim")
        if self.cycles < 1 or self.seq_len < 1:
            raise ValueError("cycles and seq_len must be positive")
        if self.vocab_size != 5:
            raise ValueError("the maze vocabulary has exactly 5 tokens")

    def site_dims(self) -> dict[str, int]:
        return {
            "mlp_concat": 2 * self.mlp_inner,
            "mlp_inner_out": self.mlp_inner,
            "attn_out": self.hidden_dim,
            "mlp_out": self.hidden_dim,
        }


def full_scale_config() -> ModelConfig:
    """Full-scale shape (512 hidden, 24 cycles, 11x11 grids); shape checks only."""
    return ModelConfig(hidden_dim=512, num_heads=8, head_dim=64, mlp_inner=1536, cycles=24, seq_len=121)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(hidden_dim=8, num_heads=2, head_dim=4, mlp_inner=24, cycles=2, seq_len=6)
    base.update(overrides)
    return ModelConfig(**base)


def init_params(cfg: ModelConfig, seed) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    D, I, V = cfg.hidden_dim, cfg.mlp_inner, cfg.vocab_size

    def normal(shape, fan_in):
        return rng.standard_normal(shape) / math.sqrt(fan_in)

    return {
        "embed": rng.standard_normal((V, D)),
        "w_qkv": normal((D, 3 * D), D),
        "w_o": normal((D, D), D) * 0.5,
        "w_gu": normal((D, 2 * I), D),
        "w_down": normal((I, D), I) * 0.5,
        "w_head": normal((D, V), D),
    }


# ---------------------------------------------------------------------------
# primitives


def rmsnorm(x: np.ndarray):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / r, r


def rmsnorm_backward(dy: np.ndarray, x: np.ndarray, r: np.ndarray) -> np.ndarray:
    y = x / r
    return (dy - y * np.mean(dy * y, axis=-1, keepdims=True)) / r


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def rope_tables(cfg: ModelConfig, L: int):
    half = cfg.head_dim // 2
    freqs = cfg.rope_theta ** (-np.arange(half) * 2.0 / cfg.head_dim)
    ang = np.arange(L)[:, None] * freqs[None, :]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=-1)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=-1)
    return cos, sin


def _rotate_half(x):
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(x):
    h = x.shape[-1] // 2
    return np.concatenate([x[..., h:], -x[..., :h]], axis=-1)


def rope(x, cos, sin):
    return x * cos + _rotate_half(x) * sin


def rope_backward(dy, cos, sin):
    return dy * cos + _rotate_half_t(dy * sin)


# ---------------------------------------------------------------------------
# compression hook


class Compressor(Protocol):
    def wants(self, site: str) -> bool: ...

    def compress(self, site: str, cycle: int, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, StepOutcome | None]:
        """Return ``(Z, Q, outcome)`` for a ``N x dim`` activation."""
        ...


@dataclass
class TapeEntry:
    site: str
    cycle: int
    full: np.ndarray | None = None
    Z: np.ndarray | None = None
    basis: np.ndarray | None = None

    @property
    def compressed(self) -> bool:
        return self.full is None

    def activation(self) -> np.ndarray:
        """The tensor the backward pass should use (exact or ``Z Q^T``)."""
        if self.full is not None:
            return self.full
        return self.Z @ self.basis.T

    def stored_elements(self) -> int:
        if self.full is not None:
            return self.full.size
        return self.Z.size


@dataclass
class ForwardResult:
    logits: np.ndarray  # (B, L, V)
    tape: list[TapeEntry]
    outcomes: list[tuple[str, int, StepOutcome]]
    cache: dict = field(repr=False, default_factory=dict)

    @property
    def skip_backward(self) -> bool:
        return any(o.skip_backward for _, _, o in self.outcomes)


def _store(site, cycle, X, compressor, outcomes) -> TapeEntry:
    if compressor is None or not compressor.wants(site):
        return TapeEntry(site, cycle, full=X)
    Z, Q, outcome = compressor.compress(site, cycle, X)
    if outcome is not None:
        outcomes.append((site, cycle, outcome))
    if Q.shape[1] >= X.shape[1]:
        # a full-width basis saves nothing; keep the exact tensor
        return TapeEntry(site, cycle, full=X)
    return TapeEntry(site, cycle, Z=Z, basis=Q)


def block_forward(bp: dict, cfg: ModelConfig, h, e, cos, sin, B: int, L: int):
    """One cycle. Returns the new hidden state, site tensors and exact saves."""
    H, hd, I = cfg.num_heads, cfg.head_dim, cfg.mlp_inner
    N = B * L
    u = h + e
    a, r1 = rmsnorm(u)
    qkv = a @ bp["w_qkv"]
    q, k, v = (t.reshape(B, L, H, hd).transpose(0, 2, 1, 3) for t in np.split(qkv, 3, axis=1))
    q = rope(q, cos, sin)
    k = rope(k, cos, sin)
    s = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(hd)
    s -= s.max(axis=-1, keepdims=True)
    P = np.exp(s)
    P /= P.sum(axis=-1, keepdims=True)
    o = (P @ v).transpose(0, 2, 1, 3).reshape(N, H * hd)
    u2 = u + o @ bp["w_o"]
    b, r2 = rmsnorm(u2)
    gu = b @ bp["w_gu"]
    g, up = gu[:, :I], gu[:, I:]
    m = g * sigmoid(g) * up
    h_new = u2 + m @ bp["w_down"]
    sites = {"mlp_concat": gu, "mlp_inner_out": m, "attn_out": o, "mlp_out": b}
    saved = {"u": u, "r1": r1, "a": a, "q": q, "k": k, "v": v, "P": P, "u2": u2, "r2": r2}
    return h_new, sites, saved


def block_backward(bp: dict, cfg: ModelConfig, dh, acts: dict, saved: dict, cos, sin, B: int, L: int, grads: dict):
    """Reverse one cycle; accumulates block weight gradients into ``grads``.

    ``acts`` holds the (possibly reconstructed) site tensors.  Returns the
    gradient w.r.t. the cycle input ``u = h + e``.
    """
    H, hd, I = cfg.num_heads, cfg.head_dim, cfg.mlp_inner
    N = B * L
    m, gu, b, o = acts["mlp_inner_out"], acts["mlp_concat"], acts["mlp_out"], acts["attn_out"]

    grads["w_down"] += m.T @ dh
    dm = dh @ bp["w_down"].T
    g, up = gu[:, :I], gu[:, I:]
    sg = sigmoid(g)
    dg = dm * up * sg * (1.0 + g * (1.0 - sg))
    dup = dm * g * sg
    dgu = np.concatenate([dg, dup], axis=1)
    grads["w_gu"] += b.T @ dgu
    du2 = dh + rmsnorm_backward(dgu @ bp["w_gu"].T, saved["u2"], saved["r2"])

    grads["w_o"] += o.T @ du2
    do = (du2 @ bp["w_o"].T).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
    P, q, k, v = saved["P"], saved["q"], saved["k"], saved["v"]
    dv = P.transpose(0, 1, 3, 2) @ do
    dP = do @ v.transpose(0, 1, 3, 2)
    ds = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) / math.sqrt(hd)
    dq = rope_backward(ds @ k, cos, sin)
    dk = rope_backward(ds.transpose(0, 1, 3, 2) @ q, cos, sin)
    dqkv = np.concatenate([t.transpose(0, 2, 1, 3).reshape(N, H * hd) for t in (dq, dk, dv)], axis=1)
    grads["w_qkv"] += saved["a"].T @ dqkv
    return du2 + rmsnorm_backward(dqkv @ bp["w_qkv"].T, saved["u"], saved["r1"])


# ---------------------------------------------------------------------------
# full model


def forward_recursive(params: dict, cfg: ModelConfig, tokens, compressor: Compressor | None = None) -> ForwardResult:
    """Embed, run ``cfg.cycles`` tied cycles, project to logits.

    With ``compressor=None`` every site is stored in full.  Otherwise each
    site the compressor wants is handed over per cycle and only ``(Z, Q)``
    is kept on the tape.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ShapeMismatch(f"tokens must be (batch, seq_len), got {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ShapeMismatch("token ids out of vocabulary range")
    B, L = tokens.shape
    D = cfg.hidden_dim
    cos, sin = rope_tables(cfg, L)
    e = params["embed"][tokens].reshape(B * L, D)
    h = np.zeros_like(e)
    tape: list[TapeEntry] = []
    outcomes: list = []
    cycle_saves = []
    for c in range(cfg.cycles):
        h, sites, saved = block_forward(params, cfg, h, e, cos, sin, B, L)
        if not np.isfinite(h).all():
            raise NonFiniteLoss(f"hidden state became non-finite in cycle {c}")
        for name in SITES:
            tape.append(_store(name, c, sites[name], compressor, outcomes))
        cycle_saves.append(saved)
    f, r3 = rmsnorm(h)
    logits = (f @ params["w_head"]).reshape(B, L, cfg.vocab_size)
    cache = {"tokens": tokens, "saves": cycle_saves, "h": h, "r3": r3, "f": f, "cos": cos, "sin": sin}
    return ForwardResult(logits, tape, outcomes, cache)


def backward_with_reconstruction(params: dict, cfg: ModelConfig, fwd: ForwardResult, dlogits) -> dict[str, np.ndarray]:
    """Parameter gradients given ``dloss/dlogits``.

    Block gradients are summed over cycles.  Compressed tape entries are
    expanded to ``Z Q^T`` and the backward formulas are evaluated there; no
    gradient flows through ``Q`` itself.
    """
    cache = fwd.cache
    tokens = cache["tokens"]
    B, L = tokens.shape
    n = cfg.cycles
    if len(fwd.tape) != n * len(SITES) or len(cache["saves"]) != n:
        raise TapeMismatch(f"tape holds {len(fwd.tape)} entries, expected {n * len(SITES)}")
    dlogits = np.asarray(dlogits, dtype=np.float64).reshape(B * L, cfg.vocab_size)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    grads["w_head"] = cache["f"].T @ dlogits
    dh = rmsnorm_backward(dlogits @ params["w_head"].T, cache["h"], cache["r3"])
    de = np.zeros_like(dh)
    for c in reversed(range(n)):
        entries = fwd.tape[c * len(SITES) : (c + 1) * len(SITES)]
        if any(t.cycle != c for t in entries):
            raise TapeMismatch(f"tape entries out of order at cycle {c}")
        acts = {t.site: t.activation() for t in entries}
        du = block_backward(params, cfg, dh, acts, cache["saves"][c], cache["cos"], cache["sin"], B, L, grads)
        de += du
        dh = du
    np.add.at(grads["embed"], tokens.reshape(-1), de)
    return grads


def cross_entropy(logits, targets, mask=None):
    """Mean token cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    V = logits.shape[-1]
    flat = logits.reshape(-1, V)
    t = np.asarray(targets).reshape(-1)
    w = np.ones(t.shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    denom = max(w.sum(), 1.0)
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(np.sum(w * logp[np.arange(len(t)), t])) / denom
    grad = np.exp(logp)
    grad[np.arange(len(t)), t] -= 1.0
    grad *= (w / denom)[:, None]
    return loss, grad.reshape(logits.shape)


# ---------------------------------------------------------------------------
# optimization


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: dict, max_norm: float):
    """Scale ``grads`` so their global norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class AdamWState:
    m: dict
    v: dict
    t: int = 0


def adamw_init(params: dict) -> AdamWState:
    return AdamWState({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adamw_update(params: dict, grads: dict, state: AdamWState, lr: float, betas=(0.9, 0.95), eps=1e-8, weight_decay=1e-2):
    """Decoupled weight decay Adam step; mutates ``params`` and ``state``."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k in params:
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        params[k] *= 1.0 - lr * weight_decay
        params[k] -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)
    return params


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    min_lr: float = 0.0
    warmup_steps: int = 0
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 1e-2
    grad_clip: float = 1.0


def cosine_lr(step: int, total: int, opt: OptimConfig) -> float:
    if opt.warmup_steps and step < opt.warmup_steps:
        return opt.lr * (step + 1) / opt.warmup_steps
    span = max(total - opt.warmup_steps, 1)
    frac = min(max(step - opt.warmup_steps, 0) / span, 1.0)
    return opt.min_lr + 0.5 * (opt.lr - opt.min_lr) * (1.0 + math.cos(math.pi * frac))


def train_step(params: dict, opt_state: AdamWState, cfg: ModelConfig, inputs, targets, lr: float,
               opt: OptimConfig = OptimConfig(), compressor: Compressor | None = None) -> dict:
    """Forward, backward, clip and AdamW update on one batch.

    If any compressed site hard-reset during the forward pass the batch is
    consumed without touching the parameters.
    """
    fwd = forward_recursive(params, cfg, inputs, compressor)
    loss, dlogits = cross_entropy(fwd.logits, targets)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss became {loss}")
    acc = float(np.mean(fwd.logits.argmax(-1) == np.asarray(targets)))
    result = {"loss": loss, "token_acc": acc, "skipped": fwd.skip_backward, "grad_norm": float("nan"), "forward": fwd}
    if fwd.skip_backward:
        return result
    grads = backward_with_reconstruction(params, cfg, fwd, dlogits)
    grads, norm = clip_grad_norm(grads, opt.grad_clip)
    if not math.isfinite(norm):
        raise NonFiniteLoss(f"gradient norm became {norm}")
    adamw_update(params, grads, opt_state, lr, opt.betas, weight_decay=opt.weight_decay)
    result["grad_norm"] = norm
    return result


# ---------------------------------------------------------------------------
# evaluation


def prediction_metrics(pred, inputs, targets) -> dict:
    """Token accuracy over non-wall cells and solve rate (percent).

    A maze counts as solved when every non-wall cell is predicted exactly,
    so the path, its endpoints and the untouched passages must all agree.
    """
    pred = np.asarray(pred).reshape(len(targets), -1)
    inputs = np.asarray(inputs).reshape(pred.shape)
    targets = np.asarray(targets).reshape(pred.shape)
    relevant = inputs != WALL
    correct = (pred == targets) & relevant
    token_acc = 100.0 * correct.sum() / max(relevant.sum(), 1)
    solved = np.all((pred == targets) | ~relevant, axis=1)
    return {"token_accuracy": float(token_acc), "solve_rate": float(100.0 * solved.mean())}


def predict(params: dict, cfg: ModelConfig, inputs, batch_size: int = 100) -> np.ndarray:
    inputs = np.asarray(inputs)
    out = []
    for i in range(0, len(inputs), batch_size):
        out.append(forward_recursive(params, cfg, inputs[i : i + batch_size]).logits.argmax(-1))
    return np.concatenate(out, axis=0)


def evaluate(params: dict, cfg: ModelConfig, inputs, targets, batch_size: int = 100) -> dict:
    if len(inputs) == 0:
        raise ValueError("validation set is empty")
    return prediction_metrics(predict(params, cfg, inputs, batch_size), inputs, targets)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, params: dict, cfg: ModelConfig, step: int, rng_seed: int, extra: dict | None = None) -> Path:
    """Raw little-endian float64 blocks in ``params.bin`` plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blocks = []
    offset = 0
    with open(directory / "params.bin", "wb") as fh:
        for name in PARAM_NAMES:
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            fh.write(arr.tobytes())
            blocks.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {"config": asdict(cfg), "step": step, "rng_seed": rng_seed, "blocks": blocks}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    raw = (directory / "params.bin").read_bytes()
    params = {}
    for blk in manifest["blocks"]:
        count = int(np.prod(blk["shape"]))
        params[blk["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=blk["offset"]).reshape(blk["shape"]).astype(np.float64)
    return params, ModelConfig(**manifest["config"]), manifest
