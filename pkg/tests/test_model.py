import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laser import gradcheck, maze
from laser import model as M
from laser.compression import LaserCompressor, OracleSVDCompressor
from laser.errors import NonFiniteLoss, ShapeMismatch, TapeMismatch
from laser.tracker import StepOutcome, TrackerConfig


def batch(cfg, B=2, seed=0):
    g = np.random.default_rng(seed)
    return g.integers(0, 5, (B, cfg.seq_len)), g.integers(0, 5, (B, cfg.seq_len))


def test_config_invariants():
    with pytest.raises(ValueError):
        M.ModelConfig(hidden_dim=10, num_heads=4, head_dim=4)
    with pytest.raises(ValueError):
        M.ModelConfig(vocab_size=6)
    dims = M.ModelConfig().site_dims()
    assert dims == {"mlp_concat": 384, "mlp_inner_out": 192, "attn_out": 64, "mlp_out": 64}
    assert M.full_scale_config().site_dims()["mlp_concat"] == 3072


def test_tape_has_one_entry_per_site_and_cycle():
    cfg = M.tiny_config(cycles=24)
    fwd = M.forward_recursive(M.init_params(cfg, 0), cfg, batch(cfg)[0])
    for site in M.SITES:
        assert [t.cycle for t in fwd.tape if t.site == site] == list(range(24))
    assert fwd.logits.shape == (2, cfg.seq_len, 5)


def test_bad_tokens():
    cfg = M.tiny_config()
    p = M.init_params(cfg, 0)
    with pytest.raises(ShapeMismatch):
        M.forward_recursive(p, cfg, np.full((1, 6), 5))
    with pytest.raises(ShapeMismatch):
        M.forward_recursive(p, cfg, np.zeros((1, 2, 6), dtype=int))


def _scalar_forward(p, cfg, tokens):
    """Loop-by-loop single-cycle forward for a single sequence."""
    D, H, hd, I = cfg.hidden_dim, cfg.num_heads, cfg.head_dim, cfg.mlp_inner
    L = len(tokens)

    def norm(v):
        r = math.sqrt(sum(x * x for x in v) / len(v) + M.RMS_EPS)
        return [x / r for x in v]

    def matvec(v, W):
        return [sum(v[i] * W[i][j] for i in range(len(v))) for j in range(len(W[0]))]

    def rot(v, pos):
        half = hd // 2
        out = list(v)
        for i in range(half):
            th = pos * cfg.rope_theta ** (-2.0 * i / hd)
            a, b = v[i], v[i + half]
            out[i] = a * math.cos(th) - b * math.sin(th)
            out[i + half] = b * math.cos(th) + a * math.sin(th)
        return out

    W = {k: v.tolist() for k, v in p.items()}
    u = [list(W["embed"][t]) for t in tokens]
    a = [norm(x) for x in u]
    qkv = [matvec(x, W["w_qkv"]) for x in a]
    o = [[0.0] * D for _ in range(L)]
    for h in range(H):
        q = [rot(qkv[t][h * hd : (h + 1) * hd], t) for t in range(L)]
        k = [rot(qkv[t][D + h * hd : D + (h + 1) * hd], t) for t in range(L)]
        v = [qkv[t][2 * D + h * hd : 2 * D + (h + 1) * hd] for t in range(L)]
        for i in range(L):
            s = [sum(q[i][d] * k[j][d] for d in range(hd)) / math.sqrt(hd) for j in range(L)]
            mx = max(s)
            w = [math.exp(x - mx) for x in s]
            z = sum(w)
            for d in range(hd):
                o[i][h * hd + d] = sum(w[j] / z * v[j][d] for j in range(L))
    out = []
    for i in range(L):
        u2 = [u[i][d] + x for d, x in enumerate(matvec(o[i], W["w_o"]))]
        b = norm(u2)
        gu = matvec(b, W["w_gu"])
        m = [gu[j] / (1 + math.exp(-gu[j])) * gu[I + j] for j in range(I)]
        hn = [u2[d] + x for d, x in enumerate(matvec(m, W["w_down"]))]
        out.append(matvec(norm(hn), W["w_head"]))
    return np.array(out)


def test_forward_matches_scalar_reference():
    cfg = M.tiny_config(cycles=1, seq_len=2)
    p = M.init_params(cfg, 3)
    tokens = [2, 3]
    fwd = M.forward_recursive(p, cfg, np.array([tokens]))
    assert np.max(np.abs(fwd.logits[0] - _scalar_forward(p, cfg, tokens))) < 1e-8
    assert len(fwd.tape) == len(M.SITES)


def test_gradients_match_finite_differences():
    cfg = M.tiny_config()
    p = M.init_params(cfg, 1)
    x, y = batch(cfg, 2, 1)
    _, g, _ = gradcheck.loss_and_grads(p, cfg, x, y)
    rng = np.random.default_rng(0)
    for name in M.PARAM_NAMES:
        idx = [np.unravel_index(i, p[name].shape) for i in rng.choice(p[name].size, 6, replace=False)]
        if name == "embed":
            idx = [(int(t), j) for t, j in zip(x.ravel()[:6], range(6))]
        for ix in idx:
            fd = gradcheck.finite_difference(p, cfg, x, y, name, ix)
            assert abs(g[name][ix] - fd) <= 1e-4 * max(abs(fd), 1e-3), (name, ix)


def _untied_loss(blocks, p, cfg, tokens, targets):
    B, L = tokens.shape
    cos, sin = M.rope_tables(cfg, L)
    e = p["embed"][tokens].reshape(B * L, -1)
    h = np.zeros_like(e)
    for bp in blocks:
        h, _, _ = M.block_forward(bp, cfg, h, e, cos, sin, B, L)
    f, _ = M.rmsnorm(h)
    return M.cross_entropy((f @ p["w_head"]).reshape(B, L, -1), targets)[0]


def test_tied_gradient_is_sum_over_cycles():
    cfg = M.tiny_config(cycles=3)
    p = M.init_params(cfg, 2)
    x, y = batch(cfg, 2, 2)
    _, g, _ = gradcheck.loss_and_grads(p, cfg, x, y)
    blocks = [{k: p[k].copy() for k in M.BLOCK_PARAMS} for _ in range(cfg.cycles)]
    assert abs(_untied_loss(blocks, p, cfg, x, y) - M.cross_entropy(M.forward_recursive(p, cfg, x).logits, y)[0]) < 1e-14
    h = 1e-5
    for name in M.BLOCK_PARAMS:
        ix = (1, 2)
        per_cycle = []
        for c in range(cfg.cycles):
            blocks[c][name][ix] += h
            up = _untied_loss(blocks, p, cfg, x, y)
            blocks[c][name][ix] -= 2 * h
            down = _untied_loss(blocks, p, cfg, x, y)
            blocks[c][name][ix] += h
            per_cycle.append((up - down) / (2 * h))
        assert abs(sum(per_cycle) - g[name][ix]) <= 1e-4 * max(abs(g[name][ix]), 1e-3)
        # the cycles do contribute differently
        assert max(per_cycle) - min(per_cycle) > 1e-8


def _full_rank_laser(cfg, sites=M.SITES):
    dims = cfg.site_dims()
    return LaserCompressor({s: TrackerConfig(initial_rank=dims[s], max_rank=dims[s]) for s in sites})


def test_full_rank_laser_is_bit_identical():
    cfg = M.tiny_config(seq_len=16)
    p = M.init_params(cfg, 4)
    x, y = batch(cfg, 4, 4)
    l0, g0, f0 = gradcheck.loss_and_grads(p, cfg, x, y)
    l1, g1, f1 = gradcheck.loss_and_grads(p, cfg, x, y, _full_rank_laser(cfg))
    assert np.array_equal(f0.logits, f1.logits) and l0 == l1
    for k in g0:
        assert np.array_equal(g0[k], g1[k])
    for a, b in zip(f0.tape, f1.tape):
        assert np.max(np.abs(a.activation() - b.activation())) < 1e-10


def test_laser_without_eligible_sites_is_bit_identical():
    cfg = M.tiny_config()
    p = M.init_params(cfg, 5)
    x, y = batch(cfg, 3, 5)
    _, g0, f0 = gradcheck.loss_and_grads(p, cfg, x, y)
    _, g1, f1 = gradcheck.loss_and_grads(p, cfg, x, y, LaserCompressor({}))
    assert np.array_equal(f0.logits, f1.logits)
    assert all(np.array_equal(g0[k], g1[k]) for k in g0)


def test_compressed_tape_is_projection_and_forward_is_exact():
    cfg = M.tiny_config(seq_len=10)
    p = M.init_params(cfg, 6)
    x, _ = batch(cfg, 3, 6)
    full = M.forward_recursive(p, cfg, x)
    comp = M.forward_recursive(p, cfg, x, OracleSVDCompressor({"mlp_concat": 5, "mlp_inner_out": 3}))
    assert np.array_equal(full.logits, comp.logits)
    for a, b in zip(full.tape, comp.tape):
        if b.compressed:
            X = a.full
            assert np.max(np.abs(b.activation() - X @ b.basis @ b.basis.T)) < 1e-10
            assert b.stored_elements() == X.shape[0] * b.basis.shape[1]
    assert sum(t.compressed for t in comp.tape) == 2 * cfg.cycles


def test_tape_mismatch():
    cfg = M.tiny_config()
    p = M.init_params(cfg, 0)
    x, y = batch(cfg)
    fwd = M.forward_recursive(p, cfg, x)
    _, dl = M.cross_entropy(fwd.logits, y)
    fwd.tape.pop()
    with pytest.raises(TapeMismatch):
        M.backward_with_reconstruction(p, cfg, fwd, dl)


def test_gradient_cosine_check_random_tiny_model():
    cfg = M.tiny_config()
    for seed in range(3):
        p = M.init_params(cfg, seed)
        x, y = batch(cfg, 4, seed)
        res = gradcheck.gradient_cosine_check(p, cfg, x, y)
        first = res["rows"][0]
        assert first["eps"] == 0.0 and first["cosine"] == pytest.approx(1.0, abs=1e-15)
        cos = {r["frac"]: r["cosine"] for r in res["rows"]}
        assert cos[0.5] >= cos[0.125]
        assert res["monotone"] and res["within_bound"]


def test_cross_entropy_gradient():
    g = np.random.default_rng(7)
    logits = g.standard_normal((2, 3, 5))
    t = g.integers(0, 5, (2, 3))
    mask = np.array([[1, 0, 1], [1, 1, 0]])
    loss, d = M.cross_entropy(logits, t, mask)
    h = 1e-6
    for ix in [(0, 0, 1), (1, 1, 4), (0, 1, 2)]:
        lp = logits.copy()
        lp[ix] += h
        lm = logits.copy()
        lm[ix] -= h
        fd = (M.cross_entropy(lp, t, mask)[0] - M.cross_entropy(lm, t, mask)[0]) / (2 * h)
        assert abs(fd - d[ix]) < 1e-8
    assert d[0, 1].tolist() == [0.0] * 5


def test_clip_grad_norm():
    g = {"a": np.array([6.0, 0.0]), "b": np.array([[0.0, 8.0]])}
    clipped, norm = M.clip_grad_norm(g, 1.0)
    assert norm == 10.0
    assert abs(M.global_norm(clipped) - 1.0) < 1e-9
    same, _ = M.clip_grad_norm(clipped, 1.0)
    assert np.array_equal(same["a"], clipped["a"])


def test_adamw_single_step_reference():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.1])}
    s = M.adamw_init(p)
    M.adamw_update(p, g, s, lr=0.1, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.01)
    # first step: m_hat = g, v_hat = g^2 so the update is lr * sign(g)
    expect = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.array([0.5, 0.1]) / (np.array([0.5, 0.1]) + 1e-8)
    assert np.allclose(p["w"], expect, rtol=0, atol=1e-15)


def test_cosine_schedule():
    opt = M.OptimConfig(lr=1.0, min_lr=0.1, warmup_steps=4)
    assert M.cosine_lr(0, 100, opt) == 0.25
    assert M.cosine_lr(3, 100, opt) == 1.0
    assert M.cosine_lr(4, 100, opt) == 1.0
    assert M.cosine_lr(100, 100, opt) == pytest.approx(0.1)
    lrs = [M.cosine_lr(s, 100, opt) for s in range(4, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_zero_lr_leaves_params():
    cfg = M.tiny_config()
    p = M.init_params(cfg, 0)
    before = {k: v.copy() for k, v in p.items()}
    x, y = batch(cfg)
    res = M.train_step(p, M.adamw_init(p), cfg, x, y, lr=0.0)
    assert math.isfinite(res["loss"])
    assert all(np.array_equal(before[k], p[k]) for k in p)


class _ResettingCompressor:
    def wants(self, site):
        return site == "attn_out"

    def compress(self, site, cycle, X):
        Q = np.eye(X.shape[1])[:, :1]
        out = StepOutcome(X @ Q, 0.1, None, 1, 1, True, Q, 1.0)
        return X @ Q, Q, out


def test_hard_reset_batch_skips_update():
    cfg = M.tiny_config()
    p = M.init_params(cfg, 0)
    before = {k: v.copy() for k, v in p.items()}
    s = M.adamw_init(p)
    res = M.train_step(p, s, cfg, *batch(cfg), lr=1e-2, compressor=_ResettingCompressor())
    assert res["skipped"]
    assert s.t == 0
    assert all(np.array_equal(before[k], p[k]) for k in p)


def test_non_finite_loss_raises():
    cfg = M.tiny_config()
    p = M.init_params(cfg, 0)
    p["w_head"][0, 0] = np.nan
    with pytest.raises(NonFiniteLoss):
        M.train_step(p, M.adamw_init(p), cfg, *batch(cfg), lr=1e-3)


def test_overfit_single_batch():
    cfg = M.tiny_config(hidden_dim=16, head_dim=8, mlp_inner=48, seq_len=25)
    x, y = maze.stack_tokens(maze.generate_dataset(4, 5, 0))
    p = M.init_params(cfg, 0)
    s = M.adamw_init(p)
    opt = M.OptimConfig(lr=1e-2, weight_decay=0.0)
    losses = [M.train_step(p, s, cfg, x, y, 1e-2, opt)["loss"] for _ in range(200)]
    assert losses[-1] <= losses[0] / 10


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_batch_order_invariance(seed):
    cfg = M.tiny_config()
    p = M.init_params(cfg, 0)
    x, y = batch(cfg, 5, seed % 1000)
    perm = np.random.default_rng(seed).permutation(5)
    l0, g0, _ = gradcheck.loss_and_grads(p, cfg, x, y)
    l1, g1, _ = gradcheck.loss_and_grads(p, cfg, x[perm], y[perm])
    assert abs(l0 - l1) < 1e-12
    for k in g0:
        assert np.max(np.abs(g0[k] - g1[k])) < 1e-10


def test_prediction_metrics():
    x, y = maze.stack_tokens(maze.generate_dataset(20, 7, 1))
    assert M.prediction_metrics(y, x, y) == {"token_accuracy": 100.0, "solve_rate": 100.0}
    assert M.prediction_metrics(np.zeros_like(y), x, y)["solve_rate"] == 0.0
    rng = np.random.default_rng(0)
    big_x, big_y = maze.stack_tokens(maze.generate_dataset(60, 7, 2))
    r = M.prediction_metrics(rng.integers(0, 5, big_y.shape), big_x, big_y)
    assert (big_x != maze.WALL).sum() >= 1000
    assert abs(r["token_accuracy"] - 20.0) <= 5.0


def test_evaluate_empty():
    cfg = M.tiny_config()
    with pytest.raises(ValueError):
        M.evaluate(M.init_params(cfg, 0), cfg, np.zeros((0, 6), dtype=int), np.zeros((0, 6), dtype=int))


def test_checkpoint_round_trip(tmp_path):
    cfg = M.tiny_config()
    p = M.init_params(cfg, 9)
    M.save_checkpoint(tmp_path / "ck", p, cfg, step=12, rng_seed=100)
    q, cfg2, manifest = M.load_checkpoint(tmp_path / "ck")
    assert cfg2 == cfg
    assert manifest["step"] == 12 and manifest["rng_seed"] == 100
    assert all(np.array_equal(p[k], q[k]) for k in M.PARAM_NAMES)
    raw = (tmp_path / "ck" / "params.bin").read_bytes()
    assert raw[:8] == p["embed"].ravel()[:1].astype("<f8").tobytes()
    assert [b["name"] for b in json.loads((tmp_path / "ck" / "manifest.json").read_text())["blocks"]] == list(M.PARAM_NAMES)
