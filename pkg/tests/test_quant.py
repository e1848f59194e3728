import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from laser import quant
from laser.errors import CorruptFile, DegenerateReference
from laser.quant import ScaleMode

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_round_half_away_from_zero():
    x = np.array([-2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 0.49])
    assert np.array_equal(quant.round_half_away(x), [-3, -2, -1, 1, 2, 3, 0])


def test_zero_block():
    b = quant.quantize(np.zeros((3, 4)))
    assert b.scale == 1.0 and b.clip_count == 0
    assert not b.codes.any()
    assert not quant.dequantize(b).any()


def test_endpoints_exact():
    a = 0.37
    b = quant.quantize(np.array([[-a, a]]))
    assert b.codes.tolist() == [[-127, 127]]
    assert quant.dequantize(b).tolist() == [[-a, a]]
    assert b.codes.dtype == np.int8


def test_multiples_of_scale_round_trip_exactly():
    codes = np.arange(-127, 128, dtype=np.float64).reshape(5, 51)
    X = codes * 0.25
    assert np.array_equal(quant.dequantize(quant.quantize(X)), X)


def test_uniform_error_bound():
    X = np.random.default_rng(0).uniform(-3, 3, size=(200, 50))
    b = quant.quantize(X)
    assert np.max(np.abs(quant.dequantize(b) - X)) <= b.scale / 2 + 1e-12


def test_four_sigma_scale_and_clip_rate():
    X = np.random.default_rng(1).standard_normal(1_000_000)
    b = quant.quantize(X, ScaleMode.FOUR_SIGMA)
    assert b.scale == pytest.approx(4 * X.std() / 127, rel=1e-12)
    tail = math.erfc(4 / math.sqrt(2))
    assert tail / 3 <= b.clip_count / X.size <= 3 * tail


def test_higher_bit_depths():
    X = np.random.default_rng(2).standard_normal((64, 64))
    errs = [quant.relative_mse(X, quant.dequantize(quant.quantize(X, bits=b))) for b in (8, 16, 32)]
    assert errs[0] > errs[1] > errs[2]
    assert quant.quantize(X, bits=16).codes.dtype == np.int16


def test_relative_mse_trivial():
    X = np.random.default_rng(3).standard_normal((4, 4))
    assert quant.relative_mse(X, X) == 0.0
    assert quant.relative_mse(X, np.zeros_like(X)) == 1.0
    with pytest.raises(DegenerateReference):
        quant.relative_mse(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        quant.relative_mse(X, X[:2])


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=finite))
def test_max_abs_never_clips(X):
    b = quant.quantize(X)
    assert b.clip_count == 0
    assert np.all(np.abs(b.codes) <= 127)
    assert np.all(np.abs(quant.dequantize(b) - X) <= b.scale / 2 * (1 + 1e-9))


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=finite))
def test_four_sigma_codes_in_range(X):
    b = quant.quantize(X, ScaleMode.FOUR_SIGMA)
    assert np.all(np.abs(b.codes.astype(int)) <= 127)
    recon = quant.dequantize(b)
    unclipped = np.abs(X) <= 127 * b.scale
    assert np.all(np.abs(recon - X)[unclipped] <= b.scale / 2 * (1 + 1e-9))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(1e-3, 1e3))
def test_relative_mse_scale_invariant(seed, c):
    X = np.random.default_rng(seed).standard_normal((20, 7))
    e1 = quant.relative_mse(X, quant.dequantize(quant.quantize(X)))
    e2 = quant.relative_mse(c * X, quant.dequantize(quant.quantize(c * X)))
    assert e2 == pytest.approx(e1, rel=1e-6, abs=1e-15)


def _rank_dominant(seed, n=4096, d=256, k=64, tail=0.05):
    g = np.random.default_rng(seed)
    U, _ = np.linalg.qr(g.standard_normal((d, d)))
    X = g.standard_normal((n, k)) @ U[:, :k].T + tail * g.standard_normal((n, d))
    return X / X.std(), U


def test_projection_identity_path():
    g = np.random.default_rng(4)
    Q, _ = np.linalg.qr(g.standard_normal((32, 6)))
    X = g.standard_normal((50, 6)) @ Q.T
    s = quant.quantized_projection_stats(X, Q, mode=None)
    assert s.mean_shift < 1e-10 and s.std_shift < 1e-10 and s.relative_mse < 1e-20


def test_projection_stats_small_shift():
    X, U = _rank_dominant(5)
    s = quant.quantized_projection_stats(X, U[:, :64], ScaleMode.MAX_ABS)
    assert s.mean_shift < 2.0 and s.std_shift < 2.0


def test_projection_mse_nonincreasing_in_rank():
    X, U = _rank_dominant(6)
    errs = [quant.quantized_projection_stats(X, U[:, :k]).relative_mse for k in (16, 32, 64)]
    assert errs[0] >= errs[1] >= errs[2]


def test_serialization_round_trip():
    X = np.random.default_rng(7).standard_normal((9, 5))
    for mode in ScaleMode:
        for bits in (8, 16):
            b = quant.quantize(X, mode, bits)
            r = quant.from_bytes(quant.to_bytes(b))
            assert np.array_equal(r.codes, b.codes)
            assert (r.scale, r.mode, r.clip_count, r.bits) == (b.scale, b.mode, b.clip_count, b.bits)


def test_serialization_errors():
    data = quant.to_bytes(quant.quantize(np.ones((3, 3))))
    with pytest.raises(CorruptFile):
        quant.from_bytes(data[:10])
    with pytest.raises(CorruptFile) as exc:
        quant.from_bytes(data[:-1])
    assert exc.value.offset == len(data) - 1
    with pytest.raises(CorruptFile) as exc:
        quant.from_bytes(b"XXXX" + data[4:])
    assert exc.value.offset == 0
