"""Symmetric integer quantization of activation blocks and distortion metrics."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import CorruptFile, DegenerateReference

NORM_FLOOR = 1e-12
_MAGIC = b"LQB1"
_HEADER = struct.Struct("<4sIIdBBQ")


class ScaleMode(str, enum.Enum):
    MAX_ABS = "MaxAbs"
    FOUR_SIGMA = "FourSigma"


_CODE_DTYPES = {8: np.int8, 16: np.int16, 32: np.int32}


@dataclass
class QuantizedBlock:
    codes: np.ndarray
    scale: float
    mode: ScaleMode
    clip_count: int
    bits: int = 8

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(X, mode: ScaleMode = ScaleMode.MAX_ABS, bits: int = 8) -> QuantizedBlock:
    """Quantize a whole block with a single symmetric scale.

    ``MAX_ABS`` maps ``max|x|`` to the top code and never clips.
    ``FOUR_SIGMA`` maps four (population) standard deviations to the top
    code and saturates anything beyond.
    """
    X = np.asarray(X, dtype=np.float64)
    mode = ScaleMode(mode)
    dtype = _CODE_DTYPES[bits]
    qmax = 2 ** (bits - 1) - 1
    if linalg.frobenius_norm(X) < NORM_FLOOR * max(X.size, 1):
        return QuantizedBlock(np.zeros(X.shape, dtype=dtype), 1.0, mode, 0, bits)
    if mode is ScaleMode.MAX_ABS:
        scale = float(np.max(np.abs(X))) / qmax
    else:
        scale = 4.0 * float(np.std(X)) / qmax
        if scale == 0.0:
            # constant block: no spread to measure
            scale = float(np.max(np.abs(X))) / qmax
    q = X / scale
    # slack absorbs the max element landing a few ulps past qmax
    clipped = np.abs(q) > qmax * (1.0 + 1e-12)
    codes = round_half_away(np.clip(q, -qmax, qmax))
    return QuantizedBlock(codes.astype(dtype), scale, mode, int(np.count_nonzero(clipped)), bits)


def dequantize(block: QuantizedBlock) -> np.ndarray:
    return block.codes.astype(np.float64) * block.scale


def relative_mse(X, Xhat) -> float:
    X = np.asarray(X, dtype=np.float64)
    Xhat = np.asarray(Xhat, dtype=np.float64)
    if X.shape != Xhat.shape:
        raise ValueError(f"shape mismatch {X.shape} vs {Xhat.shape}")
    ref = float(np.sum(X * X))
    if np.sqrt(ref) < NORM_FLOOR * X.size:
        raise DegenerateReference("reference block has (near-)zero energy")
    d = X - Xhat
    return float(np.sum(d * d)) / ref


@dataclass
class ProjectionStats:
    # |mean shift| in units of the reference std, percent
    mean_shift: float
    # mean over columns of |std change| / std, percent
    std_shift: float
    relative_mse: float


def quantized_projection_stats(X, Q, mode: ScaleMode | None = ScaleMode.MAX_ABS, bits: int = 8) -> ProjectionStats:
    """Statistics of ``X`` against its projected, quantized reconstruction.

    The coefficients ``X Q`` are quantized and dequantized, then lifted back
    with ``Q^T``.  ``mode=None`` skips quantization (projection only).
    """
    X = linalg.as_matrix(X)
    Q = linalg.as_matrix(Q, "Q")
    Z = X @ Q
    if mode is not None:
        Z = dequantize(quantize(Z, mode, bits))
    Xhat = Z @ Q.T
    ref_std = float(np.std(X))
    mean_shift = 100.0 * abs(float(np.mean(Xhat)) - float(np.mean(X))) / ref_std
    sx = np.std(X, axis=0)
    live = sx > NORM_FLOOR
    std_shift = 100.0 * float(np.mean(np.abs(np.std(Xhat, axis=0)[live] - sx[live]) / sx[live]))
    return ProjectionStats(mean_shift, std_shift, relative_mse(X, Xhat))


def to_bytes(block: QuantizedBlock) -> bytes:
    """Little-endian header ``{rows, cols, scale, mode, bits, clip_count}`` + codes."""
    codes = np.atleast_2d(block.codes)
    rows, cols = codes.shape
    mode_id = 0 if block.mode is ScaleMode.MAX_ABS else 1
    header = _HEADER.pack(_MAGIC, rows, cols, block.scale, mode_id, block.bits, block.clip_count)
    return header + codes.astype(codes.dtype.newbyteorder("<")).tobytes()


def from_bytes(data: bytes) -> QuantizedBlock:
    if len(data) < _HEADER.size:
        raise CorruptFile("truncated header", len(data))
    magic, rows, cols, scale, mode_id, bits, clip = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise CorruptFile("bad magic", 0)
    if bits not in _CODE_DTYPES or mode_id > 1:
        raise CorruptFile("bad header field", 4)
    dtype = np.dtype(_CODE_DTYPES[bits]).newbyteorder("<")
    need = _HEADER.size + rows * cols * dtype.itemsize
    if len(data) != need:
        raise CorruptFile(f"expected {need} bytes, found {len(data)}", min(len(data), need))
    codes = np.frombuffer(data, dtype=dtype, offset=_HEADER.size).reshape(rows, cols)
    mode = ScaleMode.MAX_ABS if mode_id == 0 else ScaleMode.FOUR_SIGMA
    return QuantizedBlock(codes.astype(_CODE_DTYPES[bits]), scale, mode, clip, bits)
