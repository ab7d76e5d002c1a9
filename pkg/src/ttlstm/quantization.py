"""8-bit trained quantization for weights and features.

Weight codes are signed integers in [-127, 127] with the fixed scale 2^-7
(value = code/128). The mapping is piecewise on the magnitude, sign
reattached (round toward zero):

    |w| = 0            -> 0
    0 < |w| <= 1/128   -> sign(w) * 1
    1/128 < |w| < 1    -> sign(w) * floor(128 * |w|)
    |w| >= 1           -> sign(w) * 127

``literal_floor=True`` keeps the alternative reading where the middle
branch floors toward -inf for negative weights (breaks symmetry; -128
clamped to -127 to stay inside the code range).

Feature codes are unsigned in [0, 255] with scale 2^-8 (value = code/256):
floor(256*x) for x in [0, 1), saturating to 255 at x >= 1. Negative inputs
are clamped to 0 (the quantizer's domain is non-negative; upstream feature
pipelines produce [0, 1] values).

All functions are pure, work elementwise on scalars or arrays, and the
code lattices round-trip exactly: quantizing a dequantized code returns
the same code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_train import TTMatrix

__all__ = [
    "QuantDomainError",
    "QuantizedTTMatrix",
    "WEIGHT_SCALE",
    "FEATURE_SCALE",
    "quantize_weight",
    "dequantize_weight",
    "quantize_feature",
    "dequantize_feature",
    "quantize_tt",
    "fake_quantize_weights",
    "weight_ste_mask",
    "quantize_features_array",
]

WEIGHT_SCALE = 2**7  # 128
FEATURE_SCALE = 2**8  # 256


class QuantDomainError(ValueError):
    """Input outside the quantizer's domain (non-finite)."""


def _as_float(x) -> tuple[np.ndarray, bool]:
    scalar = np.isscalar(x) or (isinstance(x, np.ndarray) and x.ndim == 0)
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise QuantDomainError("quantizer input must be finite")
    return arr, scalar


def quantize_weight(w, literal_floor: bool = False):
    """Map real weights to signed 8-bit codes on the 1/128 lattice."""
    arr, scalar = _as_float(w)
    sign = np.sign(arr)
    mag = np.abs(arr)
    if literal_floor:
        mid = np.floor(WEIGHT_SCALE * arr)
    else:
        mid = sign * np.floor(WEIGHT_SCALE * mag)
    codes = np.where(
        mag == 0.0,
        0.0,
        np.where(
            mag <= 1.0 / WEIGHT_SCALE,
            sign,
            np.where(mag >= 1.0, sign * (WEIGHT_SCALE - 1), mid),
        ),
    )
    codes = np.clip(codes, -(WEIGHT_SCALE - 1), WEIGHT_SCALE - 1).astype(np.int8)
    return int(codes) if scalar else codes


def dequantize_weight(code):
    """code / 128."""
    arr = np.asarray(code)
    if arr.size and (arr.min() < -(WEIGHT_SCALE - 1) or arr.max() > WEIGHT_SCALE - 1):
        raise QuantDomainError("weight code outside [-127, 127]")
    out = arr.astype(np.float64) / WEIGHT_SCALE
    return float(out) if np.isscalar(code) or arr.ndim == 0 else out


def quantize_feature(x):
    """Map real features to unsigned 8-bit codes on the 1/256 lattice."""
    arr, scalar = _as_float(x)
    arr = np.maximum(arr, 0.0)
    codes = np.where(arr >= 1.0, FEATURE_SCALE - 1, np.floor(FEATURE_SCALE * arr))
    codes = codes.astype(np.uint8)
    return int(codes) if scalar else codes


def dequantize_feature(code):
    """code / 256 (always in [0, 255/256])."""
    arr = np.asarray(code)
    if arr.size and (arr.min() < 0 or arr.max() > FEATURE_SCALE - 1):
        raise QuantDomainError("feature code outside [0, 255]")
    out = arr.astype(np.float64) / FEATURE_SCALE
    return float(out) if np.isscalar(code) or arr.ndim == 0 else out


def fake_quantize_weights(arr: np.ndarray, literal_floor: bool = False) -> np.ndarray:
    """Quantize-dequantize round trip, used in quantized-mode forward passes."""
    return dequantize_weight(quantize_weight(arr, literal_floor=literal_floor))


def weight_ste_mask(arr: np.ndarray) -> np.ndarray:
    """Straight-through mask: 1 where the weight quantizer is non-saturated."""
    return (np.abs(arr) < 1.0).astype(np.float64)


def quantize_features_array(arr: np.ndarray) -> np.ndarray:
    """Snap an array to the feature lattice (float values, 1/256 grid)."""
    return dequantize_feature(quantize_feature(arr))


@dataclass
class QuantizedTTMatrix:
    """TT matrix whose core entries are signed 8-bit codes (scale 2^-7)."""

    cores: list[np.ndarray]

    def __post_init__(self):
        self.cores = [np.asarray(c, dtype=np.int8) for c in self.cores]
        # reuse the float container's chain validation
        TTMatrix([c.astype(np.float64) for c in self.cores])

    @property
    def d(self) -> int:
        return len(self.cores)

    @property
    def row_factors(self) -> tuple[int, ...]:
        return tuple(c.shape[0] for c in self.cores)

    @property
    def col_factors(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(c.shape[3] for c in self.cores)

    def dequantize(self) -> TTMatrix:
        return TTMatrix([dequantize_weight(c) for c in self.cores])


def quantize_tt(w: TTMatrix, literal_floor: bool = False) -> QuantizedTTMatrix:
    """Quantize every core entry; shape and rank metadata are preserved."""
    return QuantizedTTMatrix(
        [quantize_weight(c, literal_floor=literal_floor) for c in w.cores]
    )
