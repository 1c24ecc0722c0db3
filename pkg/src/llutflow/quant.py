"""Fixed-point activation quantization and the real <-> code bijection.

A :class:`QuantSpec` with ``bits`` and scale ``s`` has ``2**bits`` evenly
spaced levels. Unsigned specs span ``[0, s]``; signed specs span ``[-s, s]``
and are used on boundaries that carry no activation function. Code ``k``
always denotes the ``k``-th level counted from the bottom, so codes are
unsigned integers in ``[0, 2**bits)`` either way.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Parameter, Tensor, record_op
from .errors import CodecError, ConfigError, DataError


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    scale: float
    signed: bool = False

    def __post_init__(self):
        if self.bits < 1:
            raise ConfigError(f"QuantSpec bits must be >= 1, got {self.bits}")
        if not self.scale > 0:
            raise ConfigError(f"QuantSpec scale must be positive, got {self.scale}")

    @property
    def code_count(self) -> int:
        return 1 << self.bits

    @property
    def low(self) -> float:
        return -self.scale if self.signed else 0.0

    @property
    def step(self) -> float:
        return (self.scale - self.low) / (self.code_count - 1)

    def levels(self) -> np.ndarray:
        return dequantize(np.arange(self.code_count), self)


def _levels_params(bits: int, scale, signed: bool, dtype):
    n = dtype.type((1 << bits) - 1)
    scale = dtype.type(scale)
    low = -scale if signed else dtype.type(0)
    return low, (scale - low) / n, scale


def quantize_codes(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Nearest-level code of each element (round half up, clamped)."""
    x = np.asarray(x)
    dtype = x.dtype if x.dtype.kind == "f" else np.dtype(np.float64)
    x = x.astype(dtype, copy=False)
    low, step, high = _levels_params(spec.bits, spec.scale, spec.signed, dtype)
    t = (np.clip(x, low, high) - low) / step
    return np.minimum(np.floor(t + dtype.type(0.5)), spec.code_count - 1).astype(np.int64)


def dequantize(codes, spec: QuantSpec, dtype=np.float64) -> np.ndarray:
    dtype = np.dtype(dtype)
    low, step, _ = _levels_params(spec.bits, spec.scale, spec.signed, dtype)
    return (low + step * np.asarray(codes).astype(dtype)).astype(dtype)


def fake_quantize(x: Tensor, spec: QuantSpec, scale: Optional[Parameter] = None) -> Tensor:
    """Quantize-dequantize with a clamp-aware straight-through gradient.

    Inside the clamp range the gradient passes through unchanged; outside it
    is zero for ``x`` and flows to ``scale`` instead (+1 above the top level,
    -1 below the bottom level of a signed spec).
    """
    if scale is not None:
        spec = QuantSpec(spec.bits, float(scale.data), spec.signed)
    dtype = x.data.dtype
    low, step, high = _levels_params(spec.bits, spec.scale, spec.signed, dtype)
    xd = x.data
    codes = np.minimum(np.floor((np.clip(xd, low, high) - low) / step + dtype.type(0.5)),
                       spec.code_count - 1)
    out = (low + step * codes).astype(dtype)
    inside = (xd >= low) & (xd <= high)
    inputs = (x,) if scale is None else (x, scale)

    def back(g):
        gx = g * inside
        if scale is None:
            return (gx,)
        gs = g[xd > high].sum()
        if spec.signed:
            gs -= g[xd < low].sum()
        return gx, np.asarray(gs, dtype=scale.data.dtype)

    return record_op("fake_quantize", inputs, out, back)


def to_code(v: float, spec: QuantSpec) -> int:
    """Inverse of :func:`from_code`; ``v`` must sit on a level (within 1e-6*s)."""
    k = int(np.floor((float(v) - spec.low) / spec.step + 0.5))
    if not 0 <= k < spec.code_count or abs(from_code(k, spec) - float(v)) > 1e-6 * spec.scale:
        raise CodecError(f"{v!r} is not a representable level of {spec}")
    return k


def from_code(k: int, spec: QuantSpec) -> float:
    if not 0 <= int(k) < spec.code_count:
        raise CodecError(f"code {k} outside [0, {spec.code_count})")
    return float(dequantize(int(k), spec))


@dataclass
class FeatureEncoder:
    """Per-feature min-max calibration mapping raw features to input codes.

    Fitted on the training split only; :meth:`encode` then applies the same
    ranges to any split. Values outside the training range are clamped.
    """

    bits: int
    minimum: np.ndarray
    maximum: np.ndarray

    @classmethod
    def fit(cls, raw: np.ndarray, bits: int) -> "FeatureEncoder":
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[0] < 1:
            raise DataError("quantize_features needs a non-empty [rows, features] matrix")
        if bits < 1:
            raise ConfigError("input bits must be >= 1")
        return cls(bits, raw.min(axis=0), raw.max(axis=0))

    @property
    def ranges(self) -> np.ndarray:
        span = self.maximum - self.minimum
        return np.where(span > 0, span, 1.0)

    def specs(self) -> list[QuantSpec]:
        return [QuantSpec(self.bits, float(r)) for r in self.ranges]

    def encode(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[1] != self.minimum.shape[0]:
            raise DataError(f"expected {self.minimum.shape[0]} features, got {raw.shape}")
        span = self.maximum - self.minimum
        unit = np.where(span > 0, (raw - self.minimum) / self.ranges, 0.0)
        n = (1 << self.bits) - 1
        return np.floor(np.clip(unit, 0.0, 1.0) * n + 0.5).astype(np.int64)

    def to_dict(self) -> dict:
        return {"bits": self.bits, "minimum": self.minimum.tolist(), "maximum": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureEncoder":
        return cls(int(d["bits"]), np.asarray(d["minimum"], dtype=np.float64),
                   np.asarray(d["maximum"], dtype=np.float64))


def quantize_features(raw: np.ndarray, bits: int) -> tuple[np.ndarray, list[QuantSpec]]:
    """Min-max calibrate ``raw`` and return its codes plus per-feature specs.

    Feature ``f`` gets scale ``max_f - min_f`` (1 for a constant feature,
    whose codes are all 0). Use :class:`FeatureEncoder` directly to reuse the
    calibration on another split.
    """
    enc = FeatureEncoder.fit(raw, bits)
    return enc.encode(raw), enc.specs()
