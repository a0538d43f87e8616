"""Cubic Bezier tone-curve math.

A tone adjustment is parameterized by a 4-vector [theta1, theta2, r1, r2] in
[-2, 2] that places the two interior control points of a cubic Bezier curve
whose endpoints are pinned at (0, 0) and (1, 1). The curve is sampled into
L+1 mapping points and applied to pixel values as a sum of clipped linear
increments, which also lets successive adjustments be folded into a single
per-level lookup table (LUT).

The all-zero action yields the exact identity mapping: the increment sum
telescopes without floating-point error when input and output samples agree.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .imaging import FloatImage, QuantizedImage, level_count, quantize_levels

ACTION_LOW = -2.0
ACTION_HIGH = 2.0
DEFAULT_SEGMENTS = 64

# Floor for the slope denominator; the clip bound keeps the raw forward
# difference so the increment sum stays finite for non-monotone tables.
_DIN_FLOOR = 1e-8

_ACTION_FIELDS = ("theta1", "theta2", "r1", "r2")


@dataclass(frozen=True)
class ActionVector:
    """Tone-curve parameters [theta1, theta2, r1, r2], each in [-2, 2]."""

    theta1: float
    theta2: float
    r1: float
    r2: float

    def __post_init__(self):
        for name in _ACTION_FIELDS:
            value = float(getattr(self, name))
            if not np.isfinite(value) or not (ACTION_LOW <= value <= ACTION_HIGH):
                raise ValueError(f"action component {name}={value} outside [{ACTION_LOW}, {ACTION_HIGH}]")
            object.__setattr__(self, name, value)

    @classmethod
    def from_array(cls, values) -> "ActionVector":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape != (4,):
            raise ValueError(f"action vector needs 4 components, got shape {values.shape}")
        return cls(*values)

    def as_array(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, self.r1, self.r2], dtype=np.float64)


@dataclass(frozen=True)
class ControlPoints:
    """Free Bezier control coordinates; endpoints are fixed at (0,0) and (1,1).

    Components may leave [0, 1]: the action range permits radii in [-0.5, 1.5]
    and no clamping happens at this layer.
    """

    p1_in: float
    p1_out: float
    p2_in: float
    p2_out: float


@dataclass(frozen=True, eq=False)
class CurveTable:
    """L+1 sampled (input, output) mapping points approximating the tone curve."""

    in_points: np.ndarray
    out_points: np.ndarray

    def __post_init__(self):
        ins = np.asarray(self.in_points, dtype=np.float64)
        outs = np.asarray(self.out_points, dtype=np.float64)
        if ins.ndim != 1 or ins.shape != outs.shape or ins.shape[0] < 2:
            raise ValueError(f"curve table needs matching 1-D point arrays of length >= 2, got {ins.shape} / {outs.shape}")
        object.__setattr__(self, "in_points", ins)
        object.__setattr__(self, "out_points", outs)

    @property
    def segments(self) -> int:
        return self.in_points.shape[0] - 1


@dataclass(frozen=True, eq=False)
class Lut:
    """Per-level lookup table: normalized output for every representable input level."""

    values: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 1 or values.shape[0] != level_count(self.bit_depth):
            raise ValueError(f"LUT for bit depth {self.bit_depth} needs {level_count(self.bit_depth)} values, got shape {values.shape}")
        object.__setattr__(self, "values", values)


_SQRT_HALF = np.sqrt(0.5)


def _polar_offsets(theta: float, r: float) -> tuple[float, float]:
    """(r+1)/2 * (cos, sin) of (theta+1)*pi/4, via the pi/4 angle-addition form.

    Expanding around pi/4 makes cos and sin share one expression at theta=0,
    so the zero action yields bitwise-identical input/output coordinates (the
    identity mapping then telescopes with no floating-point error at all).
    """
    radius = (r + 1.0) / 2.0
    u = theta * np.pi / 4.0
    c, s = np.cos(u), np.sin(u)
    return radius * ((c - s) * _SQRT_HALF), radius * ((c + s) * _SQRT_HALF)


def control_points(action: ActionVector) -> ControlPoints:
    """Place the interior control points from the action's polar parameters.

    Radius (r+1)/2 and angle (theta+1)pi/4 around (0,0) for p1 and, mirrored,
    around (1,1) for p2, so the zero action gives the identity diagonal.
    """
    dx1, dy1 = _polar_offsets(action.theta1, action.r1)
    dx2, dy2 = _polar_offsets(action.theta2, action.r2)
    return ControlPoints(
        p1_in=dx1,
        p1_out=dy1,
        p2_in=1.0 - dx2,
        p2_out=1.0 - dy2,
    )


def identity_control_points() -> ControlPoints:
    """Control points of the zero action: both at sqrt(2)/4 from their endpoint corner."""
    return control_points(ActionVector(0.0, 0.0, 0.0, 0.0))


def _bezier_coordinate(q: np.ndarray, p1: float, p2: float) -> np.ndarray:
    """Cubic Bezier coordinate with endpoints 0 and 1: 3q(1-q)^2 p1 + 3q^2(1-q) p2 + q^3."""
    omq = 1.0 - q
    return 3.0 * q * omq * omq * p1 + 3.0 * q * q * omq * p2 + q * q * q


def sample_curve(points: ControlPoints, segments: int = DEFAULT_SEGMENTS) -> CurveTable:
    """Sample the parametric curve at L+1 equally spaced parameter values."""
    if segments < 1:
        raise ValueError(f"need at least 1 segment, got {segments}")
    q = np.arange(segments + 1, dtype=np.float64) / segments
    table = CurveTable(
        in_points=_bezier_coordinate(q, points.p1_in, points.p2_in),
        out_points=_bezier_coordinate(q, points.p1_out, points.p2_out),
    )
    # Endpoint interpolation is exact (all terms vanish at q=0; q=1 leaves 1.0),
    # but pin the floats anyway so downstream invariants never see 1-ulp drift.
    table.in_points[0] = table.out_points[0] = 0.0
    table.in_points[-1] = table.out_points[-1] = 1.0
    return table


def curve_table_for_action(action: ActionVector, segments: int = DEFAULT_SEGMENTS) -> CurveTable:
    return sample_curve(control_points(action), segments)


# ---------------------------------------------------------------------------
# Piecewise application kernel
#
# Both the numpy and numba paths run the identical arithmetic sequence per
# value (sequential over segments), so LUT-level and full-resolution
# application of the same table produce bitwise-equal results per input value.


def _segment_terms(table: CurveTable, dtype):
    """Per-segment (start, raw forward difference, slope) in the target dtype.

    The slope denominator is floored at 1e-8; the clip bound keeps the raw
    difference. Computed once here so every execution path shares the exact
    same floats.
    """
    dt = np.dtype(dtype).type
    cin = np.ascontiguousarray(table.in_points, dtype=dtype)
    cout = np.ascontiguousarray(table.out_points, dtype=dtype)
    din = cin[1:] - cin[:-1]
    dout = cout[1:] - cout[:-1]
    slope = dout / np.maximum(din, dt(_DIN_FLOOR))
    return cin[:-1], din, np.ascontiguousarray(slope)


def _apply_numpy(flat, cin, din, slope, lo, hi):
    x = np.minimum(np.maximum(flat, lo), hi)
    acc = np.zeros_like(x)
    for j in range(din.shape[0]):
        term = np.minimum(np.maximum(x - cin[j], lo), din[j])
        acc += term * slope[j]
    return np.minimum(np.maximum(acc, lo), hi)


try:  # pragma: no cover - exercised implicitly wherever numba is installed
    if os.environ.get("CURVETONE_NO_NUMBA"):
        raise ImportError("numba disabled via CURVETONE_NO_NUMBA")
    import numba

    @numba.njit(cache=True)
    def _apply_jit(flat, cin, din, slope, out, lo, hi):  # pragma: no cover - compiled
        n = flat.shape[0]
        nseg = din.shape[0]
        chunk = 2048
        buf = np.empty(chunk, flat.dtype)
        acc = np.empty(chunk, flat.dtype)
        for start in range(0, n, chunk):
            m = min(chunk, n - start)
            for p in range(m):
                x = flat[start + p]
                if x < lo:
                    x = lo
                elif x > hi:
                    x = hi
                buf[p] = x
                acc[p] = lo
            for j in range(nseg):
                c = cin[j]
                d = din[j]
                s = slope[j]
                for p in range(m):
                    v = buf[p] - c
                    if v < lo:
                        v = lo
                    if v > d:
                        v = d
                    acc[p] += v * s
            for p in range(m):
                a = acc[p]
                if a < lo:
                    a = lo
                elif a > hi:
                    a = hi
                out[start + p] = a

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def apply_curve_values(values: np.ndarray, table: CurveTable) -> np.ndarray:
    """Apply the sampled curve to an array of values (any shape, float dtype).

    Inputs are clamped to [0, 1] before application and outputs after; each
    value's result is a pure function of that value alone (the per-value
    arithmetic sequence is identical across array shapes and kernels, so
    applying a table to a LUT and to a full image agree bitwise per level).
    """
    values = np.asarray(values)
    if values.dtype.kind != "f":
        raise ValueError(f"curve application needs float values, got dtype {values.dtype}")
    dt = values.dtype.type
    lo, hi = dt(0.0), dt(1.0)
    cin, din, slope = _segment_terms(table, values.dtype)
    flat = np.ascontiguousarray(values.reshape(-1))
    if HAVE_NUMBA:
        out = np.empty_like(flat)
        _apply_jit(flat, cin, din, slope, out, lo, hi)
    else:
        out = _apply_numpy(flat, cin, din, slope, lo, hi)
    return out.reshape(values.shape)


def apply_curve(image: FloatImage, table: CurveTable) -> FloatImage:
    """Apply a sampled tone curve to every pixel of a float image."""
    return FloatImage(apply_curve_values(image.data, table))


# ---------------------------------------------------------------------------
# LUT composition and mapping


def identity_lut(bit_depth: int = 8, dtype=np.float32) -> Lut:
    """LUT whose value at level i is i / (2^bit_depth - 1)."""
    n = level_count(bit_depth)
    dt = np.dtype(dtype).type
    return Lut(np.arange(n, dtype=dt) / dt(n - 1), bit_depth)


def apply_to_lut(lut: Lut, table: CurveTable) -> Lut:
    """Fold one more curve into a LUT by treating its values as a 1-D image."""
    return Lut(apply_curve_values(lut.values, table), lut.bit_depth)


def compose_actions(actions, bit_depth: int = 8, segments: int = DEFAULT_SEGMENTS, dtype=np.float32) -> Lut:
    """Compose a sequence of actions into a single LUT, first action innermost."""
    lut = identity_lut(bit_depth, dtype)
    for action in actions:
        lut = apply_to_lut(lut, curve_table_for_action(action, segments))
    return lut


def quantize_lut(lut: Lut) -> np.ndarray:
    """Integer output level for every input level (the gather table for map_image)."""
    return quantize_levels(lut.values, lut.bit_depth)


def map_image(image: QuantizedImage, lut: Lut) -> QuantizedImage:
    """Replace every level i with quantize(lut.values[i]); a single gather per pixel."""
    if image.bit_depth != lut.bit_depth:
        raise ValueError(f"bit depth mismatch: image {image.bit_depth} vs LUT {lut.bit_depth}")
    return QuantizedImage(quantize_lut(lut)[image.data], image.bit_depth)


def map_image_float(image: QuantizedImage, lut: Lut) -> FloatImage:
    """Gather the (unquantized) LUT value for every level.

    For an image whose float form is levels/(2^b - 1), this equals applying
    the LUT's curve chain to the float image directly, value for value.
    """
    if image.bit_depth != lut.bit_depth:
        raise ValueError(f"bit depth mismatch: image {image.bit_depth} vs LUT {lut.bit_depth}")
    return FloatImage(lut.values[image.data])


def exact_curve_mapping(points: ControlPoints, x: np.ndarray, dense: int = 100_000) -> np.ndarray:
    """Reference mapping via dense parametric evaluation and monotone inversion.

    Only valid when the input coordinate is non-decreasing in the parameter
    (true for control points in [0, 1]). Used as the oracle the piecewise
    approximation converges to.
    """
    q = np.linspace(0.0, 1.0, dense + 1)
    xi = _bezier_coordinate(q, points.p1_in, points.p2_in)
    yo = _bezier_coordinate(q, points.p1_out, points.p2_out)
    if np.any(np.diff(xi) < 0):
        raise ValueError("input coordinate is not monotone; exact mapping undefined")
    return np.interp(np.clip(x, 0.0, 1.0), xi, yo)
