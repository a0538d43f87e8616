"""Test-time enhancement and the resolution benchmark.

Enhancement follows the composed-LUT path: the state loop runs entirely on
56x56 frames, per-step curves fold into one lookup table, and the only
full-resolution work is a single gather at the end. Intermediate
full-resolution images are never materialized.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .imaging import (
    FloatImage,
    QuantizedImage,
    center_crop,
    dequantize_levels,
    downsample,
    quantize,
    quantize_levels,
    to_float,
)
from .neural import Tensor, deterministic_action, no_grad
from .tone_curve import (
    ActionVector,
    Lut,
    apply_curve_values,
    apply_to_lut,
    curve_table_for_action,
    identity_lut,
    map_image,
)

DEFAULT_STEPS = 5
STATE_SIZE = 56


@dataclass(frozen=True, eq=False)
class EnhanceTrace:
    """Per-step record of one enhancement: actions, curve tables, composite LUT, previews."""

    actions: np.ndarray          # (T, 4)
    tables: tuple                # T CurveTables
    lut: Lut                     # composite
    previews: np.ndarray         # (T+1, C, s, s) uint8 state frames

    def to_json(self) -> dict:
        return {
            "actions": [[float(v) for v in row] for row in self.actions],
            "curves": [{"in_points": t.in_points.tolist(), "out_points": t.out_points.tolist()}
                       for t in self.tables],
            "lut": [float(v) for v in self.lut.values],
        }

    def composite_from_curves(self) -> Lut:
        """Re-fold the recorded tables; must reproduce the emitted LUT."""
        lut = identity_lut(self.lut.bit_depth, self.lut.values.dtype)
        for table in self.tables:
            lut = apply_to_lut(lut, table)
        return lut


def _small_state_base(image: QuantizedImage, state_size: int, state_crop: bool) -> QuantizedImage:
    floats = to_float(image)
    if state_crop:
        return quantize(center_crop(floats, state_size, state_size), 8)
    return quantize(downsample(floats, state_size, state_size), 8)


def enhance_image(image: QuantizedImage, policy, steps: int = DEFAULT_STEPS, segments: int = 64,
                  state_size: int = STATE_SIZE, state_crop: bool = False,
                  collect_trace: bool = False):
    """Enhance one image through the composed-LUT path.

    Returns (enhanced QuantizedImage, EnhanceTrace or None). Deterministic:
    actions are the policy means.
    """
    small0 = _small_state_base(image, state_size, state_crop)
    lut = identity_lut(image.bit_depth, np.float32)
    x = dequantize_levels(small0.data, 8, np.float32)
    v = np.zeros_like(x)

    actions = np.empty((steps, 4), dtype=np.float64)
    tables = []
    previews = np.empty((steps + 1,) + small0.data.shape, dtype=np.uint8)
    previews[0] = small0.data

    for t in range(steps):
        state = np.concatenate([x, v], axis=0)[None]
        with no_grad():
            mu, _ = policy(Tensor(state))
        action = deterministic_action(mu.data[0])
        table = curve_table_for_action(ActionVector.from_array(action), segments)
        lut = apply_to_lut(lut, table)
        actions[t] = action
        tables.append(table)
        next_small = map_image(small0, lut).data
        previews[t + 1] = next_small
        x_next = dequantize_levels(next_small, 8, np.float32)
        v = x_next - x
        x = x_next

    output = map_image(image, lut)
    trace = EnhanceTrace(actions=actions, tables=tuple(tables), lut=lut, previews=previews) \
        if collect_trace else None
    return output, trace


def enhance_naive(image: QuantizedImage, actions, segments: int = 64) -> QuantizedImage:
    """Reference path: apply each step's curve to the full-resolution image."""
    data = dequantize_levels(image.data, image.bit_depth, np.float32)
    for action in actions:
        table = curve_table_for_action(ActionVector.from_array(action), segments)
        data = apply_curve_values(data, table)
    return quantize(FloatImage(data), image.bit_depth)


# ---------------------------------------------------------------------------
# Resolution benchmark

RESOLUTIONS = {"HD": (720, 1280), "FHD": (1080, 1920), "UHD": (2160, 3840)}


@dataclass
class BenchResult:
    resolution: str
    height: int
    width: int
    repeats: int
    state_prep_s: float      # downsample + quantize of the full frame
    policy_compose_s: float  # T x (policy forward + curve + LUT fold + state update)
    final_map_s: float       # single full-resolution gather + quantize
    naive_total_s: float     # T full-resolution curve applications
    outputs_match: bool

    @property
    def lut_total_s(self) -> float:
        return self.state_prep_s + self.policy_compose_s + self.final_map_s

    @property
    def speedup(self) -> float:
        return self.naive_total_s / self.lut_total_s

    def to_json(self) -> dict:
        return {
            "resolution": self.resolution, "height": self.height, "width": self.width,
            "repeats": self.repeats, "state_prep_s": self.state_prep_s,
            "policy_compose_s": self.policy_compose_s, "final_map_s": self.final_map_s,
            "lut_total_s": self.lut_total_s, "naive_total_s": self.naive_total_s,
            "speedup": self.speedup, "outputs_match": self.outputs_match,
        }


def bench_resolution(policy, name: str, height: int, width: int, repeat: int,
                     rng, steps: int = DEFAULT_STEPS, segments: int = 64) -> BenchResult:
    """Time the LUT path stage by stage against the naive full-resolution path."""
    image = QuantizedImage(rng.integers(0, 256, size=(3, height, width), dtype=np.uint8), 8)

    # warm pass (JIT compilation, allocator) and action capture for the naive path
    warm_out, warm_trace = enhance_image(image, policy, steps, segments, collect_trace=True)
    actions = warm_trace.actions
    naive_out = enhance_naive(image, actions, segments)
    outputs_match = bool(np.array_equal(warm_out.data, naive_out.data))

    prep = compose = final = naive = 0.0
    for _ in range(repeat):
        t0 = time.perf_counter()
        small0 = _small_state_base(image, STATE_SIZE, state_crop=False)
        t1 = time.perf_counter()
        lut = identity_lut(8, np.float32)
        x = dequantize_levels(small0.data, 8, np.float32)
        v = np.zeros_like(x)
        for t in range(steps):
            state = np.concatenate([x, v], axis=0)[None]
            with no_grad():
                mu, _ = policy(Tensor(state))
            table = curve_table_for_action(
                ActionVector.from_array(deterministic_action(mu.data[0])), segments)
            lut = apply_to_lut(lut, table)
            x_next = dequantize_levels(map_image(small0, lut).data, 8, np.float32)
            v = x_next - x
            x = x_next
        t2 = time.perf_counter()
        map_image(image, lut)
        t3 = time.perf_counter()
        data = dequantize_levels(image.data, 8, np.float32)
        for action in actions:
            data = apply_curve_values(data, curve_table_for_action(ActionVector.from_array(action), segments))
        quantize_levels(data, 8)
        t4 = time.perf_counter()
        prep += t1 - t0
        compose += t2 - t1
        final += t3 - t2
        naive += t4 - t3

    return BenchResult(resolution=name, height=height, width=width, repeats=repeat,
                       state_prep_s=prep / repeat, policy_compose_s=compose / repeat,
                       final_map_s=final / repeat, naive_total_s=naive / repeat,
                       outputs_match=outputs_match)


def run_bench(policy, resolutions, repeat: int, seed: int = 0, steps: int = DEFAULT_STEPS,
              segments: int = 64) -> list:
    rng = np.random.default_rng(seed)
    results = []
    for name in resolutions:
        if name not in RESOLUTIONS:
            raise ValueError(f"unknown resolution {name!r}, expected any of {sorted(RESOLUTIONS)}")
        h, w = RESOLUTIONS[name]
        results.append(bench_resolution(policy, name, h, w, repeat, rng, steps, segments))
    return results
