"""Simulated analog execution semantics.

Covers the differential-pair baseline (two devices per signed value), the
decomposed two-crossbar path with the polarity-selecting bridge between the
arrays, and the feedback loop that realizes the regularized inverse used by
the MMSE detector.  Conductance error baked in at programming time is the
only modeled noise source; execution itself is exact analog algebra.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .compensation import CompensationStack, quantize_to_conductance
from .device import ChipModel, ConductanceMatrix, program
from .factorize import NumericalError, SignPattern

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DifferentialPairArray:
    """Two conductance arrays encoding one signed matrix as G+ - G-."""

    g_plus: ConductanceMatrix
    g_minus: ConductanceMatrix

    def __post_init__(self):
        if self.g_plus.shape != self.g_minus.shape:
            raise ValueError("pair halves must share dimensions")

    @property
    def shape(self) -> tuple[int, int]:
        return self.g_plus.shape

    def net(self) -> np.ndarray:
        return self.g_plus.values - self.g_minus.values


def vmm_differential(
    x: np.ndarray, array: DifferentialPairArray, scale: float = 1.0
) -> np.ndarray:
    """y = x (G+ - G-) scale; x may be a batch with vectors along the last axis."""
    return np.asarray(x, dtype=float) @ array.net() * scale


def map_differential(
    m: np.ndarray,
    chip: ChipModel,
    layer: int = 0,
    margin: float = 0.0,
    fixed_scale: float | None = None,
) -> tuple[DifferentialPairArray, float]:
    """Program a signed matrix onto a differential pair.

    Positive entries go to G+, negative magnitudes to G-, zero on the other
    side, proportionally scaled into the programmable range.  Each half draws
    its own fault mask from the chip.  Returns the array and the
    conductance-to-weight scale.
    """
    m = np.asarray(m, dtype=float)
    if fixed_scale is None:
        # shared scale across both halves, set by the largest magnitude
        _, fixed_scale = quantize_to_conductance(m, margin, chip.g_max)
    scale = fixed_scale
    plus_t, _ = quantize_to_conductance(np.maximum(m, 0.0), margin, chip.g_max, scale)
    minus_t, _ = quantize_to_conductance(np.maximum(-m, 0.0), margin, chip.g_max, scale)
    spec = chip.spec(*m.shape)
    g_plus = program(plus_t, chip.mask("dp", layer, m.shape), spec,
                     chip.program_seed("dp", layer))
    g_minus = program(minus_t, chip.mask("dm", layer, m.shape), spec,
                      chip.program_seed("dm", layer))
    return DifferentialPairArray(g_plus, g_minus), scale


@dataclass(frozen=True)
class DifferentialStack:
    """Differential arrays summed with per-layer scale ratios (analog slicing)."""

    layers: tuple
    scale_ratios: tuple

    def effective(self) -> np.ndarray:
        total = np.zeros(self.layers[0].shape)
        for ratio, layer in zip(self.scale_ratios, self.layers):
            total += ratio * layer.net()
        return total


def program_differential(
    target: np.ndarray,
    chip: ChipModel,
    n_layers: int = 1,
    delta_g: float | None = None,
) -> DifferentialStack:
    """Direct differential-pair programming with optional compensation layers.

    Compensation layers carry a fixed scale ratio per step (set by the margin
    and programmable range, not adapted to the realized residual), so
    residuals larger than the layer's reach — stuck-cell errors in
    particular — are clipped and survive as outliers.
    """
    target = np.asarray(target, dtype=float)
    margin = 3.0 * chip.write_sigma if delta_g is None else delta_g
    layers, ratios = [], []
    realized = np.zeros_like(target)
    scale = None
    for i in range(n_layers):
        layer_margin = margin if i < n_layers - 1 else 0.0
        residual = target - realized
        if i == 0:
            arr, scale = map_differential(target, chip, layer=0, margin=layer_margin)
        else:
            # fixed per-layer attenuation: the slice covers the healthy
            # residual band (margin + verify tolerance), nothing more
            scale = scale * max(
                (margin + chip.write_tolerance) / chip.g_max, 1e-6
            )
            arr, _ = map_differential(
                residual, chip, layer=i, margin=layer_margin, fixed_scale=scale
            )
        layers.append(arr)
        ratios.append(scale)
        realized = realized + scale * arr.net()
    return DifferentialStack(tuple(layers), tuple(ratios))


@dataclass(frozen=True)
class BridgeConfig:
    """Polarity registers on the k intermediate lines between the crossbars."""

    sign_registers: SignPattern

    def __len__(self) -> int:
        return len(self.sign_registers)


def vmm_decomposed(
    x: np.ndarray,
    stack_a: CompensationStack,
    stack_b: CompensationStack,
    bridge: BridgeConfig,
    scale: float = 1.0,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Two-stage product through the analog bridge.

    The first stage drives the side-A stack, the bridge flips each
    intermediate line per its register, and the flipped signals drive the
    side-B conductance magnitudes — algebraically x times the reconstructed
    matrix.  Additive output noise is an opt-in hook, default off.
    """
    if not np.array_equal(bridge.sign_registers.signs, stack_b.sign_pattern.signs):
        raise ValueError("bridge registers must match the side-B row signs")
    x = np.asarray(x, dtype=float)
    u = x @ stack_a.effective()
    u = u * bridge.sign_registers.signs
    y = u @ stack_b.magnitudes()
    if noise_sigma > 0 and rng is not None:
        y = y + rng.normal(0.0, noise_sigma, size=y.shape)
    return y * scale


@dataclass(frozen=True)
class FeedbackCircuitSpec:
    """Feedback network parameters: v (G G^T + g1 g2 I) = i G^T at the fixed point."""

    g1: float = 1.0
    g2: float = 1.0
    alpha: float = 1.0
    tolerance: float = 1e-10
    max_iterations: int = 200_000

    def __post_init__(self):
        if self.g1 <= 0 or self.g2 <= 0:
            raise ValueError("feedback conductances must be positive")


class FeedbackDivergence(NumericalError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(
            f"feedback iteration failed to settle: residual {residual:.3e} "
            f"after {iterations} iterations"
        )
        self.residual = residual
        self.iterations = iterations


def mmse_feedback_solve(
    i_in: np.ndarray, g_eff: np.ndarray, spec: FeedbackCircuitSpec
) -> np.ndarray:
    """Settle the feedback loop and return the node voltages.

    Emulates the continuous-time settling with a damped fixed-point iteration
    v <- v + mu [(i - v G) G^T / (g1 g2) - v], damping chosen from a spectral
    bound, and certifies the result against a direct linear solve of
    v (G G^T + g1 g2 I) = i G^T.
    """
    g = np.asarray(g_eff, dtype=float)
    i_in = np.asarray(i_in, dtype=float)
    gram = g @ g.T
    g1g2 = spec.g1 * spec.g2
    rhs = i_in @ g.T
    system = gram + g1g2 * np.eye(gram.shape[0])

    # lam_max(gram) <= trace(gram) gives a safe contraction factor
    mu = 1.0 / (1.0 + np.trace(gram) / g1g2)
    v = np.zeros_like(rhs)
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0:
        return v
    residual = np.inf
    it = 0
    for it in range(1, spec.max_iterations + 1):
        update = (i_in - v @ g) @ g.T / g1g2 - v
        v = v + mu * update
        if it % 16 == 0 or it == spec.max_iterations:
            residual = np.linalg.norm(v @ system - rhs) / rhs_norm
            if residual <= spec.tolerance:
                break
    if residual > spec.tolerance:
        raise FeedbackDivergence(float(residual), it)
    v_direct = np.linalg.solve(system.T, rhs.T).T
    agreement = np.linalg.norm(v - v_direct) / max(np.linalg.norm(v_direct), 1e-300)
    if agreement > max(spec.tolerance * 100, 1e-8):
        raise FeedbackDivergence(float(agreement), it)
    log.debug("feedback solve settled in %d iterations, residual %.3e", it, residual)
    return v


def complex_to_real_map(h: np.ndarray) -> np.ndarray:
    """Real block embedding [[Re, -Im], [Im, Re]] of a complex matrix.

    Multiplying the embedding by the stacked [Re(x); Im(x)] vector reproduces
    the complex product; the detector circuit programs the scaled transpose.
    """
    h = np.asarray(h, dtype=complex)
    re, im = h.real, h.imag
    return np.block([[re, -im], [im, re]])


def stack_complex(x: np.ndarray) -> np.ndarray:
    """[Re(x); Im(x)] along the last axis."""
    x = np.asarray(x, dtype=complex)
    return np.concatenate([x.real, x.imag], axis=-1)


def unstack_complex(v: np.ndarray) -> np.ndarray:
    """Inverse of stack_complex."""
    n = v.shape[-1] // 2
    return v[..., :n] + 1j * v[..., n:]
