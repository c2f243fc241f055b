"""Precision-controlled programming via parallel compensation layers.

Each side of a decomposition is realized as a weighted sum of layers
sum_i k_i * C_i where C_i are as-programmed conductance arrays and k_i are
analog scale ratios.  Non-final layers are programmed with a conductance
margin subtracted so they deliberately undershoot: every residual then keeps
the sign of the original entry and the next layer can absorb it without
breaking row-sign consistency.  The final layer is programmed without the
margin.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .device import ChipModel, ConductanceMatrix, FaultMask, program
from .factorize import (
    OptimizerConfig,
    SignPattern,
    apply_fault_mask,
    choose_sign_patterns,
    cosine_similarity,
    decompose,
    pinned_matrix,
    project_signs,
    run_adam,
)


@dataclass(frozen=True)
class ProgramPlan:
    """Knobs for the layered programming flow.

    delta_g is the conductance undershoot margin in uS; None means 3x the
    chip's write sigma.  threshold_ratio bounds the magnitude of each layer
    relative to its predecessor (max|M_i| / max|M_{i-1}|); keeping it below 1
    is what makes the write noise contract layer over layer, since a layer's
    noise in weight units is its scale ratio times the chip sigma.
    fixed_scales optionally pins the per-layer conductance-to-weight factors
    up front (required for consistent stuck-ON pinning).
    """

    n_layers: int = 1
    delta_g: float | None = None
    threshold_ratio: float = 0.25
    fixed_scales: tuple = ()

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.delta_g is not None and self.delta_g < 0:
            raise ValueError("delta_g must be >= 0")
        if self.threshold_ratio <= 0:
            raise ValueError("threshold_ratio must be positive")

    def margin(self, chip: ChipModel) -> float:
        return 3.0 * chip.write_sigma if self.delta_g is None else self.delta_g


@dataclass(frozen=True)
class CompensationStack:
    """Ordered as-programmed layers of one side, sharing a sign pattern."""

    layers: tuple
    scale_ratios: tuple
    sign_pattern: SignPattern
    side: str

    def __post_init__(self):
        if len(self.layers) != len(self.scale_ratios):
            raise ValueError("one scale ratio per layer")
        shapes = {layer.shape for layer in self.layers}
        if len(shapes) > 1:
            raise ValueError("all layers must share dimensions")

    @property
    def shape(self) -> tuple[int, int]:
        return self.layers[0].shape

    def effective(self, upto: int | None = None) -> np.ndarray:
        """Signed weight-unit matrix sum_i k_i * (signs o C_i)."""
        upto = len(self.layers) if upto is None else upto
        total = np.zeros(self.shape)
        s = self.sign_pattern.column()
        for ratio, layer in zip(self.scale_ratios[:upto], self.layers[:upto]):
            total += ratio * (s * layer.values)
        return total

    def magnitudes(self, upto: int | None = None) -> np.ndarray:
        """Unsigned conductance-side sum, in weight units."""
        upto = len(self.layers) if upto is None else upto
        total = np.zeros(self.shape)
        for ratio, layer in zip(self.scale_ratios[:upto], self.layers[:upto]):
            total += ratio * layer.values
        return total

    def to_jsonable(self) -> dict:
        return {
            "side": self.side,
            "signs": self.sign_pattern.signs.tolist(),
            "scale_ratios": list(self.scale_ratios),
            "layers": [layer.values.tolist() for layer in self.layers],
        }


@dataclass(frozen=True)
class LayerReport:
    layer: int
    scale_a: float
    scale_b: float
    similarity: float
    error_std: float
    ratio_a: float
    ratio_b: float
    ratio_clamped: bool


@dataclass(frozen=True)
class ProgramResult:
    stack_a: CompensationStack
    stack_b: CompensationStack
    reports: tuple
    residual_infeasible: bool

    def report_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["layer", "scale_a", "scale_b", "similarity", "error_std",
                 "ratio_a", "ratio_b", "ratio_clamped"]
            )
            for r in self.reports:
                writer.writerow(
                    [r.layer, repr(r.scale_a), repr(r.scale_b), repr(r.similarity),
                     repr(r.error_std), repr(r.ratio_a), repr(r.ratio_b),
                     int(r.ratio_clamped)]
                )


def quantize_to_conductance(
    m: np.ndarray, delta_g: float, g_max: float, scale: float | None = None
) -> tuple[np.ndarray, float]:
    """Map weight magnitudes to conductance targets with an undershoot margin.

    Returns (targets, scale) with targets = max(0, |m|/scale - delta_g).  The
    scale is chosen so the largest magnitude plus the re-added margin still
    fits the programmable range; a caller-fixed scale clips instead.
    """
    m = np.asarray(m, dtype=float)
    max_abs = np.abs(m).max()
    if delta_g >= g_max:
        raise ValueError("margin must be below g_max")
    if scale is None:
        if max_abs == 0:
            raise ValueError("cannot derive a scale for an all-zero matrix")
        scale = max_abs / (g_max - delta_g)
    targets = np.maximum(0.0, np.abs(m) / scale - delta_g)
    return np.clip(targets, 0.0, g_max), float(scale)


def _program_layer(
    m_signed: np.ndarray,
    signs: SignPattern,
    mask: FaultMask,
    chip: ChipModel,
    side: str,
    layer: int,
    margin: float,
    fixed_scale: float | None,
) -> tuple[ConductanceMatrix, float, np.ndarray]:
    """Quantize, write, and read back one layer; returns the as-programmed
    conductances, the scale ratio, and the realized signed weight matrix."""
    targets, scale = quantize_to_conductance(m_signed, margin, chip.g_max, fixed_scale)
    spec = chip.spec(*m_signed.shape)
    programmed = program(targets, mask, spec, chip.program_seed(side, layer))
    realized = scale * (signs.column() * programmed.values)
    return programmed, scale, realized


@dataclass(frozen=True)
class ResidualProblem:
    """Bilinear correction system for one compensation layer.

    Solves target ~= (base_a + M_A)(base_b + M_B) for the increments, under
    the shared sign patterns, the layer's fault pins, and the magnitude
    ladder bound relative to the previous layer.
    """

    target: np.ndarray
    base_a: np.ndarray
    base_b: np.ndarray
    signs_a: SignPattern
    signs_b: SignPattern
    mask_a: FaultMask
    mask_b: FaultMask
    pinned_a: np.ndarray
    pinned_b: np.ndarray
    limit_a: float
    limit_b: float

    def loss_and_grad(self, ma: np.ndarray, mb: np.ndarray):
        """Squared relative Frobenius error of the corrected product."""
        full_a = self.base_a + ma
        full_b = self.base_b + mb
        err = full_a @ full_b - self.target
        norm2 = np.vdot(self.target, self.target)
        loss = float(np.vdot(err, err) / norm2)
        ga = 2.0 * err @ full_b.T / norm2
        gb = 2.0 * full_a.T @ err / norm2
        return loss, ga, gb

    def clamp(self, ma: np.ndarray, mb: np.ndarray):
        """Enforce the magnitude ladder; reports whether clipping occurred."""
        clipped = bool(np.abs(ma).max() > self.limit_a or np.abs(mb).max() > self.limit_b)
        if clipped:
            ma = np.clip(ma, -self.limit_a, self.limit_a)
            mb = np.clip(mb, -self.limit_b, self.limit_b)
        return ma, mb, clipped

    def constrain(self, ma: np.ndarray, mb: np.ndarray):
        ma = project_signs(ma, self.signs_a)
        mb = project_signs(mb, self.signs_b)
        ma = apply_fault_mask(ma, self.mask_a, self.pinned_a)
        mb = apply_fault_mask(mb, self.mask_b, self.pinned_b)
        ma, mb, _ = self.clamp(ma, mb)
        return ma, mb

    def solve(self, config: OptimizerConfig, epochs: int):
        """Optimize the correction from a zero warm start."""
        ma = np.zeros_like(self.base_a)
        mb = np.zeros_like(self.base_b)
        ma, mb = self.constrain(ma, mb)
        ma, mb, trace = run_adam(
            ma, mb, self.loss_and_grad, self.constrain, config,
            epochs=epochs, renormalize=False,
        )
        _, _, clipped = self.clamp(ma, mb)
        return ma, mb, trace, clipped


def residual_target(
    target: np.ndarray,
    stack_a: CompensationStack,
    stack_b: CompensationStack,
    mask_a: FaultMask,
    mask_b: FaultMask,
    pinned_a: np.ndarray | None = None,
    pinned_b: np.ndarray | None = None,
    threshold_ratio: float = 10.0,
) -> ResidualProblem:
    """Build the correction problem for the next layer after `stack_a/b`."""
    base_a = stack_a.effective()
    base_b = stack_b.effective()
    prev_max_a = max(
        np.abs(stack_a.scale_ratios[-1] * stack_a.layers[-1].values).max(), 1e-30
    )
    prev_max_b = max(
        np.abs(stack_b.scale_ratios[-1] * stack_b.layers[-1].values).max(), 1e-30
    )
    return ResidualProblem(
        target=np.asarray(target, dtype=float),
        base_a=base_a,
        base_b=base_b,
        signs_a=stack_a.sign_pattern,
        signs_b=stack_b.sign_pattern,
        mask_a=mask_a,
        mask_b=mask_b,
        pinned_a=np.zeros_like(base_a) if pinned_a is None else pinned_a,
        pinned_b=np.zeros_like(base_b) if pinned_b is None else pinned_b,
        limit_a=threshold_ratio * prev_max_a * (1 - 1e-12),
        limit_b=threshold_ratio * prev_max_b * (1 - 1e-12),
    )


def _optimal_pair_scale(product: np.ndarray, target: np.ndarray) -> float:
    """Positive factor c minimizing ||c * product - target||_F."""
    denom = np.vdot(product, product)
    if denom == 0:
        return 1.0
    c = float(np.vdot(product, target) / denom)
    return c if c > 0 else 1.0


def program_stack(
    target: np.ndarray,
    k: int,
    plan: ProgramPlan,
    chip: ChipModel,
    config: OptimizerConfig = OptimizerConfig(),
    signs_a: SignPattern | None = None,
    signs_b: SignPattern | None = None,
) -> ProgramResult:
    """Realize `target` as two compensation stacks on a (simulated) chip.

    Layer 1 is the adaptive decomposition programmed with the undershoot
    margin; each later layer re-reads what was actually programmed and
    optimizes a correction around it, matching that layer's own fault map and
    keeping the shared row signs.  The final layer skips the margin.
    Residual infeasibility is reported on the result, never raised.
    """
    target = np.asarray(target, dtype=float)
    m, n = target.shape
    if signs_a is None or signs_b is None:
        auto_a, auto_b = choose_sign_patterns(target, k, config.seed)
        signs_a = signs_a or auto_a
        signs_b = signs_b or auto_b
    margin = plan.margin(chip)
    n_layers = plan.n_layers

    def fixed_scale(layer_idx):
        if plan.fixed_scales and layer_idx < len(plan.fixed_scales):
            return plan.fixed_scales[layer_idx]
        return None

    def layer_pins(mask: FaultMask, shape, pattern, layer_idx):
        scale = fixed_scale(layer_idx)
        if mask.on_cells and scale is None:
            raise ValueError(
                "stuck-ON cells need plan.fixed_scales so pins are consistent"
            )
        on_value = 0.0 if scale is None else scale * chip.g_max
        return pinned_matrix(mask, shape, pattern, on_value)

    # layer 1: full adaptive decomposition against this layer's fault maps
    mask_a = chip.mask("a", 0, (m, k))
    mask_b = chip.mask("b", 0, (k, n))
    pin_a = layer_pins(mask_a, (m, k), signs_a, 0)
    pin_b = layer_pins(mask_b, (k, n), signs_b, 0)
    dec = decompose(
        target, k, mask_a, mask_b, pinned_a=pin_a, pinned_b=pin_b,
        config=config, signs_a=signs_a, signs_b=signs_b,
    )
    m_a, m_b = dec.m_a, dec.m_b
    if not (np.any(pin_a) or np.any(pin_b)):
        # cosine loss leaves the product scale free; pick the Frobenius-optimal
        # one before committing to conductances
        c = _optimal_pair_scale(m_a @ m_b, target)
        m_a = m_a * np.sqrt(c)
        m_b = m_b * np.sqrt(c)

    first_margin = margin if n_layers > 1 else 0.0
    layers_a, layers_b, ratios_a, ratios_b = [], [], [], []
    prog_a, scale_a, real_a = _program_layer(
        m_a, signs_a, mask_a, chip, "a", 0, first_margin, fixed_scale(0)
    )
    prog_b, scale_b, real_b = _program_layer(
        m_b, signs_b, mask_b, chip, "b", 0, first_margin, fixed_scale(0)
    )
    layers_a.append(prog_a)
    layers_b.append(prog_b)
    ratios_a.append(scale_a)
    ratios_b.append(scale_b)

    def snapshot(layer_idx, clamped):
        sa = CompensationStack(tuple(layers_a), tuple(ratios_a), signs_a, "A")
        sb = CompensationStack(tuple(layers_b), tuple(ratios_b), signs_b, "B")
        product = sa.effective() @ sb.effective()
        err = product - target
        ra = (
            np.abs(ratios_a[-1] * layers_a[-1].values).max()
            / max(np.abs(ratios_a[-2] * layers_a[-2].values).max(), 1e-30)
            if layer_idx > 0 else 0.0
        )
        rb = (
            np.abs(ratios_b[-1] * layers_b[-1].values).max()
            / max(np.abs(ratios_b[-2] * layers_b[-2].values).max(), 1e-30)
            if layer_idx > 0 else 0.0
        )
        return sa, sb, LayerReport(
            layer=layer_idx + 1,
            scale_a=ratios_a[-1],
            scale_b=ratios_b[-1],
            similarity=cosine_similarity(product, target),
            error_std=float(err.std()),
            ratio_a=ra,
            ratio_b=rb,
            ratio_clamped=clamped,
        )

    stack_a, stack_b, rep = snapshot(0, False)
    reports = [rep]
    infeasible = False

    for layer_idx in range(1, n_layers):
        mask_a = chip.mask("a", layer_idx, (m, k))
        mask_b = chip.mask("b", layer_idx, (k, n))
        pin_a = layer_pins(mask_a, (m, k), signs_a, layer_idx)
        pin_b = layer_pins(mask_b, (k, n), signs_b, layer_idx)
        problem = residual_target(
            target, stack_a, stack_b, mask_a, mask_b, pin_a, pin_b,
            plan.threshold_ratio,
        )
        before = problem.loss_and_grad(np.zeros((m, k)), np.zeros((k, n)))[0]
        corr_cfg = replace(config, seed=config.seed + layer_idx)
        ma_i, mb_i, _, clamped = problem.solve(corr_cfg, epochs=max(1, config.epochs // 2))
        after = problem.loss_and_grad(ma_i, mb_i)[0]
        if after >= before:
            infeasible = True
        layer_margin = margin if layer_idx < n_layers - 1 else 0.0
        prog_a, scale_a, _ = _program_layer(
            ma_i, signs_a, mask_a, chip, "a", layer_idx, layer_margin,
            fixed_scale(layer_idx),
        )
        prog_b, scale_b, _ = _program_layer(
            mb_i, signs_b, mask_b, chip, "b", layer_idx, layer_margin,
            fixed_scale(layer_idx),
        )
        layers_a.append(prog_a)
        layers_b.append(prog_b)
        ratios_a.append(scale_a)
        ratios_b.append(scale_b)
        stack_a, stack_b, rep = snapshot(layer_idx, clamped)
        reports.append(rep)

    return ProgramResult(stack_a, stack_b, tuple(reports), infeasible)


def reconstruct(stack_a: CompensationStack, stack_b: CompensationStack) -> np.ndarray:
    """Effective represented matrix (sum_i k_Ai signed C_Ai)(sum_i k_Bi signed C_Bi)."""
    if stack_a.shape[1] != stack_b.shape[0]:
        raise ValueError("stacks do not conform")
    return stack_a.effective() @ stack_b.effective()
