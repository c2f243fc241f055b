"""Behavioral model of a crossbar tile.

Conductances live in [0, g_max] microsiemens.  Stuck-at-OFF cells are pinned
to 0, stuck-at-ON cells to g_max, independent of what is written.  Healthy
cells are programmed with an iterative write-and-verify loop whose observable
outcome is `target + eps` with `eps` a zero-mean Gaussian truncated to the
verify tolerance.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_rng, derive_seed


@dataclass(frozen=True)
class CrossbarSpec:
    """Geometry and programming characteristics of one crossbar tile."""

    rows: int
    cols: int
    g_max: float = 150.0          # uS
    write_tolerance: float = 15.0  # uS, verify window half-width
    write_sigma: float = 5.0       # uS, per-write noise std (3 sigma = tolerance)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must be at least 1x1")
        if self.g_max <= 0:
            raise ValueError("g_max must be positive")
        if self.write_tolerance < 0 or self.write_sigma < 0:
            raise ValueError("write_tolerance and write_sigma must be >= 0")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def to_json(self) -> str:
        return json.dumps(
            {
                "rows": self.rows,
                "cols": self.cols,
                "g_max": self.g_max,
                "write_tolerance": self.write_tolerance,
                "write_sigma": self.write_sigma,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "CrossbarSpec":
        d = json.loads(text)
        return cls(**d)


@dataclass(frozen=True)
class FaultMask:
    """Stuck-at assignments for one tile: disjoint OFF and ON cell sets."""

    off_cells: frozenset = field(default_factory=frozenset)
    on_cells: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "off_cells", frozenset(self.off_cells))
        object.__setattr__(self, "on_cells", frozenset(self.on_cells))
        if self.off_cells & self.on_cells:
            raise ValueError("a cell cannot be stuck OFF and ON at once")

    def __len__(self) -> int:
        return len(self.off_cells) + len(self.on_cells)

    def validate_shape(self, shape: tuple[int, int]) -> None:
        rows, cols = shape
        for (i, j) in self.off_cells | self.on_cells:
            if not (0 <= i < rows and 0 <= j < cols):
                raise ValueError(f"fault cell {(i, j)} outside {rows}x{cols} grid")

    def off_bool(self, shape: tuple[int, int]) -> np.ndarray:
        mask = np.zeros(shape, dtype=bool)
        for (i, j) in self.off_cells:
            mask[i, j] = True
        return mask

    def on_bool(self, shape: tuple[int, int]) -> np.ndarray:
        mask = np.zeros(shape, dtype=bool)
        for (i, j) in self.on_cells:
            mask[i, j] = True
        return mask

    def healthy_bool(self, shape: tuple[int, int]) -> np.ndarray:
        """Binary mask that is True on programmable cells."""
        return ~(self.off_bool(shape) | self.on_bool(shape))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "col", "kind"])
            for (i, j) in sorted(self.off_cells):
                writer.writerow([i, j, "off"])
            for (i, j) in sorted(self.on_cells):
                writer.writerow([i, j, "on"])

    @classmethod
    def from_csv(cls, path) -> "FaultMask":
        off, on = set(), set()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                cell = (int(rec["row"]), int(rec["col"]))
                (off if rec["kind"] == "off" else on).add(cell)
        return cls(frozenset(off), frozenset(on))


EMPTY_MASK = FaultMask()


@dataclass(frozen=True)
class ConductanceMatrix:
    """As-programmed conductance state of one tile (uS)."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def generate_fault_mask(spec: CrossbarSpec, r_off: float, r_on: float, seed: int) -> FaultMask:
    """Draw a stuck-at mask: floor(r_off*mn) OFF cells first, then floor(r_on*mn)
    ON cells from the remaining healthy positions, both uniform without
    replacement."""
    if r_off < 0 or r_on < 0:
        raise ValueError("fault rates must be nonnegative")
    total = spec.rows * spec.cols
    n_off = int(np.floor(r_off * total))
    n_on = int(np.floor(r_on * total))
    if n_off + n_on > total:
        raise ValueError(
            f"requested {n_off}+{n_on} faulty cells but grid has only {total}"
        )
    rng = derive_rng(seed, "fault-mask")
    picks = rng.choice(total, size=n_off + n_on, replace=False)
    off = frozenset((int(p) // spec.cols, int(p) % spec.cols) for p in picks[:n_off])
    on = frozenset((int(p) // spec.cols, int(p) % spec.cols) for p in picks[n_off:])
    return FaultMask(off, on)


def _truncated_noise(rng: np.random.Generator, sigma: float, bound: float, n: int) -> np.ndarray:
    """Zero-mean Gaussian samples resampled until |eps| <= bound."""
    eps = rng.normal(0.0, sigma, size=n)
    bad = np.abs(eps) > bound
    while bad.any():
        eps[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(eps) > bound
    return eps


def program(
    target: np.ndarray,
    mask: FaultMask,
    spec: CrossbarSpec,
    seed: int,
) -> ConductanceMatrix:
    """Write-and-verify programming of conductance targets (uS) onto the tile.

    Faulty cells ignore the target.  Healthy cells land at target + eps with
    eps truncated-Gaussian (std write_sigma, |eps| <= write_tolerance), then
    clamped to the physical range.
    """
    target = np.asarray(target, dtype=float)
    if target.shape != spec.shape:
        raise ValueError(f"target shape {target.shape} != spec shape {spec.shape}")
    if target.min() < 0 or target.max() > spec.g_max:
        raise ValueError("conductance targets must lie in [0, g_max]")
    mask.validate_shape(spec.shape)

    out = target.copy()
    healthy = mask.healthy_bool(spec.shape)
    if spec.write_sigma > 0 and spec.write_tolerance > 0:
        # devices start at ~0 uS; the verify loop never pulses a cell whose
        # target is already within tolerance of that state, so tiny targets
        # stay at exactly zero instead of picking up write noise
        pulsed = healthy & (target > spec.write_tolerance)
        rng = derive_rng(seed, "program")
        eps = _truncated_noise(
            rng, spec.write_sigma, spec.write_tolerance, int(pulsed.sum())
        )
        out[healthy & ~pulsed] = 0.0
        out[pulsed] += eps
        np.clip(out, 0.0, spec.g_max, out=out)
    out[mask.off_bool(spec.shape)] = 0.0
    out[mask.on_bool(spec.shape)] = spec.g_max
    return ConductanceMatrix(out)


@dataclass(frozen=True)
class ChipModel:
    """Source of crossbar tiles for multi-array programming.

    Each (side, layer) pair gets its own tile; fault masks are drawn
    independently per tile from the configured rates unless a fixed map is
    supplied (e.g. a measured chip).  All randomness derives from `seed`.
    """

    g_max: float = 150.0
    write_tolerance: float = 15.0
    write_sigma: float = 5.0
    r_off: float = 0.0
    r_on: float = 0.0
    seed: int = 0
    fixed_masks: tuple = ()  # ((side, layer, FaultMask), ...)

    def spec(self, rows: int, cols: int) -> CrossbarSpec:
        return CrossbarSpec(
            rows=rows,
            cols=cols,
            g_max=self.g_max,
            write_tolerance=self.write_tolerance,
            write_sigma=self.write_sigma,
        )

    def mask(self, side: str, layer: int, shape: tuple[int, int]) -> FaultMask:
        for (s, l, m) in self.fixed_masks:
            if s == side and l == layer:
                m.validate_shape(shape)
                return m
        if self.r_off == 0 and self.r_on == 0:
            return EMPTY_MASK
        return generate_fault_mask(
            self.spec(*shape),
            self.r_off,
            self.r_on,
            seed=derive_seed(self.seed, "mask", side, layer),
        )

    def program_seed(self, side: str, layer: int) -> int:
        return derive_seed(self.seed, "write", side, layer)


def read(
    matrix: ConductanceMatrix,
    scale: float = 1.0,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> np.ndarray:
    """Read back stored conductances times `scale`.

    Measurement is treated as exact; additive read noise is available as an
    opt-in hook and defaults off.
    """
    values = matrix.values * scale
    if noise_sigma > 0:
        rng = derive_rng(seed, "read")
        values = values + rng.normal(0.0, noise_sigma * scale, size=values.shape)
    return values
