"""2D-DFT image processing on simulated crossbar engines.

Images are processed in square tiles: a 1D transform along rows, a transpose,
the same transform again, and a transpose back.  Each 1D pass on complex data
composes four real vector-matrix products from the engine's real and
imaginary parts.  Reconstruction uses the exact inverse transform, so any
degradation measures the forward in-memory path.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .analog import (
    BridgeConfig,
    DifferentialStack,
    program_differential,
    vmm_decomposed,
    vmm_differential,
)
from .compensation import CompensationStack, ProgramPlan, program_stack
from .device import ChipModel
from .factorize import OptimizerConfig
from .seeding import derive_seed


@dataclass(frozen=True)
class GrayImage:
    """Grayscale image with samples normalized to [0, 1]."""

    samples: np.ndarray

    def __post_init__(self):
        arr = np.array(self.samples, dtype=float)
        if arr.ndim != 2:
            raise ValueError("image must be 2-D")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]


def load_pgm(path) -> GrayImage:
    """Read a binary 8-bit PGM (P5) file."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        # header tokens with '#' comments skipped
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("only binary PGM (P5) is supported")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError("only 8-bit PGM is supported")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return GrayImage(pixels.reshape(height, width).astype(float) / 255.0)


def save_pgm(image: GrayImage, path) -> None:
    """Write a binary 8-bit PGM (P5) file."""
    arr = np.clip(np.round(image.samples * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.tobytes())


def dft_matrix(n: int) -> np.ndarray:
    """Forward transform matrix W[a, b] = exp(-2 pi i a b / n), unnormalized."""
    if n < 1:
        raise ValueError("n must be >= 1")
    grid = np.outer(np.arange(n), np.arange(n))
    return np.exp(-2j * np.pi * grid / n)


class IdealVmm:
    """Exact y = x M reference engine."""

    def __init__(self, matrix: np.ndarray):
        self.matrix = np.asarray(matrix, dtype=float)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.matrix


class DifferentialVmm:
    """Differential-pair (optionally sliced) crossbar engine."""

    def __init__(self, stack: DifferentialStack):
        self.stack = stack
        self._effective = stack.effective()

    def apply(self, x: np.ndarray) -> np.ndarray:
        total = np.zeros(np.asarray(x).shape[:-1] + (self.stack.layers[0].shape[1],))
        for ratio, layer in zip(self.stack.scale_ratios, self.stack.layers):
            total += vmm_differential(x, layer, ratio)
        return total


class DecomposedVmm:
    """Two-crossbar engine with the polarity bridge between the stacks."""

    def __init__(self, stack_a: CompensationStack, stack_b: CompensationStack):
        self.stack_a = stack_a
        self.stack_b = stack_b
        self.bridge = BridgeConfig(stack_b.sign_pattern)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return vmm_decomposed(x, self.stack_a, self.stack_b, self.bridge)


@dataclass(frozen=True)
class ComplexEngine:
    """Paired engines holding the real and imaginary parts of one transform."""

    real_engine: object
    imag_engine: object
    n: int

    def apply_complex(self, x: np.ndarray) -> np.ndarray:
        """Complex y = x (R + iI) via four real products per call."""
        xr, xi = np.real(x), np.imag(x)
        rr = self.real_engine.apply(xr)
        ii = self.imag_engine.apply(xi)
        ri = self.imag_engine.apply(xr)
        ir = self.real_engine.apply(xi)
        return (rr - ii) + 1j * (ri + ir)


def ideal_engine(n: int) -> ComplexEngine:
    w = dft_matrix(n)
    return ComplexEngine(IdealVmm(w.real), IdealVmm(w.imag), n)


def decomposed_engine(
    n: int,
    k: int,
    chip: ChipModel,
    plan: ProgramPlan,
    config: OptimizerConfig = OptimizerConfig(),
) -> ComplexEngine:
    """Program both transform components as compensation-stacked factor pairs."""
    w = dft_matrix(n)
    engines = []
    for tag, component in (("re", w.real), ("im", w.imag)):
        part_chip = replace(chip, seed=derive_seed(chip.seed, "engine", tag))
        res = program_stack(component, k, plan, part_chip, config)
        engines.append(DecomposedVmm(res.stack_a, res.stack_b))
    return ComplexEngine(engines[0], engines[1], n)


def differential_engine(
    n: int,
    chip: ChipModel,
    n_layers: int = 1,
) -> ComplexEngine:
    """Program both transform components as differential-pair arrays."""
    w = dft_matrix(n)
    engines = []
    for tag, component in (("re", w.real), ("im", w.imag)):
        part_chip = replace(chip, seed=derive_seed(chip.seed, "engine", tag))
        stack = program_differential(component, part_chip, n_layers=n_layers)
        engines.append(DifferentialVmm(stack))
    return ComplexEngine(engines[0], engines[1], n)


def dft2d_inmemory(tile: np.ndarray, engine: ComplexEngine) -> np.ndarray:
    """Two-pass 2-D transform: rows via the engine, transpose, rows again.

    Equals W X W^T for the symmetric transform matrix, i.e. the standard 2-D
    DFT of the tile.
    """
    tile = np.asarray(tile)
    if tile.shape != (engine.n, engine.n):
        raise ValueError(f"tile must be {engine.n}x{engine.n}")
    # the engine applies row vectors and W is symmetric: W X = (X^T W)^T
    first = engine.apply_complex(tile.T).T
    return engine.apply_complex(first)  # (W X) W = [W (W X)^T]^T


def idft2d(spectrum: np.ndarray) -> np.ndarray:
    """Exact inverse 2-D transform (numeric reference, not crossbar-based)."""
    return np.fft.ifft2(spectrum)


def pad_to_tiles(samples: np.ndarray, tile: int) -> np.ndarray:
    """Edge-replicate so both dimensions are multiples of the tile size."""
    h, w = samples.shape
    ph = (-h) % tile
    pw = (-w) % tile
    return np.pad(samples, ((0, ph), (0, pw)), mode="edge")


def dft2d_image(image: GrayImage, engine: ComplexEngine, tile: int | None = None):
    """Tile the image and run the in-memory forward transform per tile."""
    tile = engine.n if tile is None else tile
    padded = pad_to_tiles(image.samples, tile)
    h, w = padded.shape
    spectra = np.empty((h // tile, w // tile, tile, tile), dtype=complex)
    for bi in range(h // tile):
        for bj in range(w // tile):
            block = padded[bi * tile : (bi + 1) * tile, bj * tile : (bj + 1) * tile]
            spectra[bi, bj] = dft2d_inmemory(block, engine)
    return spectra


def reconstruct_image(
    spectra: np.ndarray, out_shape: tuple[int, int], clamp: bool = True
) -> GrayImage:
    """Exact inverse transform per tile, reassembled and clamped to [0, 1]."""
    nb_i, nb_j, tile, _ = spectra.shape
    out = np.empty((nb_i * tile, nb_j * tile))
    for bi in range(nb_i):
        for bj in range(nb_j):
            out[bi * tile : (bi + 1) * tile, bj * tile : (bj + 1) * tile] = np.real(
                idft2d(spectra[bi, bj])
            )
    out = out[: out_shape[0], : out_shape[1]]
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return GrayImage(out)


def snr_db(reference: GrayImage, test: GrayImage) -> float:
    """10 log10(signal power / error power); +inf for identical images."""
    ref = reference.samples
    tst = test.samples
    if ref.shape != tst.shape:
        raise ValueError("images must share dimensions")
    err = np.sum((ref - tst) ** 2)
    sig = np.sum(ref**2)
    if err == 0:
        return math.inf
    return float(10.0 * np.log10(sig / err))


def snr_report_csv(path, rows) -> None:
    """rows: iterable of (configuration, snr_db) pairs."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["configuration", "snr_db"])
        for name, value in rows:
            writer.writerow([name, repr(float(value))])
