"""Scalar wave-optics primitives: grids, fields, free-space propagation,
phase layers, lenses, and detector readout.

All lengths are expressed in units of the illumination wavelength (lambda = 1).
Propagation uses the angular-spectrum transfer function with a hard evanescent
cutoff, which is exact for the sampled operator and power-conserving on the
propagating band. Every operation accepts fields with arbitrary leading batch
dimensions; the last two axes are the spatial grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class GridMismatchError(ValueError):
    """Two objects built on incompatible grids were combined."""


@dataclass(frozen=True)
class GridSpec:
    """Square simulation grid: ``side`` pixels of ``pitch`` wavelengths each."""

    side: int
    pitch: float = 0.5

    def __post_init__(self):
        if self.side < 4 or self.side % 2 != 0:
            raise ValueError(f"side must be even and >= 4, got {self.side}")
        if not (np.isfinite(self.pitch) and self.pitch > 0):
            raise ValueError(f"pitch must be positive and finite, got {self.pitch}")

    @property
    def extent(self) -> float:
        """Physical side length of the grid in wavelengths."""
        return self.side * self.pitch

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinates (x, y) as 2-D arrays, origin at grid center."""
        c = (np.arange(self.side) - self.side / 2 + 0.5) * self.pitch
        return np.meshgrid(c, c, indexing="xy")


@dataclass
class ComplexField:
    """Complex optical amplitude sampled on a grid.

    ``values`` may carry leading batch axes; the trailing two axes must be
    (side, side).
    """

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape[-2:] != (self.grid.side, self.grid.side):
            raise GridMismatchError(
                f"field shape {self.values.shape} does not match grid side {self.grid.side}"
            )
        if not np.all(np.isfinite(self.values.view(np.float64))):
            raise ValueError("field values must be finite")

    def power(self) -> np.ndarray | float:
        """Total power integral sum |u|^2 * pitch^2 (per batch element)."""
        return np.sum(np.abs(self.values) ** 2, axis=(-2, -1)) * self.grid.pitch**2


@dataclass
class PhaseLayer:
    """Phase-only transmissive element, transmission exp(i * phase)."""

    grid: GridSpec
    phase: np.ndarray

    def __post_init__(self):
        self.phase = np.asarray(self.phase, dtype=np.float64)
        if self.phase.shape != (self.grid.side, self.grid.side):
            raise GridMismatchError("phase shape does not match grid")
        if not np.all(np.isfinite(self.phase)):
            raise ValueError("phase must be finite")

    def transmission(self) -> np.ndarray:
        return np.exp(1j * self.phase)


@dataclass
class AmplitudeMask:
    """Amplitude-only transmissive element with values in [0, 1]."""

    grid: GridSpec
    amplitude: np.ndarray

    def __post_init__(self):
        self.amplitude = np.asarray(self.amplitude, dtype=np.float64)
        if self.amplitude.shape != (self.grid.side, self.grid.side):
            raise GridMismatchError("amplitude shape does not match grid")
        if np.any(self.amplitude < 0) or np.any(self.amplitude > 1):
            raise ValueError("amplitude values must lie in [0, 1]")


@lru_cache(maxsize=512)
def transfer_function(grid: GridSpec, distance: float) -> np.ndarray:
    """Angular-spectrum transfer function H(fx, fy) for free-space propagation.

    H = exp(i 2 pi d sqrt(1 - fx^2 - fy^2)) on the propagating band
    fx^2 + fy^2 < 1 (frequencies in cycles per wavelength), zero on the
    evanescent band. Frequencies follow numpy FFT ordering.
    """
    if not np.isfinite(distance):
        raise ValueError(f"distance must be finite, got {distance}")
    if distance < 0:
        raise ValueError(f"distance must be nonnegative, got {distance}")
    f = np.fft.fftfreq(grid.side, d=grid.pitch)
    fx, fy = np.meshgrid(f, f, indexing="xy")
    arg = 1.0 - fx**2 - fy**2
    band = arg > 0
    h = np.zeros((grid.side, grid.side), dtype=np.complex128)
    h[band] = np.exp(1j * 2 * np.pi * distance * np.sqrt(arg[band]))
    h.setflags(write=False)
    return h


def propagate(field: ComplexField, distance: float) -> ComplexField:
    """Propagate a field through free space by ``distance`` wavelengths."""
    h = transfer_function(field.grid, distance)
    out = np.fft.ifft2(np.fft.fft2(field.values, axes=(-2, -1)) * h, axes=(-2, -1))
    return ComplexField(field.grid, out)


def adjoint_propagate(field: ComplexField, distance: float) -> ComplexField:
    """Adjoint of :func:`propagate` under the standard complex inner product.

    Equals propagation with the conjugated transfer function, so
    <propagate(u), v> == <u, adjoint_propagate(v)> exactly.
    """
    h = transfer_function(field.grid, distance)
    out = np.fft.ifft2(
        np.fft.fft2(field.values, axes=(-2, -1)) * np.conj(h), axes=(-2, -1)
    )
    return ComplexField(field.grid, out)


def direct_dft_propagate(field: ComplexField, distance: float) -> ComplexField:
    """Test oracle: the same discrete propagation operator evaluated by
    explicit DFT matrix products instead of FFTs. Quadratic cost per axis;
    refuses grids larger than 64x64.
    """
    n = field.grid.side
    if n > 64:
        raise ValueError(f"direct DFT oracle limited to side <= 64, got {n}")
    if not np.isfinite(distance) or distance < 0:
        raise ValueError(f"bad distance {distance}")
    j = np.arange(n)
    w = np.exp(-2j * np.pi * np.outer(j, j) / n)  # forward DFT matrix

    # Transfer function recomputed inline, independent of transfer_function().
    f = (np.where(j < n / 2, j, j - n)) / (n * field.grid.pitch)
    fx, fy = np.meshgrid(f, f, indexing="xy")
    arg = 1.0 - fx**2 - fy**2
    h = np.where(arg > 0, np.exp(1j * 2 * np.pi * distance * np.sqrt(np.maximum(arg, 0.0))), 0.0)

    v = field.values
    spectrum = w @ v @ w.T  # rows transform y, columns transform x
    filtered = spectrum * h
    winv = np.conj(w) / n
    out = winv @ filtered @ winv.T
    return ComplexField(field.grid, out)


def apply_phase_layer(field: ComplexField, layer: PhaseLayer) -> ComplexField:
    """Multiply a field by a phase layer's unit-magnitude transmission."""
    if layer.grid != field.grid:
        raise GridMismatchError("phase layer grid does not match field grid")
    return ComplexField(field.grid, field.values * layer.transmission())


def apply_amplitude_mask(field: ComplexField, mask: AmplitudeMask) -> ComplexField:
    if mask.grid != field.grid:
        raise GridMismatchError("amplitude mask grid does not match field grid")
    return ComplexField(field.grid, field.values * mask.amplitude)


def lens_phase(
    focal_length: float, aperture_diameter: float, grid: GridSpec
) -> tuple[PhaseLayer, AmplitudeMask]:
    """Thin converging lens: quadratic phase exp(-i pi r^2 / f) inside a
    circular aperture, opaque outside.
    """
    if not (np.isfinite(focal_length) and focal_length > 0):
        raise ValueError(f"focal length must be positive, got {focal_length}")
    if aperture_diameter > grid.extent:
        raise ValueError(
            f"aperture {aperture_diameter} exceeds grid extent {grid.extent}"
        )
    x, y = grid.coords()
    r2 = x**2 + y**2
    phase = -np.pi * r2 / focal_length
    amplitude = (r2 <= (aperture_diameter / 2) ** 2).astype(np.float64)
    return PhaseLayer(grid, phase), AmplitudeMask(grid, amplitude)


@dataclass
class DetectorLayout:
    """Square photodetectors on the output plane with a differential
    class assignment: detector 2c is the positive and 2c+1 the negative
    detector of class c.
    """

    grid: GridSpec
    detector_width: float
    centers: np.ndarray  # (2C, 2) x, y positions in wavelengths
    class_count: int
    masks: np.ndarray = field(init=False, repr=False)  # (2C, side, side) bool

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.shape != (2 * self.class_count, 2):
            raise ValueError(
                f"need {2 * self.class_count} detector centers, got {self.centers.shape}"
            )
        half = self.detector_width / 2
        ext = self.grid.extent / 2
        if np.any(np.abs(self.centers) + half > ext + 1e-12):
            raise ValueError("detector footprint extends outside the grid")
        x, y = self.grid.coords()
        masks = []
        for cx, cy in self.centers:
            m = (
                (x >= cx - half)
                & (x < cx + half)
                & (y >= cy - half)
                & (y < cy + half)
            )
            masks.append(m)
        self.masks = np.stack(masks)
        if np.any(self.masks.sum(axis=0) > 1):
            raise ValueError("detector footprints overlap")
        if np.any(self.masks.sum(axis=(1, 2)) == 0):
            raise ValueError("a detector covers no pixel centers")


def differential_layout(
    grid: GridSpec,
    class_count: int = 10,
    detector_width: float | None = None,
    spacing: float | None = None,
) -> DetectorLayout:
    """Default layout: 2C detectors on a centered 4-column x 5-row lattice,
    the +/- pair of each class horizontally adjacent. Width defaults to
    extent/10 (6.4 lambda on the 64-lambda reference grid) and
    center-to-center spacing to twice the width.
    """
    if class_count != 10:
        raise ValueError("default lattice layout supports exactly 10 classes")
    if detector_width is None:
        detector_width = grid.extent / 10
    if spacing is None:
        spacing = 2 * detector_width
    def snap(c):
        # align to pixel centers so every detector has an identical footprint
        return (np.round(c / grid.pitch - 0.5) + 0.5) * grid.pitch

    cols = snap((np.arange(4) - 1.5) * spacing)
    rows = snap((np.arange(5) - 2.0) * spacing)
    centers = np.zeros((2 * class_count, 2))
    for c in range(class_count):
        r = c // 2
        pair = c % 2
        centers[2 * c] = (cols[2 * pair], rows[r])
        centers[2 * c + 1] = (cols[2 * pair + 1], rows[r])
    return DetectorLayout(grid, detector_width, centers, class_count)


def detector_readout(field: ComplexField, layout: DetectorLayout) -> np.ndarray:
    """Integrated intensity per detector: sum |u|^2 * pitch^2 over its pixels.

    Returns shape (..., 2C) for batched fields.
    """
    if layout.grid != field.grid:
        raise GridMismatchError("detector layout grid does not match field grid")
    intensity = np.abs(field.values) ** 2
    signals = np.tensordot(intensity, layout.masks, axes=([-2, -1], [1, 2]))
    return signals * field.grid.pitch**2
