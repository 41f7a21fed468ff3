"""Feature-engineered optical front ends.

A front end turns a grayscale image into the complex field handed to the
diffractive stack. It combines an input encoding (amplitude or phase channel)
with either an object-plane amplitude filter drawn from ten mask families, or
a Fourier-plane filter inside a 4-f lens system. A seeded sampler generates
diversified pools of front-end specs with chosen category proportions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .optics import (
    AmplitudeMask,
    ComplexField,
    GridSpec,
    lens_phase,
    transfer_function,
)

PHASE_RANGES = (0.5 * np.pi, np.pi, 1.5 * np.pi, 2.0 * np.pi)

OBJECT_FILTER_FAMILIES = (
    "gaussian",
    "multi_gaussian",
    "hamming",
    "hanning",
    "square",
    "multi_square",
    "rotated_patch",
    "circle",
    "grating",
    "zone_plate",
    "gaussian_plus_square",
)

DEFAULT_FOCAL_LENGTH = 145.6
DEFAULT_LENS_DIAMETER = 104.0


class FrontEndError(ValueError):
    """Invalid front-end specification or geometry."""


@dataclass(frozen=True)
class EncodingSpec:
    """Input encoding: amplitude channel, or phase channel with a dynamic range."""

    channel: str  # "amplitude" | "phase"
    phase_range: float | None = None

    def __post_init__(self):
        if self.channel not in ("amplitude", "phase"):
            raise FrontEndError(f"unknown encoding channel {self.channel!r}")
        if self.channel == "phase":
            if self.phase_range is None:
                raise FrontEndError("phase encoding requires a phase_range")
        elif self.phase_range is not None:
            raise FrontEndError("amplitude encoding takes no phase_range")


@dataclass(frozen=True)
class ObjectFilterSpec:
    """One object-plane mask family with its parameters.

    Parameters are family specific; centers/widths/sigmas/periods are in
    wavelengths relative to the object center, angles in radians.
    """

    family: str
    parameters: tuple[tuple[str, object], ...]

    def __post_init__(self):
        if self.family not in OBJECT_FILTER_FAMILIES:
            raise FrontEndError(f"unknown object filter family {self.family!r}")

    @property
    def params(self) -> dict:
        return dict(self.parameters)

    @staticmethod
    def make(family: str, **params) -> "ObjectFilterSpec":
        return ObjectFilterSpec(family, _freeze(params))


@dataclass(frozen=True)
class FourierFilterSpec:
    """Fourier-plane amplitude filter: fixed annular pass/stop rings, or a
    trainable mask whose latent maps through a logistic to (0, 1)."""

    kind: str  # "annular" | "trainable"
    ring_edges: tuple[float, ...] = ()  # ascending outer radii in wavelengths
    ring_pass: tuple[bool, ...] = ()  # pass flag per ring, aligned to edges
    tag: int = 0  # distinguishes otherwise-identical trainable specs in a pool

    def __post_init__(self):
        if self.kind not in ("annular", "trainable"):
            raise FrontEndError(f"unknown Fourier filter kind {self.kind!r}")
        if self.kind == "annular":
            if len(self.ring_edges) == 0 or len(self.ring_edges) != len(self.ring_pass):
                raise FrontEndError("annular filter needs matching edges and flags")
            if any(b <= a for a, b in zip(self.ring_edges, self.ring_edges[1:])):
                raise FrontEndError("ring edges must be strictly ascending")
            if any(e <= 0 for e in self.ring_edges):
                raise FrontEndError("ring edges must be positive")


@dataclass(frozen=True)
class FrontEndSpec:
    """Complete front-end identity of one base classifier."""

    encoding: EncodingSpec
    placement: str  # "object" | "fourier"
    object_filter: ObjectFilterSpec | None = None
    fourier_filter: FourierFilterSpec | None = None
    output_aperture_scale: float = 1.0
    focal_length: float = DEFAULT_FOCAL_LENGTH
    lens_diameter: float = DEFAULT_LENS_DIAMETER

    def __post_init__(self):
        if self.placement == "object":
            if self.object_filter is None or self.fourier_filter is not None:
                raise FrontEndError("object placement requires exactly an object filter")
        elif self.placement == "fourier":
            if self.fourier_filter is None or self.object_filter is not None:
                raise FrontEndError("fourier placement requires exactly a fourier filter")
            if self.output_aperture_scale not in (1.0, 1.5):
                raise FrontEndError("output aperture scale must be 1.0 or 1.5")
            if self.focal_length <= 0 or self.lens_diameter <= 0:
                raise FrontEndError("lens geometry must be positive")
        else:
            raise FrontEndError(f"unknown placement {self.placement!r}")

    @property
    def trainable(self) -> bool:
        return self.placement == "fourier" and self.fourier_filter.kind == "trainable"

    def category(self) -> tuple[str, str]:
        return (self.encoding.channel, self.placement)

    def to_dict(self) -> dict:
        d = {"encoding": {"channel": self.encoding.channel}, "placement": self.placement}
        if self.encoding.phase_range is not None:
            d["encoding"]["phase_range"] = self.encoding.phase_range
        if self.object_filter is not None:
            d["object_filter"] = {
                "family": self.object_filter.family,
                "parameters": _thaw(self.object_filter.parameters),
            }
        if self.fourier_filter is not None:
            d["fourier_filter"] = {
                "kind": self.fourier_filter.kind,
                "ring_edges": list(self.fourier_filter.ring_edges),
                "ring_pass": list(self.fourier_filter.ring_pass),
                "tag": self.fourier_filter.tag,
            }
            d["output_aperture_scale"] = self.output_aperture_scale
            d["focal_length"] = self.focal_length
            d["lens_diameter"] = self.lens_diameter
        return d

    @staticmethod
    def from_dict(d: dict) -> "FrontEndSpec":
        enc = EncodingSpec(d["encoding"]["channel"], d["encoding"].get("phase_range"))
        obj = None
        fourier = None
        if "object_filter" in d:
            obj = ObjectFilterSpec.make(
                d["object_filter"]["family"], **d["object_filter"]["parameters"]
            )
        if "fourier_filter" in d:
            ff = d["fourier_filter"]
            fourier = FourierFilterSpec(
                ff["kind"],
                tuple(ff.get("ring_edges", ())),
                tuple(bool(b) for b in ff.get("ring_pass", ())),
                ff.get("tag", 0),
            )
        return FrontEndSpec(
            encoding=enc,
            placement=d["placement"],
            object_filter=obj,
            fourier_filter=fourier,
            output_aperture_scale=d.get("output_aperture_scale", 1.0),
            focal_length=d.get("focal_length", DEFAULT_FOCAL_LENGTH),
            lens_diameter=d.get("lens_diameter", DEFAULT_LENS_DIAMETER),
        )


def _freeze(params: dict) -> tuple:
    out = []
    for k in sorted(params):
        v = params[k]
        if isinstance(v, (list, tuple, np.ndarray)):
            v = tuple(
                tuple(x) if isinstance(x, (list, tuple, np.ndarray)) else float(x)
                for x in v
            )
        elif isinstance(v, (int, np.integer)):
            v = int(v)
        else:
            v = float(v)
        out.append((k, v))
    return tuple(out)


def _thaw(parameters: tuple) -> dict:
    def conv(v):
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v

    return {k: conv(v) for k, v in parameters}


def object_region(grid: GridSpec, image_side: int = 32) -> tuple[slice, int]:
    """Centered object region: half the grid side, as (slice, replication)."""
    obj_px = grid.side // 2
    if obj_px % image_side != 0:
        raise FrontEndError(
            f"object region of {obj_px} px cannot hold a {image_side}-px image"
        )
    lo = (grid.side - obj_px) // 2
    return slice(lo, lo + obj_px), obj_px // image_side


def encode_input(image: np.ndarray, enc: EncodingSpec, grid: GridSpec) -> ComplexField:
    """Encode grayscale images in [0, 1] onto the centered object region.

    Amplitude channel: u = g inside the region, 0 outside. Phase channel:
    u = exp(i g R) inside (unit amplitude), 0 outside. Images are replicated
    by an integer factor to fill the region; leading batch axes pass through.
    """
    image = np.asarray(image, dtype=np.float64)
    if np.any(image < 0) or np.any(image > 1):
        raise ValueError("image values must lie in [0, 1]")
    sl, rep = object_region(grid, image.shape[-1])
    up = np.repeat(np.repeat(image, rep, axis=-2), rep, axis=-1)
    values = np.zeros(image.shape[:-2] + (grid.side, grid.side), dtype=np.complex128)
    if enc.channel == "amplitude":
        values[..., sl, sl] = up
    else:
        values[..., sl, sl] = np.exp(1j * up * enc.phase_range)
    return ComplexField(grid, values)


def make_object_filter(spec: ObjectFilterSpec, grid: GridSpec) -> AmplitudeMask:
    """Generate the amplitude mask of one object-plane filter family.

    The mask lives on the centered object region and is zero outside it.
    Coordinates are in wavelengths relative to the object center.
    """
    sl, _ = object_region(grid)
    obj_px = sl.stop - sl.start
    c = (np.arange(obj_px) - obj_px / 2 + 0.5) * grid.pitch
    x, y = np.meshgrid(c, c, indexing="xy")
    p = spec.params
    patch = _object_family(spec.family, p, x, y)
    mask = np.zeros((grid.side, grid.side))
    mask[sl, sl] = np.clip(patch, 0.0, 1.0)
    return AmplitudeMask(grid, mask)


def _gaussian(x, y, cx, cy, sx, sy):
    return np.exp(-((x - cx) ** 2 / (2 * sx**2) + (y - cy) ** 2 / (2 * sy**2)))


def _square(x, y, cx, cy, wx, wy):
    return (
        (np.abs(x - cx) <= wx / 2) & (np.abs(y - cy) <= wy / 2)
    ).astype(np.float64)


def _window_1d(t, w, kind):
    # Hamming / Hanning profile over support [-w/2, w/2], zero outside.
    inside = np.abs(t) <= w / 2
    if kind == "hamming":
        prof = 0.54 + 0.46 * np.cos(2 * np.pi * t / w)
    else:
        prof = 0.5 * (1 + np.cos(2 * np.pi * t / w))
    return np.where(inside, prof, 0.0)


def _object_family(family: str, p: dict, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if family == "gaussian":
        return _gaussian(x, y, p["cx"], p["cy"], p["sigma_x"], p["sigma_y"])
    if family == "multi_gaussian":
        return sum(
            _gaussian(x, y, cx, cy, sx, sy) for cx, cy, sx, sy in p["components"]
        )
    if family in ("hamming", "hanning"):
        return _window_1d(x - p["cx"], p["width_x"], family) * _window_1d(
            y - p["cy"], p["width_y"], family
        )
    if family == "square":
        return _square(x, y, p["cx"], p["cy"], p["width_x"], p["width_y"])
    if family == "multi_square":
        return sum(_square(x, y, cx, cy, wx, wy) for cx, cy, wx, wy in p["components"])
    if family == "rotated_patch":
        th = p["angle"]
        xr = (x - p["cx"]) * np.cos(th) + (y - p["cy"]) * np.sin(th)
        yr = -(x - p["cx"]) * np.sin(th) + (y - p["cy"]) * np.cos(th)
        return _square(xr, yr, 0.0, 0.0, p["width_x"], p["width_y"])
    if family == "circle":
        r2 = (x - p["cx"]) ** 2 + (y - p["cy"]) ** 2
        return (r2 <= p["radius"] ** 2).astype(np.float64)
    if family == "grating":
        th = p["angle"]
        u = x * np.cos(th) + y * np.sin(th)
        return 0.5 * (1 + np.cos(2 * np.pi * u / p["period"]))
    if family == "zone_plate":
        r2 = (x - p["cx"]) ** 2 + (y - p["cy"]) ** 2
        return (np.cos(np.pi * r2 / p["focal_parameter"]) > 0).astype(np.float64)
    if family == "gaussian_plus_square":
        return _gaussian(
            x, y, p["gauss_cx"], p["gauss_cy"], p["sigma_x"], p["sigma_y"]
        ) + _square(x, y, p["square_cx"], p["square_cy"], p["width_x"], p["width_y"])
    raise FrontEndError(f"unknown object filter family {family!r}")


def make_fourier_filter(spec: FourierFilterSpec, grid: GridSpec) -> AmplitudeMask:
    """Annular Fourier-plane mask: a pixel passes iff its radius from the
    optical axis falls inside a pass ring. Rings are the consecutive radial
    intervals [0, e1), [e1, e2), ...; radii beyond the last edge are opaque.
    """
    if spec.kind != "annular":
        raise FrontEndError("only annular filters have a fixed mask")
    x, y = grid.coords()
    r = np.sqrt(x**2 + y**2)
    mask = np.zeros((grid.side, grid.side))
    inner = 0.0
    for outer, passes in zip(spec.ring_edges, spec.ring_pass):
        if passes:
            mask[(r >= inner) & (r < outer)] = 1.0
        inner = outer
    return AmplitudeMask(grid, mask)


def filter_latent_to_amplitude(latent: np.ndarray) -> np.ndarray:
    """Logistic map of a trainable filter latent to amplitudes in (0, 1).

    Clipped away from the endpoints so the open interval survives the
    saturation of exp() in floating point.
    """
    with np.errstate(over="ignore"):
        amp = 1.0 / (1.0 + np.exp(-np.asarray(latent, dtype=np.float64)))
    return np.clip(amp, 1e-300, np.nextafter(1.0, 0.0))


def _canvas_grid(grid: GridSpec, lens_diameter: float) -> GridSpec:
    side = grid.side
    while side * grid.pitch < lens_diameter * 1.2:
        side *= 2
    return GridSpec(side, grid.pitch)


class FrontEnd:
    """A front-end spec bound to a grid, with precomputed masks and kernels.

    ``apply`` maps image batches to output fields; for Fourier placements the
    4-f system runs on an enlarged canvas so the full-scale lens geometry
    fits regardless of the diffractive-stack grid. ``backward`` pushes a
    cotangent at the output back to the trainable filter latent.
    """

    def __init__(self, spec: FrontEndSpec, grid: GridSpec):
        self.spec = spec
        self.grid = grid
        sl, _ = object_region(grid)
        self.object_slice = sl
        if spec.placement == "object":
            self.object_mask = make_object_filter(spec.object_filter, grid).amplitude
            self.latent_shape = None
            return
        self.canvas = _canvas_grid(grid, spec.lens_diameter)
        lens, aperture = lens_phase(spec.focal_length, spec.lens_diameter, self.canvas)
        self.lens_t = lens.transmission() * aperture.amplitude
        lo = (self.canvas.side - grid.side) // 2
        self.canvas_slice = slice(lo, lo + grid.side)
        obj_extent = (sl.stop - sl.start) * grid.pitch
        out_side = spec.output_aperture_scale * obj_extent
        if out_side > grid.extent:
            raise FrontEndError("output aperture exceeds the diffractive grid")
        x, y = self.canvas.coords()
        self.output_aperture = (
            (np.abs(x) <= out_side / 2) & (np.abs(y) <= out_side / 2)
        ).astype(np.float64)
        if spec.fourier_filter.kind == "annular":
            self.filter_amp = make_fourier_filter(spec.fourier_filter, self.canvas).amplitude
            self.latent_shape = None
        else:
            self.filter_amp = None
            self.latent_shape = (self.canvas.side, self.canvas.side)

    def initial_latent(self) -> np.ndarray | None:
        if self.latent_shape is None:
            return None
        return np.zeros(self.latent_shape)  # amplitude 0.5 everywhere

    def _fprop(self, values: np.ndarray) -> np.ndarray:
        h = transfer_function(self.canvas, self.spec.focal_length)
        return np.fft.ifft2(np.fft.fft2(values, axes=(-2, -1)) * h, axes=(-2, -1))

    def _fprop_adj(self, values: np.ndarray) -> np.ndarray:
        h = transfer_function(self.canvas, self.spec.focal_length)
        return np.fft.ifft2(np.fft.fft2(values, axes=(-2, -1)) * np.conj(h), axes=(-2, -1))

    def apply(
        self, images: np.ndarray, latent: np.ndarray | None = None
    ) -> tuple[np.ndarray, dict | None]:
        """Encode and filter a batch of images.

        Returns (output field values on the diffractive grid, tape). The tape
        is non-None only for trainable Fourier filters and holds what
        ``backward`` needs.
        """
        encoded = encode_input(images, self.spec.encoding, self.grid).values
        if self.spec.placement == "object":
            return encoded * self.object_mask, None

        cs = self.canvas_slice
        batch_shape = encoded.shape[:-2]
        canvas = np.zeros(batch_shape + (self.canvas.side,) * 2, dtype=np.complex128)
        canvas[..., cs, cs] = encoded
        at_filter = self._fprop(self.lens_t * self._fprop(canvas))
        if self.spec.fourier_filter.kind == "trainable":
            if latent is None:
                raise FrontEndError("trainable filter requires a latent array")
            amp = filter_latent_to_amplitude(latent)
            tape = {"at_filter": at_filter, "amp": amp}
        else:
            amp = self.filter_amp
            tape = None
        after = self._fprop(self.lens_t * self._fprop(at_filter * amp))
        out = (after * self.output_aperture)[..., cs, cs]
        return out, tape

    def backward(self, g_out: np.ndarray, tape: dict) -> np.ndarray:
        """Cotangent of the output field -> gradient of the trainable latent.

        Cotangent convention: g = dL/dRe(u) + i dL/dIm(u), so elementwise
        multiplication by t back-propagates as conj(t) * g and a real
        parameter a multiplying u receives Re(conj(g) * u).
        """
        cs = self.canvas_slice
        g = np.zeros(g_out.shape[:-2] + (self.canvas.side,) * 2, dtype=np.complex128)
        g[..., cs, cs] = g_out
        g *= self.output_aperture
        g = np.conj(self.lens_t) * self._fprop_adj(g)
        g_at_filter = self._fprop_adj(g)
        amp = tape["amp"]
        d_amp = np.real(np.conj(g_at_filter) * tape["at_filter"])
        if d_amp.ndim > 2:
            d_amp = d_amp.sum(axis=tuple(range(d_amp.ndim - 2)))
        return d_amp * amp * (1.0 - amp)  # logistic chain term


def default_annular_edges(spec_or_diameter, rings: int = 8) -> tuple[float, ...]:
    """Eight equal-width annuli spanning the lens aperture radius."""
    d = (
        spec_or_diameter
        if isinstance(spec_or_diameter, (int, float))
        else spec_or_diameter.lens_diameter
    )
    radius = d / 2
    return tuple(radius * (i + 1) / rings for i in range(rings))


# ---------------------------------------------------------------------------
# Pool sampling


@dataclass(frozen=True)
class PoolCounts:
    """Pool size per (encoding, placement) category."""

    amplitude_object: int
    amplitude_fourier: int
    phase_object: int
    phase_fourier: int

    def __post_init__(self):
        if min(
            self.amplitude_object,
            self.amplitude_fourier,
            self.phase_object,
            self.phase_fourier,
        ) < 0:
            raise ValueError("counts must be nonnegative")

    @property
    def total(self) -> int:
        return (
            self.amplitude_object
            + self.amplitude_fourier
            + self.phase_object
            + self.phase_fourier
        )

    @staticmethod
    def proportional(total: int) -> "PoolCounts":
        """Split ``total`` by the reference pool proportions 276:64:656:256."""
        ref = np.array([276, 64, 656, 256], dtype=float)
        raw = ref / ref.sum() * total
        counts = np.floor(raw).astype(int)
        # distribute the remainder by largest fractional part
        for i in np.argsort(raw - counts)[::-1][: total - counts.sum()]:
            counts[i] += 1
        return PoolCounts(*counts.tolist())


def _sample_object_filter(rng: np.random.Generator, obj_extent: float) -> ObjectFilterSpec:
    half = obj_extent / 2
    family = OBJECT_FILTER_FAMILIES[rng.integers(len(OBJECT_FILTER_FAMILIES))]

    def center():
        return float(rng.uniform(-half, half))

    def sigma():
        return float(rng.uniform(2.0, min(16.0, obj_extent)))

    def width():
        return float(rng.uniform(4.0, min(24.0, obj_extent)))

    if family == "gaussian":
        return ObjectFilterSpec.make(
            family, cx=center(), cy=center(), sigma_x=sigma(), sigma_y=sigma()
        )
    if family == "multi_gaussian":
        n = int(rng.integers(2, 5))
        comps = [(center(), center(), sigma(), sigma()) for _ in range(n)]
        return ObjectFilterSpec.make(family, components=comps)
    if family in ("hamming", "hanning"):
        return ObjectFilterSpec.make(
            family, cx=center(), cy=center(), width_x=width(), width_y=width()
        )
    if family == "square":
        return ObjectFilterSpec.make(
            family, cx=center(), cy=center(), width_x=width(), width_y=width()
        )
    if family == "multi_square":
        n = int(rng.integers(2, 5))
        comps = [(center(), center(), width(), width()) for _ in range(n)]
        return ObjectFilterSpec.make(family, components=comps)
    if family == "rotated_patch":
        return ObjectFilterSpec.make(
            family,
            cx=center(),
            cy=center(),
            width_x=width(),
            width_y=width(),
            angle=float(rng.uniform(0, np.pi)),
        )
    if family == "circle":
        return ObjectFilterSpec.make(
            family, cx=center(), cy=center(), radius=float(rng.uniform(2.0, half))
        )
    if family == "grating":
        return ObjectFilterSpec.make(
            family,
            period=float(rng.uniform(2.0, 16.0)),
            angle=float(rng.uniform(0, np.pi)),
        )
    if family == "zone_plate":
        return ObjectFilterSpec.make(
            family,
            cx=center(),
            cy=center(),
            focal_parameter=float(rng.uniform(20.0, 200.0)),
        )
    # gaussian_plus_square
    return ObjectFilterSpec.make(
        family,
        gauss_cx=center(),
        gauss_cy=center(),
        sigma_x=sigma(),
        sigma_y=sigma(),
        square_cx=center(),
        square_cy=center(),
        width_x=width(),
        width_y=width(),
    )


def _sample_fourier_filter(rng: np.random.Generator, lens_diameter: float) -> FourierFilterSpec:
    if rng.random() < 0.5:
        return FourierFilterSpec("trainable", tag=int(rng.integers(2**31)))
    edges = default_annular_edges(lens_diameter)
    flags = rng.random(len(edges)) < 0.5
    if not flags.any():
        flags[rng.integers(len(flags))] = True
    return FourierFilterSpec("annular", edges, tuple(bool(b) for b in flags))


def sample_pool_specs(
    seed: int, counts: PoolCounts, grid: GridSpec | None = None
) -> list[FrontEndSpec]:
    """Deterministically sample a diversified pool of front-end specs.

    Category membership follows ``counts`` exactly; families, parameters and
    phase ranges are drawn uniformly from their documented ranges. Emitted
    specs are pairwise distinct.
    """
    if grid is None:
        grid = GridSpec(128)
    sl, _ = object_region(grid)
    obj_extent = (sl.stop - sl.start) * grid.pitch
    rng = np.random.default_rng(seed)
    specs: list[FrontEndSpec] = []
    seen = set()
    plan = [
        ("amplitude", "object", counts.amplitude_object),
        ("amplitude", "fourier", counts.amplitude_fourier),
        ("phase", "object", counts.phase_object),
        ("phase", "fourier", counts.phase_fourier),
    ]
    for channel, placement, n in plan:
        for _ in range(n):
            while True:
                if channel == "phase":
                    enc = EncodingSpec("phase", PHASE_RANGES[rng.integers(4)])
                else:
                    enc = EncodingSpec("amplitude")
                if placement == "object":
                    spec = FrontEndSpec(
                        encoding=enc,
                        placement="object",
                        object_filter=_sample_object_filter(rng, obj_extent),
                    )
                else:
                    spec = FrontEndSpec(
                        encoding=enc,
                        placement="fourier",
                        fourier_filter=_sample_fourier_filter(rng, DEFAULT_LENS_DIAMETER),
                        output_aperture_scale=float(rng.choice([1.0, 1.5])),
                    )
                if spec not in seen:
                    seen.add(spec)
                    specs.append(spec)
                    break
    return specs
