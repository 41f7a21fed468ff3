"""Diffractive classifier: phase-layer stack behind a front end, differential
detector scores, softmax cross-entropy loss, and exact reverse-mode gradients.

Gradients are derived for the discrete forward model itself. The cotangent of
a complex field u is packed as g = dL/dRe(u) + i dL/dIm(u); a linear operator
A back-propagates as its adjoint, elementwise multiplication by t as conj(t),
and the intensity readout |u|^2 contributes 2 u times the signal cotangent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frontend import FrontEnd, FrontEndSpec
from .optics import (
    DetectorLayout,
    GridSpec,
    differential_layout,
    transfer_function,
)

DEFAULT_TEMPERATURE = 0.1
DEFAULT_LAYER_COUNT = 5
EVAL_DEGENERATE_FLOOR = 1e-20
TRAIN_DENOMINATOR_EPS = 1e-12


class DegenerateSignalError(ValueError):
    """A class's positive and negative detectors both read (near) zero."""


@dataclass
class D2NNModel:
    """One base classifier: front end + trainable phase layers + detectors."""

    grid: GridSpec
    front_end: FrontEndSpec
    phases: list[np.ndarray]
    layout: DetectorLayout
    layer_spacing: float = 40.0
    layer_to_detector: float = 40.0
    temperature: float = DEFAULT_TEMPERATURE
    class_count: int = 10
    filter_latent: np.ndarray | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        for p in self.phases:
            if p.shape != (self.grid.side, self.grid.side):
                raise ValueError("phase layer shape does not match grid")
        if self.layout.class_count != self.class_count:
            raise ValueError("detector layout class count mismatch")
        if self.front_end.trainable and self.filter_latent is None:
            raise ValueError("trainable front end requires a filter latent")
        self._fe: FrontEnd | None = None

    @property
    def bound_front_end(self) -> FrontEnd:
        if self._fe is None:
            self._fe = FrontEnd(self.front_end, self.grid)
        return self._fe

    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"phase_{i}": p for i, p in enumerate(self.phases)}
        if self.filter_latent is not None:
            params["filter_latent"] = self.filter_latent
        return params

    def replace_parameters(self, params: dict[str, np.ndarray]) -> "D2NNModel":
        model = D2NNModel(
            grid=self.grid,
            front_end=self.front_end,
            phases=[params[f"phase_{i}"] for i in range(len(self.phases))],
            layout=self.layout,
            layer_spacing=self.layer_spacing,
            layer_to_detector=self.layer_to_detector,
            temperature=self.temperature,
            class_count=self.class_count,
            filter_latent=params.get("filter_latent"),
        )
        model._fe = self._fe
        return model


@dataclass
class GradientBundle:
    """Parameter gradients of one backward pass."""

    phase_grads: list[np.ndarray]
    latent_grad: np.ndarray | None = None

    def as_dict(self) -> dict[str, np.ndarray]:
        grads = {f"phase_{i}": g for i, g in enumerate(self.phase_grads)}
        if self.latent_grad is not None:
            grads["filter_latent"] = self.latent_grad
        return grads


def build_model(
    spec: FrontEndSpec,
    grid: GridSpec,
    seed: int,
    n_layers: int = DEFAULT_LAYER_COUNT,
    layer_spacing: float | None = None,
    layout: DetectorLayout | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
) -> D2NNModel:
    """Fresh model with uniformly random phases in [0, 2 pi).

    Layer spacing defaults to scale with the grid: 40 lambda on the
    64-lambda reference grid.
    """
    rng = np.random.default_rng(seed)
    if layer_spacing is None:
        layer_spacing = grid.extent * 40.0 / 64.0
    if layout is None:
        layout = differential_layout(grid)
    phases = [rng.uniform(0, 2 * np.pi, (grid.side, grid.side)) for _ in range(n_layers)]
    fe = FrontEnd(spec, grid)
    latent = fe.initial_latent()
    model = D2NNModel(
        grid=grid,
        front_end=spec,
        phases=phases,
        layout=layout,
        layer_spacing=layer_spacing,
        layer_to_detector=layer_spacing,
        temperature=temperature,
        filter_latent=latent,
    )
    model._fe = fe
    return model


def _prop(values: np.ndarray, grid: GridSpec, distance: float) -> np.ndarray:
    h = transfer_function(grid, distance)
    return np.fft.ifft2(np.fft.fft2(values, axes=(-2, -1)) * h, axes=(-2, -1))


def _prop_adj(values: np.ndarray, grid: GridSpec, distance: float) -> np.ndarray:
    h = transfer_function(grid, distance)
    return np.fft.ifft2(np.fft.fft2(values, axes=(-2, -1)) * np.conj(h), axes=(-2, -1))


def differential_scores(
    signals: np.ndarray,
    temperature: float = DEFAULT_TEMPERATURE,
    class_count: int = 10,
    mode: str = "strict",
) -> np.ndarray:
    """Temperature-scaled differential class scores from detector signals.

    signals[..., 2c] is the positive and signals[..., 2c+1] the negative
    detector of class c. The score is (s+ - s-) / (s+ + s-) / temperature.
    ``mode``: "strict" raises on a (near) zero denominator, "train"
    regularizes it, "lenient" emits score 0 for degenerate classes.
    """
    signals = np.asarray(signals, dtype=np.float64)
    pos = signals[..., 0::2]
    neg = signals[..., 1::2]
    den = pos + neg
    if mode == "strict":
        if np.any(den <= EVAL_DEGENERATE_FLOOR):
            raise DegenerateSignalError(
                "a class received no detectable signal on both detectors"
            )
        return (pos - neg) / den / temperature
    if mode == "train":
        return (pos - neg) / np.maximum(den, TRAIN_DENOMINATOR_EPS) / temperature
    if mode == "lenient":
        safe = np.maximum(den, EVAL_DEGENERATE_FLOOR)
        z = (pos - neg) / safe / temperature
        return np.where(den <= EVAL_DEGENERATE_FLOOR, 0.0, z)
    raise ValueError(f"unknown mode {mode!r}")


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def d2nn_loss(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy of class scores against integer labels."""
    scores = np.atleast_2d(scores)
    labels = np.atleast_1d(labels)
    if np.any(labels < 0) or np.any(labels >= scores.shape[-1]):
        raise ValueError("label out of range")
    p = softmax(scores)
    picked = p[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(picked)))


def loss_score_gradient(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean SCE)/d(scores): (softmax - onehot) / batch."""
    scores = np.atleast_2d(scores)
    labels = np.atleast_1d(labels)
    g = softmax(scores)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def forward(
    model: D2NNModel,
    images: np.ndarray,
    mode: str = "strict",
    _tape: dict | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Full optical forward pass.

    Returns (scores (..., C), detector signals (..., 2C)). ``mode`` controls
    degenerate-denominator handling as in :func:`differential_scores`.
    """
    fe = model.bound_front_end
    u, fe_tape = fe.apply(images, latent=model.filter_latent)
    pre_layer = []
    for p in model.phases:
        u = _prop(u, model.grid, model.layer_spacing)
        pre_layer.append(u)
        u = u * np.exp(1j * p)
    u_det = _prop(u, model.grid, model.layer_to_detector)
    intensity = np.abs(u_det) ** 2
    signals = (
        np.tensordot(intensity, model.layout.masks, axes=([-2, -1], [1, 2]))
        * model.grid.pitch**2
    )
    scores = differential_scores(signals, model.temperature, model.class_count, mode)
    if _tape is not None:
        _tape.update(fe_tape=fe_tape, pre_layer=pre_layer, u_det=u_det, signals=signals)
    return scores, signals


def backward(
    model: D2NNModel,
    images: np.ndarray,
    labels: np.ndarray,
    mode: str = "train",
    score_sink: dict | None = None,
) -> tuple[float, GradientBundle]:
    """Loss and exact parameter gradients for a batch of labeled images."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    labels = np.atleast_1d(labels)
    tape: dict = {}
    scores, signals = forward(model, images, mode=mode, _tape=tape)
    scores = np.atleast_2d(scores)
    if score_sink is not None:
        score_sink["scores"] = scores
    loss = d2nn_loss(scores, labels)
    g_scores = loss_score_gradient(scores, labels)  # (B, C)

    # Quotient rule of the differential score, with the training regularizer.
    pos = signals[..., 0::2]
    neg = signals[..., 1::2]
    den = pos + neg
    if mode == "train":
        den = np.maximum(den, TRAIN_DENOMINATOR_EPS)
    k = model.temperature
    d_pos = g_scores * (2 * neg) / (k * den**2)
    d_neg = g_scores * (-2 * pos) / (k * den**2)
    d_signals = np.empty_like(signals)
    d_signals[..., 0::2] = d_pos
    d_signals[..., 1::2] = d_neg

    # Intensity readout: dL/du at the detector plane.
    weight_map = np.tensordot(d_signals, model.layout.masks, axes=([-1], [0]))
    g = 2.0 * model.grid.pitch**2 * tape["u_det"] * weight_map

    g = _prop_adj(g, model.grid, model.layer_to_detector)
    phase_grads: list[np.ndarray] = [None] * len(model.phases)
    for i in range(len(model.phases) - 1, -1, -1):
        t = np.exp(1j * model.phases[i])
        u_in = tape["pre_layer"][i]
        contrib = -np.imag(np.conj(g) * t * u_in)
        phase_grads[i] = contrib.sum(axis=tuple(range(contrib.ndim - 2)))
        g = np.conj(t) * g
        g = _prop_adj(g, model.grid, model.layer_spacing)

    latent_grad = None
    if tape["fe_tape"] is not None:
        latent_grad = model.bound_front_end.backward(g, tape["fe_tape"])
    return loss, GradientBundle(phase_grads, latent_grad)


def predict(model: D2NNModel, images: np.ndarray, mode: str = "lenient") -> np.ndarray:
    """Predicted class per image (ties resolved to the lowest class index)."""
    scores, _ = forward(model, images, mode=mode)
    return np.argmax(np.atleast_2d(scores), axis=-1)
