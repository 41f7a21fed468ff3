"""Training of individual diffractive classifiers and of pools.

Follows the reference training recipe: Adam with standard defaults, batch
size 8, learning rate 0.001 decaying by 0.7 every 8 epochs, left-right flip
augmentation with probability 0.5 on training batches only, and best-model
selection on validation accuracy. Pool members train fully independently with
per-member seeds, so results do not depend on worker count or completion
order.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, flip_left_right
from .frontend import FrontEndSpec
from .network import D2NNModel, backward, build_model, d2nn_loss, forward
from .optics import GridSpec

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

EVAL_BATCH = 256


class NonFiniteGradientError(RuntimeError):
    """Optimization aborted on a non-finite gradient."""


@dataclass(frozen=True)
class TrainHyperparams:
    batch_size: int = 8
    epochs: int = 50
    lr0: float = 0.001
    lr_decay: float = 0.7
    decay_every: int = 8
    flip_probability: float = 0.5
    seed: int = 0
    single_precision: bool = False

    def __post_init__(self):
        if min(self.batch_size, self.epochs, self.decay_every) <= 0:
            raise ValueError("batch size, epochs and decay interval must be positive")
        if self.lr0 <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("bad learning-rate schedule")
        if not 0 <= self.flip_probability <= 1:
            raise ValueError("flip probability must lie in [0, 1]")


def lr_schedule(
    epoch: int, lr0: float = 0.001, decay: float = 0.7, every: int = 8
) -> float:
    """Stepwise-decayed learning rate: lr0 * decay^floor(epoch / every)."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return lr0 * decay ** (epoch // every)


@dataclass
class AdamState:
    """First/second moment accumulators and step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @staticmethod
    def for_params(params: dict[str, np.ndarray]) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; mutates ``state``, returns new params."""
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient in {name!r} at step {t}"
            )
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g**2
        m_hat = state.m[name] / (1 - beta1**t)
        v_hat = state.v[name] / (1 - beta2**t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


def evaluate_accuracy(model: D2NNModel, dataset: Dataset) -> float:
    """Classification accuracy, batched, no augmentation."""
    correct = 0
    for lo in range(0, len(dataset), EVAL_BATCH):
        imgs = dataset.images[lo : lo + EVAL_BATCH]
        scores, _ = forward(model, imgs, mode="lenient")
        correct += int(np.sum(np.argmax(scores, axis=-1) == dataset.labels[lo : lo + EVAL_BATCH]))
    return correct / len(dataset)


@dataclass
class TrainResult:
    """Best-on-validation checkpoint parameters plus the full training log."""

    spec: FrontEndSpec
    best_params: dict[str, np.ndarray]
    best_epoch: int
    best_val_accuracy: float
    log: list[dict] = field(default_factory=list)

    def best_model(self, template: D2NNModel) -> D2NNModel:
        return template.replace_parameters(self.best_params)


def train_network(
    spec: FrontEndSpec,
    train: Dataset,
    validation: Dataset,
    hp: TrainHyperparams,
    grid: GridSpec,
    n_layers: int = 5,
) -> TrainResult:
    """Train one model and return the best-on-validation checkpoint.

    Deterministic for a fixed seed: a fresh generator drives phase
    initialization, epoch shuffles and flip coins in a fixed order.
    """
    if len(train) == 0 or len(validation) == 0:
        raise ValueError("train and validation splits must be nonempty")
    model = build_model(spec, grid, seed=hp.seed, n_layers=n_layers)
    params = model.parameters()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(np.random.SeedSequence([hp.seed, 0xD2]))
    best: tuple[float, int, dict] | None = None
    log: list[dict] = []
    for epoch in range(hp.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, hp.lr0, hp.lr_decay, hp.decay_every)
        order = rng.permutation(len(train))
        losses = []
        train_correct = 0
        for lo in range(0, len(order), hp.batch_size):
            idx = order[lo : lo + hp.batch_size]
            imgs = train.images[idx]
            labels = train.labels[idx]
            flips = rng.random(len(idx)) < hp.flip_probability
            if flips.any():
                imgs = imgs.copy()
                imgs[flips] = flip_left_right(imgs[flips])
            model = model.replace_parameters(params)
            sink: dict = {}
            loss, grads = backward(model, imgs, labels, score_sink=sink)
            train_correct += int(np.sum(np.argmax(sink["scores"], axis=-1) == labels))
            params = adam_step(params, grads.as_dict(), state, lr)
            if hp.single_precision:
                params = {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}
            losses.append(loss)
        model = model.replace_parameters(params)
        val_acc = evaluate_accuracy(model, validation)
        if best is None or val_acc > best[0]:
            best = (val_acc, epoch, {k: v.copy() for k, v in params.items()})
        log.append(
            {
                "epoch": epoch,
                "mean_loss": float(np.mean(losses)),
                "train_accuracy": train_correct / len(train),
                "val_accuracy": val_acc,
                "lr": lr,
                "wall_time": time.perf_counter() - t0,
            }
        )
    return TrainResult(
        spec=spec,
        best_params=best[2],
        best_epoch=best[1],
        best_val_accuracy=best[0],
        log=log,
    )


def member_seed(run_seed: int, index: int) -> int:
    """Stable per-member seed, independent of scheduling."""
    return int(np.random.SeedSequence([run_seed, index]).generate_state(1)[0])


def _train_one(args) -> tuple[int, TrainResult | None, str | None]:
    index, spec_dict, train, validation, hp, grid, n_layers = args
    try:
        spec = FrontEndSpec.from_dict(spec_dict)
        result = train_network(spec, train, validation, hp, grid, n_layers)
        return index, result, None
    except Exception as exc:  # a failed member is recorded, not fatal
        return index, None, f"{type(exc).__name__}: {exc}"


@dataclass
class PoolResult:
    results: dict[int, TrainResult]
    failures: dict[int, str]


def train_pool(
    specs: list[FrontEndSpec],
    train: Dataset,
    validation: Dataset,
    hp: TrainHyperparams,
    grid: GridSpec,
    n_layers: int = 5,
    worker_count: int = 1,
    indices: list[int] | None = None,
) -> PoolResult:
    """Train every pool member independently.

    Member k trains with seed ``member_seed(hp.seed, k)``; the outcome is
    identical for any worker count. ``indices`` assigns explicit member
    indices (and thus seeds) when training a subset of a larger pool.
    """
    if len(set(specs)) != len(specs):
        raise ValueError("pool specs must be pairwise distinct")
    if indices is None:
        indices = list(range(len(specs)))
    if len(indices) != len(specs) or len(set(indices)) != len(indices):
        raise ValueError("indices must be unique and match the spec list")
    jobs = [
        (
            k,
            spec.to_dict(),
            train,
            validation,
            replace(hp, seed=member_seed(hp.seed, k)),
            grid,
            n_layers,
        )
        for k, spec in zip(indices, specs)
    ]
    results: dict[int, TrainResult] = {}
    failures: dict[int, str] = {}
    if worker_count <= 1:
        outcomes = map(_train_one, jobs)
    else:
        pool = ProcessPoolExecutor(max_workers=worker_count)
        outcomes = pool.map(_train_one, jobs)
    for index, result, error in outcomes:
        if error is None:
            results[index] = result
        else:
            failures[index] = error
    if worker_count > 1:
        pool.shutdown()
    return PoolResult(results=results, failures=failures)
