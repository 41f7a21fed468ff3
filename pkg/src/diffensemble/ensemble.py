"""Ensemble construction over a pool of trained diffractive classifiers.

Per-sample class scores of every pool member are evaluated once into a
score cache. Ensemble scores are weighted sums z_c = sum_k w_ck z_ck; the
weights are fit with Adam on softmax cross-entropy plus an L2 penalty.
Pruning iteratively removes members ranked last by the L1 norm of their
weight vectors, with periodic random elimination restricted to the bottom
fraction of the ranking, and the final ensemble is the best-on-validation
trace record within a size cap.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .network import (
    EVAL_DEGENERATE_FLOOR,
    D2NNModel,
    forward,
    loss_score_gradient,
    softmax,
)
from .trainer import EVAL_BATCH, AdamState, NonFiniteGradientError, adam_step

DEFAULT_ALPHA = 0.001
DEFAULT_OPT_STEPS = 10000
DEFAULT_WEIGHT_LR = 0.01

CACHE_MAGIC = b"D2SC"
CACHE_VERSION = 1


class CacheFormatError(ValueError):
    """Not a score cache file, or a malformed one."""


@dataclass
class ScoreCache:
    """Per-sample, per-network, per-class differential scores for one split."""

    split: str
    scores: np.ndarray  # (n_samples, n_networks, C)
    network_ids: tuple[str, ...]
    labels: np.ndarray
    degenerate_count: int = 0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.network_ids = tuple(str(i) for i in self.network_ids)
        if self.scores.ndim != 3:
            raise ValueError("scores must be (n_samples, n_networks, n_classes)")
        if len(set(self.network_ids)) != len(self.network_ids):
            raise ValueError("network identities must be unique")
        if self.scores.shape[1] != len(self.network_ids):
            raise ValueError("network identity list does not match score tensor")
        if self.labels.shape != (self.scores.shape[0],):
            raise ValueError("label vector length must equal n_samples")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @property
    def n_samples(self) -> int:
        return self.scores.shape[0]

    @property
    def n_networks(self) -> int:
        return self.scores.shape[1]

    @property
    def class_count(self) -> int:
        return self.scores.shape[2]

    def member_subset(self, ids: list[str]) -> "ScoreCache":
        """Cache restricted to the given members, in the given order."""
        index = {nid: k for k, nid in enumerate(self.network_ids)}
        cols = [index[i] for i in ids]
        return ScoreCache(
            split=self.split,
            scores=self.scores[:, cols, :],
            network_ids=tuple(ids),
            labels=self.labels,
            degenerate_count=self.degenerate_count,
        )


def build_score_cache(
    members: dict[str, D2NNModel], dataset: Dataset, split: str
) -> ScoreCache:
    """Evaluate every member on every sample once.

    A class whose detector pair reads no signal at all scores 0 for that
    sample; such entries are tallied in ``degenerate_count``.
    """
    if not members:
        raise ValueError("need at least one network")
    ids = tuple(members)
    per_network = []
    degenerate = 0
    for nid in ids:
        model = members[nid]
        chunks = []
        for lo in range(0, len(dataset), EVAL_BATCH):
            imgs = dataset.images[lo : lo + EVAL_BATCH]
            scores, signals = forward(model, imgs, mode="lenient")
            den = signals[..., 0::2] + signals[..., 1::2]
            degenerate += int(np.sum(den <= EVAL_DEGENERATE_FLOOR))
            chunks.append(np.atleast_2d(scores))
        per_network.append(np.concatenate(chunks, axis=0))
    return ScoreCache(
        split=split,
        scores=np.stack(per_network, axis=1),
        network_ids=ids,
        labels=dataset.labels,
        degenerate_count=degenerate,
    )


def save_cache(cache: ScoreCache, path: str | Path) -> None:
    """Write a cache; the score tensor is stored as 32-bit floats."""
    meta = json.dumps(
        {
            "split": cache.split,
            "network_ids": list(cache.network_ids),
            "degenerate_count": cache.degenerate_count,
        },
        sort_keys=True,
    ).encode()
    buf = bytearray()
    buf += CACHE_MAGIC
    buf += struct.pack("<I", CACHE_VERSION)
    buf += struct.pack("<III", *cache.scores.shape)
    buf += struct.pack("<I", len(meta)) + meta
    buf += np.ascontiguousarray(cache.labels, dtype="<u1").tobytes()
    buf += np.ascontiguousarray(cache.scores, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def load_cache(path: str | Path) -> ScoreCache:
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: not a score cache")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported cache version {version}")
    payload, (stored,) = raw[:-4], struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored:
        raise CacheFormatError(f"{path}: checksum mismatch")
    try:
        n_s, n_k, n_c = struct.unpack_from("<III", raw, 8)
        (meta_len,) = struct.unpack_from("<I", raw, 20)
        meta = json.loads(raw[24 : 24 + meta_len])
        off = 24 + meta_len
        labels = np.frombuffer(raw, dtype="<u1", count=n_s, offset=off)
        off += n_s
        scores = np.frombuffer(raw, dtype="<f4", count=n_s * n_k * n_c, offset=off)
        return ScoreCache(
            split=meta["split"],
            scores=scores.astype(np.float64).reshape(n_s, n_k, n_c),
            network_ids=tuple(meta["network_ids"]),
            labels=labels.astype(np.int64),
            degenerate_count=int(meta["degenerate_count"]),
        )
    except (struct.error, ValueError, KeyError) as exc:
        raise CacheFormatError(f"{path}: malformed score cache ({exc})") from exc


def export_cache_text(cache: ScoreCache, path: str | Path) -> None:
    """Tab-delimited dump: one row per (sample, network) with all class scores."""
    with open(path, "w") as fh:
        header = ["sample", "label", "network"] + [
            f"score_{c}" for c in range(cache.class_count)
        ]
        fh.write("\t".join(header) + "\n")
        for s in range(cache.n_samples):
            for k, nid in enumerate(cache.network_ids):
                row = [str(s), str(cache.labels[s]), nid]
                row += [f"{v:.9g}" for v in cache.scores[s, k]]
                fh.write("\t".join(row) + "\n")


def ensemble_scores(scores: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """z_c = sum_k w_ck z_ck for every sample: (S, K, C) x (K, C) -> (S, C)."""
    return np.einsum("skc,kc->sc", scores, weights)


def pruning_loss(cache: ScoreCache, weights: np.ndarray, alpha: float = DEFAULT_ALPHA) -> float:
    """Mean softmax cross-entropy of the weighted ensemble scores plus
    (alpha / 2) sum w^2."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (cache.n_networks, cache.class_count):
        raise ValueError("weight matrix shape does not match cache")
    z = ensemble_scores(cache.scores, weights)
    p = softmax(z)
    picked = p[np.arange(cache.n_samples), cache.labels]
    sce = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    return sce + 0.5 * alpha * float(np.sum(weights**2))


def pruning_loss_gradient(
    cache: ScoreCache, weights: np.ndarray, alpha: float = DEFAULT_ALPHA
) -> np.ndarray:
    """d(pruning_loss)/dw_ck, exact."""
    z = ensemble_scores(cache.scores, weights)
    gz = loss_score_gradient(z, cache.labels)
    return np.einsum("sc,skc->kc", gz, cache.scores) + alpha * weights


def weights_accuracy(cache: ScoreCache, weights: np.ndarray) -> float:
    """Fraction of samples whose weighted ensemble argmax matches the label."""
    preds = np.argmax(ensemble_scores(cache.scores, weights), axis=-1)
    return float(np.mean(preds == cache.labels))


@dataclass
class OptimizedWeights:
    final: np.ndarray
    best: np.ndarray
    best_accuracy: float
    best_step: int


def optimize_weights(
    cache: ScoreCache,
    alpha: float = DEFAULT_ALPHA,
    opt_steps: int = DEFAULT_OPT_STEPS,
    lr: float = DEFAULT_WEIGHT_LR,
    eval_every: int = 1,
) -> OptimizedWeights:
    """Full-batch Adam on the ensemble weights from a uniform 1/n start.

    Validation accuracy is tracked every ``eval_every`` steps (always
    including step 0 and the final step); the best-accuracy snapshot is
    returned alongside the final weights, ties going to the earlier step.
    """
    if cache.n_samples == 0:
        raise ValueError("cache is empty")
    w = np.full((cache.n_networks, cache.class_count), 1.0 / cache.n_networks)
    best_acc = weights_accuracy(cache, w)
    best_w, best_step = w.copy(), 0
    params = {"w": w}
    state = AdamState.for_params(params)
    for step in range(1, opt_steps + 1):
        loss = pruning_loss(cache, params["w"], alpha)
        if not math.isfinite(loss):
            raise NonFiniteGradientError(f"non-finite loss at step {step}")
        grad = pruning_loss_gradient(cache, params["w"], alpha)
        params = adam_step(params, {"w": grad}, state, lr)
        if step % eval_every == 0 or step == opt_steps:
            acc = weights_accuracy(cache, params["w"])
            if acc > best_acc:
                best_acc, best_w, best_step = acc, params["w"].copy(), step
    return OptimizedWeights(
        final=params["w"], best=best_w, best_accuracy=best_acc, best_step=best_step
    )


def rank_networks(weights: np.ndarray) -> np.ndarray:
    """Member indices from most to least significant by row L1 norm.

    Ties break toward the lower index.
    """
    l1 = np.sum(np.abs(np.asarray(weights)), axis=-1)
    return np.argsort(-l1, kind="stable")


def retain_fraction(i: int, r_scheme: str) -> float:
    """Per-iteration retained fraction r_i for the three published schemes."""
    if i < 0:
        raise ValueError("iteration must be nonnegative")
    if r_scheme == "i":
        return 0.98
    if r_scheme == "ii":
        return 0.98 + (0.9 - 0.98) * math.exp(-i / 2)
    if r_scheme == "iii":
        return 0.9 if i < 20 else (0.95 if i < 40 else 0.98)
    raise ValueError(f"unknown retain-fraction scheme {r_scheme!r}")


@dataclass(frozen=True)
class PruningConfig:
    """Knobs of one pruning run. ``T=None`` disables random elimination."""

    r_scheme: str = "iii"
    T: int | None = None
    m: int = 3
    p: float = 2 / 3
    N_max: int = 14
    alpha: float = DEFAULT_ALPHA
    opt_steps: int = DEFAULT_OPT_STEPS
    lr: float = DEFAULT_WEIGHT_LR
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        retain_fraction(0, self.r_scheme)
        if self.T is not None and self.T < 1:
            raise ValueError("random-elimination interval must be positive")
        if self.m < 1:
            raise ValueError("elimination ratio m must be positive")
        if not 0 < self.p <= 1:
            raise ValueError("random-elimination pool fraction must be in (0, 1]")
        if self.N_max < 1 or self.opt_steps < 0:
            raise ValueError("invalid size cap or step count")


def prune_step(
    members: list[str],
    i: int,
    cfg: PruningConfig,
    weights: np.ndarray,
    rng: np.random.Generator,
) -> tuple[list[str], str]:
    """One elimination round; returns (survivors, kind in {ranked, random}).

    Ranked rounds drop the bottom max(1, round(n (1 - r_i))) of the L1
    ranking. Every cfg.T-th round instead drops m times as many members,
    drawn uniformly from the bottom ceil(p n) of the ranking; the top
    floor((1 - p) n) are never touched by a random round. Elimination
    counts are capped so at least one member always survives.
    """
    n = len(members)
    if n < 2:
        raise ValueError("nothing to prune")
    ranked = [members[k] for k in rank_networks(weights)]
    n_d = max(1, round(n * (1 - retain_fraction(i, cfg.r_scheme))))
    if cfg.T is not None and i % cfg.T == 0:
        pool = ranked[n - math.ceil(cfg.p * n) :]
        count = min(cfg.m * n_d, n - 1, len(pool))
        drop = set(rng.choice(len(pool), size=count, replace=False))
        removed = {pool[j] for j in drop}
        kind = "random"
    else:
        removed = set(ranked[n - min(n_d, n - 1) :])
        kind = "ranked"
    return [mid for mid in members if mid not in removed], kind


@dataclass
class PruneRecord:
    iteration: int
    members: tuple[str, ...]
    size: int
    weights: np.ndarray
    best_accuracy: float
    elimination: str  # how this set was reduced: ranked | random | none


@dataclass
class PruningTrace:
    records: list[PruneRecord] = field(default_factory=list)


def run_pruning(cache: ScoreCache, cfg: PruningConfig) -> PruningTrace:
    """Iteratively optimize, record, and eliminate until one member is left.

    Weights restart from uniform at every iteration, so the trace depends
    only on the cache and the config seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5C]))
    members = list(cache.network_ids)
    trace = PruningTrace()
    i = 1
    while True:
        sub = cache.member_subset(members)
        opt = optimize_weights(sub, cfg.alpha, cfg.opt_steps, cfg.lr, cfg.eval_every)
        record = PruneRecord(
            iteration=i,
            members=tuple(members),
            size=len(members),
            weights=opt.best,
            best_accuracy=opt.best_accuracy,
            elimination="none",
        )
        trace.records.append(record)
        if len(members) == 1:
            return trace
        members, record.elimination = prune_step(members, i, cfg, opt.best, rng)
        i += 1


def select_ensemble(trace: PruningTrace, n_max: int) -> PruneRecord:
    """Best-on-validation trace record among those of size <= n_max.

    Ties prefer the smaller ensemble, then the earlier iteration.
    """
    if n_max < 1:
        raise ValueError("size cap must be positive")
    candidates = [r for r in trace.records if r.size <= n_max]
    if not candidates:
        raise ValueError("no trace record within the size cap")
    return min(candidates, key=lambda r: (-r.best_accuracy, r.size, r.iteration))


def equal_weights(n_networks: int, class_count: int = 10) -> np.ndarray:
    """Plain additive voting: all w_ck = 1."""
    return np.ones((n_networks, class_count))


def ensemble_predict(scores: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Predicted class per sample; exact ties go to the lowest class index."""
    z = ensemble_scores(np.asarray(scores, dtype=np.float64), weights)
    return np.argmax(z, axis=-1)


@dataclass
class MetricsReport:
    accuracy: float  # percent
    per_class_tpr: list[float | None]  # percent; None marks an empty class
    accuracy_per_network: float
    n_networks: int


def report_metrics(
    predictions: np.ndarray, labels: np.ndarray, n_networks: int, class_count: int = 10
) -> MetricsReport:
    """Overall accuracy, per-class true positive rates, and the
    accuracy-per-network efficiency figure, all in percent."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must have equal length")
    if n_networks < 1:
        raise ValueError("network count must be positive")
    accuracy = 100.0 * float(np.mean(predictions == labels))
    tpr: list[float | None] = []
    for c in range(class_count):
        mask = labels == c
        if not mask.any():
            tpr.append(None)
        else:
            tpr.append(100.0 * float(np.mean(predictions[mask] == c)))
    return MetricsReport(
        accuracy=accuracy,
        per_class_tpr=tpr,
        accuracy_per_network=accuracy / n_networks,
        n_networks=n_networks,
    )
