"""Batch pipeline driver: prepare -> train -> cache -> prune -> report.

Every stage reads one YAML run configuration, writes its artifacts under
the run's output directory, and is idempotent: valid existing outputs are
skipped so an interrupted run resumes where it stopped. The first stage
freezes a resolved copy of the configuration in the run directory; later
stages refuse to run against a different configuration.

The test split is read only by the report stage; a persistent hash-chained
audit log across stages proves it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import load_model, save_model
from .data import DataError, DataSplits, SplitAudit, load_cifar10, split_manifest
from .ensemble import (
    PruningConfig,
    ScoreCache,
    build_score_cache,
    ensemble_predict,
    equal_weights,
    load_cache,
    report_metrics,
    run_pruning,
    save_cache,
)
from .frontend import FrontEndSpec, PoolCounts, sample_pool_specs
from .network import build_model
from .optics import GridSpec
from .trainer import (
    NonFiniteGradientError,
    TrainHyperparams,
    member_seed,
    train_pool,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

DATA_DIR_ENV = "DIFFENSEMBLE_DATA_DIR"

PROFILES = {
    "desk": {"side": 64, "n_layers": 3, "opt_steps": 500, "eval_every": 1},
    "paper": {"side": 128, "n_layers": 5, "opt_steps": 10000, "eval_every": 50},
}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass(frozen=True)
class RunConfig:
    """One experiment: data, pool, training, and pruning settings."""

    data_dir: str
    output_dir: str = "runs/default"
    profile: str = "desk"
    n_layers: int | None = None
    pool_size: int = 16
    pool_seed: int = 0
    train_subset: int | None = None
    validation_subset: int | None = None
    test_subset: int | None = None
    repeats: int = 3
    workers: int = 1
    n_max: int = 6
    train: TrainHyperparams = field(default_factory=TrainHyperparams)
    pruning: PruningConfig = field(default_factory=PruningConfig)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.pool_size < 1 or self.repeats < 1 or self.workers < 1:
            raise ConfigError("pool size, repeats and workers must be positive")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(PROFILES[self.profile]["side"])

    @property
    def layers(self) -> int:
        return self.n_layers or PROFILES[self.profile]["n_layers"]

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_mapping(raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("configuration root must be a mapping")
        raw = dict(raw)
        profile = raw.get("profile", "desk")
        nested = {}
        for key, cls in (("train", TrainHyperparams), ("pruning", PruningConfig)):
            sub = raw.pop(key, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"{key} section must be a mapping")
            sub = dict(sub)
            if key == "pruning" and profile in PROFILES:
                sub.setdefault("opt_steps", PROFILES[profile]["opt_steps"])
                sub.setdefault("eval_every", PROFILES[profile]["eval_every"])
            known = {f.name for f in fields(cls)}
            unknown = set(sub) - known
            if unknown:
                raise ConfigError(f"unknown {key} keys: {sorted(unknown)}")
            try:
                nested[key] = cls(**sub)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad {key} section: {exc}") from exc
        known = {f.name for f in fields(RunConfig)} - {"train", "pruning"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        if "data_dir" not in raw:
            env = os.environ.get(DATA_DIR_ENV)
            if not env:
                raise ConfigError(f"data_dir is required (or set {DATA_DIR_ENV})")
            raw["data_dir"] = env
        try:
            return RunConfig(**raw, **nested)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @staticmethod
    def from_yaml(path: str | Path) -> "RunConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file is not valid YAML: {exc}") from exc
        return RunConfig.from_mapping(raw or {})


def freeze_config(cfg: RunConfig) -> None:
    """Write the resolved config once; refuse to mix configs in one run dir."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    frozen = cfg.out / "config_resolved.json"
    resolved = json.dumps(cfg.to_dict(), sort_keys=True, indent=2)
    if frozen.exists():
        if frozen.read_text() != resolved:
            raise ConfigError(
                f"{frozen} was written by a different configuration; "
                "use a fresh output directory"
            )
    else:
        frozen.write_text(resolved)


# -- persistent split-access audit ------------------------------------------


def load_audit(cfg: RunConfig) -> SplitAudit:
    audit = SplitAudit()
    path = cfg.out / "audit.log"
    if path.exists():
        for line in path.read_text().splitlines():
            split, consumer, digest = line.split("\t")
            audit.record(split, consumer)
            if audit.digest != digest:
                raise DataError(f"{path}: audit chain broken at {split}:{consumer}")
    return audit


def save_audit(cfg: RunConfig, audit: SplitAudit) -> None:
    chain = SplitAudit()
    lines = []
    for split, consumer in audit.entries:
        chain.record(split, consumer)
        lines.append(f"{split}\t{consumer}\t{chain.digest}")
    (cfg.out / "audit.log").write_text("".join(l + "\n" for l in lines))


def load_splits(cfg: RunConfig) -> DataSplits:
    splits = load_cifar10(cfg.data_dir)
    train, validation, test = splits.train, splits.validation, splits.test
    if cfg.train_subset:
        train = train.subset(cfg.train_subset)
    if cfg.validation_subset:
        validation = validation.subset(cfg.validation_subset)
    if cfg.test_subset:
        test = test.subset(cfg.test_subset)
    return DataSplits(train, validation, test, audit=load_audit(cfg))


# -- stages ------------------------------------------------------------------


def cmd_prepare(cfg: RunConfig) -> int:
    """Validate the data directory and freeze a split manifest."""
    freeze_config(cfg)
    splits = load_splits(cfg)
    for name in ("train", "validation", "test"):
        splits.take(name, "prepare")
    manifest = split_manifest(splits)
    path = cfg.out / "manifest.json"
    text = json.dumps(manifest, sort_keys=True, indent=2)
    if path.exists() and path.read_text() != text:
        print(f"error: data under {cfg.data_dir} changed since prepare", file=sys.stderr)
        return EXIT_DATA
    path.write_text(text)
    save_audit(cfg, splits.audit)
    for name in ("train", "validation", "test"):
        print(f"{name}: {manifest[name]['size']} samples  sha256 {manifest[name]['sha256'][:16]}")
    return EXIT_OK


def _require_manifest(cfg: RunConfig, splits: DataSplits) -> None:
    path = cfg.out / "manifest.json"
    if not path.exists():
        raise DataError(f"{path} missing; run the prepare stage first")
    stored = json.loads(path.read_text())
    current = split_manifest(splits)
    for name in ("train", "validation"):
        if stored[name]["sha256"] != current[name]["sha256"]:
            raise DataError(f"{name} split no longer matches the prepare manifest")


def _checkpoint_path(cfg: RunConfig, index: int) -> Path:
    return cfg.out / "checkpoints" / f"member_{index:03d}.d2nn"


def _pool_specs(cfg: RunConfig) -> list[FrontEndSpec]:
    counts = PoolCounts.proportional(cfg.pool_size)
    return sample_pool_specs(cfg.pool_seed, counts, grid=cfg.grid)


def cmd_train(cfg: RunConfig) -> int:
    """Train the pool; members with an existing valid checkpoint are skipped."""
    freeze_config(cfg)
    splits = load_splits(cfg)
    _require_manifest(cfg, splits)
    train = splits.take("train", "train")
    validation = splits.take("validation", "train")
    save_audit(cfg, splits.audit)
    specs = _pool_specs(cfg)
    (cfg.out / "checkpoints").mkdir(parents=True, exist_ok=True)
    pending = []
    for k, spec in enumerate(specs):
        path = _checkpoint_path(cfg, k)
        if path.exists():
            try:
                if load_model(path).front_end == spec:
                    continue
            except ValueError:
                pass
            path.unlink()
        pending.append(k)
    print(f"pool of {len(specs)}: {len(specs) - len(pending)} done, {len(pending)} to train")
    failures = {}
    # one pool call per member keeps per-member seeds and lets an
    # interrupted run resume at the next member
    batches = (
        [[k] for k in pending]
        if cfg.workers == 1
        else [pending[i : i + cfg.workers] for i in range(0, len(pending), cfg.workers)]
    )
    for batch in batches:
        result = train_pool(
            [specs[k] for k in batch], train, validation, cfg.train, cfg.grid,
            n_layers=cfg.layers, worker_count=cfg.workers, indices=batch,
        )
        for k, r in sorted(result.results.items()):
            template = build_model(
                specs[k], cfg.grid, seed=member_seed(cfg.train.seed, k), n_layers=cfg.layers
            )
            save_model(r.best_model(template), _checkpoint_path(cfg, k))
            print(
                f"member {k:3d}  best epoch {r.best_epoch}  "
                f"val {100 * r.best_val_accuracy:.2f}",
                flush=True,
            )
        failures.update(result.failures)
    for k, err in failures.items():
        print(f"warning: member {k} failed: {err}", file=sys.stderr)
    return EXIT_NUMERIC if failures else EXIT_OK


def _load_pool(cfg: RunConfig) -> dict[str, object]:
    members = {}
    missing = []
    for k in range(cfg.pool_size):
        path = _checkpoint_path(cfg, k)
        if path.exists():
            members[f"member_{k:03d}"] = load_model(path)
        else:
            missing.append(k)
    if missing:
        print(f"warning: missing checkpoints for members {missing}", file=sys.stderr)
    if not members:
        raise DataError("no checkpoints found; run the train stage first")
    return members


def cmd_cache(cfg: RunConfig) -> int:
    """Score every trained member on the validation split, once."""
    freeze_config(cfg)
    path = cfg.out / "cache_validation.d2sc"
    if path.exists():
        print(f"{path} already present, skipping")
        return EXIT_OK
    splits = load_splits(cfg)
    validation = splits.take("validation", "cache")
    save_audit(cfg, splits.audit)
    members = _load_pool(cfg)
    cache = build_score_cache(members, validation, "validation")
    save_cache(cache, path)
    if cache.degenerate_count:
        print(f"warning: {cache.degenerate_count} degenerate class signals", file=sys.stderr)
    print(f"cached {cache.n_samples} x {cache.n_networks} x {cache.class_count} scores")
    return EXIT_OK


def _trace_path(cfg: RunConfig, repeat: int) -> Path:
    return cfg.out / f"trace_{repeat:02d}.json"


def _trace_to_json(trace) -> list[dict]:
    return [
        {
            "iteration": r.iteration,
            "members": list(r.members),
            "size": r.size,
            "weights": r.weights.tolist(),
            "best_accuracy": r.best_accuracy,
            "elimination": r.elimination,
        }
        for r in trace.records
    ]


def cmd_prune(cfg: RunConfig) -> int:
    """Run the pruning loop on the validation cache, once per repeat."""
    freeze_config(cfg)
    cache_path = cfg.out / "cache_validation.d2sc"
    if not cache_path.exists():
        raise DataError(f"{cache_path} missing; run the cache stage first")
    cache = load_cache(cache_path)
    selected = []
    for rep in range(cfg.repeats):
        path = _trace_path(cfg, rep)
        if not path.exists():
            run_cfg = dataclasses.replace(
                cfg.pruning, seed=member_seed(cfg.pruning.seed, rep)
            )
            trace = run_pruning(cache, run_cfg)
            path.write_text(json.dumps(_trace_to_json(trace), indent=1))
        records = json.loads(path.read_text())
        best = _select_from_json(records, cfg.n_max)
        selected.append(best["best_accuracy"])
        print(f"repeat {rep}: ensemble of {best['size']}  val {100 * best['best_accuracy']:.2f}")
    mean, std = 100 * float(np.mean(selected)), 100 * float(np.std(selected))
    print(f"selected validation accuracy over {cfg.repeats} repeats: {mean:.2f} +- {std:.2f}")
    return EXIT_OK


def _select_from_json(records: list[dict], n_max: int) -> dict:
    candidates = [r for r in records if r["size"] <= n_max]
    if not candidates:
        raise DataError("no pruning record within the size cap")
    return min(candidates, key=lambda r: (-r["best_accuracy"], r["size"], r["iteration"]))


def _write_table(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join("" if v is None else str(v) for v in row) + "\n")


def cmd_report(cfg: RunConfig) -> int:
    """Evaluate selected ensembles on the test split and emit tables/plots."""
    freeze_config(cfg)
    traces = [
        json.loads(_trace_path(cfg, rep).read_text())
        for rep in range(cfg.repeats)
        if _trace_path(cfg, rep).exists()
    ]
    if not traces:
        raise DataError("no pruning traces found; run the prune stage first")
    val_cache = load_cache(cfg.out / "cache_validation.d2sc")
    test_path = cfg.out / "cache_test.d2sc"
    if test_path.exists():
        test_cache = load_cache(test_path)
    else:
        splits = load_splits(cfg)
        test = splits.take("test", "report")
        save_audit(cfg, splits.audit)
        test_cache = build_score_cache(_load_pool(cfg), test, "test")
        save_cache(test_cache, test_path)

    def split_accuracy(cache: ScoreCache, ids, weights) -> float:
        sub = cache.member_subset(list(ids))
        preds = ensemble_predict(sub.scores, np.asarray(weights))
        return 100 * float(np.mean(preds == sub.labels))

    # individual members (Fig. 3d analogue)
    ids = list(test_cache.network_ids)
    indiv_rows = []
    for nid in ids:
        v = split_accuracy(val_cache, [nid], equal_weights(1, test_cache.class_count))
        t = split_accuracy(test_cache, [nid], equal_weights(1, test_cache.class_count))
        indiv_rows.append([nid, f"{v:.2f}", f"{t:.2f}"])
    _write_table(cfg.out / "individual_accuracy.tsv", ["network", "validation", "test"], indiv_rows)

    # selected ensemble per repeat, optimized and equal weights
    summary_rows = []
    tpr_rows = []
    for rep, records in enumerate(traces):
        best = _select_from_json(records, cfg.n_max)
        members, w = best["members"], np.asarray(best["weights"])
        n = best["size"]
        test_sub = test_cache.member_subset(members)
        preds = ensemble_predict(test_sub.scores, w)
        metrics = report_metrics(preds, test_sub.labels, n, test_cache.class_count)
        equal_test = split_accuracy(test_cache, members, equal_weights(n, test_cache.class_count))
        summary_rows.append(
            [rep, n, f"{100 * best['best_accuracy']:.2f}", f"{metrics.accuracy:.2f}",
             f"{equal_test:.2f}", f"{metrics.accuracy_per_network:.3f}"]
        )
        tpr_rows.append([rep] + [None if t is None else f"{t:.2f}" for t in metrics.per_class_tpr])
    _write_table(
        cfg.out / "ensemble_summary.tsv",
        ["repeat", "size", "val_acc", "test_acc", "test_acc_equal_weights", "acc_per_network"],
        summary_rows,
    )
    _write_table(
        cfg.out / "per_class_tpr.tsv",
        ["repeat"] + [f"class_{c}" for c in range(test_cache.class_count)],
        tpr_rows,
    )

    # ensemble size vs size cap (Fig. 2c analogue), first repeat
    caps = range(1, len(ids) + 1)
    scatter = [[cap, _select_from_json(traces[0], cap)["size"]] for cap in caps]
    _write_table(cfg.out / "size_vs_cap.tsv", ["n_max", "selected_n"], scatter)

    _render_plots(cfg, indiv_rows, summary_rows, scatter)
    for row in summary_rows:
        print(
            f"repeat {row[0]}: n={row[1]}  val {row[2]}  test {row[3]}  "
            f"equal-weights test {row[4]}"
        )
    accs = [float(r[3]) for r in summary_rows]
    print(f"test accuracy: {np.mean(accs):.2f} +- {np.std(accs):.2f}")
    return EXIT_OK


def _render_plots(cfg: RunConfig, indiv_rows, summary_rows, scatter) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4))
    accs = [float(r[2]) for r in indiv_rows]
    ax.bar(range(len(accs)), accs, color="tab:gray", label="individual (test)")
    for row in summary_rows:
        ax.axhline(float(row[3]), color="tab:red", lw=1)
    ax.set_xlabel("pool member")
    ax.set_ylabel("accuracy [%]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(cfg.out / "individual_vs_ensemble.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot([s[0] for s in scatter], [s[1] for s in scatter], "o-")
    ax.set_xlabel("size cap")
    ax.set_ylabel("selected ensemble size")
    fig.tight_layout()
    fig.savefig(cfg.out / "size_vs_cap.png", dpi=120)
    plt.close(fig)


def verify_isolation(cfg: RunConfig, allowed: set[str] = frozenset({"prepare", "report"})) -> bool:
    """True iff the persistent audit shows the test split was only touched
    by the manifest-writing prepare stage and the report stage."""
    return load_audit(cfg).verify_test_isolation(allowed)


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffensemble",
        description="Train, prune and report ensembles of diffractive optical classifiers.",
    )
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--seed", type=int, help="override the training seed")
    parser.add_argument("--workers", type=int, help="override the worker count")
    parser.add_argument("--profile", choices=sorted(PROFILES), help="override the grid profile")
    parser.add_argument("--repeat", type=int, help="override the pruning repeat count")
    parser.add_argument(
        "command", choices=["prepare", "train", "cache", "prune", "report"]
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = RunConfig.from_yaml(args.config)
        overrides = {}
        if args.profile is not None:
            overrides["profile"] = args.profile
        if args.workers is not None:
            overrides["workers"] = args.workers
        if args.repeat is not None:
            overrides["repeats"] = args.repeat
        if args.seed is not None:
            overrides["train"] = dataclasses.replace(cfg.train, seed=args.seed)
        if overrides:
            cfg = dataclasses.replace(cfg, **overrides)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    stage = {
        "prepare": cmd_prepare,
        "train": cmd_train,
        "cache": cmd_cache,
        "prune": cmd_prune,
        "report": cmd_report,
    }[args.command]
    try:
        return stage(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteGradientError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
